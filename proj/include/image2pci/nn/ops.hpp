#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "image2pci/nn/tensor.hpp"

// Differentiable operators. Image tensors are NCHW; every op checks shapes and
// throws ShapeError naming the offending shapes.
namespace i2p::nn {
inline namespace I2P_NN_ABI {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, Real s);
Tensor add_scalar(const Tensor& a, Real s);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor matmul(const Tensor& a, const Tensor& b);  // (M,K) x (K,N)
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);  // x (N,in), weight (out,in), bias (out) or undefined

// weight (O, C, k, k); bias (O) may be undefined.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int pad);
int conv_output_size(int in, int kernel, int stride, int pad);

// Padding is implicit -inf; ties resolve to the first maximum in scan order.
Tensor max_pool2d(const Tensor& x, int kernel, int stride, int pad = 0);
Tensor upsample_nearest2x(const Tensor& x);
Tensor adaptive_avg_pool2d(const Tensor& x, int out_h, int out_w);

Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor reshape(const Tensor& x, Shape shape);
Tensor flatten(const Tensor& x);  // (N, ...) -> (N, rest)
// Flat-index gather into a 1-D tensor; backward scatter-adds.
Tensor gather(const Tensor& x, const std::vector<std::size_t>& indices);

Tensor leaky_relu(const Tensor& x, Real alpha);
Tensor silu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

struct BatchNormState {
    Tensor running_mean;
    Tensor running_var;
    Real momentum = 0.1f;
    Real eps = 1e-5f;
};
// Training mode normalises with batch statistics (biased variance) and updates
// the running estimates (unbiased variance); eval mode uses the running estimates.
Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state, bool training);

// Softmax over the channel axis of an NCHW tensor (not differentiable; inference helper).
Tensor softmax_channels(const Tensor& logits);

// Mean over N*H*W pixels of -log softmax(logits)[label]; labels are row-major (N,H,W).
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<std::int32_t>& labels);
Tensor mse(const Tensor& pred, const Tensor& target);
Tensor bce_with_logits(const Tensor& logits, const Tensor& target);
// Boxes are (P, 4) as (cx, cy, w, h); returns mean(1 - IoU). Targets carry no gradient.
Tensor iou_loss(const Tensor& pred, const Tensor& target);
double box_iou_cxcywh(const Real* a, const Real* b);

} // namespace I2P_NN_ABI
} // namespace i2p::nn
