#pragma once

#include <vector>

#include "image2pci/nn/tensor.hpp"

namespace i2p::nn {
inline namespace I2P_NN_ABI {

void zero_grad(std::vector<Tensor>& params);

// v <- momentum * v + g;  theta <- theta - lr * v.
// A parameter that never received a gradient is left unchanged.
class Sgd {
public:
    Sgd(std::vector<Tensor> params, Real momentum);
    void step(Real lr);

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<Real>> velocity_;
    Real momentum_;
};

// m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2;
// theta <- theta - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps).
class Adam {
public:
    Adam(std::vector<Tensor> params, Real beta1 = 0.9f, Real beta2 = 0.999f, Real eps = 1e-8f);
    void step(Real lr);
    int steps() const noexcept { return t_; }

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<Real>> m_;
    std::vector<std::vector<Real>> v_;
    Real beta1_, beta2_, eps_;
    int t_ = 0;
};

} // namespace I2P_NN_ABI
} // namespace i2p::nn
