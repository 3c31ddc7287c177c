#include "image2pci/nn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Core>

namespace i2p::nn {
inline namespace I2P_NN_ABI {

namespace {

using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

void require_rank(const Tensor& t, int rank, const char* op) {
    if (t.rank() != rank) {
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(t.shape()));
    }
}

Real sigmoidf(Real x) {
    if (x >= 0.0f) return 1.0f / (1.0f + std::exp(-x));
    const Real e = std::exp(x);
    return e / (1.0f + e);
}

// Unary elementwise op whose derivative depends on input and output values.
template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& x, const char* name, Fwd fwd, Deriv deriv) {
    const auto in = x.data();
    std::vector<Real> v(in.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = fwd(in[i]);
    return make_result(x.shape(), std::move(v), {x}, name, [px = x.node(), deriv](Node* out) {
        return [px, out, deriv] {
            const Real* g = out->grad.data();
            Real* gx = px->grad_data();
            for (std::size_t i = 0; i < out->value.size(); ++i) gx[i] += g[i] * deriv(px->value[i], out->value[i]);
        };
    });
}

void im2col(const Real* x, int C, int H, int W, int k, int stride, int pad, int OH, int OW, Real* col) {
    const int P = OH * OW;
    for (int c = 0; c < C; ++c) {
        for (int ki = 0; ki < k; ++ki) {
            for (int kj = 0; kj < k; ++kj) {
                Real* row = col + static_cast<std::size_t>((c * k + ki) * k + kj) * P;
                for (int oh = 0; oh < OH; ++oh) {
                    const int ih = oh * stride - pad + ki;
                    Real* dst = row + oh * OW;
                    if (ih < 0 || ih >= H) {
                        std::fill(dst, dst + OW, 0.0f);
                        continue;
                    }
                    const Real* src = x + (static_cast<std::size_t>(c) * H + ih) * W;
                    for (int ow = 0; ow < OW; ++ow) {
                        const int iw = ow * stride - pad + kj;
                        dst[ow] = (iw >= 0 && iw < W) ? src[iw] : 0.0f;
                    }
                }
            }
        }
    }
}

void col2im_add(const Real* col, int C, int H, int W, int k, int stride, int pad, int OH, int OW, Real* x) {
    const int P = OH * OW;
    for (int c = 0; c < C; ++c) {
        for (int ki = 0; ki < k; ++ki) {
            for (int kj = 0; kj < k; ++kj) {
                const Real* row = col + static_cast<std::size_t>((c * k + ki) * k + kj) * P;
                for (int oh = 0; oh < OH; ++oh) {
                    const int ih = oh * stride - pad + ki;
                    if (ih < 0 || ih >= H) continue;
                    Real* dst = x + (static_cast<std::size_t>(c) * H + ih) * W;
                    const Real* src = row + oh * OW;
                    for (int ow = 0; ow < OW; ++ow) {
                        const int iw = ow * stride - pad + kj;
                        if (iw >= 0 && iw < W) dst[iw] += src[ow];
                    }
                }
            }
        }
    }
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<Real> v(a.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] + b.data()[i];
    return make_result(a.shape(), std::move(v), {a, b}, "add", [pa = a.node(), pb = b.node()](Node* out) {
        return [pa, pb, out] {
            const Real* g = out->grad.data();
            const std::size_t n = out->value.size();
            if (pa->requires_grad) {
                Real* ga = pa->grad_data();
                for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
            }
            if (pb->requires_grad) {
                Real* gb = pb->grad_data();
                for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
            }
        };
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<Real> v(a.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] - b.data()[i];
    return make_result(a.shape(), std::move(v), {a, b}, "sub", [pa = a.node(), pb = b.node()](Node* out) {
        return [pa, pb, out] {
            const Real* g = out->grad.data();
            const std::size_t n = out->value.size();
            if (pa->requires_grad) {
                Real* ga = pa->grad_data();
                for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
            }
            if (pb->requires_grad) {
                Real* gb = pb->grad_data();
                for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i];
            }
        };
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<Real> v(a.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * b.data()[i];
    return make_result(a.shape(), std::move(v), {a, b}, "mul", [pa = a.node(), pb = b.node()](Node* out) {
        return [pa, pb, out] {
            const Real* g = out->grad.data();
            const std::size_t n = out->value.size();
            if (pa->requires_grad) {
                Real* ga = pa->grad_data();
                for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * pb->value[i];
            }
            if (pb->requires_grad) {
                Real* gb = pb->grad_data();
                for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * pa->value[i];
            }
        };
    });
}

Tensor scale(const Tensor& a, Real s) {
    return unary(a, "scale", [s](Real x) { return x * s; }, [s](Real, Real) { return s; });
}

Tensor add_scalar(const Tensor& a, Real s) {
    return unary(a, "add_scalar", [s](Real x) { return x + s; }, [](Real, Real) { return 1.0f; });
}

Tensor sum(const Tensor& a) {
    const Real s = reduce_sum(a.data().data(), a.numel());
    return make_result({1}, {s}, {a}, "sum", [pa = a.node()](Node* out) {
        return [pa, out] {
            const Real g = out->grad[0];
            Real* ga = pa->grad_data();
            for (std::size_t i = 0; i < pa->value.size(); ++i) ga[i] += g;
        };
    });
}

Tensor mean(const Tensor& a) {
    const Real n = static_cast<Real>(a.numel());
    const Real s = reduce_sum(a.data().data(), a.numel()) / n;
    return make_result({1}, {s}, {a}, "mean", [pa = a.node(), n](Node* out) {
        return [pa, out, n] {
            const Real g = out->grad[0] / n;
            Real* ga = pa->grad_data();
            for (std::size_t i = 0; i < pa->value.size(); ++i) ga[i] += g;
        };
    });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    if (a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    const int M = a.dim(0), K = a.dim(1), N = b.dim(1);
    std::vector<Real> v(static_cast<std::size_t>(M) * N);
    MapMat(v.data(), M, N).noalias() = ConstMapMat(a.data().data(), M, K) * ConstMapMat(b.data().data(), K, N);
    return make_result({M, N}, std::move(v), {a, b}, "matmul", [pa = a.node(), pb = b.node(), M, K, N](Node* out) {
        return [pa, pb, out, M, K, N] {
            ConstMapMat g(out->grad.data(), M, N);
            if (pa->requires_grad) {
                MapMat(pa->grad_data(), M, K).noalias() += g * ConstMapMat(pb->value.data(), K, N).transpose();
            }
            if (pb->requires_grad) {
                MapMat(pb->grad_data(), K, N).noalias() += ConstMapMat(pa->value.data(), M, K).transpose() * g;
            }
        };
    });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    require_rank(x, 2, "linear");
    require_rank(weight, 2, "linear");
    const int N = x.dim(0), IN = x.dim(1), OUT = weight.dim(0);
    if (weight.dim(1) != IN) {
        throw ShapeError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
    }
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != OUT)) {
        throw ShapeError("linear: bias " + shape_str(bias.shape()) + " vs weight " + shape_str(weight.shape()));
    }
    std::vector<Real> v(static_cast<std::size_t>(N) * OUT);
    MapMat y(v.data(), N, OUT);
    y.noalias() = ConstMapMat(x.data().data(), N, IN) * ConstMapMat(weight.data().data(), OUT, IN).transpose();
    if (bias.defined()) {
        for (int n = 0; n < N; ++n)
            for (int o = 0; o < OUT; ++o) y(n, o) += bias.data()[static_cast<std::size_t>(o)];
    }
    return make_result(
        {N, OUT}, std::move(v), {x, weight, bias}, "linear",
        [px = x.node(), pw = weight.node(), pb = bias.defined() ? bias.node() : nullptr, N, IN, OUT](Node* out) {
            return [px, pw, pb, out, N, IN, OUT] {
                ConstMapMat g(out->grad.data(), N, OUT);
                if (px->requires_grad) {
                    MapMat(px->grad_data(), N, IN).noalias() += g * ConstMapMat(pw->value.data(), OUT, IN);
                }
                if (pw->requires_grad) {
                    MapMat(pw->grad_data(), OUT, IN).noalias() += g.transpose() * ConstMapMat(px->value.data(), N, IN);
                }
                if (pb != nullptr && pb->requires_grad) {
                    Real* gb = pb->grad_data();
                    for (int n = 0; n < N; ++n)
                        for (int o = 0; o < OUT; ++o) gb[o] += g(n, o);
                }
            };
        });
}

int conv_output_size(int in, int kernel, int stride, int pad) {
    if (stride <= 0 || kernel <= 0 || pad < 0) throw ShapeError("conv: invalid kernel/stride/pad");
    const int span = in + 2 * pad - kernel;
    if (span < 0) throw ShapeError("conv: kernel larger than padded input");
    return span / stride + 1;
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int pad) {
    require_rank(x, 4, "conv2d");
    require_rank(weight, 4, "conv2d");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int O = weight.dim(0), k = weight.dim(2);
    if (weight.dim(1) != C || weight.dim(3) != k) {
        throw ShapeError("conv2d: input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
    }
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != O)) {
        throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " vs weight " + shape_str(weight.shape()));
    }
    const int OH = conv_output_size(H, k, stride, pad);
    const int OW = conv_output_size(W, k, stride, pad);
    const int P = OH * OW;
    const int CKK = C * k * k;
    const bool pointwise = (k == 1 && stride == 1 && pad == 0);

    std::vector<Real> v(static_cast<std::size_t>(N) * O * P);
    std::vector<Real> col(pointwise ? 0 : static_cast<std::size_t>(CKK) * P);
    ConstMapMat wmat(weight.data().data(), O, CKK);
    for (int n = 0; n < N; ++n) {
        const Real* xn = x.data().data() + static_cast<std::size_t>(n) * C * H * W;
        const Real* cols = xn;
        if (!pointwise) {
            im2col(xn, C, H, W, k, stride, pad, OH, OW, col.data());
            cols = col.data();
        }
        MapMat y(v.data() + static_cast<std::size_t>(n) * O * P, O, P);
        y.noalias() = wmat * ConstMapMat(cols, CKK, P);
        if (bias.defined()) {
            for (int o = 0; o < O; ++o) y.row(o).array() += bias.data()[static_cast<std::size_t>(o)];
        }
    }
    return make_result(
        {N, O, OH, OW}, std::move(v), {x, weight, bias}, "conv2d",
        [px = x.node(), pw = weight.node(), pb = bias.defined() ? bias.node() : nullptr, N, C, H, W, O, k, stride, pad,
         OH, OW, P, CKK, pointwise](Node* out) {
            return [=] {
                std::vector<Real> col(pointwise ? 0 : static_cast<std::size_t>(CKK) * P);
                std::vector<Real> dcol(pointwise ? 0 : static_cast<std::size_t>(CKK) * P);
                ConstMapMat wmat(pw->value.data(), O, CKK);
                for (int n = 0; n < N; ++n) {
                    ConstMapMat g(out->grad.data() + static_cast<std::size_t>(n) * O * P, O, P);
                    const Real* xn = px->value.data() + static_cast<std::size_t>(n) * C * H * W;
                    if (pw->requires_grad) {
                        const Real* cols = xn;
                        if (!pointwise) {
                            im2col(xn, C, H, W, k, stride, pad, OH, OW, col.data());
                            cols = col.data();
                        }
                        MapMat(pw->grad_data(), O, CKK).noalias() += g * ConstMapMat(cols, CKK, P).transpose();
                    }
                    if (pb != nullptr && pb->requires_grad) {
                        Real* gb = pb->grad_data();
                        for (int o = 0; o < O; ++o) gb[o] += g.row(o).sum();
                    }
                    if (px->requires_grad) {
                        Real* gx = px->grad_data() + static_cast<std::size_t>(n) * C * H * W;
                        if (pointwise) {
                            MapMat(gx, CKK, P).noalias() += wmat.transpose() * g;
                        } else {
                            MapMat(dcol.data(), CKK, P).noalias() = wmat.transpose() * g;
                            col2im_add(dcol.data(), C, H, W, k, stride, pad, OH, OW, gx);
                        }
                    }
                }
            };
        });
}

Tensor max_pool2d(const Tensor& x, int kernel, int stride, int pad) {
    require_rank(x, 4, "max_pool2d");
    if (pad * 2 > kernel) throw ShapeError("max_pool2d: padding must be at most half the kernel");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int OH = conv_output_size(H, kernel, stride, pad);
    const int OW = conv_output_size(W, kernel, stride, pad);
    std::vector<Real> v(static_cast<std::size_t>(N) * C * OH * OW);
    std::vector<std::uint32_t> arg(v.size());
    const Real* in = x.data().data();
    for (int nc = 0; nc < N * C; ++nc) {
        const Real* plane = in + static_cast<std::size_t>(nc) * H * W;
        for (int oh = 0; oh < OH; ++oh) {
            for (int ow = 0; ow < OW; ++ow) {
                Real best = -std::numeric_limits<Real>::infinity();
                std::uint32_t best_i = 0;
                bool found = false;
                for (int ki = 0; ki < kernel; ++ki) {
                    const int ih = oh * stride - pad + ki;
                    if (ih < 0 || ih >= H) continue;
                    for (int kj = 0; kj < kernel; ++kj) {
                        const int iw = ow * stride - pad + kj;
                        if (iw < 0 || iw >= W) continue;
                        const Real val = plane[ih * W + iw];
                        if (!found || val > best) {
                            best = val;
                            best_i = static_cast<std::uint32_t>(ih * W + iw);
                            found = true;
                        }
                    }
                }
                const std::size_t o = (static_cast<std::size_t>(nc) * OH + oh) * OW + ow;
                v[o] = best;
                arg[o] = best_i;
            }
        }
    }
    const std::size_t plane_in = static_cast<std::size_t>(H) * W;
    const std::size_t plane_out = static_cast<std::size_t>(OH) * OW;
    return make_result({N, C, OH, OW}, std::move(v), {x}, "max_pool2d",
                       [px = x.node(), arg = std::move(arg), plane_in, plane_out](Node* out) {
                           return [px, out, arg, plane_in, plane_out] {
                               Real* gx = px->grad_data();
                               const Real* g = out->grad.data();
                               for (std::size_t o = 0; o < arg.size(); ++o) {
                                   gx[(o / plane_out) * plane_in + arg[o]] += g[o];
                               }
                           };
                       });
}

Tensor upsample_nearest2x(const Tensor& x) {
    require_rank(x, 4, "upsample_nearest2x");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int OH = 2 * H, OW = 2 * W;
    std::vector<Real> v(static_cast<std::size_t>(N) * C * OH * OW);
    const Real* in = x.data().data();
    for (int nc = 0; nc < N * C; ++nc) {
        for (int oh = 0; oh < OH; ++oh) {
            const Real* src = in + (static_cast<std::size_t>(nc) * H + oh / 2) * W;
            Real* dst = v.data() + (static_cast<std::size_t>(nc) * OH + oh) * OW;
            for (int ow = 0; ow < OW; ++ow) dst[ow] = src[ow / 2];
        }
    }
    return make_result({N, C, OH, OW}, std::move(v), {x}, "upsample_nearest2x",
                       [px = x.node(), N, C, H, W](Node* out) {
                           return [px, out, N, C, H, W] {
                               const int OH = 2 * H, OW = 2 * W;
                               Real* gx = px->grad_data();
                               const Real* g = out->grad.data();
                               for (int nc = 0; nc < N * C; ++nc) {
                                   for (int oh = 0; oh < OH; ++oh) {
                                       Real* dst = gx + (static_cast<std::size_t>(nc) * H + oh / 2) * W;
                                       const Real* src = g + (static_cast<std::size_t>(nc) * OH + oh) * OW;
                                       for (int ow = 0; ow < OW; ++ow) dst[ow / 2] += src[ow];
                                   }
                               }
                           };
                       });
}

Tensor adaptive_avg_pool2d(const Tensor& x, int out_h, int out_w) {
    require_rank(x, 4, "adaptive_avg_pool2d");
    if (out_h <= 0 || out_w <= 0) throw ShapeError("adaptive_avg_pool2d: output size must be positive");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    auto start = [](int i, int in, int outn) { return (i * in) / outn; };
    auto stop = [](int i, int in, int outn) { return ((i + 1) * in + outn - 1) / outn; };
    std::vector<Real> v(static_cast<std::size_t>(N) * C * out_h * out_w);
    const Real* in = x.data().data();
    for (int nc = 0; nc < N * C; ++nc) {
        const Real* plane = in + static_cast<std::size_t>(nc) * H * W;
        for (int i = 0; i < out_h; ++i) {
            const int h0 = start(i, H, out_h), h1 = stop(i, H, out_h);
            for (int j = 0; j < out_w; ++j) {
                const int w0 = start(j, W, out_w), w1 = stop(j, W, out_w);
                Real s = 0.0f;
                for (int h = h0; h < h1; ++h)
                    for (int w = w0; w < w1; ++w) s += plane[h * W + w];
                v[(static_cast<std::size_t>(nc) * out_h + i) * out_w + j] = s / static_cast<Real>((h1 - h0) * (w1 - w0));
            }
        }
    }
    return make_result({N, C, out_h, out_w}, std::move(v), {x}, "adaptive_avg_pool2d",
                       [px = x.node(), N, C, H, W, out_h, out_w, start, stop](Node* out) {
                           return [=] {
                               Real* gx = px->grad_data();
                               const Real* g = out->grad.data();
                               for (int nc = 0; nc < N * C; ++nc) {
                                   Real* plane = gx + static_cast<std::size_t>(nc) * H * W;
                                   for (int i = 0; i < out_h; ++i) {
                                       const int h0 = start(i, H, out_h), h1 = stop(i, H, out_h);
                                       for (int j = 0; j < out_w; ++j) {
                                           const int w0 = start(j, W, out_w), w1 = stop(j, W, out_w);
                                           const Real gv = g[(static_cast<std::size_t>(nc) * out_h + i) * out_w + j] /
                                                            static_cast<Real>((h1 - h0) * (w1 - w0));
                                           for (int h = h0; h < h1; ++h)
                                               for (int w = w0; w < w1; ++w) plane[h * W + w] += gv;
                                       }
                                   }
                               }
                           };
                       });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& ref = parts.front().shape();
    const int rank = static_cast<int>(ref.size());
    if (axis < 0) axis += rank;
    if (axis < 0 || axis >= rank) throw ShapeError("concat: axis out of range for " + shape_str(ref));
    Shape out_shape = ref;
    out_shape[static_cast<std::size_t>(axis)] = 0;
    for (const Tensor& p : parts) {
        const Shape& s = p.shape();
        bool ok = static_cast<int>(s.size()) == rank;
        for (int d = 0; ok && d < rank; ++d) ok = (d == axis) || s[static_cast<std::size_t>(d)] == ref[static_cast<std::size_t>(d)];
        if (!ok) throw ShapeError("concat: incompatible shapes " + shape_str(ref) + " and " + shape_str(s));
        out_shape[static_cast<std::size_t>(axis)] += s[static_cast<std::size_t>(axis)];
    }
    std::size_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= static_cast<std::size_t>(ref[static_cast<std::size_t>(d)]);
    for (int d = axis + 1; d < rank; ++d) inner *= static_cast<std::size_t>(ref[static_cast<std::size_t>(d)]);
    std::vector<std::size_t> chunk;
    for (const Tensor& p : parts) chunk.push_back(static_cast<std::size_t>(p.dim(axis)) * inner);
    const std::size_t out_chunk = static_cast<std::size_t>(out_shape[static_cast<std::size_t>(axis)]) * inner;
    std::vector<Real> v(outer * out_chunk);
    std::size_t offset = 0;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        const Real* src = parts[i].data().data();
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(src + o * chunk[i], chunk[i], v.data() + o * out_chunk + offset);
        }
        offset += chunk[i];
    }
    std::vector<Node*> nodes;
    for (const Tensor& p : parts) nodes.push_back(p.node());
    return make_result(out_shape, std::move(v), parts, "concat", [nodes, chunk, outer, out_chunk](Node* out) {
        return [nodes, chunk, outer, out_chunk, out] {
            std::size_t offset = 0;
            for (std::size_t i = 0; i < nodes.size(); ++i) {
                if (nodes[i]->requires_grad) {
                    Real* g = nodes[i]->grad_data();
                    for (std::size_t o = 0; o < outer; ++o) {
                        const Real* src = out->grad.data() + o * out_chunk + offset;
                        Real* dst = g + o * chunk[i];
                        for (std::size_t j = 0; j < chunk[i]; ++j) dst[j] += src[j];
                    }
                }
                offset += chunk[i];
            }
        };
    });
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (numel(shape) != x.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    std::vector<Real> v(x.data().begin(), x.data().end());
    return make_result(std::move(shape), std::move(v), {x}, "reshape", [px = x.node()](Node* out) {
        return [px, out] {
            Real* gx = px->grad_data();
            for (std::size_t i = 0; i < out->value.size(); ++i) gx[i] += out->grad[i];
        };
    });
}

Tensor flatten(const Tensor& x) {
    if (x.rank() < 1) throw ShapeError("flatten: rank-0 tensor");
    const int n = x.dim(0);
    return reshape(x, {n, static_cast<int>(x.numel() / static_cast<std::size_t>(n))});
}

Tensor gather(const Tensor& x, const std::vector<std::size_t>& indices) {
    if (indices.empty()) throw ShapeError("gather: empty index list");
    std::vector<Real> v(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= x.numel()) {
            throw ShapeError("gather: index " + std::to_string(indices[i]) + " out of range for " + shape_str(x.shape()));
        }
        v[i] = x.data()[indices[i]];
    }
    return make_result({static_cast<int>(indices.size())}, std::move(v), {x}, "gather",
                       [px = x.node(), indices](Node* out) {
                           return [px, out, indices] {
                               Real* gx = px->grad_data();
                               for (std::size_t i = 0; i < indices.size(); ++i) gx[indices[i]] += out->grad[i];
                           };
                       });
}

Tensor leaky_relu(const Tensor& x, Real alpha) {
    return unary(
        x, "leaky_relu", [alpha](Real v) { return v > 0.0f ? v : alpha * v; },
        [alpha](Real in, Real) { return in > 0.0f ? 1.0f : alpha; });
}

Tensor silu(const Tensor& x) {
    return unary(
        x, "silu", [](Real v) { return v * sigmoidf(v); },
        [](Real in, Real) {
            const Real s = sigmoidf(in);
            return s * (1.0f + in * (1.0f - s));
        });
}

Tensor sigmoid(const Tensor& x) {
    return unary(x, "sigmoid", sigmoidf, [](Real, Real out) { return out * (1.0f - out); });
}

Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state, bool training) {
    require_rank(x, 4, "batchnorm2d");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    for (const Tensor* t : {&gamma, &beta, static_cast<const Tensor*>(&state.running_mean), static_cast<const Tensor*>(&state.running_var)}) {
        if (t->rank() != 1 || t->dim(0) != C) {
            throw ShapeError("batchnorm2d: parameter " + shape_str(t->shape()) + " vs input " + shape_str(x.shape()));
        }
    }
    const std::size_t HW = static_cast<std::size_t>(H) * W;
    const std::size_t M = static_cast<std::size_t>(N) * HW;
    std::vector<Real> mean_c(static_cast<std::size_t>(C)), invstd(static_cast<std::size_t>(C));
    const Real* in = x.data().data();
    if (training) {
        std::vector<Real> buf(M);
        for (int c = 0; c < C; ++c) {
            for (int n = 0; n < N; ++n) {
                std::copy_n(in + (static_cast<std::size_t>(n) * C + c) * HW, HW, buf.data() + n * HW);
            }
            const Real mu = reduce_sum(buf.data(), M) / static_cast<Real>(M);
            for (Real& b : buf) b = (b - mu) * (b - mu);
            const Real var = reduce_sum(buf.data(), M) / static_cast<Real>(M);
            mean_c[c] = mu;
            invstd[c] = 1.0f / std::sqrt(var + state.eps);
            const Real unbiased = M > 1 ? var * static_cast<Real>(M) / static_cast<Real>(M - 1) : var;
            Real& rm = state.running_mean.data()[static_cast<std::size_t>(c)];
            Real& rv = state.running_var.data()[static_cast<std::size_t>(c)];
            rm = (1.0f - state.momentum) * rm + state.momentum * mu;
            rv = (1.0f - state.momentum) * rv + state.momentum * unbiased;
        }
    } else {
        for (int c = 0; c < C; ++c) {
            mean_c[c] = state.running_mean.data()[static_cast<std::size_t>(c)];
            invstd[c] = 1.0f / std::sqrt(state.running_var.data()[static_cast<std::size_t>(c)] + state.eps);
        }
    }
    std::vector<Real> xhat(x.numel());
    std::vector<Real> v(x.numel());
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const std::size_t base = (static_cast<std::size_t>(n) * C + c) * HW;
            const Real g = gamma.data()[static_cast<std::size_t>(c)];
            const Real b = beta.data()[static_cast<std::size_t>(c)];
            for (std::size_t i = 0; i < HW; ++i) {
                const Real xh = (in[base + i] - mean_c[c]) * invstd[c];
                xhat[base + i] = xh;
                v[base + i] = g * xh + b;
            }
        }
    }
    return make_result(
        x.shape(), std::move(v), {x, gamma, beta}, training ? "batchnorm2d_train" : "batchnorm2d_eval",
        [px = x.node(), pg = gamma.node(), pb = beta.node(), xhat = std::move(xhat), invstd, N, C, HW, M,
         training](Node* out) {
            return [=] {
                const Real* g = out->grad.data();
                std::vector<Real> sum_g(static_cast<std::size_t>(C), 0.0f), sum_gx(static_cast<std::size_t>(C), 0.0f);
                for (int n = 0; n < N; ++n) {
                    for (int c = 0; c < C; ++c) {
                        const std::size_t base = (static_cast<std::size_t>(n) * C + c) * HW;
                        Real sg = 0.0f, sgx = 0.0f;
                        for (std::size_t i = 0; i < HW; ++i) {
                            sg += g[base + i];
                            sgx += g[base + i] * xhat[base + i];
                        }
                        sum_g[c] += sg;
                        sum_gx[c] += sgx;
                    }
                }
                if (pg->requires_grad) {
                    Real* gg = pg->grad_data();
                    for (int c = 0; c < C; ++c) gg[c] += sum_gx[c];
                }
                if (pb->requires_grad) {
                    Real* gb = pb->grad_data();
                    for (int c = 0; c < C; ++c) gb[c] += sum_g[c];
                }
                if (!px->requires_grad) return;
                Real* gx = px->grad_data();
                const Real inv_m = 1.0f / static_cast<Real>(M);
                for (int n = 0; n < N; ++n) {
                    for (int c = 0; c < C; ++c) {
                        const std::size_t base = (static_cast<std::size_t>(n) * C + c) * HW;
                        const Real gam = pg->value[static_cast<std::size_t>(c)];
                        const Real k = gam * invstd[c];
                        if (training) {
                            const Real mg = sum_g[c] * inv_m;
                            const Real mgx = sum_gx[c] * inv_m;
                            for (std::size_t i = 0; i < HW; ++i) {
                                gx[base + i] += k * (g[base + i] - mg - xhat[base + i] * mgx);
                            }
                        } else {
                            for (std::size_t i = 0; i < HW; ++i) gx[base + i] += k * g[base + i];
                        }
                    }
                }
            };
        });
}

Tensor softmax_channels(const Tensor& logits) {
    require_rank(logits, 4, "softmax_channels");
    const int N = logits.dim(0), C = logits.dim(1);
    const std::size_t HW = static_cast<std::size_t>(logits.dim(2)) * logits.dim(3);
    std::vector<Real> v(logits.numel());
    const Real* in = logits.data().data();
    for (int n = 0; n < N; ++n) {
        const std::size_t base = static_cast<std::size_t>(n) * C * HW;
        for (std::size_t p = 0; p < HW; ++p) {
            Real mx = in[base + p];
            for (int c = 1; c < C; ++c) mx = std::max(mx, in[base + c * HW + p]);
            double z = 0.0;
            for (int c = 0; c < C; ++c) z += std::exp(static_cast<double>(in[base + c * HW + p] - mx));
            for (int c = 0; c < C; ++c) {
                v[base + c * HW + p] = static_cast<Real>(std::exp(static_cast<double>(in[base + c * HW + p] - mx)) / z);
            }
        }
    }
    return Tensor::from(logits.shape(), std::move(v), false);
}

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<std::int32_t>& labels) {
    require_rank(logits, 4, "softmax_cross_entropy");
    const int N = logits.dim(0), C = logits.dim(1);
    const std::size_t HW = static_cast<std::size_t>(logits.dim(2)) * logits.dim(3);
    const std::size_t M = static_cast<std::size_t>(N) * HW;
    if (labels.size() != M) {
        throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                         shape_str(logits.shape()));
    }
    Tensor probs = softmax_channels(logits);
    std::vector<Real> losses(M);
    for (int n = 0; n < N; ++n) {
        for (std::size_t p = 0; p < HW; ++p) {
            const std::int32_t lbl = labels[static_cast<std::size_t>(n) * HW + p];
            if (lbl < 0 || lbl >= C) throw ShapeError("softmax_cross_entropy: label out of range");
            // Log-sum-exp in double; the Real probability may underflow.
            const std::size_t base = static_cast<std::size_t>(n) * C * HW;
            Real mx = logits.data()[base + p];
            for (int c = 1; c < C; ++c) mx = std::max(mx, logits.data()[base + c * HW + p]);
            double z = 0.0;
            for (int c = 0; c < C; ++c) z += std::exp(static_cast<double>(logits.data()[base + c * HW + p] - mx));
            losses[static_cast<std::size_t>(n) * HW + p] =
                static_cast<Real>(std::log(z) - static_cast<double>(logits.data()[base + lbl * HW + p] - mx));
        }
    }
    const Real loss = reduce_sum(losses.data(), M) / static_cast<Real>(M);
    return make_result({1}, {loss}, {logits}, "softmax_cross_entropy",
                       [pl = logits.node(), probs = std::vector<Real>(probs.data().begin(), probs.data().end()), labels,
                        N, C, HW, M](Node* out) {
                           return [=] {
                               const Real g = out->grad[0] / static_cast<Real>(M);
                               Real* gl = pl->grad_data();
                               for (int n = 0; n < N; ++n) {
                                   for (int c = 0; c < C; ++c) {
                                       const std::size_t base = (static_cast<std::size_t>(n) * C + c) * HW;
                                       for (std::size_t p = 0; p < HW; ++p) {
                                           const Real onehot =
                                               labels[static_cast<std::size_t>(n) * HW + p] == c ? 1.0f : 0.0f;
                                           gl[base + p] += g * (probs[base + p] - onehot);
                                       }
                                   }
                               }
                           };
                       });
}

Tensor mse(const Tensor& pred, const Tensor& target) {
    require_same_shape(pred, target, "mse");
    const std::size_t n = pred.numel();
    std::vector<Real> sq(n);
    for (std::size_t i = 0; i < n; ++i) {
        const Real d = pred.data()[i] - target.data()[i];
        sq[i] = d * d;
    }
    const Real loss = reduce_sum(sq.data(), n) / static_cast<Real>(n);
    return make_result({1}, {loss}, {pred, target}, "mse", [pp = pred.node(), pt = target.node(), n](Node* out) {
        return [pp, pt, out, n] {
            const Real g = out->grad[0] * 2.0f / static_cast<Real>(n);
            for (std::size_t i = 0; i < n; ++i) {
                const Real d = pp->value[i] - pt->value[i];
                if (pp->requires_grad) pp->grad_data()[i] += g * d;
                if (pt->requires_grad) pt->grad_data()[i] -= g * d;
            }
        };
    });
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& target) {
    require_same_shape(logits, target, "bce_with_logits");
    const std::size_t n = logits.numel();
    std::vector<Real> terms(n);
    for (std::size_t i = 0; i < n; ++i) {
        const Real x = logits.data()[i];
        const Real t = target.data()[i];
        terms[i] = std::max(x, Real(0)) - x * t + std::log1p(std::exp(-std::abs(x)));
    }
    const Real loss = reduce_sum(terms.data(), n) / static_cast<Real>(n);
    return make_result({1}, {loss}, {logits, target}, "bce_with_logits",
                       [pl = logits.node(), pt = target.node(), n](Node* out) {
                           return [pl, pt, out, n] {
                               const Real g = out->grad[0] / static_cast<Real>(n);
                               for (std::size_t i = 0; i < n; ++i) {
                                   const Real x = pl->value[i];
                                   if (pl->requires_grad) pl->grad_data()[i] += g * (sigmoidf(x) - pt->value[i]);
                                   if (pt->requires_grad) pt->grad_data()[i] -= g * x;
                               }
                           };
                       });
}

double box_iou_cxcywh(const Real* a, const Real* b) {
    const double ax0 = a[0] - a[2] / 2.0, ax1 = a[0] + a[2] / 2.0, ay0 = a[1] - a[3] / 2.0, ay1 = a[1] + a[3] / 2.0;
    const double bx0 = b[0] - b[2] / 2.0, bx1 = b[0] + b[2] / 2.0, by0 = b[1] - b[3] / 2.0, by1 = b[1] + b[3] / 2.0;
    const double iw = std::min(ax1, bx1) - std::max(ax0, bx0);
    const double ih = std::min(ay1, by1) - std::max(ay0, by0);
    if (iw <= 0.0 || ih <= 0.0) return 0.0;
    const double inter = iw * ih;
    const double uni = static_cast<double>(a[2]) * a[3] + static_cast<double>(b[2]) * b[3] - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

Tensor iou_loss(const Tensor& pred, const Tensor& target) {
    require_same_shape(pred, target, "iou_loss");
    require_rank(pred, 2, "iou_loss");
    if (pred.dim(1) != 4) throw ShapeError("iou_loss: boxes must be (P, 4), got " + shape_str(pred.shape()));
    const int P = pred.dim(0);
    std::vector<Real> terms(static_cast<std::size_t>(P));
    for (int i = 0; i < P; ++i) {
        terms[static_cast<std::size_t>(i)] =
            static_cast<Real>(1.0 - box_iou_cxcywh(pred.data().data() + 4 * i, target.data().data() + 4 * i));
    }
    const Real loss = reduce_sum(terms.data(), terms.size()) / static_cast<Real>(P);
    return make_result({1}, {loss}, {pred, target}, "iou_loss", [pp = pred.node(), pt = target.node(), P](Node* out) {
        return [pp, pt, out, P] {
            if (!pp->requires_grad) return;
            const double g = -static_cast<double>(out->grad[0]) / P;  // d(1 - IoU) = -dIoU
            Real* gp = pp->grad_data();
            for (int i = 0; i < P; ++i) {
                const Real* a = pp->value.data() + 4 * i;
                const Real* b = pt->value.data() + 4 * i;
                const double ax0 = a[0] - a[2] / 2.0, ax1 = a[0] + a[2] / 2.0;
                const double ay0 = a[1] - a[3] / 2.0, ay1 = a[1] + a[3] / 2.0;
                const double bx0 = b[0] - b[2] / 2.0, bx1 = b[0] + b[2] / 2.0;
                const double by0 = b[1] - b[3] / 2.0, by1 = b[1] + b[3] / 2.0;
                const double iw = std::min(ax1, bx1) - std::max(ax0, bx0);
                const double ih = std::min(ay1, by1) - std::max(ay0, by0);
                if (iw <= 0.0 || ih <= 0.0) continue;  // no overlap: subgradient 0
                const double inter = iw * ih;
                const double area_a = static_cast<double>(a[2]) * a[3];
                const double uni = area_a + static_cast<double>(b[2]) * b[3] - inter;
                const double d_inter = 1.0 / uni + inter / (uni * uni);
                const double d_area = -inter / (uni * uni);
                const double right = ax1 < bx1 ? 1.0 : 0.0;  // d iw / d ax1
                const double left = ax0 > bx0 ? 1.0 : 0.0;   // -d iw / d ax0
                const double bottom = ay1 < by1 ? 1.0 : 0.0;
                const double top = ay0 > by0 ? 1.0 : 0.0;
                const double diw_dcx = right - left, diw_dw = 0.5 * (right + left);
                const double dih_dcy = bottom - top, dih_dh = 0.5 * (bottom + top);
                gp[4 * i + 0] += static_cast<Real>(g * d_inter * ih * diw_dcx);
                gp[4 * i + 1] += static_cast<Real>(g * d_inter * iw * dih_dcy);
                gp[4 * i + 2] += static_cast<Real>(g * (d_inter * ih * diw_dw + d_area * a[3]));
                gp[4 * i + 3] += static_cast<Real>(g * (d_inter * iw * dih_dh + d_area * a[2]));
            }
        };
    });
}

} // namespace I2P_NN_ABI
} // namespace i2p::nn
