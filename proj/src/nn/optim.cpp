#include "image2pci/nn/optim.hpp"

#include <cmath>

namespace i2p::nn {
inline namespace I2P_NN_ABI {

void zero_grad(std::vector<Tensor>& params) {
    for (Tensor& p : params) p.zero_grad();
}

Sgd::Sgd(std::vector<Tensor> params, Real momentum) : params_(std::move(params)), momentum_(momentum) {
    for (const Tensor& p : params_) velocity_.emplace_back(p.numel(), 0.0f);
}

void Sgd::step(Real lr) {
    for (std::size_t k = 0; k < params_.size(); ++k) {
        const auto g = params_[k].grad();
        if (g.empty()) continue;
        if (g.size() != params_[k].numel()) throw ShapeError("sgd: gradient size differs from parameter size");
        auto theta = params_[k].data();
        auto& vel = velocity_[k];
        for (std::size_t i = 0; i < theta.size(); ++i) {
            vel[i] = momentum_ * vel[i] + g[i];
            theta[i] -= lr * vel[i];
        }
    }
}

Adam::Adam(std::vector<Tensor> params, Real beta1, Real beta2, Real eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const Tensor& p : params_) {
        m_.emplace_back(p.numel(), 0.0f);
        v_.emplace_back(p.numel(), 0.0f);
    }
}

void Adam::step(Real lr) {
    ++t_;
    const Real c1 = 1.0f - std::pow(beta1_, static_cast<Real>(t_));
    const Real c2 = 1.0f - std::pow(beta2_, static_cast<Real>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
        const auto g = params_[k].grad();
        if (g.empty()) continue;
        if (g.size() != params_[k].numel()) throw ShapeError("adam: gradient size differs from parameter size");
        auto theta = params_[k].data();
        auto& m = m_[k];
        auto& v = v_[k];
        for (std::size_t i = 0; i < theta.size(); ++i) {
            m[i] = beta1_ * m[i] + (1.0f - beta1_) * g[i];
            v[i] = beta2_ * v[i] + (1.0f - beta2_) * g[i] * g[i];
            const Real mhat = m[i] / c1;
            const Real vhat = v[i] / c2;
            theta[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
        }
    }
}

} // namespace I2P_NN_ABI
} // namespace i2p::nn
