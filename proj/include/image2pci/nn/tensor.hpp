#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

// Scalar type of the autodiff engine. The default build is single precision;
// defining I2P_NN_DOUBLE compiles the same sources in double precision under a
// distinct inline namespace (used by the finite-difference gradient checks).
#ifdef I2P_NN_DOUBLE
#define I2P_NN_ABI f64
#else
#define I2P_NN_ABI f32
#endif

namespace i2p::nn {
inline namespace I2P_NN_ABI {

#ifdef I2P_NN_DOUBLE
using Real = double;
#else
using Real = float;
#endif

using Shape = std::vector<int>;

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// One recorded value in the computation graph. `backward` reads `grad` and
// accumulates into the grads of `parents`; it is empty for leaves.
struct Node {
    Shape shape;
    std::vector<Real> value;
    std::vector<Real> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void()> backward;
    const char* op = "leaf";

    Real* grad_data() {
        if (grad.empty()) grad.assign(value.size(), 0.0f);
        return grad.data();
    }
};

// Shared handle to a Node: copies alias the same storage.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, Real value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<Real> values, bool requires_grad = false);
    static Tensor scalar(Real value, bool requires_grad = false);

    bool defined() const noexcept { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    int dim(int axis) const;
    std::size_t numel() const { return node_->value.size(); }

    std::span<Real> data() { return node_->value; }
    std::span<const Real> data() const { return node_->value; }
    // Empty until a backward pass has reached this tensor.
    std::span<const Real> grad() const { return node_->grad; }
    std::span<Real> mutable_grad() { return {node_->grad_data(), node_->value.size()}; }
    void zero_grad();

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }
    Real item() const;
    const char* op() const { return node_->op; }

    Node* node() const noexcept { return node_.get(); }
    const std::shared_ptr<Node>& shared() const noexcept { return node_; }

    // Fresh untracked tensor holding a copy of the values.
    Tensor detach() const;

private:
    std::shared_ptr<Node> node_;
};

// Runs reverse-mode accumulation from a single-element loss.
void backward(const Tensor& loss);

bool grad_enabled() noexcept;

// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

// Builds an op result. When recording is on and any input is tracked, the
// result is tracked and `make_backward(out)` supplies its backward rule.
Tensor make_result(Shape shape, std::vector<Real> values, std::initializer_list<Tensor> inputs, const char* op,
                   const std::function<std::function<void()>(Node* out)>& make_backward);
Tensor make_result(Shape shape, std::vector<Real> values, const std::vector<Tensor>& inputs, const char* op,
                   const std::function<std::function<void()>(Node* out)>& make_backward);

// Sum with Kahan compensation for long reductions (> 4096 elements).
Real reduce_sum(const Real* data, std::size_t n);

} // namespace I2P_NN_ABI
} // namespace i2p::nn
