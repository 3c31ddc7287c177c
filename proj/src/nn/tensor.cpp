#include "image2pci/nn/tensor.hpp"

#include <algorithm>
#include <unordered_set>

namespace i2p::nn {
inline namespace I2P_NN_ABI {

namespace {
thread_local bool g_grad_enabled = true;
}

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(shape));
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::string s = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ", ";
        s += std::to_string(shape[i]);
    }
    return s + ")";
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0f, requires_grad); }

Tensor Tensor::full(Shape shape, Real value, bool requires_grad) {
    auto node = std::make_shared<Node>();
    const std::size_t n = nn::numel(shape);
    node->shape = std::move(shape);
    node->value.assign(n, value);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<Real> values, bool requires_grad) {
    if (nn::numel(shape) != values.size()) {
        throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " + shape_str(shape));
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::scalar(Real value, bool requires_grad) { return from({1}, {value}, requires_grad); }

int Tensor::dim(int axis) const {
    const int r = rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw ShapeError("axis out of range for shape " + shape_str(shape()));
    return node_->shape[static_cast<std::size_t>(axis)];
}

void Tensor::zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0f);
}

Real Tensor::item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
}

Tensor Tensor::detach() const { return from(shape(), node_->value, false); }

bool grad_enabled() noexcept { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

namespace {

template <typename Inputs>
Tensor make_result_impl(Shape shape, std::vector<Real> values, const Inputs& inputs, const char* op,
                        const std::function<std::function<void()>(Node* out)>& make_backward) {
    Tensor out = Tensor::from(std::move(shape), std::move(values), false);
    out.node()->op = op;
    if (!g_grad_enabled) return out;
    bool tracked = false;
    for (const Tensor& t : inputs) tracked = tracked || (t.defined() && t.requires_grad());
    if (!tracked) return out;
    Node* node = out.node();
    node->requires_grad = true;
    for (const Tensor& t : inputs) {
        if (t.defined()) node->parents.push_back(t.shared());
    }
    node->backward = make_backward(node);
    return out;
}

} // namespace

Tensor make_result(Shape shape, std::vector<Real> values, std::initializer_list<Tensor> inputs, const char* op,
                   const std::function<std::function<void()>(Node* out)>& make_backward) {
    return make_result_impl(std::move(shape), std::move(values), inputs, op, make_backward);
}

Tensor make_result(Shape shape, std::vector<Real> values, const std::vector<Tensor>& inputs, const char* op,
                   const std::function<std::function<void()>(Node* out)>& make_backward) {
    return make_result_impl(std::move(shape), std::move(values), inputs, op, make_backward);
}

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw ShapeError("backward() needs a single-element loss, got shape " +
                         (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    }
    Node* root = loss.node();
    if (!root->requires_grad) return;

    // Iterative post-order DFS gives a topological order with each node once.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{root, 0}};
    seen.insert(root);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    root->grad_data()[0] += 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward && !n->grad.empty()) n->backward();
    }
}

Real reduce_sum(const Real* data, std::size_t n) {
    if (n <= 4096) {
        Real s = 0.0f;
        for (std::size_t i = 0; i < n; ++i) s += data[i];
        return s;
    }
    Real sum = 0.0f;
    Real c = 0.0f;
    for (std::size_t i = 0; i < n; ++i) {
        const Real y = data[i] - c;
        const Real t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    return sum;
}

} // namespace I2P_NN_ABI
} // namespace i2p::nn
