#pragma once

#include <functional>
#include <string>
#include <vector>

#include "image2pci/nn/tensor.hpp"
#include "image2pci/rng.hpp"

namespace test {

using i2p::nn::Tensor;

// Central-difference check of every input's gradient. The scalar probed is
// sum(f(inputs) * w) for a fixed random w, accumulated in double; the divisor
// is the representable step Real(x+eps) - Real(x-eps).
struct GradCheckResult {
    double max_rel_error = 0.0;  // max over inputs of ||analytic - numeric|| / max(||analytic||, ||numeric||)
    std::string worst_input;
};

using i2p::nn::Real;
using Forward = std::function<Tensor(const std::vector<Tensor>&)>;

GradCheckResult grad_check(const Forward& f, std::vector<Tensor> inputs, double eps, std::uint64_t seed);

struct OpCase {
    std::string name;
    Forward forward;
    std::vector<Tensor> inputs;
};

// Random small instance of every differentiable op. Instances are redrawn
// until no input lies within 2*eps of a non-differentiable point.
std::vector<std::string> op_names();
OpCase make_op_case(const std::string& name, i2p::Rng& rng, double eps);

} // namespace test
