#pragma once

#include <string>
#include <utility>
#include <vector>

#include "capscl/autodiff.hpp"
#include "capscl/rng.hpp"

namespace capscl {

using ad::Scalar;
using ad::Tape;
using ad::Tensor;

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
Tensor glorot_uniform(ad::Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng,
                      bool requires_grad = true);
Tensor uniform_tensor(ad::Shape shape, double lo, double hi, Rng& rng, bool requires_grad = true);

/// y = x W^T + b with W [out x in].
struct Linear {
    Tensor weight;
    Tensor bias;

    Linear() = default;
    Linear(std::size_t in, std::size_t out, Rng& rng, bool trainable = true);

    Tensor operator()(Tape& tape, const Tensor& x) const { return ad::linear(tape, x, weight, bias); }
    std::size_t in_features() const { return weight.cols(); }
    std::size_t out_features() const { return weight.rows(); }
    std::size_t parameter_count() const { return weight.numel() + bias.numel(); }
    void collect(const std::string& prefix, NamedTensors& out) const;
};

/// Appends every tensor in `src` to `dst` under `prefix`.
void append_named(NamedTensors& dst, const std::string& prefix, const NamedTensors& src);

}  // namespace capscl
