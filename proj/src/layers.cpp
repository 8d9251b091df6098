#include "capscl/layers.hpp"

#include <cmath>

namespace capscl {

Tensor uniform_tensor(ad::Shape shape, double lo, double hi, Rng& rng, bool requires_grad) {
    Tensor t = Tensor::zeros(std::move(shape), requires_grad);
    for (auto& v : t.data()) v = Scalar(rng.uniform(lo, hi));
    return t;
}

Tensor glorot_uniform(ad::Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng,
                      bool requires_grad) {
    const double a = std::sqrt(6.0 / double(fan_in + fan_out));
    return uniform_tensor(std::move(shape), -a, a, rng, requires_grad);
}

Linear::Linear(std::size_t in, std::size_t out, Rng& rng, bool trainable)
    : weight(glorot_uniform({out, in}, in, out, rng, trainable)),
      bias(Tensor::zeros({out}, trainable)) {}

void Linear::collect(const std::string& prefix, NamedTensors& out) const {
    out.emplace_back(prefix + ".weight", weight);
    out.emplace_back(prefix + ".bias", bias);
}

void append_named(NamedTensors& dst, const std::string& prefix, const NamedTensors& src) {
    for (const auto& [name, t] : src) dst.emplace_back(prefix + name, t);
}

}  // namespace capscl
