#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "capscl/tensor.hpp"

namespace capscl::ad {

/// First/second moments and step counter for one parameter.
struct AdamState {
    std::vector<Scalar> first_moment;
    std::vector<Scalar> second_moment;
    std::int64_t step = 0;

    static constexpr double beta1 = 0.9;
    static constexpr double beta2 = 0.999;
    static constexpr double epsilon = 1e-8;

    void reset();
    bool all_zero() const;
};

/// One bias-corrected Adam update, no weight decay. A component whose
/// gradient has been exactly zero since the state was reset is left
/// bitwise unchanged.
void adam_step(std::span<Scalar> param, std::span<const Scalar> grad, AdamState& state, double lr);

/// Adam over a fixed list of parameter tensors.
class Adam {
public:
    Adam() = default;
    explicit Adam(std::vector<Tensor> params);

    void step(double lr);
    void zero_grad();
    /// Clears all moments and step counters.
    void reset();

    const std::vector<Tensor>& params() const { return params_; }
    const std::vector<AdamState>& states() const { return states_; }

private:
    std::vector<Tensor> params_;
    std::vector<AdamState> states_;
};

}  // namespace capscl::ad
