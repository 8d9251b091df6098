#include "capscl/optim.hpp"

#include <algorithm>
#include <cmath>

namespace capscl::ad {

void AdamState::reset() {
    std::fill(first_moment.begin(), first_moment.end(), Scalar(0));
    std::fill(second_moment.begin(), second_moment.end(), Scalar(0));
    step = 0;
}

bool AdamState::all_zero() const {
    auto zero = [](Scalar v) { return v == Scalar(0); };
    return std::all_of(first_moment.begin(), first_moment.end(), zero) &&
           std::all_of(second_moment.begin(), second_moment.end(), zero);
}

void adam_step(std::span<Scalar> param, std::span<const Scalar> grad, AdamState& state, double lr) {
    if (grad.size() != param.size()) {
        throw DimensionError("adam_step: gradient length " + std::to_string(grad.size()) +
                             " != parameter length " + std::to_string(param.size()));
    }
    if (state.first_moment.empty() && state.second_moment.empty()) {
        state.first_moment.assign(param.size(), Scalar(0));
        state.second_moment.assign(param.size(), Scalar(0));
    }
    if (state.first_moment.size() != param.size() || state.second_moment.size() != param.size()) {
        throw DimensionError("adam_step: moment shape differs from parameter");
    }
    ++state.step;
    const double b1 = AdamState::beta1, b2 = AdamState::beta2;
    const double c1 = 1.0 - std::pow(b1, double(state.step));
    const double c2 = 1.0 - std::pow(b2, double(state.step));
    for (std::size_t i = 0; i < param.size(); ++i) {
        const double g = grad[i];
        const double m = b1 * state.first_moment[i] + (1.0 - b1) * g;
        const double v = b2 * state.second_moment[i] + (1.0 - b2) * g * g;
        state.first_moment[i] = Scalar(m);
        state.second_moment[i] = Scalar(v);
        const double update = lr * (m / c1) / (std::sqrt(v / c2) + AdamState::epsilon);
        param[i] = Scalar(param[i] - update);
    }
}

Adam::Adam(std::vector<Tensor> params) : params_(std::move(params)), states_(params_.size()) {}

void Adam::step(double lr) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto& p = params_[i];
        if (!p.requires_grad()) continue;
        adam_step(p.data(), p.grad(), states_[i], lr);
    }
}

void Adam::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

void Adam::reset() {
    for (auto& s : states_) s.reset();
}

}  // namespace capscl::ad
