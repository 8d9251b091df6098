#include "capscl/tsm.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace capscl::tsm {

void TsmConfig::validate() const {
    if (width == 0) throw std::invalid_argument("tsm: width must be positive");
    if (!(s_max >= 1.0)) throw std::invalid_argument("tsm: s_max must be >= 1");
    if (!(clamp > 0.0)) throw std::invalid_argument("tsm: clamp must be positive");
}

double anneal_s(const AnnealSchedule& schedule) {
    const double s_max = schedule.s_max;
    const std::size_t B = schedule.batches_per_epoch, b = schedule.batch_index;
    if (!(s_max > 0.0)) throw std::invalid_argument("anneal_s: s_max must be > 0");
    if (B < 2) throw std::invalid_argument("anneal_s: need at least 2 batches per epoch, got " + std::to_string(B));
    if (b < 1 || b > B) throw std::out_of_range("anneal_s: batch index outside [1, B]");
    if (b == B) return s_max;
    return 1.0 / s_max + (s_max - 1.0 / s_max) * double(b - 1) / double(B - 1);
}

Tensor compute_mask(Tape& tape, const Tensor& embedding, double s) {
    if (!(s > 0.0)) throw std::invalid_argument("compute_mask: scale must be > 0");
    return ad::sigmoid(tape, ad::scale(tape, embedding, Scalar(s)));
}

BinaryMask accumulate_masks(const std::vector<BinaryMask>& masks, std::size_t width) {
    BinaryMask acc(width, 0);
    for (const auto& m : masks) {
        if (m.size() != width) {
            throw ad::DimensionError("accumulate_masks: mask of width " + std::to_string(m.size()) +
                                     ", expected " + std::to_string(width));
        }
        for (std::size_t i = 0; i < width; ++i) {
            if (m[i] > 1) throw std::invalid_argument("accumulate_masks: mask is not binary");
            acc[i] = std::max(acc[i], m[i]);
        }
    }
    return acc;
}

void mask_gradients(std::span<Scalar> grad, std::span<const std::uint8_t> accumulated) {
    const std::size_t neurons = accumulated.size();
    if (neurons == 0 || grad.size() % neurons != 0) {
        throw ad::DimensionError("mask_gradients: gradient of " + std::to_string(grad.size()) +
                                 " entries cannot be expanded from a mask of " + std::to_string(neurons));
    }
    const std::size_t row = grad.size() / neurons;
    for (std::size_t n = 0; n < neurons; ++n) {
        if (accumulated[n]) std::fill_n(grad.begin() + std::ptrdiff_t(n * row), row, Scalar(0));
    }
}

TaskSpecificModule::TaskSpecificModule(std::size_t input_dim, std::size_t output_dim,
                                       const TsmConfig& config, Rng& rng)
    : config_(config), fc1_(input_dim, config.width, rng), fc2_(config.width, output_dim, rng) {
    config_.validate();
    accumulated_[0].assign(config_.width, 0);
    accumulated_[1].assign(output_dim, 0);
}

std::size_t TaskSpecificModule::layer_width(std::size_t layer) const {
    return fc(layer).out_features();
}

void TaskSpecificModule::add_task(std::size_t task_id, Rng& rng) {
    if (task_id != embeddings_.size()) {
        throw std::logic_error("tsm: task " + std::to_string(task_id) + " registered out of order");
    }
    std::array<Tensor, kLayers> e;
    for (std::size_t l = 0; l < kLayers; ++l) {
        e[l] = config_.use_masks ? uniform_tensor({layer_width(l)}, -1.0, 1.0, rng, true)
                                 : Tensor::zeros({layer_width(l)});
    }
    embeddings_.push_back(std::move(e));
    stored_.emplace_back();
    finished_.push_back(false);
}

Tensor TaskSpecificModule::layer_mask(Tape& tape, std::size_t task, std::size_t layer, double s) const {
    if (finished(task)) {
        const auto& m = stored_[task][layer];
        std::vector<Scalar> values(m.begin(), m.end());
        return Tensor::from({m.size()}, std::move(values));
    }
    return compute_mask(tape, embeddings_[task][layer], s);
}

Tensor TaskSpecificModule::forward(Tape& tape, const Tensor& v, std::size_t task, double s) const {
    if (task >= embeddings_.size()) throw std::out_of_range("tsm: unknown task " + std::to_string(task));
    Tensor hidden = ad::relu(tape, fc1_(tape, v));
    if (config_.use_masks) hidden = ad::mul_row(tape, hidden, layer_mask(tape, task, 0, s));
    Tensor out = fc2_(tape, hidden);
    if (config_.use_masks) out = ad::mul_row(tape, out, layer_mask(tape, task, 1, s));
    return out;
}

void TaskSpecificModule::finalize_task_mask(std::size_t task) {
    if (task >= embeddings_.size()) throw std::out_of_range("tsm: unknown task " + std::to_string(task));
    if (finished_[task]) throw std::logic_error("tsm: task " + std::to_string(task) + " already finalized");
    if (config_.use_masks) {
        for (std::size_t l = 0; l < kLayers; ++l) {
            Tape tape(false);
            Tensor soft = compute_mask(tape, embeddings_[task][l], config_.s_max);
            BinaryMask m(soft.numel());
            for (std::size_t i = 0; i < m.size(); ++i) m[i] = soft[i] > Scalar(0.5) ? 1 : 0;
            stored_[task][l] = std::move(m);
        }
    }
    finished_[task] = true;
    refresh_accumulated();
}

void TaskSpecificModule::refresh_accumulated() {
    for (std::size_t l = 0; l < kLayers; ++l) {
        std::vector<BinaryMask> masks;
        for (std::size_t t = 0; t < stored_.size(); ++t)
            if (finished_[t] && config_.use_masks) masks.push_back(stored_[t][l]);
        accumulated_[l] = accumulate_masks(masks, layer_width(l));
    }
}

void TaskSpecificModule::apply_gradient_masks() {
    if (!config_.use_masks) return;
    for (std::size_t l = 0; l < kLayers; ++l) {
        Linear layer = fc(l);
        mask_gradients(layer.weight.grad(), accumulated_[l]);
        mask_gradients(layer.bias.grad(), accumulated_[l]);
    }
}

void TaskSpecificModule::clamp_embeddings(std::size_t task) {
    if (!config_.use_masks) return;
    const Scalar c = Scalar(config_.clamp);
    for (auto& e : embeddings_.at(task))
        for (auto& v : e.data()) v = std::clamp(v, -c, c);
}

void TaskSpecificModule::compensate_embedding_gradients(std::size_t task, double s) {
    if (!config_.use_masks || !config_.gradient_compensation) return;
    constexpr double kThreshold = 50.0;
    for (auto& e : embeddings_.at(task)) {
        auto g = e.grad();
        auto v = e.data();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double x = s * double(v[i]);
            const double num = std::cosh(std::clamp(x, -kThreshold, kThreshold)) + 1.0;
            const double den = std::cosh(x) + 1.0;
            g[i] = Scalar(double(g[i]) * config_.s_max / s * num / den);
        }
    }
}

const BinaryMask& TaskSpecificModule::stored_mask(std::size_t task, std::size_t layer) const {
    if (!finished(task)) throw std::logic_error("tsm: task " + std::to_string(task) + " has no stored mask");
    return stored_[task].at(layer);
}

double TaskSpecificModule::free_fraction(std::size_t layer) const {
    const auto& acc = accumulated_.at(layer);
    if (acc.empty()) return 1.0;
    const auto used = std::count(acc.begin(), acc.end(), std::uint8_t(1));
    return 1.0 - double(used) / double(acc.size());
}

void TaskSpecificModule::restore_masks(std::vector<std::array<BinaryMask, kLayers>> stored,
                                       std::vector<bool> finished) {
    if (stored.size() != embeddings_.size() || finished.size() != embeddings_.size())
        throw std::invalid_argument("tsm: restored mask count does not match task count");
    stored_ = std::move(stored);
    finished_ = std::move(finished);
    refresh_accumulated();
}

std::vector<Tensor> TaskSpecificModule::parameters() const {
    std::vector<Tensor> out{fc1_.weight, fc1_.bias, fc2_.weight, fc2_.bias};
    if (config_.use_masks)
        for (const auto& e : embeddings_) out.insert(out.end(), e.begin(), e.end());
    return out;
}

NamedTensors TaskSpecificModule::named_parameters() const {
    NamedTensors out;
    fc1_.collect("fc1", out);
    fc2_.collect("fc2", out);
    if (config_.use_masks) {
        for (std::size_t t = 0; t < embeddings_.size(); ++t)
            for (std::size_t l = 0; l < kLayers; ++l)
                out.emplace_back("task" + std::to_string(t) + ".embedding" + std::to_string(l),
                                 embeddings_[t][l]);
    }
    return out;
}

}  // namespace capscl::tsm
