#include "capscl/model.hpp"

#include <stdexcept>

namespace capscl {

std::string to_string(Mode m) {
    switch (m) {
        case Mode::ctr: return "ctr";
        case Mode::ctr_no_ksm: return "ctr_no_ksm";
        case Mode::ctr_no_tsm: return "ctr_no_tsm";
        case Mode::ctr_no_tr: return "ctr_no_tr";
        case Mode::sdl: return "sdl";
        case Mode::nfh: return "nfh";
        case Mode::joint: return "joint";
    }
    return "ctr";
}

Mode mode_from_string(const std::string& s) {
    for (auto m : {Mode::ctr, Mode::ctr_no_ksm, Mode::ctr_no_tsm, Mode::ctr_no_tr, Mode::sdl,
                   Mode::nfh, Mode::joint}) {
        if (to_string(m) == s) return m;
    }
    throw std::invalid_argument("unknown mode '" + s + "'");
}

PluginVariant PluginVariant::for_mode(Mode m) {
    switch (m) {
        case Mode::ctr:
        case Mode::sdl: return {true, true, true};
        case Mode::ctr_no_ksm: return {false, false, true};
        case Mode::ctr_no_tsm: return {true, true, false};
        case Mode::ctr_no_tr: return {true, false, true};
        case Mode::nfh: return {false, false, false};
        case Mode::joint: return {true, true, false};
    }
    return {};
}

void ModelConfig::validate() const {
    backbone.validate();
    ksm.validate(backbone.max_tokens);
    tsm.validate();
}

ClPlugin::ClPlugin(std::size_t embed_dim, std::size_t max_tokens, const ksm::KsmConfig& ksm_config,
                   const tsm::TsmConfig& tsm_config, const PluginVariant& variant, Rng& rng) {
    std::size_t tsm_input = embed_dim;
    if (variant.ksm) {
        auto kc = ksm_config;
        kc.use_router = variant.router;
        ksm_.emplace(embed_dim, max_tokens, kc, rng);
        tsm_input = kc.num_transfer_capsules * kc.route_dim;
    }
    auto tc = tsm_config;
    tc.use_masks = variant.masks;
    tsm_ = tsm::TaskSpecificModule(tsm_input, embed_dim, tc, rng);
}

void ClPlugin::add_task(std::size_t task_id, Rng& rng) {
    if (ksm_) ksm_->add_task_capsule(task_id, rng);
    tsm_.add_task(task_id, rng);
}

Tensor ClPlugin::forward(Tape& tape, const Tensor& h, std::size_t tokens, std::size_t task,
                         const ForwardContext& ctx,
                         std::vector<std::vector<std::vector<std::uint8_t>>>* gates) const {
    Tensor input = h;
    if (ksm_) {
        ksm::RoutingMode mode{ctx.training, ksm_->config().temperature, ctx.rng};
        auto out = ksm_->forward(tape, h, tokens, task, mode);
        input = ad::concat_cols(tape, out.transfer_capsules);
        if (gates) *gates = std::move(out.gates);
    }
    return ad::add(tape, h, tsm_.forward(tape, input, task, ctx.s));
}

std::vector<Tensor> ClPlugin::parameters() const {
    std::vector<Tensor> out;
    for (const auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
}

NamedTensors ClPlugin::named_parameters() const {
    NamedTensors out;
    if (ksm_) append_named(out, "ksm.", ksm_->named_parameters());
    append_named(out, "tsm.", tsm_.named_parameters());
    return out;
}

ContinualModel::ContinualModel(const ModelConfig& config, const PluginVariant& variant, Rng& rng)
    : config_(config), variant_(variant) {
    config_.validate();
    backbone_ = Backbone(config_.backbone, rng);
    for (std::size_t s = 0; s < backbone_.slots().size(); ++s) {
        plugins_.emplace_back(config_.backbone.embed_dim, config_.backbone.max_tokens, config_.ksm,
                              config_.tsm, variant_, rng);
    }
    round_to_storage();
}

std::size_t ContinualModel::add_task(std::size_t num_classes, Rng& rng) {
    if (num_classes < 2) throw std::invalid_argument("model: a task needs at least 2 classes");
    const std::size_t id = heads_.size();
    for (auto& p : plugins_) p.add_task(id, rng);
    heads_.push_back({Linear(config_.backbone.embed_dim, num_classes, rng), num_classes});
    finished_.push_back(false);
    round_to_storage();
    return id;
}

Tensor ContinualModel::forward(Tape& tape, const TokenBatch& batch, std::size_t task,
                               const ForwardContext& ctx, ForwardDiagnostics* diagnostics) const {
    if (task >= heads_.size()) throw std::out_of_range("model: unknown task " + std::to_string(task));
    if (diagnostics) diagnostics->gates.assign(plugins_.size(), {});
    PluginHook hook = [&](Tape& tp, const Tensor& h, std::size_t slot) {
        return plugins_[slot].forward(tp, h, batch.tokens, task, ctx,
                                      diagnostics ? &diagnostics->gates[slot] : nullptr);
    };
    Rng fallback(0);
    Rng& rng = ctx.rng ? *ctx.rng : fallback;
    auto enc = backbone_.encode(tape, batch, hook, rng, ctx.training);
    return heads_[task].linear(tape, enc.classifier);
}

void ContinualModel::finalize_task(std::size_t task) {
    if (task >= heads_.size()) throw std::out_of_range("model: unknown task " + std::to_string(task));
    if (finished_[task]) throw std::logic_error("model: task " + std::to_string(task) + " already finalized");
    for (auto& p : plugins_) p.tsm().finalize_task_mask(task);
    heads_[task].linear.weight.set_requires_grad(false);
    heads_[task].linear.bias.set_requires_grad(false);
    finished_[task] = true;
}

std::vector<Tensor> ContinualModel::trainable_parameters() const {
    std::vector<Tensor> out;
    for (const auto& p : plugins_) {
        auto ps = p.parameters();
        out.insert(out.end(), ps.begin(), ps.end());
    }
    for (std::size_t t = 0; t < heads_.size(); ++t) {
        if (finished_[t]) continue;
        out.push_back(heads_[t].linear.weight);
        out.push_back(heads_[t].linear.bias);
    }
    return out;
}

void ContinualModel::apply_gradient_masks() {
    for (auto& p : plugins_) p.tsm().apply_gradient_masks();
}

void ContinualModel::clamp_embeddings(std::size_t task) {
    for (auto& p : plugins_) p.tsm().clamp_embeddings(task);
}

void ContinualModel::compensate_embedding_gradients(std::size_t task, double s) {
    for (auto& p : plugins_) p.tsm().compensate_embedding_gradients(task, s);
}

void ContinualModel::round_to_storage() {
    for (const auto& [name, t] : named_parameters()) {
        Tensor h = t;
        for (Scalar& v : h.data()) v = Scalar(static_cast<float>(v));
    }
}

NamedTensors ContinualModel::named_parameters() const {
    NamedTensors out;
    append_named(out, "backbone.", backbone_.named_parameters());
    for (std::size_t s = 0; s < plugins_.size(); ++s)
        append_named(out, "plugin" + std::to_string(s) + ".", plugins_[s].named_parameters());
    for (std::size_t t = 0; t < heads_.size(); ++t)
        heads_[t].linear.collect("head" + std::to_string(t), out);
    return out;
}

void ContinualModel::restore_finished(std::vector<bool> finished) {
    if (finished.size() != heads_.size()) throw std::invalid_argument("model: finished flags mismatch");
    finished_ = std::move(finished);
    for (std::size_t t = 0; t < heads_.size(); ++t) {
        heads_[t].linear.weight.set_requires_grad(!finished_[t]);
        heads_[t].linear.bias.set_requires_grad(!finished_[t]);
    }
}

}  // namespace capscl
