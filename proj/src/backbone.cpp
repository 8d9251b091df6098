#include "capscl/backbone.hpp"

#include <cmath>
#include <stdexcept>

namespace capscl {

std::string to_string(PluginPlacement p) {
    switch (p) {
        case PluginPlacement::both: return "both";
        case PluginPlacement::after_attention_only: return "after_attention_only";
        case PluginPlacement::after_ffn_only: return "after_ffn_only";
        case PluginPlacement::on_top: return "on_top";
        case PluginPlacement::none: return "none";
    }
    return "both";
}

PluginPlacement placement_from_string(const std::string& s) {
    for (auto p : {PluginPlacement::both, PluginPlacement::after_attention_only,
                   PluginPlacement::after_ffn_only, PluginPlacement::on_top, PluginPlacement::none}) {
        if (to_string(p) == s) return p;
    }
    throw std::invalid_argument("unknown plugin placement '" + s + "'");
}

void BackboneConfig::validate() const {
    if (vocab_size <= std::size_t(kFirstContentId))
        throw std::invalid_argument("backbone: vocab_size must exceed the reserved ids");
    if (max_tokens < 1) throw std::invalid_argument("backbone: max_tokens must be >= 1");
    if (embed_dim == 0 || num_heads == 0 || embed_dim % num_heads != 0)
        throw std::invalid_argument("backbone: embed_dim must be divisible by num_heads");
    if (num_layers == 0) throw std::invalid_argument("backbone: num_layers must be >= 1");
    if (ffn_dim == 0) throw std::invalid_argument("backbone: ffn_dim must be >= 1");
    if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("backbone: dropout must be in [0, 1)");
}

std::vector<PluginSlot> plugin_slots(const BackboneConfig& config) {
    std::vector<PluginSlot> slots;
    const auto placement = config.placement;
    for (std::size_t l = 0; l < config.num_layers; ++l) {
        if (placement == PluginPlacement::both || placement == PluginPlacement::after_attention_only)
            slots.push_back({l, SlotKind::after_attention});
        if (placement == PluginPlacement::both || placement == PluginPlacement::after_ffn_only)
            slots.push_back({l, SlotKind::after_ffn});
    }
    if (placement == PluginPlacement::on_top) slots.push_back({config.num_layers - 1, SlotKind::on_top});
    return slots;
}

TokenBatch TokenBatch::pack(const std::vector<const std::vector<std::int32_t>*>& sequences,
                            std::size_t max_tokens) {
    TokenBatch b;
    b.batch = sequences.size();
    b.tokens = max_tokens;
    b.ids.assign(b.batch * max_tokens, kPadId);
    b.key_pad.assign(b.batch * max_tokens, 1);
    for (std::size_t i = 0; i < sequences.size(); ++i) {
        const auto& seq = *sequences[i];
        if (seq.size() > max_tokens) {
            throw std::invalid_argument("token sequence of length " + std::to_string(seq.size()) +
                                        " exceeds max_tokens " + std::to_string(max_tokens));
        }
        for (std::size_t t = 0; t < seq.size(); ++t) {
            b.ids[i * max_tokens + t] = seq[t];
            b.key_pad[i * max_tokens + t] = seq[t] == kPadId ? 1 : 0;
        }
        b.key_pad[i * max_tokens] = 0;
    }
    return b;
}

Backbone::Backbone(const BackboneConfig& config, Rng& rng) : config_(config) {
    config_.validate();
    const auto d = config_.embed_dim, f = config_.ffn_dim;
    token_embedding_ = glorot_uniform({config_.vocab_size, d}, config_.vocab_size, d, rng, false);
    const double tok_a = std::sqrt(6.0 / double(config_.vocab_size + d));
    // Positions stay an order of magnitude below tokens so word identity dominates the frozen features.
    position_embedding_ = uniform_tensor({config_.max_tokens, d}, -0.1 * tok_a, 0.1 * tok_a, rng, false);
    emb_ln_gain_ = Tensor::full({d}, Scalar(1));
    emb_ln_bias_ = Tensor::zeros({d});
    for (std::size_t l = 0; l < config_.num_layers; ++l) {
        Layer layer;
        layer.query = Linear(d, d, rng, false);
        layer.key = Linear(d, d, rng, false);
        // Small queries keep random attention close to uniform pooling.
        for (Scalar& w : layer.query.weight.data()) w *= Scalar(0.1);
        layer.value = Linear(d, d, rng, false);
        layer.output = Linear(d, d, rng, false);
        layer.ln1_gain = Tensor::full({d}, Scalar(1));
        layer.ln1_bias = Tensor::zeros({d});
        layer.ffn_in = Linear(d, f, rng, false);
        layer.ffn_out = Linear(f, d, rng, false);
        layer.ln2_gain = Tensor::full({d}, Scalar(1));
        layer.ln2_bias = Tensor::zeros({d});
        layers_.push_back(std::move(layer));
    }
    slots_ = plugin_slots(config_);
}

EncodeResult Backbone::encode(Tape& tape, const TokenBatch& batch, const PluginHook& hook, Rng& rng,
                              bool training, std::vector<std::vector<Scalar>>* attention_maps) const {
    const std::size_t T = config_.max_tokens;
    if (batch.tokens != T) {
        throw ad::DimensionError("encode: batch padded to " + std::to_string(batch.tokens) +
                                 " tokens, backbone expects " + std::to_string(T));
    }
    std::vector<std::int32_t> positions(batch.batch * T);
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = std::int32_t(i % T);

    Tensor x = ad::add(tape, ad::embedding(tape, token_embedding_, batch.ids),
                       ad::embedding(tape, position_embedding_, positions));
    x = ad::layer_norm(tape, x, emb_ln_gain_, emb_ln_bias_);
    x = ad::dropout(tape, x, config_.dropout, rng, training);

    if (attention_maps) attention_maps->clear();
    std::size_t slot = 0;
    auto run_slot = [&](const Tensor& h, std::size_t layer, SlotKind kind) {
        if (slot < slots_.size() && slots_[slot].layer == layer && slots_[slot].kind == kind) {
            if (!hook) throw std::logic_error("encode: active plugin slot without a hook");
            return hook(tape, h, slot++);
        }
        return h;
    };

    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const Layer& L = layers_[l];
        std::vector<Scalar> probs;
        Tensor att = ad::multihead_attention(tape, L.query(tape, x), L.key(tape, x), L.value(tape, x),
                                             T, config_.num_heads, batch.key_pad,
                                             attention_maps ? &probs : nullptr);
        if (attention_maps) attention_maps->push_back(std::move(probs));
        Tensor a = ad::dropout(tape, L.output(tape, att), config_.dropout, rng, training);
        a = run_slot(a, l, SlotKind::after_attention);
        x = ad::layer_norm(tape, ad::add(tape, x, a), L.ln1_gain, L.ln1_bias);

        Tensor f = L.ffn_out(tape, ad::relu(tape, L.ffn_in(tape, x)));
        f = ad::dropout(tape, f, config_.dropout, rng, training);
        f = run_slot(f, l, SlotKind::after_ffn);
        x = ad::layer_norm(tape, ad::add(tape, x, f), L.ln2_gain, L.ln2_bias);
    }
    x = run_slot(x, layers_.size() - 1, SlotKind::on_top);

    std::vector<std::size_t> cls_rows(batch.batch);
    for (std::size_t b = 0; b < batch.batch; ++b) cls_rows[b] = b * T;
    Tensor cls = ad::select_rows(tape, x, cls_rows);
    return {x, cls};
}

NamedTensors Backbone::named_parameters() const {
    NamedTensors out;
    out.emplace_back("token_embedding", token_embedding_);
    out.emplace_back("position_embedding", position_embedding_);
    out.emplace_back("embedding_ln.gain", emb_ln_gain_);
    out.emplace_back("embedding_ln.bias", emb_ln_bias_);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const auto p = "layer" + std::to_string(l) + ".";
        const Layer& L = layers_[l];
        L.query.collect(p + "query", out);
        L.key.collect(p + "key", out);
        L.value.collect(p + "value", out);
        L.output.collect(p + "output", out);
        out.emplace_back(p + "ln1.gain", L.ln1_gain);
        out.emplace_back(p + "ln1.bias", L.ln1_bias);
        L.ffn_in.collect(p + "ffn_in", out);
        L.ffn_out.collect(p + "ffn_out", out);
        out.emplace_back(p + "ln2.gain", L.ln2_gain);
        out.emplace_back(p + "ln2.bias", L.ln2_bias);
    }
    return out;
}

std::size_t Backbone::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : named_parameters()) n += t.numel();
    return n;
}

}  // namespace capscl
