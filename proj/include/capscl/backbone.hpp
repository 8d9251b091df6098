#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "capscl/layers.hpp"

namespace capscl {

inline constexpr std::int32_t kPadId = 0;
inline constexpr std::int32_t kClsId = 1;
/// First id available to data generators.
inline constexpr std::int32_t kFirstContentId = 2;

enum class PluginPlacement { both, after_attention_only, after_ffn_only, on_top, none };

std::string to_string(PluginPlacement p);
PluginPlacement placement_from_string(const std::string& s);

struct BackboneConfig {
    std::size_t vocab_size = 512;
    std::size_t max_tokens = 32;
    std::size_t embed_dim = 64;
    std::size_t num_layers = 2;
    std::size_t num_heads = 2;
    std::size_t ffn_dim = 128;
    PluginPlacement placement = PluginPlacement::both;
    double dropout = 0.1;

    /// Throws std::invalid_argument on an inconsistent configuration.
    void validate() const;
};

enum class SlotKind { after_attention, after_ffn, on_top };

struct PluginSlot {
    std::size_t layer = 0;
    SlotKind kind = SlotKind::after_attention;
};

/// Token ids padded to a fixed length; position 0 holds the CLS token.
struct TokenBatch {
    std::size_t batch = 0;
    std::size_t tokens = 0;
    std::vector<std::int32_t> ids;
    /// 1 where the key is padding. Position 0 is never masked.
    std::vector<std::uint8_t> key_pad;

    static TokenBatch pack(const std::vector<const std::vector<std::int32_t>*>& sequences,
                           std::size_t max_tokens);
};

/// Called at each active slot with that slot's sublayer output [B*T x d_e];
/// returns the tensor that continues into the residual add.
using PluginHook = std::function<Tensor(Tape&, const Tensor& hidden, std::size_t slot_index)>;

struct EncodeResult {
    Tensor sequence;    ///< [B*T x d_e]
    Tensor classifier;  ///< [B x d_e], CLS rows of `sequence`
};

/// Post-LN transformer encoder with frozen, randomly initialized weights.
class Backbone {
public:
    Backbone() = default;
    Backbone(const BackboneConfig& config, Rng& rng);

    const BackboneConfig& config() const { return config_; }
    const std::vector<PluginSlot>& slots() const { return slots_; }

    EncodeResult encode(Tape& tape, const TokenBatch& batch, const PluginHook& hook, Rng& rng,
                        bool training,
                        std::vector<std::vector<Scalar>>* attention_maps = nullptr) const;

    std::size_t parameter_count() const;
    NamedTensors named_parameters() const;

private:
    struct Layer {
        Linear query, key, value, output;
        Tensor ln1_gain, ln1_bias;
        Linear ffn_in, ffn_out;
        Tensor ln2_gain, ln2_bias;
    };

    BackboneConfig config_;
    Tensor token_embedding_;
    Tensor position_embedding_;
    Tensor emb_ln_gain_, emb_ln_bias_;
    std::vector<Layer> layers_;
    std::vector<PluginSlot> slots_;
};

std::vector<PluginSlot> plugin_slots(const BackboneConfig& config);

}  // namespace capscl
