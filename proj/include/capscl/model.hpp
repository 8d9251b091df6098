#pragma once

#include <optional>
#include <string>
#include <vector>

#include "capscl/backbone.hpp"
#include "capscl/ksm.hpp"
#include "capscl/tsm.hpp"

namespace capscl {

/// Training regimes; the ablations switch parts of the plugin off.
enum class Mode { ctr, ctr_no_ksm, ctr_no_tsm, ctr_no_tr, sdl, nfh, joint };

std::string to_string(Mode m);
Mode mode_from_string(const std::string& s);

/// Which plugin components are live.
struct PluginVariant {
    bool ksm = true;     ///< false: the TSM reads the plugin input directly
    bool router = true;  ///< false: every transfer route is connected
    bool masks = true;   ///< false: TSM is unmasked and unprotected

    static PluginVariant for_mode(Mode m);
    bool operator==(const PluginVariant&) const = default;
};

struct ModelConfig {
    BackboneConfig backbone;
    ksm::KsmConfig ksm;
    tsm::TsmConfig tsm;

    void validate() const;
};

struct ForwardContext {
    bool training = false;
    double s = 200.0;  ///< mask scale for an unfinished task
    Rng* rng = nullptr;
};

/// Per-forward routing record, one entry per plugin slot.
struct ForwardDiagnostics {
    std::vector<std::vector<std::vector<std::vector<std::uint8_t>>>> gates;  ///< [slot][j][i][b]
};

/// KSM -> TSM -> residual add. Output shape equals input shape.
class ClPlugin {
public:
    ClPlugin() = default;
    ClPlugin(std::size_t embed_dim, std::size_t max_tokens, const ksm::KsmConfig& ksm_config,
             const tsm::TsmConfig& tsm_config, const PluginVariant& variant, Rng& rng);

    void add_task(std::size_t task_id, Rng& rng);

    /// h + TSM(concat(v_1..v_nj) or h, task, s).
    Tensor forward(Tape& tape, const Tensor& h, std::size_t tokens, std::size_t task,
                   const ForwardContext& ctx,
                   std::vector<std::vector<std::vector<std::uint8_t>>>* gates = nullptr) const;

    bool has_ksm() const { return ksm_.has_value(); }
    const ksm::KnowledgeSharingModule& ksm() const { return ksm_.value(); }
    const tsm::TaskSpecificModule& tsm() const { return tsm_; }
    tsm::TaskSpecificModule& tsm() { return tsm_; }

    std::vector<Tensor> parameters() const;
    NamedTensors named_parameters() const;

private:
    std::optional<ksm::KnowledgeSharingModule> ksm_;
    tsm::TaskSpecificModule tsm_;
};

struct TaskHead {
    Linear linear;
    std::size_t num_classes = 0;
};

/// Frozen backbone with one CL-plugin per active slot and one head per task.
class ContinualModel {
public:
    ContinualModel(const ModelConfig& config, const PluginVariant& variant, Rng& rng);

    const ModelConfig& config() const { return config_; }
    const PluginVariant& variant() const { return variant_; }
    const Backbone& backbone() const { return backbone_; }
    const std::vector<ClPlugin>& plugins() const { return plugins_; }
    std::vector<ClPlugin>& plugins() { return plugins_; }
    const TaskHead& head(std::size_t task) const { return heads_.at(task); }
    std::size_t num_tasks() const { return heads_.size(); }
    bool finished(std::size_t task) const { return task < finished_.size() && finished_[task]; }

    /// Registers the next task: capsules, task embeddings and a fresh head.
    std::size_t add_task(std::size_t num_classes, Rng& rng);

    /// Class logits [B x num_classes(task)].
    Tensor forward(Tape& tape, const TokenBatch& batch, std::size_t task, const ForwardContext& ctx,
                   ForwardDiagnostics* diagnostics = nullptr) const;

    /// Stores the task's masks in every plugin and freezes its head.
    void finalize_task(std::size_t task);

    /// Parameters that may receive gradient: plugins plus unfinished heads.
    std::vector<Tensor> trainable_parameters() const;
    void apply_gradient_masks();
    void clamp_embeddings(std::size_t task);
    void compensate_embedding_gradients(std::size_t task, double s);

    /// Rounds every parameter to the nearest float32 value. Checkpoints store
    /// float32, so keeping the live model representable makes reloads exact.
    void round_to_storage();

    /// Every tensor, including the frozen backbone, under a stable name.
    NamedTensors named_parameters() const;
    /// Marks tasks finished after their masks were restored from disk.
    void restore_finished(std::vector<bool> finished);

private:
    ModelConfig config_;
    PluginVariant variant_;
    Backbone backbone_;
    std::vector<ClPlugin> plugins_;
    std::vector<TaskHead> heads_;
    std::vector<bool> finished_;
};

}  // namespace capscl
