#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "capscl/layers.hpp"

namespace capscl::tsm {

using BinaryMask = std::vector<std::uint8_t>;

struct TsmConfig {
    std::size_t width = 128;             ///< hidden layer width
    double s_max = 200.0;
    double clamp = 6.0;                  ///< task embeddings are clamped to [-clamp, clamp]
    bool gradient_compensation = false;  ///< HAT-style embedding gradient compensation
    bool use_masks = true;               ///< false: plain unmasked, unprotected 2-layer network

    void validate() const;
};

/// Position inside one training epoch, 1-based.
struct AnnealSchedule {
    double s_max = 200.0;
    std::size_t batches_per_epoch = 2;  ///< B
    std::size_t batch_index = 1;        ///< b
};

/// s = 1/s_max + (s_max - 1/s_max)(b - 1)/(B - 1).
double anneal_s(const AnnealSchedule& schedule);

/// sigma(s * e), differentiable w.r.t. e.
Tensor compute_mask(Tape& tape, const Tensor& embedding, double s);

/// Elementwise max of binary masks; all-zeros of `width` when `masks` is empty.
BinaryMask accumulate_masks(const std::vector<BinaryMask>& masks, std::size_t width);

/// g <- g * (1 - m) with m expanded across each neuron's row: `grad` holds
/// `accumulated.size()` rows of equal length (a weight's fan-in, or 1 for a bias).
void mask_gradients(std::span<Scalar> grad, std::span<const std::uint8_t> accumulated);

/// Two masked fully-connected layers: FC -> ReLU -> (x) m1 -> FC -> (x) m2.
class TaskSpecificModule {
public:
    static constexpr std::size_t kLayers = 2;

    TaskSpecificModule() = default;
    TaskSpecificModule(std::size_t input_dim, std::size_t output_dim, const TsmConfig& config, Rng& rng);

    const TsmConfig& config() const { return config_; }
    std::size_t num_tasks() const { return embeddings_.size(); }
    std::size_t layer_width(std::size_t layer) const;
    bool finished(std::size_t task) const { return task < finished_.size() && finished_[task]; }

    /// Registers `task_id` (== num_tasks()) with fresh embeddings ~ U(-1, 1).
    void add_task(std::size_t task_id, Rng& rng);

    /// Finished tasks use their stored binary masks; an unfinished task uses
    /// sigma(s * e). `s` is ignored when masks are disabled.
    Tensor forward(Tape& tape, const Tensor& v, std::size_t task, double s) const;

    /// Stores indicator(sigma(s_max * e) > 0.5) per layer and refreshes the
    /// accumulated masks.
    void finalize_task_mask(std::size_t task);

    /// Zeroes gradient rows of neurons claimed by finished tasks.
    void apply_gradient_masks();
    /// Clamps the task's embeddings into [-clamp, clamp].
    void clamp_embeddings(std::size_t task);
    /// Rescales the task embedding gradients (only when enabled in the config).
    void compensate_embedding_gradients(std::size_t task, double s);

    const BinaryMask& stored_mask(std::size_t task, std::size_t layer) const;
    const BinaryMask& accumulated_mask(std::size_t layer) const { return accumulated_.at(layer); }
    const Tensor& embedding(std::size_t task, std::size_t layer) const { return embeddings_.at(task).at(layer); }
    const Linear& fc(std::size_t layer) const { return layer == 0 ? fc1_ : fc2_; }
    /// Fraction of neurons in `layer` not claimed by any finished task.
    double free_fraction(std::size_t layer) const;

    /// Restores state read back from a checkpoint.
    void restore_masks(std::vector<std::array<BinaryMask, kLayers>> stored, std::vector<bool> finished);

    std::vector<Tensor> parameters() const;
    NamedTensors named_parameters() const;

private:
    Tensor layer_mask(Tape& tape, std::size_t task, std::size_t layer, double s) const;
    void refresh_accumulated();

    TsmConfig config_;
    Linear fc1_, fc2_;
    std::vector<std::array<Tensor, kLayers>> embeddings_;
    std::vector<std::array<BinaryMask, kLayers>> stored_;
    std::vector<bool> finished_;
    std::array<BinaryMask, kLayers> accumulated_;
};

}  // namespace capscl::tsm
