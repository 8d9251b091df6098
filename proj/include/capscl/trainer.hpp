#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "capscl/data.hpp"
#include "capscl/metrics.hpp"
#include "capscl/model.hpp"
#include "capscl/optim.hpp"

namespace capscl {

struct TrainerConfig {
    Mode mode = Mode::ctr;
    double lr = 1e-3;
    std::size_t batch_size = 32;
    std::size_t epochs = 20;    ///< maximum epochs per task
    std::size_t patience = 3;   ///< early-stopping patience on validation loss
    std::vector<std::uint64_t> seeds{1};

    void validate() const;
};

struct EpochLog {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double validation_loss = 0.0;
    double validation_accuracy = 0.0;
};

struct TaskLog {
    std::size_t task = 0;
    std::vector<EpochLog> epochs;
    std::size_t best_epoch = 0;
};

struct EvalResult {
    double accuracy = 0.0;
    double macro_f1 = 0.0;
    double loss = 0.0;
    metrics::Confusion confusion;
    std::vector<int> predictions;
};

/// Packs examples[begin, end) into a padded batch.
TokenBatch make_batch(const std::vector<data::Example>& examples, std::span<const std::size_t> order,
                      std::size_t max_tokens);

/// Deterministic evaluation: no dropout, stored masks for finished tasks,
/// sigma(s_max * e) for the task in training, argmax routing.
EvalResult evaluate(const ContinualModel& model, std::size_t task, const std::vector<data::Example>& examples,
                    std::size_t batch_size = 64);

/// Per-task training loop with gradient surgery and early stopping.
class Trainer {
public:
    Trainer(ContinualModel& model, const TrainerConfig& config, Rng& rng);

    /// Trains `task` on dataset.train, early-stopping on dataset.validation
    /// and restoring the best epoch.
    TaskLog train_task(std::size_t task, const data::TaskDataset& dataset);
    /// Stores masks, freezes the head and clears optimizer state.
    void finalize_task(std::size_t task);

    /// One optimisation step on a prepared batch; returns the loss.
    double train_step(std::size_t task, const TokenBatch& batch, std::span<const int> labels, double s);

    const ad::Adam& optimizer() const { return optimizer_; }
    /// Rebuilds the optimizer over the model's current trainable set.
    void reset_optimizer();

private:
    ContinualModel& model_;
    TrainerConfig config_;
    Rng& rng_;
    ad::Adam optimizer_;
};

/// Everything recorded for one task sequence under one seed.
struct RunResult {
    Mode mode = Mode::ctr;
    std::uint64_t seed = 0;
    std::vector<std::size_t> order;        ///< dataset indices in training order
    std::vector<std::string> task_names;   ///< in training order
    metrics::AccuracyMatrix accuracy;      ///< indexed by position in `order`
    metrics::AccuracyMatrix macro_f1;
    std::vector<TaskLog> logs;
    /// Standalone results (mode sdl only).
    std::vector<std::optional<double>> standalone_accuracy;
    std::vector<std::optional<double>> standalone_macro_f1;
    /// free_fraction[slot][layer] after the last task.
    std::vector<std::vector<double>> free_fraction;
    /// Test-set predictions of each task after the final task, for checks.
    std::vector<std::vector<int>> final_predictions;
};

/// Runs `mode` over tasks in `order` (empty = natural order). When `model_out`
/// is given it receives the final model (sequential modes only).
RunResult run_sequence(const ModelConfig& model_config, const TrainerConfig& trainer_config,
                       const std::vector<data::TaskDataset>& tasks, std::uint64_t seed,
                       std::vector<std::size_t> order = {},
                       std::optional<ContinualModel>* model_out = nullptr);

}  // namespace capscl
