#pragma once

#include <optional>
#include <span>
#include <vector>

namespace capscl::metrics {

/// counts[truth * num_classes + predicted]
struct Confusion {
    std::size_t num_classes = 0;
    std::vector<std::size_t> counts;

    std::size_t at(std::size_t truth, std::size_t predicted) const {
        return counts[truth * num_classes + predicted];
    }
};

Confusion confusion_matrix(std::span<const int> predictions, std::span<const int> labels,
                           std::size_t num_classes);
double accuracy(std::span<const int> predictions, std::span<const int> labels);
/// Unweighted mean of per-class F1; a class with no true and no predicted
/// examples (or otherwise undefined F1) contributes 0.
double macro_f1(std::span<const int> predictions, std::span<const int> labels, std::size_t num_classes);

/// A[i][j]: metric of task j right after training task i (i >= j). 0-based.
class AccuracyMatrix {
public:
    AccuracyMatrix() = default;
    explicit AccuracyMatrix(std::size_t tasks) : n_(tasks), cells_(tasks * tasks) {}

    std::size_t size() const { return n_; }
    void set(std::size_t after, std::size_t task, double value);
    std::optional<double> get(std::size_t after, std::size_t task) const;
    /// Throws std::out_of_range when the entry is missing.
    double at(std::size_t after, std::size_t task) const;
    bool has(std::size_t after, std::size_t task) const { return get(after, task).has_value(); }

private:
    std::size_t n_ = 0;
    std::vector<std::optional<double>> cells_;
};

/// FR after learning `t` tasks (t >= 2):
/// (1/(t-1)) * sum_{i<t-1} (A[i][i] - A[t-1][i]), 0-based indices.
double forgetting_rate(const AccuracyMatrix& a, std::size_t t);

struct TransferMetrics {
    std::vector<double> forward;   ///< A[t][t] - standalone[t]
    std::vector<double> backward;  ///< A[T][t] - A[t][t], T the final task
};

TransferMetrics transfer_metrics(const AccuracyMatrix& a, std::span<const std::optional<double>> standalone);

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;  ///< sample standard deviation, 0 for one value
};
MeanStd mean_std(std::span<const double> values);

}  // namespace capscl::metrics
