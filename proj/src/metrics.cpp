#include "capscl/metrics.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace capscl::metrics {

Confusion confusion_matrix(std::span<const int> predictions, std::span<const int> labels,
                           std::size_t num_classes) {
    if (predictions.size() != labels.size())
        throw std::invalid_argument("confusion_matrix: predictions and labels differ in length");
    Confusion c{num_classes, std::vector<std::size_t>(num_classes * num_classes, 0)};
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const int y = labels[i], p = predictions[i];
        if (y < 0 || p < 0 || std::size_t(y) >= num_classes || std::size_t(p) >= num_classes)
            throw std::out_of_range("confusion_matrix: class id outside [0, " + std::to_string(num_classes) + ")");
        ++c.counts[std::size_t(y) * num_classes + std::size_t(p)];
    }
    return c;
}

double accuracy(std::span<const int> predictions, std::span<const int> labels) {
    if (predictions.size() != labels.size()) throw std::invalid_argument("accuracy: length mismatch");
    if (labels.empty()) throw std::invalid_argument("accuracy: empty input");
    std::size_t hit = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) hit += predictions[i] == labels[i];
    return double(hit) / double(labels.size());
}

double macro_f1(std::span<const int> predictions, std::span<const int> labels, std::size_t num_classes) {
    if (labels.empty()) throw std::invalid_argument("macro_f1: empty input");
    if (num_classes == 0) throw std::invalid_argument("macro_f1: no classes");
    const Confusion c = confusion_matrix(predictions, labels, num_classes);
    double total = 0.0;
    for (std::size_t k = 0; k < num_classes; ++k) {
        std::size_t tp = c.at(k, k), fp = 0, fn = 0;
        for (std::size_t o = 0; o < num_classes; ++o) {
            if (o == k) continue;
            fp += c.at(o, k);
            fn += c.at(k, o);
        }
        const std::size_t denom = 2 * tp + fp + fn;
        total += denom ? 2.0 * double(tp) / double(denom) : 0.0;
    }
    return total / double(num_classes);
}

void AccuracyMatrix::set(std::size_t after, std::size_t task, double value) {
    if (after >= n_ || task > after) throw std::out_of_range("accuracy matrix: entry outside lower triangle");
    cells_[after * n_ + task] = value;
}

std::optional<double> AccuracyMatrix::get(std::size_t after, std::size_t task) const {
    if (after >= n_ || task >= n_) return std::nullopt;
    return cells_[after * n_ + task];
}

double AccuracyMatrix::at(std::size_t after, std::size_t task) const {
    auto v = get(after, task);
    if (!v) {
        throw std::out_of_range("accuracy matrix: missing entry A[" + std::to_string(after) + "][" +
                                std::to_string(task) + "]");
    }
    return *v;
}

double forgetting_rate(const AccuracyMatrix& a, std::size_t t) {
    if (t < 2) throw std::invalid_argument("forgetting_rate: needs at least 2 tasks");
    if (t > a.size()) throw std::out_of_range("forgetting_rate: more tasks than the matrix holds");
    const std::size_t last = t - 1;
    double total = 0.0;
    for (std::size_t i = 0; i < last; ++i) total += a.at(i, i) - a.at(last, i);
    return total / double(last);
}

TransferMetrics transfer_metrics(const AccuracyMatrix& a, std::span<const std::optional<double>> standalone) {
    const std::size_t n = a.size();
    if (n == 0) throw std::invalid_argument("transfer_metrics: empty matrix");
    if (standalone.size() != n) throw std::invalid_argument("transfer_metrics: standalone result count mismatch");
    TransferMetrics m;
    for (std::size_t t = 0; t < n; ++t) {
        if (!standalone[t]) throw std::out_of_range("transfer_metrics: missing standalone result for task " + std::to_string(t));
        m.forward.push_back(a.at(t, t) - *standalone[t]);
        m.backward.push_back(a.at(n - 1, t) - a.at(t, t));
    }
    return m;
}

MeanStd mean_std(std::span<const double> values) {
    if (values.empty()) throw std::invalid_argument("mean_std: no values");
    double sum = 0.0;
    for (double v : values) sum += v;
    MeanStd r;
    r.mean = sum / double(values.size());
    if (values.size() > 1) {
        double ss = 0.0;
        for (double v : values) ss += (v - r.mean) * (v - r.mean);
        r.std = std::sqrt(ss / double(values.size() - 1));
    }
    return r;
}

}  // namespace capscl::metrics
