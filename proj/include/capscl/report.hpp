#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "capscl/config.hpp"
#include "capscl/metrics.hpp"
#include "capscl/trainer.hpp"

namespace capscl {

/// metrics.json content for one run. Holds no timestamps or timings, so
/// identical (config, seed) pairs produce identical bytes.
nlohmann::json run_report(const RunResult& result, const RunConfig& config);

class ReportError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// One row of the aggregated report: mean and sample std over runs of a mode.
struct ModeSummary {
    std::string mode;
    std::size_t runs = 0;
    metrics::MeanStd accuracy;          ///< final accuracy averaged over tasks
    metrics::MeanStd macro_f1;          ///< final macro-F1 averaged over tasks
    metrics::MeanStd forward_accuracy;  ///< A[t][t] averaged over tasks
    std::optional<metrics::MeanStd> forgetting;         ///< accuracy FR, sequential modes
    std::optional<metrics::MeanStd> backward_transfer;  ///< accuracy, sequential modes
    std::optional<metrics::MeanStd> forward_transfer;   ///< accuracy, needs an sdl run
};

/// Groups runs by mode (first-seen order). All inputs must cover the same
/// number of tasks. Forward transfer compares each task with the sdl result
/// for the same task name, averaged over the sdl runs given.
std::vector<ModeSummary> aggregate_reports(const std::vector<nlohmann::json>& reports);

std::string summary_csv(const std::vector<ModeSummary>& rows);
std::string summary_table(const std::vector<ModeSummary>& rows);

}  // namespace capscl
