#include "capscl/report.hpp"

#include <cstdio>
#include <map>
#include <sstream>

namespace capscl {

using nlohmann::json;

namespace {

json matrix_json(const metrics::AccuracyMatrix& a) {
    json rows = json::array();
    for (std::size_t i = 0; i < a.size(); ++i) {
        json row = json::array();
        for (std::size_t j = 0; j < a.size(); ++j) {
            const auto v = a.get(i, j);
            row.push_back(v ? json(*v) : json(nullptr));
        }
        rows.push_back(row);
    }
    return rows;
}

bool sequential(Mode m) { return m != Mode::sdl && m != Mode::joint; }

json optional_array(const std::vector<std::optional<double>>& v) {
    json out = json::array();
    for (const auto& x : v) out.push_back(x ? json(*x) : json(nullptr));
    return out;
}

std::vector<double> numbers(const json& report, const char* key) {
    if (!report.contains(key) || !report.at(key).is_array())
        throw ReportError(std::string("report: missing array '") + key + "'");
    std::vector<double> out;
    for (const auto& v : report.at(key)) {
        if (!v.is_number()) throw ReportError(std::string("report: non-numeric entry in '") + key + "'");
        out.push_back(v.get<double>());
    }
    return out;
}

double average(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / double(v.size());
}

}  // namespace

json run_report(const RunResult& r, const RunConfig& config) {
    const std::size_t n = r.accuracy.size();
    const bool seq = sequential(r.mode);
    json j;
    j["mode"] = to_string(r.mode);
    j["seed"] = r.seed;
    j["tasks"] = r.task_names;
    j["order"] = r.order;
    j["accuracy_matrix"] = matrix_json(r.accuracy);
    j["macro_f1_matrix"] = matrix_json(r.macro_f1);

    // Row the task was first evaluated in: its own row, or the single joint row.
    auto forward = [&](const metrics::AccuracyMatrix& a) {
        json out = json::array();
        for (std::size_t t = 0; t < n; ++t) out.push_back(a.at(r.mode == Mode::joint ? n - 1 : t, t));
        return out;
    };
    j["forward_accuracy"] = forward(r.accuracy);
    j["forward_macro_f1"] = forward(r.macro_f1);
    if (r.mode == Mode::sdl) {
        j["final_accuracy"] = j["forward_accuracy"];
        j["final_macro_f1"] = j["forward_macro_f1"];
        j["standalone"] = {{"accuracy", optional_array(r.standalone_accuracy)},
                           {"macro_f1", optional_array(r.standalone_macro_f1)}};
    } else {
        json acc = json::array(), mf1 = json::array();
        for (std::size_t t = 0; t < n; ++t) {
            acc.push_back(r.accuracy.at(n - 1, t));
            mf1.push_back(r.macro_f1.at(n - 1, t));
        }
        j["final_accuracy"] = acc;
        j["final_macro_f1"] = mf1;
    }
    if (seq && n >= 2) {
        j["forgetting_rate"] = {{"accuracy", metrics::forgetting_rate(r.accuracy, n)},
                                {"macro_f1", metrics::forgetting_rate(r.macro_f1, n)}};
        json bwt_acc = json::array(), bwt_mf1 = json::array();
        for (std::size_t t = 0; t < n; ++t) {
            bwt_acc.push_back(r.accuracy.at(n - 1, t) - r.accuracy.at(t, t));
            bwt_mf1.push_back(r.macro_f1.at(n - 1, t) - r.macro_f1.at(t, t));
        }
        j["backward_transfer"] = {{"accuracy", bwt_acc}, {"macro_f1", bwt_mf1}};
    } else {
        j["forgetting_rate"] = nullptr;
        j["backward_transfer"] = nullptr;
    }
    j["free_fraction"] = r.free_fraction;

    json logs = json::array();
    for (const auto& log : r.logs) {
        json epochs = json::array();
        for (const auto& e : log.epochs) {
            epochs.push_back({{"epoch", e.epoch},
                              {"train_loss", e.train_loss},
                              {"validation_loss", e.validation_loss},
                              {"validation_accuracy", e.validation_accuracy}});
        }
        logs.push_back({{"task", log.task}, {"best_epoch", log.best_epoch}, {"epochs", epochs}});
    }
    j["training"] = logs;

    RunConfig used = config;
    used.trainer.mode = r.mode;
    used.trainer.seeds = {r.seed};
    j["config"] = config_to_json(used);
    return j;
}

std::vector<ModeSummary> aggregate_reports(const std::vector<json>& reports) {
    if (reports.empty()) throw ReportError("report: no inputs");
    std::size_t n = 0;
    for (std::size_t k = 0; k < reports.size(); ++k) {
        const std::size_t tasks = numbers(reports[k], "final_accuracy").size();
        if (k == 0) n = tasks;
        if (tasks != n || tasks == 0) {
            throw ReportError("report: inconsistent task counts (" + std::to_string(n) + " vs " +
                              std::to_string(tasks) + " in input " + std::to_string(k + 1) + ")");
        }
    }

    std::map<std::string, std::pair<double, std::size_t>> standalone;
    for (const auto& r : reports) {
        if (r.value("mode", "") != "sdl") continue;
        const auto acc = numbers(r, "forward_accuracy");
        const auto& names = r.at("tasks");
        for (std::size_t t = 0; t < n; ++t) {
            auto& s = standalone[names.at(t).get<std::string>()];
            s.first += acc[t];
            s.second += 1;
        }
    }

    std::vector<std::string> order;
    struct Samples {
        std::vector<double> acc, mf1, fwd, fr, bwt, fwt;
    };
    std::map<std::string, Samples> by_mode;
    for (const auto& r : reports) {
        const std::string mode = r.value("mode", "");
        if (mode.empty()) throw ReportError("report: input without a mode");
        if (!by_mode.count(mode)) order.push_back(mode);
        Samples& s = by_mode[mode];
        s.acc.push_back(average(numbers(r, "final_accuracy")));
        s.mf1.push_back(average(numbers(r, "final_macro_f1")));
        const auto fwd = numbers(r, "forward_accuracy");
        s.fwd.push_back(average(fwd));
        if (r.contains("forgetting_rate") && r.at("forgetting_rate").is_object())
            s.fr.push_back(r.at("forgetting_rate").at("accuracy").get<double>());
        if (r.contains("backward_transfer") && r.at("backward_transfer").is_object()) {
            std::vector<double> b;
            for (const auto& v : r.at("backward_transfer").at("accuracy")) b.push_back(v.get<double>());
            s.bwt.push_back(average(b));
        }
        if (mode != "sdl" && !standalone.empty()) {
            const auto& names = r.at("tasks");
            double total = 0.0;
            bool complete = true;
            for (std::size_t t = 0; t < n && complete; ++t) {
                auto it = standalone.find(names.at(t).get<std::string>());
                if (it == standalone.end()) complete = false;
                else total += fwd[t] - it->second.first / double(it->second.second);
            }
            if (complete) s.fwt.push_back(total / double(n));
        }
    }

    std::vector<ModeSummary> rows;
    for (const auto& mode : order) {
        const Samples& s = by_mode[mode];
        ModeSummary row;
        row.mode = mode;
        row.runs = s.acc.size();
        row.accuracy = metrics::mean_std(s.acc);
        row.macro_f1 = metrics::mean_std(s.mf1);
        row.forward_accuracy = metrics::mean_std(s.fwd);
        if (!s.fr.empty()) row.forgetting = metrics::mean_std(s.fr);
        if (!s.bwt.empty()) row.backward_transfer = metrics::mean_std(s.bwt);
        if (!s.fwt.empty()) row.forward_transfer = metrics::mean_std(s.fwt);
        rows.push_back(row);
    }
    return rows;
}

namespace {

std::string fixed(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

std::string pm(const std::optional<metrics::MeanStd>& m) {
    return m ? fixed(m->mean) + " +- " + fixed(m->std) : "-";
}

std::string csv_pair(const std::optional<metrics::MeanStd>& m) {
    return m ? fixed(m->mean) + "," + fixed(m->std) : ",";
}

}  // namespace

std::string summary_csv(const std::vector<ModeSummary>& rows) {
    std::ostringstream out;
    out << "mode,runs,accuracy_mean,accuracy_std,macro_f1_mean,macro_f1_std,forward_accuracy_mean,"
           "forward_accuracy_std,forgetting_mean,forgetting_std,backward_transfer_mean,backward_transfer_std,"
           "forward_transfer_mean,forward_transfer_std\n";
    for (const auto& r : rows) {
        out << r.mode << ',' << r.runs << ',' << csv_pair(r.accuracy) << ',' << csv_pair(r.macro_f1) << ','
            << csv_pair(r.forward_accuracy) << ',' << csv_pair(r.forgetting) << ','
            << csv_pair(r.backward_transfer) << ',' << csv_pair(r.forward_transfer) << '\n';
    }
    return out.str();
}

std::string summary_table(const std::vector<ModeSummary>& rows) {
    const std::vector<std::string> header{"mode", "runs", "acc", "mf1", "fwd acc", "FR", "BWT", "FWT"};
    std::vector<std::vector<std::string>> cells{header};
    for (const auto& r : rows) {
        cells.push_back({r.mode, std::to_string(r.runs), pm(r.accuracy), pm(r.macro_f1), pm(r.forward_accuracy),
                         pm(r.forgetting), pm(r.backward_transfer), pm(r.forward_transfer)});
    }
    std::vector<std::size_t> width(header.size(), 0);
    for (const auto& row : cells)
        for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
    std::ostringstream out;
    for (const auto& row : cells) {
        for (std::size_t c = 0; c < row.size(); ++c) {
            out << row[c] << std::string(width[c] - row[c].size(), ' ');
            out << (c + 1 < row.size() ? "  " : "\n");
        }
    }
    return out.str();
}

}  // namespace capscl
