#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "capscl/checkpoint.hpp"
#include "capscl/config.hpp"
#include "capscl/data.hpp"
#include "capscl/report.hpp"
#include "capscl/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace capscl;

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::vector<std::size_t> parse_order(const std::string& text) {
    std::vector<std::size_t> order;
    std::stringstream in(text);
    std::string item;
    while (std::getline(in, item, ',')) {
        std::size_t used = 0;
        unsigned long v = 0;
        try {
            v = std::stoul(item, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used == 0 || used != item.size() || item[0] == '-')
            throw UsageError("--order: '" + item + "' is not a task index");
        order.push_back(v);
    }
    return order;
}

std::size_t thread_count() {
    const char* v = std::getenv("CAPS_CL_THREADS");
    if (!v || !*v) return 1;
    char* end = nullptr;
    const long n = std::strtol(v, &end, 10);
    if (*end != '\0' || n < 1) throw UsageError(std::string("CAPS_CL_THREADS: expected a positive integer, got '") + v + "'");
    return std::size_t(n);
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error(path.string() + ": cannot open for writing");
    out << j.dump(2) << "\n";
    if (!out) throw std::runtime_error(path.string() + ": write failed");
}

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error(path.string() + ": cannot open");
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw std::runtime_error(path.string() + ": " + e.what());
    }
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

// ---- synth ----

struct SynthArgs {
    std::string kind = "similar";
    data::SuiteSpec spec;
    std::string out;
};

int cmd_synth(const SynthArgs& a) {
    data::SuiteSpec spec = a.spec;
    try {
        spec.kind = data::suite_kind_from_string(a.kind);
    } catch (const std::invalid_argument& e) {
        throw UsageError(std::string("--kind: ") + e.what());
    }
    const auto tasks = data::gen_synthetic_suite(spec);
    data::write_suite(tasks, spec, a.out);
    std::cout << "wrote " << tasks.size() << " " << a.kind << " tasks (seed " << spec.seed << ") to " << a.out
              << "\n";
    return 0;
}

// ---- train ----

struct TrainArgs {
    std::string config;
    std::string suite;
    std::string out;
    std::string mode;
    std::string order;
    std::vector<std::uint64_t> seeds;
};

struct SeedOutcome {
    json report;
    std::string error;
};

SeedOutcome train_one(const RunConfig& config, const std::vector<data::TaskDataset>& tasks, std::uint64_t seed,
                      const std::vector<std::size_t>& order, const fs::path& dir) {
    SeedOutcome outcome;
    try {
        fs::create_directories(dir);
        std::optional<ContinualModel> model;
        const bool keep = config.trainer.mode != Mode::sdl;
        RunResult r = run_sequence(config.model, config.trainer, tasks, seed, order, keep ? &model : nullptr);
        outcome.report = run_report(r, config);
        if (model) {
            CheckpointInfo info{config, seed, r.task_names, r.order};
            info.config.trainer.seeds = {seed};
            save_checkpoint(dir, *model, info);
        }
        write_json(dir / "metrics.json", outcome.report);
    } catch (const std::exception& e) {
        outcome.error = "seed " + std::to_string(seed) + ": " + e.what();
    }
    return outcome;
}

int cmd_train(const TrainArgs& a) {
    RunConfig config = a.config.empty() ? RunConfig{} : load_config(a.config);
    if (!a.suite.empty()) config.paths.suite = a.suite;
    if (!a.out.empty()) config.paths.out = a.out;
    if (!a.mode.empty()) {
        try {
            config.trainer.mode = mode_from_string(a.mode);
        } catch (const std::invalid_argument& e) {
            throw UsageError(std::string("--mode: ") + e.what());
        }
    }
    if (!a.seeds.empty()) config.trainer.seeds = a.seeds;
    if (config.paths.suite.empty()) throw UsageError("train: no suite given (--suite or paths.suite)");
    if (config.paths.out.empty()) throw UsageError("train: no output directory given (--out or paths.out)");

    data::SuiteManifest manifest;
    const auto tasks = data::load_suite(config.paths.suite, &manifest);
    if (a.config.empty()) {
        // Without a config the backbone adopts the suite's vocabulary and length.
        config.model.backbone.vocab_size = manifest.spec.vocab_size;
        config.model.backbone.max_tokens = manifest.spec.max_tokens;
    }
    config.validate();
    for (const auto& t : tasks) {
        for (const auto* split : {&t.train, &t.validation, &t.test}) {
            for (const auto& ex : *split) {
                if (ex.tokens.size() > config.model.backbone.max_tokens)
                    throw ConfigError("task '" + t.name + "' has examples longer than backbone.max_tokens");
                for (auto id : ex.tokens)
                    if (id < 0 || std::size_t(id) >= config.model.backbone.vocab_size)
                        throw ConfigError("task '" + t.name + "' uses token ids outside backbone.vocab_size");
            }
        }
    }
    const std::vector<std::size_t> order = a.order.empty() ? std::vector<std::size_t>{} : parse_order(a.order);

    const auto& seeds = config.trainer.seeds;
    const fs::path out = config.paths.out;
    auto dir_for = [&](std::uint64_t s) { return seeds.size() == 1 ? out : out / ("seed_" + std::to_string(s)); };

    std::vector<SeedOutcome> outcomes(seeds.size());
    const std::size_t workers = std::min(thread_count(), seeds.size());
    if (workers <= 1) {
        for (std::size_t k = 0; k < seeds.size(); ++k)
            outcomes[k] = train_one(config, tasks, seeds[k], order, dir_for(seeds[k]));
    } else {
        std::mutex m;
        std::size_t next = 0;
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&] {
                for (;;) {
                    std::size_t k;
                    {
                        std::lock_guard lock(m);
                        if (next == seeds.size()) return;
                        k = next++;
                    }
                    outcomes[k] = train_one(config, tasks, seeds[k], order, dir_for(seeds[k]));
                }
            });
        }
        for (auto& t : pool) t.join();
    }

    std::vector<json> reports;
    for (const auto& o : outcomes) {
        if (!o.error.empty()) throw std::runtime_error(o.error);
        reports.push_back(o.report);
    }
    const auto rows = aggregate_reports(reports);
    const ModeSummary& s = rows.front();
    std::cout << "trained " << s.mode << " on " << tasks.size() << " tasks, " << s.runs << " seed(s): acc "
              << fmt(s.accuracy.mean) << " mf1 " << fmt(s.macro_f1.mean);
    if (s.forgetting) std::cout << " FR " << fmt(s.forgetting->mean);
    std::cout << " -> " << out.string() << "\n";
    return 0;
}

// ---- eval ----

struct EvalArgs {
    std::string checkpoint;
    std::string suite;
    std::string out;
};

int cmd_eval(const EvalArgs& a) {
    LoadedCheckpoint ck = load_checkpoint(a.checkpoint);
    const std::string suite = a.suite.empty() ? ck.info.config.paths.suite : a.suite;
    if (suite.empty()) throw UsageError("eval: no suite given (--suite)");
    const auto tasks = data::load_suite(suite);
    json results = json::array();
    double acc = 0.0, mf1 = 0.0;
    std::size_t n = 0;
    for (std::size_t t = 0; t < ck.model.num_tasks(); ++t) {
        if (!ck.model.finished(t)) continue;
        const std::size_t idx = ck.info.order.at(t);
        if (idx >= tasks.size()) throw std::runtime_error("eval: checkpoint task index outside the suite");
        const auto& ds = tasks[idx];
        if (ds.num_classes != ck.model.head(t).num_classes)
            throw std::runtime_error("eval: class count of task '" + ds.name + "' differs from the checkpoint");
        const EvalResult r = evaluate(ck.model, t, ds.test);
        results.push_back({{"task", ds.name}, {"accuracy", r.accuracy}, {"macro_f1", r.macro_f1}, {"loss", r.loss},
                           {"predictions", r.predictions}});
        acc += r.accuracy;
        mf1 += r.macro_f1;
        ++n;
    }
    if (n == 0) throw std::runtime_error("eval: checkpoint holds no finished tasks");
    if (!a.out.empty()) write_json(a.out, {{"checkpoint", a.checkpoint}, {"tasks", results}});
    std::cout << "evaluated " << n << " tasks: acc " << fmt(acc / double(n)) << " mf1 " << fmt(mf1 / double(n))
              << "\n";
    return 0;
}

// ---- report ----

struct ReportArgs {
    std::vector<std::string> inputs;
    std::string out;
};

int cmd_report(const ReportArgs& a) {
    std::vector<json> reports;
    for (const auto& p : a.inputs) {
        fs::path path = p;
        if (fs::is_directory(path)) path /= "metrics.json";
        reports.push_back(read_json(path));
    }
    const auto rows = aggregate_reports(reports);
    const std::string table = summary_table(rows);
    if (!a.out.empty()) {
        fs::create_directories(a.out);
        std::ofstream csv(fs::path(a.out) / "summary.csv", std::ios::trunc);
        csv << summary_csv(rows);
        std::ofstream txt(fs::path(a.out) / "summary.txt", std::ios::trunc);
        txt << table;
        if (!csv || !txt) throw std::runtime_error(a.out + ": cannot write summary files");
    }
    std::cout << "aggregated " << reports.size() << " report(s) into " << rows.size() << " mode(s)\n" << table;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Capsule-based continual learning plugins on a frozen transformer encoder"};
    app.require_subcommand(1);

    SynthArgs synth;
    auto* s = app.add_subcommand("synth", "Generate a synthetic task suite");
    s->add_option("--kind", synth.kind, "similar, dissimilar or mixed")->capture_default_str();
    s->add_option("--tasks", synth.spec.num_tasks, "Number of tasks")->capture_default_str();
    s->add_option("--seed", synth.spec.seed, "Generator seed")->capture_default_str();
    s->add_option("--out", synth.out, "Output directory")->required();
    s->add_option("--train", synth.spec.train_per_task, "Train examples per task")->capture_default_str();
    s->add_option("--validation", synth.spec.validation_per_task, "Validation examples per task")
        ->capture_default_str();
    s->add_option("--test", synth.spec.test_per_task, "Test examples per task")->capture_default_str();
    s->add_option("--vocab", synth.spec.vocab_size, "Vocabulary size")->capture_default_str();
    s->add_option("--max-tokens", synth.spec.max_tokens, "Sequence length including CLS")->capture_default_str();
    s->add_option("--keywords", synth.spec.keywords_per_class, "Keywords per class")->capture_default_str();

    TrainArgs train;
    auto* t = app.add_subcommand("train", "Train a task sequence and write checkpoint and metrics");
    t->add_option("--config", train.config, "Run configuration (JSON)");
    t->add_option("--suite", train.suite, "Suite directory or suite.json");
    t->add_option("--out", train.out, "Output directory");
    t->add_option("--mode", train.mode, "ctr, ctr_no_ksm, ctr_no_tsm, ctr_no_tr, sdl, nfh or joint");
    t->add_option("--order", train.order, "Task order as a comma list of suite indices");
    t->add_option("--seed", train.seeds, "Seed; repeat for several (overrides trainer.seeds)");

    EvalArgs eval;
    auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on the test splits");
    e->add_option("--checkpoint", eval.checkpoint, "Checkpoint directory")->required();
    e->add_option("--suite", eval.suite, "Suite directory (default: the one it was trained on)");
    e->add_option("--out", eval.out, "Write per-task results to this JSON file");

    ReportArgs report;
    auto* r = app.add_subcommand("report", "Aggregate metrics.json files into a table and CSV");
    r->add_option("inputs", report.inputs, "metrics.json files or run directories")->required();
    r->add_option("--out", report.out, "Directory for summary.csv and summary.txt");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        // --help exits 0; every other parse failure is a usage error.
        return app.exit(err) == 0 ? 0 : 2;
    }

    try {
        if (s->parsed()) return cmd_synth(synth);
        if (t->parsed()) return cmd_train(train);
        if (e->parsed()) return cmd_eval(eval);
        return cmd_report(report);
    } catch (const UsageError& err) {
        const CLI::App* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
        std::cerr << "error: " << err.what() << "\n" << sub->help();
        return 2;
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << "\n";
        return 1;
    }
}
