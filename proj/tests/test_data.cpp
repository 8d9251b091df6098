#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "capscl/backbone.hpp"
#include "capscl/data.hpp"
#include "capscl/rng.hpp"

using namespace capscl;
using namespace capscl::data;
namespace fs = std::filesystem;

namespace {

SuiteSpec spec(SuiteKind kind, std::size_t tasks = 3) {
    SuiteSpec s;
    s.kind = kind;
    s.num_tasks = tasks;
    s.train_per_task = 200;
    s.validation_per_task = 40;
    s.test_per_task = 200;
    s.seed = 5;
    return s;
}

std::set<std::int32_t> vocabulary(const TaskDataset& d) {
    std::set<std::int32_t> v;
    for (auto s : {Split::train, Split::validation, Split::test})
        for (const auto& ex : d.split(s))
            for (std::size_t i = 1; i < ex.tokens.size(); ++i) v.insert(ex.tokens[i]);
    return v;
}

/// Bag-of-words logistic regression trained by plain gradient descent.
double probe_accuracy(const std::vector<Example>& train, const std::vector<Example>& test, std::size_t vocab) {
    std::vector<double> w(vocab, 0.0);
    double b = 0.0;
    auto score = [&](const Example& ex) {
        double z = b;
        for (std::size_t i = 1; i < ex.tokens.size(); ++i) z += w[std::size_t(ex.tokens[i])];
        return z;
    };
    for (int epoch = 0; epoch < 50; ++epoch)
        for (const auto& ex : train) {
            const double p = 1.0 / (1.0 + std::exp(-score(ex)));
            const double g = p - ex.label;
            for (std::size_t i = 1; i < ex.tokens.size(); ++i) w[std::size_t(ex.tokens[i])] -= 0.1 * g;
            b -= 0.1 * g;
        }
    std::size_t hit = 0;
    for (const auto& ex : test) hit += (score(ex) > 0) == (ex.label == 1);
    return double(hit) / double(test.size());
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("capscl_" + name)) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("generator is deterministic and well formed") {
    for (SuiteKind kind : {SuiteKind::similar, SuiteKind::dissimilar, SuiteKind::mixed}) {
        const auto a = gen_synthetic_suite(spec(kind));
        const auto b = gen_synthetic_suite(spec(kind));
        CHECK(a == b);
        SuiteSpec other = spec(kind);
        other.seed = 6;
        CHECK(gen_synthetic_suite(other) != a);
        REQUIRE(a.size() == 3);
        for (const auto& d : a) {
            CHECK(d.train.size() == 200);
            CHECK(d.validation.size() == 40);
            CHECK(d.test.size() == 200);
            std::set<std::vector<std::int32_t>> seen;
            std::size_t total = 0;
            for (auto s : {Split::train, Split::validation, Split::test}) {
                std::size_t ones = 0;
                for (const auto& ex : d.split(s)) {
                    CHECK(ex.tokens.front() == kClsId);
                    CHECK(ex.tokens.size() <= 32);
                    for (auto t : ex.tokens) {
                        CHECK(t >= kClsId);
                        CHECK(t < 512);
                    }
                    CHECK((ex.label == 0 || ex.label == 1));
                    ones += ex.label;
                    seen.insert(ex.tokens);
                    ++total;
                }
                CHECK(ones * 2 == d.split(s).size());
            }
            // splits are disjoint
            CHECK(seen.size() == total);
        }
    }
}

TEST_CASE("dissimilar tasks use disjoint vocabularies, similar ones share") {
    const auto dis = gen_synthetic_suite(spec(SuiteKind::dissimilar));
    for (std::size_t i = 0; i < dis.size(); ++i)
        for (std::size_t j = i + 1; j < dis.size(); ++j) {
            const auto vi = vocabulary(dis[i]), vj = vocabulary(dis[j]);
            for (auto t : vi) CHECK(vj.count(t) == 0);
        }
    const auto sim = gen_synthetic_suite(spec(SuiteKind::similar));
    const auto v0 = vocabulary(sim[0]), v1 = vocabulary(sim[1]);
    std::size_t shared = 0;
    for (auto t : v0) shared += v1.count(t);
    CHECK(shared > v0.size() / 2);
}

TEST_CASE("a probe trained on one similar task transfers to another") {
    const auto sim = gen_synthetic_suite(spec(SuiteKind::similar));
    const auto dis = gen_synthetic_suite(spec(SuiteKind::dissimilar));
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(probe_accuracy(sim[i].train, sim[i].test, 512) >= 0.9);
        for (std::size_t j = 0; j < 3; ++j) {
            if (i == j) continue;
            CHECK(probe_accuracy(sim[i].train, sim[j].test, 512) >= 0.7);
            CHECK(probe_accuracy(dis[i].train, dis[j].test, 512) <= 0.6);
        }
    }
}

TEST_CASE("mixed suites: similar first half, dissimilar second half") {
    const auto mixed = gen_synthetic_suite(spec(SuiteKind::mixed, 4));
    const auto v0 = vocabulary(mixed[0]), v1 = vocabulary(mixed[1]);
    const auto v2 = vocabulary(mixed[2]), v3 = vocabulary(mixed[3]);
    std::size_t shared01 = 0;
    for (auto t : v0) shared01 += v1.count(t);
    CHECK(shared01 > 0);
    for (auto t : v2) {
        CHECK(v3.count(t) == 0);
        CHECK(v0.count(t) == 0);
    }
}

TEST_CASE("generator rejects infeasible specs") {
    SuiteSpec s = spec(SuiteKind::dissimilar, 3);
    s.vocab_size = 30;
    CHECK_THROWS_AS(gen_synthetic_suite(s), std::invalid_argument);
    s = spec(SuiteKind::similar);
    s.num_tasks = 0;
    CHECK_THROWS_AS(gen_synthetic_suite(s), std::invalid_argument);
    s = spec(SuiteKind::similar);
    s.max_tokens = 1;
    CHECK_THROWS_AS(gen_synthetic_suite(s), std::invalid_argument);
    CHECK_THROWS_AS(suite_kind_from_string("alike"), std::invalid_argument);
}

TEST_CASE("dataset files round-trip and report errors by line") {
    TempDir dir("data_test");
    const auto suite = gen_synthetic_suite(spec(SuiteKind::similar, 2));
    write_suite(suite, spec(SuiteKind::similar, 2), dir.path);
    SuiteManifest manifest;
    const auto back = load_suite(dir.path, &manifest);
    REQUIRE(back.size() == 2);
    for (std::size_t t = 0; t < 2; ++t) {
        CHECK(back[t].train == suite[t].train);
        CHECK(back[t].validation == suite[t].validation);
        CHECK(back[t].test == suite[t].test);
        CHECK(back[t].name == suite[t].name);
    }
    CHECK(manifest.spec.seed == 5);
    CHECK(load_suite(dir.path / "suite.json").size() == 2);

    auto write_lines = [&](const std::string& name, const std::vector<std::string>& lines) {
        std::ofstream out(dir.path / name);
        for (const auto& l : lines) out << l << "\n";
        return dir.path / name;
    };
    auto error_line = [](const fs::path& p, const DatasetLimits& limits = {}) -> std::size_t {
        try {
            load_dataset(p, limits);
        } catch (const DatasetError& e) {
            return e.line();
        }
        return 9999;
    };
    std::vector<std::string> lines(6, R"({"tokens": [1, 4, 5], "label": 1})");
    lines.push_back(R"({"tokens": [1, 4, 5], "label": )");
    CHECK(error_line(write_lines("broken.jsonl", lines)) == 7);
    lines.back() = R"({"tokens": [1, 4, 5], "label": 0, "colour": "red"})";
    CHECK(error_line(write_lines("extra.jsonl", lines)) == 7);
    lines.back() = R"({"tokens": [1, 4, 600], "label": 0})";
    CHECK(error_line(write_lines("vocab.jsonl", lines), {512, 0, 0}) == 7);
    lines.back() = R"({"tokens": [1, 4], "label": 3})";
    CHECK(error_line(write_lines("label.jsonl", lines), {0, 2, 0}) == 7);
    lines.back() = R"({"tokens": [1, 4], "label": 0, "split": "holdout"})";
    CHECK(error_line(write_lines("split.jsonl", lines)) == 7);
    lines.back() = R"({"tokens": [], "label": 0})";
    CHECK(error_line(write_lines("empty_seq.jsonl", lines)) == 7);
    lines.back() = R"({"tokens": [1, 2, 3, 4], "label": 0})";
    CHECK(error_line(write_lines("long.jsonl", lines), {0, 0, 3}) == 7);

    const fs::path empty = write_lines("empty.jsonl", {});
    CHECK_THROWS_AS(load_dataset(empty), DatasetError);
    CHECK_THROWS_AS(load_dataset(dir.path / "missing.jsonl"), DatasetError);

    // Lines without a split are training data; the class count is inferred.
    const auto plain = load_dataset(write_lines("plain.jsonl", {R"({"tokens": [1, 4], "label": 2})",
                                                                R"({"tokens": [1, 5], "label": 0, "split": "test"})"}));
    CHECK(plain.train.size() == 1);
    CHECK(plain.test.size() == 1);
    CHECK(plain.num_classes == 3);
}
