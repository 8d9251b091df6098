#include <doctest.h>

#include "capscl/metrics.hpp"
#include "oracles.hpp"

using namespace capscl::metrics;

namespace {

AccuracyMatrix lower(const std::vector<std::vector<double>>& rows) {
    AccuracyMatrix a(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j <= i; ++j) a.set(i, j, rows[i][j]);
    return a;
}

}  // namespace

TEST_CASE("accuracy and macro-F1 worked examples") {
    const std::vector<int> label{0, 0, 1, 1, 2, 2};
    CHECK(accuracy(label, label) == 1.0);
    CHECK(macro_f1(label, label, 3) == 1.0);
    const std::vector<int> pred{0, 1, 1, 1, 0, 2};
    CHECK(accuracy(pred, label) == doctest::Approx(4.0 / 6));
    // class 0: tp1 fp1 fn1 -> 0.5; class 1: tp2 fp1 fn0 -> 0.8; class 2: tp1 fp0 fn1 -> 2/3
    CHECK(macro_f1(pred, label, 3) == doctest::Approx((0.5 + 0.8 + 2.0 / 3) / 3).epsilon(1e-15));
    // A class absent from both labels and predictions contributes 0.
    const std::vector<int> two{0, 1, 0, 1};
    CHECK(macro_f1(two, two, 3) == doctest::Approx(2.0 / 3));
    const Confusion c = confusion_matrix(pred, label, 3);
    CHECK(c.at(0, 0) == 1);
    CHECK(c.at(0, 1) == 1);
    CHECK(c.at(2, 0) == 1);
    CHECK(c.at(2, 2) == 1);

    const std::vector<int> empty;
    CHECK_THROWS_AS(accuracy(empty, empty), std::invalid_argument);
    CHECK_THROWS_AS(macro_f1(empty, empty, 2), std::invalid_argument);
    CHECK_THROWS_AS(accuracy(pred, two), std::invalid_argument);
    const std::vector<int> out_of_range{0, 5};
    CHECK_THROWS_AS(macro_f1(out_of_range, std::vector<int>{0, 1}, 2), std::out_of_range);
}

TEST_CASE("accuracy and macro-F1 against enumeration on random instances") {
    capscl::Rng rng(11);
    for (int rep = 0; rep < 100; ++rep) {
        const int classes = 2 + int(rng.uniform(0, 4));
        const std::size_t n = 1 + std::size_t(rng.uniform(0, 40));
        std::vector<int> pred(n), label(n);
        for (std::size_t i = 0; i < n; ++i) {
            pred[i] = std::min(classes - 1, int(rng.uniform(0, classes)));
            label[i] = std::min(classes - 1, int(rng.uniform(0, classes)));
        }
        CHECK(accuracy(pred, label) == oracle::brute_accuracy(pred, label));
        CHECK(std::abs(macro_f1(pred, label, classes) - oracle::brute_macro_f1(pred, label, classes)) <= 1e-12);
        const double f = macro_f1(pred, label, classes);
        CHECK(f >= 0.0);
        CHECK(f <= 1.0);
    }
}

TEST_CASE("forgetting rate: worked examples, oracle and invariances") {
    const std::vector<std::vector<double>> rows{{0.9}, {0.8, 0.85}, {0.7, 0.8, 0.9}};
    const AccuracyMatrix a = lower(rows);
    CHECK(forgetting_rate(a, 2) == doctest::Approx(0.1).epsilon(1e-15));
    CHECK(forgetting_rate(a, 3) == doctest::Approx(0.125).epsilon(1e-15));
    CHECK(forgetting_rate(lower({{0.5}, {0.5, 0.7}}), 2) == 0.0);
    CHECK(forgetting_rate(lower({{0.5}, {0.6, 0.7}}), 2) == doctest::Approx(-0.1));
    // Gains on one task cancel losses on another.
    CHECK(std::abs(forgetting_rate(lower({{0.8}, {0.8, 0.9}, {0.85, 0.85, 0.6}}), 3)) <= 1e-15);

    capscl::Rng rng(12);
    for (int rep = 0; rep < 100; ++rep) {
        const std::size_t n = 2 + std::size_t(rng.uniform(0, 6));
        std::vector<std::vector<double>> r(n, std::vector<double>(n, 0.0));
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j <= i; ++j) r[i][j] = rng.uniform(0, 1);
        const AccuracyMatrix m = lower(r);
        for (std::size_t t = 2; t <= n; ++t) {
            const double fr = forgetting_rate(m, t);
            CHECK(std::abs(fr - oracle::brute_forgetting(r, t)) <= 1e-12);
            // Shifting every entry leaves FR unchanged; scaling scales it.
            auto shifted = r, scaled = r;
            for (auto& row : shifted)
                for (auto& x : row) x += 0.25;
            for (auto& row : scaled)
                for (auto& x : row) x *= 0.5;
            CHECK(std::abs(forgetting_rate(lower(shifted), t) - fr) <= 1e-12);
            CHECK(std::abs(forgetting_rate(lower(scaled), t) - 0.5 * fr) <= 1e-12);
        }
        // No drop anywhere means no forgetting.
        auto flat = r;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j <= i; ++j) flat[i][j] = flat[j][j];
        CHECK(forgetting_rate(lower(flat), n) == 0.0);
    }
    CHECK_THROWS_AS(forgetting_rate(a, 1), std::invalid_argument);
    CHECK_THROWS_AS(forgetting_rate(a, 4), std::out_of_range);
    AccuracyMatrix holes(2);
    holes.set(0, 0, 0.5);
    CHECK_THROWS_AS(forgetting_rate(holes, 2), std::out_of_range);
}

TEST_CASE("accuracy matrix bounds") {
    AccuracyMatrix a(3);
    CHECK_THROWS_AS(a.set(0, 1, 0.5), std::out_of_range);
    CHECK_THROWS_AS(a.set(3, 0, 0.5), std::out_of_range);
    CHECK(!a.has(1, 0));
    CHECK_THROWS_AS(a.at(1, 0), std::out_of_range);
    a.set(1, 0, 0.25);
    CHECK(a.at(1, 0) == 0.25);
}

TEST_CASE("transfer metrics") {
    const AccuracyMatrix a = lower({{0.9}, {0.8, 0.85}, {0.7, 0.8, 0.9}});
    const std::vector<std::optional<double>> alone{0.8, 0.9, 0.9};
    const TransferMetrics t = transfer_metrics(a, alone);
    REQUIRE(t.forward.size() == 3);
    CHECK(t.forward[0] == doctest::Approx(0.1));
    CHECK(t.forward[1] == doctest::Approx(-0.05));
    CHECK(t.forward[2] == doctest::Approx(0.0));
    REQUIRE(t.backward.size() == 3);
    CHECK(t.backward[0] == doctest::Approx(-0.2));
    CHECK(t.backward[1] == doctest::Approx(-0.05));
    CHECK(t.backward[2] == 0.0);
    // sdl 0.70, learned at 0.75, 0.78 at the end.
    const TransferMetrics one = transfer_metrics(lower({{0.75}, {0.78, 0.5}}), std::vector<std::optional<double>>{0.70, 0.5});
    CHECK(one.forward[0] == doctest::Approx(0.05).epsilon(1e-12));
    CHECK(one.backward[0] == doctest::Approx(0.03).epsilon(1e-12));
    const std::vector<std::optional<double>> short_list{0.8};
    CHECK_THROWS_AS(transfer_metrics(a, short_list), std::invalid_argument);
    const std::vector<std::optional<double>> missing{0.8, std::nullopt, 0.9};
    CHECK_THROWS_AS(transfer_metrics(a, missing), std::out_of_range);
}

TEST_CASE("mean and sample standard deviation") {
    const std::vector<double> one{0.3};
    CHECK(mean_std(one).mean == 0.3);
    CHECK(mean_std(one).std == 0.0);
    const std::vector<double> two{0.1, 0.2};
    CHECK(mean_std(two).mean == doctest::Approx(0.15));
    CHECK(mean_std(two).std == doctest::Approx(0.0707107).epsilon(1e-6));
    const std::vector<double> three{1, 2, 3};
    CHECK(mean_std(three).std == doctest::Approx(1.0));
    CHECK_THROWS_AS(mean_std(std::vector<double>{}), std::invalid_argument);
}
