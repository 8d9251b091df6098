#include <doctest.h>

#include "capscl/ksm.hpp"
#include "oracles.hpp"

using namespace capscl;
using namespace capscl::ksm;
using oracle::random_tensor;
using oracle::values;

namespace {

KsmConfig small_config() {
    KsmConfig c;
    c.num_transfer_capsules = 2;
    c.capsule_dim = 5;
    c.route_dim = 4;
    c.window = 3;
    return c;
}

bool bitwise_equal(const NamedTensors& a, const NamedTensors& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t k = 0; k < a.size(); ++k)
        if (a[k].first != b[k].first || values(a[k].second) != values(b[k].second)) return false;
    return true;
}

NamedTensors deep_copy(const NamedTensors& src) {
    NamedTensors out;
    for (const auto& [n, t] : src) out.emplace_back(n, t.clone());
    return out;
}

}  // namespace

TEST_CASE("capsule bank growth, isolation and counting") {
    Rng rng(1);
    const KsmConfig c = small_config();
    KnowledgeSharingModule k(7, 8, c, rng);
    std::size_t shared = 0;
    for (std::size_t j = 0; j < c.num_transfer_capsules; ++j) shared += k.shared_route(j).parameter_count();
    const std::size_t capsule = (7 * 5 + 5) + (5 * 5 + 5);
    const std::size_t route = 4 * 5;
    for (std::size_t t = 0; t < 3; ++t) {
        const NamedTensors before = deep_copy(k.named_parameters());
        k.add_task_capsule(t, rng);
        CHECK(k.num_tasks() == t + 1);
        // Existing tensors are the prefix and untouched.
        const NamedTensors after = k.named_parameters();
        for (const auto& [name, tensor] : before) {
            auto it = std::find_if(after.begin(), after.end(), [&](const auto& e) { return e.first == name; });
            REQUIRE(it != after.end());
            CHECK(values(it->second) == values(tensor));
        }
        CHECK(k.parameter_count() == (t + 1) * capsule + (t + 1) * c.num_transfer_capsules * route + shared);
    }
    CHECK_THROWS_AS(k.add_task_capsule(1, rng), std::logic_error);
    CHECK_THROWS_AS(k.add_task_capsule(5, rng), std::logic_error);
}

TEST_CASE("task capsules: zero input, shapes and a two-matmul reference") {
    Rng rng(2);
    TaskCapsuleBank bank(6, 4);
    for (std::size_t t = 0; t < 3; ++t) bank.add(t, rng);
    Tape tape(false);
    auto zero = task_capsule_forward(tape, bank, Tensor::zeros({10, 6}), 3);
    REQUIRE(zero.size() == 3);
    for (const auto& p : zero) {
        CHECK(p.shape() == ad::Shape{10, 4});
        for (Scalar v : p.data()) CHECK(v == 0);
    }

    Tensor h = random_tensor({10, 6}, rng);
    auto ps = task_capsule_forward(tape, bank, h, 2);
    REQUIRE(ps.size() == 2);
    for (std::size_t i = 0; i < 2; ++i) {
        const auto& cap = bank[i];
        auto hidden = oracle::matmul(values(h), oracle::transpose(values(cap.fc1.weight), 4, 6), 10, 6, 4);
        for (std::size_t r = 0; r < 10; ++r)
            for (std::size_t c = 0; c < 4; ++c) hidden[r * 4 + c] = std::max(0.0, hidden[r * 4 + c] + cap.fc1.bias[c]);
        auto out = oracle::matmul(hidden, oracle::transpose(values(cap.fc2.weight), 4, 4), 10, 4, 4);
        for (std::size_t r = 0; r < 10; ++r)
            for (std::size_t c = 0; c < 4; ++c) {
                const double ref = out[r * 4 + c] + cap.fc2.bias[c];
                CHECK(std::abs(ps[i].at(r, c) - ref) <= 1e-12);
            }
    }
    CHECK_THROWS_AS(task_capsule_forward(tape, bank, h, 4), std::out_of_range);
}

TEST_CASE("pre-route: identity, zero and matmul oracle") {
    Rng rng(3);
    Tape tape(false);
    Tensor p = random_tensor({6, 4}, rng);
    Tensor eye = Tensor::zeros({4, 4});
    for (std::size_t i = 0; i < 4; ++i) eye.at(i, i) = 1;
    CHECK(values(pre_route(tape, eye, p)) == values(p));
    Tensor w = random_tensor({3, 4}, rng);
    for (double v : values(pre_route(tape, w, Tensor::zeros({6, 4})))) CHECK(v == 0);
    Tensor u = pre_route(tape, w, p);
    const auto ref = oracle::matmul(values(p), oracle::transpose(values(w), 3, 4), 6, 4, 3);
    REQUIRE(u.shape() == ad::Shape{6, 3});
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(u[i] - ref[i]) <= 1e-12);
    CHECK_THROWS_AS(pre_route(tape, w, Tensor::zeros({6, 5})), ad::DimensionError);
}

TEST_CASE("similarity: hand pipeline with d_t=3, d_s=1, n_w=1, d_w=2") {
    KsmConfig c;
    c.route_dim = 1;
    c.capsule_dim = 1;
    c.window = 2;
    Rng rng(4);
    SharedRoute route(c, rng);
    route.query_filters = Tensor::from({1, 2, 1}, {0.5, -1.0});
    route.query_bias = Tensor::vector({0.25});
    route.sim_filters = Tensor::from({1, 2, 1}, {2.0, 1.0});
    route.sim_bias = Tensor::vector({-1.0});
    route.match.weight = Tensor::matrix({{0.5}});
    route.match.bias = Tensor::vector({0.1});
    Tensor uc = Tensor::matrix({{1}, {-2}, {3}});
    Tensor us = Tensor::matrix({{0.5}, {1}, {-1}});
    // q: conv = [0.5*1 - 1*(-2) + 0.25, 0.5*(-2) - 1*3 + 0.25] = [2.75, -3.75]; relu, max -> 2.75
    // f_a(q) = 0.5 * 2.75 + 0.1 = 1.475
    // a: conv = [2*0.5 + 1*1 - 1, 2*1 + 1*(-1) - 1] = [1, 0]; + 1.475 -> [2.475, 1.475]; max -> 2.475
    Tape tape(false);
    Tensor q = current_features(tape, route, uc, 3);
    CHECK(q[0] == doctest::Approx(2.75).epsilon(1e-15));
    Tensor a = similarity(tape, route, uc, us, 3);
    CHECK(a[0] == doctest::Approx(2.475).epsilon(1e-15));

    route.query_bias = Tensor::vector({-10.0});
    route.sim_bias = Tensor::vector({-10.0});
    CHECK(similarity(tape, route, uc, us, 3)[0] == 0);  // ReLU floor
    CHECK_THROWS_AS(similarity(tape, route, Tensor::zeros({1, 1}), Tensor::zeros({1, 1}), 1), ad::DimensionError);
}

TEST_CASE("similarity is nonnegative and the degenerate self-route equals q") {
    Rng rng(5);
    const KsmConfig c = small_config();
    for (int rep = 0; rep < 10; ++rep) {
        SharedRoute route(c, rng);
        Tensor u = random_tensor({2 * 6, 4}, rng);
        Tensor v = random_tensor({2 * 6, 4}, rng);
        Tape tape(false);
        for (double x : values(similarity(tape, route, u, v, 6))) CHECK(x >= 0);
        route.sim_filters = route.query_filters.clone();
        route.sim_bias = route.query_bias.clone();
        route.match.weight = Tensor::zeros(route.match.weight.shape());
        route.match.bias = Tensor::zeros(route.match.bias.shape());
        CHECK(values(similarity(tape, route, u, u, 6)) == values(current_features(tape, route, u, 6)));
    }
}

TEST_CASE("route decisions: exact gates, symmetry, argmax at evaluation, router gradient") {
    Rng rng(6);
    KsmConfig c = small_config();
    SharedRoute route(c, rng);
    route.router.weight = Tensor::zeros({2, 1}, true);
    route.router.bias = Tensor::vector({0.4, 0.4}, true);
    Tensor a = random_tensor({1, 4}, rng, 0, 1);
    std::size_t connect = 0;
    for (int i = 0; i < 10000; ++i) {
        Tape tape(false);
        RouteDecision d = route_decision(tape, route, a, {true, 1.0, &rng});
        CHECK((d.gate[0] == 0 || d.gate[0] == 1));
        connect += d.gate[0] == 1;
    }
    CHECK(std::abs(double(connect) / 10000 - 0.5) <= 0.015);

    route.router.bias = Tensor::vector({0.0, 0.3});
    Tape t0(false);
    CHECK(route_decision(t0, route, a, {false, 1.0, nullptr}).gate[0] == 1);
    route.router.bias = Tensor::vector({0.3, 0.0});
    CHECK(route_decision(t0, route, a, {false, 1.0, nullptr}).gate[0] == 0);
    CHECK_THROWS_AS(route_decision(t0, route, a, {true, 1.0, nullptr}), std::invalid_argument);

    // A loss that depends on the route reaches the router through the soft relaxation.
    route.router.weight = random_tensor({2, 1}, rng, -1, 1, true);
    route.router.bias = Tensor::vector({0.1, -0.2}, true);
    Tensor u = random_tensor({4, 4}, rng);
    Tape tape;
    RouteDecision d = route_decision(tape, route, a, {true, 1.0, &rng});
    Tensor v = aggregate_transfer(tape, {a}, {d.gate}, {u}, 4);
    tape.backward(ad::sum(tape, v));
    double g = 0.0;
    for (Scalar x : route.router.weight.grad()) g += std::abs(x);
    for (Scalar x : route.router.bias.grad()) g += std::abs(x);
    CHECK(g > 0.0);
}

TEST_CASE("gate distribution sanity with random routers and symmetric inputs") {
    Rng rng(7);
    const KsmConfig c = small_config();
    std::size_t connect = 0;
    for (int i = 0; i < 10000; ++i) {
        Linear router(1, 2, rng);
        SharedRoute route;
        route.router = router;
        Tensor a = random_tensor({1, 4}, rng, 0, 1);
        Tape tape(false);
        connect += route_decision(tape, route, a, {true, c.temperature, &rng}).gate[0] == 1;
    }
    const double rate = double(connect) / 10000;
    CHECK(rate >= 0.35);
    CHECK(rate <= 0.65);
}

TEST_CASE("aggregate transfer: closed gates, identity gate, hand sum") {
    Rng rng(8);
    const std::size_t T = 3;
    std::vector<Tensor> u{random_tensor({T, 2}, rng), random_tensor({T, 2}, rng), random_tensor({T, 2}, rng)};
    std::vector<Tensor> a{random_tensor({1, 2}, rng, 0, 1), random_tensor({1, 2}, rng, 0, 1),
                          random_tensor({1, 2}, rng, 0, 1)};
    Tape tape(false);
    const Tensor closed = Tensor::matrix({{0}});
    const Tensor open = Tensor::matrix({{1}});
    for (double x : values(aggregate_transfer(tape, a, {closed, closed, closed}, u, T))) CHECK(x == 0);

    Tensor ones = Tensor::matrix({{1, 1}});
    CHECK(values(aggregate_transfer(tape, {ones}, {open}, {u[0]}, T)) == values(u[0]));

    Tensor v = aggregate_transfer(tape, a, {open, closed, open}, u, T);
    for (std::size_t r = 0; r < T; ++r)
        for (std::size_t ch = 0; ch < 2; ++ch) {
            const double ref = a[0][ch] * u[0].at(r, ch) + a[2][ch] * u[2].at(r, ch);
            CHECK(std::abs(v.at(r, ch) - ref) <= 1e-15);
        }
    CHECK_THROWS_AS(aggregate_transfer(tape, a, {open}, u, T), std::invalid_argument);
    CHECK_THROWS_AS(aggregate_transfer(tape, {a[0]}, {}, u, T), std::invalid_argument);
}

TEST_CASE("shape law and backpropagation selectivity") {
    const KsmConfig c = small_config();
    const std::size_t T = 6, B = 1;
    std::size_t closed_seen = 0;
    for (std::uint64_t seed = 1; seed <= 60; ++seed) {
        Rng rng(seed);
        KnowledgeSharingModule k(7, T, c, rng);
        for (std::size_t t = 0; t < 3; ++t) k.add_task_capsule(t, rng);
        // Nudge biases off zero so no capsule output is trivially constant.
        for (const auto& [n, p] : k.named_parameters()) {
            Tensor w = p;
            for (Scalar& v : w.data()) v += Scalar(rng.uniform(-0.1, 0.1));
        }
        Tensor h = random_tensor({B * T, 7}, rng);
        Tape tape;
        KsmOutput out = k.forward(tape, h, T, 2, {true, 1.0, &rng});
        REQUIRE(out.transfer_capsules.size() == c.num_transfer_capsules);
        for (const auto& v : out.transfer_capsules) CHECK(v.shape() == ad::Shape{B * T, c.route_dim});
        for (const auto& [n, p] : k.named_parameters()) Tensor(p).zero_grad();
        Tensor loss = ad::sum(tape, ad::mul(tape, ad::concat_cols(tape, out.transfer_capsules),
                                            random_tensor({B * T, 8}, rng)));
        tape.backward(loss);
        // The current task's capsule feeds q, so only earlier capsules are isolated by closed gates.
        for (std::size_t i = 0; i < 2; ++i) {
            bool all_closed = true;
            for (std::size_t j = 0; j < c.num_transfer_capsules; ++j) all_closed &= out.gates[j][i][0] == 0;
            if (!all_closed) continue;
            ++closed_seen;
            for (const Tensor& p : {k.bank()[i].fc1.weight, k.bank()[i].fc1.bias, k.bank()[i].fc2.weight,
                                    k.bank()[i].fc2.bias})
                for (Scalar g : p.grad()) CHECK(g == 0);
            for (std::size_t j = 0; j < c.num_transfer_capsules; ++j)
                for (Scalar g : k.pre_route_matrix(i, j).grad()) CHECK(g == 0);
        }
    }
    CHECK(closed_seen > 0);
}

TEST_CASE("ksm rejects unknown tasks and bad configs") {
    Rng rng(9);
    KnowledgeSharingModule k(7, 6, small_config(), rng);
    k.add_task_capsule(0, rng);
    Tape tape(false);
    CHECK_THROWS_AS(k.forward(tape, Tensor::zeros({6, 7}), 6, 1, {}), std::out_of_range);
    KsmConfig bad = small_config();
    bad.window = 7;
    CHECK_THROWS_AS(bad.validate(6), std::invalid_argument);
    bad = small_config();
    bad.temperature = 0;
    CHECK_THROWS_AS(bad.validate(6), std::invalid_argument);
}
