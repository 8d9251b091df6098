#include <doctest.h>

#include "capscl/backbone.hpp"
#include "oracles.hpp"

using namespace capscl;
using oracle::values;

namespace {

BackboneConfig tiny(PluginPlacement placement = PluginPlacement::both) {
    BackboneConfig c;
    c.vocab_size = 40;
    c.max_tokens = 6;
    c.embed_dim = 8;
    c.num_layers = 2;
    c.num_heads = 2;
    c.ffn_dim = 12;
    c.placement = placement;
    return c;
}

TokenBatch sample_batch() {
    static const std::vector<std::int32_t> a{kClsId, 5, 9, 12, 0, 0};
    static const std::vector<std::int32_t> b{kClsId, 7, 7, 30, 21, 3};
    static const std::vector<std::int32_t> c{kClsId, 11};
    return TokenBatch::pack({&a, &b, &c}, 6);
}

PluginHook identity_hook() {
    return [](Tape&, const Tensor& h, std::size_t) { return h; };
}

}  // namespace

TEST_CASE("backbone parameters are frozen and counted in closed form") {
    Rng rng(1);
    const BackboneConfig c = tiny();
    Backbone bb(c, rng);
    for (const auto& [name, t] : bb.named_parameters()) CHECK_MESSAGE(!t.requires_grad(), name);
    const std::size_t d = c.embed_dim, f = c.ffn_dim;
    const std::size_t per_layer = 4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d) + 2 * d;
    CHECK(bb.parameter_count() == c.vocab_size * d + c.max_tokens * d + 2 * d + c.num_layers * per_layer);
}

TEST_CASE("slots per placement") {
    auto kinds = [](PluginPlacement p) {
        std::vector<std::pair<std::size_t, SlotKind>> out;
        for (auto s : plugin_slots(tiny(p))) out.emplace_back(s.layer, s.kind);
        return out;
    };
    using K = SlotKind;
    CHECK(kinds(PluginPlacement::both) ==
          std::vector<std::pair<std::size_t, SlotKind>>{
              {0, K::after_attention}, {0, K::after_ffn}, {1, K::after_attention}, {1, K::after_ffn}});
    CHECK(kinds(PluginPlacement::after_attention_only).size() == 2);
    CHECK(kinds(PluginPlacement::after_ffn_only).size() == 2);
    CHECK(kinds(PluginPlacement::on_top) == std::vector<std::pair<std::size_t, SlotKind>>{{1, K::on_top}});
    CHECK(kinds(PluginPlacement::none).empty());
    for (auto p : {PluginPlacement::both, PluginPlacement::after_attention_only, PluginPlacement::after_ffn_only,
                   PluginPlacement::on_top, PluginPlacement::none})
        CHECK(placement_from_string(to_string(p)) == p);
    CHECK_THROWS_AS(placement_from_string("sideways"), std::invalid_argument);
}

TEST_CASE("weights do not depend on placement and identity hooks change nothing") {
    const TokenBatch batch = sample_batch();
    Rng r0(2), r1(2), r2(2);
    Backbone plain(tiny(PluginPlacement::none), r0);
    Backbone both(tiny(PluginPlacement::both), r1);
    Backbone top(tiny(PluginPlacement::on_top), r2);
    const auto pa = plain.named_parameters(), pb = both.named_parameters();
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(values(pa[i].second) == values(pb[i].second));

    Rng drop(0);
    Tape tape(false);
    const auto ref = values(plain.encode(tape, batch, {}, drop, false).sequence);
    CHECK(values(both.encode(tape, batch, identity_hook(), drop, false).sequence) == ref);
    CHECK(values(top.encode(tape, batch, identity_hook(), drop, false).sequence) == ref);

    std::vector<std::size_t> seen;
    auto shift = [&](Tape& t, const Tensor& h, std::size_t slot) {
        seen.push_back(slot);
        return ad::add(t, h, Tensor::full(h.shape(), Scalar(0.5)));
    };
    EncodeResult rb = both.encode(tape, batch, shift, drop, false);
    CHECK(seen == std::vector<std::size_t>{0, 1, 2, 3});
    seen.clear();
    EncodeResult rt = top.encode(tape, batch, shift, drop, false);
    CHECK(seen == std::vector<std::size_t>{0});
    CHECK(values(rb.sequence) != values(rt.sequence));
    // on_top adds directly to the final hidden states
    const auto top_seq = values(rt.sequence);
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(top_seq[i] == ref[i] + 0.5);

    CHECK(rb.sequence.shape() == ad::Shape{3 * 6, 8});
    CHECK(rb.classifier.shape() == ad::Shape{3, 8});
    for (std::size_t b = 0; b < 3; ++b)
        for (std::size_t c = 0; c < 8; ++c) CHECK(rb.classifier.at(b, c) == rb.sequence.at(b * 6, c));
    CHECK_THROWS_AS(both.encode(tape, batch, {}, drop, false), std::logic_error);
}

TEST_CASE("padding: masked keys get zero weight and all-pad inputs agree") {
    Rng rng(3);
    Backbone bb(tiny(PluginPlacement::none), rng);
    const TokenBatch batch = sample_batch();
    Rng drop(0);
    Tape tape(false);
    std::vector<std::vector<Scalar>> maps;
    bb.encode(tape, batch, {}, drop, false, &maps);
    REQUIRE(maps.size() == 2);
    const std::size_t T = 6, H = 2;
    for (const auto& probs : maps) {
        REQUIRE(probs.size() == 3 * H * T * T);
        for (std::size_t b = 0; b < 3; ++b)
            for (std::size_t h = 0; h < H; ++h)
                for (std::size_t q = 0; q < T; ++q) {
                    double total = 0.0;
                    for (std::size_t k = 0; k < T; ++k) {
                        const double w = probs[((b * H + h) * T + q) * T + k];
                        if (batch.key_pad[b * T + k]) CHECK(w == 0);
                        total += w;
                    }
                    CHECK(std::abs(total - 1.0) <= 1e-12);
                }
    }

    const std::vector<std::int32_t> empty(6, kPadId);
    const TokenBatch pads = TokenBatch::pack({&empty, &empty}, 6);
    CHECK(pads.key_pad[0] == 0);
    Tensor cls = bb.encode(tape, pads, {}, drop, false).classifier;
    for (double v : values(cls)) CHECK(std::isfinite(v));
    for (std::size_t c = 0; c < 8; ++c) CHECK(cls.at(0, c) == cls.at(1, c));
}

TEST_CASE("dropout acts only in training and encoding is deterministic") {
    Rng rng(4);
    Backbone bb(tiny(PluginPlacement::none), rng);
    const TokenBatch batch = sample_batch();
    Tape tape(false);
    Rng d1(9), d3(10);
    const auto eval1 = values(bb.encode(tape, batch, {}, d1, false).sequence);
    const auto eval2 = values(bb.encode(tape, batch, {}, d3, false).sequence);
    CHECK(eval1 == eval2);
    Rng t1(9), t2(9);
    const auto train1 = values(bb.encode(tape, batch, {}, t1, true).sequence);
    const auto train2 = values(bb.encode(tape, batch, {}, t2, true).sequence);
    CHECK(train1 == train2);
    CHECK(train1 != eval1);
}

TEST_CASE("backbone input errors") {
    Rng rng(5);
    Backbone bb(tiny(PluginPlacement::none), rng);
    Rng drop(0);
    Tape tape(false);
    const std::vector<std::int32_t> bad{kClsId, 40};
    CHECK_THROWS_AS(bb.encode(tape, TokenBatch::pack({&bad}, 6), {}, drop, false), std::out_of_range);
    const std::vector<std::int32_t> neg{kClsId, -3};
    CHECK_THROWS_AS(bb.encode(tape, TokenBatch::pack({&neg}, 6), {}, drop, false), std::out_of_range);
    const std::vector<std::int32_t> ok{kClsId, 4};
    CHECK_THROWS_AS(bb.encode(tape, TokenBatch::pack({&ok}, 5), {}, drop, false), ad::DimensionError);
    const std::vector<std::int32_t> longer(7, 3);
    CHECK_THROWS_AS(TokenBatch::pack({&longer}, 6), std::invalid_argument);

    BackboneConfig c = tiny();
    c.num_heads = 3;
    CHECK_THROWS_AS(Backbone(c, rng), std::invalid_argument);
    c = tiny();
    c.dropout = 1.0;
    CHECK_THROWS_AS(Backbone(c, rng), std::invalid_argument);
    c = tiny();
    c.vocab_size = 2;
    CHECK_THROWS_AS(Backbone(c, rng), std::invalid_argument);
}
