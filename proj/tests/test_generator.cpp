#include <cmath>

#include "atp/generator.hpp"
#include "doctest.h"

using namespace atp;

namespace {

GeneratorConfig toy_gen_config() {
    GeneratorConfig c;
    c.n_layers = 4;
    c.d_head = 16;
    c.d_int = 176;
    return c;
}

}  // namespace

TEST_CASE("gumbel_sigmoid closed forms") {
    CHECK(gumbel_sigmoid(0.0, 0.0, 3.0, 0.4) == doctest::Approx(0.999447).epsilon(1e-5));
    CHECK(gumbel_sigmoid(-3.0, 0.0, 3.0, 0.4) == doctest::Approx(0.5));
    CHECK(gumbel_sigmoid(-10.0, 0.0, 3.0, 0.4) == doctest::Approx(2.5e-8).epsilon(0.02));
}

TEST_CASE("soft logits are zero with zero heads and have the right shape") {
    GeneratorConfig c = toy_gen_config();
    Generator g = init_generator(c, 5);
    Tape<float> tp;
    auto gv = stage_generator<float>(tp, g, false);
    auto logits = generator_soft_logits(tp, gv);
    CHECK(tp.value(logits).shape == std::vector<int>{4, 208});
    for (float v : tp.value(logits).data) CHECK(v == 0.0f);
}

TEST_CASE("published-scale head width arithmetic") {
    GeneratorConfig c;
    c.n_layers = 32;
    c.d_head = 128;
    c.d_int = 11008;
    CHECK(c.out_width() == 11264);
}

TEST_CASE("fresh generator emits all-ones deterministically") {
    GeneratorConfig c = toy_gen_config();
    Generator g = init_generator(c, 11);
    DecisionSet d = emit_decisions(g, false);
    CHECK(d == DecisionSet::all_ones(c.n_layers, c.d_head, c.d_int));
}

TEST_CASE("sampled emission is reproducible under a fixed seed") {
    GeneratorConfig c = toy_gen_config();
    Generator g = init_generator(c, 13);
    // randomize heads so sampling actually matters
    Rng noise(17);
    for (auto& w : g.head_w) noise.fill_gaussian(w, 0.4);
    for (auto& b : g.head_b) noise.fill_gaussian(b, 1.5);

    Rng g1 = Rng::stream(42, "gumbel");
    Rng g2 = Rng::stream(42, "gumbel");
    DecisionSet a = emit_decisions(g, true, &g1);
    DecisionSet b = emit_decisions(g, true, &g2);
    CHECK(a == b);

    Rng g3 = Rng::stream(43, "gumbel");
    DecisionSet cset = emit_decisions(g, true, &g3);
    CHECK(cset.n_layers() == a.n_layers());
}

TEST_CASE("orthonormal frozen input") {
    GeneratorConfig c = toy_gen_config();
    Generator g = init_generator(c, 19);
    // Gram matrix of the rows is the identity
    auto inp = g.input.cast<double>();
    for (int i = 0; i < c.n_layers; ++i) {
        for (int j = 0; j < c.n_layers; ++j) {
            double dot = 0.0;
            for (int k = 0; k < GeneratorConfig::kWidth; ++k) dot += inp.at(i, k) * inp.at(j, k);
            CHECK(dot == doctest::Approx(i == j ? 1.0 : 0.0).epsilon(1e-6));
        }
    }
    GeneratorConfig bad;
    bad.n_layers = 65;
    CHECK_THROWS_AS(init_generator(bad, 3), ContractError);
}

TEST_CASE("decision partition widths and idempotence") {
    GeneratorConfig c = toy_gen_config();
    Generator g = init_generator(c, 23);
    Rng noise(29);
    for (auto& w : g.head_w) noise.fill_gaussian(w, 0.5);
    Rng gum = Rng::stream(7, "gumbel");
    DecisionSet d = emit_decisions(g, true, &gum);
    d.validate();
    for (const auto& l : d.layers) {
        CHECK(static_cast<int>(l.d_qk.size()) == c.d_head);
        CHECK(static_cast<int>(l.d_v.size()) == c.d_head);
        CHECK(static_cast<int>(l.d_gu.size()) == c.d_int);
        // binary entries: the induced diagonal mask is idempotent
        for (uint8_t b : l.d_qk) CHECK(b * b == b);
    }
}

TEST_CASE("straight-through gradient equals the soft-path gradient") {
    // Reference graph: soft + stopgrad(hard - soft) has the same forward as
    // the STE graph and carries the soft gradient by construction. Both
    // graphs must produce bit-identical gradients for every generator weight.
    GeneratorConfig c = toy_gen_config();
    c.n_layers = 3;
    c.d_int = 24;
    Generator g = init_generator(c, 31);
    Rng noise(37);
    for (auto& w : g.head_w) noise.fill_gaussian(w, 0.8);
    for (auto& b : g.head_b) noise.fill_gaussian(b, 2.0);

    for (int trial = 0; trial < 5; ++trial) {
        // a fixed random linear readout of all decisions
        Rng ro(100 + static_cast<uint64_t>(trial));
        Tensor<float> weights({c.n_layers, c.out_width()});
        ro.fill_gaussian(weights, 1.0);

        auto run = [&](bool use_ste) {
            Tape<float> tp;
            auto gv = stage_generator<float>(tp, g, true);
            auto rows = generator_soft_rows(tp, gv);
            Var<float> total;
            for (int n = 0; n < c.n_layers; ++n) {
                Tensor<float> shift({1, c.out_width()});
                for (auto& v : shift.data) v = static_cast<float>(c.offset);
                auto soft = sigmoid(scale(add(rows[static_cast<size_t>(n)], tp.constant(shift)),
                                          1.0f / static_cast<float>(c.temperature)));
                Var<float> dec;
                if (use_ste) {
                    dec = ste_round(soft);
                } else {
                    // same forward value, gradient through the soft path only
                    Tensor<float> delta = tp.value(soft);
                    for (auto& v : delta.data) v = (v >= 0.5f ? 1.0f : 0.0f) - v;
                    dec = add(soft, tp.constant(std::move(delta)));
                }
                Tensor<float> wrow({1, c.out_width()});
                for (int j = 0; j < c.out_width(); ++j) wrow.at(0, j) = weights.at(n, j);
                total = total.valid() ? add(total, sum(mul(dec, tp.constant(wrow))))
                                      : sum(mul(dec, tp.constant(wrow)));
            }
            tp.backward(total);
            std::vector<Tensor<float>> grads;
            grads.push_back(tp.grad(gv.final_ln_g));
            grads.push_back(tp.grad(gv.final_ln_b));
            for (auto& blk : gv.blocks) {
                grads.push_back(tp.grad(blk.wq));
                grads.push_back(tp.grad(blk.bq));
                grads.push_back(tp.grad(blk.wk));
                grads.push_back(tp.grad(blk.bk));
                grads.push_back(tp.grad(blk.wv));
                grads.push_back(tp.grad(blk.bv));
                grads.push_back(tp.grad(blk.wo));
                grads.push_back(tp.grad(blk.bo));
                grads.push_back(tp.grad(blk.ffn_w1));
                grads.push_back(tp.grad(blk.ffn_b1));
                grads.push_back(tp.grad(blk.ffn_ln_g));
                grads.push_back(tp.grad(blk.ffn_ln_b));
                grads.push_back(tp.grad(blk.ffn_w2));
                grads.push_back(tp.grad(blk.ffn_b2));
            }
            for (size_t n = 0; n < gv.head_w.size(); ++n) {
                grads.push_back(tp.grad(gv.head_w[n]));
                grads.push_back(tp.grad(gv.head_b[n]));
            }
            return grads;
        };

        auto hard = run(true);
        auto soft = run(false);
        REQUIRE(hard.size() == soft.size());
        for (size_t i = 0; i < hard.size(); ++i) CHECK(bit_equal(hard[i], soft[i]));
    }
}

TEST_CASE("frozen input is bit-identical after a staged pass") {
    GeneratorConfig c = toy_gen_config();
    Generator g = init_generator(c, 41);
    Tensor<float> before = g.input;
    Tape<float> tp;
    auto gv = stage_generator<float>(tp, g, true);
    auto rows = generator_soft_rows(tp, gv);
    tp.backward(sum(rows[0]));
    CHECK_FALSE(tp.requires_grad(gv.input));
    CHECK(bit_equal(before, g.input));
}

TEST_CASE("decision set text round-trip") {
    GeneratorConfig c = toy_gen_config();
    Generator g = init_generator(c, 47);
    Rng noise(53);
    for (auto& w : g.head_w) noise.fill_gaussian(w, 0.5);
    Rng gum = Rng::stream(11, "gumbel");
    DecisionSet d = emit_decisions(g, true, &gum);
    std::string text = decisions_to_text(d);
    CHECK(text.substr(0, 38) == "atp-decisions v1 N=4 dhead=16 dint=176");
    DecisionSet back = decisions_from_text(text);
    CHECK(back == d);

    CHECK_THROWS_AS(decisions_from_text("bogus"), FormatError);
    CHECK_THROWS_AS(decisions_from_text("atp-decisions v1 N=2 dhead=4 dint=8\n0101\n"),
                    FormatError);
}
