#include <cmath>

#include "atp/gradcheck.hpp"
#include "atp/objectives.hpp"
#include "doctest.h"

using namespace atp;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.n_layers = 2;
    c.d_hidden = 16;
    c.n_heads = 2;
    c.d_int = 12;
    c.vocab = 17;
    c.seq_max = 16;
    return c;
}

DecisionSet random_decisions(const ModelConfig& c, Rng& rng, double keep = 0.5) {
    DecisionSet s = DecisionSet::all_ones(c.n_layers, c.d_head(), c.d_int);
    for (auto& l : s.layers) {
        for (auto* v : {&l.d_qk, &l.d_v, &l.d_gu}) {
            for (auto& b : *v) b = rng.uniform01() < keep ? 1 : 0;
        }
    }
    return s;
}

// Brute-force oracle: materialize (I - D_prev) Wa and Wb (I - D) per
// projection and sum the column/row norms directly.
double group_lasso_oracle(const ModelAdapters& adapters, const DecisionSet& decisions,
                          const ModelConfig& config) {
    double total = 0.0;
    auto tile = [&](const std::vector<uint8_t>& bits) {
        std::vector<uint8_t> out;
        for (int h = 0; h < config.n_heads; ++h) out.insert(out.end(), bits.begin(), bits.end());
        return out;
    };
    for (size_t n = 0; n < adapters.layers.size(); ++n) {
        const auto& a = adapters.layers[n];
        const auto& d = decisions.layers[n];
        auto col_terms = [&](const Tensor<float>& wb, const std::vector<uint8_t>& mask) {
            // wb (I - D): zero kept columns, then sum norms of the pruned ones
            Tensor<double> m = wb.cast<double>();
            for (int i = 0; i < m.rows(); ++i) {
                for (int j = 0; j < m.cols(); ++j) {
                    if (mask[static_cast<size_t>(j)]) m.at(i, j) = 0.0;
                }
            }
            for (int j = 0; j < m.cols(); ++j) {
                if (mask[static_cast<size_t>(j)]) continue;
                double ss = 0.0;
                for (int i = 0; i < m.rows(); ++i) ss += m.at(i, j) * m.at(i, j);
                total += std::sqrt(ss);
            }
        };
        auto row_terms = [&](const Tensor<float>& wa, const std::vector<uint8_t>& mask) {
            Tensor<double> m = wa.cast<double>();
            for (int i = 0; i < m.rows(); ++i) {
                if (mask[static_cast<size_t>(i)]) {
                    for (int j = 0; j < m.cols(); ++j) m.at(i, j) = 0.0;
                }
            }
            for (int i = 0; i < m.rows(); ++i) {
                if (mask[static_cast<size_t>(i)]) continue;
                double ss = 0.0;
                for (int j = 0; j < m.cols(); ++j) ss += m.at(i, j) * m.at(i, j);
                total += std::sqrt(ss);
            }
        };
        col_terms(a.q.wb, tile(d.d_qk));
        col_terms(a.k.wb, tile(d.d_qk));
        col_terms(a.v.wb, tile(d.d_v));
        row_terms(a.o.wa, tile(d.d_v));
        col_terms(a.gate.wb, d.d_gu);
        col_terms(a.up.wb, d.d_gu);
        row_terms(a.down.wa, d.d_gu);
    }
    return total;
}

}  // namespace

TEST_CASE("sparsity_loss closed forms") {
    SparsityTarget t;
    t.p = 0.5;
    t.p_total = 201216;
    double goal = t.target_params();
    CHECK(sparsity_loss(goal, t) == 0.0);
    CHECK(sparsity_loss(2.0 * goal, t) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(sparsity_loss(0.5 * goal, t) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    // total at R = 0 via the one-parameter clamp
    CHECK(std::isfinite(sparsity_loss(0.0, t)));

    SparsityTarget bad;
    bad.p = 1.0;
    bad.p_total = 10;
    CHECK_THROWS_AS(sparsity_loss(5.0, bad), ContractError);
}

TEST_CASE("sparsity_loss multiplicative symmetry property") {
    SparsityTarget t;
    t.p = 0.3;
    t.p_total = 54321;
    Rng rng(2);
    for (int i = 0; i < 100; ++i) {
        double c = std::exp((rng.uniform01() * 2.0 - 1.0) * std::log(10.0));
        double want = std::abs(std::log(c));
        CHECK(sparsity_loss(c * t.target_params(), t) == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("sparsity expression matches the plain form and count_remaining") {
    ModelConfig c = tiny_config();
    Rng rng(5);
    DecisionSet d = random_decisions(c, rng);
    SparsityTarget t;
    t.p = 0.4;
    t.p_total = total_decoder_params(c);

    Tape<double> tp;
    auto dv = stage_decisions<double>(tp, d);
    auto r_expr = remaining_params_expr(tp, dv, c);
    CHECK(tp.value(r_expr).data[0] ==
          doctest::Approx(static_cast<double>(count_remaining(c, d))).epsilon(1e-12));

    auto ls = sparsity_loss_expr(tp, r_expr, t);
    CHECK(tp.value(ls).data[0] ==
          doctest::Approx(sparsity_loss(static_cast<double>(count_remaining(c, d)), t))
              .epsilon(1e-12));
}

TEST_CASE("group_lasso basics") {
    ModelConfig c = tiny_config();
    ModelAdapters a = init_adapters(c.n_layers, c.d_hidden, c.d_int, 2, 7);
    DecisionSet ones = DecisionSet::all_ones(c.n_layers, c.d_head(), c.d_int);

    SUBCASE("no pruned groups means zero loss") {
        Rng rng(9);
        a.visit_params([&](const std::string&, Tensor<float>& t) { rng.fill_gaussian(t, 0.3); });
        CHECK(group_lasso(a, ones, c) == 0.0);
    }
    SUBCASE("one pruned column contributes its norm") {
        a.visit_params([&](const std::string&, Tensor<float>& t) {
            std::fill(t.data.begin(), t.data.end(), 0.0f);
        });
        DecisionSet d = ones;
        d.layers[0].d_gu[5] = 0;
        a.layers[0].gate.wb.at(0, 5) = 3.0f;
        a.layers[0].gate.wb.at(1, 5) = 4.0f;
        CHECK(group_lasso(a, d, c) == doctest::Approx(5.0).epsilon(1e-12));
    }
    SUBCASE("matches the materialized-mask oracle on random instances") {
        Rng rng(11);
        a.visit_params([&](const std::string&, Tensor<float>& t) { rng.fill_gaussian(t, 0.5); });
        for (int trial = 0; trial < 10; ++trial) {
            DecisionSet d = random_decisions(c, rng, 0.6);
            double got = group_lasso(a, d, c);
            double want = group_lasso_oracle(a, d, c);
            CHECK(got == doctest::Approx(want).epsilon(1e-10));
        }
    }
    SUBCASE("expression form agrees with the plain form") {
        Rng rng(13);
        a.visit_params([&](const std::string&, Tensor<float>& t) { rng.fill_gaussian(t, 0.5); });
        DecisionSet d = random_decisions(c, rng, 0.5);
        Tape<double> tp;
        auto av = stage_adapters<double>(tp, a, false);
        auto gl = group_lasso_expr(tp, av, d, c);
        CHECK(tp.value(gl).data[0] == doctest::Approx(group_lasso(a, d, c)).epsilon(1e-10));
    }
}

TEST_CASE("group_lasso ignores unpruned entries") {
    ModelConfig c = tiny_config();
    ModelAdapters a = init_adapters(c.n_layers, c.d_hidden, c.d_int, 2, 17);
    Rng rng(19);
    a.visit_params([&](const std::string&, Tensor<float>& t) { rng.fill_gaussian(t, 0.4); });
    DecisionSet d = random_decisions(c, rng, 0.5);
    double before = group_lasso(a, d, c);

    // perturb a kept gate column and a kept down row
    int kept_col = -1;
    for (size_t j = 0; j < d.layers[0].d_gu.size(); ++j) {
        if (d.layers[0].d_gu[j]) kept_col = static_cast<int>(j);
    }
    REQUIRE(kept_col >= 0);
    a.layers[0].gate.wb.at(0, kept_col) += 123.0f;
    a.layers[0].down.wa.at(kept_col, 0) -= 77.0f;
    CHECK(group_lasso(a, d, c) == before);
}

TEST_CASE("group_lasso gradient direction against finite differences") {
    ModelConfig c = tiny_config();
    Rng rng(23);
    ModelAdapters a = init_adapters(c.n_layers, c.d_hidden, c.d_int, 2, 29);
    a.visit_params([&](const std::string&, Tensor<float>& t) { rng.fill_gaussian(t, 0.5); });
    DecisionSet d = random_decisions(c, rng, 0.5);

    // check the gate wb factor of layer 0 (pruned columns away from zero)
    Tensor<double> theta = a.layers[0].gate.wb.cast<double>();
    ObjectiveFn<double> f = [&](Tape<double>& tp, std::vector<Var<double>>& vars) {
        auto av = stage_adapters<double>(tp, a, false);
        av.layers[0].gate.wb = vars[0];
        return group_lasso_expr(tp, av, d, c);
    };
    CHECK(grad_check<double>(f, theta) <= 1e-6);
}

TEST_CASE("zero attractor: subgradient iteration drives an isolated group to zero") {
    Tensor<double> w({5}, {0.4, -0.3, 0.2, 0.1, -0.5});
    double eta_beta = 0.05;
    double prev = 1e300;
    for (int step = 0; step < 100; ++step) {
        double norm = 0.0;
        for (double v : w.data) norm += v * v;
        norm = std::sqrt(norm);
        CHECK(norm <= prev + 1e-15);
        prev = norm;
        if (norm == 0.0) break;
        double shrink = std::max(0.0, 1.0 - eta_beta / norm);
        for (auto& v : w.data) v *= shrink;
    }
    CHECK(prev <= 1e-12);
}

TEST_CASE("objective combiners") {
    CHECK(objective_g(1.25, 0.5, 0.0) == 1.25);
    CHECK(objective_g(1.25, 0.0, 5.0) == 1.25);
    CHECK(objective_g(1.0, 0.2, 5.0) == doctest::Approx(2.0));
    CHECK(objective_l(0.75, 0.5, 0.0) == 0.75);
    CHECK(objective_l(0.75, 0.0, 0.3) == 0.75);
    CHECK(objective_l(1.0, 2.0, 0.3) == doctest::Approx(1.6));
}
