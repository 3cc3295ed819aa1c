#include "atp/adapters.hpp"
#include "atp/model.hpp"
#include "doctest.h"

using namespace atp;

namespace {

Tensor<double> rand_t(std::vector<int> shape, Rng& rng, double sd = 1.0) {
    Tensor<double> t(std::move(shape));
    rng.fill_gaussian(t, sd);
    return t;
}

}  // namespace

TEST_CASE("masked projection hand arithmetic") {
    // X=[[1,1]], W=I, Wa=[[1],[0]], Wb=[[0,2]], D=diag(1,0)
    Tensor<double> x = Tensor<double>::from_rows({{1, 1}});
    Tensor<double> w = Tensor<double>::identity(2);
    Tensor<double> wa = Tensor<double>::from_rows({{1}, {0}});
    Tensor<double> wb = Tensor<double>::from_rows({{0, 2}});
    std::vector<uint8_t> d{1, 0};

    auto g = forward_masked_all(x, w, wa, wb, d);
    CHECK(g.data == std::vector<double>{1, 0});

    auto l = forward_masked_base(x, w, wa, wb, d);
    CHECK(l.data == std::vector<double>{1, 2});
}

TEST_CASE("masked projection trivial reductions") {
    Rng rng(4);
    Tensor<double> x = rand_t({3, 5}, rng);
    Tensor<double> w = rand_t({5, 6}, rng);
    Tensor<double> wa = rand_t({5, 2}, rng);
    Tensor<double> wb({2, 6});  // zero

    SUBCASE("zero adapter, identity mask reduces to x*w") {
        std::vector<uint8_t> ones(6, 1);
        auto y = forward_masked_all(x, w, wa, wb, ones);
        auto want = matmul_plain(x, w);
        for (size_t i = 0; i < want.data.size(); ++i) CHECK(y.data[i] == want.data[i]);
    }
    SUBCASE("full mask gives zero output") {
        std::vector<uint8_t> zeros(6, 0);
        auto y = forward_masked_all(x, w, wa, wb, zeros);
        for (double v : y.data) CHECK(v == 0.0);
    }
    SUBCASE("identity mask makes the two modes identical") {
        rng.fill_gaussian(wb, 0.5);
        std::vector<uint8_t> ones(6, 1);
        CHECK(bit_equal(forward_masked_all(x, w, wa, wb, ones),
                        forward_masked_base(x, w, wa, wb, ones)));
    }
    SUBCASE("pruned wb columns zero makes the two modes agree for all x") {
        rng.fill_gaussian(wb, 0.5);
        std::vector<uint8_t> d{1, 0, 1, 0, 1, 1};
        for (int j = 0; j < 6; ++j) {
            if (!d[static_cast<size_t>(j)]) {
                for (int r = 0; r < 2; ++r) wb.at(r, j) = 0.0;
            }
        }
        auto gap = mode_gap(x, w, wa, wb, d);
        for (double v : gap.data) CHECK(v == doctest::Approx(0.0).epsilon(1e-15));
    }
    SUBCASE("decision length mismatch raises shape error") {
        std::vector<uint8_t> bad(4, 1);
        CHECK_THROWS_AS(forward_masked_all(x, w, wa, wb, bad), ShapeError);
    }
}

TEST_CASE("mode gap equals x wa wb (I - D)") {
    Rng rng(8);
    for (int trial = 0; trial < 50; ++trial) {
        int l = 2 + static_cast<int>(rng.below(4));
        int m = 2 + static_cast<int>(rng.below(5));
        int n = 2 + static_cast<int>(rng.below(5));
        int r = 1 + static_cast<int>(rng.below(std::min(m, n)));
        Tensor<double> x = rand_t({l, m}, rng);
        Tensor<double> w = rand_t({m, n}, rng);
        Tensor<double> wa = rand_t({m, r}, rng);
        Tensor<double> wb = rand_t({r, n}, rng);
        std::vector<uint8_t> d(static_cast<size_t>(n));
        for (auto& b : d) b = rng.uniform01() < 0.5 ? 1 : 0;

        auto gap = mode_gap(x, w, wa, wb, d);
        auto xab = matmul_plain(matmul_plain(x, wa), wb);
        for (int i = 0; i < l; ++i) {
            for (int j = 0; j < n; ++j) {
                double want = d[static_cast<size_t>(j)] ? 0.0 : xab.at(i, j);
                CHECK(gap.at(i, j) == doctest::Approx(want).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("merge_adapter") {
    Rng rng(15);
    Tensor<double> w = rand_t({4, 6}, rng);
    Tensor<double> wa = rand_t({4, 2}, rng);
    Tensor<double> wb = rand_t({2, 6}, rng);

    SUBCASE("zero factors reduce to w") {
        Tensor<double> z({2, 6});
        CHECK(bit_equal(merge_adapter(w, wa, z), w));
        Tensor<double> za({4, 2});
        CHECK(bit_equal(merge_adapter(w, za, wb), w));
    }
    SUBCASE("random factors match the explicit product sum") {
        auto merged = merge_adapter(w, wa, wb);
        for (int i = 0; i < 4; ++i) {
            for (int j = 0; j < 6; ++j) {
                double want = w.at(i, j);
                for (int k = 0; k < 2; ++k) want += wa.at(i, k) * wb.at(k, j);
                CHECK(merged.at(i, j) == doctest::Approx(want).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("init_adapter contract") {
    Rng rng(40);
    auto lin = init_adapter(8, 12, 3, rng);
    CHECK(lin.wa.shape == std::vector<int>{8, 3});
    CHECK(lin.wb.shape == std::vector<int>{3, 12});

    // wa*wb == 0 exactly at initialization
    auto prod = matmul_plain(lin.wa.cast<double>(), lin.wb.cast<double>());
    for (double v : prod.data) CHECK(v == 0.0);

    Rng r2(40);
    CHECK_THROWS_AS(init_adapter(4, 4, 5, r2), ContractError);
    CHECK_THROWS_AS(init_adapter(4, 4, 0, r2), ContractError);

    // same seed, same factors
    auto a1 = init_adapters(2, 16, 12, 8, 99);
    auto a2 = init_adapters(2, 16, 12, 8, 99);
    CHECK(bit_equal(a1.layers[0].q.wa, a2.layers[0].q.wa));
    CHECK(bit_equal(a1.layers[1].down.wa, a2.layers[1].down.wa));
}

TEST_CASE("gradient-flow contrast between modes") {
    // Loss reads a pruned output column. Under the all-masked forward the
    // gradient of that wb column must be exactly zero; under the base-masked
    // forward it is generically nonzero.
    Rng rng(55);
    Tensor<double> x = rand_t({3, 5}, rng);
    Tensor<double> w = rand_t({5, 6}, rng);
    Tensor<double> wa = rand_t({5, 2}, rng);
    Tensor<double> wb = rand_t({2, 6}, rng);
    Tensor<double> d({6}, {1, 1, 0, 1, 1, 1});  // column 2 pruned
    int pruned_col = 2;

    auto run = [&](ForwardMode mode) {
        Tape<double> tp;
        auto xv = tp.constant(x);
        auto wv = tp.constant(w);
        LoraVars<double> lora{tp.leaf(wa), tp.leaf(wb)};
        auto mask = tp.constant(d);
        auto y = project<double>(tp, xv, wv, &lora, mask, mode);
        // weight the pruned column so its path carries loss
        Tensor<double> sel({3, 6});
        for (int i = 0; i < 3; ++i) sel.at(i, pruned_col) = 1.0;
        tp.backward(sum(mul(y, tp.constant(sel))));
        return tp.grad(lora.wb);
    };

    auto g_all = run(ForwardMode::MaskedAll);
    for (int r = 0; r < 2; ++r) CHECK(g_all.at(r, pruned_col) == 0.0);

    auto g_base = run(ForwardMode::MaskedBase);
    double mag = 0.0;
    for (int r = 0; r < 2; ++r) mag += std::abs(g_base.at(r, pruned_col));
    CHECK(mag > 1e-6);
}
