#include <cmath>
#include <cstring>

#include "atp/autograd.hpp"
#include "atp/gradcheck.hpp"
#include "atp/rng.hpp"
#include "doctest.h"

using namespace atp;

namespace {

// Independent triple-loop product for the matmul oracle.
Tensor<double> matmul_oracle(const Tensor<double>& a, const Tensor<double>& b) {
    Tensor<double> c({a.rows(), b.cols()});
    for (int i = 0; i < a.rows(); ++i) {
        for (int j = 0; j < b.cols(); ++j) {
            double s = 0.0;
            for (int k = 0; k < a.cols(); ++k) s += a.at(i, k) * b.at(k, j);
            c.at(i, j) = s;
        }
    }
    return c;
}

Tensor<double> random_tensor(std::vector<int> shape, Rng& rng, double stddev = 1.0) {
    Tensor<double> t(std::move(shape));
    rng.fill_gaussian(t, stddev);
    return t;
}

}  // namespace

TEST_CASE("matmul identity and selector") {
    Tape<double> tp;
    auto i2 = tp.constant(Tensor<double>::identity(2));
    auto m = tp.constant(Tensor<double>::from_rows({{1, 2}, {3, 4}}));
    auto y = matmul(i2, m);
    CHECK(tp.value(y).data == std::vector<double>{1, 2, 3, 4});

    auto sel = tp.constant(Tensor<double>::from_rows({{1, 0}, {0, 0}}));
    auto b = tp.constant(Tensor<double>::from_rows({{5, 6}, {7, 8}}));
    auto z = matmul(sel, b);
    CHECK(tp.value(z).data == std::vector<double>{5, 6, 0, 0});
}

TEST_CASE("matmul matches triple-loop oracle") {
    Rng rng(11);
    auto a = random_tensor({3, 4}, rng);
    auto b = random_tensor({4, 2}, rng);
    Tape<double> tp;
    auto y = matmul(tp.constant(a), tp.constant(b));
    auto want = matmul_oracle(a, b);
    for (size_t i = 0; i < want.data.size(); ++i) {
        CHECK(tp.value(y).data[i] == doctest::Approx(want.data[i]).epsilon(1e-12));
    }
}

TEST_CASE("matmul shape error names both shapes") {
    Tape<double> tp;
    auto a = tp.constant(Tensor<double>({2, 3}));
    auto b = tp.constant(Tensor<double>({4, 2}));
    CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2x3]"), ShapeError);
}

TEST_CASE("matmul associates with column masking") {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        auto x = random_tensor({5, 6}, rng);
        auto w = random_tensor({6, 8}, rng);
        Tensor<double> d({8});
        for (auto& v : d.data) v = rng.uniform01() < 0.5 ? 0.0 : 1.0;

        Tape<double> tp;
        auto left = colwise_mul(matmul(tp.constant(x), tp.constant(w)), tp.constant(d));
        Tensor<double> wd = w;
        for (int i = 0; i < 6; ++i) {
            for (int j = 0; j < 8; ++j) wd.at(i, j) *= d.data[j];
        }
        auto right = matmul(tp.constant(x), tp.constant(wd));
        for (size_t i = 0; i < tp.value(left).data.size(); ++i) {
            CHECK(tp.value(left).data[i] ==
                  doctest::Approx(tp.value(right).data[i]).epsilon(1e-12));
        }
    }
}

TEST_CASE("softmax_rows examples") {
    Tape<double> tp;
    auto x = tp.constant(Tensor<double>::from_rows({{0, 0}}));
    auto y = softmax_rows(x);
    CHECK(tp.value(y).data[0] == doctest::Approx(0.5));
    CHECK(tp.value(y).data[1] == doctest::Approx(0.5));

    auto x2 = tp.constant(Tensor<double>::from_rows({{1.7, -9.0}}));
    Tensor<uint8_t> mask({1, 2}, {1, 0});
    auto y2 = softmax_rows(x2, &mask);
    CHECK(tp.value(y2).data[0] == doctest::Approx(1.0));
    CHECK(tp.value(y2).data[1] == 0.0);

    auto x3 = tp.constant(Tensor<double>::from_rows({{1, 2, 3}}));
    auto y3 = softmax_rows(x3);
    CHECK(tp.value(y3).data[0] == doctest::Approx(0.09003).epsilon(1e-4));
    CHECK(tp.value(y3).data[1] == doctest::Approx(0.24473).epsilon(1e-4));
    CHECK(tp.value(y3).data[2] == doctest::Approx(0.66524).epsilon(1e-4));
}

TEST_CASE("softmax rows sum to one over unmasked positions") {
    Rng rng(3);
    auto x = random_tensor({6, 9}, rng, 3.0);
    Tensor<uint8_t> mask({6, 9});
    for (auto& v : mask.data) v = rng.uniform01() < 0.7 ? 1 : 0;
    // one fully masked row must come out all-zero
    for (int j = 0; j < 9; ++j) mask.at(2, j) = 0;
    Tape<double> tp;
    auto y = softmax_rows(tp.constant(x), &mask);
    for (int i = 0; i < 6; ++i) {
        double s = 0.0;
        bool any = false;
        for (int j = 0; j < 9; ++j) {
            s += tp.value(y).at(i, j);
            any = any || mask.at(i, j);
        }
        if (any) {
            CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
        } else {
            CHECK(s == 0.0);
        }
    }
}

TEST_CASE("group_l2 examples") {
    Tape<double> tp;
    auto x = tp.constant(Tensor<double>({4}, {3, 4, 1, 1}));
    CHECK(tp.value(group_l2(x, {0, 1})).data[0] == doctest::Approx(5.0));

    auto z = tp.constant(Tensor<double>({3}, {0, 0, 0}));
    CHECK(tp.value(group_l2(z, {0, 1, 2})).data[0] == 0.0);

    auto o = tp.constant(Tensor<double>({4}, {1, 1, 1, 1}));
    CHECK(tp.value(group_l2(o, {0, 1, 2, 3})).data[0] == doctest::Approx(2.0));

    CHECK_THROWS_AS(group_l2(x, {99}), IndexError);
}

TEST_CASE("backward of sum and quadratic") {
    Rng rng(5);
    auto w = random_tensor({3, 4}, rng);

    Tape<double> tp;
    auto wv = tp.leaf(w);
    tp.backward(sum(wv));
    for (double g : tp.grad(wv).data) CHECK(g == 1.0);

    Tape<double> tp2;
    auto wv2 = tp2.leaf(w);
    auto half_sq = scale(sum(mul(wv2, wv2)), 0.5);
    tp2.backward(half_sq);
    for (size_t i = 0; i < w.data.size(); ++i) {
        CHECK(tp2.grad(wv2).data[i] == doctest::Approx(w.data[i]).epsilon(1e-12));
    }
}

TEST_CASE("backward requires scalar root") {
    Tape<double> tp;
    auto x = tp.leaf(Tensor<double>({2, 2}));
    CHECK_THROWS_AS(tp.backward(x), ContractError);
}

TEST_CASE("second backward after zero_grad is bit-identical") {
    Rng rng(9);
    auto w = random_tensor({4, 5}, rng);
    auto x = random_tensor({3, 4}, rng);
    Tape<double> tp;
    auto wv = tp.leaf(w);
    auto y = mean(silu(matmul(tp.constant(x), wv)));
    tp.backward(y);
    Tensor<double> first = tp.grad(wv);
    tp.zero_grad();
    tp.backward(y);
    CHECK(bit_equal(first, tp.grad(wv)));
}

TEST_CASE("grad_check closed forms") {
    // f = x^2 at x = 3: derivative 6
    ObjectiveFn<double> sq = [](Tape<double>& tp, std::vector<Var<double>>& vars) {
        return mul(vars[0], vars[0]);
    };
    CHECK(grad_check<double>(sq, Tensor<double>::scalar(3.0)) <= 1e-9);

    // sigmoid'(0) = 0.25
    Tape<double> tp;
    auto x = tp.leaf(Tensor<double>::scalar(0.0));
    auto y = sigmoid(x);
    tp.backward(y);
    CHECK(tp.grad(x).data[0] == doctest::Approx(0.25).epsilon(1e-8));

    ObjectiveFn<double> sig = [](Tape<double>& tp2, std::vector<Var<double>>& vars) {
        return sigmoid(vars[0]);
    };
    CHECK(grad_check<double>(sig, Tensor<double>::scalar(0.0)) <= 1e-8);
}

TEST_CASE("grad_check rejects non-finite objectives") {
    ObjectiveFn<double> bad = [](Tape<double>& tp, std::vector<Var<double>>& vars) {
        return log_elem(vars[0]);  // log of a negative number
    };
    CHECK_THROWS_AS(grad_check<double>(bad, Tensor<double>::scalar(-1.0)), ContractError);
}

TEST_CASE("per-op gradients match central differences") {
    Rng rng(21);
    double tol = 1e-6;

    SUBCASE("matmul both sides") {
        auto a = random_tensor({3, 4}, rng);
        auto b = random_tensor({4, 5}, rng);
        ObjectiveFn<double> f = [](Tape<double>& tp, std::vector<Var<double>>& v) {
            return sum(silu(matmul(v[0], v[1])));
        };
        CHECK(grad_check_multi<double>(f, {a, b}).max_rel_err <= tol);
    }
    SUBCASE("colwise_mul with soft mask") {
        auto x = random_tensor({4, 6}, rng);
        Tensor<double> d({6});
        for (auto& v : d.data) v = 0.2 + 0.6 * Rng(42).uniform01();
        ObjectiveFn<double> f = [](Tape<double>& tp, std::vector<Var<double>>& v) {
            return sum(mul(colwise_mul(v[0], v[1]), colwise_mul(v[0], v[1])));
        };
        CHECK(grad_check_multi<double>(f, {x, d}).max_rel_err <= tol);
    }
    SUBCASE("softmax with causal mask") {
        auto x = random_tensor({5, 5}, rng);
        Tensor<uint8_t> mask({5, 5});
        for (int i = 0; i < 5; ++i) {
            for (int j = 0; j <= i; ++j) mask.at(i, j) = 1;
        }
        ObjectiveFn<double> f = [mask](Tape<double>& tp, std::vector<Var<double>>& v) {
            auto probs = softmax_rows(v[0], &mask);
            return sum(mul(probs, probs));
        };
        CHECK(grad_check<double>(f, x) <= tol);
    }
    SUBCASE("rmsnorm") {
        auto x = random_tensor({4, 8}, rng);
        auto g = random_tensor({8}, rng);
        ObjectiveFn<double> f = [](Tape<double>& tp, std::vector<Var<double>>& v) {
            return sum(silu(rmsnorm(v[0], v[1], 1e-5)));
        };
        CHECK(grad_check_multi<double>(f, {x, g}).max_rel_err <= tol);
    }
    SUBCASE("layernorm") {
        auto x = random_tensor({4, 8}, rng);
        auto g = random_tensor({8}, rng);
        auto b = random_tensor({8}, rng);
        ObjectiveFn<double> f = [](Tape<double>& tp, std::vector<Var<double>>& v) {
            return sum(sigmoid(layernorm(v[0], v[1], v[2], 1e-5)));
        };
        CHECK(grad_check_multi<double>(f, {x, g, b}).max_rel_err <= tol);
    }
    SUBCASE("cross entropy") {
        auto x = random_tensor({6, 9}, rng);
        std::vector<int> targets{0, 3, 8, 2, 2, 5};
        ObjectiveFn<double> f = [targets](Tape<double>& tp, std::vector<Var<double>>& v) {
            return cross_entropy_mean(v[0], targets);
        };
        CHECK(grad_check<double>(f, x) <= tol);
    }
    SUBCASE("group norms away from zero") {
        auto x = random_tensor({5, 7}, rng);
        std::vector<uint8_t> cols{1, 0, 1, 0, 0, 1, 0};
        std::vector<uint8_t> rows{0, 1, 0, 1, 0};
        ObjectiveFn<double> f = [cols, rows](Tape<double>& tp, std::vector<Var<double>>& v) {
            return add(sum_l2_cols(v[0], cols), sum_l2_rows(v[0], rows));
        };
        CHECK(grad_check<double>(f, x) <= tol);
    }
    SUBCASE("slices concat gather transpose") {
        auto x = random_tensor({6, 8}, rng);
        std::vector<int> ids{2, 0, 5, 5};
        ObjectiveFn<double> f = [ids](Tape<double>& tp, std::vector<Var<double>>& v) {
            auto g = gather_rows(v[0], ids);
            auto a = slice_cols(g, 0, 4);
            auto b = slice_cols(g, 4, 4);
            auto joined = concat_cols<double>({a, b, a});
            auto t = transpose(joined);
            return mean(mul(t, t));
        };
        CHECK(grad_check<double>(f, x) <= tol);
    }
    SUBCASE("scalar chain log abs clamp") {
        ObjectiveFn<double> f = [](Tape<double>& tp, std::vector<Var<double>>& v) {
            auto r = clamp_min(sum(mul(v[0], v[0])), 1e-3);
            return abs_elem(sub(log_elem(r), tp.constant_scalar(0.3)));
        };
        CHECK(grad_check<double>(f, random_tensor({4}, rng)) <= tol);
    }
}

TEST_CASE("gradient accumulates when a var is reused") {
    Tape<double> tp;
    auto x = tp.leaf(Tensor<double>::scalar(2.0));
    auto y = add(mul(x, x), x);  // x^2 + x, dy/dx = 2x + 1 = 5
    tp.backward(y);
    CHECK(tp.grad(x).data[0] == doctest::Approx(5.0));
}

TEST_CASE("determinism: identical seeds produce bit-identical values and gradients") {
    auto run = [](uint64_t seed) {
        Rng rng(seed);
        auto x = random_tensor({8, 8}, rng);
        auto w = random_tensor({8, 8}, rng);
        Tape<double> tp;
        auto wv = tp.leaf(w);
        auto y = mean(silu(matmul(tp.constant(x), wv)));
        tp.backward(y);
        return std::make_pair(tp.value(y).data[0], tp.grad(wv));
    };
    auto [v1, g1] = run(123);
    auto [v2, g2] = run(123);
    CHECK(std::memcmp(&v1, &v2, sizeof(double)) == 0);
    CHECK(bit_equal(g1, g2));
}

TEST_CASE("ste_round forward and backward") {
    Tape<double> tp;
    auto x = tp.leaf(Tensor<double>({3}, {0.5, 0.4999, 0.9}));
    auto y = ste_round(x);
    CHECK(tp.value(y).data == std::vector<double>{1.0, 0.0, 1.0});

    // gradient passes through untouched for a linear downstream
    auto w = tp.constant(Tensor<double>({3}, {0.3, -1.25, 2.5}));
    tp.backward(sum(mul(y, w)));
    CHECK(tp.grad(x).data == std::vector<double>{0.3, -1.25, 2.5});
}
