#include <doctest.h>

#include <cmath>
#include <numbers>

#include "danp/ops.hpp"
#include "danp/optim.hpp"
#include "danp/params.hpp"
#include "danp/rng.hpp"

using namespace danp;

namespace {

Tensor<double> random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
    Tensor<double> t(std::move(shape));
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = scale * rng.normal();
    return t;
}

}  // namespace

TEST_CASE("tensor construction checks extents and size") {
    CHECK_THROWS_AS(Tensor<float>({2, 0}), DimensionError);
    CHECK_THROWS_AS(Tensor<float>({2, 2}, std::vector<float>{1, 2, 3}), DimensionError);
    auto t = Tensor<float>::matrix({{1, 2, 3}, {4, 5, 6}});
    CHECK(t.rows() == 2);
    CHECK(t.cols() == 3);
    CHECK(t.at(1, 2) == 6);
    CHECK(shape_str(t.shape()) == "[2x3]");
}

TEST_CASE("validation hook rejects non-finite values") {
    Tensor<double> t({3}, 1.0);
    CHECK_NOTHROW(t.validate("t"));
    t[1] = std::nan("");
    CHECK_THROWS_AS(t.validate("t"), NonFiniteError);
    t[1] = INFINITY;
    CHECK_FALSE(t.all_finite());
}

TEST_CASE("matmul values and shape errors") {
    Tape<double> tape;
    auto I = tape.constant(Tensor<double>::matrix({{1, 0}, {0, 1}}));
    auto A = tape.constant(Tensor<double>::matrix({{1, 2}, {3, 4}}));
    auto IA = ops::matmul(I, A).value();
    CHECK(IA == A.value());
    auto b = tape.constant(Tensor<double>::matrix({{5}, {6}}));
    auto c = ops::matmul(A, b).value();
    CHECK(c.at(0, 0) == 17);
    CHECK(c.at(1, 0) == 39);
    auto x = tape.constant(Tensor<double>({2, 3}));
    auto y = tape.constant(Tensor<double>({4, 5}));
    try {
        ops::matmul(x, y);
        FAIL("expected a dimension error");
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2x3]") != std::string::npos);
        CHECK(msg.find("[4x5]") != std::string::npos);
    }
}

TEST_CASE("softmax rows") {
    Tape<double> tape;
    auto s = ops::softmax_rows(tape.constant(Tensor<double>::matrix({{0, 0}, {1000, 1000}}))).value();
    for (std::size_t i = 0; i < 4; ++i) CHECK(s[i] == doctest::Approx(0.5));
    auto t = ops::softmax_rows(tape.constant(Tensor<double>::matrix({{1, 2, 3}}))).value();
    // exp(k) / (e + e^2 + e^3)
    const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    for (int k = 0; k < 3; ++k) CHECK(t[k] == doctest::Approx(std::exp(k + 1.0) / z).epsilon(1e-12));
    CHECK(t[0] == doctest::Approx(0.09003).epsilon(1e-4));

    Rng rng(4);
    auto big = ops::softmax_rows(tape.constant(random_tensor({6, 9}, rng, 30.0))).value();
    for (std::size_t r = 0; r < 6; ++r) {
        double sum = 0.0;
        for (std::size_t c = 0; c < 9; ++c) sum += big.at(r, c);
        CHECK(std::abs(sum - 1.0) <= 1e-6);
    }
}

TEST_CASE("layer norm") {
    Tape<double> tape;
    auto ones = tape.constant(Tensor<double>({2}, 1.0));
    auto zeros = tape.constant(Tensor<double>({2}, 0.0));
    auto c = ops::layer_norm(tape.constant(Tensor<double>::matrix({{3, 3}})), ones, zeros).value();
    CHECK(c[0] == 0.0);
    CHECK(c[1] == 0.0);
    auto v = ops::layer_norm(tape.constant(Tensor<double>::matrix({{1, -1}})), ones, zeros).value();
    CHECK(v[0] == doctest::Approx(1.0 / std::sqrt(1.0 + 1e-5)).epsilon(1e-12));
    CHECK(v[1] == doctest::Approx(-1.0 / std::sqrt(1.0 + 1e-5)).epsilon(1e-12));
    auto bias = tape.constant(Tensor<double>::vector({0.25, -2}));
    auto g = ops::layer_norm(tape.constant(Tensor<double>::matrix({{5, 9}})), zeros, bias).value();
    CHECK(g[0] == 0.25);
    CHECK(g[1] == -2);
}

TEST_CASE("attention special cases") {
    Tape<double> tape;
    Rng rng(11);
    SUBCASE("single key returns its value row") {
        auto q = tape.constant(random_tensor({3, 4}, rng));
        auto k = tape.constant(random_tensor({1, 4}, rng));
        auto v = tape.constant(random_tensor({1, 4}, rng));
        auto out = ops::attention(q, k, v, 2).value();
        for (std::size_t r = 0; r < 3; ++r)
            for (std::size_t c = 0; c < 4; ++c) CHECK(out.at(r, c) == doctest::Approx(v.value()[c]).epsilon(1e-12));
    }
    SUBCASE("a mask forcing key j reads row j only") {
        auto q = tape.constant(random_tensor({2, 4}, rng));
        auto k = tape.constant(random_tensor({3, 4}, rng));
        auto v = tape.constant(random_tensor({3, 4}, rng));
        AttentionMask m(2, 3);
        m.set(0, 2, true);
        m.set(1, 2, true);
        auto out = ops::attention(q, k, v, 1, &m).value();
        for (std::size_t r = 0; r < 2; ++r)
            for (std::size_t c = 0; c < 4; ++c) CHECK(out.at(r, c) == doctest::Approx(v.value().at(2, c)));
    }
    SUBCASE("equal scores average the values") {
        auto q = tape.constant(Tensor<double>({1, 2}, 0.0));
        auto k = tape.constant(random_tensor({2, 2}, rng));
        auto v = tape.constant(Tensor<double>::matrix({{1, 2}, {3, 6}}));
        auto out = ops::attention(q, k, v, 1).value();
        CHECK(out[0] == doctest::Approx(2.0));
        CHECK(out[1] == doctest::Approx(4.0));
    }
    SUBCASE("isolated query is rejected") {
        auto q = tape.constant(random_tensor({2, 2}, rng));
        AttentionMask m(2, 2);
        m.set(0, 0, true);
        CHECK_THROWS_AS(ops::attention(q, q, q, 1, &m), ContractError);
    }
    SUBCASE("mask entries must be binary") {
        CHECK_THROWS_AS(AttentionMask::from_tensor(Tensor<double>::matrix({{1, 0.5}})), ContractError);
    }
}

TEST_CASE("backward basics") {
    Tape<double> tape;
    auto theta = tape.leaf(Tensor<double>::vector({1.5, -2, 0.25}));
    auto loss = ops::sum(theta);
    tape.backward(loss);
    for (double g : tape.leaf_grad(theta)) CHECK(g == 1.0);

    Tape<double> t2;
    auto th = t2.leaf(Tensor<double>::vector({1.5, -2, 0.25}));
    auto l2 = ops::scale(ops::sum(ops::square(th)), 0.5);
    t2.backward(l2);
    auto g2 = t2.leaf_grad(th);
    CHECK(g2[0] == 1.5);
    CHECK(g2[1] == -2);
    CHECK(g2[2] == 0.25);

    Tape<double> t3;
    auto v = t3.leaf(Tensor<double>({2, 2}, 1.0));
    CHECK_THROWS_AS(t3.backward(v), ContractError);
}

TEST_CASE("finite-difference oracle") {
    ParamStore<double> p;
    p.insert("a", Tensor<double>::vector({0.3, -1.2, 2.0}));
    SUBCASE("quadratic") {
        auto lg = [](const ParamStore<double>& ps, GradStore<double>& g) {
            const auto& a = ps.at("a");
            double l = 0.0;
            g["a"].assign(3, 0.0);
            for (std::size_t i = 0; i < 3; ++i) {
                l += 0.5 * (i + 1.0) * a[i] * a[i];
                g["a"][i] = (i + 1.0) * a[i];
            }
            return l;
        };
        auto l = [&](const ParamStore<double>& ps) {
            GradStore<double> g;
            return lg(ps, g);
        };
        CHECK(finite_diff_check(p, lg, l, 1e-3) <= 1e-9);
    }
    SUBCASE("constant") {
        auto lg = [](const ParamStore<double>&, GradStore<double>& g) {
            g["a"].assign(3, 0.0);
            return 4.0;
        };
        auto l = [](const ParamStore<double>&) { return 4.0; };
        CHECK(finite_diff_check(p, lg, l, 1e-3) == 0.0);
    }
}

TEST_CASE("random composite of ops matches finite differences") {
    Rng rng(2024);
    ParamStore<double> ps;
    ps.insert("w1", random_tensor({3, 4}, rng, 0.5));
    ps.insert("b1", random_tensor({4}, rng, 0.5));
    ps.insert("g", random_tensor({4}, rng, 0.5));
    ps.insert("w2", random_tensor({4, 4}, rng, 0.5));
    ps.insert("m2", random_tensor({1, 4}, rng, 0.5));
    const auto x = random_tensor({6, 3}, rng);
    const auto y = random_tensor({6, 2}, rng);
    AttentionMask mask(6, 6);
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j : {0, 2, 3}) mask.set(i, j, true);

    auto build = [&](Tape<double>& tape, ParamBinding<double>& bind) {
        auto h = ops::add_row(ops::matmul(tape.constant(x), bind("w1")), bind("b1"));
        h = ops::gelu(h);
        h = ops::layer_norm(h, bind("g"), bind("b1"));
        auto a = ops::attention(h, ops::matmul(h, bind("w2")), h, 2, &mask);
        auto grp = ops::grouped_attention(a, h, ops::relu(h), 2, 2, 2);
        auto cat = ops::concat_cols(ops::slice_cols(grp, 0, 2), ops::softplus(ops::slice_cols(a, 2, 2)));
        auto gathered = ops::gather_rows(cat, {5, 0, 0, 3, 2, 1});
        auto seg = ops::segment_mean_rows(gathered, 3);
        auto mu = ops::slice_cols(gathered, 0, 2);
        auto sd = ops::add_scalar(ops::exp(ops::scale(ops::slice_cols(gathered, 2, 2), 0.5)), 0.1);
        auto ll = ops::gaussian_loglik_sum(mu, sd, y);
        auto pooled = ops::mean_rows(ops::concat_rows(seg, ops::transpose(ops::transpose(seg))));
        auto var1 = ops::add_scalar(ops::square(pooled), 0.2);
        auto m2 = bind("m2");
        auto kl = ops::kl_diag(ops::mul(pooled, m2), var1, ops::sub(m2, pooled), ops::exp(m2));
        auto extra = ops::mean(ops::log(ops::add_scalar(ops::softmax_rows(h), 1.0)));
        return ops::add(ops::sub(ops::reshape(kl, {1}), ll), extra);
    };
    auto lg = [&](const ParamStore<double>& p, GradStore<double>& g) {
        Tape<double> tape;
        ParamBinding<double> bind(tape, p);
        auto loss = build(tape, bind);
        const double v = loss.value()[0];
        tape.backward(loss);
        g = bind.grads();
        return v;
    };
    auto l = [&](const ParamStore<double>& p) {
        Tape<double> tape;
        ParamBinding<double> bind(tape, p, false);
        return build(tape, bind).value()[0];
    };
    CHECK(finite_diff_check(ps, lg, l, 1e-3) <= 1e-3);
}

TEST_CASE("adam") {
    SUBCASE("first step moves by lr against the gradient sign") {
        ParamStore<double> p;
        p.insert("t", Tensor<double>({1}, 0.0));
        OptimizerState<double> st;
        adam_step(p, GradStore<double>{{"t", {2.0}}}, st, 0.1);
        CHECK(p.at("t")[0] == doctest::Approx(-0.1).epsilon(1e-6));
        CHECK(st.step == 1);
    }
    SUBCASE("zero gradient leaves parameters unchanged") {
        ParamStore<double> p;
        p.insert("t", Tensor<double>::vector({1.0, -3.0}));
        const auto before = p;
        OptimizerState<double> st;
        for (int i = 0; i < 5; ++i) adam_step(p, GradStore<double>{{"t", {0.0, 0.0}}}, st, 0.1);
        CHECK(p == before);
        CHECK(st.step == 5);
    }
    SUBCASE("parameters are updated independently") {
        ParamStore<double> p1, p2;
        p1.insert("a", Tensor<double>({1}, 1.0));
        p1.insert("b", Tensor<double>({1}, 2.0));
        p2.insert("b", Tensor<double>({1}, 2.0));
        OptimizerState<double> s1, s2;
        for (int i = 0; i < 3; ++i) {
            adam_step(p1, GradStore<double>{{"a", {0.5}}, {"b", {-1.0}}}, s1, 0.05);
            adam_step(p2, GradStore<double>{{"b", {-1.0}}}, s2, 0.05);
        }
        CHECK(p1.at("b")[0] == p2.at("b")[0]);
    }
    SUBCASE("frozen keys stay put") {
        ParamStore<double> p;
        p.insert("a", Tensor<double>({1}, 1.0));
        p.insert("b", Tensor<double>({1}, 1.0));
        OptimizerState<double> st;
        adam_step(p, GradStore<double>{{"a", {1.0}}, {"b", {1.0}}}, st, 0.1, {"a"});
        CHECK(p.at("a")[0] == 1.0);
        CHECK(p.at("b")[0] < 1.0);
    }
}

TEST_CASE("cosine schedule") {
    CHECK(cosine_lr(0, 100, 0.3) == 0.3);
    CHECK(cosine_lr(100, 100, 0.3) == doctest::Approx(0.0));
    CHECK(cosine_lr(50, 100, 0.3) == doctest::Approx(0.15));
    CHECK(cosine_lr(250, 100, 0.3) == cosine_lr(100, 100, 0.3));
}

TEST_CASE("rng streams") {
    Rng a(5), b(5);
    for (int i = 0; i < 10; ++i) CHECK(a.next_u64() == b.next_u64());
    CHECK(derive_seed(1, 2) != derive_seed(1, 3));
    CHECK(derive_seed(1, 2) == splitmix64(1 ^ splitmix64(2 + 0x9E3779B97F4A7C15ULL)));
    Rng c(9);
    for (int i = 0; i < 1000; ++i) {
        const auto v = c.uniform_int(-2, 3);
        CHECK(v >= -2);
        CHECK(v <= 3);
        const double u = c.uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
    }
}
