#include <doctest.h>

#include <Eigen/Eigenvalues>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>

#include "danp/taskgen.hpp"

using namespace danp;

namespace {

double correlation(const std::vector<double>& a, const std::vector<double>& b) {
    const double n = static_cast<double>(a.size());
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    return sab / std::sqrt(saa * sbb);
}

std::string write_file(const std::string& name, const std::string& text) {
    const std::string path = "taskgen_test_" + name + ".txt";
    std::ofstream(path) << text;
    return path;
}

std::string grid_file(std::size_t d_x, std::size_t d_y, std::size_t n) {
    std::string s = "DANP-TASK v1 d_x=" + std::to_string(d_x) + " d_y=" + std::to_string(d_y) +
                    " n=" + std::to_string(n) + "\n";
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t j = 0; j < d_x + d_y; ++j) s += std::to_string(0.01 * (r + j)) + " ";
        s += "\n";
    }
    return s;
}

}  // namespace

TEST_CASE("kernel values") {
    const std::vector<double> a = {0.0}, b = {1.0}, c = {0.3, -0.2}, d = {-1.1, 0.4};
    KernelSpec rbf{KernelFamily::rbf, 1.0, 1.0};
    KernelSpec mat{KernelFamily::matern52, 1.0, 1.0};
    CHECK(kernel_eval(rbf, a, b) == doctest::Approx(0.60653).epsilon(1e-5));
    CHECK(kernel_eval(mat, a, b) == doctest::Approx(0.52399).epsilon(1e-5));
    for (auto fam : {KernelFamily::rbf, KernelFamily::matern52}) {
        KernelSpec k{fam, 0.7, 0.4};
        CHECK(kernel_eval(k, c, c) == 0.7 * 0.7);
        CHECK(kernel_eval(k, c, d) == kernel_eval(k, d, c));
    }
    CHECK_THROWS_AS(kernel_eval(rbf, a, c), DimensionError);
    CHECK(parse_kernel_family("matern52") == KernelFamily::matern52);
    CHECK_THROWS_AS(parse_kernel_family("periodic"), ConfigError);
}

TEST_CASE("Gram matrices are symmetric PSD") {
    Rng rng(12);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t d = 1 + trial % 3;
        std::vector<double> x(20 * d);
        for (auto& v : x) v = rng.uniform(-2, 2);
        KernelSpec k{trial % 2 ? KernelFamily::matern52 : KernelFamily::rbf, rng.uniform(0.1, 1), rng.uniform(0.1, 0.6)};
        auto g = gram_matrix(k, x, d);
        Eigen::MatrixXd m(20, 20);
        for (int i = 0; i < 20; ++i)
            for (int j = 0; j < 20; ++j) {
                m(i, j) = g[i * 20 + j];
                CHECK(g[i * 20 + j] == g[j * 20 + i]);
            }
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m, Eigen::EigenvaluesOnly);
        CHECK(es.eigenvalues().minCoeff() >= -1e-8);
    }
}

TEST_CASE("count law") {
    Rng rng(3);
    for (std::size_t d : {1, 2, 3}) {
        std::size_t lo_c = 1000000, hi_c = 0;
        for (int i = 0; i < 3000; ++i) {
            auto [c, t] = sample_counts(d, rng);
            lo_c = std::min(lo_c, c);
            hi_c = std::max(hi_c, c);
            CHECK(c >= 5 * d * d);
            CHECK(c <= 45 * d * d);
            CHECK(t >= 5 * d * d);
            CHECK(c + t <= 50 * d * d);
        }
        CHECK(lo_c == 5 * d * d);
        CHECK(hi_c >= 44 * d * d);
    }
}

TEST_CASE("generated tasks") {
    SUBCASE("invariants and determinism") {
        for (std::uint64_t s = 0; s < 30; ++s) {
            Rng a(s), b(s);
            auto t = sample_gp_task(1 + s % 3, 1 + s % 2, s % 2 ? KernelFamily::matern52 : KernelFamily::rbf, a);
            CHECK_NOTHROW(t.validate());
            CHECK(t == sample_gp_task(1 + s % 3, 1 + s % 2, s % 2 ? KernelFamily::matern52 : KernelFamily::rbf, b));
            for (double v : t.x) CHECK((v >= -2.0 && v <= 2.0));
        }
    }
    SUBCASE("marginal variance matches the prior") {
        // E[s^2] for s ~ U(0.1, 1) plus the noise variance
        const double noise = 0.02;
        const double expected = (1.0 - 0.001) / (3.0 * 0.9) + noise * noise;
        Rng rng(21);
        double sum = 0, sq = 0;
        const int N = 10000;
        for (int i = 0; i < N; ++i) {
            auto t = sample_gp_task(1, 1, KernelFamily::rbf, rng, noise);
            sum += t.y[0];
            sq += t.y[0] * t.y[0];
        }
        const double var = sq / N - (sum / N) * (sum / N);
        CHECK(std::abs(var - expected) <= 0.1 * expected);
    }
    SUBCASE("output channels are uncorrelated") {
        Rng rng(22);
        std::vector<double> c0, c1, c2;
        for (int i = 0; i < 10000; ++i) {
            auto t = sample_gp_task(1, 3, KernelFamily::rbf, rng);
            c0.push_back(t.y[0]);
            c1.push_back(t.y[1]);
            c2.push_back(t.y[2]);
        }
        CHECK(std::abs(correlation(c0, c1)) <= 0.05);
        CHECK(std::abs(correlation(c0, c2)) <= 0.05);
        CHECK(std::abs(correlation(c1, c2)) <= 0.05);
    }
}

TEST_CASE("scenarios") {
    SUBCASE("zero-shot dimension mix") {
        ScenarioParams p;
        p.kind = ScenarioKind::zero_shot;
        p.train_dims = {2, 4};
        Scenario sc(p, 7);
        std::map<std::size_t, int> freq;
        for (std::uint64_t i = 0; i < 10000; ++i) ++freq[sc.train_dim(i)];
        CHECK(freq.size() == 2);
        CHECK(std::abs(freq[2] / 10000.0 - 0.5) <= 0.03);
        CHECK(sc.train_task(5).d_x == sc.train_dim(5));
    }
    SUBCASE("fine-tune list") {
        ScenarioParams p;
        p.kind = ScenarioKind::fine_tune;
        p.train_dims = {2};
        p.eval_dims = {1};
        Scenario a(p, 3), b(p, 3);
        CHECK(a.finetune_list().size() == 160);
        CHECK(a.finetune_list() == b.finetune_list());
        for (const auto& t : a.finetune_list()) CHECK(t.d_x == 1);
    }
    SUBCASE("eval suite") {
        ScenarioParams p;
        Scenario sc(p, 1);
        CHECK(p.eval_tasks == 3000);
        auto s = sc.eval_suite(2, 4);
        CHECK(s.size() == 4);
        CHECK(s == sc.eval_suite(2, 4));
        CHECK(s[0].d_x == 2);
    }
    SUBCASE("train stream is a pure function of the index") {
        ScenarioParams p;
        Scenario sc(p, 9);
        auto src = sc.stream();
        CHECK(src(17) == sc.train_task(17));
        CHECK_FALSE(src(17) == src(18));
    }
    SUBCASE("validation") {
        ScenarioParams p;
        p.train_dims = {};
        CHECK_THROWS_AS(Scenario(p, 0), ConfigError);
        CHECK(parse_scenario_kind("fine_tune") == ScenarioKind::fine_tune);
        CHECK_THROWS_AS(parse_scenario_kind("oneshot"), ConfigError);
    }
}

TEST_CASE("task files") {
    SUBCASE("well-formed") {
        auto path = write_file("ok", grid_file(2, 3, 100));
        Rng a(5), b(5);
        auto t = grid_task_from_file(path, a);
        CHECK(t.d_x == 2);
        CHECK(t.d_y == 3);
        CHECK(t.n() == 100);
        CHECK(t.context.size() >= 20);
        CHECK(t.context.size() <= 99);
        CHECK(t.context == grid_task_from_file(path, b).context);
        std::remove(path.c_str());
    }
    SUBCASE("row length mismatch names the row") {
        auto text = grid_file(1, 1, 12);
        auto pos = text.find('\n', text.find('\n', text.find('\n') + 1) + 1);
        text.insert(pos, " 7.0");
        auto path = write_file("ragged", text);
        Rng rng(1);
        try {
            grid_task_from_file(path, rng);
            FAIL("expected TaskFileError");
        } catch (const TaskFileError& e) {
            CHECK(std::string(e.what()).find("row 2") != std::string::npos);
        }
        std::remove(path.c_str());
    }
    SUBCASE("rejections") {
        Rng rng(1);
        auto small = write_file("small", grid_file(1, 1, 5));
        CHECK_THROWS_AS(grid_task_from_file(small, rng), TaskFileError);
        auto header = write_file("header", "DANP-TASK v2 d_x=1 d_y=1 n=10\n");
        CHECK_THROWS_AS(grid_task_from_file(header, rng), TaskFileError);
        auto text = grid_file(1, 1, 10);
        text.replace(text.rfind("0.1"), 3, "nan");
        auto nonfinite = write_file("nan", text);
        CHECK_THROWS_AS(grid_task_from_file(nonfinite, rng), TaskFileError);
        CHECK_THROWS_AS(grid_task_from_file("does/not/exist.txt", rng), TaskFileError);
        for (auto& p : {small, header, nonfinite}) std::remove(p.c_str());
    }
}
