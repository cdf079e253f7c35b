#include <doctest.h>

#include <cmath>
#include <set>
#include <sstream>

#include "danp/bo.hpp"

using namespace danp;

namespace {

Surrogate flat_surrogate() {
    return [](const TaskBatch& t) {
        const auto n = t.targets().size();
        return std::make_pair(std::vector<double>(n, 0.0), std::vector<double>(n, 1.0));
    };
}

}  // namespace

TEST_CASE("benchmark functions") {
    const std::vector<double> zero2(2, 0.0), zero5(5, 0.0);
    CHECK(ackley(zero2) == 0.0);
    CHECK(ackley(zero5) == 0.0);
    CHECK(rastrigin(zero2) == 0.0);
    CHECK(rastrigin(zero5) == 0.0);
    CHECK(cosine_objective(zero2) == doctest::Approx(-2.0));
    const std::vector<double> x = {1.0, -0.5};
    CHECK(rastrigin(x) == doctest::Approx(20 + 1 - 10 * std::cos(2 * M_PI) + 0.25 - 10 * std::cos(M_PI)));
    const double c = std::cos(1.0) * (0.1 / (2 * M_PI) - 1) + std::cos(0.5) * (0.1 / (2 * M_PI) * 0.5 - 1);
    CHECK(cosine_objective(x) == doctest::Approx(c));

    Objective a(ObjectiveName::ackley, 2);
    CHECK(a.optimum() == 0.0);
    Rng rng(1);
    for (int i = 0; i < 200; ++i) {
        std::vector<double> p = {rng.uniform(-2, 2), rng.uniform(-2, 2)};
        CHECK(a(p) >= 0.0);
    }
    Objective cos2(ObjectiveName::cosine, 2);
    CHECK(*cos2.optimum() == doctest::Approx(-2.0));
    std::vector<double> outside = {3.0, 0.0};
    const double v = cos2(outside);
    CHECK(v == doctest::Approx(cosine_objective(std::vector<double>{2.0, 0.0})));
    CHECK(cos2.clipped() == 1);
    CHECK_THROWS_AS(parse_objective_name("himmelblau"), ConfigError);
}

TEST_CASE("gp_sample objective is deterministic per seed") {
    Objective a(ObjectiveName::gp_sample, 2, 5), b(ObjectiveName::gp_sample, 2, 5);
    CHECK_FALSE(a.optimum().has_value());
    Rng rng(2);
    for (int i = 0; i < 20; ++i) {
        std::vector<double> p = {rng.uniform(-2, 2), rng.uniform(-2, 2)};
        CHECK(a(p) == b(p));
    }
    // a repeated query sees the value it already realized (up to jitter)
    std::vector<double> p = {0.1, 0.2};
    const double first = a(p);
    CHECK(a(p) == doctest::Approx(first).epsilon(1e-3));
}

TEST_CASE("expected improvement") {
    CHECK(expected_improvement(1.0, 1.0, 1.0) == doctest::Approx(0.39894).epsilon(1e-5));
    CHECK(expected_improvement(2.0, 0.0, 1.0) == 0.0);
    CHECK(expected_improvement(1.0, 0.0, 1.0) == 0.0);
    CHECK(expected_improvement(0.25, 0.0, 1.0) == 0.75);
    CHECK_THROWS_AS(expected_improvement(0.0, -1.0, 0.0), ContractError);
    Rng rng(3);
    for (int i = 0; i < 500; ++i) {
        const double mu = rng.uniform(-3, 3), s = rng.uniform(0.01, 3), best = rng.uniform(-3, 3);
        const double ei = expected_improvement(mu, s, best);
        CHECK(ei >= 0.0);
        CHECK(ei >= best - mu - 1e-12);
        const double h = 1e-4;
        CHECK(expected_improvement(mu + h, s, best) <= ei);
        CHECK(expected_improvement(mu, s + h, best) >= ei);
    }
}

TEST_CASE("BO loop") {
    BoOptions opt;
    opt.iterations = 12;
    opt.pool_size = 32;

    SUBCASE("history shape, bounds and monotone best") {
        Objective f(ObjectiveName::rastrigin, 3);
        Rng rng(4);
        auto run = bo_loop(f, flat_surrogate(), opt, rng);
        CHECK(run.ys.size() == opt.init_points + opt.iterations);
        CHECK(run.best.size() == run.ys.size());
        for (std::size_t i = 1; i < run.best.size(); ++i) CHECK(run.best[i] <= run.best[i - 1]);
        for (const auto& x : run.xs)
            for (double v : x) CHECK((v >= -2.0 && v <= 2.0));
        CHECK(f.clipped() == 0);
    }
    SUBCASE("same seed, same queries") {
        Objective f1(ObjectiveName::ackley, 2), f2(ObjectiveName::ackley, 2);
        Rng r1(9), r2(9);
        auto a = bo_loop(f1, flat_surrogate(), opt, r1);
        auto b = bo_loop(f2, flat_surrogate(), opt, r2);
        CHECK(a.xs == b.xs);
        opt.acquisition = Acquisition::random;
        Rng r3(9), r4(9);
        CHECK(bo_loop(f1, {}, opt, r3).xs == bo_loop(f2, {}, opt, r4).xs);
    }
    SUBCASE("an exact oracle queries the pool minimum") {
        opt.iterations = 1;
        opt.init_points = 1;
        opt.pool_size = 64;
        TaskBatch seen;
        Surrogate oracle = [&](const TaskBatch& t) {
            seen = t;
            // recover the standardization from the context
            std::vector<double> ys;
            for (auto k : t.sorted_context()) ys.push_back(cosine_objective(t.x_row(k)));
            double m = 0, v = 0;
            for (double y : ys) m += y;
            m /= ys.size();
            for (double y : ys) v += (y - m) * (y - m);
            const double sd = v > 0 ? std::sqrt(v / ys.size()) : 1.0;
            std::vector<double> mu, s;
            for (auto k : t.targets()) {
                mu.push_back((cosine_objective(t.x_row(k)) - m) / sd);
                s.push_back(1e-9);
            }
            return std::make_pair(mu, s);
        };
        Objective f(ObjectiveName::cosine, 2);
        Rng rng(6);
        auto run = bo_loop(f, oracle, opt, rng);
        std::size_t arg = 0;
        double lo = 1e300;
        for (auto k : seen.targets())
            if (cosine_objective(seen.x_row(k)) < lo) {
                lo = cosine_objective(seen.x_row(k));
                arg = k;
            }
        REQUIRE(lo < run.ys.front());
        const auto xr = seen.x_row(arg);
        CHECK(run.xs.back() == std::vector<double>(xr.begin(), xr.end()));
        CHECK(run.fallbacks == 0);
    }
    SUBCASE("vanishing EI falls back to the widest candidate") {
        opt.iterations = 1;
        Surrogate pessimist = [](const TaskBatch& t) {
            const auto n = t.targets().size();
            std::vector<double> s(n, 0.0);
            s[n / 2] = 1e-300;
            return std::make_pair(std::vector<double>(n, 1e6), s);
        };
        Objective f(ObjectiveName::cosine, 2);
        Rng rng(6);
        auto run = bo_loop(f, pessimist, opt, rng);
        CHECK(run.fallbacks == 1);
    }
    SUBCASE("EI without a surrogate is a config error") {
        Objective f(ObjectiveName::cosine, 2);
        Rng rng(1);
        CHECK_THROWS_AS(bo_loop(f, {}, opt, rng), ConfigError);
    }
}

TEST_CASE("regret traces") {
    BoRun run;
    run.ys = {3.0, 5.0, 1.0, 2.0};
    run.best = {3.0, 3.0, 1.0, 1.0};
    run.xs.assign(4, {0.0});
    auto r = regret(run, 1.0);
    CHECK(r.simple == std::vector<double>{2.0, 2.0, 0.0, 0.0});
    CHECK(r.cumulative == std::vector<double>{2.0, 4.0, 4.0, 4.0});
    CHECK(r.normalized.back() == 0.0);
    auto worst = regret(run, 1.0, 3.0);
    CHECK(worst.normalized.front() == 1.0);
    for (std::size_t i = 1; i < r.cumulative.size(); ++i) CHECK(r.cumulative[i] >= r.cumulative[i - 1]);
    CHECK_THROWS_AS(regret(run, 5.0), ContractError);
}

TEST_CASE("CSV output") {
    std::vector<BoRecord> recs;
    for (std::uint64_t s = 0; s < 3; ++s) {
        Objective f(ObjectiveName::cosine, 2);
        Rng rng(s);
        BoOptions opt;
        opt.iterations = 2;
        opt.acquisition = Acquisition::random;
        BoRecord rec;
        rec.run_seed = 100 + s;
        rec.objective = "cosine";
        rec.run = bo_loop(f, {}, opt, rng);
        rec.traces = regret(rec.run, *f.optimum());
        recs.push_back(rec);
    }
    std::ostringstream out;
    write_bo_csv(out, recs);
    std::istringstream in(out.str());
    std::string line;
    std::getline(in, line);
    CHECK(line == "run_seed,objective,dim,iter,query_x1,query_x2,y,best,simple_regret,cumulative_regret,"
                  "normalized_regret");
    std::set<std::string> seeds;
    int rows = 0;
    while (std::getline(in, line)) {
        ++rows;
        seeds.insert(line.substr(0, line.find(',')));
    }
    CHECK(rows == 3 * 7);
    CHECK(seeds.size() == 3);
    CHECK(out.str().find("100,cosine,2,1,") != std::string::npos);
}
