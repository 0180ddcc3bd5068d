#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <map>

#include "mixedsim/noise.hpp"
#include "mixedsim/rng.hpp"

using namespace mixedsim;

namespace {

LayerNoiseConfig make_cfg(Technology tech, MapScheme scheme, double rho = 1.0) {
    LayerNoiseConfig cfg;
    cfg.technology = tech;
    cfg.scheme = scheme;
    cfg.rho = rho;
    if (tech == Technology::Eflash) {
        cfg.delta_i_max = 30.0;
        cfg.i_max = 30.0;
    }
    return cfg;
}

MappingConfig map_for(Technology tech, MapScheme scheme) {
    MappingConfig m;
    m.technology = tech;
    m.scheme = scheme;
    if (tech == Technology::Memristor) {
        m.floor = 10.0;
        m.range = 90.0;
        m.bias = 55.0;
    } else {
        m.floor = 3.0;
        m.range = 30.0;
        m.bias = 15.0;
    }
    return m;
}

}  // namespace

TEST_CASE("eFlash noise is zero at all-zero inputs") {
    auto cfg = make_cfg(Technology::Eflash, MapScheme::Map1);
    auto m = map_for(Technology::Eflash, MapScheme::Map1);
    std::vector<DevicePair> pairs;
    std::vector<double> zeros(16, 0.0);
    CounterRng rng(5, 1);
    for (int i = 0; i < 16; ++i) pairs.push_back(map_weight(m, rng.uniform(i, -1.0, 1.0)));
    CHECK(preactivation_noise_var(cfg, pairs, zeros) == 0.0);
}

TEST_CASE("memristor noise is input-independent") {
    auto cfg = make_cfg(Technology::Memristor, MapScheme::Map1);
    auto m = map_for(Technology::Memristor, MapScheme::Map1);
    std::vector<DevicePair> pairs;
    CounterRng rng(6, 1);
    for (int i = 0; i < 32; ++i) pairs.push_back(map_weight(m, rng.uniform(i, -1.0, 1.0)));
    std::vector<double> a(32), b(32);
    for (int i = 0; i < 32; ++i) {
        a[i] = rng.uniform(100 + i);
        b[i] = rng.uniform(200 + i);
    }
    CHECK(preactivation_noise_var(cfg, pairs, a) ==
          Catch::Approx(preactivation_noise_var(cfg, pairs, b)));
}

TEST_CASE("memristor Map2 closed form: 2 N G_b") {
    auto cfg = make_cfg(Technology::Memristor, MapScheme::Map2);
    auto m = map_for(Technology::Memristor, MapScheme::Map2);
    const int n = 24;
    std::vector<DevicePair> pairs;
    CounterRng rng(7, 1);
    for (int i = 0; i < n; ++i) pairs.push_back(map_weight(m, rng.uniform(i, -1.0, 1.0)));
    std::vector<double> x(n, 0.3);
    const double scale = cfg.x_max * cfg.w_max / (cfg.v_max * cfg.delta_g_max * 1e-6);
    const double expected = cfg.alpha_m / cfg.rho * scale * scale * (2.0 * n * 55.0 * 1e-6);
    CHECK(preactivation_noise_var(cfg, pairs, x) == Catch::Approx(expected).epsilon(1e-12));
}

TEST_CASE("Map1 memristor noise is non-decreasing in sum |w|") {
    auto cfg = make_cfg(Technology::Memristor, MapScheme::Map1);
    auto m = map_for(Technology::Memristor, MapScheme::Map1);
    std::vector<double> x(8, 0.5);
    double prev = -1.0;
    for (double w = 0.0; w <= 1.0 + 1e-9; w += 0.1) {
        std::vector<DevicePair> pairs(8, map_weight(m, w));
        const double v = preactivation_noise_var(cfg, pairs, x);
        CHECK(v >= prev);
        prev = v;
    }
}

TEST_CASE("rho divides the noise power") {
    auto cfg1 = make_cfg(Technology::Eflash, MapScheme::Map2, 1.0);
    auto cfg2 = make_cfg(Technology::Eflash, MapScheme::Map2, 2.0);
    auto m = map_for(Technology::Eflash, MapScheme::Map2);
    std::vector<DevicePair> pairs(5, map_weight(m, 0.4));
    std::vector<double> x(5, 0.7);
    CHECK(preactivation_noise_var(cfg1, pairs, x) ==
          Catch::Approx(2.0 * preactivation_noise_var(cfg2, pairs, x)));
    auto bad = cfg1;
    bad.rho = 0.0;
    CHECK_THROWS_AS(preactivation_noise_var(bad, pairs, x), std::invalid_argument);
}

TEST_CASE("Monte-Carlo matches the analytic variance") {
    // scaled-up check is in the acceptance suite; spot-check here
    auto cfg = make_cfg(Technology::Eflash, MapScheme::Map1);
    auto m = map_for(Technology::Eflash, MapScheme::Map1);
    std::vector<DevicePair> pairs;
    std::vector<double> x;
    CounterRng rng(8, 1);
    for (int i = 0; i < 16; ++i) {
        pairs.push_back(map_weight(m, rng.uniform(i, -1.0, 1.0)));
        x.push_back(rng.uniform(50 + i));
    }
    const double var = preactivation_noise_var(cfg, pairs, x);
    double acc = 0.0;
    const int draws = 200000;
    for (int d = 0; d < draws; ++d) {
        const double s = sample_preactivation_noise(var, 99, 0, d, 0);
        acc += s * s;
    }
    CHECK(acc / draws == Catch::Approx(var).epsilon(0.02));
}

TEST_CASE("noise draws are deterministic and keyed by indices") {
    const double v = 1e-6;
    CHECK(sample_preactivation_noise(v, 1, 2, 3, 4) == sample_preactivation_noise(v, 1, 2, 3, 4));
    CHECK(sample_preactivation_noise(v, 1, 2, 3, 4) != sample_preactivation_noise(v, 1, 2, 3, 5));
    CHECK(sample_preactivation_noise(v, 1, 2, 3, 4) != sample_preactivation_noise(v, 2, 2, 3, 4));
    CHECK(sample_preactivation_noise(0.0, 1, 2, 3, 4) == 0.0);
}

TEST_CASE("energy_report") {
    auto rep = energy_report({1.0, 1.0, 1.0}, {10.0, 20.0, 30.0});
    CHECK(rep.total == Catch::Approx(60.0));
    CHECK(rep.baseline_total == Catch::Approx(60.0));
    auto rep2 = energy_report({2.0, 1.0, 1.0}, {10.0, 20.0, 30.0});
    CHECK(rep2.per_layer[0] == Catch::Approx(20.0));
    CHECK_THROWS_AS(energy_report({1.0}, {1.0, 2.0}), std::invalid_argument);
}

TEST_CASE("snr_optimize conserves energy and improves a separable instance") {
    // layer 0: huge and insensitive; layer 1: small and sensitive
    SnrProblem prob;
    prob.m = {100.0, 1.0};
    prob.rho = {1.0, 1.0};
    prob.drop_fn = [&](const std::vector<double>& rho) {
        return 0.0 / rho[0] + 5.0 / rho[1];  // only layer 1 matters
    };
    auto res = snr_optimize(prob, 2.0, 8);
    double total = 0.0;
    for (std::size_t l = 0; l < prob.m.size(); ++l) total += prob.m[l] * res.rho[l];
    CHECK(total == Catch::Approx(res.budget).epsilon(1e-9));
    CHECK(res.accepted_steps > 0);
    CHECK(res.rho[1] > 1.0);
    CHECK(res.rho[0] < 1.0);
    // trace is monotone non-increasing
    for (std::size_t i = 1; i < res.drop_trace.size(); ++i)
        CHECK(res.drop_trace[i] < res.drop_trace[i - 1]);
}

TEST_CASE("snr_optimize leaves a single layer unchanged") {
    SnrProblem prob;
    prob.m = {10.0};
    prob.rho = {1.0};
    prob.drop_fn = [](const std::vector<double>& rho) { return 1.0 / rho[0]; };
    auto res = snr_optimize(prob);
    CHECK(res.rho == std::vector<double>{1.0});
    CHECK(res.accepted_steps == 0);
}

TEST_CASE("snr_optimize never accepts a regression") {
    SnrProblem prob;
    prob.m = {1.0, 1.0};
    prob.rho = {1.0, 1.0};
    // symmetric: any move away from equal split hurts
    prob.drop_fn = [](const std::vector<double>& rho) { return 1.0 / rho[0] + 1.0 / rho[1]; };
    auto res = snr_optimize(prob, 2.0, 10);
    CHECK(res.accepted_steps == 0);
    CHECK(res.rho == prob.rho);
}

TEST_CASE("optimize_dynamic_range keeps only strict improvements") {
    // synthetic accuracy: layer 0 prefers a 10% clip, layer 1 prefers none
    auto acc = [](const std::vector<double>& clips) {
        double a = 0.5;
        a += clips[0] == 10.0 ? 0.2 : (clips[0] > 0.0 ? 0.05 : 0.0);
        a -= clips[1] > 0.0 ? 0.1 : 0.0;
        return a;
    };
    auto res = optimize_dynamic_range(2, acc);
    CHECK(res.clip_pct[0] == 10.0);
    CHECK(res.clip_pct[1] == 0.0);
    CHECK(res.accuracy == Catch::Approx(0.7));
    ClipSchedule sched;
    for (double c : res.clip_pct) {
        bool in_schedule = c == 0.0;
        for (double t : sched.thresholds_pct) in_schedule |= (c == t);
        CHECK(in_schedule);
    }
}

TEST_CASE("optimize_dynamic_range accepts nothing when clipping only hurts") {
    auto acc = [](const std::vector<double>& clips) {
        double a = 0.9;
        for (double c : clips) a -= c * 1e-3;
        return a;
    };
    auto res = optimize_dynamic_range(3, acc);
    for (double c : res.clip_pct) CHECK(c == 0.0);
    CHECK(res.accuracy == Catch::Approx(0.9));
}
