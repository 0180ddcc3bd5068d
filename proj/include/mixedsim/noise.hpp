#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "mixedsim/mapping.hpp"
#include "mixedsim/rng.hpp"

namespace mixedsim {

// Software-equivalent preactivation noise for one analog layer.
// rho is the energy scaler: it divides the noise power, so rho = 1 is
// the nominal operating point and larger rho buys less noise.
struct LayerNoiseConfig {
    Technology technology = Technology::Memristor;
    MapScheme scheme = MapScheme::Map1;
    double rho = 1.0;
    double alpha_m = 4.0 * 1.380649e-23 * 300.0 * 1e8;  // 4KTB0 at 300 K, 100 MHz
    double alpha_f = 2.0 * 1.602176634e-19 * 1e8;       // 2qB0 at 100 MHz
    double v_max = 0.1;          // V, memristor read amplitude
    double delta_g_max = 90.0;   // uS
    double i_max = 30.0;         // nA, eFlash full-scale state current
    double delta_i_max = 30.0;   // nA
    double x_max = 1.0;          // software activation range
    double w_max = 1.0;          // software weight range
    bool enabled = true;

    void validate() const {
        if (!(rho > 0.0)) throw std::invalid_argument("rho must be > 0");
        if (!(alpha_m > 0.0) || !(alpha_f > 0.0))
            throw std::invalid_argument("noise constants must be > 0");
        if (!(x_max > 0.0) || !(w_max > 0.0))
            throw std::invalid_argument("signal ranges must be > 0");
    }
};

// Variance of one neuron's software-referred preactivation noise.
// pairs hold device states in uS (memristor) or nA (eFlash); inputs are
// software activations in [0, x_max]. The memristor form is independent
// of the inputs; the eFlash form is linear in them.
inline double preactivation_noise_var(const LayerNoiseConfig& cfg,
                                      const std::vector<DevicePair>& pairs,
                                      const std::vector<double>& inputs) {
    cfg.validate();
    if (pairs.size() != inputs.size()) throw std::invalid_argument("pairs/inputs length mismatch");
    if (cfg.technology == Technology::Memristor) {
        double sum_cm_s = 0.0;
        for (const auto& p : pairs) sum_cm_s += (p.plus + p.minus) * 1e-6;
        const double scale = cfg.x_max * cfg.w_max / (cfg.v_max * cfg.delta_g_max * 1e-6);
        return cfg.alpha_m / cfg.rho * scale * scale * sum_cm_s;
    }
    const double i_max_a = cfg.i_max * 1e-9;
    double acc = 0.0;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const double x = inputs[i];
        if (x < 0.0 || x > cfg.x_max * (1.0 + 1e-12))
            throw std::domain_error("input outside [0, x_max]");
        const double ip = pairs[i].plus / cfg.i_max;
        const double im = pairs[i].minus / cfg.i_max;
        acc += x * ((ip + im) + ip * ip + im * im);
    }
    return cfg.alpha_f / cfg.rho * (cfg.x_max / i_max_a) * acc;
}

// One deterministic preactivation noise draw keyed by
// (seed, layer, sample, neuron); independent of evaluation parallelism.
inline double sample_preactivation_noise(double variance, std::uint64_t seed, std::uint64_t layer,
                                         std::uint64_t sample, std::uint64_t neuron) {
    if (variance <= 0.0) return 0.0;
    CounterRng rng(seed, rng_stream::kNoise + layer);
    const std::uint64_t counter = sample * 0x100000ULL + neuron;
    return rng.normal(counter, 0.0, std::sqrt(variance));
}

// --- layer-wise SNR (energy) allocation ------------------------------

// Per-layer energy is m_l * rho_l: op count times the energy scaler.
// The baseline has every rho_l = 1.
struct EnergyReport {
    std::vector<double> per_layer;
    double total = 0.0;
    double baseline_total = 0.0;
};

inline EnergyReport energy_report(const std::vector<double>& rho, const std::vector<double>& m) {
    if (rho.size() != m.size()) throw std::invalid_argument("rho/m length mismatch");
    EnergyReport rep;
    rep.per_layer.resize(rho.size());
    for (std::size_t i = 0; i < rho.size(); ++i) {
        if (!(rho[i] > 0.0)) throw std::invalid_argument("rho must be > 0");
        rep.per_layer[i] = m[i] * rho[i];
        rep.total += rep.per_layer[i];
        rep.baseline_total += m[i];
    }
    return rep;
}

struct SnrProblem {
    std::vector<double> m;    // per-layer op counts
    std::vector<double> rho;  // starting assignment (typically all 1)
    // deterministic accuracy-drop estimate for an assignment; lower is better
    std::function<double(const std::vector<double>&)> drop_fn;
};

struct SnrResult {
    std::vector<double> rho;
    std::vector<double> drop_trace;  // drop after each accepted step (front = initial)
    int accepted_steps = 0;
    double budget = 0.0;  // conserved total energy
};

// Greedy reallocation: repeatedly take energy from the layer that loses
// the least accuracy per unit energy freed (highest dE-/dd-) and share
// it among the layers that gain the most. Candidate donors are tried in
// ranking order; a step is kept only if the measured drop improves.
inline SnrResult snr_optimize(const SnrProblem& prob, double a = 2.0, int max_iters = 20) {
    if (!(a > 1.0)) throw std::invalid_argument("multiplier a must be > 1");
    const std::size_t n = prob.m.size();
    if (prob.rho.size() != n) throw std::invalid_argument("m/rho length mismatch");
    if (!prob.drop_fn) throw std::invalid_argument("missing drop function");
    constexpr double kEps = 1e-6;

    SnrResult res;
    res.rho = prob.rho;
    res.budget = 0.0;
    for (std::size_t l = 0; l < n; ++l) res.budget += prob.m[l] * res.rho[l];
    double cur_drop = prob.drop_fn(res.rho);
    res.drop_trace.push_back(cur_drop);
    if (n < 2) return res;  // no donor/recipient split possible

    for (int iter = 0; iter < max_iters; ++iter) {
        // probe every layer both ways
        std::vector<double> dd_minus(n), de_minus(n), dd_plus(n), de_plus(n);
        for (std::size_t l = 0; l < n; ++l) {
            std::vector<double> probe = res.rho;
            probe[l] = res.rho[l] / a;
            dd_minus[l] = std::max(prob.drop_fn(probe) - cur_drop, kEps);
            de_minus[l] = prob.m[l] * res.rho[l] * (1.0 - 1.0 / a);
            probe[l] = res.rho[l] * a;
            dd_plus[l] = std::max(cur_drop - prob.drop_fn(probe), 0.0);
            de_plus[l] = prob.m[l] * res.rho[l] * (a - 1.0);
        }
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
            return de_minus[x] / dd_minus[x] > de_minus[y] / dd_minus[y];
        });

        bool accepted = false;
        for (std::size_t donor : order) {
            // recipient shares: sensitivity-weighted, discounted by how
            // expensive each layer's own boost is
            double sum_dd = 0.0, sum_de = 0.0;
            for (std::size_t l = 0; l < n; ++l) {
                if (l == donor) continue;
                sum_dd += dd_plus[l];
                sum_de += de_plus[l];
            }
            std::vector<double> share(n, 0.0);
            double share_sum = 0.0;
            for (std::size_t l = 0; l < n; ++l) {
                if (l == donor) continue;
                const double w_dd = sum_dd > 0.0 ? dd_plus[l] / sum_dd : 0.0;
                const double w_de = de_plus[l] > 0.0 ? std::log10(sum_de / de_plus[l]) : 0.0;
                share[l] = w_dd * std::max(w_de, 0.0);
                share_sum += share[l];
            }
            if (share_sum <= 0.0) {
                // degenerate (e.g. exactly one recipient): split evenly
                for (std::size_t l = 0; l < n; ++l) share[l] = l == donor ? 0.0 : 1.0;
                share_sum = static_cast<double>(n - 1);
            }

            std::vector<double> cand = res.rho;
            cand[donor] = res.rho[donor] / a;
            const double freed = de_minus[donor];
            for (std::size_t l = 0; l < n; ++l) {
                if (l == donor) continue;
                const double e_new = prob.m[l] * res.rho[l] + freed * share[l] / share_sum;
                cand[l] = e_new / prob.m[l];
            }
            const double cand_drop = prob.drop_fn(cand);
            if (cand_drop < cur_drop) {
                res.rho = cand;
                cur_drop = cand_drop;
                res.drop_trace.push_back(cur_drop);
                ++res.accepted_steps;
                accepted = true;
                break;
            }
        }
        if (!accepted) break;
    }
    return res;
}

// --- dynamic-range (clipping) optimization ----------------------------

struct ClipSchedule {
    std::vector<double> thresholds_pct{2.0, 4.0, 5.0, 7.0, 10.0, 20.0, 30.0, 40.0};
    int rounds = 3;
};

struct ClipResult {
    std::vector<double> clip_pct;  // per layer; 0 = unclipped
    double accuracy = 0.0;
    std::vector<double> accuracy_trace;
};

// Progressive brute force: per round, per layer, try each threshold in
// ascending order and keep it only when validation accuracy strictly
// improves on the incumbent.
inline ClipResult optimize_dynamic_range(
    std::size_t layer_count, const std::function<double(const std::vector<double>&)>& accuracy_fn,
    const ClipSchedule& schedule = {}) {
    if (!accuracy_fn) throw std::invalid_argument("missing accuracy function");
    ClipResult res;
    res.clip_pct.assign(layer_count, 0.0);
    res.accuracy = accuracy_fn(res.clip_pct);
    res.accuracy_trace.push_back(res.accuracy);
    for (int round = 0; round < schedule.rounds; ++round) {
        for (std::size_t l = 0; l < layer_count; ++l) {
            for (double pct : schedule.thresholds_pct) {
                std::vector<double> cand = res.clip_pct;
                cand[l] = pct;
                const double acc = accuracy_fn(cand);
                if (acc > res.accuracy) {
                    res.clip_pct = cand;
                    res.accuracy = acc;
                    res.accuracy_trace.push_back(acc);
                }
            }
        }
    }
    return res;
}

}  // namespace mixedsim
