#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mixedsim/mapping.hpp"
#include "mixedsim/models.hpp"
#include "mixedsim/network.hpp"

namespace mixedsim {

// Triangular training-temperature schedule: 25,35,...,95,85,...,35, one
// value per batch, repeating with period 14.
struct TempSchedule {
    double t_low = 25.0;
    double t_high = 95.0;
    double step = 10.0;

    double at(int batch_index) const {
        const int up = static_cast<int>(std::round((t_high - t_low) / step));  // 7
        const int period = 2 * up;
        int k = batch_index % period;
        if (k > up) k = period - k;
        return t_low + step * k;
    }
};

// map -> shift both legs -> unmap, per weight; the identity at t0.
inline std::vector<double> temp_perturb_weights(const std::vector<double>& weights,
                                                const MappingConfig& cfg,
                                                const TemperatureModel& model, double t,
                                                double state_hi) {
    std::vector<double> out(weights.size());
    for (std::size_t i = 0; i < weights.size(); ++i) {
        const double wv = std::clamp(weights[i], -cfg.w_max, cfg.w_max);
        DevicePair p = map_weight(cfg, wv);
        auto shift_leg = [&](double g) {
            double w0 = g / state_hi;
            if (model.technology == Technology::Memristor)
                w0 = std::clamp(w0, 1e-3, 1.0);
            else
                w0 = std::clamp(w0, 0.0, 1.0);
            return g * (1.0 + temp_weight_shift(model, w0, t));
        };
        p.plus = shift_leg(p.plus);
        p.minus = shift_leg(p.minus);
        out[i] = unmap_pair(cfg, p);
    }
    return out;
}

// Perturb every weight layer of `effective` at temperature t using the
// per-layer analog configs (the master stays untouched).
inline void temp_perturb_network(const Network& master, Network& effective,
                                 const std::vector<AnalogLayer>& analog, double t) {
    int wl = 0;
    for (std::size_t li = 0; li < effective.layers.size(); ++li) {
        std::vector<double>* w = nullptr;
        const std::vector<double>* mw = nullptr;
        if (auto* d = std::get_if<DenseLayer>(&effective.layers[li])) {
            w = &d->w;
            mw = &std::get<DenseLayer>(master.layers[li]).w;
        }
        if (auto* c = std::get_if<ConvLayer>(&effective.layers[li])) {
            w = &c->w;
            mw = &std::get<ConvLayer>(master.layers[li]).w;
        }
        if (!w) continue;
        const AnalogLayer& al = analog[wl];
        *w = temp_perturb_weights(*mw, al.mapping, al.models.temperature, t, al.state_hi);
        ++wl;
    }
}

// Approach 1: temperature-sweep training. Each batch's forward/backward
// runs on weights perturbed at the schedule's temperature; gradients
// land on the master weights (straight-through).
inline TrainHistory train_with_temp_sweep(Network& net, const Dataset& train_ds,
                                          const Dataset& val_ds, const TrainConfig& base_cfg,
                                          const std::vector<AnalogLayer>& analog,
                                          const TempSchedule& schedule = {}) {
    TrainConfig cfg = base_cfg;
    cfg.perturb_hook = [&analog, schedule](int batch, const Network& master, Network& eff) {
        temp_perturb_network(master, eff, analog, schedule.at(batch));
    };
    return train(net, train_ds, val_ds, cfg);
}

// Approach 2: k-reference batch normalization bank.
struct BnBank {
    std::vector<double> reference_temps;  // ascending
    // per reference: all BN layers' parameters, concatenated in layer order
    std::vector<std::vector<std::vector<double>>> gamma, beta, run_mean, run_var;
};

inline std::vector<double> uniform_references(int k, double t_low = 25.0, double t_high = 100.0) {
    if (k < 1) throw std::invalid_argument("k must be >= 1");
    std::vector<double> refs;
    if (k == 1) {
        refs.push_back(t_low);
        return refs;
    }
    for (int i = 0; i < k; ++i)
        refs.push_back(t_low + (t_high - t_low) * i / static_cast<double>(k - 1));
    return refs;
}

// One epoch of BN-only retraining at each reference temperature, with
// weights perturbed to that temperature; master weights untouched.
inline BnBank calibrate_bn_bank(const Network& net, const Dataset& train_ds,
                                const Dataset& val_ds, const std::vector<AnalogLayer>& analog,
                                const std::vector<double>& reference_temps,
                                std::uint64_t seed = 1) {
    BnBank bank;
    bank.reference_temps = reference_temps;
    for (double t_ref : reference_temps) {
        Network copy = net;
        TrainConfig cfg;
        cfg.use_adam = false;
        cfg.lr = 0.001;
        cfg.momentum = 0.9;
        cfg.epochs = 1;
        cfg.batch_size = 32;
        cfg.seed = seed;
        cfg.bn_only = true;
        cfg.perturb_hook = [&analog, t_ref](int, const Network& master, Network& eff) {
            temp_perturb_network(master, eff, analog, t_ref);
        };
        train(copy, train_ds, val_ds, cfg);
        std::vector<std::vector<double>> g, b, rm, rv;
        for (const auto& l : copy.layers) {
            if (const auto* bn = std::get_if<BatchNormLayer>(&l)) {
                g.push_back(bn->gamma);
                b.push_back(bn->beta);
                rm.push_back(bn->run_mean);
                rv.push_back(bn->run_var);
            }
        }
        bank.gamma.push_back(std::move(g));
        bank.beta.push_back(std::move(b));
        bank.run_mean.push_back(std::move(rm));
        bank.run_var.push_back(std::move(rv));
    }
    return bank;
}

// Nearest reference; ties go to the lower reference.
inline std::size_t select_bn(const BnBank& bank, double t) {
    if (!std::isfinite(t)) throw std::domain_error("non-finite temperature");
    if (bank.reference_temps.empty()) throw std::invalid_argument("empty bank");
    std::size_t best = 0;
    double best_d = std::abs(t - bank.reference_temps[0]);
    for (std::size_t i = 1; i < bank.reference_temps.size(); ++i) {
        const double d = std::abs(t - bank.reference_temps[i]);
        if (d < best_d) {
            best = i;
            best_d = d;
        }
    }
    return best;
}

inline void apply_bn_bank(Network& net, const BnBank& bank, double t) {
    const std::size_t r = select_bn(bank, t);
    std::size_t slot = 0;
    for (auto& l : net.layers) {
        if (auto* bn = std::get_if<BatchNormLayer>(&l)) {
            bn->gamma = bank.gamma[r][slot];
            bn->beta = bank.beta[r][slot];
            bn->run_mean = bank.run_mean[r][slot];
            bn->run_var = bank.run_var[r][slot];
            ++slot;
        }
    }
}

// Approach 3: mapping-state optimization against the worst-case relative
// weight error over temperature.
struct StateOptConfig {
    double t0 = 25.0;
    double t_max = 100.0;
    double t_step = 5.0;
    double eps_plus = 0.01;
    int w_points = 100;
    // feasibility caps (explicit config; infinite = unconstrained)
    double max_state = std::numeric_limits<double>::infinity();
    double max_common_mode = std::numeric_limits<double>::infinity();
};

// relative weight error after map -> drift at T -> unmap
inline double relative_weight_error(const MappingConfig& cfg, const TemperatureModel& model,
                                    double w_norm, double t, double state_hi) {
    const std::vector<double> w{w_norm * cfg.w_max};
    const std::vector<double> shifted = temp_perturb_weights(w, cfg, model, t, state_hi);
    return shifted[0] / (w_norm * cfg.w_max) - 1.0;
}

// C(candidate) = max over the temperature grid of the trapezoid integral
// of |E_r(W, T)| over normalized W in [eps_plus, 1].
inline double state_opt_cost(const MappingConfig& cfg, const TemperatureModel& model,
                             const StateOptConfig& opt, double state_hi) {
    double worst = 0.0;
    for (double t = opt.t0; t <= opt.t_max + 1e-9; t += opt.t_step) {
        double integral = 0.0;
        double prev = std::abs(relative_weight_error(cfg, model, opt.eps_plus, t, state_hi));
        const double dw = (1.0 - opt.eps_plus) / (opt.w_points - 1);
        for (int i = 1; i < opt.w_points; ++i) {
            const double wn = opt.eps_plus + dw * i;
            const double cur = std::abs(relative_weight_error(cfg, model, wn, t, state_hi));
            integral += 0.5 * (prev + cur) * dw;
            prev = cur;
        }
        worst = std::max(worst, integral);
    }
    return worst;
}

struct StateOptCandidate {
    MappingConfig cfg;
    double state_hi = 0.0;
};

struct StateOptResult {
    MappingConfig chosen;
    double cost = 0.0;
    StateOptRule rule;  // per-|w| optimal floor/bias fitted to a line
    std::vector<double> cost_heatmap;  // one entry per candidate (inf = infeasible)
};

// Energy proxy for the tie-break: the pair's common mode at |w| = w_max.
inline double candidate_energy(const MappingConfig& cfg) {
    DevicePair p = map_weight(cfg, cfg.w_max);
    return p.plus + p.minus;
}

inline StateOptResult state_opt_search(const std::vector<StateOptCandidate>& candidates,
                                       const TemperatureModel& model,
                                       const StateOptConfig& opt = {}) {
    if (candidates.empty()) throw std::invalid_argument("empty candidate grid");
    StateOptResult res;
    res.cost_heatmap.assign(candidates.size(), std::numeric_limits<double>::infinity());
    double best_cost = std::numeric_limits<double>::infinity();
    double best_energy = std::numeric_limits<double>::infinity();
    std::size_t best_idx = candidates.size();
    std::vector<std::string> violations;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        const auto& c = candidates[i];
        c.cfg.validate();
        DevicePair hi = map_weight(c.cfg, c.cfg.w_max);
        const double peak = std::max(hi.plus, hi.minus);
        if (peak > opt.max_state) {
            violations.push_back("candidate " + std::to_string(i) + ": state exceeds max_state");
            continue;
        }
        if (hi.plus + hi.minus > opt.max_common_mode) {
            violations.push_back("candidate " + std::to_string(i) +
                                 ": common mode exceeds max_common_mode");
            continue;
        }
        const double cost = state_opt_cost(c.cfg, model, opt, c.state_hi);
        res.cost_heatmap[i] = cost;
        const double energy = candidate_energy(c.cfg);
        if (cost < best_cost - 1e-15 ||
            (std::abs(cost - best_cost) <= 1e-15 && energy < best_energy)) {
            best_cost = cost;
            best_energy = energy;
            best_idx = i;
        }
    }
    if (best_idx == candidates.size()) {
        std::string msg = "no feasible state-optimization candidate";
        for (const auto& v : violations) msg += "; " + v;
        throw std::runtime_error(msg);
    }
    res.chosen = candidates[best_idx].cfg;
    res.cost = best_cost;

    // Per-|w| quasi-optimal floor (Map1) / bias (Map2): scan a value grid
    // minimizing the worst |E_r| over temperature at each w, then fit a
    // line over |w|/w_max.
    const MappingConfig& base = res.chosen;
    const double state_hi = candidates[best_idx].state_hi;
    const int wn_points = 11;
    std::vector<double> xs, ys;
    const double lo = 0.0;
    const double hi_val = base.scheme == MapScheme::Map1
                              ? std::max(state_hi - base.range, base.floor * 2.0)
                              : state_hi - base.range / 2.0;
    for (int i = 0; i < wn_points; ++i) {
        const double wn = opt.eps_plus + (1.0 - opt.eps_plus) * i / (wn_points - 1);
        double best_v = base.scheme == MapScheme::Map1 ? base.floor : base.bias;
        double best_e = std::numeric_limits<double>::infinity();
        const double vmin = base.scheme == MapScheme::Map2 ? base.range / 2.0 : lo;
        for (double v = vmin; v <= hi_val + 1e-9; v += std::max((hi_val - vmin) / 40.0, 1e-6)) {
            MappingConfig c = base;
            if (base.scheme == MapScheme::Map1)
                c.floor = v;
            else
                c.bias = v;
            double worst = 0.0;
            for (double t = opt.t0; t <= opt.t_max + 1e-9; t += opt.t_step)
                worst = std::max(worst,
                                 std::abs(relative_weight_error(c, model, wn, t, state_hi)));
            if (worst < best_e) {
                best_e = worst;
                best_v = v;
            }
        }
        xs.push_back(wn);
        ys.push_back(best_v);
    }
    // least-squares line
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    const double n = static_cast<double>(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
        sx += xs[i];
        sy += ys[i];
        sxx += xs[i] * xs[i];
        sxy += xs[i] * ys[i];
    }
    const double denom = n * sxx - sx * sx;
    res.rule.kind = StateOptRule::Kind::LinearInAbsW;
    res.rule.slope = denom != 0.0 ? (n * sxy - sx * sy) / denom : 0.0;
    res.rule.intercept = (sy - res.rule.slope * sx) / n;
    res.rule.clamp_low = base.scheme == MapScheme::Map1 ? 0.0 : base.range / 2.0;
    return res;
}

}  // namespace mixedsim
