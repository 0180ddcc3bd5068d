#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "mixedsim/mapping.hpp"
#include "mixedsim/models.hpp"
#include "mixedsim/rng.hpp"

namespace mixedsim {

// Conductance matrix plus immutable per-device switching-threshold
// factors. All updates clamp into [g_lo, g_hi].
struct CrossbarState {
    int rows = 0;
    int cols = 0;
    std::vector<double> g;      // uS, row-major
    std::vector<double> alpha;  // multiplicative threshold factors
    double g_lo = 10.0;
    double g_hi = 100.0;

    double& at(int r, int c) { return g[static_cast<std::size_t>(r) * cols + c]; }
    double at(int r, int c) const { return g[static_cast<std::size_t>(r) * cols + c]; }
    double alpha_at(int r, int c) const { return alpha[static_cast<std::size_t>(r) * cols + c]; }
    void clamp(int r, int c) { at(r, c) = std::clamp(at(r, c), g_lo, g_hi); }
};

inline CrossbarState init_crossbar(int rows, int cols, double sigma_alpha, std::uint64_t seed,
                                   double g_lo = 10.0, double g_hi = 100.0) {
    if (rows < 1 || cols < 1) throw std::invalid_argument("crossbar must be at least 1x1");
    if (sigma_alpha < 0.0 || sigma_alpha >= 1.0)
        throw std::invalid_argument("sigma_alpha must be in [0, 1)");
    CrossbarState s;
    s.rows = rows;
    s.cols = cols;
    s.g_lo = g_lo;
    s.g_hi = g_hi;
    const std::size_t n = static_cast<std::size_t>(rows) * cols;
    s.g.resize(n);
    s.alpha.resize(n);
    CounterRng ginit(seed, rng_stream::kCrossbarInit);
    CounterRng arng(seed, rng_stream::kAlpha);
    for (std::size_t i = 0; i < n; ++i) {
        s.g[i] = std::clamp(ginit.normal(i, 36.25, 9.0), g_lo, g_hi);
        // truncate alpha to (0, inf) by resampling
        double a = arng.normal(i, 1.0, sigma_alpha);
        for (std::uint64_t attempt = 1; a <= 0.0; ++attempt)
            a = arng.normal(i + attempt * n, 1.0, sigma_alpha);
        s.alpha[i] = a;
    }
    return s;
}

enum class TuneApproach { Naive, Approach1, Approach2 };

inline std::string to_string(TuneApproach a) {
    switch (a) {
        case TuneApproach::Naive: return "naive";
        case TuneApproach::Approach1: return "approach1";
        case TuneApproach::Approach2: return "approach2";
    }
    throw std::logic_error("bad approach");
}

inline TuneApproach approach_from_string(const std::string& s) {
    if (s == "naive") return TuneApproach::Naive;
    if (s == "approach1") return TuneApproach::Approach1;
    if (s == "approach2") return TuneApproach::Approach2;
    throw std::invalid_argument("unknown tuning approach: " + s);
}

struct TuningConfig {
    double target_rel_error = 0.01;
    double v_start = 0.5;
    double v_step = 0.1;  // the half-select acceptance runs use 0.01
    double v_max_set = 2.0;
    double v_max_reset = 2.5;  // magnitude; reset pulses are negative
    int rounds = 10;
    int max_alternations = 5;
    int max_pulses_per_visit = 500;
    // Caps for rounds 2..rounds (round 1 is always naive); 0 disables the
    // polarity for that round. Used by Approach1/Approach2.
    std::vector<double> cap_schedule_set{2.2, 0.0, 2.1, 1.7, 1.5, 1.3, 1.1, 0.9, 0.7};
    std::vector<double> cap_schedule_reset{0.0, 2.2, 2.1, 1.7, 1.5, 1.3, 1.1, 0.9, 0.7};
    TuneApproach approach = TuneApproach::Naive;
    // Devices whose effective threshold exceeds this voltage are treated as
    // hard to switch: Approach2 parks them and re-encodes via the partner leg.
    // Defaults to the set-pulse compliance limit so only devices that cannot
    // be programmed at all take the partner path.
    double stiff_threshold_v = 2.0;
    bool rest_discharge = true;  // 100 us rest; no-op in this nonvolatile model

    void validate() const {
        if (rounds < 1) throw std::invalid_argument("rounds must be >= 1");
        if (approach != TuneApproach::Naive) {
            if (cap_schedule_set.size() != static_cast<std::size_t>(rounds - 1) ||
                cap_schedule_reset.size() != static_cast<std::size_t>(rounds - 1))
                throw std::invalid_argument("cap schedules must cover rounds 2..rounds");
        }
    }
};

struct TuneReport {
    std::vector<double> rel_error;  // per device, vs target at read
    std::vector<int> pulses;        // per device, total over all rounds
    int rounds_executed = 0;
    std::int64_t disturbance_events = 0;
};

// V/2 disturbance of every device sharing the selected row or column.
// v carries the pulse sign; returns the number of devices touched.
inline std::int64_t apply_half_select(CrossbarState& s, int row, int col, double v,
                                      const DeviceModelSet& models) {
    const SwitchingModel& m = v >= 0.0 ? models.set_model : models.reset_model;
    const double hv = v / 2.0;
    std::int64_t count = 0;
    for (int c = 0; c < s.cols; ++c) {
        if (c == col) continue;
        double& g = s.at(row, c);
        g = std::clamp(g * (1.0 + pulse_response(m, g, hv, s.alpha_at(row, c))), s.g_lo, s.g_hi);
        ++count;
    }
    for (int r = 0; r < s.rows; ++r) {
        if (r == row) continue;
        double& g = s.at(r, col);
        g = std::clamp(g * (1.0 + pulse_response(m, g, hv, s.alpha_at(r, col))), s.g_lo, s.g_hi);
        ++count;
    }
    return count;
}

namespace detail {

// Smallest amplitude on a 10 mV grid whose response at midrange
// conductance exceeds the verify resolution (relative 1e-3), at alpha=1.
// Per-device thresholds are this value divided by the device alpha.
inline double base_effective_threshold(const SwitchingModel& m, double g_mid = 36.25,
                                       double resolution = 1e-3, double v_limit = 5.0) {
    const double sign = m.polarity == Polarity::Set ? 1.0 : -1.0;
    for (double v = 0.01; v <= v_limit; v += 0.01) {
        if (std::abs(pulse_response(m, g_mid, sign * v, 1.0)) > resolution) return v;
    }
    return v_limit;
}

}  // namespace detail

// Write-verify on one device: ramp the amplitude from v_start, alternate
// polarity and re-initialize the amplitude whenever the target is passed.
// Every pulse disturbs the row/column neighbours via the V/2 rule.
// Caps of 0 skip that polarity (the device waits for an allowed one).
inline int write_verify_device(CrossbarState& s, int row, int col, double target_g,
                               const TuningConfig& cfg, const DeviceModelSet& models,
                               double cap_set = -1.0, double cap_reset = -1.0,
                               std::int64_t* disturbances = nullptr) {
    if (target_g < s.g_lo || target_g > s.g_hi)
        throw std::invalid_argument("target conductance out of bounds");
    if (cap_set < 0.0) cap_set = cfg.v_max_set;
    if (cap_reset < 0.0) cap_reset = cfg.v_max_reset;
    const double alpha = s.alpha_at(row, col);
    const double tol = cfg.target_rel_error;

    auto within = [&] { return std::abs(s.at(row, col) - target_g) / target_g <= tol; };
    if (within()) return 0;

    Polarity pol = s.at(row, col) < target_g ? Polarity::Set : Polarity::Reset;
    double v = cfg.v_start;
    int pulses = 0;
    int alternations = 0;
    while (pulses < cfg.max_pulses_per_visit) {
        const double limit =
            pol == Polarity::Set ? std::min(cap_set, cfg.v_max_set) : std::min(cap_reset, cfg.v_max_reset);
        if (limit <= 0.0) break;  // polarity disabled this round
        const double amp = std::min(v, limit);
        const double signed_v = pol == Polarity::Set ? amp : -amp;
        const SwitchingModel& m = pol == Polarity::Set ? models.set_model : models.reset_model;
        double& g = s.at(row, col);
        g = std::clamp(g * (1.0 + pulse_response(m, g, signed_v, alpha)), s.g_lo, s.g_hi);
        ++pulses;
        std::int64_t d = apply_half_select(s, row, col, signed_v, models);
        if (disturbances) *disturbances += d;
        if (within()) break;
        const bool passed = (pol == Polarity::Set && s.at(row, col) > target_g) ||
                            (pol == Polarity::Reset && s.at(row, col) < target_g);
        if (passed) {
            pol = pol == Polarity::Set ? Polarity::Reset : Polarity::Set;
            v = cfg.v_start;
            if (++alternations >= cfg.max_alternations) break;
        } else {
            v += cfg.v_step;
        }
    }
    return pulses;
}

// Optional differential-pair view of the crossbar: column 2j/2j+1 are the
// plus/minus legs of weight (r, j). Approach2 re-encodes through it.
struct PairEncoding {
    MappingConfig cfg;
    std::vector<double> weights;  // rows x cols/2, row-major
};

inline TuneReport tune_crossbar(CrossbarState& s, const std::vector<double>& targets,
                                const TuningConfig& cfg, const DeviceModelSet& models,
                                const PairEncoding* pairs = nullptr) {
    cfg.validate();
    const std::size_t n = static_cast<std::size_t>(s.rows) * s.cols;
    if (targets.size() != n) throw std::invalid_argument("targets shape mismatch");
    for (double t : targets)
        if (t < s.g_lo || t > s.g_hi) throw std::invalid_argument("target out of bounds");
    if (pairs) {
        if (s.cols % 2 != 0) throw std::invalid_argument("pair encoding needs even column count");
        if (pairs->weights.size() != n / 2) throw std::invalid_argument("pair weights shape mismatch");
    }

    TuneReport rep;
    rep.pulses.assign(n, 0);
    std::vector<double> tgt = targets;

    const double thr_set = detail::base_effective_threshold(models.set_model);
    const double thr_reset = detail::base_effective_threshold(models.reset_model);

    // Approach2 pre-pass: park hard-to-switch devices at the extreme they can
    // still reach with their working polarity, so every later correction for
    // the pair flows through the partner leg. Devices stiff in both
    // polarities are left where they are.
    if (cfg.approach == TuneApproach::Approach2) {
        for (int r = 0; r < s.rows; ++r) {
            for (int c = 0; c < s.cols; ++c) {
                const double a = s.alpha_at(r, c);
                const bool set_stiff = thr_set / a > cfg.stiff_threshold_v;
                const bool reset_stiff = thr_reset / a > cfg.stiff_threshold_v;
                if (set_stiff == reset_stiff) continue;
                rep.pulses[static_cast<std::size_t>(r) * s.cols + c] += write_verify_device(
                    s, r, c, set_stiff ? s.g_lo : s.g_hi, cfg, models, -1.0, -1.0,
                    &rep.disturbance_events);
            }
        }
    }

    for (int round = 1; round <= cfg.rounds; ++round) {
        double cap_set = -1.0, cap_reset = -1.0;
        if (cfg.approach != TuneApproach::Naive && round >= 2) {
            cap_set = cfg.cap_schedule_set[static_cast<std::size_t>(round - 2)];
            cap_reset = cfg.cap_schedule_reset[static_cast<std::size_t>(round - 2)];
        }
        for (int r = 0; r < s.rows; ++r) {
            for (int c = 0; c < s.cols; ++c) {
                const std::size_t idx = static_cast<std::size_t>(r) * s.cols + c;
                int target_col = c;
                std::size_t target_idx = idx;
                if (cfg.approach == TuneApproach::Approach2 && pairs) {
                    // If this device needs a pulse above the round's cap,
                    // retune its differential partner to encode the weight.
                    const double g = s.at(r, c);
                    const double t = tgt[idx];
                    const double tol_band = cfg.target_rel_error * t;
                    if (std::abs(g - t) > tol_band) {
                        const Polarity need = g < t ? Polarity::Set : Polarity::Reset;
                        const double a = s.alpha_at(r, c);
                        const double eff_thr = (need == Polarity::Set ? thr_set : thr_reset) / a;
                        // Re-encode only devices that cannot be programmed in
                        // the needed direction at any allowed voltage; the
                        // device's own state is accepted as-is and the partner
                        // absorbs the difference, so the pair still encodes w.
                        // Cap-limited (but not stiff) devices simply wait for a
                        // round whose cap admits them.
                        if (eff_thr > cfg.stiff_threshold_v) {
                            const int pc = c ^ 1;  // partner leg
                            const std::size_t pidx = static_cast<std::size_t>(r) * s.cols + pc;
                            const double w = pairs->weights[idx / 2];
                            const double delta = pairs->cfg.range * w / pairs->cfg.w_max;
                            // plus leg sits at even columns
                            double want = (c % 2 == 0) ? s.at(r, c) - delta : s.at(r, c) + delta;
                            tgt[idx] = g;
                            tgt[pidx] = std::clamp(want, s.g_lo, s.g_hi);
                            target_col = pc;
                            target_idx = pidx;
                        }
                    }
                }
                rep.pulses[target_idx] +=
                    write_verify_device(s, r, target_col, tgt[target_idx], cfg, models, cap_set,
                                        cap_reset, &rep.disturbance_events);
            }
        }
        rep.rounds_executed = round;
    }

    rep.rel_error.resize(n);
    for (std::size_t i = 0; i < n; ++i) rep.rel_error[i] = (s.g[i] - tgt[i]) / tgt[i];
    return rep;
}

struct ErrorStats {
    double mean = 0.0;
    double stddev = 0.0;
    double p10 = 0.0, p50 = 0.0, p90 = 0.0, p99 = 0.0;  // of |error|
    double tail_fraction = 0.0;                         // |error| > threshold
    double threshold = 0.05;
    std::size_t count = 0;
};

inline double quantile_sorted(const std::vector<double>& sorted, double q) {
    if (sorted.empty()) return 0.0;
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
}

inline ErrorStats tuning_error_stats(const CrossbarState& s, const std::vector<double>& targets,
                                     double tail_threshold = 0.05) {
    const std::size_t n = static_cast<std::size_t>(s.rows) * s.cols;
    if (targets.size() != n) throw std::invalid_argument("targets shape mismatch");
    ErrorStats st;
    st.threshold = tail_threshold;
    st.count = n;
    std::vector<double> abs_err(n);
    double sum = 0.0, sum2 = 0.0;
    std::size_t tail = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double e = (s.g[i] - targets[i]) / targets[i];
        sum += e;
        sum2 += e * e;
        abs_err[i] = std::abs(e);
        if (abs_err[i] > tail_threshold) ++tail;
    }
    st.mean = sum / static_cast<double>(n);
    st.stddev = std::sqrt(std::max(0.0, sum2 / static_cast<double>(n) - st.mean * st.mean));
    std::sort(abs_err.begin(), abs_err.end());
    st.p10 = quantile_sorted(abs_err, 0.10);
    st.p50 = quantile_sorted(abs_err, 0.50);
    st.p90 = quantile_sorted(abs_err, 0.90);
    st.p99 = quantile_sorted(abs_err, 0.99);
    st.tail_fraction = static_cast<double>(tail) / static_cast<double>(n);
    return st;
}

// (|error|, cumulative fraction) pairs; non-decreasing, ends at 1.
inline std::vector<std::pair<double, double>> error_cdf(const CrossbarState& s,
                                                        const std::vector<double>& targets) {
    const std::size_t n = static_cast<std::size_t>(s.rows) * s.cols;
    std::vector<double> abs_err(n);
    for (std::size_t i = 0; i < n; ++i) abs_err[i] = std::abs((s.g[i] - targets[i]) / targets[i]);
    std::sort(abs_err.begin(), abs_err.end());
    std::vector<std::pair<double, double>> cdf(n);
    for (std::size_t i = 0; i < n; ++i)
        cdf[i] = {abs_err[i], static_cast<double>(i + 1) / static_cast<double>(n)};
    return cdf;
}

// Deterministic smooth pseudo-image target field (stands in for the
// grayscale portrait used in the hardware experiments).
inline std::vector<double> pseudo_image_targets(int rows, int cols, std::uint64_t seed,
                                                double lo = 10.0, double hi = 100.0,
                                                int gray_levels = 64) {
    CounterRng rng(seed, rng_stream::kTargets);
    const int bumps = 12;
    std::vector<double> cx(bumps), cy(bumps), sx(bumps), amp(bumps);
    for (int b = 0; b < bumps; ++b) {
        cx[b] = rng.uniform(4 * b + 0) * rows;
        cy[b] = rng.uniform(4 * b + 1) * cols;
        sx[b] = 0.08 * std::max(rows, cols) * (0.5 + rng.uniform(4 * b + 2));
        amp[b] = 2.0 * rng.uniform(4 * b + 3) - 1.0;
    }
    std::vector<double> f(static_cast<std::size_t>(rows) * cols);
    double fmin = 1e300, fmax = -1e300;
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            double v = 0.0;
            for (int b = 0; b < bumps; ++b) {
                const double dx = r - cx[b], dy = c - cy[b];
                v += amp[b] * std::exp(-(dx * dx + dy * dy) / (2.0 * sx[b] * sx[b]));
            }
            f[static_cast<std::size_t>(r) * cols + c] = v;
            fmin = std::min(fmin, v);
            fmax = std::max(fmax, v);
        }
    }
    const double span = fmax > fmin ? fmax - fmin : 1.0;
    for (double& v : f) {
        double u = (v - fmin) / span;
        u = std::round(u * (gray_levels - 1)) / (gray_levels - 1);
        v = lo + u * (hi - lo);
    }
    return f;
}

}  // namespace mixedsim
