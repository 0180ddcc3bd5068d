#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "mixedsim/mapping.hpp"
#include "mixedsim/rng.hpp"

namespace mixedsim {

enum class FaultKind : std::uint8_t { Healthy, StuckHigh, StuckLow, StuckRandom };

struct FaultTag {
    FaultKind kind = FaultKind::Healthy;
    double g_x = 0.0;  // stuck value for StuckRandom
};

struct FaultMap {
    std::vector<FaultTag> tags;
    double ppm = 0.0;
    std::uint64_t seed = 0;

    std::size_t faulty_count() const {
        std::size_t n = 0;
        for (const auto& t : tags)
            if (t.kind != FaultKind::Healthy) ++n;
        return n;
    }
};

// Each device is independently faulty with probability ppm * 1e-6; the
// fault kind follows the (high, low, random) mix.
inline FaultMap inject_faults(std::size_t device_count, double ppm, double frac_high,
                              double frac_low, double frac_random, std::uint64_t seed,
                              double g_lo, double g_hi) {
    if (ppm < 0.0 || ppm > 1e6) throw std::invalid_argument("ppm must be in [0, 1e6]");
    if (std::abs(frac_high + frac_low + frac_random - 1.0) > 1e-9)
        throw std::invalid_argument("fault mix must sum to 1");
    FaultMap map;
    map.ppm = ppm;
    map.seed = seed;
    map.tags.resize(device_count);
    CounterRng rng(seed, rng_stream::kFaults);
    const double p = ppm * 1e-6;
    for (std::size_t i = 0; i < device_count; ++i) {
        if (rng.uniform(3 * i) >= p) continue;
        const double kind = rng.uniform(3 * i + 1);
        if (kind < frac_high) {
            map.tags[i].kind = FaultKind::StuckHigh;
        } else if (kind < frac_high + frac_low) {
            map.tags[i].kind = FaultKind::StuckLow;
        } else {
            map.tags[i].kind = FaultKind::StuckRandom;
            map.tags[i].g_x = g_lo + (g_hi - g_lo) * rng.uniform(3 * i + 2);
        }
    }
    return map;
}

enum class FaultLeg { Plus, Minus };

struct RetuneResult {
    bool uncompensatable = false;
    DevicePair pair;
    double realized_weight = 0.0;
};

// Retune the healthy leg of a defective pair so the differential weight
// error is minimized. The fault kind decides the closed-form target; the
// stuck-random form is clipped into bounds.
inline RetuneResult pair_retune(const MappingConfig& cfg, double w, FaultLeg faulty_leg,
                                FaultKind kind, double g_x, double g_lo, double g_hi) {
    if (kind == FaultKind::Healthy) throw std::invalid_argument("leg is not faulty");
    RetuneResult out;
    const double span = cfg.range / cfg.w_max;
    const bool plus_faulty = faulty_leg == FaultLeg::Plus;
    double stuck = 0.0;
    double healthy = 0.0;
    switch (kind) {
        case FaultKind::StuckHigh:
            stuck = g_hi;
            // healthy leg target: G_max -/+ dG_max (W +/- |W|) / 2 w_max
            healthy = plus_faulty ? g_hi - span * (w + std::abs(w)) / 2.0
                                  : g_hi + span * (w - std::abs(w)) / 2.0;
            break;
        case FaultKind::StuckLow:
            stuck = g_lo;
            healthy = plus_faulty ? g_lo + span * (std::abs(w) - w) / 2.0
                                  : g_lo + span * (std::abs(w) + w) / 2.0;
            break;
        case FaultKind::StuckRandom:
            stuck = g_x;
            healthy = plus_faulty ? g_x - span * w : g_x + span * w;
            break;
        default:
            throw std::logic_error("unreachable");
    }
    healthy = std::clamp(healthy, g_lo, g_hi);
    out.pair.plus = plus_faulty ? stuck : healthy;
    out.pair.minus = plus_faulty ? healthy : stuck;
    out.realized_weight = unmap_pair(cfg, out.pair);
    return out;
}

inline RetuneResult pair_retune_both_faulty() {
    RetuneResult out;
    out.uncompensatable = true;
    return out;
}

// Additive per-neuron compensation for the residual fault error of one
// dense kernel. The constant is realized by an extra device pair driven
// at the maximum-range input; whatever the pair cannot represent goes
// into the batch-norm bias and is flagged.
struct CompensationColumn {
    std::vector<double> comp_weight;    // per neuron, additive constant / x_drive
    std::vector<DevicePair> pairs;      // states realizing comp_weight
    std::vector<double> bn_bias_delta;  // remainder folded into batch norm
    std::vector<bool> overflow;         // true where the pair saturated
    double x_drive = 1.0;
};

// weights are out x in row-major; calib_inputs is batch x in row-major.
inline CompensationColumn compensate_average_error(const std::vector<double>& clean_weights,
                                                   const std::vector<double>& faulty_weights,
                                                   std::size_t out_dim, std::size_t in_dim,
                                                   const std::vector<double>& calib_inputs,
                                                   std::size_t batch, const MappingConfig& cfg,
                                                   double x_drive) {
    if (batch == 0) throw std::invalid_argument("calibration batch must be nonempty");
    if (clean_weights.size() != out_dim * in_dim || faulty_weights.size() != out_dim * in_dim ||
        calib_inputs.size() != batch * in_dim)
        throw std::invalid_argument("shape mismatch");
    CompensationColumn col;
    col.x_drive = x_drive;
    col.comp_weight.assign(out_dim, 0.0);
    col.bn_bias_delta.assign(out_dim, 0.0);
    col.overflow.assign(out_dim, false);
    col.pairs.resize(out_dim);
    for (std::size_t j = 0; j < out_dim; ++j) {
        double shift = 0.0;
        for (std::size_t s = 0; s < batch; ++s) {
            double acc = 0.0;
            for (std::size_t i = 0; i < in_dim; ++i)
                acc += calib_inputs[s * in_dim + i] *
                       (faulty_weights[j * in_dim + i] - clean_weights[j * in_dim + i]);
            shift += acc;
        }
        shift /= static_cast<double>(batch);
        const double needed_w = -shift / x_drive;
        const double w = std::clamp(needed_w, -cfg.w_max, cfg.w_max);
        col.comp_weight[j] = w;
        col.pairs[j] = map_weight(cfg, w);
        const double remainder = -(shift + w * x_drive);
        if (std::abs(needed_w) > cfg.w_max) {
            col.bn_bias_delta[j] = remainder;
            col.overflow[j] = true;
        }
    }
    return col;
}

}  // namespace mixedsim
