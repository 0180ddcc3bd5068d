#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>

#include "mixedsim/models.hpp"

namespace mixedsim {

enum class MapScheme { Map1, Map2 };

inline std::string to_string(MapScheme s) { return s == MapScheme::Map1 ? "map1" : "map2"; }

inline MapScheme scheme_from_string(const std::string& s) {
    if (s == "map1") return MapScheme::Map1;
    if (s == "map2") return MapScheme::Map2;
    throw std::invalid_argument("unknown mapping scheme: " + s);
}

// Weight-dependent floor/bias rule: max(clamp_low, intercept + slope * |w|/w_max).
struct StateOptRule {
    enum class Kind { Constant, LinearInAbsW };
    Kind kind = Kind::Constant;
    double intercept = 0.0;
    double slope = 0.0;
    double clamp_low = -std::numeric_limits<double>::infinity();
};

inline double eval_state_opt(const StateOptRule& rule, double w_norm) {
    if (!(w_norm >= 0.0 && w_norm <= 1.0)) throw std::domain_error("w_norm must be in [0, 1]");
    if (rule.kind == StateOptRule::Kind::Constant) return std::max(rule.clamp_low, rule.intercept);
    return std::max(rule.clamp_low, rule.intercept + rule.slope * w_norm);
}

// Differential-pair mapping of signed weights to device states.
// States are uS for memristors and nA for eFlash.
struct MappingConfig {
    MapScheme scheme = MapScheme::Map1;
    Technology technology = Technology::Memristor;
    double floor = 10.0;                     // G_min / I_min
    std::optional<StateOptRule> floor_rule;  // overrides floor when set (Map1)
    double range = 90.0;                     // dG_max / dI_max
    double bias = 55.0;                      // G_b / I_b
    std::optional<StateOptRule> bias_rule;   // overrides bias when set (Map2)
    double w_max = 1.0;

    double floor_for(double w_norm) const {
        return floor_rule ? eval_state_opt(*floor_rule, w_norm) : floor;
    }
    double bias_for(double w_norm) const {
        return bias_rule ? eval_state_opt(*bias_rule, w_norm) : bias;
    }
    void validate() const {
        if (!(range > 0.0)) throw std::invalid_argument("range must be > 0");
        if (!(w_max > 0.0)) throw std::invalid_argument("w_max must be > 0");
        if (scheme == MapScheme::Map1 && !floor_rule && floor < 0.0)
            throw std::invalid_argument("floor must be >= 0");
        if (scheme == MapScheme::Map2 && !bias_rule && bias < range / 2.0)
            throw std::invalid_argument("Map2 bias must be >= range/2");
    }
};

// Both legs of one weight; effective_floor records the floor/bias actually
// used so defective-pair retuning stays exact under weight-dependent rules.
struct DevicePair {
    double plus = 0.0;
    double minus = 0.0;
    double effective_floor = 0.0;  // floor for Map1, bias for Map2
};

inline DevicePair map_weight(const MappingConfig& cfg, double w) {
    if (!std::isfinite(w)) throw std::domain_error("non-finite weight");
    if (std::abs(w) > cfg.w_max * (1.0 + 1e-12))
        throw std::domain_error("|w| exceeds w_max (clip explicitly upstream)");
    const double w_norm = std::min(std::abs(w) / cfg.w_max, 1.0);
    DevicePair p;
    if (cfg.scheme == MapScheme::Map1) {
        const double floor = cfg.floor_for(w_norm);
        p.plus = floor + cfg.range * (std::abs(w) + w) / (2.0 * cfg.w_max);
        p.minus = floor + cfg.range * (std::abs(w) - w) / (2.0 * cfg.w_max);
        p.effective_floor = floor;
    } else {
        const double bias = cfg.bias_for(w_norm);
        p.plus = bias + cfg.range * w / (2.0 * cfg.w_max);
        p.minus = bias - cfg.range * w / (2.0 * cfg.w_max);
        p.effective_floor = bias;
    }
    return p;
}

// Shared inversion: both schemes satisfy plus - minus = range * w / w_max.
inline double unmap_pair(const MappingConfig& cfg, double plus, double minus) {
    if (!std::isfinite(plus) || !std::isfinite(minus))
        throw std::domain_error("non-finite device state");
    return (plus - minus) * cfg.w_max / cfg.range;
}

inline double unmap_pair(const MappingConfig& cfg, const DevicePair& p) {
    return unmap_pair(cfg, p.plus, p.minus);
}

}  // namespace mixedsim
