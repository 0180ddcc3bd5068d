#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace mixedsim {

enum class Technology { Memristor, Eflash };

inline std::string to_string(Technology t) {
    return t == Technology::Memristor ? "memristor" : "eflash";
}

inline Technology technology_from_string(const std::string& s) {
    if (s == "memristor") return Technology::Memristor;
    if (s == "eflash") return Technology::Eflash;
    throw std::invalid_argument("unknown technology: " + s);
}

namespace detail {
inline void require_finite(double x, const char* what) {
    if (!std::isfinite(x)) throw std::domain_error(std::string("non-finite ") + what);
}
}  // namespace detail

// Relative weight shift vs temperature, (T - T0) times a per-technology
// polynomial in the normalized weight (and T itself for eFlash).
// Coefficients: memristor {p00, p10, p20, p30}; eflash {p00, p10, p01, p20, p11, p21}.
struct TemperatureModel {
    Technology technology = Technology::Memristor;
    std::vector<double> coeff;
    double t0 = 25.0;
    double i_max_na = 30.0;  // eFlash peripheral state the fit belongs to

    std::size_t expected_coeffs() const {
        return technology == Technology::Memristor ? 4u : 6u;
    }
};

// Per-unit shift (divide displayed percentages by 100).
inline double temp_weight_shift(const TemperatureModel& m, double w0, double t) {
    detail::require_finite(w0, "w0");
    detail::require_finite(t, "t");
    if (m.coeff.size() != m.expected_coeffs())
        throw std::invalid_argument("temperature model coefficient count mismatch");
    if (t < 0.0 || t > 120.0) throw std::domain_error("temperature out of [0, 120] C");
    if (m.technology == Technology::Memristor) {
        if (w0 <= 0.0 || w0 > 1.0) throw std::domain_error("memristor w0 must be in (0, 1]");
        const double p = m.coeff[0] + m.coeff[1] / w0 + m.coeff[2] * w0 * w0 +
                         m.coeff[3] * w0 * w0 * w0;
        return (t - m.t0) * p;
    }
    if (w0 < 0.0 || w0 > 1.0) throw std::domain_error("eflash w0 must be in [0, 1]");
    const double p = m.coeff[0] + m.coeff[1] * w0 + m.coeff[2] * t + m.coeff[3] * w0 * w0 +
                     m.coeff[4] * t * w0 + m.coeff[5] * w0 * w0 * t;
    return (t - m.t0) * p;
}

// Static nonlinearity error of one synaptic product, zero at x = 0 and
// x = x_tune. Coefficients: memristor {p01, p03, p10, p20, p30};
// eflash adds {p11, p22}. Memristor w is the device conductance in uS,
// eflash w is the normalized state.
struct NonlinearityModel {
    Technology technology = Technology::Memristor;
    std::vector<double> coeff;
    double x_tune = 0.6;
    double x_max = 0.1;  // V for memristor, nA for eFlash

    std::size_t expected_coeffs() const {
        return technology == Technology::Memristor ? 5u : 7u;
    }
};

inline double nl_error(const NonlinearityModel& m, double w, double x) {
    detail::require_finite(w, "w");
    detail::require_finite(x, "x");
    if (m.coeff.size() != m.expected_coeffs())
        throw std::invalid_argument("nonlinearity model coefficient count mismatch");
    if (x < 0.0 || x > 1.0) throw std::domain_error("x must be in [0, 1]");
    const double w2 = w * w;
    double poly = m.coeff[0] * x + m.coeff[1] * x * x * x + m.coeff[2] * w + m.coeff[3] * w2 +
                  m.coeff[4] * w2 * w;
    if (m.technology == Technology::Eflash) poly += m.coeff[5] * x * w + m.coeff[6] * x * x * w2;
    return x * (x - m.x_tune) * poly;
}

enum class Polarity { Set, Reset };

// Relative conductance change per pulse. Set models take v > 0, reset
// models take v < 0 (no internal sign flip); alpha scales the effective
// pulse amplitude per device.
struct SwitchingModel {
    Polarity polarity = Polarity::Set;
    std::array<double, 3> beta{};
    std::array<double, 3> gamma{};
    double pulse_width_ms = 2.0;
};

inline double pulse_response(const SwitchingModel& m, double g, double v, double alpha) {
    detail::require_finite(g, "g");
    detail::require_finite(v, "v");
    if (g <= 0.0) throw std::domain_error("conductance must be positive");
    if (alpha <= 0.0) throw std::domain_error("alpha must be positive");
    if (m.polarity == Polarity::Set && v < 0.0)
        throw std::domain_error("set model requires v >= 0");
    if (m.polarity == Polarity::Reset && v > 0.0)
        throw std::domain_error("reset model requires v <= 0");
    const double av = alpha * v;
    const double den = 1.0 + m.beta[1] * av * av;
    const double state = m.gamma[0] + m.gamma[1] * std::sqrt(g) + m.gamma[2] * g;
    return std::exp(m.beta[0] / den) * std::sinh(m.beta[2] * av / den) * state;
}

// Arrhenius acceleration factor between bake and target temperature.
struct RetentionProjector {
    double activation_energy_ev = 1.1;
    static constexpr double kBoltzmannEvPerK = 8.617e-5;
};

inline double project_retention(double t_elapsed_h, double t_bake_c, double t_target_c,
                                const RetentionProjector& proj) {
    if (t_elapsed_h < 0.0) throw std::domain_error("elapsed time must be >= 0");
    if (t_bake_c <= -273.15 || t_target_c <= -273.15)
        throw std::domain_error("temperature below absolute zero");
    if (proj.activation_energy_ev < 0.0) throw std::domain_error("activation energy must be >= 0");
    const double tb = t_bake_c + 273.15;
    const double tt = t_target_c + 273.15;
    const double k = RetentionProjector::kBoltzmannEvPerK;
    return t_elapsed_h * std::exp(proj.activation_energy_ev / k * (1.0 / tt - 1.0 / tb));
}

struct MeasurementRow {
    double state = 0.0;
    double stimulus = 0.0;
    double response = 0.0;
    std::optional<double> temperature;
};

struct MeasurementTable {
    std::vector<MeasurementRow> rows;
};

// Bundle of fitted models for one technology.
struct DeviceModelSet {
    TemperatureModel temperature;
    NonlinearityModel nonlinearity;
    SwitchingModel set_model;
    SwitchingModel reset_model;
};

// Shipped defaults. These are stand-in coefficient sets fitted to
// synthetic curves with plausible shapes; they are not measured device
// parameters.
inline DeviceModelSet default_memristor_models() {
    DeviceModelSet s;
    s.temperature = TemperatureModel{Technology::Memristor,
                                     {-9.0e-4, 4.0e-4, -1.1e-3, 6.0e-4},
                                     25.0, 30.0};
    s.nonlinearity = NonlinearityModel{Technology::Memristor,
                                       {0.08, 0.04, 0.012, -8.0e-5, 3.0e-7},
                                       0.6, 0.1};
    s.set_model = SwitchingModel{Polarity::Set, {-14.0, 0.05, 6.0}, {1.5, -0.10, 0.002}};
    s.reset_model = SwitchingModel{Polarity::Reset, {-14.5, 0.045, 5.5}, {0.5, 0.05, 0.010}};
    return s;
}

inline DeviceModelSet default_eflash_models() {
    DeviceModelSet s;
    s.temperature = TemperatureModel{
        Technology::Eflash,
        {6.0e-3, -9.0e-3, -3.0e-5, 4.5e-3, 5.0e-5, -2.5e-5},
        25.0, 30.0};
    s.nonlinearity = NonlinearityModel{Technology::Eflash,
                                       {0.05, 0.02, 0.10, -0.06, 0.015, -0.03, 0.01},
                                       0.7, 30.0};
    // eFlash tuning is selector-isolated; switching models are unused but
    // kept so the set is uniform.
    s.set_model = SwitchingModel{Polarity::Set, {-14.0, 0.05, 6.0}, {1.5, -0.10, 0.002}};
    s.reset_model = SwitchingModel{Polarity::Reset, {-14.5, 0.045, 5.5}, {0.5, 0.05, 0.010}};
    return s;
}

inline const DeviceModelSet& default_models(Technology t) {
    static const DeviceModelSet mem = default_memristor_models();
    static const DeviceModelSet fl = default_eflash_models();
    return t == Technology::Memristor ? mem : fl;
}

}  // namespace mixedsim
