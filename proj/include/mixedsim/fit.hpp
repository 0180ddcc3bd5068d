#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mixedsim/models.hpp"

namespace mixedsim {

enum class FitShape { TempMemristor, TempEflash, NlMemristor, NlEflash, SwitchSet, SwitchReset };

inline std::string to_string(FitShape s) {
    switch (s) {
        case FitShape::TempMemristor: return "temp_memristor";
        case FitShape::TempEflash: return "temp_eflash";
        case FitShape::NlMemristor: return "nl_memristor";
        case FitShape::NlEflash: return "nl_eflash";
        case FitShape::SwitchSet: return "switch_set";
        case FitShape::SwitchReset: return "switch_reset";
    }
    throw std::logic_error("bad shape");
}

inline std::size_t coeff_count(FitShape s) {
    switch (s) {
        case FitShape::TempMemristor: return 4;
        case FitShape::TempEflash: return 6;
        case FitShape::NlMemristor: return 5;
        case FitShape::NlEflash: return 7;
        case FitShape::SwitchSet:
        case FitShape::SwitchReset: return 6;  // beta1..3, gamma1..3
    }
    throw std::logic_error("bad shape");
}

// Fixed (non-fitted) model context used while evaluating residuals.
struct FitContext {
    double t0 = 25.0;
    double x_tune = 0.6;
};

struct FitResult {
    bool converged = false;
    std::string message;
    std::vector<double> coeff;  // best-so-far on failure
    double rmse = 0.0;
    double r_squared = 0.0;
    int iterations = 0;
};

namespace detail {

inline double fit_predict(FitShape shape, const FitContext& ctx, const std::vector<double>& c,
                          const MeasurementRow& row) {
    switch (shape) {
        case FitShape::TempMemristor:
        case FitShape::TempEflash: {
            if (!row.temperature)
                throw std::invalid_argument("temperature column required for temperature fits");
            TemperatureModel m;
            m.technology =
                shape == FitShape::TempMemristor ? Technology::Memristor : Technology::Eflash;
            m.coeff = c;
            m.t0 = ctx.t0;
            return temp_weight_shift(m, row.state, *row.temperature);
        }
        case FitShape::NlMemristor:
        case FitShape::NlEflash: {
            NonlinearityModel m;
            m.technology =
                shape == FitShape::NlMemristor ? Technology::Memristor : Technology::Eflash;
            m.coeff = c;
            m.x_tune = ctx.x_tune;
            return nl_error(m, row.state, row.stimulus);
        }
        case FitShape::SwitchSet:
        case FitShape::SwitchReset: {
            SwitchingModel m;
            m.polarity = shape == FitShape::SwitchSet ? Polarity::Set : Polarity::Reset;
            m.beta = {c[0], c[1], c[2]};
            m.gamma = {c[3], c[4], c[5]};
            return pulse_response(m, row.state, row.stimulus, 1.0);
        }
    }
    throw std::logic_error("bad shape");
}

}  // namespace detail

// Levenberg-Marquardt-style damped Gauss-Newton with central-difference
// Jacobians. Converges when the relative residual change drops below
// 1e-10; capped at 20000 iterations (the switching shape converges slowly
// when the exponential prefactor starts far from the optimum).
inline FitResult fit_model(const MeasurementTable& table, FitShape shape,
                           const std::vector<double>& init, const FitContext& ctx = {}) {
    const std::size_t n = coeff_count(shape);
    if (init.size() != n) throw std::invalid_argument("init coefficient count mismatch");
    const std::size_t m = table.rows.size();
    if (m < n) throw std::invalid_argument("fewer rows than coefficients");
    for (const auto& r : table.rows) {
        if (!std::isfinite(r.state) || !std::isfinite(r.stimulus) || !std::isfinite(r.response) ||
            (r.temperature && !std::isfinite(*r.temperature)))
            throw std::invalid_argument("non-finite measurement row");
    }

    auto residuals = [&](const std::vector<double>& c) {
        Eigen::VectorXd r(m);
        for (std::size_t i = 0; i < m; ++i)
            r(static_cast<Eigen::Index>(i)) =
                detail::fit_predict(shape, ctx, c, table.rows[i]) - table.rows[i].response;
        return r;
    };

    std::vector<double> c = init;
    Eigen::VectorXd r = residuals(c);
    double sse = r.squaredNorm();
    double lambda = 1e-3;
    const int max_iters = 20000;
    int iter = 0;
    bool converged = false;
    std::string message = "iteration cap reached";

    for (; iter < max_iters; ++iter) {
        // numeric Jacobian, central differences, step 1e-6 * scale
        Eigen::MatrixXd jac(m, n);
        for (std::size_t j = 0; j < n; ++j) {
            const double step = 1e-6 * std::max(std::abs(c[j]), 1.0);
            std::vector<double> cp = c, cm = c;
            cp[j] += step;
            cm[j] -= step;
            Eigen::VectorXd rp = residuals(cp);
            Eigen::VectorXd rm = residuals(cm);
            jac.col(static_cast<Eigen::Index>(j)) = (rp - rm) / (2.0 * step);
        }
        Eigen::MatrixXd jtj = jac.transpose() * jac;
        Eigen::VectorXd jtr = jac.transpose() * r;
        if (!jtj.allFinite()) {
            message = "non-finite Jacobian";
            break;
        }
        Eigen::FullPivLU<Eigen::MatrixXd> lu(jtj);
        if (lu.rank() < static_cast<Eigen::Index>(n) && sse > 1e-20) {
            message = "rank-deficient Jacobian";
            break;
        }

        bool accepted = false;
        for (int attempt = 0; attempt < 20 && !accepted; ++attempt) {
            Eigen::MatrixXd damped = jtj;
            for (std::size_t j = 0; j < n; ++j) {
                auto jj = static_cast<Eigen::Index>(j);
                damped(jj, jj) += lambda * std::max(jtj(jj, jj), 1e-12);
            }
            Eigen::VectorXd delta = damped.ldlt().solve(-jtr);
            std::vector<double> trial = c;
            for (std::size_t j = 0; j < n; ++j) trial[j] += delta(static_cast<Eigen::Index>(j));
            Eigen::VectorXd rt;
            double trial_sse = std::numeric_limits<double>::infinity();
            try {
                rt = residuals(trial);
                trial_sse = rt.squaredNorm();
            } catch (const std::domain_error&) {
                // step left the model's domain; damp harder
            }
            if (trial_sse < sse) {
                const double rel = (sse - trial_sse) / std::max(sse, 1e-300);
                c = trial;
                r = rt;
                sse = trial_sse;
                lambda = std::max(lambda * 0.1, 1e-12);
                accepted = true;
                if (rel < 1e-10 || sse < 1e-30) {
                    converged = true;
                    message = "converged";
                }
            } else {
                lambda *= 10.0;
            }
        }
        if (!accepted) {
            // no descent direction at any damping: treat as converged if the
            // residual is already tiny, otherwise stall
            if (sse < 1e-20) {
                converged = true;
                message = "converged";
            } else {
                message = "stalled";
            }
            break;
        }
        if (converged) break;
    }

    FitResult out;
    out.converged = converged;
    out.message = message;
    out.coeff = c;
    out.iterations = iter;
    out.rmse = std::sqrt(sse / static_cast<double>(m));
    double mean = 0.0;
    for (const auto& row : table.rows) mean += row.response;
    mean /= static_cast<double>(m);
    double tss = 0.0;
    for (const auto& row : table.rows) tss += (row.response - mean) * (row.response - mean);
    out.r_squared = tss > 0.0 ? 1.0 - sse / tss : (sse < 1e-20 ? 1.0 : 0.0);
    return out;
}

}  // namespace mixedsim
