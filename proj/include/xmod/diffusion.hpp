#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "xmod/schedule.hpp"
#include "xmod/tensor.hpp"

namespace xmod {

template <typename T>
struct DiffusionState {
    Tensor<T> z;
    double t;
};

struct TransitionParams {
    double alpha_ts;
    double sigma_ts_sq;
};

template <typename T>
struct PosteriorParams {
    Tensor<T> mean;
    double var;
};

enum class PredictionTarget { V, Eps, X };

struct LossWeightConfig {
    PredictionTarget target = PredictionTarget::V;
    double gamma = 5.0;
    bool enabled = true;
};

// z_t = alpha_t x + sigma_t eps
template <typename T>
DiffusionState<T> forward_marginal(const Tensor<T>& x, double t, const Tensor<T>& eps, const NoiseSchedule& schedule) {
    const auto [a, s] = schedule.alpha_sigma(t);
    return {zip(x, eps, [a, s](T xv, T ev) { return static_cast<T>(a * xv + s * ev); }, "forward_marginal"), t};
}

// q(z_t | z_s) = N(alpha_ts z_s, sigma_ts^2 I) for s < t.
inline TransitionParams transition_params(double s, double t, const NoiseSchedule& schedule) {
    if (!(s < t)) throw std::invalid_argument("transition_params requires s < t");
    const auto as = schedule.alpha_sigma(s);
    const auto at = schedule.alpha_sigma(t);
    const double alpha_ts = at.alpha / as.alpha;
    const double sigma_ts_sq = at.sigma * at.sigma - alpha_ts * alpha_ts * as.sigma * as.sigma;
    return {alpha_ts, std::max(0.0, sigma_ts_sq)};
}

struct PosteriorCoefficients {
    double z_coef;
    double x_coef;
    double var;
};

// q(z_s | z_t, x): mean = z_coef z_t + x_coef x, variance var.
// At s = 0 the target is the data itself (alpha_0 = 1, sigma_0 = 0) regardless of the log-SNR clamp,
// so the posterior collapses onto x.
inline PosteriorCoefficients posterior_coefficients(double s, double t, const NoiseSchedule& schedule) {
    if (s == 0.0 && t > 0.0) return {0.0, 1.0, 0.0};
    const auto tp = transition_params(s, t, schedule);
    const auto as = schedule.alpha_sigma(s);
    const auto at = schedule.alpha_sigma(t);
    const double st2 = at.sigma * at.sigma;
    if (!(st2 > 0.0)) throw std::domain_error("posterior undefined for sigma_t = 0");
    const double ss2 = as.sigma * as.sigma;
    return {tp.alpha_ts * ss2 / st2, as.alpha * tp.sigma_ts_sq / st2, tp.sigma_ts_sq * ss2 / st2};
}

template <typename T>
PosteriorParams<T> posterior_params(const Tensor<T>& z, const Tensor<T>& x_hat, double s, double t,
                                    const NoiseSchedule& schedule) {
    const auto c = posterior_coefficients(s, t, schedule);
    return {zip(z, x_hat, [&c](T zv, T xv) { return static_cast<T>(c.z_coef * zv + c.x_coef * xv); },
                "posterior_params"),
            c.var};
}

// v = alpha eps - sigma x
template <typename T>
Tensor<T> to_v(const Tensor<T>& x, const Tensor<T>& eps, double t, const NoiseSchedule& schedule) {
    const auto [a, s] = schedule.alpha_sigma(t);
    return zip(x, eps, [a, s](T xv, T ev) { return static_cast<T>(a * ev - s * xv); }, "to_v");
}

// x = alpha z - sigma v
template <typename T>
Tensor<T> x_from_v(const Tensor<T>& z, const Tensor<T>& v, double t, const NoiseSchedule& schedule) {
    const auto [a, s] = schedule.alpha_sigma(t);
    return zip(z, v, [a, s](T zv, T vv) { return static_cast<T>(a * zv - s * vv); }, "x_from_v");
}

// x = (z - sigma eps) / alpha
template <typename T>
Tensor<T> x_from_eps(const Tensor<T>& z, const Tensor<T>& eps, double t, const NoiseSchedule& schedule) {
    const auto [a, s] = schedule.alpha_sigma(t);
    return zip(z, eps, [a, s](T zv, T ev) { return static_cast<T>((zv - s * ev) / a); }, "x_from_eps");
}

// eps = (z - alpha x) / sigma
template <typename T>
Tensor<T> eps_from_x(const Tensor<T>& z, const Tensor<T>& x, double t, const NoiseSchedule& schedule) {
    const auto [a, s] = schedule.alpha_sigma(t);
    return zip(z, x, [a, s](T zv, T xv) { return static_cast<T>((zv - a * xv) / s); }, "eps_from_x");
}

// v = (alpha z - x) / sigma
template <typename T>
Tensor<T> v_from_x(const Tensor<T>& z, const Tensor<T>& x, double t, const NoiseSchedule& schedule) {
    const auto [a, s] = schedule.alpha_sigma(t);
    return zip(z, x, [a, s](T zv, T xv) { return static_cast<T>((a * zv - xv) / s); }, "v_from_x");
}

// Min-SNR-gamma weights. For the V target the implicit (1 + SNR) factor is divided out;
// Eps divides out SNR; X uses the clipped SNR directly.
inline double loss_weight(const LossWeightConfig& cfg, double t, const NoiseSchedule& schedule) {
    if (!cfg.enabled) return 1.0;
    if (!(cfg.gamma > 0.0)) throw std::invalid_argument("Min-SNR gamma must be positive");
    const double snr = schedule.snr(t);
    const double clipped = std::min(snr, cfg.gamma);
    switch (cfg.target) {
    case PredictionTarget::V:
        return clipped / (snr + 1.0);
    case PredictionTarget::Eps:
        return clipped / snr;
    case PredictionTarget::X:
        return clipped;
    }
    throw std::logic_error("unknown prediction target");
}

}  // namespace xmod
