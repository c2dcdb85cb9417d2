#include "xmod/sampler.hpp"

#include <bit>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "xmod/diffusion.hpp"
#include "xmod/errors.hpp"
#include "xmod/rng.hpp"

namespace xmod {

namespace {

constexpr std::uint64_t kSamplerDomain = 0x53414D50ULL;  // "SAMP"
constexpr std::uint64_t kOracleDomain = 0x4F52434CULL;   // "ORCL"
constexpr std::uint64_t kInitStep = ~0ULL;

std::vector<std::uint64_t> default_keys(std::int64_t rows) {
    std::vector<std::uint64_t> keys(static_cast<std::size_t>(rows));
    std::iota(keys.begin(), keys.end(), 0ULL);
    return keys;
}

void clip_in_place(Tensor<double>& x, const ClipRange& range) {
    for (auto& v : x.data()) v = std::clamp(v, range.low, range.high);
}

}  // namespace

SamplerKind parse_sampler_kind(std::string_view name) {
    if (name == "ddpm") return SamplerKind::DDPM;
    if (name == "ddim") return SamplerKind::DDIM;
    throw std::invalid_argument("unknown sampler '" + std::string(name) + "' (expected ddpm or ddim)");
}

const char* sampler_kind_name(SamplerKind kind) { return kind == SamplerKind::DDPM ? "ddpm" : "ddim"; }

TimeGrid make_time_grid(int steps) {
    if (steps < 1) throw std::invalid_argument("sampler needs at least one step");
    TimeGrid grid;
    grid.ts.resize(static_cast<std::size_t>(steps) + 1);
    for (int i = 0; i <= steps; ++i) grid.ts[static_cast<std::size_t>(i)] = 1.0 - static_cast<double>(i) / steps;
    grid.ts.front() = 1.0;
    grid.ts.back() = 0.0;
    return grid;
}

Tensor<double> ddim_step(const Tensor<double>& z_t, const Tensor<double>& x_hat, double s, double t,
                         const NoiseSchedule& schedule) {
    if (!(s < t)) throw std::invalid_argument("ddim_step requires s < t");
    const auto as = schedule.alpha_sigma(s);
    const auto at = schedule.alpha_sigma(t);
    const double ratio = as.sigma / at.sigma;
    return zip(z_t, x_hat,
               [&](double z, double x) { return as.alpha * x + ratio * (z - at.alpha * x); }, "ddim_step");
}

Tensor<double> ddpm_step(const Tensor<double>& z_t, const Tensor<double>& x_hat, double s, double t,
                         const NoiseSchedule& schedule, const Tensor<double>& noise) {
    if (!(s < t)) throw std::invalid_argument("ddpm_step requires s < t");
    require_same_shape(z_t, x_hat, "ddpm_step");
    if (s == 0.0) return x_hat;
    require_same_shape(z_t, noise, "ddpm_step noise");
    const auto c = posterior_coefficients(s, t, schedule);
    const double sd = std::sqrt(c.var);
    Tensor<double> out(z_t.shape());
    for (std::int64_t i = 0; i < out.size(); ++i) {
        out[i] = c.z_coef * z_t[i] + c.x_coef * x_hat[i] + sd * noise[i];
    }
    return out;
}

Tensor<double> keyed_normal(const Shape& shape, std::uint64_t seed, std::uint64_t step,
                            std::span<const std::uint64_t> row_keys) {
    Tensor<double> out(shape);
    if (shape.empty()) throw ShapeError("keyed_normal needs a batch dimension");
    const std::int64_t rows = shape[0];
    const std::int64_t per_row = rows ? out.size() / rows : 0;
    std::vector<std::uint64_t> fallback;
    if (row_keys.empty()) {
        fallback = default_keys(rows);
        row_keys = fallback;
    }
    if (static_cast<std::int64_t>(row_keys.size()) != rows) throw ShapeError("row_keys size must match batch");
    for (std::int64_t r = 0; r < rows; ++r) {
        CounterRng rng({seed, kSamplerDomain, row_keys[static_cast<std::size_t>(r)], step});
        for (std::int64_t k = 0; k < per_row; ++k) out[r * per_row + k] = rng.normal();
    }
    return out;
}

namespace {

Tensor<double> run_sampler(const Denoiser& model, const Shape& shape, const Tensor<double>& condition,
                           const SamplerConfig& cfg, const NoiseSchedule& schedule,
                           std::span<const std::uint64_t> row_keys) {
    if (cfg.clip && !(cfg.clip->low < cfg.clip->high && std::isfinite(cfg.clip->low) && std::isfinite(cfg.clip->high))) {
        throw std::invalid_argument("clip range needs finite low < high");
    }
    if (shape.empty()) throw ShapeError("sampler needs a batch dimension");
    std::vector<std::uint64_t> fallback;
    if (row_keys.empty()) {
        fallback = default_keys(shape[0]);
        row_keys = fallback;
    }
    const TimeGrid grid = make_time_grid(cfg.steps);
    Tensor<double> z = keyed_normal(shape, cfg.seed, kInitStep, row_keys);
    for (int i = 0; i < cfg.steps; ++i) {
        const double t = grid.ts[static_cast<std::size_t>(i)];
        const double s = grid.ts[static_cast<std::size_t>(i) + 1];
        const Tensor<double> v = model.predict_v(z, t, condition);
        if (v.shape() != z.shape()) throw ShapeError("denoiser output shape " + shape_str(v.shape()) + " != " + shape_str(z.shape()));
        Tensor<double> x_hat = x_from_v(z, v, t, schedule);
        if (!x_hat.all_finite()) throw SamplingError(i, "non-finite prediction");
        if (cfg.clip) clip_in_place(x_hat, *cfg.clip);
        if (cfg.observer) cfg.observer(i, t, x_hat);
        if (s == 0.0) return x_hat;
        if (cfg.kind == SamplerKind::DDIM) {
            z = ddim_step(z, x_hat, s, t, schedule);
        } else {
            z = ddpm_step(z, x_hat, s, t, schedule, keyed_normal(shape, cfg.seed, static_cast<std::uint64_t>(i), row_keys));
        }
        if (!z.all_finite()) throw SamplingError(i, "non-finite latent");
    }
    throw std::logic_error("time grid did not end at 0");
}

}  // namespace

Tensor<double> sample(const Denoiser& model, const Tensor<double>& condition, const SamplerConfig& cfg,
                      const NoiseSchedule& schedule, std::span<const std::uint64_t> row_keys) {
    return run_sampler(model, condition.shape(), condition, cfg, schedule, row_keys);
}

Tensor<double> sample(const Denoiser& model, const Shape& shape, const SamplerConfig& cfg,
                      const NoiseSchedule& schedule, std::span<const std::uint64_t> row_keys) {
    return run_sampler(model, shape, Tensor<double>(), cfg, schedule, row_keys);
}

GaussianOracleDenoiser::GaussianOracleDenoiser(std::vector<double> mu0, std::vector<double> var0,
                                               NoiseSchedule schedule)
    : mu0_(std::move(mu0)), var0_(std::move(var0)), schedule_(std::move(schedule)) {
    if (mu0_.size() != var0_.size()) throw ShapeError("oracle mean/variance size mismatch");
    for (double v : var0_) {
        if (!(v >= 0.0)) throw std::invalid_argument("oracle variance must be non-negative");
    }
}

Tensor<double> GaussianOracleDenoiser::x_hat(const Tensor<double>& z, double t) const {
    const auto [a, s] = schedule_.alpha_sigma(t);
    const auto d = static_cast<std::int64_t>(mu0_.size());
    if (d == 0 || z.size() % d != 0) throw ShapeError("oracle dimension does not divide input size");
    Tensor<double> out(z.shape());
    for (std::int64_t i = 0; i < z.size(); ++i) {
        const auto k = static_cast<std::size_t>(i % d);
        out[i] = (a * var0_[k] * z[i] + s * s * mu0_[k]) / (a * a * var0_[k] + s * s);
    }
    return out;
}

Tensor<double> GaussianOracleDenoiser::predict_v(const Tensor<double>& z, double t, const Tensor<double>&) const {
    return v_from_x(z, x_hat(z, t), t, schedule_);
}

GaussianOracleDenoiser gaussian_oracle_denoiser(std::vector<double> mu0, std::vector<double> var0,
                                                const NoiseSchedule& schedule) {
    return GaussianOracleDenoiser(std::move(mu0), std::move(var0), schedule);
}

GaussianPosteriorSampler::GaussianPosteriorSampler(std::vector<double> mu0, std::vector<double> var0,
                                                   NoiseSchedule schedule, std::uint64_t seed)
    : mean_(mu0, var0, schedule), var0_(std::move(var0)), schedule_(std::move(schedule)), seed_(seed) {}

Tensor<double> GaussianPosteriorSampler::predict_v(const Tensor<double>& z, double t, const Tensor<double>&) const {
    const auto [a, s] = schedule_.alpha_sigma(t);
    Tensor<double> x = mean_.x_hat(z, t);
    const auto d = static_cast<std::int64_t>(var0_.size());
    const std::int64_t rows = z.size() / d;
    for (std::int64_t r = 0; r < rows; ++r) {
        CounterRng rng({seed_, kOracleDomain, std::bit_cast<std::uint64_t>(t), static_cast<std::uint64_t>(r)});
        for (std::int64_t k = 0; k < d; ++k) {
            const double v0 = var0_[static_cast<std::size_t>(k)];
            const double post_var = v0 * s * s / (a * a * v0 + s * s);
            x[r * d + k] += std::sqrt(post_var) * rng.normal();
        }
    }
    return v_from_x(z, x, t, schedule_);
}

}  // namespace xmod
