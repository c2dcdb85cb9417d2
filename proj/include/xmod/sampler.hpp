#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "xmod/schedule.hpp"
#include "xmod/tensor.hpp"

namespace xmod {

// Anything that predicts the velocity v for a batch of noisy inputs sharing one diffusion time.
// Dimension 0 of z is the batch; condition is either empty or shaped like z.
class Denoiser {
  public:
    virtual ~Denoiser() = default;
    virtual Tensor<double> predict_v(const Tensor<double>& z, double t, const Tensor<double>& condition) const = 0;
};

enum class SamplerKind { DDPM, DDIM };

SamplerKind parse_sampler_kind(std::string_view name);
const char* sampler_kind_name(SamplerKind kind);

struct ClipRange {
    double low = -1.0;
    double high = 1.0;
};

struct SamplerConfig {
    SamplerKind kind = SamplerKind::DDPM;
    int steps = 128;
    // Applied to every x-hat; disabled for unbounded data such as the Gaussian oracle benchmarks.
    std::optional<ClipRange> clip = ClipRange{};
    std::uint64_t seed = 0;
    // Called with (step index, t, clipped x-hat) after every prediction.
    std::function<void(int, double, const Tensor<double>&)> observer;
};

struct TimeGrid {
    std::vector<double> ts;  // t_0 = 1 > t_1 > ... > t_N = 0
};

TimeGrid make_time_grid(int steps);

// z_s = alpha_s x + (sigma_s / sigma_t)(z_t - alpha_t x)
Tensor<double> ddim_step(const Tensor<double>& z_t, const Tensor<double>& x_hat, double s, double t,
                         const NoiseSchedule& schedule);

// Ancestral step from q(z_s | z_t, x_hat); returns x_hat exactly when s = 0.
Tensor<double> ddpm_step(const Tensor<double>& z_t, const Tensor<double>& x_hat, double s, double t,
                         const NoiseSchedule& schedule, const Tensor<double>& noise);

// Runs the reverse process from z ~ N(0, I) at t = 1 and returns the clipped x-hat of the final step.
// Row r of the batch draws its noise from streams keyed by (seed, row_keys[r], step) so a row's
// trajectory does not depend on which other rows share the batch. Empty row_keys means 0..B-1.
Tensor<double> sample(const Denoiser& model, const Tensor<double>& condition, const SamplerConfig& cfg,
                      const NoiseSchedule& schedule, std::span<const std::uint64_t> row_keys = {});
Tensor<double> sample(const Denoiser& model, const Shape& shape, const SamplerConfig& cfg,
                      const NoiseSchedule& schedule, std::span<const std::uint64_t> row_keys = {});

// Standard normal tensor whose row r comes from the stream (seed, row_keys[r], step).
Tensor<double> keyed_normal(const Shape& shape, std::uint64_t seed, std::uint64_t step,
                            std::span<const std::uint64_t> row_keys = {});

// Closed-form posterior mean for data x ~ N(mu0, diag(var0)): x_hat = (a var0 z + s^2 mu0) / (a^2 var0 + s^2),
// reported as the equivalent v. mu0/var0 have one entry per element of a batch row.
class GaussianOracleDenoiser final : public Denoiser {
  public:
    GaussianOracleDenoiser(std::vector<double> mu0, std::vector<double> var0, NoiseSchedule schedule);
    Tensor<double> x_hat(const Tensor<double>& z, double t) const;
    Tensor<double> predict_v(const Tensor<double>& z, double t, const Tensor<double>& condition) const override;

  protected:
    std::vector<double> mu0_;
    std::vector<double> var0_;
    NoiseSchedule schedule_;
};

GaussianOracleDenoiser gaussian_oracle_denoiser(std::vector<double> mu0, std::vector<double> var0,
                                                const NoiseSchedule& schedule);

// Draws x from the exact Gaussian posterior p(x | z_t) instead of returning its mean. Combined with the
// ancestral sampler this reproduces the reverse chain exactly for any step count. Draws are keyed by
// (seed, t, row) so repeated calls with the same inputs agree.
class GaussianPosteriorSampler final : public Denoiser {
  public:
    GaussianPosteriorSampler(std::vector<double> mu0, std::vector<double> var0, NoiseSchedule schedule,
                             std::uint64_t seed);
    Tensor<double> predict_v(const Tensor<double>& z, double t, const Tensor<double>& condition) const override;

  private:
    GaussianOracleDenoiser mean_;
    std::vector<double> var0_;
    NoiseSchedule schedule_;
    std::uint64_t seed_;
};

}  // namespace xmod
