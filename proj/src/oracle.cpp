#include "xmod/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace xmod::oracle {

double ddim_cosine_scale(int steps) { return std::pow(std::cos(std::numbers::pi / (2.0 * steps)), steps); }

std::vector<OracleRow> run_oracle_bench(const OracleBenchConfig& cfg) {
    if (cfg.dim < 1 || cfg.samples < 2) throw std::invalid_argument("oracle bench needs dim >= 1 and samples >= 2");
    const std::vector<double> mu0(static_cast<std::size_t>(cfg.dim), 0.0), var0(static_cast<std::size_t>(cfg.dim), 1.0);
    const Shape shape{cfg.samples, cfg.dim};
    const auto n = static_cast<std::int64_t>(cfg.samples), d = static_cast<std::int64_t>(cfg.dim);
    // The sampler starts from this exact draw.
    const auto z1 = keyed_normal(shape, cfg.seed, ~0ULL);

    std::vector<OracleRow> rows;
    for (const int steps : cfg.steps) {
        if (steps < 1) throw std::invalid_argument("oracle bench step counts must be positive");
        SamplerConfig sc;
        sc.kind = cfg.kind;
        sc.steps = steps;
        sc.clip.reset();
        sc.seed = cfg.seed;
        Tensor<double> x;
        if (cfg.kind == SamplerKind::DDPM) {
            const GaussianPosteriorSampler model(mu0, var0, cfg.schedule, cfg.seed);
            x = sample(model, shape, sc, cfg.schedule);
        } else {
            const auto model = gaussian_oracle_denoiser(mu0, var0, cfg.schedule);
            x = sample(model, shape, sc, cfg.schedule);
        }

        OracleRow row;
        row.steps = steps;
        row.expected_scale = ddim_cosine_scale(steps);
        std::vector<double> mean(static_cast<std::size_t>(d), 0.0);
        for (std::int64_t r = 0; r < n; ++r)
            for (std::int64_t i = 0; i < d; ++i) mean[static_cast<std::size_t>(i)] += x[r * d + i];
        for (auto& m : mean) m /= static_cast<double>(n);
        for (const double m : mean) row.mean_max_z = std::max(row.mean_max_z, std::abs(m) * std::sqrt(double(n)));
        // Standard errors of the covariance entries under N(0, I): sqrt(2/n) on the diagonal, sqrt(1/n) off it.
        for (std::int64_t i = 0; i < d; ++i) {
            for (std::int64_t j = i; j < d; ++j) {
                double c = 0.0;
                for (std::int64_t r = 0; r < n; ++r)
                    c += (x[r * d + i] - mean[static_cast<std::size_t>(i)]) * (x[r * d + j] - mean[static_cast<std::size_t>(j)]);
                c /= static_cast<double>(n - 1);
                const double se = std::sqrt((i == j ? 2.0 : 1.0) / static_cast<double>(n));
                row.cov_max_z = std::max(row.cov_max_z, std::abs(c - (i == j ? 1.0 : 0.0)) / se);
            }
        }
        double xz = 0.0, zz = 0.0;
        for (std::int64_t k = 0; k < x.size(); ++k) {
            xz += x[k] * z1[k];
            zz += z1[k] * z1[k];
        }
        row.scale = xz / zz;
        for (std::int64_t k = 0; k < x.size(); ++k) row.linear_residual = std::max(row.linear_residual, std::abs(x[k] - row.scale * z1[k]));
        rows.push_back(row);
    }
    return rows;
}

}  // namespace xmod::oracle
