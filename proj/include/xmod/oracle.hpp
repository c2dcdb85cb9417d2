#pragma once

// Sampler convergence against a standard normal data distribution, where the exact answers are known.

#include <cstdint>
#include <vector>

#include "xmod/sampler.hpp"
#include "xmod/schedule.hpp"

namespace xmod::oracle {

struct OracleRow {
    int steps = 0;
    // Largest |sample mean| and |sample covariance - I| entries, in standard errors.
    double mean_max_z = 0.0;
    double cov_max_z = 0.0;
    // Least-squares slope of the output against the initial noise, and its closed form for DDIM.
    double scale = 0.0;
    double expected_scale = 0.0;
    // Largest deviation of any output from scale * z_1.
    double linear_residual = 0.0;
};

struct OracleBenchConfig {
    SamplerKind kind = SamplerKind::DDPM;
    int dim = 16;
    std::vector<int> steps{4, 16, 64, 256};
    int samples = 4096;
    std::uint64_t seed = 0;
    // The wide clamp keeps alpha at t = 1 below 1e-13 so the closed forms hold to 1e-9.
    NoiseSchedule schedule = NoiseSchedule::cosine({-60.0, 60.0});
};

// DDPM runs with a denoiser that draws from the exact posterior, DDIM with the posterior mean; data is
// N(0, I_dim) and no clipping is applied.
std::vector<OracleRow> run_oracle_bench(const OracleBenchConfig& cfg);

// cos(pi / (2N))^N: the DDIM contraction for unit-variance data under the cosine schedule.
double ddim_cosine_scale(int steps);

}  // namespace xmod::oracle
