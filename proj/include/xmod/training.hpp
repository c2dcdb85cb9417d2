#pragma once

// Training objectives for the v-predicting diffusion denoisers and the direct baseline.

#include <cstdint>
#include <functional>
#include <vector>

#include "xmod/autodiff.hpp"
#include "xmod/diffusion.hpp"
#include "xmod/schedule.hpp"
#include "xmod/tensor.hpp"

namespace xmod {

template <typename T>
using ModelFn = std::function<ad::Var<T>(const ad::Var<T>& z, const std::vector<double>& t, const ad::Var<T>& cond)>;

// (N, 1, H, W) source (condition) and target slices.
template <typename T>
struct Batch {
    Tensor<T> source, target;
};

// One diffusion time and one noise image per batch row.
template <typename T>
struct TrainingDraws {
    std::vector<double> t;
    Tensor<T> eps;
};

// Row r draws from the stream (seed, step, r).
template <typename T>
TrainingDraws<T> draw_training_noise(const Shape& shape, std::uint64_t seed, std::uint64_t step);

// Mean over the batch of w_v(t) times the per-pixel mean of (v_hat - v)^2.
template <typename T>
ad::Var<T> v_loss(const ModelFn<T>& model, const Batch<T>& batch, const TrainingDraws<T>& draws,
                  const NoiseSchedule& schedule, const LossWeightConfig& cfg);

template <typename T>
ad::Var<T> training_loss(const ModelFn<T>& model, const Batch<T>& batch, std::uint64_t seed, std::uint64_t step,
                         const NoiseSchedule& schedule, const LossWeightConfig& cfg);

// Plain MSE of model(condition) against the target.
template <typename T>
ad::Var<T> direct_loss(const ModelFn<T>& model, const Batch<T>& batch);

}  // namespace xmod
