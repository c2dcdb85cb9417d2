#include "xmod/training.hpp"

#include <cmath>

#include "xmod/errors.hpp"
#include "xmod/rng.hpp"

namespace xmod {

using namespace xmod::ad;

namespace {

constexpr std::uint64_t kTrainDomain = 0x5452414EULL;  // "TRAN"

template <typename T>
void check_batch(const Batch<T>& batch) {
    require_same_shape(batch.source, batch.target, "training batch");
    if (batch.source.rank() != 4 || batch.source.dim(1) != 1) {
        throw ShapeError("training batch must be (N, 1, H, W), got " + shape_str(batch.source.shape()));
    }
}

}  // namespace

template <typename T>
TrainingDraws<T> draw_training_noise(const Shape& shape, std::uint64_t seed, std::uint64_t step) {
    TrainingDraws<T> d;
    d.eps = Tensor<T>(shape);
    const std::int64_t n = shape.at(0);
    const std::int64_t per = n ? d.eps.size() / n : 0;
    for (std::int64_t r = 0; r < n; ++r) {
        CounterRng rng({seed, kTrainDomain, step, static_cast<std::uint64_t>(r)});
        d.t.push_back(rng.uniform());
        for (std::int64_t i = 0; i < per; ++i) d.eps[r * per + i] = static_cast<T>(rng.normal());
    }
    return d;
}

template <typename T>
Var<T> v_loss(const ModelFn<T>& model, const Batch<T>& batch, const TrainingDraws<T>& draws,
              const NoiseSchedule& schedule, const LossWeightConfig& cfg) {
    check_batch(batch);
    require_same_shape(batch.target, draws.eps, "training noise");
    const std::int64_t n = batch.target.dim(0);
    if (static_cast<std::int64_t>(draws.t.size()) != n) throw ShapeError("need one diffusion time per batch row");
    const std::int64_t per = batch.target.size() / n;

    Tensor<T> z(batch.target.shape()), v(batch.target.shape()), w(Shape{n, 1, 1, 1});
    for (std::int64_t r = 0; r < n; ++r) {
        const double t = draws.t[static_cast<std::size_t>(r)];
        const auto [a, s] = schedule.alpha_sigma(t);
        for (std::int64_t i = r * per; i < (r + 1) * per; ++i) {
            const double x = batch.target[i], e = draws.eps[i];
            z[i] = static_cast<T>(a * x + s * e);
            v[i] = static_cast<T>(a * e - s * x);
        }
        w[r] = static_cast<T>(loss_weight(cfg, t, schedule) / static_cast<double>(n * per));
    }
    const auto v_hat = model(Var<T>::constant(std::move(z)), draws.t, Var<T>::constant(batch.source));
    require_same_shape(v_hat.value(), v, "model output");
    const auto sq = square(sub(v_hat, Var<T>::constant(std::move(v))));
    auto loss = sum(mul(sq, Var<T>::constant(w)));
    if (!std::isfinite(static_cast<double>(loss.value()[0]))) {
        for (std::int64_t r = 0; r < n; ++r) {
            double acc = 0.0;
            for (std::int64_t i = r * per; i < (r + 1) * per; ++i) acc += sq.value()[i];
            if (!std::isfinite(acc * w[r])) throw NonFiniteLossError(draws.t[static_cast<std::size_t>(r)]);
        }
        throw NonFiniteLossError(draws.t.front());
    }
    return loss;
}

template <typename T>
Var<T> training_loss(const ModelFn<T>& model, const Batch<T>& batch, std::uint64_t seed, std::uint64_t step,
                     const NoiseSchedule& schedule, const LossWeightConfig& cfg) {
    check_batch(batch);
    return v_loss(model, batch, draw_training_noise<T>(batch.target.shape(), seed, step), schedule, cfg);
}

template <typename T>
Var<T> direct_loss(const ModelFn<T>& model, const Batch<T>& batch) {
    check_batch(batch);
    const auto y = model(Var<T>(), {}, Var<T>::constant(batch.source));
    require_same_shape(y.value(), batch.target, "model output");
    auto loss = mean(square(sub(y, Var<T>::constant(batch.target))));
    if (!std::isfinite(static_cast<double>(loss.value()[0]))) throw NonFiniteLossError(0.0);
    return loss;
}

#define XMOD_TRAINING_INSTANTIATE(T)                                                                              \
    template TrainingDraws<T> draw_training_noise<T>(const Shape&, std::uint64_t, std::uint64_t);             \
    template Var<T> v_loss<T>(const ModelFn<T>&, const Batch<T>&, const TrainingDraws<T>&, const NoiseSchedule&, \
                              const LossWeightConfig&);                                                         \
    template Var<T> training_loss<T>(const ModelFn<T>&, const Batch<T>&, std::uint64_t, std::uint64_t,          \
                                     const NoiseSchedule&, const LossWeightConfig&);                            \
    template Var<T> direct_loss<T>(const ModelFn<T>&, const Batch<T>&);

XMOD_TRAINING_INSTANTIATE(float)
XMOD_TRAINING_INSTANTIATE(double)

}  // namespace xmod
