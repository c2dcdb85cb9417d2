#include "xmod/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <stdexcept>

#include "xmod/phantom.hpp"
#include "xmod/rng.hpp"

namespace xmod::pipeline {

namespace {

constexpr std::uint64_t kCropTag = 0x43524F50;  // "CROP"

// Mirror without repeating the edge sample, for any offset.
std::int64_t reflect(std::int64_t i, std::int64_t n) {
    if (n == 1) return 0;
    const std::int64_t period = 2 * (n - 1);
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - i;
}

Tensor<float> to_float_slice(const volume::Volume& v, std::int64_t z) { return v.slice(z).cast<float>(); }

}  // namespace

volume::Volume prepare_source(const volume::Volume& v) { return volume::min_max_scale(v); }

volume::Volume prepare_target(const volume::Volume& v) {
    if (v.meta.kind == volume::IntensityKind::Normalized) return v;
    return volume::window_and_scale(v);
}

void add_volume_pair(PairedSlices& data, const volume::Volume& source, const volume::Volume& target,
                     const volume::SlicePairFilter& filter) {
    const auto src = prepare_source(source);
    const auto tgt = prepare_target(target);
    const auto keep = volume::filter_slices(src, tgt, filter);
    for (std::int64_t z = 0; z < src.slices(); ++z) {
        if (!keep[static_cast<std::size_t>(z)]) {
            ++data.dropped;
            continue;
        }
        data.source.push_back(to_float_slice(src, z));
        data.target.push_back(to_float_slice(tgt, z));
    }
}

PairedSlices load_dataset(const std::string& data, const volume::SlicePairFilter& filter) {
    PairedSlices out;
    const std::string prefix = "phantom:";
    if (data.rfind(prefix, 0) == 0) {
        const auto pairs = phantom::gen_phantom_pairs(phantom::PhantomSpec::parse(data.substr(prefix.size())));
        add_volume_pair(out, pairs.source, pairs.target, filter);
    } else {
        namespace fs = std::filesystem;
        const fs::path dir(data);
        if (!fs::is_directory(dir)) throw std::invalid_argument("data directory not found: " + data);
        std::vector<fs::path> sources;
        for (const auto& e : fs::directory_iterator(dir)) {
            const auto name = e.path().filename().string();
            const std::string tag = "_source.nii";
            if (name.size() > tag.size() && name.compare(name.size() - tag.size(), tag.size(), tag) == 0) {
                sources.push_back(e.path());
            }
        }
        std::sort(sources.begin(), sources.end());
        if (sources.empty()) throw std::invalid_argument("no *_source.nii files in " + data);
        for (const auto& s : sources) {
            auto t = s.string();
            t.replace(t.size() - std::string("_source.nii").size(), std::string::npos, "_target.nii");
            if (!fs::exists(t)) throw std::invalid_argument("missing target volume " + t);
            add_volume_pair(out, io::read_nifti(s), io::read_nifti(t), filter);
        }
    }
    if (out.size() == 0) throw std::invalid_argument("every slice pair was rejected by the slice filter");
    return out;
}

Batch<float> draw_batch(const PairedSlices& data, int batch, int crop, std::uint64_t seed, std::uint64_t step) {
    if (data.size() == 0) throw std::invalid_argument("empty dataset");
    if (batch < 1 || crop < 2) throw std::invalid_argument("batch must be positive and crop at least 2");
    Batch<float> b{Tensor<float>(Shape{batch, 1, crop, crop}), Tensor<float>(Shape{batch, 1, crop, crop})};
    const std::int64_t plane = static_cast<std::int64_t>(crop) * crop;
    for (int r = 0; r < batch; ++r) {
        CounterRng rng({seed, kCropTag, step, static_cast<std::uint64_t>(r)});
        const auto idx = static_cast<std::size_t>(rng.next_u64() % data.size());
        const auto& s = data.source[idx];
        const auto& t = data.target[idx];
        const std::int64_t h = s.dim(0), w = s.dim(1);
        // Offsets range over every placement; a negative start reaches into the reflected border.
        auto offset = [&](std::int64_t n) {
            const std::int64_t lo = std::min<std::int64_t>(0, n - crop), hi = std::max<std::int64_t>(0, n - crop);
            return lo + static_cast<std::int64_t>(rng.next_u64() % static_cast<std::uint64_t>(hi - lo + 1));
        };
        const std::int64_t y0 = offset(h), x0 = offset(w);
        for (std::int64_t y = 0; y < crop; ++y) {
            const std::int64_t sy = reflect(y0 + y, h);
            for (std::int64_t x = 0; x < crop; ++x) {
                const std::int64_t sx = reflect(x0 + x, w);
                b.source[r * plane + y * crop + x] = s[sy * w + sx];
                b.target[r * plane + y * crop + x] = t[sy * w + sx];
            }
        }
    }
    return b;
}

TrainResult train(const TrainConfig& cfg, const PairedSlices& data,
                  const std::function<void(int, double)>& progress) {
    cfg.arch.validate();
    if (cfg.steps < 0) throw std::invalid_argument("step count must be non-negative");
    if (!(cfg.lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
    const auto schedule = NoiseSchedule::parse(cfg.schedule);
    auto model = nets::build_model(cfg.arch, cfg.seed);
    const ModelFn<float> fn = [&](const ad::Var<float>& z, const std::vector<double>& t, const ad::Var<float>& c) {
        return nets::apply(model.config, model.params, z, t, c);
    };
    const LossWeightConfig weights{PredictionTarget::V, cfg.gamma, true};
    nets::AdamConfig adam;
    adam.lr = cfg.lr;
    nets::AdamState state;
    TrainResult result;
    result.losses.reserve(static_cast<std::size_t>(cfg.steps));
    for (int step = 0; step < cfg.steps; ++step) {
        const auto batch = draw_batch(data, cfg.batch, cfg.crop, cfg.seed, static_cast<std::uint64_t>(step));
        model.params.zero_grad();
        const auto loss = cfg.arch.is_diffusion()
                              ? training_loss(fn, batch, cfg.seed, static_cast<std::uint64_t>(step), schedule, weights)
                              : direct_loss(fn, batch);
        const double value = loss.value()[0];
        if (!std::isfinite(value)) throw std::runtime_error("non-finite loss at step " + std::to_string(step));
        ad::backward(loss);
        nets::adam_step(model.params, nets::collect_grads(model.params), state, adam);
        result.losses.push_back(value);
        if (progress) progress(step, value);
    }
    result.checkpoint = {model.config, schedule.descriptor(), std::move(model.params)};
    return result;
}

volume::Volume translate(const io::Checkpoint& ckpt, const volume::Volume& source, const SamplerConfig& sampler,
                         std::int64_t work_size) {
    const nets::DenoiserModel model{ckpt.config, ckpt.params};
    if (ckpt.config.is_diffusion()) {
        const nets::NetDenoiser denoiser(model);
        return volume::translate_volume(denoiser, source, sampler, NoiseSchedule::parse(ckpt.schedule), work_size);
    }
    return volume::translate_volume(
        [&](const Tensor<double>& cond, std::int64_t) {
            return model.predict(Tensor<float>(), {}, cond.cast<float>()).cast<double>();
        },
        source, work_size);
}

}  // namespace xmod::pipeline
