#pragma once

// Dataset preparation, the training loop and checkpoint-driven volume translation.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "xmod/io.hpp"
#include "xmod/nets.hpp"
#include "xmod/sampler.hpp"
#include "xmod/training.hpp"
#include "xmod/volume.hpp"

namespace xmod::pipeline {

// Normalized (H, W) slice pairs.
struct PairedSlices {
    std::vector<Tensor<float>> source, target;
    std::int64_t dropped = 0;  // pairs rejected by the slice filter

    std::size_t size() const { return source.size(); }
};

// Source volumes are min-max scaled to [-1, 1]; targets in HU are windowed and scaled, targets that are
// already normalized pass through.
volume::Volume prepare_source(const volume::Volume& v);
volume::Volume prepare_target(const volume::Volume& v);

void add_volume_pair(PairedSlices& data, const volume::Volume& source, const volume::Volume& target,
                     const volume::SlicePairFilter& filter = {});

// `phantom:<spec>` generates pairs in memory; anything else is a directory holding `<id>_source.nii`
// and `<id>_target.nii` files, read in name order.
PairedSlices load_dataset(const std::string& data, const volume::SlicePairFilter& filter = {});

struct TrainConfig {
    nets::ArchConfig arch = nets::ArchConfig::make(nets::Arch::ADM, nets::Preset::Lite);
    std::string schedule = "cosine";
    int steps = 2000;
    double lr = 1e-4;
    int batch = 16;
    int crop = 32;
    double gamma = 5.0;
    std::uint64_t seed = 0;
};

// Row r of step k takes a random slice and crop position from the stream (seed, "CROP", k, r); slices
// smaller than the crop are reflect-padded first.
Batch<float> draw_batch(const PairedSlices& data, int batch, int crop, std::uint64_t seed, std::uint64_t step);

struct TrainResult {
    io::Checkpoint checkpoint;
    std::vector<double> losses;
};

// Parameters are initialized from the seed, then `steps` Adam updates on the v-loss (Min-SNR weighted)
// or, for the direct U-Net, on the plain MSE.
TrainResult train(const TrainConfig& cfg, const PairedSlices& data,
                  const std::function<void(int step, double loss)>& progress = {});

// Translates a normalized source volume into windowed target intensities. Diffusion checkpoints are
// sampled per slice; the direct U-Net runs once per slice.
volume::Volume translate(const io::Checkpoint& ckpt, const volume::Volume& source, const SamplerConfig& sampler,
                         std::int64_t work_size);

}  // namespace xmod::pipeline
