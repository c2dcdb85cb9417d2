#pragma once

// Intensity preprocessing, slice filtering, cubic B-spline resampling and slice-wise volume translation.

#include <array>
#include <cstdint>
#include <functional>
#include <vector>

#include "xmod/metrics.hpp"
#include "xmod/sampler.hpp"
#include "xmod/schedule.hpp"
#include "xmod/tensor.hpp"

namespace xmod::volume {

constexpr double kWindowLow = -50.0;
constexpr double kWindowHigh = 350.0;

enum class IntensityKind { RawHU, Windowed, Normalized };

struct IntensityMeta {
    IntensityKind kind = IntensityKind::RawHU;
    // Window bounds for Windowed data and the window that Normalized data maps back to.
    double low = 0.0;
    double high = 0.0;
};

// data is (Z, Y, X): index z selects a transverse slice, x varies fastest.
struct Volume {
    Tensor<double> data;
    std::array<double, 3> spacing{1.0, 1.0, 1.0};  // (dx, dy, dz) in mm
    IntensityMeta meta;

    std::int64_t slices() const { return data.dim(0); }
    std::int64_t height() const { return data.dim(1); }
    std::int64_t width() const { return data.dim(2); }
    Tensor<double> slice(std::int64_t z) const;
    void set_slice(std::int64_t z, const Tensor<double>& s);
    void validate() const;
};

// Clip to [low, high], then map affinely onto [-1, 1].
Volume window_and_scale(const Volume& v, double low = kWindowLow, double high = kWindowHigh);
// Inverse of window_and_scale for Normalized data; the result is clipped to the window.
Volume unscale(const Volume& v);
// Maps the volume's own [min, max] affinely onto [-1, 1]; the meta records that range.
Volume min_max_scale(const Volume& v);

struct SlicePairFilter {
    std::int64_t min_foreground_pixels = 200;
    double min_overlap = 0.25;
};

// Foreground is every pixel strictly above its slice minimum; a slice pair is kept when both
// foregrounds are large enough and their IoU reaches min_overlap.
std::vector<bool> filter_slices(const Volume& source, const Volume& target, const SlicePairFilter& f = {});
double foreground_iou(const Tensor<double>& a, const Tensor<double>& b);
std::int64_t foreground_count(const Tensor<double>& a);

// In-place cubic B-spline prefilter of n samples spaced by `stride`, mirror boundary.
void spline_prefilter_line(double* c, std::int64_t n, std::int64_t stride = 1);
// Coefficients of an (H, W) image, prefiltered along both axes.
Tensor<double> spline_prefilter(const Tensor<double>& image);
// Cubic spline interpolation of (H, W) onto an out_h x out_w grid with aligned corners.
Tensor<double> resample_slice(const Tensor<double>& image, std::int64_t out_h, std::int64_t out_w);

// Maps an (1, 1, S, S) normalized condition to a normalized prediction of the same shape.
using SliceTranslator = std::function<Tensor<double>(const Tensor<double>& condition, std::int64_t slice_index)>;

// Resample each slice to work_size^2, translate, resample back, then map [-1, 1] onto the window.
Volume translate_volume(const SliceTranslator& translate, const Volume& source, std::int64_t work_size = 256);
// Diffusion sampling per slice; the sampler noise of slice z is keyed by z.
Volume translate_volume(const Denoiser& model, const Volume& source, const SamplerConfig& cfg,
                        const NoiseSchedule& schedule, std::int64_t work_size = 256);

// Metrics on window-clipped intensities (data range 400): MSE, MAE and PSNR over voxels, SSIM with
// an 11-cube window (per-slice 2D when the volume has fewer than 11 slices) and the Frechet distance
// between slice feature sets on the transverse plane, slices rescaled to [0, 1] before extraction.
metrics::MetricReport evaluate_volumes(const Volume& pred, const Volume& target,
                                       const metrics::ExtractorConfig& features);

}  // namespace xmod::volume
