#include "xmod/volume.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "xmod/errors.hpp"

namespace xmod::volume {

namespace {

constexpr double kPole = -0.26794919243112270;  // sqrt(3) - 2
constexpr double kTolerance = 1e-15;

void require_hu(const Volume& v, const char* what) {
    if (v.meta.kind == IntensityKind::Normalized) {
        throw std::invalid_argument(std::string(what) + " expects intensities in HU, got normalized data");
    }
}

std::int64_t mirror_index(std::int64_t k, std::int64_t n) {
    if (n == 1) return 0;
    const std::int64_t period = 2 * (n - 1);
    k %= period;
    if (k < 0) k += period;
    return k < n ? k : period - k;
}

void cubic_weights(double frac, double w[4]) {
    const double f2 = frac * frac, f3 = f2 * frac;
    w[0] = (1 - frac) * (1 - frac) * (1 - frac) / 6.0;
    w[1] = (4 - 6 * f2 + 3 * f3) / 6.0;
    w[2] = (1 + 3 * frac + 3 * f2 - 3 * f3) / 6.0;
    w[3] = f3 / 6.0;
}

// Per output sample: the four mirrored input indices and their weights.
struct AxisPlan {
    std::vector<std::array<std::int64_t, 4>> idx;
    std::vector<std::array<double, 4>> w;
};

AxisPlan plan_axis(std::int64_t n_in, std::int64_t n_out) {
    AxisPlan p;
    p.idx.resize(static_cast<std::size_t>(n_out));
    p.w.resize(static_cast<std::size_t>(n_out));
    for (std::int64_t j = 0; j < n_out; ++j) {
        const double x = n_out == 1 ? 0.0 : static_cast<double>(j) * static_cast<double>(n_in - 1) / static_cast<double>(n_out - 1);
        const auto base = static_cast<std::int64_t>(std::floor(x));
        double w[4];
        cubic_weights(x - static_cast<double>(base), w);
        for (int k = 0; k < 4; ++k) {
            p.idx[static_cast<std::size_t>(j)][static_cast<std::size_t>(k)] = mirror_index(base - 1 + k, n_in);
            p.w[static_cast<std::size_t>(j)][static_cast<std::size_t>(k)] = w[k];
        }
    }
    return p;
}

}  // namespace

Tensor<double> Volume::slice(std::int64_t z) const {
    if (z < 0 || z >= slices()) throw std::out_of_range("slice index " + std::to_string(z) + " out of range");
    const std::int64_t n = height() * width();
    return Tensor<double>(Shape{height(), width()}, std::vector<double>(data.ptr() + z * n, data.ptr() + (z + 1) * n));
}

void Volume::set_slice(std::int64_t z, const Tensor<double>& s) {
    if (s.shape() != Shape{height(), width()}) throw ShapeError("slice shape " + shape_str(s.shape()) + " does not fit the volume");
    std::copy(s.data().begin(), s.data().end(), data.ptr() + z * height() * width());
}

void Volume::validate() const {
    if (data.rank() != 3 || data.empty()) throw ShapeError("volume data must be a non-empty (Z, Y, X) array");
    for (double s : spacing) {
        if (!(s > 0.0) || !std::isfinite(s)) throw std::invalid_argument("voxel spacing must be positive");
    }
    if (!data.all_finite()) throw std::invalid_argument("volume contains non-finite values");
}

Volume window_and_scale(const Volume& v, double low, double high) {
    if (!(low < high)) throw std::invalid_argument("window low must be below high");
    require_hu(v, "window_and_scale");
    Volume out = v;
    const double half = 0.5 * (high - low), mid = 0.5 * (high + low);
    out.data = map(v.data, [=](double x) { return (std::clamp(x, low, high) - mid) / half; });
    out.meta = {IntensityKind::Normalized, low, high};
    return out;
}

Volume unscale(const Volume& v) {
    if (v.meta.kind != IntensityKind::Normalized) throw std::invalid_argument("unscale expects normalized data");
    const double low = v.meta.low, high = v.meta.high;
    const double half = 0.5 * (high - low), mid = 0.5 * (high + low);
    Volume out = v;
    out.data = map(v.data, [=](double x) { return std::clamp(mid + half * x, low, high); });
    out.meta = {IntensityKind::Windowed, low, high};
    return out;
}

Volume min_max_scale(const Volume& v) {
    v.validate();
    const auto [lo_it, hi_it] = std::minmax_element(v.data.data().begin(), v.data.data().end());
    const double lo = *lo_it, hi = *hi_it;
    if (!(hi > lo)) throw std::invalid_argument("min-max scaling needs a non-constant volume");
    Volume out = v;
    out.data = map(v.data, [=](double x) { return 2.0 * (x - lo) / (hi - lo) - 1.0; });
    out.meta = {IntensityKind::Normalized, lo, hi};
    return out;
}

std::int64_t foreground_count(const Tensor<double>& a) {
    if (a.empty()) return 0;
    const double lo = *std::min_element(a.data().begin(), a.data().end());
    return std::count_if(a.data().begin(), a.data().end(), [lo](double x) { return x > lo; });
}

double foreground_iou(const Tensor<double>& a, const Tensor<double>& b) {
    require_same_shape(a, b, "foreground_iou");
    if (a.empty()) return 0.0;
    const double la = *std::min_element(a.data().begin(), a.data().end());
    const double lb = *std::min_element(b.data().begin(), b.data().end());
    std::int64_t inter = 0, uni = 0;
    for (std::int64_t i = 0; i < a.size(); ++i) {
        const bool fa = a[i] > la, fb = b[i] > lb;
        inter += fa && fb;
        uni += fa || fb;
    }
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

std::vector<bool> filter_slices(const Volume& source, const Volume& target, const SlicePairFilter& f) {
    if (f.min_foreground_pixels < 0 || f.min_overlap < 0.0 || f.min_overlap > 1.0) {
        throw std::invalid_argument("slice filter thresholds out of range");
    }
    require_same_shape(source.data, target.data, "filter_slices");
    std::vector<bool> keep;
    for (std::int64_t z = 0; z < source.slices(); ++z) {
        const auto a = source.slice(z), b = target.slice(z);
        keep.push_back(foreground_count(a) >= f.min_foreground_pixels && foreground_count(b) >= f.min_foreground_pixels &&
                       foreground_iou(a, b) >= f.min_overlap);
    }
    return keep;
}

void spline_prefilter_line(double* c, std::int64_t n, std::int64_t stride) {
    if (n < 2) throw std::invalid_argument("spline prefilter needs at least two samples");
    const double z = kPole;
    auto at = [&](std::int64_t k) -> double& { return c[k * stride]; };
    for (std::int64_t k = 0; k < n; ++k) at(k) *= 6.0;
    // Causal initialization for whole-sample mirror boundaries.
    const auto horizon = static_cast<std::int64_t>(std::ceil(std::log(kTolerance) / std::log(std::abs(z))));
    double sum;
    if (horizon < n) {
        double zn = z;
        sum = at(0);
        for (std::int64_t k = 1; k < horizon; ++k) {
            sum += zn * at(k);
            zn *= z;
        }
    } else {
        double zn = z;
        const double iz = 1.0 / z;
        double z2n = std::pow(z, static_cast<double>(n - 1));
        sum = at(0) + z2n * at(n - 1);
        z2n *= z2n * iz;
        for (std::int64_t k = 1; k < n - 1; ++k) {
            sum += (zn + z2n) * at(k);
            zn *= z;
            z2n *= iz;
        }
        sum /= 1.0 - zn * zn;
    }
    at(0) = sum;
    for (std::int64_t k = 1; k < n; ++k) at(k) += z * at(k - 1);
    at(n - 1) = (z / (z * z - 1.0)) * (z * at(n - 2) + at(n - 1));
    for (std::int64_t k = n - 2; k >= 0; --k) at(k) = z * (at(k + 1) - at(k));
}

Tensor<double> spline_prefilter(const Tensor<double>& image) {
    if (image.rank() != 2) throw ShapeError("spline prefilter expects (H, W)");
    const std::int64_t h = image.dim(0), w = image.dim(1);
    if (h < 2 || w < 2) throw std::invalid_argument("spline prefilter needs at least 2x2 samples");
    Tensor<double> c = image;
    for (std::int64_t y = 0; y < h; ++y) spline_prefilter_line(c.ptr() + y * w, w, 1);
    for (std::int64_t x = 0; x < w; ++x) spline_prefilter_line(c.ptr() + x, h, w);
    return c;
}

Tensor<double> resample_slice(const Tensor<double>& image, std::int64_t out_h, std::int64_t out_w) {
    if (out_h < 1 || out_w < 1) throw std::invalid_argument("resample target size must be positive");
    const auto c = spline_prefilter(image);
    const std::int64_t h = image.dim(0), w = image.dim(1);
    const auto px = plan_axis(w, out_w), py = plan_axis(h, out_h);
    // Rows first, then columns.
    Tensor<double> rows(Shape{h, out_w});
    for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t j = 0; j < out_w; ++j) {
            const auto& idx = px.idx[static_cast<std::size_t>(j)];
            const auto& wt = px.w[static_cast<std::size_t>(j)];
            double acc = 0.0;
            for (int k = 0; k < 4; ++k) acc += wt[static_cast<std::size_t>(k)] * c[y * w + idx[static_cast<std::size_t>(k)]];
            rows[y * out_w + j] = acc;
        }
    }
    Tensor<double> out(Shape{out_h, out_w});
    for (std::int64_t i = 0; i < out_h; ++i) {
        const auto& idx = py.idx[static_cast<std::size_t>(i)];
        const auto& wt = py.w[static_cast<std::size_t>(i)];
        for (std::int64_t j = 0; j < out_w; ++j) {
            double acc = 0.0;
            for (int k = 0; k < 4; ++k) acc += wt[static_cast<std::size_t>(k)] * rows[idx[static_cast<std::size_t>(k)] * out_w + j];
            out[i * out_w + j] = acc;
        }
    }
    return out;
}

Volume translate_volume(const SliceTranslator& translate, const Volume& source, std::int64_t work_size) {
    source.validate();
    if (source.meta.kind != IntensityKind::Normalized) throw std::invalid_argument("translation expects normalized input");
    if (work_size < 2) throw std::invalid_argument("work size must be at least 2");
    const std::int64_t h = source.height(), w = source.width();
    const bool same = h == work_size && w == work_size;
    Volume out = source;
    out.meta = {IntensityKind::Windowed, kWindowLow, kWindowHigh};
    for (std::int64_t z = 0; z < source.slices(); ++z) {
        try {
            const auto s = source.slice(z);
            auto cond = same ? s : resample_slice(s, work_size, work_size);
            cond = cond.reshaped({1, 1, work_size, work_size});
            auto pred = translate(cond, z);
            if (pred.size() != work_size * work_size) throw ShapeError("translator returned " + shape_str(pred.shape()));
            pred = pred.reshaped({work_size, work_size});
            auto back = same ? pred : resample_slice(pred, h, w);
            const double half = 0.5 * (kWindowHigh - kWindowLow), mid = 0.5 * (kWindowHigh + kWindowLow);
            out.set_slice(z, map(back, [=](double x) { return std::clamp(mid + half * x, kWindowLow, kWindowHigh); }));
        } catch (const SliceError&) {
            throw;
        } catch (const std::exception& e) {
            throw SliceError(z, e.what());
        }
    }
    return out;
}

Volume translate_volume(const Denoiser& model, const Volume& source, const SamplerConfig& cfg,
                        const NoiseSchedule& schedule, std::int64_t work_size) {
    return translate_volume(
        [&](const Tensor<double>& cond, std::int64_t z) {
            const std::uint64_t key = static_cast<std::uint64_t>(z);
            return sample(model, cond, cfg, schedule, std::span<const std::uint64_t>(&key, 1));
        },
        source, work_size);
}

metrics::MetricReport evaluate_volumes(const Volume& pred, const Volume& target,
                                       const metrics::ExtractorConfig& features) {
    require_hu(pred, "evaluate_volumes");
    require_hu(target, "evaluate_volumes");
    pred.validate();
    target.validate();
    require_same_shape(pred.data, target.data, "evaluate_volumes");
    auto clip = [](const Tensor<double>& t) { return map(t, [](double x) { return std::clamp(x, kWindowLow, kWindowHigh); }); };
    const auto p = clip(pred.data), q = clip(target.data);
    const double range = kWindowHigh - kWindowLow;

    metrics::MetricReport r;
    r.eval_range = {kWindowLow, kWindowHigh};
    r.data_range = range;
    r.n_items = pred.slices();
    r.mse = metrics::mse(p, q);
    r.mae = metrics::mae(p, q);
    r.psnr = metrics::psnr(p, q, range);
    if (pred.slices() >= metrics::kSsimWindow) {
        r.ssim = metrics::ssim(p, q, metrics::SsimWindow::Gaussian3D, range);
        r.ssim_window = "3d";
    } else {
        r.ssim = metrics::ssim(p, q, metrics::SsimWindow::Gaussian2D, range);
        r.ssim_window = "2d";
    }

    if (pred.slices() >= 2) {
        const std::int64_t n = pred.height() * pred.width();
        std::vector<Tensor<double>> ps, qs;
        for (std::int64_t z = 0; z < pred.slices(); ++z) {
            auto unit = [&](const Tensor<double>& v) {
                Tensor<double> s(Shape{pred.height(), pred.width()});
                for (std::int64_t i = 0; i < n; ++i) s[i] = (v[z * n + i] - kWindowLow) / range;
                return s;
            };
            ps.push_back(unit(p));
            qs.push_back(unit(q));
        }
        std::vector<std::vector<double>> fp, fq;
        if (features.kind == metrics::ExtractorKind::External) {
            // The file lists prediction slices first, then target slices.
            auto all = metrics::read_feature_file(features.file);
            if (all.size() != 2 * ps.size()) {
                throw metrics::FeatureFileError("feature file must hold " + std::to_string(2 * ps.size()) + " vectors");
            }
            fp.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(ps.size()));
            fq.assign(all.begin() + static_cast<std::ptrdiff_t>(ps.size()), all.end());
        } else {
            fp = metrics::extract_features(ps, features);
            fq = metrics::extract_features(qs, features);
        }
        r.fd = metrics::frechet_distance(metrics::fit_gaussian_stats(fp), metrics::fit_gaussian_stats(fq));
    }
    return r;
}

}  // namespace xmod::volume
