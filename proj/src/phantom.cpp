#include "xmod/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "xmod/rng.hpp"
#include "xmod/text.hpp"

namespace xmod::phantom {

namespace {

constexpr std::uint64_t kPhantomTag = 0x5048414E;  // "PHAN"
constexpr double kBackground = -1.0;
constexpr double kTissueBase = -0.55;
constexpr double kVessel = 0.9;
constexpr double kRing = 0.95;
constexpr double kRingWidth = 0.09;  // relative to the head radii

struct Point {
    double x, y;
};

double uniform(CounterRng& rng, double lo, double hi) { return lo + (hi - lo) * rng.uniform(); }

int uniform_int(CounterRng& rng, int lo, int hi) {
    return lo + static_cast<int>(rng.next_u64() % static_cast<std::uint64_t>(hi - lo + 1));
}

// Uniform point inside the ellipse scaled by `fill`.
Point inside(CounterRng& rng, Point c, double ax, double ay, double fill) {
    const double r = fill * std::sqrt(rng.uniform());
    const double a = 2.0 * std::numbers::pi * rng.uniform();
    return {c.x + ax * r * std::cos(a), c.y + ay * r * std::sin(a)};
}

void render_slice(const PhantomSpec& spec, std::int64_t index, double* src, double* tgt) {
    CounterRng rng({spec.seed, kPhantomTag, static_cast<std::uint64_t>(index)});
    const Point c{uniform(rng, -0.05, 0.05), uniform(rng, -0.05, 0.05)};
    const double ax = uniform(rng, 0.62, 0.75), ay = uniform(rng, 0.68, 0.8);

    struct Blob {
        Point p;
        double amp, width;
    };
    std::vector<Blob> blobs(static_cast<std::size_t>(uniform_int(rng, spec.blob_min, spec.blob_max)));
    for (auto& b : blobs) b = {inside(rng, c, ax, ay, 0.75), uniform(rng, -0.25, 0.45), uniform(rng, 0.06, 0.2)};

    // Tubes are quadratic Bezier curves sampled densely; the distance to the polyline sets the profile.
    constexpr int kCurveSamples = 64;
    struct Tube {
        std::vector<Point> pts;
        double width;
    };
    std::vector<Tube> tubes(static_cast<std::size_t>(uniform_int(rng, spec.tube_min, spec.tube_max)));
    for (auto& t : tubes) {
        const Point p0 = inside(rng, c, ax, ay, 0.85), p1 = inside(rng, c, ax, ay, 0.85), p2 = inside(rng, c, ax, ay, 0.85);
        t.width = uniform(rng, 0.02, 0.04);
        for (int k = 0; k < kCurveSamples; ++k) {
            const double s = k / double(kCurveSamples - 1), u = 1.0 - s;
            t.pts.push_back({u * u * p0.x + 2 * u * s * p1.x + s * s * p2.x, u * u * p0.y + 2 * u * s * p1.y + s * s * p2.y});
        }
    }

    const std::int64_t n = spec.size;
    for (std::int64_t iy = 0; iy < n; ++iy) {
        for (std::int64_t ix = 0; ix < n; ++ix) {
            const double x = (ix + 0.5) / n * 2.0 - 1.0, y = (iy + 0.5) / n * 2.0 - 1.0;
            const double dx = (x - c.x) / ax, dy = (y - c.y) / ay;
            const double rr = std::sqrt(dx * dx + dy * dy);
            const std::int64_t k = iy * n + ix;
            // Noise draws are consumed for every pixel so the stream layout does not depend on geometry.
            const double noise = spec.noise_sigma * rng.normal();
            if (rr >= 1.0) {
                src[k] = kBackground;
                tgt[k] = rr < 1.0 + kRingWidth ? std::clamp(kRing + noise, -1.0, 1.0) : kBackground;
                continue;
            }
            double tissue = kTissueBase;
            for (const auto& b : blobs) {
                const double d2 = (x - b.p.x) * (x - b.p.x) + (y - b.p.y) * (y - b.p.y);
                tissue += b.amp * std::exp(-d2 / (2.0 * b.width * b.width));
            }
            double v = tissue;
            for (const auto& t : tubes) {
                double best = 1e30;
                for (const auto& p : t.pts) best = std::min(best, (x - p.x) * (x - p.x) + (y - p.y) * (y - p.y));
                const double w = std::exp(-best / (2.0 * t.width * t.width));
                v += (kVessel - v) * w;
            }
            src[k] = std::clamp(v, -0.95, 1.0);
            tgt[k] = std::clamp(target_intensity(src[k]) + noise, -1.0, 1.0);
        }
    }
}

}  // namespace

double target_intensity(double s) { return 0.85 * std::tanh(1.8 * s + 0.4) - 0.05; }

void PhantomSpec::validate() const {
    if (count < 1) throw std::invalid_argument("phantom count must be at least 1");
    if (size < 16 || size % 2 != 0) throw std::invalid_argument("phantom size must be even and at least 16");
    if (blob_min < 0 || blob_max < blob_min) throw std::invalid_argument("phantom blob range is invalid");
    if (tube_min < 0 || tube_max < tube_min) throw std::invalid_argument("phantom tube range is invalid");
    if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) throw std::invalid_argument("phantom noise must be non-negative");
}

PhantomSpec PhantomSpec::parse(std::string_view descriptor) {
    PhantomSpec s;
    if (descriptor.empty()) return s;
    for (const auto& [key, value] : parse_key_values(descriptor, "phantom spec")) {
        auto integral = [&, k = key, v = value] {
            if (v != std::floor(v)) throw std::invalid_argument("phantom spec: " + k + " must be an integer");
            return static_cast<long long>(v);
        };
        if (key == "count") s.count = integral();
        else if (key == "size") s.size = integral();
        else if (key == "seed") {
            if (value < 0) throw std::invalid_argument("phantom spec: seed must be non-negative");
            s.seed = static_cast<std::uint64_t>(integral());
        } else if (key == "blob_min") s.blob_min = static_cast<int>(integral());
        else if (key == "blob_max") s.blob_max = static_cast<int>(integral());
        else if (key == "tube_min") s.tube_min = static_cast<int>(integral());
        else if (key == "tube_max") s.tube_max = static_cast<int>(integral());
        else if (key == "noise") s.noise_sigma = value;
        else throw std::invalid_argument("phantom spec: unknown key '" + key + "'");
    }
    s.validate();
    return s;
}

std::string PhantomSpec::descriptor() const {
    std::ostringstream os;
    os << "count=" << count << ",size=" << size << ",seed=" << seed << ",blob_min=" << blob_min
       << ",blob_max=" << blob_max << ",tube_min=" << tube_min << ",tube_max=" << tube_max
       << ",noise=" << format_double(noise_sigma);
    return os.str();
}

PhantomPairs gen_phantom_pairs(const PhantomSpec& spec) {
    spec.validate();
    PhantomPairs out;
    const Shape shape{spec.count, spec.size, spec.size};
    out.source.data = Tensor<double>(shape);
    out.target.data = Tensor<double>(shape);
    out.source.meta = {volume::IntensityKind::Normalized, -1.0, 1.0};
    out.target.meta = {volume::IntensityKind::Normalized, volume::kWindowLow, volume::kWindowHigh};
    const std::int64_t plane = spec.size * spec.size;
    for (std::int64_t i = 0; i < spec.count; ++i) {
        render_slice(spec, i, out.source.data.ptr() + i * plane, out.target.data.ptr() + i * plane);
    }
    return out;
}

}  // namespace xmod::phantom
