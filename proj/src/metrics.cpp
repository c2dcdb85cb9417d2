#include "xmod/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "xmod/rng.hpp"
#include "xmod/text.hpp"

namespace xmod::metrics {

namespace {

void require_nonempty_pair(const Tensor<double>& a, const Tensor<double>& b, const char* what) {
    require_same_shape(a, b, what);
    if (a.empty()) throw std::invalid_argument(std::string(what) + ": empty input");
}

// Valid correlation of `src` with `k` along `axis` of a row-major array with dims `dims`.
std::vector<double> filter_axis(const std::vector<double>& src, std::vector<std::int64_t>& dims, int axis,
                                const std::vector<double>& k) {
    const auto taps = static_cast<std::int64_t>(k.size());
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= dims[static_cast<std::size_t>(i)];
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < dims.size(); ++i) inner *= dims[i];
    const std::int64_t n = dims[static_cast<std::size_t>(axis)];
    const std::int64_t m = n - taps + 1;
    std::vector<double> out(static_cast<std::size_t>(outer * m * inner), 0.0);
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t j = 0; j < m; ++j) {
            double* dst = out.data() + (o * m + j) * inner;
            for (std::int64_t t = 0; t < taps; ++t) {
                const double w = k[static_cast<std::size_t>(t)];
                const double* s = src.data() + (o * n + j + t) * inner;
                for (std::int64_t i = 0; i < inner; ++i) dst[i] += w * s[i];
            }
        }
    }
    dims[static_cast<std::size_t>(axis)] = m;
    return out;
}

// SSIM over a block with the Gaussian window applied along the listed axes.
double ssim_block(const double* a, const double* b, std::vector<std::int64_t> dims, const std::vector<int>& axes,
                  double data_range) {
    const auto k = ssim_kernel();
    std::int64_t n = 1;
    for (auto d : dims) n *= d;
    std::array<std::vector<double>, 5> maps;
    for (auto& m : maps) m.resize(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        const auto u = static_cast<std::size_t>(i);
        maps[0][u] = a[i];
        maps[1][u] = b[i];
        maps[2][u] = a[i] * a[i];
        maps[3][u] = b[i] * b[i];
        maps[4][u] = a[i] * b[i];
    }
    std::vector<std::int64_t> out_dims;
    for (auto& m : maps) {
        auto d = dims;
        for (int axis : axes) m = filter_axis(m, d, axis, k);
        out_dims = d;
    }
    const double c1 = (0.01 * data_range) * (0.01 * data_range);
    const double c2 = (0.03 * data_range) * (0.03 * data_range);
    double acc = 0.0;
    const std::size_t count = maps[0].size();
    for (std::size_t i = 0; i < count; ++i) {
        const double mx = maps[0][i], my = maps[1][i];
        const double vx = maps[2][i] - mx * mx, vy = maps[3][i] - my * my, cxy = maps[4][i] - mx * my;
        acc += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    return acc / static_cast<double>(count);
}

}  // namespace

double mse(const Tensor<double>& a, const Tensor<double>& b) {
    require_nonempty_pair(a, b, "mse");
    double acc = 0.0;
    for (std::int64_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
    return acc / static_cast<double>(a.size());
}

double mae(const Tensor<double>& a, const Tensor<double>& b) {
    require_nonempty_pair(a, b, "mae");
    double acc = 0.0;
    for (std::int64_t i = 0; i < a.size(); ++i) acc += std::abs(a[i] - b[i]);
    return acc / static_cast<double>(a.size());
}

double psnr(const Tensor<double>& a, const Tensor<double>& b, double data_range) {
    if (!(data_range > 0.0)) throw std::invalid_argument("PSNR data range must be positive");
    const double m = mse(a, b);
    if (m == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(data_range * data_range / m);
}

std::vector<double> ssim_kernel() {
    std::vector<double> k(kSsimWindow);
    double total = 0.0;
    for (int i = 0; i < kSsimWindow; ++i) {
        const double x = i - kSsimWindow / 2;
        k[static_cast<std::size_t>(i)] = std::exp(-x * x / (2 * kSsimSigma * kSsimSigma));
        total += k[static_cast<std::size_t>(i)];
    }
    for (auto& v : k) v /= total;
    return k;
}

double ssim(const Tensor<double>& a, const Tensor<double>& b, SsimWindow window, double data_range) {
    require_nonempty_pair(a, b, "ssim");
    if (!(data_range > 0.0)) throw std::invalid_argument("SSIM data range must be positive");
    const auto& s = a.shape();
    auto too_small = [&] {
        return WindowTooLargeError("SSIM window " + std::to_string(kSsimWindow) + " does not fit image " + shape_str(s));
    };
    if (window == SsimWindow::Gaussian3D) {
        if (a.rank() != 3) throw std::invalid_argument("3D SSIM expects (D, H, W)");
        if (s[0] < kSsimWindow || s[1] < kSsimWindow || s[2] < kSsimWindow) throw too_small();
        return ssim_block(a.ptr(), b.ptr(), {s[0], s[1], s[2]}, {0, 1, 2}, data_range);
    }
    if (a.rank() != 2 && a.rank() != 3) throw std::invalid_argument("2D SSIM expects (H, W) or (D, H, W)");
    const std::int64_t h = s[static_cast<std::size_t>(a.rank() - 2)], w = s[static_cast<std::size_t>(a.rank() - 1)];
    if (h < kSsimWindow || w < kSsimWindow) throw too_small();
    const std::int64_t slices = a.rank() == 3 ? s[0] : 1;
    double acc = 0.0;
    for (std::int64_t z = 0; z < slices; ++z) acc += ssim_block(a.ptr() + z * h * w, b.ptr() + z * h * w, {h, w}, {0, 1}, data_range);
    return acc / static_cast<double>(slices);
}

GaussianStats fit_gaussian_stats(const std::vector<std::vector<double>>& features) {
    if (features.size() < 2) throw std::invalid_argument("Gaussian fit needs at least two feature vectors");
    const auto dim = static_cast<Eigen::Index>(features.front().size());
    if (dim == 0) throw std::invalid_argument("feature vectors are empty");
    Eigen::MatrixXd x(static_cast<Eigen::Index>(features.size()), dim);
    for (std::size_t i = 0; i < features.size(); ++i) {
        if (static_cast<Eigen::Index>(features[i].size()) != dim) throw std::invalid_argument("feature dimensions differ");
        x.row(static_cast<Eigen::Index>(i)) = Eigen::Map<const Eigen::RowVectorXd>(features[i].data(), dim);
    }
    GaussianStats st;
    st.mean = x.colwise().mean().transpose();
    const Eigen::MatrixXd centered = x.rowwise() - st.mean.transpose();
    st.cov = centered.transpose() * centered / static_cast<double>(x.rows() - 1);
    st.cov = 0.5 * (st.cov + st.cov.transpose()).eval();
    return st;
}

namespace {

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
    const Eigen::VectorXd roots = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * roots.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double frechet_distance(const GaussianStats& p, const GaussianStats& q) {
    if (p.mean.size() != q.mean.size() || p.cov.rows() != q.cov.rows() || p.cov.rows() != p.mean.size() ||
        q.cov.rows() != q.mean.size()) {
        throw std::invalid_argument("Frechet distance: dimension mismatch");
    }
    const Eigen::MatrixXd root_p = psd_sqrt(p.cov);
    const Eigen::MatrixXd middle = root_p * q.cov * root_p;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (middle + middle.transpose()), Eigen::EigenvaluesOnly);
    const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    const double d = (p.mean - q.mean).squaredNorm() + p.cov.trace() + q.cov.trace() - 2.0 * tr_sqrt;
    return std::max(d, 0.0);
}

ExtractorConfig parse_extractor(const std::string& descriptor) {
    ExtractorConfig cfg;
    if (descriptor == "down8") return cfg;
    if (descriptor.rfind("file:", 0) == 0) {
        cfg.kind = ExtractorKind::External;
        cfg.file = descriptor.substr(5);
        if (cfg.file.empty()) throw std::invalid_argument("feature file path is empty");
        return cfg;
    }
    if (descriptor.rfind("randproj", 0) == 0) {
        cfg.kind = ExtractorKind::RandomProjection;
        const auto colon = descriptor.find(':');
        if (colon != std::string::npos) {
            for (const auto& kv : split(descriptor.substr(colon + 1), ',')) {
                const auto eq = kv.find('=');
                if (eq == std::string::npos) throw std::invalid_argument("malformed extractor option '" + kv + "'");
                const auto key = kv.substr(0, eq), val = kv.substr(eq + 1);
                if (key == "seed") cfg.seed = static_cast<std::uint64_t>(parse_int(val, "seed"));
                else if (key == "dim") cfg.dim = static_cast<int>(parse_int(val, "dim"));
                else throw std::invalid_argument("unknown extractor option '" + key + "'");
            }
        } else if (descriptor != "randproj") {
            throw std::invalid_argument("unknown feature extractor '" + descriptor + "'");
        }
        if (cfg.dim <= 0) throw std::invalid_argument("projection dimension must be positive");
        return cfg;
    }
    throw std::invalid_argument("unknown feature extractor '" + descriptor + "' (expected down8, randproj or file:)");
}

std::vector<double> downsample_flatten(const Tensor<double>& image) {
    if (image.rank() != 2 || image.dim(0) < 8 || image.dim(1) < 8) {
        throw std::invalid_argument("downsampling needs an (H, W) image of at least 8x8");
    }
    const std::int64_t h = image.dim(0), w = image.dim(1);
    std::vector<double> out(64, 0.0);
    for (int by = 0; by < 8; ++by) {
        const std::int64_t y0 = by * h / 8, y1 = (by + 1) * h / 8;
        for (int bx = 0; bx < 8; ++bx) {
            const std::int64_t x0 = bx * w / 8, x1 = (bx + 1) * w / 8;
            double acc = 0.0;
            for (std::int64_t y = y0; y < y1; ++y)
                for (std::int64_t x = x0; x < x1; ++x) acc += image[y * w + x];
            out[static_cast<std::size_t>(by * 8 + bx)] = acc / static_cast<double>((y1 - y0) * (x1 - x0));
        }
    }
    return out;
}

RandomProjection::RandomProjection(std::uint64_t seed, int dim) : seed_(seed), dim_(dim) {
    if (dim <= 0) throw std::invalid_argument("projection dimension must be positive");
}

std::vector<double> RandomProjection::operator()(const Tensor<double>& image) const {
    if (image.empty()) throw std::invalid_argument("cannot project an empty image");
    if (input_size_ != image.size()) {
        input_size_ = image.size();
        matrix_.resize(dim_, input_size_);
        const double scale = 1.0 / std::sqrt(static_cast<double>(dim_));
        for (int r = 0; r < dim_; ++r) {
            CounterRng rng({seed_, 0x50524F4AULL, static_cast<std::uint64_t>(r)});
            for (std::int64_t c = 0; c < input_size_; ++c) matrix_(r, c) = scale * rng.normal();
        }
    }
    const Eigen::VectorXd y = matrix_ * Eigen::Map<const Eigen::VectorXd>(image.ptr(), image.size());
    return {y.data(), y.data() + y.size()};
}

std::vector<std::vector<double>> extract_features(const std::vector<Tensor<double>>& images,
                                                  const ExtractorConfig& cfg) {
    for (const auto& im : images) {
        if (im.shape() != images.front().shape()) throw std::invalid_argument("feature extraction needs same-shaped images");
    }
    std::vector<std::vector<double>> out;
    switch (cfg.kind) {
    case ExtractorKind::DownsampleFlatten:
        for (const auto& im : images) out.push_back(downsample_flatten(im));
        break;
    case ExtractorKind::RandomProjection: {
        const RandomProjection proj(cfg.seed, cfg.dim);
        for (const auto& im : images) out.push_back(proj(im));
        break;
    }
    case ExtractorKind::External:
        out = read_feature_file(cfg.file);
        if (out.size() != images.size()) {
            throw FeatureFileError("feature file " + cfg.file.string() + " holds " + std::to_string(out.size()) +
                                   " vectors for " + std::to_string(images.size()) + " images");
        }
        break;
    }
    return out;
}

namespace {

constexpr char kFeatureMagic[4] = {'X', 'F', 'E', 'A'};

void put_u32(std::ostream& os, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(const unsigned char* b) {
    return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
           static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
}

}  // namespace

std::vector<std::vector<double>> read_feature_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FeatureFileError("cannot open feature file " + path.string());
    unsigned char header[16];
    if (!in.read(reinterpret_cast<char*>(header), 16)) throw FeatureFileError("feature file " + path.string() + " is truncated");
    if (std::memcmp(header, kFeatureMagic, 4) != 0) throw FeatureFileError("feature file " + path.string() + " has a bad magic");
    if (get_u32(header + 4) != 1) throw FeatureFileError("feature file " + path.string() + " has unsupported version");
    const std::uint32_t count = get_u32(header + 8), dim = get_u32(header + 12);
    std::vector<std::vector<double>> out(count, std::vector<double>(dim));
    std::vector<unsigned char> buf(static_cast<std::size_t>(dim) * 4);
    for (auto& row : out) {
        if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()))) {
            throw FeatureFileError("feature file " + path.string() + " is truncated");
        }
        for (std::uint32_t j = 0; j < dim; ++j) {
            const std::uint32_t bits = get_u32(buf.data() + 4 * j);
            float f;
            std::memcpy(&f, &bits, 4);
            row[j] = f;
        }
    }
    return out;
}

void write_feature_file(const std::filesystem::path& path, const std::vector<std::vector<double>>& features) {
    const std::size_t dim = features.empty() ? 0 : features.front().size();
    for (const auto& f : features) {
        if (f.size() != dim) throw std::invalid_argument("feature dimensions differ");
    }
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FeatureFileError("cannot write feature file " + path.string());
    os.write(kFeatureMagic, 4);
    put_u32(os, 1);
    put_u32(os, static_cast<std::uint32_t>(features.size()));
    put_u32(os, static_cast<std::uint32_t>(dim));
    for (const auto& row : features) {
        for (double v : row) {
            const float f = static_cast<float>(v);
            std::uint32_t bits;
            std::memcpy(&bits, &f, 4);
            put_u32(os, bits);
        }
    }
    if (!os) throw FeatureFileError("failed writing feature file " + path.string());
}

}  // namespace xmod::metrics
