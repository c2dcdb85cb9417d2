#pragma once

// Image-quality and distributional metrics.

#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "xmod/tensor.hpp"

namespace xmod::metrics {

double mse(const Tensor<double>& a, const Tensor<double>& b);
double mae(const Tensor<double>& a, const Tensor<double>& b);

// 10 log10(range^2 / mse); identical inputs give +infinity, see is_infinite_psnr.
double psnr(const Tensor<double>& a, const Tensor<double>& b, double data_range);
inline bool is_infinite_psnr(double v) { return v == std::numeric_limits<double>::infinity(); }

enum class SsimWindow { Gaussian2D, Gaussian3D };

constexpr int kSsimWindow = 11;
constexpr double kSsimSigma = 1.5;

// Normalized 11-tap Gaussian with sigma 1.5.
std::vector<double> ssim_kernel();

// Gaussian-weighted SSIM averaged over all positions where the window fits entirely.
// 2D window: input (H, W), or (D, H, W) averaged over the D slices. 3D window: input (D, H, W).
double ssim(const Tensor<double>& a, const Tensor<double>& b, SsimWindow window, double data_range);

class WindowTooLargeError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

struct MetricReport {
    double mse = 0.0;
    double mae = 0.0;
    double psnr = 0.0;
    double ssim = 0.0;
    std::optional<double> fd;
    std::pair<double, double> eval_range{0.0, 1.0};
    std::int64_t n_items = 0;
    double data_range = 1.0;
    // "3d" for the 11-cube window, "2d" when the volume is too thin and slices are scored separately.
    std::string ssim_window = "3d";
};

struct GaussianStats {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;
};

// Sample mean and unbiased covariance of equally sized feature vectors.
GaussianStats fit_gaussian_stats(const std::vector<std::vector<double>>& features);

// |mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2)
double frechet_distance(const GaussianStats& p, const GaussianStats& q);

// --- feature extractors ---

enum class ExtractorKind { DownsampleFlatten, RandomProjection, External };

struct ExtractorConfig {
    ExtractorKind kind = ExtractorKind::DownsampleFlatten;
    std::uint64_t seed = 0;
    int dim = 64;
    std::filesystem::path file;
};

// Accepts `down8`, `randproj:seed=<u64>,dim=<int>`, `file:<path>`.
ExtractorConfig parse_extractor(const std::string& descriptor);

// Average-pools an (H, W) image into 8x8 bins.
std::vector<double> downsample_flatten(const Tensor<double>& image);

// Fixed-seed Gaussian projection with entries N(0, 1/dim), so squared norms are preserved in expectation.
class RandomProjection {
  public:
    RandomProjection(std::uint64_t seed, int dim);
    std::vector<double> operator()(const Tensor<double>& image) const;

  private:
    std::uint64_t seed_;
    int dim_;
    mutable std::int64_t input_size_ = -1;
    mutable Eigen::MatrixXd matrix_;
};

// Built-in extractors run per image; the External kind reads vectors from the configured file and
// requires its count to equal the number of images.
std::vector<std::vector<double>> extract_features(const std::vector<Tensor<double>>& images,
                                                  const ExtractorConfig& cfg);

class FeatureFileError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// Little-endian: "XFEA", version u32 (1), count u32, dim u32, then count*dim float32.
std::vector<std::vector<double>> read_feature_file(const std::filesystem::path& path);
void write_feature_file(const std::filesystem::path& path, const std::vector<std::vector<double>>& features);

}  // namespace xmod::metrics
