#pragma once

// Direct-convolution CDF 9/7 transform, an oracle for the lifting implementation.

#include <cmath>
#include <cstdint>
#include <vector>

namespace xmod::testing {

// Published CDF 9/7 filter taps (analysis lowpass sums to 1, synthesis lowpass to 2).
inline const double kH[9] = {0.026748757411, -0.016864118443, -0.078223266529, 0.266864118443, 0.602949018236,
                             0.266864118443, -0.078223266529, -0.016864118443, 0.026748757411};
inline const double kG[7] = {0.091271763114, -0.057543526229, -0.591271763114, 1.115087052457,
                             -0.591271763114, -0.057543526229, 0.091271763114};
inline const double kHs[7] = {-0.091271763114, -0.057543526229, 0.591271763114, 1.115087052457,
                              0.591271763114, -0.057543526229, -0.091271763114};
inline const double kGs[9] = {0.026748757411, 0.016864118443, -0.078223266529, -0.266864118443, 0.602949018236,
                              -0.266864118443, -0.078223266529, 0.016864118443, 0.026748757411};

inline std::int64_t mirror(std::int64_t i, std::int64_t n) {
    while (i < 0 || i >= n) {
        if (i < 0) i = -i;
        if (i >= n) i = 2 * (n - 1) - i;
    }
    return i;
}

// Direct convolution analysis with symmetric extension; lowpass scaled by sqrt 2, highpass by 1/sqrt 2
// to match the lifting normalization.
inline std::vector<double> direct_analyze(const std::vector<double>& x) {
    const auto n = static_cast<std::int64_t>(x.size());
    std::vector<double> out(x.size());
    for (std::int64_t i = 0; i < n / 2; ++i) {
        double s = 0, d = 0;
        for (int k = -4; k <= 4; ++k) s += kH[k + 4] * x[static_cast<std::size_t>(mirror(2 * i + k, n))];
        for (int k = -3; k <= 3; ++k) d += kG[k + 3] * x[static_cast<std::size_t>(mirror(2 * i + 1 + k, n))];
        out[static_cast<std::size_t>(i)] = s * std::sqrt(2.0);
        out[static_cast<std::size_t>(n / 2 + i)] = d / std::sqrt(2.0);
    }
    return out;
}

inline std::vector<double> direct_synthesize(const std::vector<double>& y) {
    const auto n = static_cast<std::int64_t>(y.size());
    std::vector<double> lo(y.size(), 0.0), hi(y.size(), 0.0), x(y.size(), 0.0);
    for (std::int64_t i = 0; i < n / 2; ++i) {
        lo[static_cast<std::size_t>(2 * i)] = y[static_cast<std::size_t>(i)] / std::sqrt(2.0);
        hi[static_cast<std::size_t>(2 * i + 1)] = y[static_cast<std::size_t>(n / 2 + i)] * std::sqrt(2.0);
    }
    for (std::int64_t m = 0; m < n; ++m) {
        double v = 0;
        for (int k = -3; k <= 3; ++k) v += kHs[k + 3] * lo[static_cast<std::size_t>(mirror(m - k, n))];
        for (int k = -4; k <= 4; ++k) v += kGs[k + 4] * hi[static_cast<std::size_t>(mirror(m - k, n))];
        x[static_cast<std::size_t>(m)] = v;
    }
    return x;
}

}  // namespace xmod::testing
