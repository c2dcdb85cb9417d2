#pragma once

// One-level CDF 9/7 discrete wavelet transform by lifting.

#include <cstdint>

#include "xmod/tensor.hpp"

namespace xmod::wavelet {

inline constexpr double kAlpha = -1.586134342;
inline constexpr double kBeta = -0.05298011854;
inline constexpr double kGamma = 0.8829110762;
inline constexpr double kDelta = 0.4435068522;
inline constexpr double kZeta = 1.149604398;

// Band names give the filter along the width axis first, then along the height axis:
// LH is lowpass across columns and highpass across rows.
template <typename T>
struct Subbands {
    Tensor<T> LL, LH, HL, HH;
};

// In-place 1D analysis of n (even, >= 2) samples spaced by `stride`. Afterwards the first n/2
// positions hold the lowpass band and the last n/2 the highpass band. scratch needs n entries.
template <typename T>
void analyze_line(T* x, std::int64_t n, std::int64_t stride, T* scratch);
template <typename T>
void synthesize_line(T* x, std::int64_t n, std::int64_t stride, T* scratch);

// image: (C, H, W) or (H, W), H and W even. Bands keep the leading shape.
template <typename T>
Subbands<T> dwt2(const Tensor<T>& image);
template <typename T>
Tensor<T> idwt2(const Subbands<T>& bands);

// In-place transform of one H x W plane into the quadrant layout [LL LH; HL HH] and back.
template <typename T>
void analyze_plane(T* plane, std::int64_t h, std::int64_t w);
template <typename T>
void synthesize_plane(T* plane, std::int64_t h, std::int64_t w);

// Dense n x n matrices of the 1D transforms (y = A x, x = S y), used for exact adjoints.
template <typename T>
const Tensor<T>& analysis_matrix(std::int64_t n);
template <typename T>
const Tensor<T>& synthesis_matrix(std::int64_t n);

}  // namespace xmod::wavelet
