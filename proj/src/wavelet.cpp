#include "xmod/wavelet.hpp"

#include <map>
#include <memory>
#include <mutex>
#include <vector>

namespace xmod::wavelet {

namespace {

void check_even(std::int64_t n, const char* what) {
    if (n < 2 || n % 2 != 0) throw ShapeError(std::string(what) + " must be even and >= 2, got " + std::to_string(n));
}

// Lifting on the interleaved signal with whole-sample symmetric extension:
// x[-1] = x[1], x[n] = x[n-2].
template <typename T>
void lift(T* v, std::int64_t n, int parity, double c) {
    const T k = static_cast<T>(c);
    for (std::int64_t i = parity; i < n; i += 2) {
        const T left = i > 0 ? v[i - 1] : v[1];
        const T right = i + 1 < n ? v[i + 1] : v[n - 2];
        v[i] += k * (left + right);
    }
}

}  // namespace

template <typename T>
void analyze_line(T* x, std::int64_t n, std::int64_t stride, T* scratch) {
    check_even(n, "wavelet line length");
    for (std::int64_t i = 0; i < n; ++i) scratch[i] = x[i * stride];
    lift(scratch, n, 1, kAlpha);
    lift(scratch, n, 0, kBeta);
    lift(scratch, n, 1, kGamma);
    lift(scratch, n, 0, kDelta);
    const std::int64_t half = n / 2;
    for (std::int64_t i = 0; i < half; ++i) {
        x[i * stride] = scratch[2 * i] * static_cast<T>(kZeta);
        x[(half + i) * stride] = scratch[2 * i + 1] / static_cast<T>(kZeta);
    }
}

template <typename T>
void synthesize_line(T* x, std::int64_t n, std::int64_t stride, T* scratch) {
    check_even(n, "wavelet line length");
    const std::int64_t half = n / 2;
    for (std::int64_t i = 0; i < half; ++i) {
        scratch[2 * i] = x[i * stride] / static_cast<T>(kZeta);
        scratch[2 * i + 1] = x[(half + i) * stride] * static_cast<T>(kZeta);
    }
    lift(scratch, n, 0, -kDelta);
    lift(scratch, n, 1, -kGamma);
    lift(scratch, n, 0, -kBeta);
    lift(scratch, n, 1, -kAlpha);
    for (std::int64_t i = 0; i < n; ++i) x[i * stride] = scratch[i];
}

template <typename T>
void analyze_plane(T* plane, std::int64_t h, std::int64_t w) {
    check_even(h, "image height");
    check_even(w, "image width");
    std::vector<T> scratch(static_cast<std::size_t>(std::max(h, w)));
    for (std::int64_t r = 0; r < h; ++r) analyze_line(plane + r * w, w, 1, scratch.data());
    for (std::int64_t c = 0; c < w; ++c) analyze_line(plane + c, h, w, scratch.data());
}

template <typename T>
void synthesize_plane(T* plane, std::int64_t h, std::int64_t w) {
    check_even(h, "image height");
    check_even(w, "image width");
    std::vector<T> scratch(static_cast<std::size_t>(std::max(h, w)));
    for (std::int64_t c = 0; c < w; ++c) synthesize_line(plane + c, h, w, scratch.data());
    for (std::int64_t r = 0; r < h; ++r) synthesize_line(plane + r * w, w, 1, scratch.data());
}

template <typename T>
Subbands<T> dwt2(const Tensor<T>& image) {
    if (image.rank() != 2 && image.rank() != 3) throw ShapeError("dwt2 expects (H, W) or (C, H, W), got " + shape_str(image.shape()));
    const std::int64_t h = image.dim(-2), w = image.dim(-1);
    check_even(h, "image height");
    check_even(w, "image width");
    const std::int64_t planes = image.size() / (h * w);
    Shape band_shape = image.shape();
    band_shape[band_shape.size() - 2] = h / 2;
    band_shape[band_shape.size() - 1] = w / 2;
    Subbands<T> out{Tensor<T>(band_shape), Tensor<T>(band_shape), Tensor<T>(band_shape), Tensor<T>(band_shape)};
    std::vector<T> plane(static_cast<std::size_t>(h * w));
    const std::int64_t hh = h / 2, hw = w / 2;
    for (std::int64_t p = 0; p < planes; ++p) {
        std::copy_n(image.ptr() + p * h * w, h * w, plane.data());
        analyze_plane(plane.data(), h, w);
        for (std::int64_t r = 0; r < hh; ++r) {
            for (std::int64_t c = 0; c < hw; ++c) {
                const std::int64_t o = p * hh * hw + r * hw + c;
                out.LL[o] = plane[static_cast<std::size_t>(r * w + c)];
                out.HL[o] = plane[static_cast<std::size_t>(r * w + hw + c)];
                out.LH[o] = plane[static_cast<std::size_t>((hh + r) * w + c)];
                out.HH[o] = plane[static_cast<std::size_t>((hh + r) * w + hw + c)];
            }
        }
    }
    return out;
}

template <typename T>
Tensor<T> idwt2(const Subbands<T>& bands) {
    const Shape& s = bands.LL.shape();
    if (bands.LH.shape() != s || bands.HL.shape() != s || bands.HH.shape() != s) {
        throw ShapeError("idwt2: subband shapes differ");
    }
    if (s.size() != 2 && s.size() != 3) throw ShapeError("idwt2 expects rank 2 or 3 bands, got " + shape_str(s));
    const std::int64_t hh = s[s.size() - 2], hw = s[s.size() - 1];
    if (hh < 1 || hw < 1) throw ShapeError("idwt2: empty bands");
    const std::int64_t h = 2 * hh, w = 2 * hw;
    Shape out_shape = s;
    out_shape[s.size() - 2] = h;
    out_shape[s.size() - 1] = w;
    Tensor<T> out(out_shape);
    const std::int64_t planes = bands.LL.size() / (hh * hw);
    for (std::int64_t p = 0; p < planes; ++p) {
        T* plane = out.ptr() + p * h * w;
        for (std::int64_t r = 0; r < hh; ++r) {
            for (std::int64_t c = 0; c < hw; ++c) {
                const std::int64_t i = p * hh * hw + r * hw + c;
                plane[r * w + c] = bands.LL[i];
                plane[r * w + hw + c] = bands.HL[i];
                plane[(hh + r) * w + c] = bands.LH[i];
                plane[(hh + r) * w + hw + c] = bands.HH[i];
            }
        }
        synthesize_plane(plane, h, w);
    }
    return out;
}

namespace {

template <typename T, bool Analysis>
const Tensor<T>& cached_matrix(std::int64_t n) {
    static std::mutex mu;
    static std::map<std::int64_t, std::unique_ptr<Tensor<T>>> cache;
    std::lock_guard lock(mu);
    auto& slot = cache[n];
    if (!slot) {
        check_even(n, "wavelet matrix size");
        auto m = std::make_unique<Tensor<T>>(Shape{n, n});
        std::vector<T> col(static_cast<std::size_t>(n)), scratch(static_cast<std::size_t>(n));
        for (std::int64_t j = 0; j < n; ++j) {
            std::fill(col.begin(), col.end(), T{0});
            col[static_cast<std::size_t>(j)] = T{1};
            if constexpr (Analysis) {
                analyze_line(col.data(), n, 1, scratch.data());
            } else {
                synthesize_line(col.data(), n, 1, scratch.data());
            }
            for (std::int64_t i = 0; i < n; ++i) (*m)[i * n + j] = col[static_cast<std::size_t>(i)];
        }
        slot = std::move(m);
    }
    return *slot;
}

}  // namespace

template <typename T>
const Tensor<T>& analysis_matrix(std::int64_t n) {
    return cached_matrix<T, true>(n);
}

template <typename T>
const Tensor<T>& synthesis_matrix(std::int64_t n) {
    return cached_matrix<T, false>(n);
}

#define XMOD_WAVELET_INSTANTIATE(T)                                                 \
    template void analyze_line<T>(T*, std::int64_t, std::int64_t, T*);              \
    template void synthesize_line<T>(T*, std::int64_t, std::int64_t, T*);           \
    template void analyze_plane<T>(T*, std::int64_t, std::int64_t);                 \
    template void synthesize_plane<T>(T*, std::int64_t, std::int64_t);              \
    template Subbands<T> dwt2<T>(const Tensor<T>&);                                 \
    template Tensor<T> idwt2<T>(const Subbands<T>&);                                \
    template const Tensor<T>& analysis_matrix<T>(std::int64_t);                     \
    template const Tensor<T>& synthesis_matrix<T>(std::int64_t);

XMOD_WAVELET_INSTANTIATE(float)
XMOD_WAVELET_INSTANTIATE(double)

}  // namespace xmod::wavelet
