#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace xmod {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

// Dense row-major tensor. Value semantics; copying copies the buffer.
template <typename T>
class Tensor {
  public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
        for (auto d : shape_) {
            if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape_));
        }
        data_.assign(static_cast<std::size_t>(shape_numel(shape_)), fill);
    }

    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (static_cast<std::int64_t>(data_.size()) != shape_numel(shape_)) {
            throw ShapeError("data size " + std::to_string(data_.size()) + " does not match shape " +
                             shape_str(shape_));
        }
    }

    static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    std::int64_t dim(int axis) const {
        if (axis < 0) axis += rank();
        if (axis < 0 || axis >= rank()) throw ShapeError("axis out of range for shape " + shape_str(shape_));
        return shape_[static_cast<std::size_t>(axis)];
    }
    std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    std::span<T> data() { return data_; }
    std::span<const T> data() const { return data_; }
    T* ptr() { return data_.data(); }
    const T* ptr() const { return data_.data(); }
    std::vector<T>& storage() { return data_; }
    const std::vector<T>& storage() const { return data_; }

    T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    // Row-major multi-index access; no bounds checking beyond debug asserts.
    template <typename... I>
    T& at(I... idx) {
        return data_[static_cast<std::size_t>(offset({static_cast<std::int64_t>(idx)...}))];
    }
    template <typename... I>
    const T& at(I... idx) const {
        return data_[static_cast<std::size_t>(offset({static_cast<std::int64_t>(idx)...}))];
    }

    Tensor reshaped(Shape shape) const {
        if (shape_numel(shape) != size()) {
            throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
        }
        return Tensor(std::move(shape), data_);
    }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.size());
        std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
        return Tensor<U>(shape_, std::move(out));
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(static_cast<double>(v)); });
    }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

  private:
    std::int64_t offset(std::initializer_list<std::int64_t> idx) const {
        std::int64_t off = 0;
        std::size_t k = 0;
        for (auto i : idx) off = off * shape_[k++] + i;
        return off;
    }

    Shape shape_;
    std::vector<T> data_;
};

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

// Elementwise helpers used by the non-differentiable numerical modules.
template <typename T, typename F>
Tensor<T> map(const Tensor<T>& a, F f) {
    Tensor<T> out(a.shape());
    for (std::int64_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
    return out;
}

template <typename T, typename F>
Tensor<T> zip(const Tensor<T>& a, const Tensor<T>& b, F f, const char* what = "zip") {
    require_same_shape(a, b, what);
    Tensor<T> out(a.shape());
    for (std::int64_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
    return out;
}

}  // namespace xmod
