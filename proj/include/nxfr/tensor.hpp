#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "nxfr/errors.hpp"

namespace nxfr {

/// Extents of a tensor, rank 1 to 4. A default-constructed Shape has rank 0
/// and marks an absent tensor (e.g. a gradient that was never computed).
class Shape {
public:
    static constexpr std::size_t kMaxRank = 4;

    Shape() = default;

    Shape(std::initializer_list<std::size_t> extents)
        : Shape(std::vector<std::size_t>(extents)) {}

    explicit Shape(const std::vector<std::size_t>& extents) {
        if (extents.empty() || extents.size() > kMaxRank) {
            throw ShapeError("tensor: rank must be in 1..4, got " + std::to_string(extents.size()));
        }
        for (std::size_t i = 0; i < extents.size(); ++i) {
            if (extents[i] == 0) {
                throw ShapeError("tensor: extent " + std::to_string(i) + " is zero");
            }
            extents_[i] = extents[i];
        }
        rank_ = extents.size();
    }

    std::size_t rank() const noexcept { return rank_; }

    std::size_t operator[](std::size_t axis) const {
        if (axis >= rank_) {
            throw ShapeError("tensor: axis " + std::to_string(axis) + " out of range for rank " +
                             std::to_string(rank_));
        }
        return extents_[axis];
    }

    std::size_t elements() const noexcept {
        if (rank_ == 0) {
            return 0;
        }
        std::size_t n = 1;
        for (std::size_t i = 0; i < rank_; ++i) {
            n *= extents_[i];
        }
        return n;
    }

    std::vector<std::size_t> extents() const {
        return {extents_.begin(), extents_.begin() + static_cast<std::ptrdiff_t>(rank_)};
    }

    /// Same extents with the leading (batch) axis replaced.
    Shape with_batch(std::size_t n) const {
        auto e = extents();
        e.at(0) = n;
        return Shape(e);
    }

    std::string str() const {
        std::ostringstream os;
        os << '[';
        for (std::size_t i = 0; i < rank_; ++i) {
            os << (i ? "x" : "") << extents_[i];
        }
        os << ']';
        return os.str();
    }

    friend bool operator==(const Shape& a, const Shape& b) noexcept {
        return a.rank_ == b.rank_ && a.extents_ == b.extents_;
    }

private:
    std::array<std::size_t, kMaxRank> extents_{};
    std::size_t rank_ = 0;
};

/// Dense row-major array of T with an explicit Shape. Image batches use
/// NCHW; dense weights use [out, in].
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T{0})
        : shape_(shape), data_(shape.elements(), fill) {}

    Tensor(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
        if (data_.size() != shape_.elements()) {
            throw ShapeError("tensor: " + std::to_string(data_.size()) + " values do not fill shape " +
                             shape_.str());
        }
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.rank(); }
    std::size_t dim(std::size_t axis) const { return shape_[axis]; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }
    std::span<T> values() noexcept { return data_; }
    std::span<const T> values() const noexcept { return data_; }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    /// Element of a rank-4 NCHW tensor.
    T& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) {
        return data_[((n * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
    }
    const T& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
        return data_[((n * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
    }

    /// Element of a rank-2 tensor.
    T& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    const T& at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

    void reshape(Shape shape) {
        if (shape.elements() != data_.size()) {
            throw ShapeError("tensor: cannot reshape " + shape_.str() + " to " + shape.str());
        }
        shape_ = shape;
    }

    Tensor reshaped(Shape shape) const {
        Tensor copy = *this;
        copy.reshape(shape);
        return copy;
    }

    void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.size());
        std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
        return Tensor<U>(shape_, std::move(out));
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    /// Bitwise equality of shape and contents.
    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    Shape shape_;
    std::vector<T> data_;
};

/// Throws a ShapeError naming `what` unless the two extents agree.
inline void require_extent(std::size_t got, std::size_t want, const std::string& what) {
    if (got != want) {
        throw ShapeError(what + ": expected " + std::to_string(want) + ", got " + std::to_string(got));
    }
}

inline void require_rank(const Shape& s, std::size_t rank, const std::string& what) {
    if (s.rank() != rank) {
        throw ShapeError(what + ": expected rank " + std::to_string(rank) + ", got shape " + s.str());
    }
}

} // namespace nxfr

#include <cstring>

namespace nxfr {

/// Byte-level comparison (distinguishes -0.0 from 0.0, treats identical NaN
/// payloads as equal).
template <typename T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
    return a.shape() == b.shape() &&
           (a.size() == 0 || std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0);
}

} // namespace nxfr
