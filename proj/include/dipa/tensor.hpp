#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "dipa/errors.hpp"

namespace dipa {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

// Dense row-major contiguous tensor. Rank-0 (shape []) holds one scalar.
// Immutable from the caller's perspective once an op returns it; kernels
// build a fresh tensor and hand it back by value.
template <typename T>
class Tensor {
    static_assert(std::is_floating_point_v<T>, "Tensor element type must be f32 or f64");

public:
    Tensor() : shape_{}, data_(1, T(0)) {}

    explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(checked_numel(shape_), T(0)) {}

    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != checked_numel(shape_))
            throw ShapeError("Tensor: data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_str(shape_));
    }

    static Tensor full(Shape shape, T v) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }

    static Tensor scalar(T v) {
        Tensor t;
        t.data_[0] = v;
        return t;
    }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    bool is_scalar() const { return data_.size() == 1; }

    T item() const {
        if (!is_scalar()) throw ShapeError("Tensor::item on non-scalar " + shape_str(shape_));
        return data_[0];
    }

    std::size_t last_dim() const { return shape_.empty() ? 1 : shape_.back(); }
    std::size_t row_count() const { return size() / last_dim(); }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    // 2-D convenience accessor, used heavily by oracles and tests.
    T& at(std::size_t i, std::size_t j) { return data_[i * last_dim() + j]; }
    const T& at(std::size_t i, std::size_t j) const { return data_[i * last_dim() + j]; }

    std::vector<T>& data() { return data_; }
    const std::vector<T>& data() const { return data_; }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.size());
        for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
        return Tensor<U>(shape_, std::move(out));
    }

    bool all_finite() const {
        for (T v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

private:
    static std::size_t checked_numel(const Shape& shape) {
        for (std::size_t d : shape)
            if (d == 0) throw ShapeError("Tensor: zero extent in shape " + shape_str(shape));
        return shape_numel(shape);
    }

    Shape shape_;
    std::vector<T> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

template <typename T>
void check_finite(const Tensor<T>& t, const char* op) {
    if (!t.all_finite())
        throw NumericalError(std::string(op) + ": non-finite value in result " + shape_str(t.shape()));
}

}  // namespace dipa
