#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace flowbench::nn {

// Extents of a dense row-major array, rank <= 4.
// Conventions: rank 4 = batch x height x width x channels, rank 2 = batch x features.
struct Shape {
    std::array<int, 4> d{1, 1, 1, 1};
    int rank = 0;

    Shape() = default;
    Shape(std::initializer_list<int> dims) {
        if (dims.size() > 4) throw std::invalid_argument("Shape: rank > 4");
        rank = static_cast<int>(dims.size());
        int i = 0;
        for (int v : dims) d[static_cast<std::size_t>(i++)] = v;
    }

    int operator[](int i) const { return d[static_cast<std::size_t>(i)]; }
    int& operator[](int i) { return d[static_cast<std::size_t>(i)]; }

    std::int64_t count() const {
        std::int64_t n = 1;
        for (int i = 0; i < rank; ++i) n *= d[static_cast<std::size_t>(i)];
        return rank == 0 ? 0 : n;
    }

    bool operator==(const Shape& o) const {
        if (rank != o.rank) return false;
        for (int i = 0; i < rank; ++i)
            if (d[static_cast<std::size_t>(i)] != o.d[static_cast<std::size_t>(i)]) return false;
        return true;
    }
    bool operator!=(const Shape& o) const { return !(*this == o); }

    std::string str() const {
        std::string s = "[";
        for (int i = 0; i < rank; ++i) {
            if (i) s += "x";
            s += std::to_string(d[static_cast<std::size_t>(i)]);
        }
        return s + "]";
    }
};

// Dense contiguous tensor. Gradients are not stored here; the autodiff
// graph owns per-node gradient buffers and optimizer state pairs a
// same-shaped accumulator with each parameter.
template <typename T>
struct Tensor {
    Shape shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(s), data(static_cast<std::size_t>(s.count()), T(0)) {}
    Tensor(Shape s, std::vector<T> values) : shape(s), data(std::move(values)) {
        if (static_cast<std::int64_t>(data.size()) != shape.count())
            throw std::invalid_argument("Tensor: data length " + std::to_string(data.size()) +
                                        " does not match shape " + shape.str());
    }

    std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }
    void zero() { fill(T(0)); }

    // 4-d accessor (NHWC); unused leading indices must be 0.
    T& at(int n, int h, int w, int c) {
        return data[static_cast<std::size_t>(((static_cast<std::int64_t>(n) * shape[1] + h) * shape[2] + w) * shape[3] + c)];
    }
    T at(int n, int h, int w, int c) const {
        return data[static_cast<std::size_t>(((static_cast<std::int64_t>(n) * shape[1] + h) * shape[2] + w) * shape[3] + c)];
    }
    T& at(int n, int f) { return data[static_cast<std::size_t>(static_cast<std::int64_t>(n) * shape[1] + f)]; }
    T at(int n, int f) const { return data[static_cast<std::size_t>(static_cast<std::int64_t>(n) * shape[1] + f)]; }

    bool all_finite() const {
        for (const T& v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out(shape);
        for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace flowbench::nn
