#pragma once

#include <functional>

#include "flowbench/nn/tensor.hpp"

namespace flowbench::nn {

// Central-difference gradient of a scalar function with respect to `x`:
// (fn(x+eps) - fn(x-eps)) / (2 eps) per element. The function is re-evaluated
// after each in-place perturbation; 64-bit mode is expected for oracle use.
inline TensorD finite_difference_gradient(const std::function<double()>& fn, TensorD& x,
                                          double eps = 1e-5) {
    TensorD g(x.shape);
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        double orig = x.data[i];
        x.data[i] = orig + eps;
        double fp = fn();
        x.data[i] = orig - eps;
        double fm = fn();
        x.data[i] = orig;
        g.data[i] = (fp - fm) / (2.0 * eps);
    }
    return g;
}

// Same, restricted to a subset of element indices (for large parameter sets the
// full sweep is prohibitive; gradient checks sample elements instead).
inline void finite_difference_at(const std::function<double()>& fn, TensorD& x,
                                 const std::vector<std::size_t>& indices, double eps,
                                 std::vector<double>& out) {
    out.resize(indices.size());
    for (std::size_t j = 0; j < indices.size(); ++j) {
        std::size_t i = indices[j];
        double orig = x.data[i];
        x.data[i] = orig + eps;
        double fp = fn();
        x.data[i] = orig - eps;
        double fm = fn();
        x.data[i] = orig;
        out[j] = (fp - fm) / (2.0 * eps);
    }
}

// Relative error with an absolute floor so that near-zero pairs compare sanely.
inline double rel_error(double a, double b, double floor = 1e-6) {
    double denom = std::max({std::abs(a), std::abs(b), floor});
    return std::abs(a - b) / denom;
}

}  // namespace flowbench::nn
