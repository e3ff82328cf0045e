#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "flowbench/nn/graph.hpp"
#include "flowbench/nn/tensor.hpp"

namespace flowbench::nn {

// Per-parameter Adam accumulators. Moments shape-match the parameter; the
// step counter advances by exactly one per update.
template <typename T>
struct AdamState {
    Tensor<T> m;
    Tensor<T> v;
    std::int64_t step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    explicit AdamState(const Shape& s) : m(s), v(s) {}
    AdamState() = default;
};

// Standard bias-corrected Adam update of one parameter tensor in place.
template <typename T>
inline void adam_step(Tensor<T>& param, const Tensor<T>& grad, AdamState<T>& st, double lr) {
    if (param.shape != grad.shape || param.shape != st.m.shape)
        throw std::invalid_argument("adam_step: shape mismatch");
    if (lr <= 0.0) throw std::invalid_argument("adam_step: lr must be positive");
    st.step += 1;
    const double b1 = st.beta1, b2 = st.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(st.step));
    const std::int64_t nvals = param.size();
    for (std::int64_t i = 0; i < nvals; ++i) {
        double gi = static_cast<double>(grad.data[static_cast<std::size_t>(i)]);
        if (!std::isfinite(gi)) throw std::runtime_error("adam_step: non-finite gradient");
        double mi = b1 * static_cast<double>(st.m.data[static_cast<std::size_t>(i)]) + (1.0 - b1) * gi;
        double vi = b2 * static_cast<double>(st.v.data[static_cast<std::size_t>(i)]) + (1.0 - b2) * gi * gi;
        st.m.data[static_cast<std::size_t>(i)] = static_cast<T>(mi);
        st.v.data[static_cast<std::size_t>(i)] = static_cast<T>(vi);
        double mhat = mi / bc1;
        double vhat = vi / bc2;
        param.data[static_cast<std::size_t>(i)] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + st.epsilon));
    }
}

// Drives adam_step over the trainable parameters of a graph, visiting them in
// creation order so updates are deterministic.
template <typename T>
class AdamOptimizer {
public:
    explicit AdamOptimizer(const Graph<T>& graph) {
        for (const auto& [tensor, id] : graph.trainable()) states_.emplace_back(tensor->shape);
    }

    void step(Graph<T>& graph, double lr) {
        const auto& params = graph.trainable();
        if (params.size() != states_.size()) throw std::logic_error("AdamOptimizer: parameter set changed");
        for (std::size_t i = 0; i < params.size(); ++i)
            adam_step(*params[i].first, graph.grad(params[i].second), states_[i], lr);
    }

    std::vector<AdamState<T>>& states() { return states_; }

private:
    std::vector<AdamState<T>> states_;
};

}  // namespace flowbench::nn
