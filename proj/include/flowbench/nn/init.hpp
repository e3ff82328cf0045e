#pragma once

#include <cmath>

#include "flowbench/nn/tensor.hpp"
#include "flowbench/util/rng.hpp"

namespace flowbench::nn {

// Fan-in-scaled uniform init, U(-gain*sqrt(1/fan_in), +gain*sqrt(1/fan_in)).
// Hidden rectifier layers use gain sqrt(6) (keeps activation variance steady);
// output heads use small gains. Biases start at zero everywhere.
template <typename T>
inline void init_fan_in_uniform(Tensor<T>& w, int fan_in, util::Pcg32& rng, double gain = 1.0) {
    double limit = gain * std::sqrt(1.0 / static_cast<double>(fan_in));
    for (auto& v : w.data) v = static_cast<T>(rng.uniform(-limit, limit));
}

// Convolution / transposed-convolution weights [kh,kw,Cin,Cout].
template <typename T>
inline void init_conv(Tensor<T>& w, util::Pcg32& rng, double gain = 1.0) {
    int fan_in = w.shape[0] * w.shape[1] * w.shape[2];
    init_fan_in_uniform(w, fan_in, rng, gain);
}

// Fully-connected weights [F,G].
template <typename T>
inline void init_fc(Tensor<T>& w, util::Pcg32& rng, double gain = 1.0) {
    init_fan_in_uniform(w, w.shape[0], rng, gain);
}

}  // namespace flowbench::nn
