#pragma once

#include <vector>

#include "flowbench/nn/finite_diff.hpp"
#include "flowbench/nn/graph.hpp"
#include "flowbench/nn/tensor.hpp"
#include "flowbench/util/rng.hpp"

namespace testutil {

inline void randomize(flowbench::nn::TensorD& t, flowbench::util::Pcg32& rng, double lo = -1.0,
                      double hi = 1.0) {
    for (auto& v : t.data) v = rng.uniform(lo, hi);
}

inline void randomize(flowbench::nn::TensorF& t, flowbench::util::Pcg32& rng, double lo = -1.0,
                      double hi = 1.0) {
    for (auto& v : t.data) v = static_cast<float>(rng.uniform(lo, hi));
}

// One central-difference probe of scalar `loss` w.r.t. element `idx` of `x`.
// Runs two step sizes; if the estimates disagree the probe straddled a ReLU
// kink (central differences are only valid where the function is smooth) and
// the caller should sample a different element.
struct FdProbe {
    double fd = 0.0;
    bool kink = false;
};

inline FdProbe fd_probe(flowbench::nn::GraphD& g, flowbench::nn::GraphD::Id loss,
                        flowbench::nn::TensorD& x, std::size_t idx, double analytic,
                        double eps = 1e-5, double tol = 1e-3) {
    auto eval_at = [&](double v) {
        double orig = x.data[idx];
        x.data[idx] = v;
        g.forward();
        x.data[idx] = orig;
        return g.value(loss).data[0];
    };
    double orig = x.data[idx];
    double fd1 = (eval_at(orig + eps) - eval_at(orig - eps)) / (2.0 * eps);
    double fd2 = (eval_at(orig + eps / 2) - eval_at(orig - eps / 2)) / eps;
    g.forward();
    FdProbe p;
    p.fd = fd2;
    double scale = std::max({std::abs(analytic), std::abs(fd2), 1e-6});
    p.kink = std::abs(fd1 - fd2) > 0.2 * tol * scale;
    return p;
}

// Compares the recorded analytic gradient `gx` of scalar `loss` w.r.t. tensor
// `x` against central finite differences, re-running the graph per probe.
// Returns the max relative error over all elements of x.
inline double gradcheck_max_rel_err(flowbench::nn::GraphD& g, flowbench::nn::GraphD::Id loss,
                                    flowbench::nn::TensorD& x, const flowbench::nn::TensorD& gx,
                                    double eps = 1e-5) {
    using flowbench::nn::rel_error;
    if (!(gx.shape == x.shape)) throw std::logic_error("gradcheck: gradient/tensor shape mismatch");
    double worst = 0.0;
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        double orig = x.data[i];
        x.data[i] = orig + eps;
        g.forward();
        double fp = g.value(loss).data[0];
        x.data[i] = orig - eps;
        g.forward();
        double fm = g.value(loss).data[0];
        x.data[i] = orig;
        double fd = (fp - fm) / (2.0 * eps);
        worst = std::max(worst, rel_error(gx.data[i], fd));
    }
    g.forward();
    return worst;
}

}  // namespace testutil
