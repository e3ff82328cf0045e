#pragma once

// Fast invariant suite behind the `selfcheck` subcommand: spot versions of
// the checks the acceptance suite runs at full scale. Each check prints one
// line; the suite returns false if anything failed.

#include <chrono>
#include <ostream>

#include "flowbench/bench.hpp"
#include "flowbench/flownet.hpp"
#include "flowbench/nn/finite_diff.hpp"

namespace flowbench::selfcheck {

namespace detail {

struct Reporter {
    std::ostream& os;
    bool all_ok = true;
    void check(const std::string& name, bool ok, const std::string& detail = "") {
        os << (ok ? "[ok]   " : "[FAIL] ") << name;
        if (!detail.empty()) os << " (" << detail << ")";
        os << "\n";
        all_ok = all_ok && ok;
    }
};

inline double conv_gradcheck_spot(std::uint64_t seed) {
    using nn::Shape;
    util::Pcg32 rng(seed);
    nn::GraphD g;
    nn::TensorD x(Shape{1, 6, 6, 2}), w(Shape{3, 3, 2, 3}), b(Shape{3});
    for (auto& v : x.data) v = rng.uniform(-1, 1);
    for (auto& v : w.data) v = rng.uniform(-1, 1);
    auto xp = g.param(&x);
    auto wp = g.param(&w);
    auto bp = g.param(&b);
    auto loss = g.sum_all(g.conv2d(xp, wp, bp, 1, false));
    g.forward();
    g.backward(loss);
    nn::TensorD gw = g.grad(wp);
    double worst = 0.0;
    for (int k = 0; k < 12; ++k) {
        std::size_t i = rng.next_u32() % w.data.size();
        double orig = w.data[i];
        double eps = 1e-5;
        w.data[i] = orig + eps;
        g.forward();
        double fp = g.value(loss).data[0];
        w.data[i] = orig - eps;
        g.forward();
        double fm = g.value(loss).data[0];
        w.data[i] = orig;
        worst = std::max(worst, nn::rel_error(gw.data[i], (fp - fm) / (2 * eps)));
    }
    return worst;
}

}  // namespace detail

inline bool run_all(std::ostream& os) {
    detail::Reporter r{os};
    auto t0 = std::chrono::steady_clock::now();

    // gradients (spot check; the acceptance суite runs the full randomized set)
    r.check("conv2d gradient vs finite differences", detail::conv_gradcheck_spot(1) < 1e-4);

    // flow loss closed forms
    {
        nn::GraphF g;
        auto full = g.input(nn::Shape{1, 84, 84, 2});
        auto up = g.input(nn::Shape{1, 84, 84, 2});
        auto target = g.input(nn::Shape{1, 84, 84, 2});
        auto loss = flownet::flow_loss(g, full, up, target, 1);
        g.forward();
        bool ok0 = std::abs(g.value(loss).data[0]) <= 1e-4;
        for (std::size_t i = 0; i < g.data(full).data.size(); i += 2) g.data(full).data[i] = 1.0f;
        g.forward();
        bool ok100 = std::abs(g.value(loss).data[0] - 100.0) <= 1e-4;
        for (std::size_t i = 0; i < g.data(up).data.size(); i += 2) g.data(up).data[i] = 1.0f;
        g.forward();
        bool ok150 = std::abs(g.value(loss).data[0] - 150.0) <= 1e-4;
        r.check("flow loss closed forms 0/100/150", ok0 && ok100 && ok150);
    }

    // warp consistency, 20 random pairs pooled
    {
        util::Pcg32 rng(23);
        env2d::EnvConfig cfg;
        render::WarpErr pooled;
        for (int i = 0; i < 20; ++i) {
            env2d::Env env(cfg);
            env.reset(rng.next_u32());
            for (int t = 0; t < 5; ++t) env.step({rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05)});
            auto prev = env.state();
            auto pf = render::render(prev, cfg);
            auto sr = env.step({rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05)});
            if (sr.ball_respawned) continue;
            auto flow = render::ground_truth_flow(prev, env.state(), cfg);
            auto err = render::masked_warp_err(pf, render::render(env.state(), cfg), flow,
                                               render::erode1(render::nonzero_flow_mask(flow)));
            pooled.sum += err.sum;
            pooled.n += err.n;
        }
        r.check("warp consistency (pooled MAE < 2/255)", pooled.n > 0 && pooled.mae() < 2.0 / 255.0);
    }

    // physics: speed preservation and exact termination
    {
        env2d::EnvConfig cfg;
        cfg.speed = 0.06;
        env2d::Env env(cfg);
        env.reset(2);
        double s0 = env.state().ball_v.norm();
        bool speed_ok = true;
        int steps = 0, done_at = -1;
        for (int ep = 0; ep < 8; ++ep) {
            env.reset(2 + static_cast<std::uint64_t>(ep));
            for (int t = 0; t < cfg.episode_len; ++t) {
                auto res = env.step({0, 0});
                speed_ok = speed_ok && std::abs(env.state().ball_v.norm() - s0) <= 1e-12;
                ++steps;
                if (res.done) done_at = t + 1;
            }
        }
        r.check("ball speed preserved through reflections", speed_ok,
                std::to_string(steps) + " steps");
        r.check("episodes terminate at exactly 250 steps", done_at == 250);
    }

    // determinism: identical seeded rollouts
    {
        auto roll = [](std::uint64_t seed) {
            env2d::EnvConfig cfg;
            cfg.task = env2d::Task::catcher;
            env2d::Env env(cfg);
            env.reset(seed);
            util::Pcg32 arng(seed);
            std::vector<double> out;
            for (int t = 0; t < 250; ++t) {
                auto sr = env.step({arng.uniform(-0.05, 0.05), arng.uniform(-0.05, 0.05)});
                out.push_back(sr.reward);
            }
            return out;
        };
        r.check("seeded rollouts are bit-identical", roll(5) == roll(5));
    }

    // velocity vector extraction on simulated steps
    {
        util::Pcg32 rng(7);
        env2d::EnvConfig cfg;
        cfg.speed = 0.05;
        bool ok = true;
        for (int i = 0; i < 20; ++i) {
            env2d::Env env(cfg);
            env.reset(rng.next_u32());
            env2d::EnvState s = env.state();
            s.th1 = 2.6;  // park the arm
            s.th2 = 0.2;
            s.w1 = s.w2 = 0;
            env.set_state(s);
            auto prev = env.state();
            auto sr = env.step({0, 0});
            if (sr.ball_respawned) continue;
            auto flow = render::ground_truth_flow(prev, env.state(), cfg);
            auto v = render::extract_velocity_vector(flow);
            double ex = render::kPxPerUnit * (env.state().ball_p.x - prev.ball_p.x);
            double ey = -render::kPxPerUnit * (env.state().ball_p.y - prev.ball_p.y);
            ok = ok && std::abs(v[0] - ex) <= 0.5 && std::abs(v[1] - ey) <= 0.5;
        }
        r.check("velocity vector recovers ball displacement (+-0.5 px)", ok);
    }

    // flow net shape chain
    {
        nn::GraphF g;
        flownet::TinyFlowNetParams<float> p;
        auto net = flownet::build_tinyflownet(g, g.input(nn::Shape{1, 84, 84, 6}), p, false);
        r.check("flow network shape chain (84/42 outputs)",
                g.shape_of(net.flow_full) == nn::Shape{1, 84, 84, 2} &&
                    g.shape_of(net.flow_half) == nn::Shape{1, 42, 42, 2});
    }

    // oracle beats random
    {
        env2d::EnvConfig cfg;
        auto oracle = harness::evaluate_oracle(cfg, 30, 5);
        auto rnd = harness::evaluate_random(cfg, 30, 5);
        r.check("scripted oracle beats the random policy", oracle.mean_score > rnd.mean_score);
    }

    double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    os << (r.all_ok ? "selfcheck passed" : "selfcheck FAILED") << " in " << wall << "s\n";
    return r.all_ok;
}

}  // namespace flowbench::selfcheck
