#pragma once

#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "flowbench/dataset.hpp"
#include "flowbench/nn/adam.hpp"
#include "flowbench/nn/checkpoint.hpp"
#include "flowbench/nn/graph.hpp"
#include "flowbench/nn/init.hpp"
#include "flowbench/util/rng.hpp"

namespace flowbench::flownet {

// 5-layer encoder / 2-layer decoder flow network. All convolutions are 3x3
// zero-padded, upconvolutions 4x4 stride 2; two strided encoder layers, skip
// connections at full and half resolution, flow predicted first at half
// resolution and refined at full resolution.
template <typename T>
struct TinyFlowNetParams {
    nn::Tensor<T> enc1_w{nn::Shape{3, 3, 6, 64}}, enc1_b{nn::Shape{64}};      // -> skip_1.0
    nn::Tensor<T> enc2_w{nn::Shape{3, 3, 64, 64}}, enc2_b{nn::Shape{64}};     // stride 2
    nn::Tensor<T> enc3_w{nn::Shape{3, 3, 64, 128}}, enc3_b{nn::Shape{128}};   // -> skip_0.5
    nn::Tensor<T> enc4_w{nn::Shape{3, 3, 128, 128}}, enc4_b{nn::Shape{128}};  // stride 2
    nn::Tensor<T> enc5_w{nn::Shape{3, 3, 128, 128}}, enc5_b{nn::Shape{128}};
    nn::Tensor<T> up1_w{nn::Shape{4, 4, 128, 32}}, up1_b{nn::Shape{32}};
    nn::Tensor<T> half_flow_w{nn::Shape{3, 3, 160, 2}}, half_flow_b{nn::Shape{2}};
    nn::Tensor<T> up2_w{nn::Shape{4, 4, 160, 16}}, up2_b{nn::Shape{16}};
    nn::Tensor<T> full_flow_w{nn::Shape{3, 3, 80, 2}}, full_flow_b{nn::Shape{2}};

    void init(std::uint64_t seed) {
        util::Pcg32 rng(seed, 0xf10c0de);
        nn::init_conv(enc1_w, rng);
        nn::init_conv(enc2_w, rng);
        nn::init_conv(enc3_w, rng);
        nn::init_conv(enc4_w, rng);
        nn::init_conv(enc5_w, rng);
        nn::init_conv(up1_w, rng);
        nn::init_conv(half_flow_w, rng);
        nn::init_conv(up2_w, rng);
        nn::init_conv(full_flow_w, rng);
    }

    void for_each(const std::function<void(const std::string&, nn::Tensor<T>&)>& fn) {
        fn("tiny/enc1_w", enc1_w);
        fn("tiny/enc1_b", enc1_b);
        fn("tiny/enc2_w", enc2_w);
        fn("tiny/enc2_b", enc2_b);
        fn("tiny/enc3_w", enc3_w);
        fn("tiny/enc3_b", enc3_b);
        fn("tiny/enc4_w", enc4_w);
        fn("tiny/enc4_b", enc4_b);
        fn("tiny/enc5_w", enc5_w);
        fn("tiny/enc5_b", enc5_b);
        fn("tiny/up1_w", up1_w);
        fn("tiny/up1_b", up1_b);
        fn("tiny/half_flow_w", half_flow_w);
        fn("tiny/half_flow_b", half_flow_b);
        fn("tiny/up2_w", up2_w);
        fn("tiny/up2_b", up2_b);
        fn("tiny/full_flow_w", full_flow_w);
        fn("tiny/full_flow_b", full_flow_b);
    }

    void to_checkpoint(nn::Checkpoint& ck) {
        for_each([&](const std::string& name, nn::Tensor<T>& t) {
            if constexpr (std::is_same_v<T, float>)
                ck.add(name, t);
            else
                ck.add(name, t.template cast<float>());
        });
    }

    void from_checkpoint(const nn::Checkpoint& ck) {
        for_each([&](const std::string& name, nn::Tensor<T>& t) {
            const nn::TensorF& src = ck.require(name);
            if (!(src.shape == t.shape))
                throw std::runtime_error("checkpoint: shape mismatch for " + name + ": " + src.shape.str() +
                                         " vs " + t.shape.str());
            if constexpr (std::is_same_v<T, float>)
                t = src;
            else
                t = src.template cast<T>();
        });
    }
};

template <typename T>
struct TinyFlowNetNodes {
    typename nn::Graph<T>::Id input;      // [B,H,W,6]: two stacked [0,1] frames
    typename nn::Graph<T>::Id flow_full;  // [B,H,W,2]
    typename nn::Graph<T>::Id flow_half;  // [B,H/2,W/2,2]; invalid without the half branch
    typename nn::Graph<T>::Id flow_up;    // [B,H,W,2], nearest-upsampled half flow
};

// Wires the network into a graph. H and W must be divisible by 4 (two strided
// encoder stages, two doubling decoder stages). Inference consumers use
// flow_full only, so they can drop the half-resolution branch; the training
// loss also needs flow_up.
template <typename T>
TinyFlowNetNodes<T> build_tinyflownet(nn::Graph<T>& g, typename nn::Graph<T>::Id input,
                                      TinyFlowNetParams<T>& p, bool trainable,
                                      bool with_half_branch = true) {
    using Id = typename nn::Graph<T>::Id;
    using nn::Act;
    const nn::Shape& in_shape = g.shape_of(input);
    if (in_shape.rank != 4 || in_shape[3] != 6)
        throw std::invalid_argument("tinyflownet: input must be [B,H,W,6]");
    if (in_shape[1] % 4 != 0 || in_shape[2] % 4 != 0)
        throw std::invalid_argument("tinyflownet: extents must be divisible by 4");

    auto leaf = [&](nn::Tensor<T>& t) { return trainable ? g.param(&t) : g.frozen(&t); };
    Id skip_full = g.conv2d(input, leaf(p.enc1_w), leaf(p.enc1_b), 1, true, Act::relu);
    Id e2 = g.conv2d(skip_full, leaf(p.enc2_w), leaf(p.enc2_b), 2, true, Act::relu);
    Id skip_half = g.conv2d(e2, leaf(p.enc3_w), leaf(p.enc3_b), 1, true, Act::relu);
    Id e4 = g.conv2d(skip_half, leaf(p.enc4_w), leaf(p.enc4_b), 2, true, Act::relu);
    Id e5 = g.conv2d(e4, leaf(p.enc5_w), leaf(p.enc5_b), 1, true, Act::relu);
    Id u1 = g.tconv2d(e5, leaf(p.up1_w), leaf(p.up1_b), Act::relu);
    TinyFlowNetNodes<T> out;
    out.input = input;
    // "tmp" = [u1 | skip_half] (160 ch) and the final concat (80 ch) are read
    // virtually by their consumers rather than materialized.
    if (with_half_branch) {
        out.flow_half = g.conv2d_cat(u1, skip_half, leaf(p.half_flow_w), leaf(p.half_flow_b), 1, true);
        out.flow_up = g.upsample2x(out.flow_half);
    }
    Id u2 = g.tconv2d_cat(u1, skip_half, leaf(p.up2_w), leaf(p.up2_b), Act::relu);
    out.flow_full = g.conv2d_cat(u2, skip_full, leaf(p.full_flow_w), leaf(p.full_flow_b), 1, true);
    return out;
}

// FlowLoss: 100/(B*H*W) * sum_pixels [ EPE(full, target) + 0.5*EPE(up, target) ].
template <typename T>
typename nn::Graph<T>::Id flow_loss(nn::Graph<T>& g, typename nn::Graph<T>::Id flow_full,
                                    typename nn::Graph<T>::Id flow_up,
                                    typename nn::Graph<T>::Id target, int batch) {
    const nn::Shape& s = g.shape_of(flow_full);
    double norm = 100.0 / (static_cast<double>(batch) * s[1] * s[2]);
    auto epe_full = g.epe_sum(flow_full, target);
    auto epe_up = g.epe_sum(flow_up, target);
    return g.scale(g.add_weighted(epe_full, epe_up, 1.0, 0.5), norm);
}

// Writes a [0,1]-scaled 6-channel frame pair into row `slot` of a batch input.
inline void write_pair_input(nn::TensorF& dst, int slot, const render::Frame& prev,
                             const render::Frame& cur) {
    const int hw = render::kRes * render::kRes;
    float* out = dst.ptr() + static_cast<std::int64_t>(slot) * hw * 6;
    for (int i = 0; i < hw; ++i) {
        for (int c = 0; c < 3; ++c) {
            out[i * 6 + c] = static_cast<float>(prev.rgb[static_cast<std::size_t>(3 * i + c)]) / 255.0f;
            out[i * 6 + 3 + c] = static_cast<float>(cur.rgb[static_cast<std::size_t>(3 * i + c)]) / 255.0f;
        }
    }
}

inline void write_target(nn::TensorF& dst, int slot, const render::FlowField& target) {
    std::memcpy(dst.ptr() + static_cast<std::int64_t>(slot) * target.v.size(), target.v.data(),
                target.v.size() * sizeof(float));
}

struct FlowTrainConfig {
    long total_steps = 60000;   // desk-scale schedule (one tenth of the full one)
    long halve_every = 10000;   // lr halving period, same 6-segment geometry
    int batch = 8;
    double lr = 1e-4;
    double holdout_fraction = 0.05;
    long eval_every = 2000;
    std::uint64_t seed = 0;
    bool deterministic = false;  // zero the wall-clock column in logs
    long log_every = 200;
};

struct EpeReport {
    double overall = 0.0;      // mean per-pixel EPE
    double moving = 0.0;       // mean EPE on pixels with nonzero target flow
    double zero_moving = 0.0;  // zero-predictor EPE on the same pixels
    // EPE bucketed by target displacement magnitude (px/step): [0.35,0.7), [0.7,1.05), [1.05,inf)
    std::array<double, 3> by_speed{};
    std::array<long, 3> by_speed_n{};
};

struct FlowTrainResult {
    std::vector<std::pair<long, double>> loss_curve;  // (step, training loss)
    EpeReport final_holdout;
    double first_loss = 0.0, last_loss = 0.0;
};

namespace detail {

// Deterministic interleaved split: every 20th record is held out.
inline bool is_holdout(std::size_t idx, double fraction) {
    if (fraction <= 0.0) return false;
    long period = std::lround(1.0 / fraction);
    return period > 0 && static_cast<long>(idx) % period == period - 1;
}

}  // namespace detail

// Single-pair inference helper around a persistent batch-1 graph.
class TinyFlowNetRunner {
public:
    explicit TinyFlowNetRunner(TinyFlowNetParams<float>& params)
        : nodes_(build_tinyflownet(graph_, graph_.input(nn::Shape{1, render::kRes, render::kRes, 6}),
                                   params, /*trainable=*/false, /*with_half_branch=*/false)) {}

    const nn::TensorF& predict(const render::Frame& prev, const render::Frame& cur) {
        write_pair_input(graph_.data(nodes_.input), 0, prev, cur);
        graph_.forward();
        return graph_.value(nodes_.flow_full);
    }

    render::FlowField predict_field(const render::Frame& prev, const render::Frame& cur) {
        const nn::TensorF& t = predict(prev, cur);
        render::FlowField f;
        std::memcpy(f.v.data(), t.ptr(), f.v.size() * sizeof(float));
        return f;
    }

private:
    nn::GraphF graph_;
    TinyFlowNetNodes<float> nodes_;
};

// Mean endpoint errors of a predictor over a record set.
inline EpeReport evaluate_epe(const std::vector<const FlowRecord*>& records,
                              const std::function<render::FlowField(const FlowRecord&)>& predict) {
    EpeReport rep;
    double sum_all = 0.0, sum_mov = 0.0, sum_zero = 0.0;
    long n_all = 0, n_mov = 0;
    for (const FlowRecord* r : records) {
        render::FlowField pred = predict(*r);
        double disp = 0.0;  // target object displacement for bucketing
        for (int i = 0; i < render::kRes * render::kRes; ++i) {
            double tx = r->target.v[static_cast<std::size_t>(2 * i)];
            double ty = r->target.v[static_cast<std::size_t>(2 * i + 1)];
            double px = pred.v[static_cast<std::size_t>(2 * i)];
            double py = pred.v[static_cast<std::size_t>(2 * i + 1)];
            double epe = std::hypot(px - tx, py - ty);
            double mag = std::hypot(tx, ty);
            sum_all += epe;
            ++n_all;
            if (mag > 0.0) {
                sum_mov += epe;
                sum_zero += mag;
                ++n_mov;
                disp = std::max(disp, mag);
            }
        }
        double pair_epe_mov = 0.0;
        long pair_n = 0;
        for (int i = 0; i < render::kRes * render::kRes; ++i) {
            double tx = r->target.v[static_cast<std::size_t>(2 * i)];
            double ty = r->target.v[static_cast<std::size_t>(2 * i + 1)];
            if (tx == 0.0 && ty == 0.0) continue;
            double px = pred.v[static_cast<std::size_t>(2 * i)];
            double py = pred.v[static_cast<std::size_t>(2 * i + 1)];
            pair_epe_mov += std::hypot(px - tx, py - ty);
            ++pair_n;
        }
        if (pair_n > 0) {
            int bucket = disp < 0.7 ? 0 : (disp < 1.05 ? 1 : 2);
            rep.by_speed[static_cast<std::size_t>(bucket)] += pair_epe_mov / static_cast<double>(pair_n);
            rep.by_speed_n[static_cast<std::size_t>(bucket)] += 1;
        }
    }
    rep.overall = n_all ? sum_all / static_cast<double>(n_all) : 0.0;
    rep.moving = n_mov ? sum_mov / static_cast<double>(n_mov) : 0.0;
    rep.zero_moving = n_mov ? sum_zero / static_cast<double>(n_mov) : 0.0;
    for (int b = 0; b < 3; ++b)
        if (rep.by_speed_n[static_cast<std::size_t>(b)])
            rep.by_speed[static_cast<std::size_t>(b)] /= static_cast<double>(rep.by_speed_n[static_cast<std::size_t>(b)]);
    return rep;
}

inline std::vector<const FlowRecord*> holdout_records(const FlowDataset& ds, double fraction) {
    std::vector<const FlowRecord*> out;
    for (std::size_t i = 0; i < ds.records.size(); ++i)
        if (detail::is_holdout(i, fraction)) out.push_back(&ds.records[i]);
    return out;
}

inline std::vector<std::size_t> train_indices(const FlowDataset& ds, double fraction) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < ds.records.size(); ++i)
        if (!detail::is_holdout(i, fraction)) out.push_back(i);
    return out;
}

// Supervised distillation of the flow network against the dataset's analytic
// targets: Adam on FlowLoss with the halving lr schedule and periodic
// held-out EPE evaluation. Aborts on non-finite loss.
inline FlowTrainResult train_flow(TinyFlowNetParams<float>& params, const FlowDataset& ds,
                                  const FlowTrainConfig& cfg,
                                  const std::function<void(const std::string&)>& log_line = {}) {
    if (ds.records.empty()) throw std::invalid_argument("train_flow: empty dataset");
    auto train_idx = train_indices(ds, cfg.holdout_fraction);
    auto holdout = holdout_records(ds, cfg.holdout_fraction);
    if (train_idx.empty()) throw std::invalid_argument("train_flow: no training records after split");

    nn::GraphF g;
    auto input = g.input(nn::Shape{cfg.batch, render::kRes, render::kRes, 6});
    auto target = g.input(nn::Shape{cfg.batch, render::kRes, render::kRes, 2});
    auto net = build_tinyflownet(g, input, params, /*trainable=*/true);
    auto loss = flow_loss(g, net.flow_full, net.flow_up, target, cfg.batch);
    nn::AdamOptimizer<float> opt(g);

    util::Pcg32 rng(cfg.seed, 0x7ea11);
    FlowTrainResult res;
    auto t0 = std::chrono::steady_clock::now();

    auto eval_holdout = [&]() {
        TinyFlowNetRunner runner(params);
        return evaluate_epe(holdout, [&](const FlowRecord& r) { return runner.predict_field(r.prev, r.cur); });
    };

    if (log_line) log_line("step,lr,loss,holdout_epe,holdout_epe_moving,wall_s");
    for (long step = 0; step < cfg.total_steps; ++step) {
        for (int b = 0; b < cfg.batch; ++b) {
            const FlowRecord& r =
                ds.records[train_idx[rng.next_u32() % static_cast<std::uint32_t>(train_idx.size())]];
            write_pair_input(g.data(input), b, r.prev, r.cur);
            write_target(g.data(target), b, r.target);
        }
        g.forward();
        double lv = g.value(loss).data[0];
        if (!std::isfinite(lv))
            throw std::runtime_error("train_flow: non-finite loss at step " + std::to_string(step));
        if (step == 0) res.first_loss = lv;
        res.last_loss = lv;
        g.backward(loss);
        double lr = cfg.lr * std::pow(0.5, static_cast<double>(step / cfg.halve_every));
        opt.step(g, lr);

        bool log_now = (step % cfg.log_every == 0) || step == cfg.total_steps - 1;
        bool eval_now = !holdout.empty() && ((step % cfg.eval_every == 0) || step == cfg.total_steps - 1);
        if (log_now) res.loss_curve.emplace_back(step, lv);
        if (log_line && log_now) {
            EpeReport rep;
            if (eval_now) rep = eval_holdout();
            double wall = cfg.deterministic
                              ? 0.0
                              : std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            char buf[256];
            std::snprintf(buf, sizeof(buf), "%ld,%.8g,%.8g,%.8g,%.8g,%.3f", step, lr, lv,
                          eval_now ? rep.overall : -1.0, eval_now ? rep.moving : -1.0, wall);
            log_line(buf);
        }
    }
    if (!holdout.empty()) res.final_holdout = eval_holdout();
    return res;
}

}  // namespace flowbench::flownet
