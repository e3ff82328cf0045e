#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>

#include "flowbench/flow.hpp"
#include "flowbench/flownet.hpp"
#include "flowbench/nn/checkpoint.hpp"
#include "flowbench/nn/graph.hpp"
#include "flowbench/nn/init.hpp"
#include "flowbench/util/rng.hpp"

namespace flowbench::rl {

inline constexpr int kActions = 2;  // torque per joint

enum class Perception { table_s1, residual_s2, tinyflownet_front, none };

inline const char* perception_name(Perception p) {
    switch (p) {
        case Perception::table_s1: return "standard";
        case Perception::residual_s2: return "residual";
        case Perception::tinyflownet_front: return "tinyflownet";
        case Perception::none: return "none";
    }
    return "?";
}

inline Perception perception_from_name(const std::string& s) {
    if (s == "standard" || s == "table_s1") return Perception::table_s1;
    if (s == "residual") return Perception::residual_s2;
    if (s == "tinyflownet" || s == "flownet") return Perception::tinyflownet_front;
    if (s == "none") return Perception::none;
    throw std::invalid_argument("unknown perception variant: " + s);
}

struct PolicyConfig {
    render::ObsVariant obs = render::ObsVariant::image;
    Perception perception = Perception::table_s1;
    int vec_dims = 6;      // state-vector width fed to the middle part
    bool lstm = false;     // recurrent layer after the middle part
    int lstm_hidden = 64;
    bool train_flownet = false;  // from-scratch mode: gradients flow into the frontend
    double flow_scale = env2d::kBaseSpeed * render::kPxPerUnit;

    int pixel_channels() const {
        if (perception == Perception::none) return 0;
        if (perception == Perception::tinyflownet_front) return 6;  // [prev, cur]
        render::ObservationSpec s;
        s.variant = obs;
        return s.channels();
    }
};

// All learnable tensors of one agent. The perception part follows the selected
// architecture; the middle part is a 64-wide vector branch joined with the
// flattened perception features; heads are linear.
template <typename T>
struct PolicyParams {
    // hidden rectifier layers keep activation variance; the policy head
    // starts near zero so early updates shape the trunk, not the actions
    static constexpr double kHiddenGain = 1.0;
    static constexpr double kPolicyHeadGain = 1.0;

    PolicyConfig cfg;

    // standard perception (also the trunk behind the flow frontend)
    nn::Tensor<T> conv1_w, conv1_b, conv2_w, conv2_b, conv3_w, conv3_b;
    // residual perception
    nn::Tensor<T> rc1_w, rc1_b, rc2_w, rc2_b;  // entry convs
    nn::Tensor<T> rb1a_w, rb1a_b, rb1b_w, rb1b_b;
    nn::Tensor<T> rc3_w, rc3_b;
    nn::Tensor<T> rb2a_w, rb2a_b, rb2b_w, rb2b_b;
    nn::Tensor<T> rc4_w, rc4_b;
    nn::Tensor<T> rfc_w, rfc_b;  // -> 110 features
    // flow frontend
    flownet::TinyFlowNetParams<T> tiny;
    // middle part + recurrence + heads
    nn::Tensor<T> vec_w, vec_b;
    nn::Tensor<T> mid_w, mid_b;
    nn::Tensor<T> lstm_wih, lstm_whh, lstm_b;
    nn::Tensor<T> pi_w, pi_b;
    nn::Tensor<T> v_w, v_b;
    nn::Tensor<T> log_std;  // state-independent, init 0

    int perception_out = 0;

    explicit PolicyParams(const PolicyConfig& c, std::uint64_t seed = 0) : cfg(c) {
        util::Pcg32 rng(seed, 0x90110c1);
        int img_c = cfg.pixel_channels();
        int conv_in = img_c;
        if (cfg.perception == Perception::tinyflownet_front) {
            tiny.init(seed + 1);
            conv_in = 5;  // current image + predicted flow
        }
        switch (cfg.perception) {
            case Perception::table_s1:
            case Perception::tinyflownet_front: {
                conv1_w = nn::Tensor<T>(nn::Shape{8, 8, conv_in, 32});
                conv1_b = nn::Tensor<T>(nn::Shape{32});
                conv2_w = nn::Tensor<T>(nn::Shape{4, 4, 32, 64});
                conv2_b = nn::Tensor<T>(nn::Shape{64});
                conv3_w = nn::Tensor<T>(nn::Shape{3, 3, 64, 64});
                conv3_b = nn::Tensor<T>(nn::Shape{64});
                nn::init_conv(conv1_w, rng, kHiddenGain);
                nn::init_conv(conv2_w, rng, kHiddenGain);
                nn::init_conv(conv3_w, rng, kHiddenGain);
                perception_out = 7 * 7 * 64;  // 84 -> 20 -> 9 -> 7, no padding
                break;
            }
            case Perception::residual_s2: {
                rc1_w = nn::Tensor<T>(nn::Shape{3, 3, img_c, 64});
                rc1_b = nn::Tensor<T>(nn::Shape{64});
                rc2_w = nn::Tensor<T>(nn::Shape{3, 3, 64, 128});
                rc2_b = nn::Tensor<T>(nn::Shape{128});
                rb1a_w = nn::Tensor<T>(nn::Shape{3, 3, 128, 128});
                rb1a_b = nn::Tensor<T>(nn::Shape{128});
                rb1b_w = nn::Tensor<T>(nn::Shape{3, 3, 128, 128});
                rb1b_b = nn::Tensor<T>(nn::Shape{128});
                rc3_w = nn::Tensor<T>(nn::Shape{3, 3, 128, 128});
                rc3_b = nn::Tensor<T>(nn::Shape{128});
                rb2a_w = nn::Tensor<T>(nn::Shape{3, 3, 128, 128});
                rb2a_b = nn::Tensor<T>(nn::Shape{128});
                rb2b_w = nn::Tensor<T>(nn::Shape{3, 3, 128, 128});
                rb2b_b = nn::Tensor<T>(nn::Shape{128});
                rc4_w = nn::Tensor<T>(nn::Shape{3, 3, 128, 128});
                rc4_b = nn::Tensor<T>(nn::Shape{128});
                // 84 ->(s1 none) 82 ->(s2 none) 40 ->(res) 40 ->(s2 none) 19 ->(res) 19 ->(s2 none) 9
                rfc_w = nn::Tensor<T>(nn::Shape{9 * 9 * 128, 110});
                rfc_b = nn::Tensor<T>(nn::Shape{110});
                for (auto* w : {&rc1_w, &rc2_w, &rb1a_w, &rb1b_w, &rc3_w, &rb2a_w, &rb2b_w, &rc4_w})
                    nn::init_conv(*w, rng, kHiddenGain);
                nn::init_fc(rfc_w, rng, kHiddenGain);
                perception_out = 110;
                break;
            }
            case Perception::none:
                perception_out = 0;
                break;
        }
        vec_w = nn::Tensor<T>(nn::Shape{cfg.vec_dims, 64});
        vec_b = nn::Tensor<T>(nn::Shape{64});
        mid_w = nn::Tensor<T>(nn::Shape{perception_out + 64, 64});
        mid_b = nn::Tensor<T>(nn::Shape{64});
        nn::init_fc(vec_w, rng, kHiddenGain);
        nn::init_fc(mid_w, rng, kHiddenGain);
        int head_in = 64;
        if (cfg.lstm) {
            lstm_wih = nn::Tensor<T>(nn::Shape{64, 4 * cfg.lstm_hidden});
            lstm_whh = nn::Tensor<T>(nn::Shape{cfg.lstm_hidden, 4 * cfg.lstm_hidden});
            lstm_b = nn::Tensor<T>(nn::Shape{4 * cfg.lstm_hidden});
            nn::init_fc(lstm_wih, rng);
            nn::init_fc(lstm_whh, rng);
            head_in = cfg.lstm_hidden;
        }
        pi_w = nn::Tensor<T>(nn::Shape{head_in, kActions});
        pi_b = nn::Tensor<T>(nn::Shape{kActions});
        v_w = nn::Tensor<T>(nn::Shape{head_in, 1});
        v_b = nn::Tensor<T>(nn::Shape{1});
        nn::init_fc(pi_w, rng, kPolicyHeadGain);
        nn::init_fc(v_w, rng);
        log_std = nn::Tensor<T>(nn::Shape{kActions});  // zeros: std = 1
    }

    void for_each(const std::function<void(const std::string&, nn::Tensor<T>&)>& fn) {
        auto maybe = [&](const char* name, nn::Tensor<T>& t) {
            if (t.size() > 0) fn(name, t);
        };
        maybe("policy/conv1_w", conv1_w);
        maybe("policy/conv1_b", conv1_b);
        maybe("policy/conv2_w", conv2_w);
        maybe("policy/conv2_b", conv2_b);
        maybe("policy/conv3_w", conv3_w);
        maybe("policy/conv3_b", conv3_b);
        maybe("policy/rc1_w", rc1_w);
        maybe("policy/rc1_b", rc1_b);
        maybe("policy/rc2_w", rc2_w);
        maybe("policy/rc2_b", rc2_b);
        maybe("policy/rb1a_w", rb1a_w);
        maybe("policy/rb1a_b", rb1a_b);
        maybe("policy/rb1b_w", rb1b_w);
        maybe("policy/rb1b_b", rb1b_b);
        maybe("policy/rc3_w", rc3_w);
        maybe("policy/rc3_b", rc3_b);
        maybe("policy/rb2a_w", rb2a_w);
        maybe("policy/rb2a_b", rb2a_b);
        maybe("policy/rb2b_w", rb2b_w);
        maybe("policy/rb2b_b", rb2b_b);
        maybe("policy/rc4_w", rc4_w);
        maybe("policy/rc4_b", rc4_b);
        maybe("policy/rfc_w", rfc_w);
        maybe("policy/rfc_b", rfc_b);
        if (cfg.perception == Perception::tinyflownet_front) tiny.for_each(fn);
        maybe("policy/vec_w", vec_w);
        maybe("policy/vec_b", vec_b);
        maybe("policy/mid_w", mid_w);
        maybe("policy/mid_b", mid_b);
        maybe("policy/lstm_wih", lstm_wih);
        maybe("policy/lstm_whh", lstm_whh);
        maybe("policy/lstm_b", lstm_b);
        maybe("policy/pi_w", pi_w);
        maybe("policy/pi_b", pi_b);
        maybe("policy/v_w", v_w);
        maybe("policy/v_b", v_b);
        maybe("policy/log_std", log_std);
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
                throw std::runtime_error("checkpoint: shape mismatch for " + name);
            if constexpr (std::is_same_v<T, float>)
                t = src;
            else
                t = src.template cast<T>();
        });
    }
};

template <typename T>
struct PolicyNodes {
    typename nn::Graph<T>::Id obs_in;   // pixels (invalid for vector-only agents)
    typename nn::Graph<T>::Id vec_in;   // [B, vec_dims]
    typename nn::Graph<T>::Id h_in, c_in, mask_in;  // recurrent state (lstm only)
    typename nn::Graph<T>::Id mean;     // [B, kActions]
    typename nn::Graph<T>::Id value;    // [B, 1]
    typename nn::Graph<T>::Id logstd;   // leaf [kActions]
    typename nn::Graph<T>::Id h_out, c_out;
    typename nn::Graph<T>::Id flow_full;  // tinyflownet frontend output (for dumps)
};

// Leaf ids of every weight tensor, created once per graph so an unrolled
// recurrent graph shares parameters across steps (and the optimizer sees each
// tensor exactly once).
template <typename T>
struct PolicyLeaves {
    using Id = typename nn::Graph<T>::Id;
    Id conv1_w, conv1_b, conv2_w, conv2_b, conv3_w, conv3_b;
    Id rc1_w, rc1_b, rc2_w, rc2_b, rb1a_w, rb1a_b, rb1b_w, rb1b_b;
    Id rc3_w, rc3_b, rb2a_w, rb2a_b, rb2b_w, rb2b_b, rc4_w, rc4_b, rfc_w, rfc_b;
    Id t_enc1_w, t_enc1_b, t_enc2_w, t_enc2_b, t_enc3_w, t_enc3_b, t_enc4_w, t_enc4_b,
        t_enc5_w, t_enc5_b, t_up1_w, t_up1_b, t_up2_w, t_up2_b, t_full_w, t_full_b;
    Id vec_w, vec_b, mid_w, mid_b;
    Id lstm_wih, lstm_whh, lstm_b;
    Id pi_w, pi_b, v_w, v_b, log_std;
};

template <typename T>
PolicyLeaves<T> make_policy_leaves(nn::Graph<T>& g, PolicyParams<T>& p, bool trainable) {
    const PolicyConfig& cfg = p.cfg;
    PolicyLeaves<T> l;
    auto leaf = [&](nn::Tensor<T>& t) { return trainable ? g.param(&t) : g.frozen(&t); };
    if (cfg.perception == Perception::table_s1 || cfg.perception == Perception::tinyflownet_front) {
        l.conv1_w = leaf(p.conv1_w);
        l.conv1_b = leaf(p.conv1_b);
        l.conv2_w = leaf(p.conv2_w);
        l.conv2_b = leaf(p.conv2_b);
        l.conv3_w = leaf(p.conv3_w);
        l.conv3_b = leaf(p.conv3_b);
    }
    if (cfg.perception == Perception::residual_s2) {
        l.rc1_w = leaf(p.rc1_w);
        l.rc1_b = leaf(p.rc1_b);
        l.rc2_w = leaf(p.rc2_w);
        l.rc2_b = leaf(p.rc2_b);
        l.rb1a_w = leaf(p.rb1a_w);
        l.rb1a_b = leaf(p.rb1a_b);
        l.rb1b_w = leaf(p.rb1b_w);
        l.rb1b_b = leaf(p.rb1b_b);
        l.rc3_w = leaf(p.rc3_w);
        l.rc3_b = leaf(p.rc3_b);
        l.rb2a_w = leaf(p.rb2a_w);
        l.rb2a_b = leaf(p.rb2a_b);
        l.rb2b_w = leaf(p.rb2b_w);
        l.rb2b_b = leaf(p.rb2b_b);
        l.rc4_w = leaf(p.rc4_w);
        l.rc4_b = leaf(p.rc4_b);
        l.rfc_w = leaf(p.rfc_w);
        l.rfc_b = leaf(p.rfc_b);
    }
    if (cfg.perception == Perception::tinyflownet_front) {
        bool tt = trainable && cfg.train_flownet;  // from-scratch mode trains the frontend
        auto tleaf = [&](nn::Tensor<T>& t) { return tt ? g.param(&t) : g.frozen(&t); };
        l.t_enc1_w = tleaf(p.tiny.enc1_w);
        l.t_enc1_b = tleaf(p.tiny.enc1_b);
        l.t_enc2_w = tleaf(p.tiny.enc2_w);
        l.t_enc2_b = tleaf(p.tiny.enc2_b);
        l.t_enc3_w = tleaf(p.tiny.enc3_w);
        l.t_enc3_b = tleaf(p.tiny.enc3_b);
        l.t_enc4_w = tleaf(p.tiny.enc4_w);
        l.t_enc4_b = tleaf(p.tiny.enc4_b);
        l.t_enc5_w = tleaf(p.tiny.enc5_w);
        l.t_enc5_b = tleaf(p.tiny.enc5_b);
        l.t_up1_w = tleaf(p.tiny.up1_w);
        l.t_up1_b = tleaf(p.tiny.up1_b);
        l.t_up2_w = tleaf(p.tiny.up2_w);
        l.t_up2_b = tleaf(p.tiny.up2_b);
        l.t_full_w = tleaf(p.tiny.full_flow_w);
        l.t_full_b = tleaf(p.tiny.full_flow_b);
    }
    l.vec_w = leaf(p.vec_w);
    l.vec_b = leaf(p.vec_b);
    l.mid_w = leaf(p.mid_w);
    l.mid_b = leaf(p.mid_b);
    if (cfg.lstm) {
        l.lstm_wih = leaf(p.lstm_wih);
        l.lstm_whh = leaf(p.lstm_whh);
        l.lstm_b = leaf(p.lstm_b);
    }
    l.pi_w = leaf(p.pi_w);
    l.pi_b = leaf(p.pi_b);
    l.v_w = leaf(p.v_w);
    l.v_b = leaf(p.v_b);
    l.log_std = leaf(p.log_std);
    return l;
}

// Wires one policy evaluation step over fresh input nodes, sharing weight
// leaves. Recurrent graphs call this once per unrolled step, passing the
// previous step's h/c output nodes so backprop runs through the chain.
template <typename T>
PolicyNodes<T> build_policy_step(nn::Graph<T>& g, const PolicyParams<T>& p,
                                 const PolicyLeaves<T>& l, int batch,
                                 typename nn::Graph<T>::Id h_src = {},
                                 typename nn::Graph<T>::Id c_src = {}) {
    using Id = typename nn::Graph<T>::Id;
    using nn::Act;
    using nn::Shape;
    const PolicyConfig& cfg = p.cfg;
    PolicyNodes<T> out;
    out.logstd = l.log_std;

    Id features;
    if (cfg.perception != Perception::none) {
        out.obs_in = g.input(Shape{batch, render::kRes, render::kRes, cfg.pixel_channels()});
        if (cfg.perception == Perception::tinyflownet_front) {
            Id skip_full = g.conv2d(out.obs_in, l.t_enc1_w, l.t_enc1_b, 1, true, Act::relu);
            Id e2 = g.conv2d(skip_full, l.t_enc2_w, l.t_enc2_b, 2, true, Act::relu);
            Id skip_half = g.conv2d(e2, l.t_enc3_w, l.t_enc3_b, 1, true, Act::relu);
            Id e4 = g.conv2d(skip_half, l.t_enc4_w, l.t_enc4_b, 2, true, Act::relu);
            Id e5 = g.conv2d(e4, l.t_enc5_w, l.t_enc5_b, 1, true, Act::relu);
            Id u1 = g.tconv2d(e5, l.t_up1_w, l.t_up1_b, Act::relu);
            Id u2 = g.tconv2d_cat(u1, skip_half, l.t_up2_w, l.t_up2_b, Act::relu);
            out.flow_full = g.conv2d_cat(u2, skip_full, l.t_full_w, l.t_full_b, 1, true);
            Id flow_scaled = g.scale(out.flow_full, 1.0 / cfg.flow_scale);
            Id cur_img = g.slice(out.obs_in, 3, 6);
            Id c1 = g.conv2d_cat(cur_img, flow_scaled, l.conv1_w, l.conv1_b, 4, false, Act::relu);
            Id c2 = g.conv2d(c1, l.conv2_w, l.conv2_b, 2, false, Act::relu);
            Id c3 = g.conv2d(c2, l.conv3_w, l.conv3_b, 1, false, Act::relu);
            features = g.flatten(c3);
        } else if (cfg.perception == Perception::table_s1) {
            Id c1 = g.conv2d(out.obs_in, l.conv1_w, l.conv1_b, 4, false, Act::relu);
            Id c2 = g.conv2d(c1, l.conv2_w, l.conv2_b, 2, false, Act::relu);
            Id c3 = g.conv2d(c2, l.conv3_w, l.conv3_b, 1, false, Act::relu);
            features = g.flatten(c3);
        } else {
            Id a = g.conv2d(out.obs_in, l.rc1_w, l.rc1_b, 1, false, Act::relu);
            Id skip1 = g.conv2d(a, l.rc2_w, l.rc2_b, 2, false, Act::relu);
            Id b1 = g.conv2d(skip1, l.rb1a_w, l.rb1a_b, 1, true, Act::relu);
            Id b2 = g.conv2d(b1, l.rb1b_w, l.rb1b_b, 1, true, Act::relu);
            Id sum1 = g.add(b2, skip1);
            Id skip2 = g.conv2d(sum1, l.rc3_w, l.rc3_b, 2, false, Act::relu);
            Id c1r = g.conv2d(skip2, l.rb2a_w, l.rb2a_b, 1, true, Act::relu);
            Id c2r = g.conv2d(c1r, l.rb2b_w, l.rb2b_b, 1, true, Act::relu);
            Id sum2 = g.add(c2r, skip2);
            Id c4 = g.conv2d(sum2, l.rc4_w, l.rc4_b, 2, false, Act::relu);
            features = g.fc(g.flatten(c4), l.rfc_w, l.rfc_b, Act::relu);
        }
    }

    out.vec_in = g.input(Shape{batch, cfg.vec_dims});
    Id vecf = g.fc(out.vec_in, l.vec_w, l.vec_b, Act::relu);
    Id mid_in = features.valid() ? g.concat(features, vecf) : vecf;
    Id mid = g.fc(mid_in, l.mid_w, l.mid_b, Act::relu);

    Id head_in = mid;
    if (cfg.lstm) {
        out.h_in = h_src.valid() ? h_src : g.input(Shape{batch, cfg.lstm_hidden});
        out.c_in = c_src.valid() ? c_src : g.input(Shape{batch, cfg.lstm_hidden});
        out.mask_in = g.input(Shape{batch});
        Id hm = g.mul_rows(out.h_in, out.mask_in);  // zero at episode starts
        Id cm = g.mul_rows(out.c_in, out.mask_in);
        Id hc = g.lstm(mid, hm, cm, l.lstm_wih, l.lstm_whh, l.lstm_b);
        out.h_out = g.slice(hc, 0, cfg.lstm_hidden);
        out.c_out = g.slice(hc, cfg.lstm_hidden, 2 * cfg.lstm_hidden);
        head_in = out.h_out;
    }

    out.mean = g.fc(head_in, l.pi_w, l.pi_b);
    out.value = g.fc(head_in, l.v_w, l.v_b);
    return out;
}

template <typename T>
PolicyNodes<T> build_policy(nn::Graph<T>& g, PolicyParams<T>& p, int batch, bool trainable) {
    PolicyLeaves<T> leaves = make_policy_leaves(g, p, trainable);
    return build_policy_step(g, p, leaves, batch);
}

// ---- diagonal Gaussian helpers (policy side) ----

struct ActionSample {
    std::array<double, kActions> action{};  // normalized scale; env applies the torque limit
    double log_prob = 0.0;
};

inline double gaussian_log_prob(const std::array<double, kActions>& mean,
                                const std::array<double, kActions>& log_std,
                                const std::array<double, kActions>& action) {
    double lp = -0.5 * kActions * std::log(2.0 * M_PI);
    for (int i = 0; i < kActions; ++i) {
        double sd = std::exp(log_std[static_cast<std::size_t>(i)]);
        double z = (action[static_cast<std::size_t>(i)] - mean[static_cast<std::size_t>(i)]) / sd;
        lp += -0.5 * z * z - log_std[static_cast<std::size_t>(i)];
    }
    return lp;
}

// Samples an unclamped action; the torque clamp happens at the environment
// boundary while the log-probability uses the raw sample.
inline ActionSample sample_action(const std::array<double, kActions>& mean,
                                  const std::array<double, kActions>& log_std, util::Pcg32& rng) {
    if (!std::isfinite(log_std[0]) || !std::isfinite(log_std[1]))
        throw std::runtime_error("sample_action: non-finite log std");
    ActionSample s;
    for (int i = 0; i < kActions; ++i)
        s.action[static_cast<std::size_t>(i)] =
            mean[static_cast<std::size_t>(i)] + std::exp(log_std[static_cast<std::size_t>(i)]) * rng.normal();
    s.log_prob = gaussian_log_prob(mean, log_std, s.action);
    return s;
}

inline double gaussian_entropy(const std::array<double, kActions>& log_std) {
    double e = 0.5 * kActions * (1.0 + std::log(2.0 * M_PI));
    for (double ls : log_std) e += ls;
    return e;
}

}  // namespace flowbench::rl
