#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "flowbench/env2d.hpp"
#include "flowbench/flow.hpp"
#include "flowbench/nn/adam.hpp"
#include "flowbench/render.hpp"
#include "flowbench/rl/policy.hpp"

namespace flowbench::rl {

// Hyperparameters follow the cited Atari recipe with the paper's overrides
// (lr 1e-4, 2 epochs).
struct PpoConfig {
    double gamma = 0.99;
    double lam = 0.95;
    double clip_eps = 0.1;
    int epochs = 2;
    double lr = 1e-4;
    int horizon = 128;
    int actors = 8;
    int minibatches = 4;
    double value_coef = 0.5;
    double entropy_coef = 0.01;
    // Desk default: one tenth of the full budget, rounded down to a whole
    // number of 1024-step iterations (the nominal 2M is not divisible by
    // actors*horizon).
    long total_steps = 1999872;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(gamma > 0 && gamma <= 1) || !(lam > 0 && lam <= 1))
            throw std::invalid_argument("ppo: gamma, lambda must be in (0,1]");
        if (epochs < 1 || actors < 1 || horizon < 1 || minibatches < 1)
            throw std::invalid_argument("ppo: counts must be positive");
        long batch = static_cast<long>(actors) * horizon;
        if (total_steps % batch != 0)
            throw std::invalid_argument("ppo: total steps must be divisible by actors*horizon");
        if (batch % minibatches != 0)
            throw std::invalid_argument("ppo: buffer must split evenly into minibatches");
        if (actors % minibatches != 0)
            throw std::invalid_argument("ppo: actors must split evenly into sequence minibatches");
    }
};

// Fixed-horizon batch of transitions, actor-major so per-actor sequences are
// contiguous (recurrent updates need temporal order).
struct RolloutBuffer {
    int actors = 0, horizon = 0;
    int obs_floats = 0;  // per-step pixel floats (0 for vector agents)
    int vec_dims = 0;
    int lstm_hidden = 0;

    std::vector<float> obs;
    std::vector<float> vec;
    std::vector<float> actions;  // normalized, unclamped samples
    std::vector<float> logp;
    std::vector<float> value;
    std::vector<float> reward;
    std::vector<float> score_r;
    std::vector<float> shaping_r;
    std::vector<std::uint8_t> done;
    std::vector<std::uint8_t> episode_start;  // state_t begins a fresh episode
    std::vector<float> adv, ret;
    std::vector<float> h0, c0;  // recurrent state at rollout start, per actor

    long size() const { return static_cast<long>(actors) * horizon; }
    long idx(int a, int t) const { return static_cast<long>(a) * horizon + t; }

    void resize(int n_actors, int T, int obs_f, int vd, int lstm_h) {
        actors = n_actors;
        horizon = T;
        obs_floats = obs_f;
        vec_dims = vd;
        lstm_hidden = lstm_h;
        long n = size();
        obs.assign(static_cast<std::size_t>(n) * obs_f, 0.0f);
        vec.assign(static_cast<std::size_t>(n) * vd, 0.0f);
        actions.assign(static_cast<std::size_t>(n) * kActions, 0.0f);
        logp.assign(static_cast<std::size_t>(n), 0.0f);
        value.assign(static_cast<std::size_t>(n), 0.0f);
        reward.assign(static_cast<std::size_t>(n), 0.0f);
        score_r.assign(static_cast<std::size_t>(n), 0.0f);
        shaping_r.assign(static_cast<std::size_t>(n), 0.0f);
        done.assign(static_cast<std::size_t>(n), 0);
        episode_start.assign(static_cast<std::size_t>(n), 0);
        adv.assign(static_cast<std::size_t>(n), 0.0f);
        ret.assign(static_cast<std::size_t>(n), 0.0f);
        h0.assign(static_cast<std::size_t>(n_actors) * lstm_h, 0.0f);
        c0.assign(static_cast<std::size_t>(n_actors) * lstm_h, 0.0f);
    }
};

// Backward GAE recursion per actor sequence; returns = advantage + value,
// then advantages are normalized across the buffer.
inline void compute_gae(RolloutBuffer& buf, const std::vector<double>& bootstrap_value,
                        double gamma, double lam) {
    if (buf.size() == 0) throw std::invalid_argument("compute_gae: empty buffer");
    if (static_cast<int>(bootstrap_value.size()) != buf.actors)
        throw std::invalid_argument("compute_gae: bootstrap size mismatch");
    for (int a = 0; a < buf.actors; ++a) {
        double acc = 0.0;
        for (int t = buf.horizon - 1; t >= 0; --t) {
            long i = buf.idx(a, t);
            double nonterm = buf.done[static_cast<std::size_t>(i)] ? 0.0 : 1.0;
            double vnext = t == buf.horizon - 1 ? bootstrap_value[static_cast<std::size_t>(a)]
                                                : buf.value[static_cast<std::size_t>(buf.idx(a, t + 1))];
            double delta = buf.reward[static_cast<std::size_t>(i)] + gamma * vnext * nonterm -
                           buf.value[static_cast<std::size_t>(i)];
            acc = delta + gamma * lam * nonterm * acc;
            buf.adv[static_cast<std::size_t>(i)] = static_cast<float>(acc);
            buf.ret[static_cast<std::size_t>(i)] =
                static_cast<float>(acc + buf.value[static_cast<std::size_t>(i)]);
        }
    }
    long n = buf.size();
    double mean = 0.0;
    for (long i = 0; i < n; ++i) mean += buf.adv[static_cast<std::size_t>(i)];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (long i = 0; i < n; ++i) {
        double d = buf.adv[static_cast<std::size_t>(i)] - mean;
        var += d * d;
    }
    double sd = std::sqrt(var / static_cast<double>(n));
    double inv = 1.0 / (sd + 1e-8);
    for (long i = 0; i < n; ++i)
        buf.adv[static_cast<std::size_t>(i)] = static_cast<float>((buf.adv[static_cast<std::size_t>(i)] - mean) * inv);
}

struct EpisodeStat {
    double ret = 0.0, score = 0.0, shaping = 0.0;
};

// Owns the actor environments, frame history and the flow source (analytic or
// a flow-network forward), and runs the synchronous rollout.
class RolloutCollector {
public:
    RolloutCollector(const env2d::EnvConfig& env_cfg, const render::ObservationSpec& obs_spec,
                     PolicyParams<float>& params, int actors, std::uint64_t seed)
        : env_cfg_(env_cfg),
          obs_spec_(obs_spec),
          params_(params),
          actors_(actors),
          seed_(seed),
          nodes_(build_policy(act_graph_, params, actors, /*trainable=*/false)) {
        needs_net_flow_ = obs_spec.variant == render::ObsVariant::flow &&
                          params.cfg.perception != Perception::tinyflownet_front;
        bool net_seg = obs_spec.variant == render::ObsVariant::segmentation && obs_spec.net_flow;
        if (needs_net_flow_ || net_seg) {
            flow_runner_ = std::make_unique<flownet::TinyFlowNetRunner>(params.tiny);
            needs_net_flow_ = true;
        }
        for (int a = 0; a < actors_; ++a) {
            envs_.emplace_back(env_cfg_);
            action_rngs_.push_back(util::Pcg32::for_stream(seed, static_cast<std::uint64_t>(a)));
            episodes_started_.push_back(0);
        }
        if (params.cfg.lstm) {
            h_.assign(static_cast<std::size_t>(actors_) * params.cfg.lstm_hidden, 0.0f);
            c_.assign(static_cast<std::size_t>(actors_) * params.cfg.lstm_hidden, 0.0f);
        }
        prev_frames_.resize(static_cast<std::size_t>(actors_));
        cur_frames_.resize(static_cast<std::size_t>(actors_));
        prev_states_.resize(static_cast<std::size_t>(actors_));
        fresh_episode_.assign(static_cast<std::size_t>(actors_), 1);
        last_respawn_.assign(static_cast<std::size_t>(actors_), 0);
        ep_acc_.assign(static_cast<std::size_t>(actors_), EpisodeStat{});
        for (int a = 0; a < actors_; ++a) reset_actor(a);
        obs_buf_.assign(static_cast<std::size_t>(actors_) * std::max(1, obs_floats()), 0.0f);
        vec_buf_.assign(static_cast<std::size_t>(actors_) * vec_dims(), 0.0f);
    }

    const env2d::EnvConfig& env_config() const { return env_cfg_; }
    int obs_floats() const {
        if (!obs_spec_.uses_pixels()) return 0;
        int ch = params_.cfg.pixel_channels();
        return render::kRes * render::kRes * ch;
    }
    int vec_dims() const { return params_.cfg.vec_dims; }

    // Synchronously steps all actors for `horizon` steps, filling the buffer.
    // Episode boundaries reset in place; the new episode's first frame fills
    // both frame slots (no cross-episode leakage).
    void collect(int horizon, RolloutBuffer& buf, std::vector<EpisodeStat>& completed) {
        buf.resize(actors_, horizon, obs_floats(), vec_dims(),
                   params_.cfg.lstm ? params_.cfg.lstm_hidden : 0);
        if (params_.cfg.lstm) {
            buf.h0 = h_;
            buf.c0 = c_;
        }
        for (int t = 0; t < horizon; ++t) {
            for (int a = 0; a < actors_; ++a) {
                long i = buf.idx(a, t);
                buf.episode_start[static_cast<std::size_t>(i)] = fresh_episode_[static_cast<std::size_t>(a)];
                write_observation(a, buf.obs_floats > 0 ? &buf.obs[static_cast<std::size_t>(i) * buf.obs_floats] : nullptr,
                                  &buf.vec[static_cast<std::size_t>(i) * buf.vec_dims]);
            }
            forward_batch(
                [&](int a) { return buf.obs_floats > 0 ? &buf.obs[static_cast<std::size_t>(buf.idx(a, t)) * buf.obs_floats] : nullptr; },
                [&](int a) { return &buf.vec[static_cast<std::size_t>(buf.idx(a, t)) * buf.vec_dims]; },
                [&](int a) { return buf.episode_start[static_cast<std::size_t>(buf.idx(a, t))] != 0; });
            if (params_.cfg.lstm) {
                std::memcpy(h_.data(), act_graph_.value(nodes_.h_out).ptr(), h_.size() * sizeof(float));
                std::memcpy(c_.data(), act_graph_.value(nodes_.c_out).ptr(), c_.size() * sizeof(float));
            }
            for (int a = 0; a < actors_; ++a) {
                long i = buf.idx(a, t);
                std::array<double, kActions> mean{}, lsd{};
                for (int d = 0; d < kActions; ++d) {
                    mean[static_cast<std::size_t>(d)] = act_graph_.value(nodes_.mean).at(a, d);
                    lsd[static_cast<std::size_t>(d)] = params_.log_std.data[static_cast<std::size_t>(d)];
                }
                ActionSample s = sample_action(mean, lsd, action_rngs_[static_cast<std::size_t>(a)]);
                buf.actions[static_cast<std::size_t>(i) * kActions] = static_cast<float>(s.action[0]);
                buf.actions[static_cast<std::size_t>(i) * kActions + 1] = static_cast<float>(s.action[1]);
                buf.logp[static_cast<std::size_t>(i)] = static_cast<float>(s.log_prob);
                buf.value[static_cast<std::size_t>(i)] = act_graph_.value(nodes_.value).at(a, 0);
                step_actor(a, s.action, buf, i, completed);
            }
        }
        // bootstrap values for the state after the horizon
        for (int a = 0; a < actors_; ++a) write_observation(a, obs_floats() > 0 ? obs_scratch(a) : nullptr, vec_scratch(a));
        forward_batch([&](int a) { return obs_floats() > 0 ? obs_scratch(a) : nullptr; },
                      [&](int a) { return vec_scratch(a); },
                      [&](int a) { return fresh_episode_[static_cast<std::size_t>(a)] != 0; });
        bootstrap_.assign(static_cast<std::size_t>(actors_), 0.0);
        for (int a = 0; a < actors_; ++a)
            bootstrap_[static_cast<std::size_t>(a)] = act_graph_.value(nodes_.value).at(a, 0);
    }

    const std::vector<double>& bootstrap_values() const { return bootstrap_; }

    // Deterministic evaluation episode (actions = policy mean), fresh env.
    // With `dump_dir` set and a flow-frontend policy, the frontend's
    // two-channel intermediate output is written per step as red/blue PPMs
    // next to the rendered frames (interpretability inspection).
    EpisodeStat run_episode_deterministic(std::uint64_t episode_seed, const std::string& dump_dir = "") {
        env2d::Env env(env_cfg_);
        env.reset(episode_seed);
        render::Frame cur;
        if (obs_spec_.uses_pixels()) cur = render::render(env.state(), env_cfg_);
        render::Frame prev = cur;
        env2d::EnvState prev_state = env.state();
        bool fresh = true, respawned = false;
        EpisodeStat stat;
        nn::GraphF g;
        auto nodes = build_policy(g, params_, 1, false);
        std::vector<float> h, c;
        if (params_.cfg.lstm) {
            h.assign(static_cast<std::size_t>(params_.cfg.lstm_hidden), 0.0f);
            c.assign(static_cast<std::size_t>(params_.cfg.lstm_hidden), 0.0f);
        }
        for (;;) {
            assemble_observation(env, prev_state, prev, cur, fresh, respawned,
                                 nodes.obs_in.valid() ? g.data(nodes.obs_in).ptr() : nullptr,
                                 g.data(nodes.vec_in).ptr());
            if (params_.cfg.lstm) {
                std::memcpy(g.data(nodes.h_in).ptr(), h.data(), h.size() * sizeof(float));
                std::memcpy(g.data(nodes.c_in).ptr(), c.data(), c.size() * sizeof(float));
                g.data(nodes.mask_in).data[0] = fresh ? 0.0f : 1.0f;
            }
            g.forward();
            if (!dump_dir.empty() && nodes.flow_full.valid()) {
                char name[512];
                std::snprintf(name, sizeof(name), "%s/frame_%03d.ppm", dump_dir.c_str(), env.state().t);
                render::write_ppm(cur, name);
                render::FlowField f;
                std::memcpy(f.v.data(), g.value(nodes.flow_full).ptr(), f.v.size() * sizeof(float));
                std::snprintf(name, sizeof(name), "%s/net_flow_%03d.ppm", dump_dir.c_str(), env.state().t);
                render::write_ppm(render::flow_to_rgb(f, obs_spec_.flow_scale), name);
            }
            std::array<double, kActions> a{g.value(nodes.mean).at(0, 0), g.value(nodes.mean).at(0, 1)};
            if (params_.cfg.lstm) {
                std::memcpy(h.data(), g.value(nodes.h_out).ptr(), h.size() * sizeof(float));
                std::memcpy(c.data(), g.value(nodes.c_out).ptr(), c.size() * sizeof(float));
            }
            prev_state = env.state();
            prev = cur;
            fresh = false;
            auto r = env.step({a[0] * env_cfg_.torque_limit, a[1] * env_cfg_.torque_limit});
            if (obs_spec_.uses_pixels()) cur = render::render(env.state(), env_cfg_);
            respawned = r.ball_respawned;
            stat.ret += r.reward;
            stat.score += r.score_r;
            stat.shaping += r.shaping_r;
            if (r.done) break;
        }
        return stat;
    }

private:
    void reset_actor(int a) {
        std::uint64_t ep = episodes_started_[static_cast<std::size_t>(a)]++;
        envs_[static_cast<std::size_t>(a)].reset(seed_ * 1000003ULL + static_cast<std::uint64_t>(a) * 7919ULL +
                                                 ep * 104729ULL);
        prev_states_[static_cast<std::size_t>(a)] = envs_[static_cast<std::size_t>(a)].state();
        if (obs_spec_.uses_pixels()) {
            cur_frames_[static_cast<std::size_t>(a)] = render::render(envs_[static_cast<std::size_t>(a)].state(), env_cfg_);
            prev_frames_[static_cast<std::size_t>(a)] = cur_frames_[static_cast<std::size_t>(a)];
        }
        fresh_episode_[static_cast<std::size_t>(a)] = 1;
        last_respawn_[static_cast<std::size_t>(a)] = 0;
    }

    float* obs_scratch(int a) { return &obs_buf_[static_cast<std::size_t>(a) * std::max(1, obs_floats())]; }
    float* vec_scratch(int a) { return &vec_buf_[static_cast<std::size_t>(a) * vec_dims()]; }

    void write_observation(int a, float* obs_out, float* vec_out) {
        assemble_observation(envs_[static_cast<std::size_t>(a)], prev_states_[static_cast<std::size_t>(a)],
                             prev_frames_[static_cast<std::size_t>(a)], cur_frames_[static_cast<std::size_t>(a)],
                             fresh_episode_[static_cast<std::size_t>(a)] != 0,
                             last_respawn_[static_cast<std::size_t>(a)] != 0, obs_out, vec_out);
    }

    void assemble_observation(const env2d::Env& env, const env2d::EnvState& prev_state,
                              const render::Frame& prev, const render::Frame& cur, bool fresh,
                              bool respawned, float* obs_out, float* vec_out) {
        const auto& st = env.state();
        if (obs_spec_.variant == render::ObsVariant::vector) {
            auto sv = env2d::state_vector_with_ball(st, env_cfg_);
            for (int i = 0; i < 13; ++i) vec_out[i] = static_cast<float>(sv[static_cast<std::size_t>(i)]);
            return;
        }
        auto sv = env2d::state_vector(st);
        for (int i = 0; i < 6; ++i) vec_out[i] = static_cast<float>(sv[static_cast<std::size_t>(i)]);

        if (params_.cfg.perception == Perception::tinyflownet_front) {
            // raw [prev, cur] stack; the frontend computes its own flow
            nn::TensorF tmp(nn::Shape{render::kRes, render::kRes, 6});
            flownet::write_pair_input(tmp, 0, prev, cur);
            std::memcpy(obs_out, tmp.ptr(), tmp.data.size() * sizeof(float));
            return;
        }

        render::FlowField flow;
        if (obs_spec_.needs_flow()) {
            if (needs_net_flow_)
                flow = flow_runner_->predict_field(prev, cur);
            else if (!fresh)
                flow = render::ground_truth_flow(prev_state, st, env_cfg_, respawned);
        }
        std::array<double, 2> vel{};
        nn::TensorF o = render::make_observation(cur, prev, flow, obs_spec_, &vel);
        std::memcpy(obs_out, o.ptr(), o.data.size() * sizeof(float));
        if (obs_spec_.variant == render::ObsVariant::velocity_vector) {
            vec_out[6] = static_cast<float>(vel[0] / obs_spec_.flow_scale);
            vec_out[7] = static_cast<float>(vel[1] / obs_spec_.flow_scale);
        }
    }

    template <typename ObsPtr, typename VecPtr, typename FreshFn>
    void forward_batch(ObsPtr obs_of, VecPtr vec_of, FreshFn fresh_of) {
        for (int a = 0; a < actors_; ++a) {
            if (nodes_.obs_in.valid())
                std::memcpy(act_graph_.data(nodes_.obs_in).ptr() + static_cast<std::size_t>(a) * obs_floats(),
                            obs_of(a), static_cast<std::size_t>(obs_floats()) * sizeof(float));
            std::memcpy(act_graph_.data(nodes_.vec_in).ptr() + static_cast<std::size_t>(a) * vec_dims(),
                        vec_of(a), static_cast<std::size_t>(vec_dims()) * sizeof(float));
        }
        if (params_.cfg.lstm) {
            std::memcpy(act_graph_.data(nodes_.h_in).ptr(), h_.data(), h_.size() * sizeof(float));
            std::memcpy(act_graph_.data(nodes_.c_in).ptr(), c_.data(), c_.size() * sizeof(float));
            for (int a = 0; a < actors_; ++a)
                act_graph_.data(nodes_.mask_in).data[static_cast<std::size_t>(a)] = fresh_of(a) ? 0.0f : 1.0f;
        }
        act_graph_.forward();
    }

    void step_actor(int a, const std::array<double, kActions>& action, RolloutBuffer& buf, long i,
                    std::vector<EpisodeStat>& completed) {
        env2d::Env& env = envs_[static_cast<std::size_t>(a)];
        prev_states_[static_cast<std::size_t>(a)] = env.state();
        if (obs_spec_.uses_pixels()) prev_frames_[static_cast<std::size_t>(a)] = cur_frames_[static_cast<std::size_t>(a)];
        auto r = env.step({action[0] * env_cfg_.torque_limit, action[1] * env_cfg_.torque_limit});
        if (obs_spec_.uses_pixels()) cur_frames_[static_cast<std::size_t>(a)] = render::render(env.state(), env_cfg_);
        fresh_episode_[static_cast<std::size_t>(a)] = 0;
        last_respawn_[static_cast<std::size_t>(a)] = r.ball_respawned ? 1 : 0;
        buf.reward[static_cast<std::size_t>(i)] = static_cast<float>(r.reward);
        buf.score_r[static_cast<std::size_t>(i)] = static_cast<float>(r.score_r);
        buf.shaping_r[static_cast<std::size_t>(i)] = static_cast<float>(r.shaping_r);
        buf.done[static_cast<std::size_t>(i)] = r.done ? 1 : 0;
        EpisodeStat& acc = ep_acc_[static_cast<std::size_t>(a)];
        acc.score += r.score_r;
        acc.shaping += r.shaping_r;
        acc.ret = acc.score + acc.shaping;  // exact decomposition by construction
        if (r.done) {
            completed.push_back(acc);
            acc = EpisodeStat{};
            reset_actor(a);
        }
    }

    env2d::EnvConfig env_cfg_;
    render::ObservationSpec obs_spec_;
    PolicyParams<float>& params_;
    int actors_;
    std::uint64_t seed_;
    nn::GraphF act_graph_;
    PolicyNodes<float> nodes_;
    bool needs_net_flow_ = false;
    std::unique_ptr<flownet::TinyFlowNetRunner> flow_runner_;
    std::vector<env2d::Env> envs_;
    std::vector<util::Pcg32> action_rngs_;
    std::vector<std::uint64_t> episodes_started_;
    std::vector<render::Frame> prev_frames_, cur_frames_;
    std::vector<env2d::EnvState> prev_states_;
    std::vector<std::uint8_t> fresh_episode_;
    std::vector<std::uint8_t> last_respawn_;
    std::vector<EpisodeStat> ep_acc_;
    std::vector<double> bootstrap_;
    std::vector<float> h_, c_, obs_buf_, vec_buf_;
};

struct UpdateStats {
    double policy_loss = 0.0, value_loss = 0.0, entropy = 0.0;
    double clip_frac = 0.0, approx_kl = 0.0;
};

// Clipped-surrogate PPO update over a filled buffer: `epochs` passes, one
// Adam step per minibatch. Feedforward agents shuffle transitions; recurrent
// agents update whole actor sequences with truncated backprop across the
// rollout horizon, wired as an unrolled graph.
class PpoTrainer {
public:
    PpoTrainer(PolicyParams<float>& params, const PpoConfig& cfg) : params_(params), cfg_(cfg) {
        cfg_.validate();
        rng_ = util::Pcg32(cfg.seed, 0x0b7a1e);
        if (params.cfg.lstm)
            build_recurrent();
        else
            build_feedforward();
        opt_ = std::make_unique<nn::AdamOptimizer<float>>(graph_);
    }

    UpdateStats update(const RolloutBuffer& buf) {
        return params_.cfg.lstm ? update_recurrent(buf) : update_feedforward(buf);
    }

private:
    void build_feedforward() {
        mb_size_ = static_cast<int>((static_cast<long>(cfg_.actors) * cfg_.horizon) / cfg_.minibatches);
        leaves_ = make_policy_leaves(graph_, params_, /*trainable=*/true);
        auto nodes = build_policy_step(graph_, params_, leaves_, mb_size_);
        step_nodes_.push_back(nodes);
        add_step_losses(nodes, mb_size_);
        surr_node_ = step_surr_[0];
        vloss_node_ = step_vloss_[0];
        ent_node_ = graph_.gaussian_entropy(leaves_.log_std);
        loss_ = graph_.add_weighted(graph_.add_weighted(surr_node_, vloss_node_, 1.0, cfg_.value_coef),
                                    ent_node_, 1.0, -cfg_.entropy_coef);
    }

    void build_recurrent() {
        mb_actors_ = cfg_.actors / cfg_.minibatches;
        mb_size_ = mb_actors_ * cfg_.horizon;
        leaves_ = make_policy_leaves(graph_, params_, /*trainable=*/true);
        h0_in_ = graph_.input(nn::Shape{mb_actors_, params_.cfg.lstm_hidden});
        c0_in_ = graph_.input(nn::Shape{mb_actors_, params_.cfg.lstm_hidden});
        nn::GraphF::Id h = h0_in_, c = c0_in_;
        nn::GraphF::Id surr_sum{}, vloss_sum{};
        for (int t = 0; t < cfg_.horizon; ++t) {
            auto nodes = build_policy_step(graph_, params_, leaves_, mb_actors_, h, c);
            step_nodes_.push_back(nodes);
            h = nodes.h_out;
            c = nodes.c_out;
            add_step_losses(nodes, mb_actors_);
            surr_sum = t == 0 ? step_surr_.back() : graph_.add(surr_sum, step_surr_.back());
            vloss_sum = t == 0 ? step_vloss_.back() : graph_.add(vloss_sum, step_vloss_.back());
        }
        surr_node_ = graph_.scale(surr_sum, 1.0 / cfg_.horizon);
        vloss_node_ = graph_.scale(vloss_sum, 1.0 / cfg_.horizon);
        ent_node_ = graph_.gaussian_entropy(leaves_.log_std);
        loss_ = graph_.add_weighted(graph_.add_weighted(surr_node_, vloss_node_, 1.0, cfg_.value_coef),
                                    ent_node_, 1.0, -cfg_.entropy_coef);
    }

    void add_step_losses(const PolicyNodes<float>& nodes, int batch) {
        actions_in_.push_back(graph_.input(nn::Shape{batch, kActions}));
        logp_old_in_.push_back(graph_.input(nn::Shape{batch}));
        adv_in_.push_back(graph_.input(nn::Shape{batch}));
        ret_in_.push_back(graph_.input(nn::Shape{batch, 1}));
        auto lpn = graph_.gaussian_logprob(nodes.mean, nodes.logstd, actions_in_.back());
        logp_new_.push_back(lpn);
        step_surr_.push_back(graph_.ppo_surrogate(lpn, logp_old_in_.back(), adv_in_.back(), cfg_.clip_eps));
        step_vloss_.push_back(graph_.mse_mean(nodes.value, ret_in_.back()));
    }

    void gather_row(const RolloutBuffer& buf, long src, int dst, const PolicyNodes<float>& nodes,
                    std::size_t slot) {
        if (nodes.obs_in.valid())
            std::memcpy(graph_.data(nodes.obs_in).ptr() + static_cast<std::size_t>(dst) * buf.obs_floats,
                        &buf.obs[static_cast<std::size_t>(src) * buf.obs_floats],
                        static_cast<std::size_t>(buf.obs_floats) * sizeof(float));
        std::memcpy(graph_.data(nodes.vec_in).ptr() + static_cast<std::size_t>(dst) * buf.vec_dims,
                    &buf.vec[static_cast<std::size_t>(src) * buf.vec_dims],
                    static_cast<std::size_t>(buf.vec_dims) * sizeof(float));
        graph_.data(actions_in_[slot]).at(dst, 0) = buf.actions[static_cast<std::size_t>(src) * kActions];
        graph_.data(actions_in_[slot]).at(dst, 1) = buf.actions[static_cast<std::size_t>(src) * kActions + 1];
        graph_.data(logp_old_in_[slot]).data[static_cast<std::size_t>(dst)] = buf.logp[static_cast<std::size_t>(src)];
        graph_.data(adv_in_[slot]).data[static_cast<std::size_t>(dst)] = buf.adv[static_cast<std::size_t>(src)];
        graph_.data(ret_in_[slot]).at(dst, 0) = buf.ret[static_cast<std::size_t>(src)];
    }

    // once per minibatch, after forward()
    void accumulate_loss_stats(UpdateStats& stats) {
        stats.policy_loss += graph_.value(surr_node_).data[0];
        stats.value_loss += graph_.value(vloss_node_).data[0];
        stats.entropy += graph_.value(ent_node_).data[0];
        ++loss_adds_;
    }

    // per step slot, after forward(): ratio statistics
    void accumulate_ratio_stats(std::size_t slot) {
        const auto& lpn = graph_.value(logp_new_[slot]);
        const auto& lpo = graph_.data(logp_old_in_[slot]);
        long B = lpn.size();
        for (long b = 0; b < B; ++b) {
            double rho = std::exp(static_cast<double>(lpn.data[static_cast<std::size_t>(b)]) -
                                  static_cast<double>(lpo.data[static_cast<std::size_t>(b)]));
            if (std::abs(rho - 1.0) > cfg_.clip_eps) clip_hits_ += 1;
            kl_sum_ += static_cast<double>(lpo.data[static_cast<std::size_t>(b)]) -
                       static_cast<double>(lpn.data[static_cast<std::size_t>(b)]);
            samples_ += 1;
        }
    }

    UpdateStats finalize_stats(UpdateStats stats) {
        stats.policy_loss /= std::max(1L, loss_adds_);
        stats.value_loss /= std::max(1L, loss_adds_);
        stats.entropy /= std::max(1L, loss_adds_);
        stats.clip_frac = samples_ ? static_cast<double>(clip_hits_) / static_cast<double>(samples_) : 0.0;
        stats.approx_kl = samples_ ? kl_sum_ / static_cast<double>(samples_) : 0.0;
        if (!std::isfinite(stats.approx_kl)) throw std::runtime_error("ppo: non-finite KL");
        loss_adds_ = 0;
        clip_hits_ = 0;
        samples_ = 0;
        kl_sum_ = 0.0;
        return stats;
    }

    UpdateStats update_feedforward(const RolloutBuffer& buf) {
        long n = buf.size();
        std::vector<long> order(static_cast<std::size_t>(n));
        std::iota(order.begin(), order.end(), 0);
        UpdateStats stats;
        const auto& nodes = step_nodes_[0];
        for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
            for (long i = n - 1; i > 0; --i) {  // Fisher-Yates on the deterministic stream
                long j = rng_.next_u32() % static_cast<std::uint32_t>(i + 1);
                std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
            }
            for (int mb = 0; mb < cfg_.minibatches; ++mb) {
                for (int r = 0; r < mb_size_; ++r)
                    gather_row(buf, order[static_cast<std::size_t>(mb * mb_size_ + r)], r, nodes, 0);
                graph_.forward();
                accumulate_loss_stats(stats);
                accumulate_ratio_stats(0);
                if (!std::isfinite(static_cast<double>(graph_.value(loss_).data[0])))
                    throw std::runtime_error("ppo: non-finite loss");
                graph_.backward(loss_);
                opt_->step(graph_, cfg_.lr);
                clamp_log_std();
            }
        }
        return finalize_stats(stats);
    }

    UpdateStats update_recurrent(const RolloutBuffer& buf) {
        UpdateStats stats;
        for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
            for (int mb = 0; mb < cfg_.minibatches; ++mb) {
                int a0 = mb * mb_actors_;
                for (int a = 0; a < mb_actors_; ++a) {
                    std::memcpy(graph_.data(h0_in_).ptr() + static_cast<std::size_t>(a) * buf.lstm_hidden,
                                &buf.h0[static_cast<std::size_t>(a0 + a) * buf.lstm_hidden],
                                static_cast<std::size_t>(buf.lstm_hidden) * sizeof(float));
                    std::memcpy(graph_.data(c0_in_).ptr() + static_cast<std::size_t>(a) * buf.lstm_hidden,
                                &buf.c0[static_cast<std::size_t>(a0 + a) * buf.lstm_hidden],
                                static_cast<std::size_t>(buf.lstm_hidden) * sizeof(float));
                }
                for (int t = 0; t < cfg_.horizon; ++t) {
                    const auto& nodes = step_nodes_[static_cast<std::size_t>(t)];
                    for (int a = 0; a < mb_actors_; ++a) {
                        long src = buf.idx(a0 + a, t);
                        gather_row(buf, src, a, nodes, static_cast<std::size_t>(t));
                        graph_.data(nodes.mask_in).data[static_cast<std::size_t>(a)] =
                            buf.episode_start[static_cast<std::size_t>(src)] ? 0.0f : 1.0f;
                    }
                }
                graph_.forward();
                accumulate_loss_stats(stats);
                for (int t = 0; t < cfg_.horizon; ++t) accumulate_ratio_stats(static_cast<std::size_t>(t));
                if (!std::isfinite(static_cast<double>(graph_.value(loss_).data[0])))
                    throw std::runtime_error("ppo: non-finite loss");
                graph_.backward(loss_);
                opt_->step(graph_, cfg_.lr);
                clamp_log_std();
            }
        }
        return finalize_stats(stats);
    }

    // keeps the sampling distribution in a numerically sane band
    void clamp_log_std() {
        for (auto& v : params_.log_std.data) v = std::clamp(v, -6.0f, 2.0f);
    }

    PolicyParams<float>& params_;
    PpoConfig cfg_;
    util::Pcg32 rng_;
    nn::GraphF graph_;
    PolicyLeaves<float> leaves_;
    std::vector<PolicyNodes<float>> step_nodes_;
    std::vector<nn::GraphF::Id> actions_in_, logp_old_in_, adv_in_, ret_in_, logp_new_;
    std::vector<nn::GraphF::Id> step_surr_, step_vloss_;
    nn::GraphF::Id h0_in_, c0_in_;
    nn::GraphF::Id surr_node_, vloss_node_, ent_node_, loss_;
    std::unique_ptr<nn::AdamOptimizer<float>> opt_;
    int mb_size_ = 0, mb_actors_ = 0;
    long clip_hits_ = 0, samples_ = 0, loss_adds_ = 0;
    double kl_sum_ = 0.0;
};

}  // namespace flowbench::rl
