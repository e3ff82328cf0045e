#pragma once

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>

#include "flowbench/util/ini.hpp"
#include "flowbench/util/rng.hpp"

namespace flowbench::env2d {

struct Vec2 {
    double x = 0.0, y = 0.0;
    Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
    Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
    Vec2 operator*(double s) const { return {x * s, y * s}; }
    double norm() const { return std::hypot(x, y); }
};

enum class Task { catcher, chaser };

inline std::string task_name(Task t) { return t == Task::catcher ? "catcher2d" : "chaser2d"; }
inline Task task_from_name(const std::string& s) {
    if (s == "catcher2d" || s == "catcher") return Task::catcher;
    if (s == "chaser2d" || s == "chaser") return Task::chaser;
    throw std::invalid_argument("unknown task: " + s);
}

// Target speeds are configured on an absolute world-units-per-step scale;
// sweep specifications use a relative factor u with speed = kBaseSpeed * u,
// so relative settings 0.25 .. 1.0 remain expressible.
inline constexpr double kBaseSpeed = 0.03;

struct EnvConfig {
    Task task = Task::chaser;
    double l1 = 0.35;             // link lengths, world units
    double l2 = 0.35;
    double dt = 1.0;              // integration step
    double damping = 0.1;         // joint velocity damping per step
    double torque_limit = 0.05;   // |torque| clamp, rad/step^2
    double arena_half = 1.0;      // square [-1,1]^2 world box
    double ball_radius = 0.06;
    double speed = kBaseSpeed;    // target speed, world units/step
    double catch_dist = 0.08;     // scoring threshold on |ee - ball|
    double shaping_coef = 0.05;   // k_sh
    double motion_penalty = 1.0;  // k_mp on |torque|^2
    double score_value = 0.0;     // 0 = task default (1.0 catcher, 0.04 chaser)
    int episode_len = 250;
    int background = 0;           // texture id 0..3, drawn when multi_texture is on
    bool multi_texture = false;   // draw a per-episode random texture instead of the solid background
    std::uint64_t seed = 0;

    double effective_score_value() const {
        if (score_value != 0.0) return score_value;
        return task == Task::catcher ? 1.0 : 0.04;
    }

    void validate() const {
        if (l1 + l2 >= arena_half) throw std::invalid_argument("env: arm must fit inside the arena");
        if (dt <= 0 || speed <= 0 || catch_dist <= 0 || ball_radius <= 0)
            throw std::invalid_argument("env: dt, speed, catch_dist, ball_radius must be positive");
        if (episode_len <= 0) throw std::invalid_argument("env: episode_len must be positive");
        if (background < 0 || background > 3) throw std::invalid_argument("env: background id out of range");
    }

    static EnvConfig from_ini(const util::Ini& ini, Task task) {
        EnvConfig c;
        c.task = task;
        auto load = [&](const std::string& sec) {
            if (!ini.has_section(sec)) return;
            c.l1 = ini.get_double(sec, "l1", c.l1);
            c.l2 = ini.get_double(sec, "l2", c.l2);
            c.dt = ini.get_double(sec, "dt", c.dt);
            c.damping = ini.get_double(sec, "damping", c.damping);
            c.torque_limit = ini.get_double(sec, "torque_limit", c.torque_limit);
            c.arena_half = ini.get_double(sec, "arena_half", c.arena_half);
            c.ball_radius = ini.get_double(sec, "ball_radius", c.ball_radius);
            c.speed = ini.get_double(sec, "speed", c.speed);
            c.catch_dist = ini.get_double(sec, "catch_dist", c.catch_dist);
            c.shaping_coef = ini.get_double(sec, "shaping_coef", c.shaping_coef);
            c.motion_penalty = ini.get_double(sec, "motion_penalty", c.motion_penalty);
            c.score_value = ini.get_double(sec, "score_value", c.score_value);
            c.episode_len = static_cast<int>(ini.get_int(sec, "episode_len", c.episode_len));
            c.background = static_cast<int>(ini.get_int(sec, "background", c.background));
            c.multi_texture = ini.get_int(sec, "multi_texture", c.multi_texture ? 1 : 0) != 0;
            c.seed = static_cast<std::uint64_t>(ini.get_int(sec, "seed", static_cast<long>(c.seed)));
        };
        load("common");
        load(task_name(task));
        c.validate();
        return c;
    }

    void to_ini(util::Ini& ini) const {
        const std::string sec = task_name(task);
        auto put = [&](const std::string& k, double v) { ini.set(sec, k, format_double(v)); };
        ini.set(sec, "task", task_name(task));
        put("l1", l1);
        put("l2", l2);
        put("dt", dt);
        put("damping", damping);
        put("torque_limit", torque_limit);
        put("arena_half", arena_half);
        put("ball_radius", ball_radius);
        put("speed", speed);
        put("catch_dist", catch_dist);
        put("shaping_coef", shaping_coef);
        put("motion_penalty", motion_penalty);
        put("score_value", score_value);
        ini.set(sec, "episode_len", std::to_string(episode_len));
        ini.set(sec, "background", std::to_string(background));
        ini.set(sec, "multi_texture", multi_texture ? "1" : "0");
        ini.set(sec, "seed", std::to_string(seed));
    }

    static std::string format_double(double v) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.17g", v);
        return buf;
    }
};

struct EnvState {
    double th1 = 0.0, th2 = 0.0;  // joint angles, wrapped to (-pi, pi]
    double w1 = 0.0, w2 = 0.0;    // joint velocities, rad/step
    Vec2 ball_p;
    Vec2 ball_v;
    int t = 0;
    double score = 0.0;
    int background = 0;  // active texture this episode (multi-texture mode)
    util::Pcg32 rng;
};

struct StepResult {
    double reward = 0.0;     // r_t = r_sc + r_sh, computed as the sum
    double score_r = 0.0;    // sparse scoring component
    double shaping_r = 0.0;  // dense shaping incl. motion penalty
    bool caught = false;
    bool done = false;
    bool ball_respawned = false;  // catch or bottom-exit teleported the ball
};

inline double wrap_angle(double a) {
    // already in range: return unchanged so a resting joint keeps its bits
    if (a > -M_PI && a <= M_PI) return a;
    a = std::fmod(a + M_PI, 2.0 * M_PI);
    if (a <= 0.0) a += 2.0 * M_PI;
    return a - M_PI;  // (-pi, pi]
}

inline Vec2 forward_kinematics(double th1, double th2, const EnvConfig& cfg) {
    return {cfg.l1 * std::cos(th1) + cfg.l2 * std::cos(th1 + th2),
            cfg.l1 * std::sin(th1) + cfg.l2 * std::sin(th1 + th2)};
}

// Robot-only observation vector; the ball is deliberately absent so pixel
// agents must perceive it.
inline std::array<double, 6> state_vector(const EnvState& s) {
    return {std::cos(s.th1), std::sin(s.th1), std::cos(s.th2), std::sin(s.th2), s.w1, s.w2};
}

// Full simulator state as a vector, for the vector-input sanity task only:
// robot variables, ball position/velocity, the end-effector-to-ball
// displacement (the reacher-standard derived feature), and the episode phase
// (episodes terminate on a time limit, so t is part of the Markov state).
inline std::array<double, 13> state_vector_with_ball(const EnvState& s, const EnvConfig& cfg) {
    auto sv = state_vector(s);
    Vec2 ee = forward_kinematics(s.th1, s.th2, cfg);
    return {sv[0], sv[1], sv[2], sv[3], sv[4], sv[5], s.ball_p.x, s.ball_p.y,
            s.ball_v.x, s.ball_v.y, s.ball_p.x - ee.x, s.ball_p.y - ee.y,
            static_cast<double>(s.t) / cfg.episode_len};
}

// (r_sc, r_sh) of a transition: r_sh = -k_sh*|ee-ball| - k_mp*|torque|^2,
// r_sc = score value iff caught.
inline std::pair<double, double> reward(const EnvConfig& cfg, const EnvState& s,
                                        const std::array<double, 2>& torque, bool caught) {
    Vec2 ee = forward_kinematics(s.th1, s.th2, cfg);
    double dist = (ee - s.ball_p).norm();
    double r_sh = -cfg.shaping_coef * dist -
                  cfg.motion_penalty * (torque[0] * torque[0] + torque[1] * torque[1]);
    double r_sc = caught ? cfg.effective_score_value() : 0.0;
    return {r_sc, r_sh};
}

class Env {
public:
    explicit Env(EnvConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

    const EnvConfig& config() const { return cfg_; }
    const EnvState& state() const { return state_; }
    void set_state(const EnvState& s) { state_ = s; }

    EnvState& reset() { return reset(cfg_.seed); }

    EnvState& reset(std::uint64_t seed) {
        state_ = EnvState();
        state_.rng = util::Pcg32(seed, 0x5bd1e995);
        state_.th1 = state_.rng.uniform(-M_PI, M_PI);
        state_.th2 = state_.rng.uniform(-M_PI, M_PI);
        state_.background = cfg_.multi_texture ? state_.rng.uniform_int(0, 3) : cfg_.background;
        spawn_ball(/*from_top=*/cfg_.task == Task::catcher);
        return state_;
    }

    // Applies a raw torque command (clamped to the torque limit), advances
    // the arm and the ball one step and assembles the reward.
    StepResult step(const std::array<double, 2>& action) {
        if (state_.t >= cfg_.episode_len) throw std::logic_error("env: step after episode end");
        StepResult r;

        const double lim = cfg_.torque_limit;
        std::array<double, 2> tau = {std::clamp(action[0], -lim, lim), std::clamp(action[1], -lim, lim)};

        // damped double-integrator joints, unit inertia
        state_.w1 += (tau[0] - cfg_.damping * state_.w1) * cfg_.dt;
        state_.w2 += (tau[1] - cfg_.damping * state_.w2) * cfg_.dt;
        state_.th1 = wrap_angle(state_.th1 + state_.w1 * cfg_.dt);
        state_.th2 = wrap_angle(state_.th2 + state_.w2 * cfg_.dt);

        // ballistic ball with specular wall reflections
        state_.ball_p = state_.ball_p + state_.ball_v * cfg_.dt;
        const double lim_in = cfg_.arena_half - cfg_.ball_radius;
        reflect_axis(state_.ball_p.x, state_.ball_v.x, lim_in, /*low=*/true, /*high=*/true);
        if (cfg_.task == Task::chaser) {
            reflect_axis(state_.ball_p.y, state_.ball_v.y, lim_in, true, true);
        } else if (state_.ball_p.y < -(cfg_.arena_half + cfg_.ball_radius)) {
            spawn_ball(true);  // the ball left through the bottom: a miss, no score
            r.ball_respawned = true;
        }

        Vec2 ee = forward_kinematics(state_.th1, state_.th2, cfg_);
        r.caught = (ee - state_.ball_p).norm() < cfg_.catch_dist;
        auto [r_sc, r_sh] = reward(cfg_, state_, tau, r.caught);
        r.score_r = r_sc;
        r.shaping_r = r_sh;
        r.reward = r_sc + r_sh;

        if (r.caught && cfg_.task == Task::catcher) {
            spawn_ball(true);
            r.ball_respawned = true;
        }

        state_.score += r.score_r;
        state_.t += 1;
        r.done = (state_.t == cfg_.episode_len);
        return r;
    }

private:
    void spawn_ball(bool from_top) {
        const double lim_in = cfg_.arena_half - cfg_.ball_radius;
        if (from_top) {
            state_.ball_p = {state_.rng.uniform(-lim_in, lim_in), lim_in};
            double phi = state_.rng.uniform(-3.0 * M_PI / 4.0, -M_PI / 4.0);  // downward cone
            state_.ball_v = {cfg_.speed * std::cos(phi), cfg_.speed * std::sin(phi)};
        } else {
            state_.ball_p = {state_.rng.uniform(-lim_in, lim_in), state_.rng.uniform(-lim_in, lim_in)};
            double phi = state_.rng.uniform(-M_PI, M_PI);
            state_.ball_v = {cfg_.speed * std::cos(phi), cfg_.speed * std::sin(phi)};
        }
    }

    // Mirror position and flip the velocity sign; sign flips keep |v| bit-exact.
    static void reflect_axis(double& p, double& v, double lim, bool low, bool high) {
        if (low && p < -lim) {
            p = -2.0 * lim - p;
            v = -v;
        }
        if (high && p > lim) {
            p = 2.0 * lim - p;
            v = -v;
        }
    }

    EnvConfig cfg_;
    EnvState state_;
};

}  // namespace flowbench::env2d
