#include <doctest.h>

#include <cstring>

#include "flowbench/env2d.hpp"

using namespace flowbench;
using env2d::Env;
using env2d::EnvConfig;
using env2d::EnvState;
using env2d::Task;
using env2d::Vec2;

namespace {
EnvConfig cfg_for(Task t, std::uint64_t seed = 0) {
    EnvConfig c;
    c.task = t;
    c.seed = seed;
    return c;
}
}  // namespace

TEST_CASE("forward kinematics closed forms") {
    EnvConfig c = cfg_for(Task::chaser);
    auto p = env2d::forward_kinematics(0.0, 0.0, c);
    CHECK(p.x == doctest::Approx(c.l1 + c.l2).epsilon(1e-15));
    CHECK(p.y == doctest::Approx(0.0).epsilon(1e-15));

    auto q = env2d::forward_kinematics(M_PI / 2.0, 0.0, c);
    CHECK(std::abs(q.x) < 1e-12);
    CHECK(q.y == doctest::Approx(c.l1 + c.l2).epsilon(1e-12));

    util::Pcg32 rng(3);
    for (int i = 0; i < 1000; ++i) {
        auto r = env2d::forward_kinematics(rng.uniform(-M_PI, M_PI), rng.uniform(-M_PI, M_PI), c);
        CHECK(r.norm() <= c.l1 + c.l2 + 1e-12);
    }
}

TEST_CASE("state vector encoding") {
    EnvState s;
    auto v = env2d::state_vector(s);
    CHECK(v == std::array<double, 6>{1, 0, 1, 0, 0, 0});
    CHECK(v.size() == 6);

    EnvState a, b;
    a.th1 = M_PI;
    b.th1 = -M_PI;
    auto va = env2d::state_vector(a), vb = env2d::state_vector(b);
    for (int i = 0; i < 6; ++i) CHECK(va[i] == doctest::Approx(vb[i]).epsilon(1e-15));
}

TEST_CASE("reset contracts") {
    SUBCASE("spawn speed is the configured speed") {
        Env env(cfg_for(Task::chaser, 7));
        for (std::uint64_t s = 0; s < 50; ++s) {
            env.reset(s);
            CHECK(env.state().ball_v.norm() == doctest::Approx(env.config().speed).epsilon(1e-12));
        }
    }
    SUBCASE("catcher spawns move downward") {
        Env env(cfg_for(Task::catcher));
        for (std::uint64_t s = 0; s < 1000; ++s) {
            env.reset(s);
            CHECK(env.state().ball_v.y < 0.0);
            CHECK(env.state().ball_p.y == doctest::Approx(1.0 - env.config().ball_radius));
        }
    }
    SUBCASE("same seed, same state") {
        Env e1(cfg_for(Task::catcher)), e2(cfg_for(Task::catcher));
        e1.reset(42);
        e2.reset(42);
        CHECK(e1.state().th1 == e2.state().th1);
        CHECK(e1.state().th2 == e2.state().th2);
        CHECK(e1.state().ball_p.x == e2.state().ball_p.x);
        CHECK(e1.state().ball_v.y == e2.state().ball_v.y);
    }
}

TEST_CASE("specular reflection flips one component and keeps speed") {
    EnvConfig c = cfg_for(Task::chaser);
    Env env(c);
    env.reset(1);
    EnvState s = env.state();
    s.ball_p = {-(c.arena_half - c.ball_radius) + 0.001, 0.0};
    s.ball_v = {-0.03, -0.02};
    env.set_state(s);
    double speed_before = s.ball_v.norm();
    env.step({0, 0});
    CHECK(env.state().ball_v.x == 0.03);
    CHECK(env.state().ball_v.y == -0.02);
    CHECK(env.state().ball_v.norm() == speed_before);  // sign flip is exact
}

TEST_CASE("zero torque, zero velocity: arm pose unchanged") {
    Env env(cfg_for(Task::chaser, 5));
    env.reset(5);
    EnvState st = env.state();
    st.w1 = st.w2 = 0.0;
    env.set_state(st);
    double th1 = env.state().th1, th2 = env.state().th2;
    for (int i = 0; i < 10; ++i) env.step({0, 0});
    CHECK(env.state().th1 == th1);
    CHECK(env.state().th2 == th2);
}

TEST_CASE("episodes terminate at exactly 250 steps, never earlier") {
    for (Task t : {Task::catcher, Task::chaser}) {
        Env env(cfg_for(t, 11));
        env.reset(11);
        for (int i = 0; i < 250; ++i) {
            auto r = env.step({0.01, -0.01});
            CHECK(r.done == (i == 249));
        }
        CHECK_THROWS_AS(env.step({0, 0}), std::logic_error);
    }
}

TEST_CASE("speed preserved across many reflection events to 1e-12") {
    EnvConfig c = cfg_for(Task::chaser, 2);
    c.speed = 0.06;  // faster ball, more wall hits
    Env env(c);
    env.reset(2);
    double s0 = env.state().ball_v.norm();
    long reflections = 0;
    while (reflections < 10000) {
        Vec2 v_before = env.state().ball_v;
        if (env.state().t >= c.episode_len) {
            EnvState st = env.state();
            st.t = 0;  // keep the same ball trajectory running
            env.set_state(st);
        }
        env.step({0, 0});
        if (env.state().ball_v.x != v_before.x || env.state().ball_v.y != v_before.y) ++reflections;
        CHECK(std::abs(env.state().ball_v.norm() - s0) <= 1e-12);
    }
}

TEST_CASE("ball stays inside the arena expanded by its radius") {
    for (Task t : {Task::catcher, Task::chaser}) {
        EnvConfig c = cfg_for(t, 9);
        Env env(c);
        for (int ep = 0; ep < 4; ++ep) {
            env.reset(9 + static_cast<std::uint64_t>(ep));
            for (int i = 0; i < 250; ++i) {
                env.step({0.02, 0.02});
                CHECK(std::abs(env.state().ball_p.x) <= c.arena_half + c.ball_radius);
                CHECK(std::abs(env.state().ball_p.y) <= c.arena_half + c.ball_radius);
            }
        }
    }
}

TEST_CASE("reward closed forms") {
    EnvConfig c = cfg_for(Task::catcher);
    EnvState s;

    SUBCASE("end effector on the ball, zero action") {
        s.ball_p = env2d::forward_kinematics(s.th1, s.th2, c);
        auto [r_sc, r_sh] = env2d::reward(c, s, {0, 0}, true);
        CHECK(r_sh == 0.0);
        CHECK(r_sc == c.effective_score_value());
    }
    SUBCASE("distance 0.5 with unit shaping coefficient") {
        EnvConfig c2 = c;
        c2.shaping_coef = 1.0;
        Vec2 ee = env2d::forward_kinematics(s.th1, s.th2, c2);
        s.ball_p = {ee.x - 0.5, ee.y};
        auto [r_sc, r_sh] = env2d::reward(c2, s, {0, 0}, false);
        CHECK(r_sc == 0.0);
        CHECK(r_sh == doctest::Approx(-0.5).epsilon(1e-12));
    }
    SUBCASE("doubling the action quadruples the motion penalty") {
        s.ball_p = env2d::forward_kinematics(s.th1, s.th2, c);
        auto [sc1, sh1] = env2d::reward(c, s, {0.01, 0.02}, false);
        auto [sc2, sh2] = env2d::reward(c, s, {0.02, 0.04}, false);
        (void)sc1;
        (void)sc2;
        CHECK(sh2 == doctest::Approx(4.0 * sh1).epsilon(1e-12));
    }
}

TEST_CASE("reward decomposition is exact over an episode") {
    Env env(cfg_for(Task::chaser, 21));
    env.reset(21);
    double total = 0.0, sc = 0.0, sh = 0.0;
    util::Pcg32 rng(4);
    for (int i = 0; i < 250; ++i) {
        auto r = env.step({rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05)});
        CHECK(r.reward == r.score_r + r.shaping_r);  // computed as the sum, bit-exact
        total += r.reward;
        sc += r.score_r;
        sh += r.shaping_r;
    }
    CHECK(env.state().score == sc);
    CHECK(total == doctest::Approx(sc + sh).epsilon(1e-12));
}

TEST_CASE("trajectories are bit-deterministic for a fixed seed and action sequence") {
    auto run = [](std::uint64_t seed) {
        Env env(cfg_for(Task::catcher, seed));
        env.reset(seed);
        util::Pcg32 arng(seed + 1);
        std::vector<double> trace;
        for (int i = 0; i < 250; ++i) {
            auto r = env.step({arng.uniform(-0.1, 0.1), arng.uniform(-0.1, 0.1)});
            trace.push_back(env.state().th1);
            trace.push_back(env.state().ball_p.x);
            trace.push_back(r.reward);
        }
        return trace;
    };
    auto t1 = run(33), t2 = run(33), t3 = run(34);
    CHECK(t1 == t2);
    CHECK(t1 != t3);
}

TEST_CASE("catcher: ball exiting the bottom respawns from the top without score") {
    EnvConfig c = cfg_for(Task::catcher, 6);
    Env env(c);
    env.reset(6);
    EnvState s = env.state();
    s.ball_p = {0.0, -(c.arena_half + c.ball_radius) + 1e-4};
    s.ball_v = {0.0, -c.speed};
    s.th1 = 2.0;  // keep the arm away from the respawn zone
    s.th2 = 2.0;
    env.set_state(s);
    auto r = env.step({0, 0});
    CHECK(r.ball_respawned);
    CHECK(r.score_r == 0.0);
    CHECK(env.state().ball_p.y == doctest::Approx(c.arena_half - c.ball_radius));
}

TEST_CASE("catcher: catching scores once and respawns the ball") {
    EnvConfig c = cfg_for(Task::catcher, 8);
    Env env(c);
    env.reset(8);
    EnvState s = env.state();
    s.th1 = 0.0;
    s.th2 = 0.0;
    s.w1 = s.w2 = 0.0;
    Vec2 ee = env2d::forward_kinematics(0.0, 0.0, c);
    s.ball_p = {ee.x - 0.01, ee.y};  // inside catch distance after one step
    s.ball_v = {0.0, c.speed};
    env.set_state(s);
    auto r = env.step({0, 0});
    CHECK(r.caught);
    CHECK(r.score_r == 1.0);
    CHECK(r.ball_respawned);
    CHECK(env.state().ball_p.y == doctest::Approx(c.arena_half - c.ball_radius));
    CHECK(env.state().score == 1.0);
}

TEST_CASE("chaser: staying inside the threshold scores every step") {
    EnvConfig c = cfg_for(Task::chaser, 10);
    c.speed = 1e-9;  // effectively static ball
    Env env(c);
    env.reset(10);
    EnvState s = env.state();
    s.th1 = 0.3;
    s.th2 = -0.2;
    s.w1 = s.w2 = 0.0;
    s.ball_p = env2d::forward_kinematics(s.th1, s.th2, c);
    s.ball_v = {0.0, -1e-9};
    env.set_state(s);
    double sc = 0.0;
    for (int i = 0; i < 5; ++i) sc += env.step({0, 0}).score_r;
    CHECK(sc == doctest::Approx(5 * 0.04).epsilon(1e-12));
}

TEST_CASE("config round-trips through the ini format") {
    EnvConfig c = cfg_for(Task::catcher, 123);
    c.speed = 0.0123;
    c.shaping_coef = 0.07;
    util::Ini ini;
    c.to_ini(ini);
    EnvConfig c2 = EnvConfig::from_ini(util::Ini::parse_string(ini.to_string()), Task::catcher);
    CHECK(c2.speed == c.speed);
    CHECK(c2.shaping_coef == c.shaping_coef);
    CHECK(c2.seed == c.seed);
    CHECK(c2.episode_len == c.episode_len);
}

TEST_CASE("config validation rejects inconsistent settings") {
    EnvConfig c;
    c.l1 = 0.6;
    c.l2 = 0.6;  // arm longer than the arena half-extent
    CHECK_THROWS(Env(c));
    EnvConfig c2;
    c2.speed = 0.0;
    CHECK_THROWS(Env(c2));
}

TEST_CASE("ini parser basics") {
    auto ini = util::Ini::parse_string("[a]\nx = 1.5 # comment\ny=2\n\n[b]\nx = 7\n");
    CHECK(ini.get_double("a", "x", 0) == 1.5);
    CHECK(ini.get_int("a", "y", 0) == 2);
    CHECK(ini.get_double("b", "x", 0) == 7);
    CHECK(!ini.get("a", "z").has_value());
    CHECK_THROWS(util::Ini::parse_string("[a\nx=1"));
    CHECK_THROWS(util::Ini::parse_string("[a]\nnoequals\n"));
}
