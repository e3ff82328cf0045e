#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include "flowbench/flow.hpp"
#include "flowbench/render.hpp"
#include "sim_sampling.hpp"

using namespace flowbench;
using render::FlowField;
using render::Frame;
using render::kRes;

namespace {
env2d::EnvConfig chaser_cfg() {
    env2d::EnvConfig c;
    c.task = env2d::Task::chaser;
    return c;
}

env2d::EnvState centered_state() {
    env2d::EnvState s;
    s.th1 = 0.7;
    s.th2 = 0.9;
    s.ball_p = {0.4, -0.3};
    s.ball_v = {0.02, 0.02};
    return s;
}
}  // namespace

TEST_CASE("rendering is deterministic") {
    auto cfg = chaser_cfg();
    auto s = centered_state();
    Frame a = render::render(s, cfg);
    Frame b = render::render(s, cfg);
    CHECK(a == b);
}

TEST_CASE("ball interior reaches pure ball color and the id buffer marks it") {
    auto cfg = chaser_cfg();
    auto s = centered_state();
    auto out = render::render_with_ids(s, cfg);
    int cx = static_cast<int>(render::px_of_world_x(s.ball_p.x));
    int cy = static_cast<int>(render::py_of_world_y(s.ball_p.y));
    // disc radius 0.06 world = 2.52 px > 1 px, so the center pixel is fully covered
    CHECK(out.frame.at(cy, cx, 0) == 235);  // 0.92 * 255 rounded
    CHECK(out.frame.at(cy, cx, 1) == 74);
    CHECK(out.frame.at(cy, cx, 2) == 46);
    CHECK(out.ids.at(cy, cx) == render::kBall);
    // a corner far from everything is pure background
    CHECK(out.ids.at(0, kRes - 1) == render::kBackground);
}

TEST_CASE("moving the ball changes only a bounded region around both positions") {
    auto cfg = chaser_cfg();
    auto s1 = centered_state();
    auto s2 = s1;
    s2.ball_p.x += 0.1;
    Frame f1 = render::render(s1, cfg);
    Frame f2 = render::render(s2, cfg);
    double max_r_px = (cfg.ball_radius + 0.1) * render::kPxPerUnit + 2.0;
    int cx = static_cast<int>(render::px_of_world_x(s1.ball_p.x + 0.05));
    int cy = static_cast<int>(render::py_of_world_y(s1.ball_p.y));
    for (int y = 0; y < kRes; ++y)
        for (int x = 0; x < kRes; ++x) {
            bool differs = false;
            for (int c = 0; c < 3; ++c) differs |= f1.at(y, x, c) != f2.at(y, x, c);
            if (differs) {
                double d = std::hypot(x - cx, y - cy);
                CHECK(d <= max_r_px);
            }
        }
}

TEST_CASE("textures only appear in multi-texture mode and stay static") {
    auto cfg = chaser_cfg();
    auto s = centered_state();
    Frame solid = render::render(s, cfg);
    CHECK(solid.at(0, 0, 0) == solid.at(0, 40, 0));  // flat background

    cfg.multi_texture = true;
    for (int bg = 0; bg < 4; ++bg) {
        s.background = bg;
        Frame a = render::render(s, cfg);
        auto s2 = s;
        s2.ball_p.x += 0.2;  // scene moves, background must not
        Frame b = render::render(s2, cfg);
        CHECK(a.at(2, 2, 0) == b.at(2, 2, 0));
        CHECK(a.at(2, 2, 1) == b.at(2, 2, 1));
    }
    // the four textures are pairwise distinct somewhere
    std::array<Frame, 4> fr;
    for (int bg = 0; bg < 4; ++bg) {
        s.background = bg;
        fr[static_cast<std::size_t>(bg)] = render::render(s, cfg);
    }
    for (int a = 0; a < 4; ++a)
        for (int b = a + 1; b < 4; ++b) CHECK(!(fr[static_cast<std::size_t>(a)] == fr[static_cast<std::size_t>(b)]));
}

TEST_CASE("ground-truth flow of a pure ball translation") {
    auto cfg = chaser_cfg();
    env2d::EnvState prev = centered_state();
    prev.th1 = 2.0;  // park the arm away from the ball
    prev.th2 = 0.0;
    prev.ball_p = {0.0, 0.0};
    env2d::EnvState cur = prev;
    // exactly +3 px right, -2 px down in image coords means +2 px world up
    cur.ball_p = {3.0 / render::kPxPerUnit, 2.0 / render::kPxPerUnit};
    FlowField flow = render::ground_truth_flow(prev, cur, cfg);

    auto out = render::render_with_ids(cur, cfg);
    int ball_px = 0;
    for (int y = 0; y < kRes; ++y)
        for (int x = 0; x < kRes; ++x) {
            if (out.ids.at(y, x) == render::kBall) {
                ++ball_px;
                CHECK(flow.at(y, x, 0) == doctest::Approx(3.0).epsilon(1e-9));
                CHECK(flow.at(y, x, 1) == doctest::Approx(-2.0).epsilon(1e-9));
            } else if (out.ids.at(y, x) == render::kBackground) {
                CHECK(flow.at(y, x, 0) == 0.0f);
                CHECK(flow.at(y, x, 1) == 0.0f);
            }
        }
    CHECK(ball_px > 6);
}

TEST_CASE("static scene gives an all-zero flow field") {
    auto cfg = chaser_cfg();
    auto s = centered_state();
    FlowField flow = render::ground_truth_flow(s, s, cfg);
    for (float v : flow.v) CHECK(v == 0.0f);
}

TEST_CASE("flow is exactly zero on background pixels for random pairs") {
    util::Pcg32 rng(17);
    auto cfg = chaser_cfg();
    for (int trial = 0; trial < 20; ++trial) {
        auto [prev, cur] = testutil::random_state_pair(cfg, rng);
        FlowField flow = render::ground_truth_flow(prev, cur, cfg);
        auto out = render::render_with_ids(cur, cfg);
        for (int i = 0; i < kRes * kRes; ++i)
            if (out.ids.id[static_cast<std::size_t>(i)] == render::kBackground) {
                CHECK(flow.v[static_cast<std::size_t>(2 * i)] == 0.0f);
                CHECK(flow.v[static_cast<std::size_t>(2 * i + 1)] == 0.0f);
            }
    }
}

TEST_CASE("warp consistency on random state pairs (both tasks)") {
    util::Pcg32 rng(23);
    for (auto task : {env2d::Task::catcher, env2d::Task::chaser}) {
        env2d::EnvConfig cfg;
        cfg.task = task;
        render::WarpErr pooled;
        int clean_pairs = 0, pairs = 0;
        for (int trial = 0; trial < 25; ++trial) {
            auto [prev, cur] = testutil::random_state_pair(cfg, rng);
            FlowField flow = render::ground_truth_flow(prev, cur, cfg);
            auto interior = render::erode1(render::nonzero_flow_mask(flow));
            Frame pf = render::render(prev, cfg);
            Frame cf = render::render(cur, cfg);
            auto err = render::masked_warp_err(pf, cf, flow, interior);
            if (err.n == 0) continue;  // nothing moved enough to have an interior
            ++pairs;
            pooled.sum += err.sum;
            pooled.n += err.n;
            // ball-over-arm crossings disocclude a few pixels; most pairs are clean
            if (err.mae() < 2.0 / 255.0) ++clean_pairs;
        }
        CHECK(pairs > 10);
        CHECK(pooled.mae() < 2.0 / 255.0);
        CHECK(clean_pairs >= pairs * 8 / 10);
    }
}

TEST_CASE("segmentation from flow") {
    auto cfg = chaser_cfg();
    SUBCASE("zero flow, empty mask; threshold above max, empty mask") {
        FlowField flow;
        auto m = render::segmentation_from_flow(flow, 0.5);
        for (auto v : m) CHECK(v == 0);
        flow.at(3, 3, 0) = 2.0f;
        auto m2 = render::segmentation_from_flow(flow, 5.0);
        for (auto v : m2) CHECK(v == 0);
        CHECK_THROWS(render::segmentation_from_flow(flow, 0.0));
    }
    SUBCASE("gt flow of a moving ball matches the ball id region (IoU > 0.9)") {
        util::Pcg32 rng(31);
        for (int trial = 0; trial < 10; ++trial) {
            env2d::EnvState prev = testutil::random_state(cfg, rng);
            prev.th1 = 2.5;  // static arm far from the ball path
            prev.th2 = 0.1;
            prev.w1 = prev.w2 = 0.0;
            prev.ball_p = {rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)};
            env2d::EnvState cur = prev;
            // displacement > 1 px in a random direction
            double ang = rng.uniform(-M_PI, M_PI);
            cur.ball_p.x += 1.4 / render::kPxPerUnit * std::cos(ang);
            cur.ball_p.y += 1.4 / render::kPxPerUnit * std::sin(ang);
            FlowField flow = render::ground_truth_flow(prev, cur, cfg);
            auto mask = render::segmentation_from_flow(flow, 0.5);
            auto out = render::render_with_ids(cur, cfg);
            long inter = 0, uni = 0;
            for (int i = 0; i < kRes * kRes; ++i) {
                bool a = mask[static_cast<std::size_t>(i)] != 0;
                bool b = out.ids.id[static_cast<std::size_t>(i)] == render::kBall;
                inter += (a && b) ? 1 : 0;
                uni += (a || b) ? 1 : 0;
            }
            REQUIRE(uni > 0);
            CHECK(static_cast<double>(inter) / static_cast<double>(uni) > 0.9);
        }
    }
}

TEST_CASE("velocity vector extraction") {
    SUBCASE("uniform flow on a 30-pixel object") {
        FlowField flow;
        for (int i = 100; i < 130; ++i) {
            flow.v[static_cast<std::size_t>(2 * i)] = 2.0f;
            flow.v[static_cast<std::size_t>(2 * i + 1)] = -1.0f;
        }
        auto v = render::extract_velocity_vector(flow);
        CHECK(v[0] == doctest::Approx(2.0));
        CHECK(v[1] == doctest::Approx(-1.0));
    }
    SUBCASE("zero flow gives (0,0)") {
        FlowField flow;
        auto v = render::extract_velocity_vector(flow);
        CHECK(v[0] == 0.0);
        CHECK(v[1] == 0.0);
    }
    SUBCASE("recovers the simulated ball displacement within 0.5 px") {
        auto cfg = chaser_cfg();
        env2d::EnvState prev = centered_state();
        prev.th1 = -2.2;  // arm away from the ball
        prev.th2 = 0.3;
        env2d::EnvState cur = prev;
        cur.ball_p = {prev.ball_p.x + 3.0 / render::kPxPerUnit, prev.ball_p.y + 2.0 / render::kPxPerUnit};
        FlowField flow = render::ground_truth_flow(prev, cur, cfg);
        auto v = render::extract_velocity_vector(flow);
        CHECK(std::abs(v[0] - 3.0) <= 0.5);
        CHECK(std::abs(v[1] - (-2.0)) <= 0.5);
    }
}

TEST_CASE("flow visualization mapping") {
    FlowField flow;
    Frame black = render::flow_to_rgb(flow, 2.0);
    for (auto b : black.rgb) CHECK(b == 0);

    flow.at(5, 5, 0) = 2.0f;  // == scale: saturated red
    Frame f = render::flow_to_rgb(flow, 2.0);
    CHECK(f.at(5, 5, 0) == 255);
    CHECK(f.at(5, 5, 1) == 0);
    CHECK(f.at(5, 5, 2) == 0);

    flow.at(6, 6, 1) = -2.0f;  // negative: blue
    Frame g = render::flow_to_rgb(flow, 2.0);
    CHECK(g.at(6, 6, 2) == 255);
    CHECK(g.at(6, 6, 0) == 0);
}

TEST_CASE("ppm and flow dumps round-trip") {
    auto cfg = chaser_cfg();
    auto s = centered_state();
    Frame f = render::render(s, cfg);
    auto dir = std::filesystem::temp_directory_path();
    std::string p1 = (dir / "fb_frame.ppm").string();
    render::write_ppm(f, p1);
    Frame f2 = render::read_ppm(p1);
    CHECK(f == f2);
    // byte-identity of a rewrite
    std::string p2 = (dir / "fb_frame2.ppm").string();
    render::write_ppm(f2, p2);
    std::ifstream a(p1, std::ios::binary), b(p2, std::ios::binary);
    std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
    std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
    CHECK(sa == sb);
    std::remove(p1.c_str());
    std::remove(p2.c_str());

    env2d::EnvState s2 = s;
    s2.ball_p.x += 0.05;
    FlowField flow = render::ground_truth_flow(s, s2, cfg);
    std::string p3 = (dir / "fb_flow.bin").string();
    render::write_flow_dump(flow, p3);
    FlowField flow2 = render::read_flow_dump(p3);
    CHECK(flow.v == flow2.v);
    std::remove(p3.c_str());
}

TEST_CASE("observation channel counts and contents") {
    auto cfg = chaser_cfg();
    auto s = centered_state();
    env2d::EnvState s2 = s;
    s2.ball_p.x += 2.0 / render::kPxPerUnit;  // 2 px right
    Frame prev = render::render(s, cfg);
    Frame cur = render::render(s2, cfg);
    FlowField flow = render::ground_truth_flow(s, s2, cfg);

    using render::ObservationSpec;
    using render::ObsVariant;

    CHECK(ObservationSpec{ObsVariant::image}.channels() == 3);
    CHECK(ObservationSpec{ObsVariant::stack2}.channels() == 6);
    CHECK(ObservationSpec{ObsVariant::image_diff}.channels() == 6);
    CHECK(ObservationSpec{ObsVariant::segmentation}.channels() == 4);
    CHECK(ObservationSpec{ObsVariant::flow}.channels() == 5);
    CHECK(ObservationSpec{ObsVariant::gt_flow}.channels() == 5);
    CHECK(ObservationSpec{ObsVariant::vector}.channels() == 0);

    SUBCASE("image_diff with identical frames has zero difference channels") {
        auto obs = render::make_observation(cur, cur, flow, ObservationSpec{ObsVariant::image_diff});
        for (int i = 0; i < kRes * kRes; ++i)
            for (int c = 3; c < 6; ++c) CHECK(obs.data[static_cast<std::size_t>(i * 6 + c)] == 0.0f);
    }
    SUBCASE("image_diff of a rightward-moving ball shows a signed dipole") {
        auto obs = render::make_observation(cur, prev, flow, ObservationSpec{ObsVariant::image_diff});
        // red channel difference: positive at the leading (right) edge, negative trailing
        int cy = static_cast<int>(render::py_of_world_y(s.ball_p.y));
        int cx_lead = static_cast<int>(render::px_of_world_x(s2.ball_p.x)) + 2;
        int cx_trail = static_cast<int>(render::px_of_world_x(s.ball_p.x)) - 2;
        CHECK(obs.data[static_cast<std::size_t>((cy * kRes + cx_lead) * 6 + 3)] > 0.1f);
        CHECK(obs.data[static_cast<std::size_t>((cy * kRes + cx_trail) * 6 + 3)] < -0.1f);
    }
    SUBCASE("stack2 holds prev then cur") {
        auto obs = render::make_observation(cur, prev, flow, ObservationSpec{ObsVariant::stack2});
        int i = 40 * kRes + 40;
        CHECK(obs.data[static_cast<std::size_t>(i * 6 + 0)] == doctest::Approx(prev.rgb[static_cast<std::size_t>(3 * i)] / 255.0));
        CHECK(obs.data[static_cast<std::size_t>(i * 6 + 3)] == doctest::Approx(cur.rgb[static_cast<std::size_t>(3 * i)] / 255.0));
    }
    SUBCASE("flow channels are normalized by flow_scale") {
        auto spec = ObservationSpec::for_env(ObsVariant::gt_flow, cfg);
        auto obs = render::make_observation(cur, prev, flow, spec);
        int cy = static_cast<int>(render::py_of_world_y(s2.ball_p.y));
        int cx = static_cast<int>(render::px_of_world_x(s2.ball_p.x));
        CHECK(obs.data[static_cast<std::size_t>((cy * kRes + cx) * 5 + 3)] ==
              doctest::Approx(2.0 / spec.flow_scale).epsilon(1e-5));
    }
    SUBCASE("velocity_vector routes the 2-vector out") {
        std::array<double, 2> vel{};
        auto spec = ObservationSpec::for_env(ObsVariant::velocity_vector, cfg);
        auto obs = render::make_observation(cur, prev, flow, spec, &vel);
        CHECK(obs.shape == nn::Shape{kRes, kRes, 3});
        CHECK(std::abs(vel[0] - 2.0) <= 0.5);
        CHECK(spec.extra_vec_dims() == 2);
    }
    SUBCASE("vector variant has no pixel planes") {
        CHECK_THROWS(render::make_observation(cur, prev, flow, ObservationSpec{ObsVariant::vector}));
    }
}

TEST_CASE("observation variant names round-trip") {
    using render::obs_variant_from_name;
    using render::ObsVariant;
    for (auto v : {ObsVariant::image, ObsVariant::stack2, ObsVariant::image_diff, ObsVariant::lstm_image,
                   ObsVariant::segmentation, ObsVariant::flow, ObsVariant::gt_flow,
                   ObsVariant::velocity_vector, ObsVariant::vector})
        CHECK(obs_variant_from_name(render::obs_variant_name(v)) == v);
    CHECK_THROWS(obs_variant_from_name("bogus"));
}
