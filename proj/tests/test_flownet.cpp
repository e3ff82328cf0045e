#include <doctest.h>

#include <chrono>
#include <cstdio>
#include <filesystem>

#include "flowbench/flownet.hpp"
#include "test_util.hpp"

using namespace flowbench;
using flownet::FlowDataset;
using flownet::TinyFlowNetParams;
using nn::Shape;

TEST_CASE("tinyflownet shape chain reproduces the architecture table") {
    nn::GraphF g;
    TinyFlowNetParams<float> p;
    auto input = g.input(Shape{1, 84, 84, 6});
    auto net = build_tinyflownet(g, input, p, false);
    CHECK(g.shape_of(net.flow_full) == Shape{1, 84, 84, 2});
    CHECK(g.shape_of(net.flow_half) == Shape{1, 42, 42, 2});
    CHECK(g.shape_of(net.flow_up) == Shape{1, 84, 84, 2});

    // intermediate extents: 84 -> 84 -> 42 -> 42 -> 21 -> 21 -> 42 -> 84
    nn::GraphF g2;
    auto x = g2.input(Shape{1, 84, 84, 6});
    TinyFlowNetParams<float> q;
    auto skip_full = g2.relu(g2.conv2d(x, g2.frozen(&q.enc1_w), g2.frozen(&q.enc1_b), 1, true));
    CHECK(g2.shape_of(skip_full) == Shape{1, 84, 84, 64});
    auto e2 = g2.relu(g2.conv2d(skip_full, g2.frozen(&q.enc2_w), g2.frozen(&q.enc2_b), 2, true));
    CHECK(g2.shape_of(e2) == Shape{1, 42, 42, 64});
    auto skip_half = g2.relu(g2.conv2d(e2, g2.frozen(&q.enc3_w), g2.frozen(&q.enc3_b), 1, true));
    CHECK(g2.shape_of(skip_half) == Shape{1, 42, 42, 128});
    auto e4 = g2.relu(g2.conv2d(skip_half, g2.frozen(&q.enc4_w), g2.frozen(&q.enc4_b), 2, true));
    CHECK(g2.shape_of(e4) == Shape{1, 21, 21, 128});
    auto e5 = g2.relu(g2.conv2d(e4, g2.frozen(&q.enc5_w), g2.frozen(&q.enc5_b), 1, true));
    CHECK(g2.shape_of(e5) == Shape{1, 21, 21, 128});
    auto u1 = g2.relu(g2.tconv2d(e5, g2.frozen(&q.up1_w), g2.frozen(&q.up1_b)));
    CHECK(g2.shape_of(u1) == Shape{1, 42, 42, 32});
    auto tmp = g2.concat(u1, skip_half);
    CHECK(g2.shape_of(tmp) == Shape{1, 42, 42, 160});
    auto u2 = g2.relu(g2.tconv2d(tmp, g2.frozen(&q.up2_w), g2.frozen(&q.up2_b)));
    CHECK(g2.shape_of(u2) == Shape{1, 84, 84, 16});
    auto cat = g2.concat(u2, skip_full);
    CHECK(g2.shape_of(cat) == Shape{1, 84, 84, 80});

    CHECK_THROWS(build_tinyflownet(g, g.input(Shape{1, 82, 84, 6}), p, false));
    CHECK_THROWS(build_tinyflownet(g, g.input(Shape{1, 84, 84, 3}), p, false));
}

TEST_CASE("all-zero weights give all-zero flow outputs") {
    nn::GraphF g;
    TinyFlowNetParams<float> p;  // zero-initialized
    auto input = g.input(Shape{1, 84, 84, 6});
    auto net = build_tinyflownet(g, input, p, false);
    util::Pcg32 rng(3);
    for (auto& v : g.data(input).data) v = rng.next_float();
    g.forward();
    for (float v : g.value(net.flow_full).data) CHECK(v == 0.0f);
    for (float v : g.value(net.flow_half).data) CHECK(v == 0.0f);
}

TEST_CASE("flow loss closed forms: 0, 100, 150") {
    nn::GraphF g;
    const int B = 2, H = 12, W = 12;
    auto full = g.input(Shape{B, H, W, 2});
    auto up = g.input(Shape{B, H, W, 2});
    auto target = g.input(Shape{B, H, W, 2});
    auto loss = flownet::flow_loss(g, full, up, target, B);

    util::Pcg32 rng(5);
    for (std::size_t i = 0; i < g.data(target).data.size(); ++i)
        g.data(target).data[i] = static_cast<float>(rng.uniform(-2, 2));

    SUBCASE("both predictions equal the target: loss = 0") {
        g.data(full) = g.data(target);
        g.data(up) = g.data(target);
        g.forward();
        CHECK(std::abs(g.value(loss).data[0]) <= 1e-4);
    }
    SUBCASE("full offset by a unit vector: loss = 100") {
        g.data(full) = g.data(target);
        g.data(up) = g.data(target);
        for (std::size_t i = 0; i < g.data(full).data.size(); i += 2) g.data(full).data[i] += 1.0f;
        g.forward();
        CHECK(g.value(loss).data[0] == doctest::Approx(100.0).epsilon(1e-6));
    }
    SUBCASE("both offset by a unit vector: loss = 150") {
        g.data(full) = g.data(target);
        g.data(up) = g.data(target);
        for (std::size_t i = 0; i < g.data(full).data.size(); i += 2) {
            g.data(full).data[i] += 1.0f;
            g.data(up).data[i] += 1.0f;
        }
        g.forward();
        CHECK(g.value(loss).data[0] == doctest::Approx(150.0).epsilon(1e-6));
    }
}

TEST_CASE("loss decomposition: 100*mean full EPE + 50*mean upsampled EPE") {
    // independent accumulation oracle against the graph value
    nn::GraphF g;
    const int B = 2, H = 12, W = 12;
    auto full = g.input(Shape{B, H, W, 2});
    auto up = g.input(Shape{B, H, W, 2});
    auto target = g.input(Shape{B, H, W, 2});
    auto loss = flownet::flow_loss(g, full, up, target, B);
    util::Pcg32 rng(6);
    for (auto* t : {&g.data(full), &g.data(up), &g.data(target)})
        for (auto& v : t->data) v = static_cast<float>(rng.uniform(-2, 2));
    g.forward();

    double epe_full = 0.0, epe_up = 0.0;
    const auto& f = g.data(full);
    const auto& u = g.data(up);
    const auto& t = g.data(target);
    long sites = B * H * W;
    for (long i = 0; i < sites; ++i) {
        epe_full += std::hypot(f.data[static_cast<std::size_t>(2 * i)] - t.data[static_cast<std::size_t>(2 * i)],
                               f.data[static_cast<std::size_t>(2 * i + 1)] - t.data[static_cast<std::size_t>(2 * i + 1)]);
        epe_up += std::hypot(u.data[static_cast<std::size_t>(2 * i)] - t.data[static_cast<std::size_t>(2 * i)],
                             u.data[static_cast<std::size_t>(2 * i + 1)] - t.data[static_cast<std::size_t>(2 * i + 1)]);
    }
    double expect = 100.0 * (epe_full / sites) + 50.0 * (epe_up / sites);
    CHECK(g.value(loss).data[0] == doctest::Approx(expect).epsilon(1e-5));
}

TEST_CASE("end-to-end gradient of tinyflownet + flow loss matches finite differences") {
    // 12x12 reduced-extent instance in 64-bit, sampled parameter elements
    nn::GraphD g;
    TinyFlowNetParams<double> p;
    p.init(11);
    auto input = g.input(Shape{1, 12, 12, 6});
    auto target = g.input(Shape{1, 12, 12, 2});
    auto net = build_tinyflownet(g, input, p, /*trainable=*/true);
    auto loss = flownet::flow_loss(g, net.flow_full, net.flow_up, target, 1);

    util::Pcg32 rng(12);
    for (auto& v : g.data(input).data) v = rng.uniform(0, 1);
    for (auto& v : g.data(target).data) v = rng.uniform(-1.5, 1.5);
    g.forward();
    g.backward(loss);

    const auto& tr = g.trainable();
    REQUIRE(tr.size() == 18);
    double worst = 0.0;
    int probes = 0, kinks = 0;
    for (std::size_t pi = 0; pi < tr.size(); ++pi) {
        nn::TensorD& w = *tr[pi].first;
        nn::TensorD ga = g.grad(tr[pi].second);
        int wanted = w.data.size() > 8 ? 3 : 2;  // sample a few elements per tensor
        for (int k = 0; k < wanted; ++k) {
            for (int attempt = 0; attempt < 8; ++attempt) {
                std::size_t idx = rng.next_u32() % w.data.size();
                auto probe = testutil::fd_probe(g, loss, w, idx, ga.data[idx]);
                if (probe.kink) {  // probe straddled a ReLU kink: FD invalid there
                    ++kinks;
                    continue;
                }
                worst = std::max(worst, nn::rel_error(ga.data[idx], probe.fd));
                ++probes;
                break;
            }
        }
    }
    CHECK(probes >= 40);
    CHECK(kinks < probes);  // kink probes are the exception, not the rule
    CHECK(worst < 1e-3);
}

TEST_CASE("dataset generation contracts") {
    env2d::EnvConfig cfg;
    cfg.task = env2d::Task::catcher;
    FlowDataset ds = flownet::generate_dataset(cfg, 300, 0.4, 1.0, 7);
    CHECK(ds.size() == 300);
    CHECK(ds.rel_speed_min == 0.4);

    SUBCASE("speed metadata stays within the sampling range") {
        double lo = 10, hi = 0;
        for (const auto& r : ds.records) {
            lo = std::min(lo, r.rel_speed);
            hi = std::max(hi, r.rel_speed);
        }
        CHECK(lo >= 0.4);
        CHECK(hi <= 1.0);
        CHECK(lo < hi);  // multiple episodes, multiple speeds
    }
    SUBCASE("static arm: every record's flow is zero outside ball pixels") {
        for (std::size_t i = 0; i < ds.records.size(); i += 17) {
            const auto& r = ds.records[i];
            // nonzero flow must form a small blob (the ball), never the arm
            long nonzero = 0;
            for (int px = 0; px < render::kRes * render::kRes; ++px)
                if (r.target.v[static_cast<std::size_t>(2 * px)] != 0.0f ||
                    r.target.v[static_cast<std::size_t>(2 * px + 1)] != 0.0f)
                    ++nonzero;
            CHECK(nonzero <= 40);  // ball covers ~20 px; the arm would add hundreds
        }
    }
    SUBCASE("rejects degenerate requests") {
        CHECK_THROWS(flownet::generate_dataset(cfg, 1, 0.4, 1.0, 7));
        CHECK_THROWS(flownet::generate_dataset(cfg, 10, 0.0, 1.0, 7));
        CHECK_THROWS(flownet::generate_dataset(cfg, 10, 0.9, 0.4, 7));
    }
    SUBCASE("deterministic under seed") {
        FlowDataset d2 = flownet::generate_dataset(cfg, 50, 0.4, 1.0, 9);
        FlowDataset d3 = flownet::generate_dataset(cfg, 50, 0.4, 1.0, 9);
        CHECK(d2.records[20].cur.rgb == d3.records[20].cur.rgb);
        CHECK(d2.records[20].target.v == d3.records[20].target.v);
    }
}

TEST_CASE("dataset file round-trip") {
    env2d::EnvConfig cfg;
    FlowDataset ds = flownet::generate_dataset(cfg, 12, 0.5, 1.0, 3);
    auto path = (std::filesystem::temp_directory_path() / "fb_ds_test.bin").string();
    ds.save(path);
    FlowDataset rt = FlowDataset::load(path);
    REQUIRE(rt.size() == ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
        CHECK(rt.records[i].prev.rgb == ds.records[i].prev.rgb);
        CHECK(rt.records[i].cur.rgb == ds.records[i].cur.rgb);
        CHECK(rt.records[i].target.v == ds.records[i].target.v);
    }
    std::remove(path.c_str());
    CHECK_THROWS(FlowDataset::load(path + ".missing"));
}

TEST_CASE("epe evaluation identities") {
    env2d::EnvConfig cfg;
    FlowDataset ds = flownet::generate_dataset(cfg, 40, 0.6, 1.0, 5);
    std::vector<const flownet::FlowRecord*> recs;
    for (const auto& r : ds.records) recs.push_back(&r);

    // the targets themselves as predictions: EPE = 0
    auto perfect = flownet::evaluate_epe(recs, [](const flownet::FlowRecord& r) { return r.target; });
    CHECK(perfect.overall == doctest::Approx(0.0));
    CHECK(perfect.moving == doctest::Approx(0.0));

    // zero predictor: moving-pixel EPE equals the mean target magnitude
    auto zero = flownet::evaluate_epe(recs, [](const flownet::FlowRecord&) { return render::FlowField{}; });
    CHECK(zero.moving == doctest::Approx(zero.zero_moving).epsilon(1e-12));
    CHECK(zero.moving > 0.1);
}

TEST_CASE("flow training smoke: loss falls and runs are seed-deterministic") {
    env2d::EnvConfig cfg;
    FlowDataset ds = flownet::generate_dataset(cfg, 120, 0.4, 1.0, 21);
    flownet::FlowTrainConfig tc;
    tc.total_steps = 120;
    tc.halve_every = 60;
    tc.batch = 2;
    tc.lr = 2e-4;
    tc.eval_every = 120;
    tc.seed = 1;
    tc.log_every = 20;

    TinyFlowNetParams<float> p1;
    p1.init(1);
    auto r1 = flownet::train_flow(p1, ds, tc);
    CHECK(r1.last_loss < 0.7 * r1.first_loss);

    TinyFlowNetParams<float> p2;
    p2.init(1);
    auto r2 = flownet::train_flow(p2, ds, tc);
    CHECK(r1.last_loss == r2.last_loss);  // bit-identical replay
    CHECK(p1.enc3_w.data == p2.enc3_w.data);

    // even this briefly trained net beats the zero predictor and the
    // copy-previous-flow predictor on held-out records
    auto holdout = flownet::holdout_records(ds, tc.holdout_fraction);
    flownet::TinyFlowNetRunner runner(p1);
    auto trained = flownet::evaluate_epe(
        holdout, [&](const flownet::FlowRecord& r) { return runner.predict_field(r.prev, r.cur); });
    auto zero = flownet::evaluate_epe(holdout, [](const flownet::FlowRecord&) { return render::FlowField{}; });
    // copy-previous: predict record i with the target of the preceding record
    std::vector<const flownet::FlowRecord*> shifted;
    for (std::size_t i = 1; i < holdout.size(); ++i) shifted.push_back(holdout[i]);
    std::size_t prev_idx = 0;
    auto copy_prev = flownet::evaluate_epe(shifted, [&](const flownet::FlowRecord&) {
        return holdout[prev_idx++]->target;
    });
    CHECK(trained.moving < zero.moving);
    CHECK(trained.moving < copy_prev.moving);
}

TEST_CASE("checkpoint round-trip restores the network bit-exactly") {
    TinyFlowNetParams<float> p;
    p.init(77);
    nn::Checkpoint ck;
    p.to_checkpoint(ck);
    ck.set_fingerprint(42);
    auto path = (std::filesystem::temp_directory_path() / "fb_tiny.ckpt").string();
    nn::save_checkpoint(path, ck);

    TinyFlowNetParams<float> q;
    q.from_checkpoint(nn::load_checkpoint(path));
    CHECK(q.enc1_w.data == p.enc1_w.data);
    CHECK(q.full_flow_b.data == p.full_flow_b.data);
    std::remove(path.c_str());
}

TEST_CASE("forward throughput (informational)") {
    TinyFlowNetParams<float> p;
    p.init(5);
    flownet::TinyFlowNetRunner runner(p);
    env2d::EnvConfig cfg;
    env2d::EnvState s;
    s.ball_p = {0.3, 0.2};
    auto f1 = render::render(s, cfg);
    s.ball_p = {0.33, 0.2};
    auto f2 = render::render(s, cfg);
    runner.predict(f1, f2);  // warm up
    auto t0 = std::chrono::steady_clock::now();
    int n = 30;
    for (int i = 0; i < n; ++i) runner.predict(f1, f2);
    double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("[info] tinyflownet forward: %.1f pairs/s single-threaded\n", n / dt);
    CHECK(n / dt > 10.0);  // hard floor is checked by the acceptance suite
}
