#pragma once

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "flowbench/env2d.hpp"
#include "flowbench/flow.hpp"
#include "flowbench/render.hpp"

namespace flowbench::flownet {

struct FlowRecord {
    render::Frame prev;
    render::Frame cur;
    render::FlowField target;
    double rel_speed = 1.0;  // target speed / base speed when generated; not serialized
};

// Frame-pair dataset with analytic flow targets. On disk:
//   magic "FLOWDS", version byte (1), count/height/width u32le, then per
//   record: prev RGB bytes, cur RGB bytes, flow as two f32le planes.
struct FlowDataset {
    std::vector<FlowRecord> records;
    env2d::Task task = env2d::Task::chaser;
    double rel_speed_min = 1.0, rel_speed_max = 1.0;

    std::size_t size() const { return records.size(); }

    void save(const std::string& path) const {
        std::ofstream os(path, std::ios::binary);
        if (!os) throw std::runtime_error("dataset: cannot open for write: " + path);
        os.write("FLOWDS", 6);
        char version = 1;
        os.write(&version, 1);
        std::uint32_t hdr[3] = {static_cast<std::uint32_t>(records.size()), render::kRes, render::kRes};
        os.write(reinterpret_cast<const char*>(hdr), 12);
        std::vector<float> plane(render::kRes * render::kRes);
        for (const FlowRecord& r : records) {
            os.write(reinterpret_cast<const char*>(r.prev.rgb.data()), static_cast<std::streamsize>(r.prev.rgb.size()));
            os.write(reinterpret_cast<const char*>(r.cur.rgb.data()), static_cast<std::streamsize>(r.cur.rgb.size()));
            for (int c = 0; c < 2; ++c) {
                for (int i = 0; i < render::kRes * render::kRes; ++i)
                    plane[static_cast<std::size_t>(i)] = r.target.v[static_cast<std::size_t>(2 * i + c)];
                os.write(reinterpret_cast<const char*>(plane.data()), static_cast<std::streamsize>(plane.size() * 4));
            }
        }
        if (!os) throw std::runtime_error("dataset: write failed: " + path);
    }

    static FlowDataset load(const std::string& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw std::runtime_error("dataset: cannot open: " + path);
        char magic[6];
        is.read(magic, 6);
        if (!is || std::string(magic, 6) != "FLOWDS") throw std::runtime_error("dataset: bad magic in " + path);
        char version = 0;
        is.read(&version, 1);
        if (version != 1) throw std::runtime_error("dataset: unsupported version");
        std::uint32_t hdr[3];
        is.read(reinterpret_cast<char*>(hdr), 12);
        if (!is || hdr[1] != render::kRes || hdr[2] != render::kRes)
            throw std::runtime_error("dataset: unsupported extents");
        FlowDataset ds;
        ds.records.resize(hdr[0]);
        std::vector<float> plane(render::kRes * render::kRes);
        for (FlowRecord& r : ds.records) {
            is.read(reinterpret_cast<char*>(r.prev.rgb.data()), static_cast<std::streamsize>(r.prev.rgb.size()));
            is.read(reinterpret_cast<char*>(r.cur.rgb.data()), static_cast<std::streamsize>(r.cur.rgb.size()));
            for (int c = 0; c < 2; ++c) {
                is.read(reinterpret_cast<char*>(plane.data()), static_cast<std::streamsize>(plane.size() * 4));
                for (int i = 0; i < render::kRes * render::kRes; ++i)
                    r.target.v[static_cast<std::size_t>(2 * i + c)] = plane[static_cast<std::size_t>(i)];
            }
            if (!is) throw std::runtime_error("dataset: truncated file " + path);
        }
        return ds;
    }
};

// Generates consecutive frame pairs with analytic flow targets. The arm is
// kept static (zero torque, random fixed pose per episode) so the flow
// supervision concentrates on the moving target; per-episode ball speed is
// uniform in [rel_min, rel_max] times the base speed. Pairs spanning a ball
// respawn are skipped: a teleport has no pixel correspondence.
inline FlowDataset generate_dataset(const env2d::EnvConfig& base, int count, double rel_min,
                                    double rel_max, std::uint64_t seed) {
    if (count < 2) throw std::invalid_argument("generate_dataset: count must be >= 2");
    if (!(rel_min > 0.0) || rel_max < rel_min) throw std::invalid_argument("generate_dataset: bad speed range");
    FlowDataset ds;
    ds.task = base.task;
    ds.rel_speed_min = rel_min;
    ds.rel_speed_max = rel_max;
    ds.records.reserve(static_cast<std::size_t>(count));

    util::Pcg32 rng(seed, 0xda7aface);
    std::uint64_t episode = 0;
    while (ds.records.size() < static_cast<std::size_t>(count)) {
        env2d::EnvConfig cfg = base;
        double rel = rng.uniform(rel_min, rel_max);
        cfg.speed = env2d::kBaseSpeed * rel;
        env2d::Env env(cfg);
        env.reset(seed * 1000003ULL + episode);
        ++episode;
        env2d::EnvState prev = env.state();
        render::Frame prev_frame = render::render(prev, cfg);
        for (int t = 0; t < cfg.episode_len && ds.records.size() < static_cast<std::size_t>(count); ++t) {
            auto sr = env.step({0.0, 0.0});  // static arm
            env2d::EnvState cur = env.state();
            render::Frame cur_frame = render::render(cur, cfg);
            if (!sr.ball_respawned) {
                FlowRecord rec;
                rec.prev = prev_frame;
                rec.cur = cur_frame;
                rec.target = render::ground_truth_flow(prev, cur, cfg);
                rec.rel_speed = rel;
                ds.records.push_back(std::move(rec));
            }
            prev = cur;
            prev_frame = cur_frame;
        }
    }
    return ds;
}

}  // namespace flowbench::flownet
