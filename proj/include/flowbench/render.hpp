#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>

#include "flowbench/env2d.hpp"

namespace flowbench::render {

inline constexpr int kRes = 84;
inline constexpr double kPxPerUnit = kRes / 2.0;  // arena [-1,1]^2 fills the frame

// 84x84 RGB frame, 8-bit per channel, row-major with the origin at the top left.
struct Frame {
    std::array<std::uint8_t, kRes * kRes * 3> rgb{};

    std::uint8_t& at(int y, int x, int c) { return rgb[static_cast<std::size_t>((y * kRes + x) * 3 + c)]; }
    std::uint8_t at(int y, int x, int c) const { return rgb[static_cast<std::size_t>((y * kRes + x) * 3 + c)]; }
    bool operator==(const Frame& o) const { return rgb == o.rgb; }
};

// Scene element covering a pixel (majority coverage, painter's order).
enum ElementId : std::uint8_t { kBackground = 0, kLink1 = 1, kLink2 = 2, kBall = 3 };

struct IdBuffer {
    std::array<std::uint8_t, kRes * kRes> id{};
    std::uint8_t& at(int y, int x) { return id[static_cast<std::size_t>(y * kRes + x)]; }
    std::uint8_t at(int y, int x) const { return id[static_cast<std::size_t>(y * kRes + x)]; }
};

struct RenderOutput {
    Frame frame;
    IdBuffer ids;
};

// World <-> pixel mapping. Pixel centers sit at half-integer pixel coords;
// the y axis flips (world +y is up, rows grow down).
inline double px_of_world_x(double wx) { return (wx + 1.0) * kPxPerUnit; }
inline double py_of_world_y(double wy) { return (1.0 - wy) * kPxPerUnit; }
inline double world_x_of_px(double px) { return px / kPxPerUnit - 1.0; }
inline double world_y_of_py(double py) { return 1.0 - py / kPxPerUnit; }

namespace detail {

struct Rgb {
    double r, g, b;
};

inline constexpr Rgb kSolidBg{0.16, 0.17, 0.20};
inline constexpr Rgb kArmColor{0.32, 0.48, 0.82};  // both links: uniform arm
inline constexpr Rgb kBallColor{0.92, 0.29, 0.18};
inline constexpr double kArmHalfWidth = 0.05;  // world units (~2 px half-width)

inline std::uint32_t pixel_hash(std::uint32_t x, std::uint32_t y) {
    std::uint32_t h = x * 0x9e3779b1u ^ y * 0x85ebca6bu;
    h ^= h >> 13;
    h *= 0xc2b2ae35u;
    h ^= h >> 16;
    return h;
}

// Four fixed procedural textures for the multi-texture task:
// 0 checker, 1 diagonal stripes, 2 value noise, 3 vertical gradient.
// All are pure functions of (pixel, id), so the background never moves.
inline Rgb texture(int id, int x, int y) {
    switch (id) {
        case 0: {
            bool on = ((x / 7) + (y / 7)) % 2 == 0;
            return on ? Rgb{0.32, 0.30, 0.28} : Rgb{0.12, 0.12, 0.14};
        }
        case 1: {
            bool on = ((x + y) / 6) % 2 == 0;
            return on ? Rgb{0.10, 0.24, 0.18} : Rgb{0.26, 0.40, 0.34};
        }
        case 2: {
            double v = 0.10 + 0.25 * (pixel_hash(static_cast<std::uint32_t>(x) / 3,
                                                 static_cast<std::uint32_t>(y) / 3) %
                                      256) /
                                  255.0;
            return Rgb{v, v * 0.9, v * 1.1};
        }
        default: {
            double t = static_cast<double>(y) / (kRes - 1);
            return Rgb{0.08 + 0.30 * t, 0.10 + 0.18 * t, 0.24 - 0.10 * t};
        }
    }
}

inline Rgb background_color(const env2d::EnvConfig& cfg, int active_bg, int x, int y) {
    return cfg.multi_texture ? texture(active_bg, x, y) : kSolidBg;
}

inline double sd_disc(double px, double py, double cx, double cy, double r) {
    return std::hypot(px - cx, py - cy) - r;
}

inline double sd_capsule(double px, double py, double ax, double ay, double bx, double by, double hw) {
    double abx = bx - ax, aby = by - ay;
    double apx = px - ax, apy = py - ay;
    double denom = abx * abx + aby * aby;
    double t = denom > 0.0 ? std::clamp((apx * abx + apy * aby) / denom, 0.0, 1.0) : 0.0;
    double dx = apx - t * abx, dy = apy - t * aby;
    return std::hypot(dx, dy) - hw;
}

// Signed distance in pixel units -> coverage fraction of the pixel square,
// the standard 1px linear-ramp approximation of analytic coverage.
inline double coverage(double sd_px) { return std::clamp(0.5 - sd_px, 0.0, 1.0); }

}  // namespace detail

// Rasterizes the scene (background, arm links as anti-aliased capsules, ball
// as an anti-aliased disc) and records which element majority-covers each
// pixel. Pure function of (state, config): identical inputs give bit-identical
// frames.
inline RenderOutput render_with_ids(const env2d::EnvState& s, const env2d::EnvConfig& cfg) {
    using namespace detail;
    RenderOutput out;

    struct Prim {
        ElementId id;
        Rgb color;
        // capsule (a==b degenerates to a disc)
        double ax, ay, bx, by, radius;
    };
    env2d::Vec2 j1{cfg.l1 * std::cos(s.th1), cfg.l1 * std::sin(s.th1)};
    env2d::Vec2 ee = env2d::forward_kinematics(s.th1, s.th2, cfg);
    const Prim prims[3] = {
        {kLink1, kArmColor, 0.0, 0.0, j1.x, j1.y, kArmHalfWidth},
        {kLink2, kArmColor, j1.x, j1.y, ee.x, ee.y, kArmHalfWidth},
        {kBall, kBallColor, s.ball_p.x, s.ball_p.y, s.ball_p.x, s.ball_p.y, cfg.ball_radius},
    };

    // background pass
    std::array<Rgb, kRes * kRes> buf;
    for (int y = 0; y < kRes; ++y)
        for (int x = 0; x < kRes; ++x) buf[static_cast<std::size_t>(y * kRes + x)] = background_color(cfg, s.background, x, y);

    // painter's order over primitive bounding boxes
    for (const Prim& p : prims) {
        double margin = p.radius + 1.5 / kPxPerUnit;
        double wx0 = std::min(p.ax, p.bx) - margin, wx1 = std::max(p.ax, p.bx) + margin;
        double wy0 = std::min(p.ay, p.by) - margin, wy1 = std::max(p.ay, p.by) + margin;
        int x0 = std::max(0, static_cast<int>(std::floor(px_of_world_x(wx0))));
        int x1 = std::min(kRes - 1, static_cast<int>(std::ceil(px_of_world_x(wx1))));
        int y0 = std::max(0, static_cast<int>(std::floor(py_of_world_y(wy1))));
        int y1 = std::min(kRes - 1, static_cast<int>(std::ceil(py_of_world_y(wy0))));
        for (int y = y0; y <= y1; ++y) {
            double wy = world_y_of_py(y + 0.5);
            for (int x = x0; x <= x1; ++x) {
                double wx = world_x_of_px(x + 0.5);
                double sd = sd_capsule(wx, wy, p.ax, p.ay, p.bx, p.by, p.radius) * kPxPerUnit;
                double cov = coverage(sd);
                if (cov <= 0.0) continue;
                Rgb& dst = buf[static_cast<std::size_t>(y * kRes + x)];
                dst.r += cov * (p.color.r - dst.r);
                dst.g += cov * (p.color.g - dst.g);
                dst.b += cov * (p.color.b - dst.b);
                if (cov >= 0.5) out.ids.at(y, x) = p.id;
            }
        }
    }

    for (int i = 0; i < kRes * kRes; ++i) {
        const Rgb& c = buf[static_cast<std::size_t>(i)];
        out.frame.rgb[static_cast<std::size_t>(3 * i)] =
            static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(c.r, 0.0, 1.0)));
        out.frame.rgb[static_cast<std::size_t>(3 * i + 1)] =
            static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(c.g, 0.0, 1.0)));
        out.frame.rgb[static_cast<std::size_t>(3 * i + 2)] =
            static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(c.b, 0.0, 1.0)));
    }
    return out;
}

inline Frame render(const env2d::EnvState& s, const env2d::EnvConfig& cfg) {
    return render_with_ids(s, cfg).frame;
}

}  // namespace flowbench::render
