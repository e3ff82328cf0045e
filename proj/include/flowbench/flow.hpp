#pragma once

#include <array>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "flowbench/nn/tensor.hpp"
#include "flowbench/render.hpp"

namespace flowbench::render {

// 84x84x2 backward optical flow: channel 0 horizontal, channel 1 vertical
// displacement in pixels per step (image coords, +y down), stored at
// current-frame pixel locations so moving objects are co-located with their
// flow. Background pixels are exactly zero.
struct FlowField {
    std::array<float, kRes * kRes * 2> v{};

    float& at(int y, int x, int c) { return v[static_cast<std::size_t>((y * kRes + x) * 2 + c)]; }
    float at(int y, int x, int c) const { return v[static_cast<std::size_t>((y * kRes + x) * 2 + c)]; }

    float max_abs() const {
        float m = 0.0f;
        for (float f : v) m = std::max(m, std::abs(f));
        return m;
    }
};

// Per-pixel flow from the simulator state pair: ball pixels carry the ball
// center displacement, arm pixels the rigid displacement of the surface point
// under that link's pose change, background stays zero. Flow is backward
// (previous -> current, stored at the current pixel).
// `suppress_ball` zeroes the ball contribution: used for the observation at a
// respawn step, where the "displacement" is a teleport with no pixel
// correspondence (a freshly appeared object has no backward flow).
inline FlowField ground_truth_flow(const env2d::EnvState& prev, const env2d::EnvState& cur,
                                   const env2d::EnvConfig& cfg, bool suppress_ball = false) {
    FlowField flow;
    RenderOutput ro = render_with_ids(cur, cfg);

    const double ball_dx = suppress_ball ? 0.0 : kPxPerUnit * (cur.ball_p.x - prev.ball_p.x);
    const double ball_dy = suppress_ball ? 0.0 : -kPxPerUnit * (cur.ball_p.y - prev.ball_p.y);

    struct LinkPose {
        double bx, by, phi;
    };
    auto link_pose = [&](const env2d::EnvState& s, int link) -> LinkPose {
        if (link == 1) return {0.0, 0.0, s.th1};
        return {cfg.l1 * std::cos(s.th1), cfg.l1 * std::sin(s.th1), s.th1 + s.th2};
    };

    for (int link = 1; link <= 2; ++link) {
        LinkPose pc = link_pose(cur, link);
        LinkPose pp = link_pose(prev, link);
        // identical pose => exactly zero flow (no rotate round-trip residue)
        if (pc.phi == pp.phi && pc.bx == pp.bx && pc.by == pp.by) continue;
        double cc = std::cos(pc.phi), sc = std::sin(pc.phi);
        double cp = std::cos(pp.phi), sp = std::sin(pp.phi);
        for (int y = 0; y < kRes; ++y)
            for (int x = 0; x < kRes; ++x) {
                if (ro.ids.at(y, x) != link) continue;
                double wx = world_x_of_px(x + 0.5), wy = world_y_of_py(y + 0.5);
                // into link-local coords under the current pose, out under the previous
                double rx = wx - pc.bx, ry = wy - pc.by;
                double lx = cc * rx + sc * ry, ly = -sc * rx + cc * ry;
                double px_prev = pp.bx + cp * lx - sp * ly;
                double py_prev = pp.by + sp * lx + cp * ly;
                flow.at(y, x, 0) = static_cast<float>(kPxPerUnit * (wx - px_prev));
                flow.at(y, x, 1) = static_cast<float>(-kPxPerUnit * (wy - py_prev));
            }
    }
    for (int y = 0; y < kRes; ++y)
        for (int x = 0; x < kRes; ++x)
            if (ro.ids.at(y, x) == kBall) {
                flow.at(y, x, 0) = static_cast<float>(ball_dx);
                flow.at(y, x, 1) = static_cast<float>(ball_dy);
            }
    return flow;
}

// Backward warp: out(q) = prev(q - flow(q)), bilinear with clamp-to-edge,
// intensities in [0,1]. Used by the warp-consistency oracle.
inline std::vector<float> warp_backward(const Frame& prev, const FlowField& flow) {
    std::vector<float> out(static_cast<std::size_t>(kRes) * kRes * 3);
    auto sample = [&](double py, double px, int c) {
        px = std::clamp(px, 0.0, static_cast<double>(kRes - 1));
        py = std::clamp(py, 0.0, static_cast<double>(kRes - 1));
        int x0 = static_cast<int>(px), y0 = static_cast<int>(py);
        int x1 = std::min(x0 + 1, kRes - 1), y1 = std::min(y0 + 1, kRes - 1);
        double fx = px - x0, fy = py - y0;
        double v00 = prev.at(y0, x0, c), v01 = prev.at(y0, x1, c);
        double v10 = prev.at(y1, x0, c), v11 = prev.at(y1, x1, c);
        return ((v00 * (1 - fx) + v01 * fx) * (1 - fy) + (v10 * (1 - fx) + v11 * fx) * fy) / 255.0;
    };
    for (int y = 0; y < kRes; ++y)
        for (int x = 0; x < kRes; ++x)
            for (int c = 0; c < 3; ++c)
                out[static_cast<std::size_t>((y * kRes + x) * 3 + c)] = static_cast<float>(
                    sample(y - flow.at(y, x, 1), x - flow.at(y, x, 0), c));
    return out;
}

// Pixels whose flow is nonzero (the moving-object region of a GT field).
inline std::array<std::uint8_t, kRes * kRes> nonzero_flow_mask(const FlowField& flow) {
    std::array<std::uint8_t, kRes * kRes> mask{};
    for (int i = 0; i < kRes * kRes; ++i)
        mask[static_cast<std::size_t>(i)] =
            (flow.v[static_cast<std::size_t>(2 * i)] != 0.0f || flow.v[static_cast<std::size_t>(2 * i + 1)] != 0.0f) ? 1 : 0;
    return mask;
}

// 8-neighborhood erosion by one pixel (interior of a mask).
inline std::array<std::uint8_t, kRes * kRes> erode1(const std::array<std::uint8_t, kRes * kRes>& m) {
    std::array<std::uint8_t, kRes * kRes> out{};
    for (int y = 1; y < kRes - 1; ++y)
        for (int x = 1; x < kRes - 1; ++x) {
            bool all = true;
            for (int dy = -1; dy <= 1 && all; ++dy)
                for (int dx = -1; dx <= 1; ++dx)
                    if (!m[static_cast<std::size_t>((y + dy) * kRes + x + dx)]) {
                        all = false;
                        break;
                    }
            out[static_cast<std::size_t>(y * kRes + x)] = all ? 1 : 0;
        }
    return out;
}

// Absolute intensity error (in [0,1] units) between the current frame and the
// previous frame warped by the flow, summed over mask pixels. Callers pool
// sums across many state pairs; occlusion events at object crossings make a
// handful of pixels unreconstructable, so per-pair means are noisy.
struct WarpErr {
    double sum = 0.0;
    long n = 0;
    double mae() const { return n == 0 ? -1.0 : sum / static_cast<double>(n); }
};

inline WarpErr masked_warp_err(const Frame& prev, const Frame& cur, const FlowField& flow,
                               const std::array<std::uint8_t, kRes * kRes>& mask) {
    std::vector<float> warped = warp_backward(prev, flow);
    WarpErr e;
    for (int i = 0; i < kRes * kRes; ++i) {
        if (!mask[static_cast<std::size_t>(i)]) continue;
        for (int c = 0; c < 3; ++c) {
            double w = warped[static_cast<std::size_t>(3 * i + c)];
            double t = cur.rgb[static_cast<std::size_t>(3 * i + c)] / 255.0;
            e.sum += std::abs(w - t);
            ++e.n;
        }
    }
    return e;
}

inline double masked_warp_mae(const Frame& prev, const Frame& cur, const FlowField& flow,
                              const std::array<std::uint8_t, kRes * kRes>& mask) {
    return masked_warp_err(prev, cur, flow, mask).mae();
}

// Binary motion segmentation: 1 where the per-pixel flow magnitude exceeds
// the threshold (pixels/step).
inline std::array<std::uint8_t, kRes * kRes> segmentation_from_flow(const FlowField& flow,
                                                                    double threshold) {
    if (threshold <= 0.0) throw std::invalid_argument("segmentation threshold must be positive");
    std::array<std::uint8_t, kRes * kRes> mask{};
    for (int i = 0; i < kRes * kRes; ++i) {
        double fx = flow.v[static_cast<std::size_t>(2 * i)];
        double fy = flow.v[static_cast<std::size_t>(2 * i + 1)];
        mask[static_cast<std::size_t>(i)] = (fx * fx + fy * fy > threshold * threshold) ? 1 : 0;
    }
    return mask;
}

// Signed mean of the 6 largest-magnitude values per channel: a low-dimensional
// velocity readout of the flow field. Ties break on lower pixel index.
inline std::array<double, 2> extract_velocity_vector(const FlowField& flow) {
    std::array<double, 2> out{0.0, 0.0};
    for (int c = 0; c < 2; ++c) {
        std::array<float, 6> top{};  // magnitudes, descending
        std::array<float, 6> val{};
        int filled = 0;
        for (int i = 0; i < kRes * kRes; ++i) {
            float f = flow.v[static_cast<std::size_t>(2 * i + c)];
            float mag = std::abs(f);
            int pos = filled < 6 ? filled : -1;
            if (filled == 6 && mag > top[5]) pos = 5;
            if (pos < 0) continue;
            top[static_cast<std::size_t>(pos)] = mag;
            val[static_cast<std::size_t>(pos)] = f;
            for (int j = pos; j > 0 && top[static_cast<std::size_t>(j)] > top[static_cast<std::size_t>(j - 1)]; --j) {
                std::swap(top[static_cast<std::size_t>(j)], top[static_cast<std::size_t>(j - 1)]);
                std::swap(val[static_cast<std::size_t>(j)], val[static_cast<std::size_t>(j - 1)]);
            }
            if (filled < 6) ++filled;
        }
        double s = 0.0;
        for (int j = 0; j < 6; ++j) s += val[static_cast<std::size_t>(j)];
        out[static_cast<std::size_t>(c)] = s / 6.0;
    }
    return out;
}

// Maps a signed 2-channel field to red (positive) and blue (negative) with a
// linear scale: value = +scale saturates red, -scale saturates blue.
inline Frame flow_to_rgb(const FlowField& flow, double scale) {
    Frame f;
    if (scale <= 0.0) scale = 1.0;
    for (int i = 0; i < kRes * kRes; ++i) {
        double fx = flow.v[static_cast<std::size_t>(2 * i)];
        double fy = flow.v[static_cast<std::size_t>(2 * i + 1)];
        double pos = std::max(fx, 0.0) + std::max(fy, 0.0);
        double neg = std::max(-fx, 0.0) + std::max(-fy, 0.0);
        f.rgb[static_cast<std::size_t>(3 * i)] =
            static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(pos / scale, 0.0, 1.0)));
        f.rgb[static_cast<std::size_t>(3 * i + 1)] = 0;
        f.rgb[static_cast<std::size_t>(3 * i + 2)] =
            static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(neg / scale, 0.0, 1.0)));
    }
    return f;
}

// ---- binary frame / flow dumps ----

inline void write_ppm(const Frame& f, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("ppm: cannot open for write: " + path);
    os << "P6\n" << kRes << " " << kRes << "\n255\n";
    os.write(reinterpret_cast<const char*>(f.rgb.data()), static_cast<std::streamsize>(f.rgb.size()));
    if (!os) throw std::runtime_error("ppm: write failed: " + path);
}

inline Frame read_ppm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("ppm: cannot open: " + path);
    std::string magic;
    int w = 0, h = 0, maxv = 0;
    is >> magic >> w >> h >> maxv;
    if (magic != "P6" || w != kRes || h != kRes || maxv != 255)
        throw std::runtime_error("ppm: unsupported header in " + path);
    is.get();  // single whitespace after the header
    Frame f;
    is.read(reinterpret_cast<char*>(f.rgb.data()), static_cast<std::streamsize>(f.rgb.size()));
    if (!is) throw std::runtime_error("ppm: truncated file " + path);
    return f;
}

// Raw flow dump: u32le height, u32le width, then the horizontal plane and the
// vertical plane as f32le.
inline void write_flow_dump(const FlowField& flow, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("flow dump: cannot open for write: " + path);
    std::uint32_t hw[2] = {kRes, kRes};
    os.write(reinterpret_cast<const char*>(hw), 8);
    std::vector<float> plane(kRes * kRes);
    for (int c = 0; c < 2; ++c) {
        for (int i = 0; i < kRes * kRes; ++i) plane[static_cast<std::size_t>(i)] = flow.v[static_cast<std::size_t>(2 * i + c)];
        os.write(reinterpret_cast<const char*>(plane.data()), static_cast<std::streamsize>(plane.size() * 4));
    }
    if (!os) throw std::runtime_error("flow dump: write failed: " + path);
}

inline FlowField read_flow_dump(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("flow dump: cannot open: " + path);
    std::uint32_t hw[2];
    is.read(reinterpret_cast<char*>(hw), 8);
    if (!is || hw[0] != kRes || hw[1] != kRes) throw std::runtime_error("flow dump: bad header in " + path);
    FlowField flow;
    std::vector<float> plane(kRes * kRes);
    for (int c = 0; c < 2; ++c) {
        is.read(reinterpret_cast<char*>(plane.data()), static_cast<std::streamsize>(plane.size() * 4));
        if (!is) throw std::runtime_error("flow dump: truncated file " + path);
        for (int i = 0; i < kRes * kRes; ++i) flow.v[static_cast<std::size_t>(2 * i + c)] = plane[static_cast<std::size_t>(i)];
    }
    return flow;
}

// ---- observation assembly ----

enum class ObsVariant {
    image,            // current frame only
    stack2,           // [prev, cur]
    image_diff,       // [cur, cur - prev]
    lstm_image,       // current frame; the policy adds a recurrent layer
    segmentation,     // [cur, motion mask]
    flow,             // [cur, predicted flow / flow_scale]
    gt_flow,          // [cur, analytic flow / flow_scale]
    velocity_vector,  // cur; a 2-vector from the flow joins the state vector
    vector,           // no pixels; full state vector incl. ball (sanity task)
};

inline const char* obs_variant_name(ObsVariant v) {
    switch (v) {
        case ObsVariant::image: return "image";
        case ObsVariant::stack2: return "stack2";
        case ObsVariant::image_diff: return "image_diff";
        case ObsVariant::lstm_image: return "lstm";
        case ObsVariant::segmentation: return "segmentation";
        case ObsVariant::flow: return "flow";
        case ObsVariant::gt_flow: return "gt_flow";
        case ObsVariant::velocity_vector: return "velocity_vector";
        case ObsVariant::vector: return "vector";
    }
    return "?";
}

inline ObsVariant obs_variant_from_name(const std::string& s) {
    if (s == "image") return ObsVariant::image;
    if (s == "stack2" || s == "stack") return ObsVariant::stack2;
    if (s == "image_diff" || s == "diff") return ObsVariant::image_diff;
    if (s == "lstm" || s == "lstm_image") return ObsVariant::lstm_image;
    if (s == "segmentation" || s == "seg") return ObsVariant::segmentation;
    if (s == "flow") return ObsVariant::flow;
    if (s == "gt_flow") return ObsVariant::gt_flow;
    if (s == "velocity_vector" || s == "velvec") return ObsVariant::velocity_vector;
    if (s == "vector") return ObsVariant::vector;
    throw std::invalid_argument("unknown observation variant: " + s);
}

struct ObservationSpec {
    ObsVariant variant = ObsVariant::image;
    double flow_scale = env2d::kBaseSpeed * kPxPerUnit;  // max ball px/step at the configured speed
    double seg_threshold = 0.5;                          // px/step
    bool net_flow = false;  // segmentation source: network prediction instead of analytic flow

    int channels() const {
        switch (variant) {
            case ObsVariant::image:
            case ObsVariant::lstm_image:
            case ObsVariant::velocity_vector: return 3;
            case ObsVariant::stack2:
            case ObsVariant::image_diff: return 6;
            case ObsVariant::segmentation: return 4;
            case ObsVariant::flow:
            case ObsVariant::gt_flow: return 5;
            case ObsVariant::vector: return 0;
        }
        return 0;
    }
    bool needs_prev() const { return variant == ObsVariant::stack2 || variant == ObsVariant::image_diff; }
    bool needs_flow() const {
        return variant == ObsVariant::segmentation || variant == ObsVariant::flow ||
               variant == ObsVariant::gt_flow || variant == ObsVariant::velocity_vector;
    }
    bool uses_pixels() const { return variant != ObsVariant::vector; }
    // extra entries appended to the state vector branch
    int extra_vec_dims() const { return variant == ObsVariant::velocity_vector ? 2 : 0; }

    static ObservationSpec for_env(ObsVariant v, const env2d::EnvConfig& cfg) {
        ObservationSpec s;
        s.variant = v;
        s.flow_scale = cfg.speed * kPxPerUnit;
        return s;
    }
};

// Builds the pixel observation [84,84,C] for one step. Image channels are
// scaled to [0,1], difference channels are signed in [-1,1], flow channels are
// divided by flow_scale. For velocity_vector the 2-vector goes through
// `vel_out` and joins the state vector instead of the pixel planes.
inline nn::TensorF make_observation(const Frame& cur, const Frame& prev, const FlowField& flow,
                                    const ObservationSpec& spec,
                                    std::array<double, 2>* vel_out = nullptr) {
    const int C = spec.channels();
    if (C == 0) throw std::invalid_argument("make_observation: vector variant has no pixel planes");
    nn::TensorF obs(nn::Shape{kRes, kRes, C});
    auto put_frame = [&](const Frame& f, int c0) {
        for (int y = 0; y < kRes; ++y)
            for (int x = 0; x < kRes; ++x)
                for (int c = 0; c < 3; ++c)
                    obs.data[static_cast<std::size_t>((y * kRes + x) * C + c0 + c)] =
                        static_cast<float>(f.at(y, x, c)) / 255.0f;
    };
    switch (spec.variant) {
        case ObsVariant::image:
        case ObsVariant::lstm_image:
            put_frame(cur, 0);
            break;
        case ObsVariant::velocity_vector:
            put_frame(cur, 0);
            if (vel_out) *vel_out = extract_velocity_vector(flow);
            break;
        case ObsVariant::stack2:
            put_frame(prev, 0);
            put_frame(cur, 3);
            break;
        case ObsVariant::image_diff: {
            put_frame(cur, 0);
            for (int y = 0; y < kRes; ++y)
                for (int x = 0; x < kRes; ++x)
                    for (int c = 0; c < 3; ++c)
                        obs.data[static_cast<std::size_t>((y * kRes + x) * C + 3 + c)] =
                            (static_cast<float>(cur.at(y, x, c)) - static_cast<float>(prev.at(y, x, c))) / 255.0f;
            break;
        }
        case ObsVariant::segmentation: {
            put_frame(cur, 0);
            auto mask = segmentation_from_flow(flow, spec.seg_threshold);
            for (int i = 0; i < kRes * kRes; ++i)
                obs.data[static_cast<std::size_t>(i * C + 3)] = static_cast<float>(mask[static_cast<std::size_t>(i)]);
            break;
        }
        case ObsVariant::flow:
        case ObsVariant::gt_flow: {
            put_frame(cur, 0);
            float inv = static_cast<float>(1.0 / spec.flow_scale);
            for (int i = 0; i < kRes * kRes; ++i) {
                obs.data[static_cast<std::size_t>(i * C + 3)] = flow.v[static_cast<std::size_t>(2 * i)] * inv;
                obs.data[static_cast<std::size_t>(i * C + 4)] = flow.v[static_cast<std::size_t>(2 * i + 1)] * inv;
            }
            break;
        }
        case ObsVariant::vector:
            break;
    }
    return obs;
}

}  // namespace flowbench::render
