#pragma once

#include <array>
#include <atomic>
#include <filesystem>
#include <functional>
#include <fstream>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "flowbench/rl/train.hpp"
#include "flowbench/util/csv.hpp"
#include "flowbench/util/svg.hpp"

namespace flowbench::harness {

// ---- scripted reference controller ----

// Elbow-down inverse kinematics for the 2-link arm; unreachable targets are
// clamped onto the reachable annulus.
inline std::array<double, 2> ik_2link(env2d::Vec2 target, double l1, double l2) {
    double d = target.norm();
    double dmin = std::abs(l1 - l2) + 1e-9, dmax = l1 + l2 - 1e-9;
    double dc = std::clamp(d, dmin, dmax);
    double cos_q2 = (dc * dc - l1 * l1 - l2 * l2) / (2.0 * l1 * l2);
    double q2 = std::acos(std::clamp(cos_q2, -1.0, 1.0));
    double base = std::atan2(target.y, target.x);
    double q1 = base - std::atan2(l2 * std::sin(q2), l1 + l2 * std::cos(q2));
    return {env2d::wrap_angle(q1), env2d::wrap_angle(q2)};
}

// Proportional controller on the joint-space error toward the inverse
// kinematics of the ball position (Chaser) or a linear extrapolation of it
// (Catcher), with joint-velocity damping for stability. Gains grid-tuned per
// task. A performance reference only, never supervision.
class ScriptedOracle {
public:
    explicit ScriptedOracle(const env2d::EnvConfig& cfg) : cfg_(cfg) {
        kp_ = 0.2;
        kd_ = cfg.task == env2d::Task::catcher ? 0.4 : 0.2;
    }

    std::array<double, 2> act(const env2d::EnvState& s) const {
        env2d::Vec2 target = s.ball_p;
        if (cfg_.task == env2d::Task::catcher) {
            // lead the falling ball by an arm-speed-scaled horizon
            env2d::Vec2 ee = env2d::forward_kinematics(s.th1, s.th2, cfg_);
            double dist = (ee - s.ball_p).norm();
            double lead = std::min(dist / kTipSpeed, 40.0);
            target = s.ball_p + s.ball_v * lead;
            double lim = cfg_.arena_half - cfg_.ball_radius;
            target.x = std::clamp(target.x, -lim, lim);
            target.y = std::clamp(target.y, -lim, lim);
        }
        auto q = ik_2link(target, cfg_.l1, cfg_.l2);
        double e1 = env2d::wrap_angle(q[0] - s.th1);
        double e2 = env2d::wrap_angle(q[1] - s.th2);
        return {kp_ * e1 - kd_ * s.w1, kp_ * e2 - kd_ * s.w2};
    }

    static constexpr double kTipSpeed = 0.035;  // world units/step the arm tip can sustain

private:
    env2d::EnvConfig cfg_;
    double kp_ = 0.2, kd_ = 0.2;
};

struct PolicyScore {
    double mean_score = 0.0;
    double mean_return = 0.0;
};

// Mean episode score of the scripted controller over `episodes` fresh seeds.
inline PolicyScore evaluate_oracle(const env2d::EnvConfig& cfg, int episodes, std::uint64_t seed) {
    ScriptedOracle oracle(cfg);
    PolicyScore out;
    for (int e = 0; e < episodes; ++e) {
        env2d::Env env(cfg);
        env.reset(seed + static_cast<std::uint64_t>(e) * 7901ULL);
        for (;;) {
            auto r = env.step(oracle.act(env.state()));
            out.mean_score += r.score_r;
            out.mean_return += r.reward;
            if (r.done) break;
        }
    }
    out.mean_score /= episodes;
    out.mean_return /= episodes;
    return out;
}

// Uniform-random policy baseline over the torque box.
inline PolicyScore evaluate_random(const env2d::EnvConfig& cfg, int episodes, std::uint64_t seed) {
    PolicyScore out;
    util::Pcg32 rng(seed, 0xa2d0);
    for (int e = 0; e < episodes; ++e) {
        env2d::Env env(cfg);
        env.reset(seed + static_cast<std::uint64_t>(e) * 7901ULL);
        for (;;) {
            auto r = env.step({rng.uniform(-cfg.torque_limit, cfg.torque_limit),
                               rng.uniform(-cfg.torque_limit, cfg.torque_limit)});
            out.mean_score += r.score_r;
            out.mean_return += r.reward;
            if (r.done) break;
        }
    }
    out.mean_score /= episodes;
    out.mean_return /= episodes;
    return out;
}

// ---- experiment matrix ----

struct ExperimentSpec {
    env2d::EnvConfig env;
    std::vector<render::ObsVariant> variants;
    rl::Perception perception = rl::Perception::table_s1;
    std::vector<std::uint64_t> seeds{0, 1, 2};
    long step_budget = 1999872;
    std::string out_dir = "runs";
    std::string tiny_checkpoint;  // needed by net-flow variants
    int workers = 1;  // independent runs executed by this many parallel threads
    bool deterministic = true;

    void validate() const {
        if (seeds.empty()) throw std::invalid_argument("experiment: need at least one seed");
        if (variants.empty()) throw std::invalid_argument("experiment: need at least one variant");
    }
};

struct RunSummary {
    std::string variant;
    std::uint64_t seed = 0;
    double final_window_score = 0.0;  // mean r_sc per episode over the last 10% of training
    double final_window_return = 0.0;
    std::string run_dir;
    double wall_s = 0.0;
};

inline std::string run_dir_for(const ExperimentSpec& spec, render::ObsVariant v, std::uint64_t seed) {
    return spec.out_dir + "/" + render::obs_variant_name(v) + "_seed" + std::to_string(seed);
}

inline rl::RlRunConfig run_config_for(const ExperimentSpec& spec, render::ObsVariant v,
                                      std::uint64_t seed) {
    rl::RlRunConfig run;
    run.env = spec.env;
    run.env.seed = seed;
    run.obs = v;
    run.perception = v == render::ObsVariant::vector ? rl::Perception::none : spec.perception;
    if (v == render::ObsVariant::flow && spec.perception == rl::Perception::table_s1 &&
        !spec.tiny_checkpoint.empty())
        run.perception = rl::Perception::tinyflownet_front;
    run.ppo.total_steps = spec.step_budget;
    run.ppo.seed = seed;
    run.tiny_checkpoint = spec.tiny_checkpoint;
    run.out_dir = run_dir_for(spec, v, seed);
    run.deterministic = spec.deterministic;
    return run;
}

// Runs the variant x seed matrix (each run single-threaded and isolated;
// `workers` of them execute concurrently), then summarizes.
inline std::vector<RunSummary> run_matrix(const ExperimentSpec& spec,
                                          const std::function<void(const std::string&)>& log = {}) {
    spec.validate();
    struct Cell {
        render::ObsVariant v;
        std::uint64_t seed;
    };
    // seed-major order so partial execution yields complete seed rows
    std::vector<Cell> cells;
    for (auto s : spec.seeds)
        for (auto v : spec.variants) cells.push_back({v, s});
    std::vector<RunSummary> summaries(cells.size());
    std::mutex log_mu;
    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        for (;;) {
            std::size_t i = next.fetch_add(1);
            if (i >= cells.size()) return;
            const Cell& c = cells[i];
            auto t0 = std::chrono::steady_clock::now();
            rl::RlRunConfig run = run_config_for(spec, c.v, c.seed);
            if (log) {
                std::lock_guard lk(log_mu);
                log("start " + run.out_dir);
            }
            rl::RlRunResult res = rl::train_rl(run);
            RunSummary& s = summaries[i];
            s.variant = render::obs_variant_name(c.v);
            s.seed = c.seed;
            s.final_window_score = res.final_window_score;
            s.final_window_return = res.final_window_return;
            s.run_dir = run.out_dir;
            s.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            if (log) {
                std::lock_guard lk(log_mu);
                log("done " + run.out_dir + " final_score " + std::to_string(s.final_window_score));
            }
        }
    };
    int w = std::max(1, spec.workers);
    std::vector<std::thread> threads;
    for (int t = 1; t < w; ++t) threads.emplace_back(worker);
    worker();
    for (auto& t : threads) t.join();
    return summaries;
}

inline void write_summary_csv(const std::vector<RunSummary>& sums, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("summary: cannot write " + path);
    f << "variant,seed,final_score,final_return,wall_s\n";
    for (const auto& s : sums) {
        char row[256];
        std::snprintf(row, sizeof(row), "%s,%llu,%.8g,%.8g,%.3f", s.variant.c_str(),
                      static_cast<unsigned long long>(s.seed), s.final_window_score,
                      s.final_window_return, s.wall_s);
        f << row << "\n";
    }
}

// Seed-mean of the final-window score per variant.
inline double seed_mean_score(const std::vector<RunSummary>& sums, const std::string& variant) {
    double acc = 0.0;
    int n = 0;
    for (const auto& s : sums)
        if (s.variant == variant) {
            acc += s.final_window_score;
            ++n;
        }
    if (n == 0) throw std::runtime_error("summary: no runs for variant " + variant);
    return acc / n;
}

// ---- plotting from run CSVs ----

// Mean training-score curve with a standard-deviation band across seeds;
// pure function of the CSVs, re-running it changes nothing.
inline void plot_score_curves(const std::vector<std::vector<std::string>>& variant_csvs,
                              const std::vector<std::string>& labels, const std::string& out_svg,
                              int smooth_window = 25) {
    util::SvgChart chart("training score", "environment steps", "mean episode score", smooth_window);
    for (std::size_t v = 0; v < variant_csvs.size(); ++v) {
        std::vector<util::Csv> runs;
        for (const auto& path : variant_csvs[v]) runs.push_back(util::Csv::read_file(path));
        if (runs.empty()) continue;
        std::vector<double> steps = runs[0].column("step");
        for (const auto& r : runs)
            if (r.rows.size() != runs[0].rows.size())
                throw std::runtime_error("plot: seed CSVs disagree on the step axis");
        util::SvgChart::Series s;
        s.label = labels[v];
        s.x = steps;
        for (std::size_t i = 0; i < steps.size(); ++i) {
            double m = 0.0;
            for (const auto& r : runs) m += r.num(i, "score_mean");
            m /= static_cast<double>(runs.size());
            double var = 0.0;
            for (const auto& r : runs) {
                double d = r.num(i, "score_mean") - m;
                var += d * d;
            }
            s.mean.push_back(m);
            s.sd.push_back(std::sqrt(var / static_cast<double>(runs.size())));
        }
        chart.add_series(std::move(s));
    }
    chart.write_file(out_svg);
}

// ---- speed sweep (relative scores vs the flow agent) ----

struct SweepSpec {
    env2d::EnvConfig env;  // task is usually the catcher
    std::vector<double> rel_speeds{1.0, 0.5, 0.25};
    std::vector<render::ObsVariant> baselines{render::ObsVariant::stack2};
    render::ObsVariant reference = render::ObsVariant::gt_flow;
    std::vector<std::uint64_t> seeds{0, 1};
    long step_budget = 1999872;
    std::string out_dir = "sweep";
    std::string tiny_checkpoint;
    int workers = 1;
};

struct SweepCell {
    double rel_speed = 1.0;
    std::string variant;
    double score = 0.0;     // seed mean
    double relative = 0.0;  // score / reference score at the same speed
};

// Trains every baseline and the flow reference at each speed and reports
// baseline/reference score ratios.
inline std::vector<SweepCell> sweep_speed(const SweepSpec& spec,
                                          const std::function<void(const std::string&)>& log = {}) {
    std::vector<SweepCell> table;
    for (double u : spec.rel_speeds) {
        ExperimentSpec exp;
        exp.env = spec.env;
        exp.env.speed = env2d::kBaseSpeed * u;
        exp.variants = spec.baselines;
        exp.variants.push_back(spec.reference);
        exp.seeds = spec.seeds;
        exp.step_budget = spec.step_budget;
        char sub[64];
        std::snprintf(sub, sizeof(sub), "%s/speed_%g", spec.out_dir.c_str(), u);
        exp.out_dir = sub;
        exp.tiny_checkpoint = spec.tiny_checkpoint;
        exp.workers = spec.workers;
        auto sums = run_matrix(exp, log);
        double ref = seed_mean_score(sums, render::obs_variant_name(spec.reference));
        for (auto v : exp.variants) {
            SweepCell cell;
            cell.rel_speed = u;
            cell.variant = render::obs_variant_name(v);
            cell.score = seed_mean_score(sums, cell.variant);
            cell.relative = ref != 0.0 ? cell.score / ref : 0.0;
            table.push_back(cell);
        }
    }
    return table;
}

inline void write_sweep_csv(const std::vector<SweepCell>& table, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("sweep: cannot write " + path);
    f << "rel_speed,variant,score,relative_to_flow\n";
    for (const auto& c : table) {
        char row[200];
        std::snprintf(row, sizeof(row), "%g,%s,%.8g,%.8g", c.rel_speed, c.variant.c_str(), c.score,
                      c.relative);
        f << row << "\n";
    }
}

}  // namespace flowbench::harness
