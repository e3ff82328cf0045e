#pragma once

#include <array>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "flowbench/nn/checkpoint.hpp"
#include "flowbench/rl/ppo.hpp"
#include "flowbench/util/ini.hpp"

namespace flowbench::rl {

inline std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

struct RlRunConfig {
    env2d::EnvConfig env;
    // fills PPO fields from a [ppo] section when present
    void apply_ppo_ini(const util::Ini& ini) {
        if (!ini.has_section("ppo")) return;
        ppo.gamma = ini.get_double("ppo", "gamma", ppo.gamma);
        ppo.lam = ini.get_double("ppo", "lambda", ppo.lam);
        ppo.clip_eps = ini.get_double("ppo", "clip_eps", ppo.clip_eps);
        ppo.epochs = static_cast<int>(ini.get_int("ppo", "epochs", ppo.epochs));
        ppo.lr = ini.get_double("ppo", "lr", ppo.lr);
        ppo.horizon = static_cast<int>(ini.get_int("ppo", "horizon", ppo.horizon));
        ppo.actors = static_cast<int>(ini.get_int("ppo", "actors", ppo.actors));
        ppo.minibatches = static_cast<int>(ini.get_int("ppo", "minibatches", ppo.minibatches));
        ppo.value_coef = ini.get_double("ppo", "value_coef", ppo.value_coef);
        ppo.entropy_coef = ini.get_double("ppo", "entropy_coef", ppo.entropy_coef);
        ppo.total_steps = ini.get_int("ppo", "total_steps", ppo.total_steps);
        ppo.seed = static_cast<std::uint64_t>(ini.get_int("ppo", "seed", static_cast<long>(ppo.seed)));
    }

    render::ObsVariant obs = render::ObsVariant::image;
    Perception perception = Perception::table_s1;
    PpoConfig ppo;
    std::string out_dir;          // empty: keep results in memory only
    std::string tiny_checkpoint;  // pre-trained flow weights (flow obs / frozen frontend)
    bool train_flownet = false;   // from-scratch mode for the flow frontend
    long eval_every_iters = 50;
    int eval_episodes = 5;
    bool deterministic = false;  // zero the wall-clock column for byte-identical logs

    PolicyConfig policy_config() const {
        PolicyConfig pc;
        pc.obs = obs;
        pc.perception = obs == render::ObsVariant::vector ? Perception::none : perception;
        pc.lstm = obs == render::ObsVariant::lstm_image;
        pc.vec_dims = obs == render::ObsVariant::vector ? 13
                      : obs == render::ObsVariant::velocity_vector ? 8
                                                                   : 6;
        pc.train_flownet = train_flownet;
        pc.flow_scale = env.speed * render::kPxPerUnit;
        return pc;
    }

    // Every knob materialized; identical configs hash identically.
    util::Ini resolved_ini() const {
        util::Ini ini;
        env.to_ini(ini);
        ini.set("run", "obs", render::obs_variant_name(obs));
        ini.set("run", "perception", perception_name(perception));
        ini.set("run", "train_flownet", train_flownet ? "1" : "0");
        ini.set("run", "tiny_checkpoint", tiny_checkpoint);
        ini.set("run", "eval_every_iters", std::to_string(eval_every_iters));
        ini.set("run", "eval_episodes", std::to_string(eval_episodes));
        ini.set("run", "deterministic", deterministic ? "1" : "0");
        ini.set("ppo", "gamma", env2d::EnvConfig::format_double(ppo.gamma));
        ini.set("ppo", "lambda", env2d::EnvConfig::format_double(ppo.lam));
        ini.set("ppo", "clip_eps", env2d::EnvConfig::format_double(ppo.clip_eps));
        ini.set("ppo", "epochs", std::to_string(ppo.epochs));
        ini.set("ppo", "lr", env2d::EnvConfig::format_double(ppo.lr));
        ini.set("ppo", "horizon", std::to_string(ppo.horizon));
        ini.set("ppo", "actors", std::to_string(ppo.actors));
        ini.set("ppo", "minibatches", std::to_string(ppo.minibatches));
        ini.set("ppo", "value_coef", env2d::EnvConfig::format_double(ppo.value_coef));
        ini.set("ppo", "entropy_coef", env2d::EnvConfig::format_double(ppo.entropy_coef));
        ini.set("ppo", "total_steps", std::to_string(ppo.total_steps));
        ini.set("ppo", "seed", std::to_string(ppo.seed));
        return ini;
    }

    std::uint64_t fingerprint() const { return fnv1a(resolved_ini().to_string()); }
};

struct RlRunResult {
    std::vector<std::pair<long, double>> score_curve;   // (env step, mean episode score)
    std::vector<std::pair<long, double>> return_curve;  // (env step, mean episode return)
    double final_window_score = 0.0;   // mean over the last 10% of training steps
    double final_window_return = 0.0;
    std::vector<std::string> csv_rows;  // the pinned training log
};

namespace detail {

inline double mean_of(const std::vector<EpisodeStat>& eps, double EpisodeStat::* field) {
    if (eps.empty()) return 0.0;
    double s = 0.0;
    for (const auto& e : eps) s += e.*field;
    return s / static_cast<double>(eps.size());
}

}  // namespace detail

// Alternating rollout/update loop to the step budget. Emits the training log
// (one row per iteration), periodic deterministic evaluations, the resolved
// configuration, and a final checkpoint.
inline RlRunResult train_rl(const RlRunConfig& run) {
    run.ppo.validate();
    run.env.validate();
    PolicyConfig pc = run.policy_config();
    PolicyParams<float> params(pc, run.ppo.seed);
    if (!run.tiny_checkpoint.empty()) params.tiny.from_checkpoint(nn::load_checkpoint(run.tiny_checkpoint));

    render::ObservationSpec obs_spec = render::ObservationSpec::for_env(run.obs, run.env);

    bool write_files = !run.out_dir.empty();
    std::ofstream train_csv, eval_csv;
    if (write_files) {
        std::filesystem::create_directories(run.out_dir);
        run.resolved_ini().write_file(run.out_dir + "/config.ini");
        train_csv.open(run.out_dir + "/train_log.csv");
        eval_csv.open(run.out_dir + "/eval.csv");
        eval_csv << "step,score_mean,return_mean\n";
    }

    RolloutCollector collector(run.env, obs_spec, params, run.ppo.actors, run.ppo.seed);
    PpoTrainer trainer(params, run.ppo);
    RolloutBuffer buf;

    const long steps_per_iter = static_cast<long>(run.ppo.actors) * run.ppo.horizon;
    const long iters = run.ppo.total_steps / steps_per_iter;
    RlRunResult res;
    const std::string header = "step,return_mean,score_mean,shaping_mean,policy_loss,value_loss,entropy,clip_frac,kl,wall_s";
    res.csv_rows.push_back(header);
    if (write_files) train_csv << header << "\n";

    double last_ret = 0.0, last_score = 0.0, last_shape = 0.0;
    auto t0 = std::chrono::steady_clock::now();
    long tail_from = iters - std::max(1L, iters / 10);  // last 10% of training
    double tail_score = 0.0, tail_ret = 0.0;
    long tail_n = 0;

    for (long it = 0; it < iters; ++it) {
        std::vector<EpisodeStat> completed;
        collector.collect(run.ppo.horizon, buf, completed);
        compute_gae(buf, collector.bootstrap_values(), run.ppo.gamma, run.ppo.lam);
        UpdateStats st = trainer.update(buf);

        if (!completed.empty()) {
            last_score = detail::mean_of(completed, &EpisodeStat::score);
            last_shape = detail::mean_of(completed, &EpisodeStat::shaping);
            last_ret = last_score + last_shape;  // exact decomposition
        }
        long step = (it + 1) * steps_per_iter;
        double wall = run.deterministic
                          ? 0.0
                          : std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        char row[360];
        std::snprintf(row, sizeof(row), "%ld,%.8g,%.8g,%.8g,%.8g,%.8g,%.8g,%.8g,%.8g,%.3f", step,
                      last_ret, last_score, last_shape, st.policy_loss, st.value_loss, st.entropy,
                      st.clip_frac, st.approx_kl, wall);
        res.csv_rows.emplace_back(row);
        if (write_files) train_csv << row << "\n";
        res.score_curve.emplace_back(step, last_score);
        res.return_curve.emplace_back(step, last_ret);
        if (it >= tail_from) {
            tail_score += last_score;
            tail_ret += last_ret;
            ++tail_n;
        }

        if (run.eval_every_iters > 0 && ((it + 1) % run.eval_every_iters == 0 || it == iters - 1)) {
            double es = 0.0, er = 0.0;
            for (int e = 0; e < run.eval_episodes; ++e) {
                auto stat = collector.run_episode_deterministic(0xe7a1ULL + 31ULL * static_cast<std::uint64_t>(e));
                es += stat.score;
                er += stat.ret;
            }
            es /= run.eval_episodes;
            er /= run.eval_episodes;
            if (write_files) {
                char erow[128];
                std::snprintf(erow, sizeof(erow), "%ld,%.8g,%.8g", step, es, er);
                eval_csv << erow << "\n";
            }
        }
    }
    res.final_window_score = tail_n ? tail_score / static_cast<double>(tail_n) : 0.0;
    res.final_window_return = tail_n ? tail_ret / static_cast<double>(tail_n) : 0.0;

    if (write_files) {
        nn::Checkpoint ck;
        params.to_checkpoint(ck);
        ck.set_fingerprint(run.fingerprint());
        nn::save_checkpoint(run.out_dir + "/checkpoint.ckpt", ck);
    }
    return res;
}

}  // namespace flowbench::rl
