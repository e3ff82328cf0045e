// Command-line front end: dataset generation, flow training/evaluation, RL
// training/evaluation, experiment matrices, speed sweeps, episode rendering,
// plotting and a fast self-check. Exit codes: 0 success, 1 run failure,
// 2 usage error.

#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <iostream>

#include "flowbench/bench.hpp"
#include "flowbench/flownet.hpp"
#include "flowbench/rl/train.hpp"
#include "flowbench/selfcheck.hpp"

using namespace flowbench;

namespace {

std::string resolve_out(const std::string& out) {
    if (!out.empty() && out.front() == '/') return out;
    const char* root = std::getenv("FLOWBENCH_OUT_ROOT");
    if (root && *root) return std::string(root) + "/" + out;
    return out;
}

struct EnvOpts {
    std::string task = "chaser2d";
    std::string config_path;
    double speed = -1.0;
    double rel_speed = -1.0;
    std::uint64_t seed = 0;
    int background = -1;
    bool multi_texture = false;

    void attach(CLI::App* cmd) {
        cmd->add_option("--task", task, "catcher2d | chaser2d");
        cmd->add_option("--config", config_path, "environment configuration file (sections per task)");
        cmd->add_option("--speed", speed, "target speed in world units/step (overrides config)");
        cmd->add_option("--rel-speed", rel_speed, "target speed as a multiple of the base speed");
        cmd->add_option("--seed", seed, "run seed");
        cmd->add_option("--background", background, "texture id 0..3 for multi-texture mode");
        cmd->add_flag("--multi-texture", multi_texture, "random per-episode background texture");
    }

    env2d::EnvConfig resolve() const {
        env2d::Task t = env2d::task_from_name(task);
        env2d::EnvConfig cfg;
        if (!config_path.empty())
            cfg = env2d::EnvConfig::from_ini(util::Ini::parse_file(config_path), t);
        cfg.task = t;
        if (speed > 0) cfg.speed = speed;
        if (rel_speed > 0) cfg.speed = env2d::kBaseSpeed * rel_speed;
        if (background >= 0) cfg.background = background;
        if (multi_texture) cfg.multi_texture = true;
        cfg.seed = seed;
        cfg.validate();
        return cfg;
    }
};

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

int cmd_gen_dataset(const EnvOpts& env, int count, double smin, double smax, const std::string& out) {
    auto ds = flownet::generate_dataset(env.resolve(), count, smin, smax, env.seed);
    ds.save(resolve_out(out));
    std::cout << "wrote " << ds.size() << " pairs to " << resolve_out(out) << "\n";
    return 0;
}

int cmd_train_flow(const std::string& dataset, const std::string& out_dir,
                   flownet::FlowTrainConfig cfg) {
    auto ds = flownet::FlowDataset::load(dataset);
    std::string dir = out_dir;
    std::filesystem::create_directories(dir);
    std::ofstream log(dir + "/flow_train.csv");
    flownet::TinyFlowNetParams<float> params;
    params.init(cfg.seed);
    auto res = flownet::train_flow(params, ds, cfg, [&](const std::string& line) {
        log << line << "\n";
        log.flush();
    });
    nn::Checkpoint ck;
    params.to_checkpoint(ck);
    ck.set_fingerprint(rl::fnv1a(dataset + "#" + std::to_string(cfg.total_steps) + "#" +
                                 std::to_string(cfg.seed)));
    nn::save_checkpoint(dir + "/tinyflownet.ckpt", ck);
    std::cout << "final loss " << res.last_loss << " (from " << res.first_loss << ")\n"
              << "holdout EPE " << res.final_holdout.overall << " moving " << res.final_holdout.moving
              << " (zero predictor " << res.final_holdout.zero_moving << ")\n"
              << "checkpoint " << dir << "/tinyflownet.ckpt\n";
    return 0;
}

int cmd_eval_flow(const std::string& dataset, const std::string& ckpt, const std::string& out_csv) {
    auto ds = flownet::FlowDataset::load(dataset);
    flownet::TinyFlowNetParams<float> params;
    params.from_checkpoint(nn::load_checkpoint(ckpt));
    flownet::TinyFlowNetRunner runner(params);
    std::vector<const flownet::FlowRecord*> recs;
    for (const auto& r : ds.records) recs.push_back(&r);
    auto rep = flownet::evaluate_epe(recs, [&](const flownet::FlowRecord& r) {
        return runner.predict_field(r.prev, r.cur);
    });
    std::ofstream csv(resolve_out(out_csv));
    csv << "metric,value\noverall_epe," << rep.overall << "\nmoving_epe," << rep.moving
        << "\nzero_predictor_moving_epe," << rep.zero_moving << "\n";
    for (int b = 0; b < 3; ++b)
        csv << "epe_speed_bucket_" << b << "," << rep.by_speed[static_cast<std::size_t>(b)] << "\n";
    std::cout << "overall EPE " << rep.overall << ", moving-pixel EPE " << rep.moving
              << " (zero predictor " << rep.zero_moving << ")\n";
    return 0;
}

int cmd_train_rl(rl::RlRunConfig run) {
    auto res = rl::train_rl(run);
    std::cout << "final-window score " << res.final_window_score << ", return "
              << res.final_window_return << "\nlogs in " << run.out_dir << "\n";
    return 0;
}

int cmd_eval_rl(const std::string& run_dir, int episodes, std::uint64_t seed) {
    std::string dir = resolve_out(run_dir);
    auto ini = util::Ini::parse_file(dir + "/config.ini");
    env2d::Task t = ini.has_section("catcher2d") ? env2d::Task::catcher : env2d::Task::chaser;
    env2d::EnvConfig cfg = env2d::EnvConfig::from_ini(ini, t);
    rl::RlRunConfig run;
    run.env = cfg;
    run.obs = render::obs_variant_from_name(ini.get_str("run", "obs", "image"));
    run.perception = rl::perception_from_name(ini.get_str("run", "perception", "standard"));
    run.train_flownet = ini.get_int("run", "train_flownet", 0) != 0;
    rl::PolicyConfig pc = run.policy_config();
    rl::PolicyParams<float> params(pc, 0);
    params.from_checkpoint(nn::load_checkpoint(dir + "/checkpoint.ckpt"));
    auto spec = render::ObservationSpec::for_env(run.obs, cfg);
    rl::RolloutCollector coll(cfg, spec, params, 1, seed);
    std::string dump_dir;
    if (pc.perception == rl::Perception::tinyflownet_front) {
        dump_dir = dir + "/net_flow_episode";  // intermediate motion output, first episode
        std::filesystem::create_directories(dump_dir);
    }
    double score = 0, ret = 0;
    for (int e = 0; e < episodes; ++e) {
        auto st = coll.run_episode_deterministic(seed + 31ULL * static_cast<std::uint64_t>(e),
                                                 e == 0 ? dump_dir : "");
        score += st.score;
        ret += st.ret;
    }
    if (!dump_dir.empty()) std::cout << "frontend flow dumps in " << dump_dir << "\n";
    std::cout << "episodes " << episodes << " mean score " << score / episodes << " mean return "
              << ret / episodes << "\n";
    return 0;
}

int cmd_compare(harness::ExperimentSpec spec, const std::string& variants_csv) {
    for (const auto& v : split(variants_csv, ','))
        spec.variants.push_back(render::obs_variant_from_name(v));
    auto sums = harness::run_matrix(spec, [](const std::string& m) { std::cout << m << "\n"; });
    std::filesystem::create_directories(spec.out_dir);
    harness::write_summary_csv(sums, spec.out_dir + "/summary.csv");
    std::vector<std::vector<std::string>> csvs;
    std::vector<std::string> labels;
    for (auto v : spec.variants) {
        std::vector<std::string> seed_csvs;
        for (auto s : spec.seeds) seed_csvs.push_back(harness::run_dir_for(spec, v, s) + "/train_log.csv");
        csvs.push_back(seed_csvs);
        labels.push_back(render::obs_variant_name(v));
    }
    harness::plot_score_curves(csvs, labels, spec.out_dir + "/compare.svg");
    std::cout << "summary " << spec.out_dir << "/summary.csv\nplot " << spec.out_dir << "/compare.svg\n";
    for (auto v : spec.variants)
        std::cout << "  " << render::obs_variant_name(v) << " seed-mean final score "
                  << harness::seed_mean_score(sums, render::obs_variant_name(v)) << "\n";
    return 0;
}

int cmd_sweep(harness::SweepSpec spec, const std::string& speeds_csv, const std::string& variants_csv) {
    spec.rel_speeds.clear();
    for (const auto& s : split(speeds_csv, ',')) spec.rel_speeds.push_back(std::stod(s));
    spec.baselines.clear();
    for (const auto& v : split(variants_csv, ','))
        spec.baselines.push_back(render::obs_variant_from_name(v));
    auto table = harness::sweep_speed(spec, [](const std::string& m) { std::cout << m << "\n"; });
    std::filesystem::create_directories(spec.out_dir);
    harness::write_sweep_csv(table, spec.out_dir + "/sweep.csv");
    std::cout << "rel_speed variant score relative\n";
    for (const auto& c : table)
        std::cout << "  " << c.rel_speed << " " << c.variant << " " << c.score << " " << c.relative << "\n";
    return 0;
}

int cmd_render_episode(const EnvOpts& env, const std::string& policy, const std::string& run_dir,
                       const std::string& out_dir) {
    env2d::EnvConfig cfg = env.resolve();
    std::string dir = resolve_out(out_dir);
    std::filesystem::create_directories(dir);
    env2d::Env e(cfg);
    e.reset(cfg.seed);
    util::Pcg32 rng(cfg.seed, 0x4e4d);
    harness::ScriptedOracle oracle(cfg);

    std::unique_ptr<rl::PolicyParams<float>> params;
    std::unique_ptr<nn::GraphF> graph;
    rl::PolicyNodes<float> nodes;
    if (policy == "checkpoint") {
        std::string rdir = resolve_out(run_dir);
        auto ini = util::Ini::parse_file(rdir + "/config.ini");
        rl::RlRunConfig rc;
        rc.env = cfg;
        rc.obs = render::obs_variant_from_name(ini.get_str("run", "obs", "vector"));
        rc.perception = rl::perception_from_name(ini.get_str("run", "perception", "none"));
        if (rc.obs != render::ObsVariant::vector)
            throw std::runtime_error("render-episode --policy checkpoint supports vector-policy runs; "
                                     "use eval-rl for pixel policies");
        params = std::make_unique<rl::PolicyParams<float>>(rc.policy_config(), 0);
        params->from_checkpoint(nn::load_checkpoint(rdir + "/checkpoint.ckpt"));
        graph = std::make_unique<nn::GraphF>();
        nodes = build_policy(*graph, *params, 1, false);
    }

    env2d::EnvState prev = e.state();
    for (int t = 0; t < cfg.episode_len; ++t) {
        std::array<double, 2> a{0, 0};
        if (policy == "random") {
            a = {rng.uniform(-1, 1), rng.uniform(-1, 1)};
        } else if (policy == "oracle") {
            auto torque = oracle.act(e.state());
            a = {torque[0] / cfg.torque_limit, torque[1] / cfg.torque_limit};
        } else if (policy == "checkpoint") {
            auto sv = env2d::state_vector_with_ball(e.state(), cfg);
            for (std::size_t i = 0; i < sv.size(); ++i)
                graph->data(nodes.vec_in).data[i] = static_cast<float>(sv[i]);
            graph->forward();
            a = {graph->value(nodes.mean).at(0, 0), graph->value(nodes.mean).at(0, 1)};
        } else {
            throw std::runtime_error("unknown policy: " + policy);
        }
        prev = e.state();
        auto r = e.step({a[0] * cfg.torque_limit, a[1] * cfg.torque_limit});
        char name[512];
        std::snprintf(name, sizeof(name), "%s/frame_%03d.ppm", dir.c_str(), t);
        render::write_ppm(render::render(e.state(), cfg), name);
        auto flow = render::ground_truth_flow(prev, e.state(), cfg, r.ball_respawned);
        std::snprintf(name, sizeof(name), "%s/flow_%03d.ppm", dir.c_str(), t);
        render::write_ppm(render::flow_to_rgb(flow, cfg.speed * render::kPxPerUnit), name);
        std::snprintf(name, sizeof(name), "%s/flow_%03d.bin", dir.c_str(), t);
        render::write_flow_dump(flow, name);
    }
    std::cout << "wrote " << cfg.episode_len << " frames + flow visualizations to " << dir << "\n";
    return 0;
}

int cmd_plot(const std::string& groups, const std::string& labels_csv, const std::string& out,
             int smooth) {
    std::vector<std::vector<std::string>> csvs;
    for (const auto& group : split(groups, ';')) csvs.push_back(split(group, ','));
    auto labels = split(labels_csv, ';');
    if (labels.size() != csvs.size()) throw std::runtime_error("plot: labels count != csv groups");
    harness::plot_score_curves(csvs, labels, resolve_out(out), smooth);
    std::cout << "wrote " << resolve_out(out) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"2D dynamic-object control benchmark: flow distillation + PPO"};
    app.require_subcommand(1);
    int threads = 1;
    app.add_option("--threads", threads, "worker threads for data-parallel kernels");

    auto* gen = app.add_subcommand("gen-dataset", "generate a frame-pair dataset with analytic flow targets");
    EnvOpts gen_env;
    gen_env.attach(gen);
    int gen_count = 2000;
    double gen_smin = 0.4, gen_smax = 1.0;
    std::string gen_out = "dataset.bin";
    gen->add_option("--count", gen_count, "number of frame pairs");
    gen->add_option("--speed-min", gen_smin, "relative speed range low");
    gen->add_option("--speed-max", gen_smax, "relative speed range high");
    gen->add_option("--out", gen_out, "output file");

    auto* tf = app.add_subcommand("train-flow", "distill the flow network against analytic targets");
    std::string tf_dataset, tf_out = "flow_run";
    flownet::FlowTrainConfig tf_cfg;
    tf->add_option("--dataset", tf_dataset, "dataset file")->required();
    tf->add_option("--out", tf_out, "output directory");
    tf->add_option("--steps", tf_cfg.total_steps, "training steps");
    tf->add_option("--halve-every", tf_cfg.halve_every, "lr halving period");
    tf->add_option("--batch", tf_cfg.batch, "batch size");
    tf->add_option("--lr", tf_cfg.lr, "initial learning rate");
    tf->add_option("--holdout", tf_cfg.holdout_fraction, "held-out fraction");
    tf->add_option("--eval-every", tf_cfg.eval_every, "held-out evaluation period");
    tf->add_option("--seed", tf_cfg.seed, "seed");
    tf->add_flag("--deterministic", tf_cfg.deterministic, "zero wall-clock column in logs");

    auto* ef = app.add_subcommand("eval-flow", "endpoint-error report of a flow checkpoint");
    std::string ef_dataset, ef_ckpt, ef_out = "flow_eval.csv";
    ef->add_option("--dataset", ef_dataset)->required();
    ef->add_option("--checkpoint", ef_ckpt)->required();
    ef->add_option("--out", ef_out, "report CSV");

    auto* tr = app.add_subcommand("train-rl", "PPO training of one agent");
    EnvOpts tr_env;
    tr_env.attach(tr);
    rl::RlRunConfig tr_run;
    std::string tr_obs = "image", tr_perc = "standard", tr_out = "rl_run";
    tr->add_option("--obs", tr_obs,
                   "image|stack2|image_diff|lstm|segmentation|flow|gt_flow|velocity_vector|vector");
    tr->add_option("--perception", tr_perc, "standard | residual | tinyflownet");
    tr->add_option("--steps", tr_run.ppo.total_steps, "environment step budget");
    tr->add_option("--out", tr_out, "output directory");
    tr->add_option("--tiny", tr_run.tiny_checkpoint, "flow network checkpoint (flow observation)");
    tr->add_flag("--train-flownet", tr_run.train_flownet, "from-scratch mode: train the flow frontend with RL");
    tr->add_option("--eval-every", tr_run.eval_every_iters, "evaluation period in iterations");
    tr->add_option("--eval-episodes", tr_run.eval_episodes, "episodes per evaluation");
    tr->add_flag("--deterministic", tr_run.deterministic, "zero wall-clock column in logs");
    tr->add_option("--actors", tr_run.ppo.actors, "parallel actors");
    tr->add_option("--horizon", tr_run.ppo.horizon, "rollout horizon");

    auto* er = app.add_subcommand("eval-rl", "deterministic evaluation of a trained run directory");
    std::string er_run;
    int er_episodes = 20;
    std::uint64_t er_seed = 12345;
    er->add_option("--run", er_run, "run directory (config.ini + checkpoint.ckpt)")->required();
    er->add_option("--episodes", er_episodes);
    er->add_option("--seed", er_seed);

    auto* cp = app.add_subcommand("compare", "train a variant x seed matrix and summarize");
    EnvOpts cp_env;
    cp_env.attach(cp);
    harness::ExperimentSpec cp_spec;
    std::string cp_variants = "image,stack2,image_diff,gt_flow", cp_seeds = "0,1,2";
    cp->add_option("--variants", cp_variants, "comma-separated observation variants");
    cp->add_option("--seeds", cp_seeds, "comma-separated seeds");
    cp->add_option("--steps", cp_spec.step_budget, "steps per run");
    cp->add_option("--out", cp_spec.out_dir, "output directory");
    cp->add_option("--tiny", cp_spec.tiny_checkpoint, "flow checkpoint for net-flow variants");
    cp->add_option("--workers", cp_spec.workers, "concurrent runs");

    auto* sw = app.add_subcommand("sweep-speed", "relative-score table across target speeds");
    EnvOpts sw_env;
    sw_env.task = "catcher2d";
    sw_env.attach(sw);
    harness::SweepSpec sw_spec;
    std::string sw_speeds = "1.0,0.5,0.25", sw_variants = "stack2", sw_seeds = "0,1";
    sw->add_option("--speeds", sw_speeds, "relative speeds");
    sw->add_option("--variants", sw_variants, "baseline variants");
    sw->add_option("--seeds", sw_seeds, "seeds per cell");
    sw->add_option("--steps", sw_spec.step_budget, "steps per run");
    sw->add_option("--out", sw_spec.out_dir, "output directory");
    sw->add_option("--tiny", sw_spec.tiny_checkpoint, "flow checkpoint for net-flow variants");
    sw->add_option("--workers", sw_spec.workers, "concurrent runs");

    auto* re = app.add_subcommand("render-episode", "dump an episode as PPM frames + flow visualizations");
    EnvOpts re_env;
    re_env.attach(re);
    std::string re_policy = "random", re_run, re_out = "episode";
    re->add_option("--policy", re_policy, "random | oracle | checkpoint");
    re->add_option("--run", re_run, "run directory for --policy checkpoint");
    re->add_option("--out", re_out, "output directory");

    auto* pl = app.add_subcommand("plot", "render training curves as a self-contained SVG");
    std::string pl_groups, pl_labels, pl_out = "plot.svg";
    int pl_smooth = 25;
    pl->add_option("--csvs", pl_groups, "seed CSVs per variant: 'a0.csv,a1.csv;b0.csv,b1.csv'")->required();
    pl->add_option("--labels", pl_labels, "labels per variant: 'A;B'")->required();
    pl->add_option("--out", pl_out, "output SVG");
    pl->add_option("--smooth", pl_smooth, "smoothing window (rows)");

    auto* sc = app.add_subcommand("selfcheck", "fast invariant suite");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    util::set_num_threads(threads);
    try {
        if (gen->parsed()) return cmd_gen_dataset(gen_env, gen_count, gen_smin, gen_smax, gen_out);
        if (tf->parsed()) return cmd_train_flow(tf_dataset, resolve_out(tf_out), tf_cfg);
        if (ef->parsed()) return cmd_eval_flow(ef_dataset, ef_ckpt, ef_out);
        if (tr->parsed()) {
            tr_run.env = tr_env.resolve();
            if (!tr_env.config_path.empty()) {
                // file values fill anything the command line did not set
                long flag_steps = tr_run.ppo.total_steps;
                int flag_actors = tr_run.ppo.actors, flag_horizon = tr_run.ppo.horizon;
                tr_run.apply_ppo_ini(util::Ini::parse_file(tr_env.config_path));
                if (tr->get_option("--steps")->count() > 0) tr_run.ppo.total_steps = flag_steps;
                if (tr->get_option("--actors")->count() > 0) tr_run.ppo.actors = flag_actors;
                if (tr->get_option("--horizon")->count() > 0) tr_run.ppo.horizon = flag_horizon;
                if (tr->get_option("--seed")->count() > 0) tr_run.ppo.seed = tr_env.seed;
            }
            tr_run.obs = render::obs_variant_from_name(tr_obs);
            tr_run.perception = rl::perception_from_name(tr_perc);
            if (tr_run.obs == render::ObsVariant::flow && !tr_run.tiny_checkpoint.empty() &&
                tr_run.perception == rl::Perception::table_s1)
                tr_run.perception = rl::Perception::tinyflownet_front;
            if (tr_env.config_path.empty() || tr->get_option("--seed")->count() > 0)
                tr_run.ppo.seed = tr_env.seed;
            tr_run.out_dir = resolve_out(tr_out);
            return cmd_train_rl(tr_run);
        }
        if (er->parsed()) return cmd_eval_rl(er_run, er_episodes, er_seed);
        if (cp->parsed()) {
            cp_spec.env = cp_env.resolve();
            cp_spec.seeds.clear();
            for (const auto& s : split(cp_seeds, ',')) cp_spec.seeds.push_back(std::stoull(s));
            cp_spec.variants.clear();
            cp_spec.out_dir = resolve_out(cp_spec.out_dir.empty() ? "runs" : cp_spec.out_dir);
            return cmd_compare(cp_spec, cp_variants);
        }
        if (sw->parsed()) {
            sw_spec.env = sw_env.resolve();
            sw_spec.seeds.clear();
            for (const auto& s : split(sw_seeds, ',')) sw_spec.seeds.push_back(std::stoull(s));
            sw_spec.out_dir = resolve_out(sw_spec.out_dir.empty() ? "sweep" : sw_spec.out_dir);
            return cmd_sweep(sw_spec, sw_speeds, sw_variants);
        }
        if (re->parsed()) return cmd_render_episode(re_env, re_policy, re_run, re_out);
        if (pl->parsed()) return cmd_plot(pl_groups, pl_labels, pl_out, pl_smooth);
        if (sc->parsed()) return selfcheck::run_all(std::cout) ? 0 : 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
