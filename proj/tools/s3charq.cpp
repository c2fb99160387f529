// Command-line front end.
//
// Exit codes: 0 success, 1 other failure, 2 configuration error, 3 checkpoint error,
// 4 training divergence.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "s3charq/s3charq.hpp"

using namespace s3charq;

namespace {

struct Options {
    std::string config;
    std::vector<std::string> overrides;
    int stage = 0;
};

RunConfig build_config(const Options& o) {
    RunConfig cfg = o.config.empty() ? RunConfig{} : load_config(o.config);
    for (const auto& kv : o.overrides) apply_config_text(cfg, kv, "--set");
    validate_config(cfg);
    return cfg;
}

/// Threshold from the agent checkpoint, else recomputed from the agent-training split.
double resolve_threshold(const RunConfig& cfg, System& sys, const Datasets& ds) {
    if (sys.threshold < 0.0)
        sys.threshold = retransmission_threshold(sys, ds.agent_train, cfg.channel.snr_db_grid, cfg.eval.R,
                                                 cfg.agent.threshold_quantile, cfg.agent.seed);
    return sys.threshold;
}

std::string calibration_path(const RunConfig& cfg) { return cfg.eval.out_dir + "/calibration.json"; }

double threshold_scale(const RunConfig& cfg) {
    const std::string p = calibration_path(cfg);
    if (!std::filesystem::exists(p)) return cfg.eval.threshold_scale;
    return nlohmann::json::parse(read_text(p)).at("scale").get<double>();
}

std::vector<Policy> build_policies(const RunConfig& cfg, double threshold, const ActorCritic* agent) {
    std::vector<Policy> out;
    for (const auto& name : cfg.eval.policies) {
        Policy p{parse_policy(name), threshold, 1.0, nullptr};
        if (p.kind == PolicyKind::threshold) p.scale = threshold_scale(cfg);
        if (p.kind == PolicyKind::agent) {
            if (!agent) throw CheckpointError("policy 'agent' needs the stage-4 checkpoint");
            p.agent = agent;
        }
        out.push_back(p);
    }
    return out;
}

int cmd_gen_data(const RunConfig& cfg) {
    const Datasets ds = make_datasets(cfg);
    write_datasets(cfg, ds);
    std::printf("wrote %zu / %zu / %zu images to %s\n", ds.codec_train.images.size(), ds.agent_train.images.size(),
                ds.test.images.size(), cfg.data.dir.c_str());
    return 0;
}

int cmd_train(const RunConfig& cfg, int stage) {
    const Datasets ds = load_datasets(cfg);
    run_stage(cfg, stage, ds);
    const RunPaths paths{cfg.train.out_dir};
    std::printf("stage %d done: %s\n", stage, paths.stage_checkpoint(stage).c_str());
    return 0;
}

struct Loaded {
    System sys;
    std::optional<LoadedAgent> agent;
};

Loaded load_for_eval(const RunConfig& cfg, const Datasets& ds) {
    Loaded l{load_system(cfg), std::nullopt};
    if (std::filesystem::exists(RunPaths{cfg.train.out_dir}.stage_checkpoint(4))) l.agent = load_agent(cfg);
    resolve_threshold(cfg, l.sys, ds);
    return l;
}

int cmd_calibrate(const RunConfig& cfg) {
    const Datasets ds = load_datasets(cfg);
    Loaded l = load_for_eval(cfg, ds);
    const std::uint64_t seed = cfg.eval.seeds.front();
    double target = cfg.eval.target_retx;
    if (target < 0.0) {
        if (!l.agent) throw CheckpointError("calibrate: no target ratio given and no stage-4 checkpoint to match");
        SweepSpec spec{{{PolicyKind::agent, l.sys.threshold, 1.0, &l.agent->ac}}, {cfg.eval.calibrate_snr}, {seed},
                       cfg.eval.R, cfg.eval.R2};
        target = evaluate_sweep(l.sys, ds.test, spec).summary.front().retx_ratio;
    }
    const auto est = round1_estimates(l.sys, ds.test, cfg.eval.calibrate_snr, cfg.eval.R, seed);
    const Calibration c = calibrate_threshold_scale(est, l.sys.threshold, target);
    std::filesystem::create_directories(cfg.eval.out_dir);
    nlohmann::json j{{"scale", c.scale},   {"achieved", c.achieved}, {"target", target},
                     {"attained", c.attained}, {"iterations", c.iterations}, {"snr_db", cfg.eval.calibrate_snr},
                     {"threshold", l.sys.threshold}};
    write_text(calibration_path(cfg), j.dump(2) + "\n");
    std::printf("scale %.6g: ratio %.4f for target %.4f%s\n", c.scale, c.achieved, target,
                c.attained ? "" : " (target not attainable within 0.02; closest reported)");
    return 0;
}

SweepResult run_eval(const RunConfig& cfg, const Loaded& l, const Datasets& ds, double R, double R2) {
    SweepSpec spec{build_policies(cfg, l.sys.threshold, l.agent ? &l.agent->ac : nullptr), cfg.channel.snr_db_grid,
                   cfg.eval.seeds, R, R2};
    if (std::any_of(spec.policies.begin(), spec.policies.end(),
                    [](const Policy& p) { return p.kind != PolicyKind::none; }) &&
        l.sys.retx.empty())
        throw CheckpointError("retransmitting policies need the stage-3 checkpoint");
    return evaluate_sweep(l.sys, ds.test, spec);
}

int cmd_evaluate(const RunConfig& cfg) {
    const Datasets ds = load_datasets(cfg);
    const Loaded l = load_for_eval(cfg, ds);
    const auto res = run_eval(cfg, l, ds, cfg.eval.R, cfg.eval.R2);
    write_sweep(cfg.eval.out_dir, res, l.sys.threshold);
    std::printf("%s", summary_csv(res.summary).c_str());
    return 0;
}

std::string sweep_dir(const RunConfig& cfg, double r) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "/sweep_R%g", r);
    return cfg.eval.out_dir + buf;
}

int cmd_sweep(const RunConfig& cfg) {
    const Datasets ds = load_datasets(cfg);
    const Loaded l = load_for_eval(cfg, ds);
    for (double r : cfg.eval.r_values) {
        const auto res = run_eval(cfg, l, ds, r, r);
        write_sweep(sweep_dir(cfg, r), res, l.sys.threshold);
        std::printf("R = %g -> %s\n", r, sweep_dir(cfg, r).c_str());
    }
    return 0;
}

int cmd_report(const RunConfig& cfg) {
    std::vector<std::string> dirs;
    if (std::filesystem::exists(cfg.eval.out_dir + "/summary.csv")) dirs.push_back(cfg.eval.out_dir);
    for (double r : cfg.eval.r_values)
        if (std::filesystem::exists(sweep_dir(cfg, r) + "/summary.csv")) dirs.push_back(sweep_dir(cfg, r));
    if (dirs.empty()) throw FormatError("report: no summary.csv under " + cfg.eval.out_dir + "; run evaluate or sweep");
    for (const auto& d : dirs) {
        const auto summary = parse_summary_csv(read_text(d + "/summary.csv"));
        std::filesystem::create_directories(d + "/figures");
        for (const auto& [name, csv] : figure_tables(summary)) write_text(d + "/figures/" + name, csv);
        std::printf("figures -> %s/figures\n", d.c_str());
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Semantic HARQ link simulator"};
    app.require_subcommand(1);
    Options opt;
    auto add_common = [&opt](CLI::App* c) {
        c->add_option("-c,--config", opt.config, "configuration file")->check(CLI::ExistingFile);
        c->add_option("-s,--set", opt.overrides, "override, e.g. -s train.seed=3");
    };
    auto* gen = app.add_subcommand("gen-data", "generate and write the dataset splits");
    auto* train = app.add_subcommand("train", "run one training stage");
    train->add_option("--stage", opt.stage, "stage 1-4")->required()->check(CLI::Range(1, 4));
    auto* cal = app.add_subcommand("calibrate", "fit the threshold-baseline scale");
    auto* eval = app.add_subcommand("evaluate", "evaluate all policies over the SNR grid");
    auto* sweep = app.add_subcommand("sweep", "evaluate at every ratio in eval.r_values");
    auto* rep = app.add_subcommand("report", "write per-figure CSV tables");
    for (auto* c : {gen, train, cal, eval, sweep, rep}) add_common(c);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        const RunConfig cfg = build_config(opt);
        if (*gen) return cmd_gen_data(cfg);
        if (*train) return cmd_train(cfg, opt.stage);
        if (*cal) return cmd_calibrate(cfg);
        if (*eval) return cmd_evaluate(cfg);
        if (*sweep) return cmd_sweep(cfg);
        if (*rep) return cmd_report(cfg);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const CheckpointError& e) {
        std::fprintf(stderr, "checkpoint error: %s\n", e.what());
        return 3;
    } catch (const TrainingError& e) {
        std::fprintf(stderr, "training diverged: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 1;
}
