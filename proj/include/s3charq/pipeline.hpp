#pragma once

// File-level orchestration: datasets on disk, per-stage checkpoints and metric CSVs, and
// loading a trained system for evaluation.

#include <filesystem>
#include <optional>
#include <string>

#include "s3charq/agent.hpp"
#include "s3charq/checkpoint.hpp"
#include "s3charq/codec.hpp"
#include "s3charq/config.hpp"
#include "s3charq/errors.hpp"
#include "s3charq/harq.hpp"
#include "s3charq/source_data.hpp"
#include "s3charq/training.hpp"

namespace s3charq {

struct RunPaths {
    std::string dir;

    std::string stage_checkpoint(int stage) const {
        switch (stage) {
            case 1: return dir + "/stage1_backbone.ckpt";
            case 2: return dir + "/stage2_codec.ckpt";
            case 3: return dir + "/stage3_retx.ckpt";
            case 4: return dir + "/stage4_agent.ckpt";
        }
        throw UsageError("stage must be 1, 2, 3 or 4");
    }
    std::string stage_metrics(int stage) const { return dir + "/stage" + std::to_string(stage) + "_metrics.csv"; }
};

inline std::string split_path(const RunConfig& cfg, SplitRole role) {
    return cfg.data.dir + "/" + to_string(role) + ".imgs";
}

inline void write_datasets(const RunConfig& cfg, const Datasets& ds) {
    std::filesystem::create_directories(cfg.data.dir);
    write_raw_images(split_path(cfg, SplitRole::codec_train), ds.codec_train.images);
    write_raw_images(split_path(cfg, SplitRole::agent_train), ds.agent_train.images);
    write_raw_images(split_path(cfg, SplitRole::test), ds.test.images);
}

/// Reads the splits written by write_datasets; generates them in memory when none exist.
inline Datasets load_datasets(const RunConfig& cfg) {
    const bool any = std::filesystem::exists(split_path(cfg, SplitRole::codec_train)) ||
                     std::filesystem::exists(split_path(cfg, SplitRole::agent_train)) ||
                     std::filesystem::exists(split_path(cfg, SplitRole::test));
    if (!any) return make_datasets(cfg);
    const auto& d = cfg.data;
    auto load = [&](SplitRole r) { return load_raw_images(split_path(cfg, r), d.channels, d.height, d.width, r); };
    Datasets ds{load(SplitRole::codec_train), load(SplitRole::agent_train), load(SplitRole::test)};
    check_disjoint({&ds.codec_train, &ds.agent_train, &ds.test});
    return ds;
}

inline CodecBundle load_codec(const RunConfig& cfg, int stage) {
    const std::string path = RunPaths{cfg.train.out_dir}.stage_checkpoint(stage);
    return import_codec(ad::load_checkpoint(path), cfg.dims(), path);
}

inline RetxBundle load_retx(const RunConfig& cfg) {
    const std::string path = RunPaths{cfg.train.out_dir}.stage_checkpoint(3);
    return import_retx(ad::load_checkpoint(path), cfg.dims(), path);
}

inline LoadedAgent load_agent(const RunConfig& cfg) {
    const std::string path = RunPaths{cfg.train.out_dir}.stage_checkpoint(4);
    return import_agent(ad::load_checkpoint(path), cfg.codec.k, path);
}

/// Codec after stage 2, retransmission bundle when stage 3 exists, threshold from the agent
/// checkpoint when stage 4 exists.
inline System load_system(const RunConfig& cfg) {
    System sys;
    sys.codec = load_codec(cfg, 2);
    sys.channel = cfg.channel.kind;
    sys.projector = make_projector(cfg);
    const RunPaths paths{cfg.train.out_dir};
    if (std::filesystem::exists(paths.stage_checkpoint(3))) sys.retx = load_retx(cfg);
    if (std::filesystem::exists(paths.stage_checkpoint(4))) sys.threshold = load_agent(cfg).threshold;
    return sys;
}

/// Runs one stage from the previous stage's checkpoint and writes its own checkpoint and metrics.
inline void run_stage(const RunConfig& cfg, int stage, const Datasets& ds) {
    const RunPaths paths{cfg.train.out_dir};
    std::filesystem::create_directories(paths.dir);
    const auto proj = make_projector(cfg);
    StageLog log;
    switch (stage) {
        case 1: {
            const CodecBundle b = stage1_train_backbone(cfg, ds.codec_train, &log);
            ad::save_checkpoint(paths.stage_checkpoint(1), export_codec(b));
            break;
        }
        case 2: {
            const CodecBundle b = stage2_train_check(cfg, load_codec(cfg, 1), ds.codec_train, proj, &log);
            ad::save_checkpoint(paths.stage_checkpoint(2), export_codec(b));
            break;
        }
        case 3: {
            const RetxBundle r = stage3_train_retx(cfg, load_codec(cfg, 2), ds.codec_train, proj, &log);
            ad::save_checkpoint(paths.stage_checkpoint(3), export_retx(r, cfg.dims()));
            break;
        }
        case 4: {
            System sys;
            sys.codec = load_codec(cfg, 2);
            sys.retx = load_retx(cfg);
            sys.channel = cfg.channel.kind;
            sys.projector = proj;
            const AgentTraining t = stage4_train_agent(cfg, sys, ds.agent_train);
            ad::save_checkpoint(paths.stage_checkpoint(4), export_agent(t.ac, t.threshold));
            write_curve_csv(paths.stage_metrics(4), t);
            return;
        }
        default: throw UsageError("stage must be 1, 2, 3 or 4");
    }
    write_stage_csv(paths.stage_metrics(stage), log);
}

}  // namespace s3charq
