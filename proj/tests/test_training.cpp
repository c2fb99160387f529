#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "s3charq/pipeline.hpp"

using namespace s3charq;

namespace {

RunConfig tiny_config() {
    RunConfig c;
    c.data.height = 4;
    c.data.width = 4;
    c.data.codec_train = 128;
    c.data.agent_train = 64;
    c.data.test = 32;
    c.data.features = 16;
    c.codec.K = 8;
    c.codec.k = 2;
    c.codec.hidden = 32;
    c.train.stage1_epochs = 20;
    c.train.stage2_epochs = 3;
    c.train.stage3_epochs = 3;
    c.train.batch = 32;
    c.train.lr = 1e-3;
    c.agent.epochs = 3;
    c.agent.minibatch = 32;
    c.agent.width = 16;
    return c;
}

std::string temp_dir(const std::string& name) {
    const auto p = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(p);
    return p.string();
}

}  // namespace

TEST(Training, StageOneLossDecreases) {
    const RunConfig cfg = tiny_config();
    const auto ds = make_datasets(cfg);
    StageLog log;
    stage1_train_backbone(cfg, ds.codec_train, &log);
    ASSERT_EQ(log.epoch_loss.size(), 20u);
    for (double l : log.epoch_loss) EXPECT_TRUE(std::isfinite(l));
    EXPECT_LT(log.epoch_loss.back(), 0.8 * log.epoch_loss.front());
}

TEST(Training, SameSeedGivesIdenticalParameters) {
    RunConfig cfg = tiny_config();
    cfg.train.stage1_epochs = 2;
    const auto ds = make_datasets(cfg);
    const auto a = stage1_train_backbone(cfg, ds.codec_train);
    const auto b = stage1_train_backbone(cfg, ds.codec_train);
    EXPECT_EQ(checkpoint_hash(export_codec(a)), checkpoint_hash(export_codec(b)));
    cfg.train.seed += 1;
    const auto c = stage1_train_backbone(cfg, ds.codec_train);
    EXPECT_NE(checkpoint_hash(export_codec(a)), checkpoint_hash(export_codec(c)));
}

TEST(Training, FrozenModulesKeepTheirHashes) {
    RunConfig cfg = tiny_config();
    cfg.train.stage1_epochs = 2;
    const auto ds = make_datasets(cfg);
    const auto proj = make_projector(cfg);
    const auto base = stage1_train_backbone(cfg, ds.codec_train);
    const auto encoder_hash = mlp_hash({&base.encoder});

    StageLog log2;
    const auto codec = stage2_train_check(cfg, base, ds.codec_train, proj, &log2);
    EXPECT_EQ(log2.frozen_hash_before, encoder_hash);
    EXPECT_EQ(log2.frozen_hash_after, encoder_hash);
    EXPECT_EQ(mlp_hash({&codec.encoder}), encoder_hash);
    EXPECT_NE(mlp_hash({&codec.joint_decoder}), mlp_hash({&base.joint_decoder}));

    const auto codec_hash = checkpoint_hash(export_codec(codec));
    StageLog log3;
    const auto retx = stage3_train_retx(cfg, codec, ds.codec_train, proj, &log3);
    EXPECT_EQ(log3.frozen_hash_after, codec_hash);
    EXPECT_EQ(checkpoint_hash(export_codec(codec)), codec_hash);
    for (double l : log3.epoch_loss) {
        EXPECT_TRUE(std::isfinite(l));
        EXPECT_GT(l, 0.0);
    }

    System sys;
    sys.codec = codec;
    sys.retx = retx;
    sys.projector = proj;
    const auto retx_hash = checkpoint_hash(export_retx(retx, cfg.dims()));
    const auto agent = stage4_train_agent(cfg, sys, ds.agent_train);
    EXPECT_EQ(checkpoint_hash(export_codec(codec)), codec_hash);
    EXPECT_EQ(checkpoint_hash(export_retx(retx, cfg.dims())), retx_hash);
    EXPECT_EQ(agent.curve.size(), 3u);
    EXPECT_GT(agent.threshold, 0.0);
    EXPECT_NEAR(agent.random_baseline.retx_ratio, 0.5, 0.2);
}

TEST(Training, SamplerIsUniformOverTheGrid) {
    const std::vector<double> grid{0, 1, 4, 7, 10, 13};
    StageSampler s(grid, 0.1, 1.0);
    Rng rng = make_stream(9);
    std::vector<double> snr, ratio;
    const std::size_t draws = 60000;
    for (int b = 0; b < 60; ++b) s.draw(draws / 60, rng, snr, ratio);
    for (double r : ratio) {
        EXPECT_GE(r, 0.1);
        EXPECT_LE(r, 1.0);
    }
    double chi2 = 0;
    const double expected = static_cast<double>(draws) / 6.0;
    for (std::size_t c : s.counts()) chi2 += std::pow(static_cast<double>(c) - expected, 2) / expected;
    // 99th percentile of chi-square with 5 degrees of freedom
    EXPECT_LT(chi2, 15.086);
}

TEST(Training, SamplerWithFixedRatio) {
    StageSampler s({3.0}, 0.25, 0.25);
    Rng rng = make_stream(10);
    std::vector<double> snr, ratio;
    s.draw(5, rng, snr, ratio);
    EXPECT_EQ(snr, std::vector<double>(5, 3.0));
    EXPECT_EQ(ratio, std::vector<double>(5, 0.25));
}

TEST(Training, UpperQuantileDefinition) {
    std::vector<double> v(10);
    for (std::size_t i = 0; i < 10; ++i) v[i] = static_cast<double>(10 - i);
    EXPECT_EQ(upper_quantile(v, 0.9), 9.0);
    EXPECT_EQ(upper_quantile(v, 1.0), 10.0);
    EXPECT_EQ(upper_quantile(v, 0.05), 1.0);
    EXPECT_EQ(upper_quantile({2.5}, 0.9), 2.5);
    EXPECT_THROW(upper_quantile({}, 0.9), UsageError);
    Rng rng = make_stream(11);
    std::vector<double> w(1000);
    for (auto& x : w) x = uniform(rng, 0, 1);
    const double q = upper_quantile(w, 0.9);
    std::size_t below = 0;
    for (double x : w) below += x <= q;
    EXPECT_EQ(below, 900u);
}

TEST(Training, PipelineFilesRoundTrip) {
    RunConfig cfg = tiny_config();
    cfg.train.stage1_epochs = 2;
    cfg.train.stage2_epochs = 2;
    cfg.train.stage3_epochs = 2;
    cfg.agent.epochs = 2;
    cfg.data.dir = temp_dir("s3charq_test_data");
    cfg.train.out_dir = temp_dir("s3charq_test_run");
    const auto ds = make_datasets(cfg);
    write_datasets(cfg, ds);
    const auto loaded = load_datasets(cfg);
    ASSERT_EQ(loaded.test.images.size(), ds.test.images.size());
    EXPECT_EQ(loaded.test.images[0].pixels, ds.test.images[0].pixels);

    for (int stage = 1; stage <= 4; ++stage) run_stage(cfg, stage, loaded);
    const RunPaths paths{cfg.train.out_dir};
    for (int stage = 1; stage <= 4; ++stage) {
        EXPECT_TRUE(std::filesystem::exists(paths.stage_checkpoint(stage))) << stage;
        EXPECT_TRUE(std::filesystem::exists(paths.stage_metrics(stage))) << stage;
    }
    std::ifstream curve(paths.stage_metrics(4));
    std::string header, first;
    std::getline(curve, header);
    std::getline(curve, first);
    EXPECT_EQ(header, "epoch,mean_reward,retx_ratio,outage");
    EXPECT_EQ(first.rfind("random,", 0), 0u);

    const System sys = load_system(cfg);
    EXPECT_GT(sys.threshold, 0.0);
    EXPECT_FALSE(sys.retx.second_estimator.empty());
    EXPECT_EQ(load_agent(cfg).threshold, sys.threshold);
    EXPECT_THROW(run_stage(cfg, 5, loaded), UsageError);
}

TEST(Training, MissingPreviousStageIsACheckpointError) {
    RunConfig cfg = tiny_config();
    cfg.train.out_dir = temp_dir("s3charq_test_empty");
    EXPECT_THROW(run_stage(cfg, 2, make_datasets(cfg)), CheckpointError);
}
