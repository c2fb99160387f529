#pragma once

// Multi-stage training:
//   1. encoder + decoder end to end on MSE, check slot fed zeros
//   2. check encoder + decoder + estimator on the IB loss, encoder frozen
//   3. retransmission modules with the base system frozen, every sample retransmitted
//   4. PPO agent on the agent-training split, whole link frozen

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "s3charq/adam.hpp"
#include "s3charq/agent.hpp"
#include "s3charq/autodiff.hpp"
#include "s3charq/checkpoint.hpp"
#include "s3charq/codec.hpp"
#include "s3charq/config.hpp"
#include "s3charq/errors.hpp"
#include "s3charq/harq.hpp"
#include "s3charq/rng.hpp"
#include "s3charq/source_data.hpp"

namespace s3charq {

struct Datasets {
    DatasetSplit codec_train;
    DatasetSplit agent_train;
    DatasetSplit test;
};

inline Datasets make_datasets(const RunConfig& cfg) {
    const auto& d = cfg.data;
    Datasets ds{make_split(SplitRole::codec_train, d.codec_train, d.seed, d.channels, d.height, d.width),
                make_split(SplitRole::agent_train, d.agent_train, d.seed, d.channels, d.height, d.width),
                make_split(SplitRole::test, d.test, d.seed, d.channels, d.height, d.width)};
    check_disjoint({&ds.codec_train, &ds.agent_train, &ds.test});
    return ds;
}

inline PerceptualProjector make_projector(const RunConfig& cfg) {
    return PerceptualProjector(cfg.data.projector_seed, cfg.data.features,
                               cfg.data.channels * cfg.data.height * cfg.data.width);
}

/// FNV-1a of a serialized checkpoint; used to enforce freeze contracts.
inline std::uint64_t checkpoint_hash(const std::vector<ad::NamedTensor>& tensors) {
    const std::string bytes = ad::serialize_checkpoint(tensors);
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::uint64_t mlp_hash(std::initializer_list<const Mlp*> nets) {
    std::vector<ad::NamedTensor> t;
    for (const Mlp* m : nets)
        if (!m->empty()) ad::append_mlp(t, *m);
    return checkpoint_hash(t);
}

struct StageLog {
    int stage = 0;
    std::vector<double> epoch_loss;
    std::vector<std::size_t> snr_counts;  // draws per grid point over the whole stage
    std::uint64_t frozen_hash_before = 0;
    std::uint64_t frozen_hash_after = 0;
};

inline void write_stage_csv(const std::string& path, const StageLog& log) {
    std::ofstream os(path);
    if (!os) throw ConfigError("cannot write " + path);
    os << "epoch,loss\n";
    char buf[64];
    for (std::size_t e = 0; e < log.epoch_loss.size(); ++e) {
        std::snprintf(buf, sizeof buf, "%.17g", log.epoch_loss[e]);
        os << e + 1 << ',' << buf << '\n';
    }
}

/// Per-sample (SNR, R) draws: SNR uniform over the grid, R uniform over [r_min, r_max].
class StageSampler {
public:
    StageSampler(const std::vector<double>& grid, double r_min, double r_max)
        : grid_(grid), r_min_(r_min), r_max_(r_max), counts_(grid.size(), 0) {}

    void draw(std::size_t n, Rng& rng, std::vector<double>& snr, std::vector<double>& ratio) {
        snr.resize(n);
        ratio.resize(n);
        std::uniform_int_distribution<std::size_t> pick(0, grid_.size() - 1);
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t g = pick(rng);
            ++counts_[g];
            snr[i] = grid_[g];
            ratio[i] = r_min_ == r_max_ ? r_min_ : uniform(rng, r_min_, r_max_);
        }
    }
    const std::vector<std::size_t>& counts() const { return counts_; }

private:
    std::vector<double> grid_;
    double r_min_, r_max_;
    std::vector<std::size_t> counts_;
};

/// Same stream for every row; training noise needs no per-sample reproducibility.
inline RoundNoise draw_training_noise(ChannelKind kind, std::span<const double> snr_db,
                                      std::span<const std::size_t> active, std::size_t K, std::size_t k, Rng& rng) {
    const std::size_t B = snr_db.size();
    std::vector<Rng> streams;
    streams.reserve(B);
    for (std::size_t r = 0; r < B; ++r) streams.emplace_back(rng());
    return draw_round_noise(kind, snr_db, active, K, k, streams);
}

inline Tensor standard_normal_matrix(std::size_t rows, std::size_t cols, Rng& rng) {
    Tensor t = Tensor::matrix(rows, cols);
    for (auto& v : t.data) v = standard_normal(rng);
    return t;
}

namespace detail {

inline void check_finite_loss(double loss, int stage, std::size_t epoch, std::size_t step) {
    if (!std::isfinite(loss))
        throw TrainingError("stage " + std::to_string(stage) + " diverged at epoch " + std::to_string(epoch + 1) +
                            ", step " + std::to_string(step) + " (loss " + std::to_string(loss) + ")");
}

template <class StepFn>
void run_epochs(int stage, std::size_t epochs, std::size_t n, std::size_t batch, Rng& rng, StageLog& log,
                StepFn&& step) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t e = 0; e < epochs; ++e) {
        std::shuffle(order.begin(), order.end(), rng);
        double total = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < n; start += batch) {
            const std::size_t end = std::min(n, start + batch);
            const double loss = step(std::span<const std::size_t>(order.data() + start, end - start));
            check_finite_loss(loss, stage, e, batches);
            total += loss;
            ++batches;
        }
        log.epoch_loss.push_back(total / static_cast<double>(batches));
    }
}

inline std::vector<const Image*> gather_images(const DatasetSplit& split, std::span<const std::size_t> idx) {
    std::vector<const Image*> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(&split.images[i]);
    return out;
}

inline void sgd_step(const std::vector<Var>& params, ad::AdamState& opt, const Var& loss) {
    ad::zero_grad(params);
    ad::backward(loss);
    ad::adam_step(params, opt);
}

inline Var mse_graph(const Var& a, const Var& b) { return ad::mean(ad::square(ad::sub(a, b))); }

inline std::vector<double> scores_of(const CodecDims& d, std::span<const Image* const> images, const Tensor& recon,
                                     const PerceptualProjector& proj) {
    std::vector<double> s(images.size());
    for (std::size_t r = 0; r < images.size(); ++r) {
        Image img(d.channels, d.height, d.width);
        for (std::size_t i = 0; i < img.size(); ++i) img.pixels[i] = std::clamp(recon.at(r, i), 0.0, 1.0);
        s[r] = perceptual_score(*images[r], img, proj);
    }
    return s;
}

}  // namespace detail

/// Stage 1. Returns a bundle holding only the encoder and decoder.
inline CodecBundle stage1_train_backbone(const RunConfig& cfg, const DatasetSplit& train, StageLog* log_out = nullptr) {
    StageLog log;
    log.stage = 1;
    CodecBundle full = make_codec(cfg.dims(), cfg.train.seed);
    CodecBundle b;
    b.dims = full.dims;
    b.encoder = full.encoder;
    b.joint_decoder = full.joint_decoder;
    std::vector<Var> params = b.encoder.parameters();
    for (auto& p : b.joint_decoder.parameters()) params.push_back(p);
    ad::AdamState opt = ad::make_adam(params, cfg.train.lr);
    Rng rng = make_stream(cfg.train.seed, {1});
    StageSampler sampler(cfg.channel.snr_db_grid, cfg.train.r_min, cfg.train.r_max);
    std::vector<double> snr, ratio;
    detail::run_epochs(1, cfg.train.stage1_epochs, train.images.size(), cfg.train.batch, rng, log,
                       [&](std::span<const std::size_t> idx) {
                           const auto imgs = detail::gather_images(train, idx);
                           sampler.draw(idx.size(), rng, snr, ratio);
                           std::vector<std::size_t> active;
                           mask_rows(b.K(), ratio, &active);
                           const RoundNoise noise = draw_training_noise(cfg.channel.kind, snr, active, b.K(), b.k(), rng);
                           Var pixels = ad::constant(image_rows(imgs));
                           const Round1Graph g = round1_graph(b, pixels, ratio, snr, noise, nullptr, false);
                           Var loss = detail::mse_graph(g.recon, pixels);
                           detail::sgd_step(params, opt, loss);
                           return loss.item();
                       });
    log.snr_counts = sampler.counts();
    if (log_out) *log_out = std::move(log);
    return b;
}

/// Stage 2. Adds the check encoder and estimator; the encoder stays bit-identical.
inline CodecBundle stage2_train_check(const RunConfig& cfg, const CodecBundle& base, const DatasetSplit& train,
                                      const PerceptualProjector& proj, StageLog* log_out = nullptr) {
    StageLog log;
    log.stage = 2;
    const CodecBundle fresh = make_codec(cfg.dims(), cfg.train.seed);
    CodecBundle b;
    b.dims = base.dims;
    b.encoder = base.encoder.clone();
    b.joint_decoder = base.joint_decoder.clone();
    b.check_encoder = fresh.check_encoder.clone();
    b.estimator = fresh.estimator.clone();
    b.encoder.set_trainable(false);
    log.frozen_hash_before = mlp_hash({&b.encoder});

    std::vector<Var> params;
    for (const Mlp* m : {&b.check_encoder, &b.joint_decoder, &b.estimator}) {
        m->set_trainable(true);
        for (auto& p : m->parameters()) params.push_back(p);
    }
    ad::AdamState opt = ad::make_adam(params, cfg.train.stage2_lr);
    Rng rng = make_stream(cfg.train.seed, {2});
    StageSampler sampler(cfg.channel.snr_db_grid, cfg.train.r_min, cfg.train.r_max);
    std::vector<double> snr, ratio;
    detail::run_epochs(2, cfg.train.stage2_epochs, train.images.size(), cfg.train.batch, rng, log,
                       [&](std::span<const std::size_t> idx) {
                           const auto imgs = detail::gather_images(train, idx);
                           sampler.draw(idx.size(), rng, snr, ratio);
                           std::vector<std::size_t> active;
                           mask_rows(b.K(), ratio, &active);
                           const RoundNoise noise = draw_training_noise(cfg.channel.kind, snr, active, b.K(), b.k(), rng);
                           const Tensor eps = standard_normal_matrix(idx.size(), b.k(), rng);
                           Var pixels = ad::constant(image_rows(imgs));
                           const Round1Graph g = round1_graph(b, pixels, ratio, snr, noise, &eps, true);
                           const auto truth = detail::scores_of(b.dims, imgs, g.recon.value(), proj);
                           Var loss = ib_loss_graph(pixels, g.recon, ad::constant(column(truth)), g.estimate, g.mu,
                                                    g.sigma, cfg.codec.gamma, cfg.codec.estimate_weight);
                           detail::sgd_step(params, opt, loss);
                           return loss.item();
                       });
    log.snr_counts = sampler.counts();
    log.frozen_hash_after = mlp_hash({&b.encoder});
    if (log.frozen_hash_after != log.frozen_hash_before) throw TrainingError("stage 2 modified the frozen encoder");
    if (log_out) *log_out = std::move(log);
    return b;
}

/// Stage 3. Trains the retransmission bundle; every sample is forced through retransmission
/// with R2 = R.
inline RetxBundle stage3_train_retx(const RunConfig& cfg, const CodecBundle& base, const DatasetSplit& train,
                                    const PerceptualProjector& proj, StageLog* log_out = nullptr) {
    StageLog log;
    log.stage = 3;
    for (const Mlp* m : {&base.encoder, &base.check_encoder, &base.joint_decoder, &base.estimator})
        m->set_trainable(false);
    log.frozen_hash_before = checkpoint_hash(export_codec(base));
    RetxBundle r = make_retx(cfg.dims(), cfg.train.seed);
    const std::vector<Var> params = r.parameters();
    ad::AdamState opt = ad::make_adam(params, cfg.train.stage3_lr);
    Rng rng = make_stream(cfg.train.seed, {3});
    StageSampler sampler(cfg.channel.snr_db_grid, cfg.train.r_min, cfg.train.r_max);
    std::vector<double> snr, ratio;
    const std::size_t K = base.K(), k = base.k();
    detail::run_epochs(3, cfg.train.stage3_epochs, train.images.size(), cfg.train.batch, rng, log,
                       [&](std::span<const std::size_t> idx) {
                           const auto imgs = detail::gather_images(train, idx);
                           sampler.draw(idx.size(), rng, snr, ratio);
                           std::vector<std::size_t> active;
                           mask_rows(K, ratio, &active);
                           const RoundNoise n1 = draw_training_noise(cfg.channel.kind, snr, active, K, k, rng);
                           const RoundNoise n2 = draw_training_noise(cfg.channel.kind, snr, active, K, k, rng);
                           const Tensor eps = standard_normal_matrix(idx.size(), k, rng);
                           Var pixels = ad::constant(image_rows(imgs));
                           Round1Graph g1;
                           {
                               ad::NoGradGuard guard;
                               g1 = round1_graph(base, pixels, ratio, snr, n1, nullptr, true);
                           }
                           const Round2Graph g2 = round2_graph(r, k, g1.x, g1.z_rx, g1.check_rx, g1.estimate, ratio,
                                                               snr, n2, &eps);
                           const auto truth = detail::scores_of(base.dims, imgs, g2.recon.value(), proj);
                           Var loss = ib_loss_graph(pixels, g2.recon, ad::constant(column(truth)), g2.estimate, g2.mu,
                                                    g2.sigma, cfg.codec.gamma, cfg.codec.estimate_weight);
                           detail::sgd_step(params, opt, loss);
                           return loss.item();
                       });
    log.snr_counts = sampler.counts();
    log.frozen_hash_after = checkpoint_hash(export_codec(base));
    if (log.frozen_hash_after != log.frozen_hash_before) throw TrainingError("stage 3 modified the frozen base system");
    if (log_out) *log_out = std::move(log);
    return r;
}

// ---------------------------------------------------------------------------------------------
// Stage 4

/// Value at sorted-ascending index ceil(q*N) - 1: a fraction q of the values lie at or below it.
inline double upper_quantile(std::vector<double> values, double q) {
    if (values.empty()) throw UsageError("upper_quantile: empty list");
    std::sort(values.begin(), values.end());
    const double pos = std::ceil(q * static_cast<double>(values.size()) - 1e-9);
    const auto idx = static_cast<std::size_t>(std::clamp(pos - 1.0, 0.0, static_cast<double>(values.size() - 1)));
    return values[idx];
}

/// Round-1 ground-truth scores of every agent-training image at every grid SNR (ratio `R`),
/// reduced to their `quantile` upper quantile.
inline double retransmission_threshold(const System& sys, const DatasetSplit& split, const std::vector<double>& grid,
                                       double R, double quantile, std::uint64_t seed) {
    std::vector<double> scores;
    std::vector<const Image*> imgs;
    std::vector<std::uint64_t> ids;
    for (std::size_t i = 0; i < split.images.size(); ++i) {
        imgs.push_back(&split.images[i]);
        ids.push_back(i);
    }
    for (double snr : grid) {
        auto recs = run_transmission_batch(sys, imgs, ids, snr, R, R, never_retransmit, seed);
        for (const auto& rec : recs) scores.push_back(rec.round1.score);
    }
    return upper_quantile(std::move(scores), quantile);
}

struct CurveRow {
    std::string epoch;  // "random" for the uniform-random baseline row
    double mean_reward = 0.0;
    double retx_ratio = 0.0;
    double outage = 0.0;
};

struct AgentTraining {
    ActorCritic ac;
    double threshold = 0.0;
    std::vector<CurveRow> curve;
    CurveRow random_baseline;
};

/// One rollout over the split: SNR uniform over the grid per sample, ratio R, actions from `choose`.
inline CurveRow collect_rollout(const System& sys, const DatasetSplit& split, const std::vector<double>& grid, double R,
                                std::uint64_t seed, std::uint64_t epoch,
                                const std::function<std::vector<ActResult>(std::span<const AgentState>)>& choose,
                                RolloutBuffer* buffer) {
    const std::size_t N = split.images.size();
    Rng pick_rng = make_stream(seed, {0x5A3, epoch});
    std::uniform_int_distribution<std::size_t> pick(0, grid.size() - 1);
    std::vector<const Image*> imgs;
    std::vector<std::uint64_t> ids;
    std::vector<double> snr, ratio(N, R);
    std::vector<Rng> rngs;
    for (std::size_t i = 0; i < N; ++i) {
        imgs.push_back(&split.images[i]);
        ids.push_back(i);
        snr.push_back(grid[pick(pick_rng)]);
        rngs.push_back(make_stream(seed, {epoch, i}));
    }
    Round1Result r1 = initial_round_batch(sys, imgs, ids, ratio, snr, rngs);
    std::vector<AgentState> states;
    states.reserve(N);
    for (const auto& rec : r1.records) states.push_back(build_state(rec, sys.threshold));
    const std::vector<ActResult> acts = choose(states);
    std::vector<std::size_t> nak;
    for (std::size_t i = 0; i < N; ++i) {
        r1.records[i].action = acts[i].action;
        r1.records[i].nak_sent = acts[i].action == 1;
        if (acts[i].action == 1) nak.push_back(i);
    }
    retransmission_batch(sys, imgs, r1.records, r1.retained, nak, ratio, rngs);
    CurveRow row;
    for (std::size_t i = 0; i < N; ++i) {
        const auto& rec = r1.records[i];
        const double rw = reward(rec.round1.score, rec.round2 ? std::optional<double>(rec.round2->score) : std::nullopt,
                                 rec.action, sys.threshold);
        row.mean_reward += rw;
        row.retx_ratio += rec.action;
        row.outage += rec.final_score > sys.threshold ? 1.0 : 0.0;
        if (buffer) buffer->push(states[i], acts[i].action, acts[i].log_prob, rw, acts[i].value, 1);
    }
    const double n = static_cast<double>(N);
    row.mean_reward /= n;
    row.retx_ratio /= n;
    row.outage /= n;
    return row;
}

/// Stage 4. `sys` must hold the trained codec and retransmission bundle.
inline AgentTraining stage4_train_agent(const RunConfig& cfg, System sys, const DatasetSplit& agent_split) {
    const auto& a = cfg.agent;
    const auto& grid = cfg.channel.snr_db_grid;
    const std::uint64_t base_hash = checkpoint_hash(export_codec(sys.codec)) ^ checkpoint_hash(export_retx(sys.retx, sys.codec.dims));
    sys.threshold = retransmission_threshold(sys, agent_split, grid, cfg.eval.R, a.threshold_quantile, a.seed);
    AgentTraining out;
    out.threshold = sys.threshold;
    out.ac = make_actor_critic(sys.codec.k(), sys.threshold, a.seed, a.width);
    const auto params = out.ac.parameters();
    ad::AdamState opt = ad::make_adam(params, a.lr);
    Rng rng = make_stream(a.seed, {4});

    Rng random_rng = make_stream(a.seed, {0xBA5E});
    out.random_baseline = collect_rollout(
        sys, agent_split, grid, cfg.eval.R, a.seed, 1'000'000,
        [&](std::span<const AgentState> states) {
            std::vector<ActResult> r(states.size());
            for (auto& x : r) {
                x.action = uniform(random_rng, 0.0, 1.0) < 0.5 ? 1 : 0;
                x.log_prob = std::log(0.5);
            }
            return r;
        },
        nullptr);
    out.random_baseline.epoch = "random";

    PpoConfig ppo{a.clip_eps, a.ppo_epochs, a.minibatch, a.entropy_coef, a.gamma, a.lambda};
    for (std::size_t e = 0; e < a.epochs; ++e) {
        RolloutBuffer buf;
        buf.capacity = agent_split.images.size();
        CurveRow row = collect_rollout(
            sys, agent_split, grid, cfg.eval.R, a.seed, e,
            [&](std::span<const AgentState> states) { return act_batch(out.ac, states, ActMode::sample, &rng); }, &buf);
        ppo.entropy_coef = a.entropy_coef * (1.0 - static_cast<double>(e) / static_cast<double>(a.epochs));
        ppo_update(out.ac, buf, ppo, opt, rng);
        row.epoch = std::to_string(e + 1);
        out.curve.push_back(row);
    }
    const std::uint64_t after = checkpoint_hash(export_codec(sys.codec)) ^ checkpoint_hash(export_retx(sys.retx, sys.codec.dims));
    if (after != base_hash) throw TrainingError("stage 4 modified the frozen link");
    return out;
}

inline void write_curve_csv(const std::string& path, const AgentTraining& t) {
    std::ofstream os(path);
    if (!os) throw ConfigError("cannot write " + path);
    os << "epoch,mean_reward,retx_ratio,outage\n";
    auto line = [&os](const CurveRow& r) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "%s,%.17g,%.17g,%.17g\n", r.epoch.c_str(), r.mean_reward, r.retx_ratio, r.outage);
        os << buf;
    };
    line(t.random_baseline);
    for (const auto& r : t.curve) line(r);
}

}  // namespace s3charq
