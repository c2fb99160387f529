#pragma once

// Transmission state machine: initial round, decision, optional NAK-triggered
// recovery-refinement retransmission, and joint final decoding over all four codewords.
// At most one retransmission per sample; both rounds use the same SNR.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "s3charq/autodiff.hpp"
#include "s3charq/channel.hpp"
#include "s3charq/checkpoint.hpp"
#include "s3charq/codec.hpp"
#include "s3charq/errors.hpp"
#include "s3charq/frame.hpp"
#include "s3charq/reward.hpp"
#include "s3charq/rng.hpp"
#include "s3charq/source_data.hpp"

namespace s3charq {

struct RetxBundle {
    Mlp second_encoder;        // enc2. [x, R2, snr] -> x2
    Mlp entropy_optimizer;     // eo.   [x2, x] -> x_sec
    Mlp second_check_encoder;  // chk2. [x, x_sec, R2, snr, estimate] -> (mu2, raw sigma2)
    Mlp second_joint_decoder;  // dec2. [z, x_com, z_sec, x_com2, snr] -> pixels
    Mlp second_estimator;      // est2. [z, x_com, z_sec, x_com2, snr, R2] -> score

    bool empty() const { return second_joint_decoder.empty(); }

    std::vector<Var> parameters() const {
        std::vector<Var> out;
        for (const Mlp* m : {&second_encoder, &entropy_optimizer, &second_check_encoder, &second_joint_decoder,
                             &second_estimator}) {
            auto p = m->parameters();
            out.insert(out.end(), p.begin(), p.end());
        }
        return out;
    }
};

inline RetxBundle make_retx(const CodecDims& d, std::uint64_t seed) {
    Rng rng = make_stream(seed, {0x2E7});
    const std::size_t n = d.pixels();
    const std::size_t K = d.feature_len;
    const std::size_t k = d.check_len;
    const std::size_t H = d.hidden;
    RetxBundle r;
    r.second_encoder = Mlp("enc2", {K + 2, H, H, K}, Activation::relu, Activation::identity, rng);
    r.entropy_optimizer = Mlp("eo", {2 * K, H, H, K}, Activation::relu, Activation::identity, rng);
    r.second_check_encoder = Mlp("chk2", {2 * K + 3, H, H, 2 * k}, Activation::relu, Activation::identity, rng);
    r.second_joint_decoder = Mlp("dec2", {2 * K + 2 * k + 1, H, H, n}, Activation::relu, Activation::sigmoid, rng);
    r.second_estimator = Mlp("est2", {2 * K + 2 * k + 2, H, H / 2, 1}, Activation::relu, Activation::sigmoid, rng);
    return r;
}

inline std::vector<ad::NamedTensor> export_retx(const RetxBundle& r, const CodecDims& d) {
    std::vector<ad::NamedTensor> out;
    out.push_back({"meta.dims", dims_tensor(d)});
    for (const Mlp* m : {&r.second_encoder, &r.entropy_optimizer, &r.second_check_encoder, &r.second_joint_decoder,
                         &r.second_estimator})
        ad::append_mlp(out, *m);
    return out;
}

inline RetxBundle import_retx(const std::vector<ad::NamedTensor>& tensors, const CodecDims& expected,
                              const std::string& source = "checkpoint") {
    const auto idx = ad::index_tensors(tensors);
    require_matching_dims(expected, dims_from_tensor(ad::require_tensor(idx, "meta.dims")), source);
    return {ad::extract_mlp(idx, "enc2"), ad::extract_mlp(idx, "eo"), ad::extract_mlp(idx, "chk2"),
            ad::extract_mlp(idx, "dec2"), ad::extract_mlp(idx, "est2")};
}

// ---------------------------------------------------------------------------------------------
// Channel noise for a batch, drawn before the forward pass (the equalized noise does not depend
// on the transmitted symbols). Per sample the stream order is: jscc gain, jscc noise, check gain,
// check noise.

struct RoundNoise {
    Tensor jscc;   // B x K, zero beyond each row's active count
    Tensor check;  // B x k
    std::vector<double> gain_jscc;
    std::vector<double> gain_check;
};

inline RoundNoise draw_round_noise(ChannelKind kind, std::span<const double> snr_db,
                                   std::span<const std::size_t> active, std::size_t K, std::size_t k,
                                   std::span<Rng> rngs) {
    const std::size_t B = snr_db.size();
    RoundNoise n{Tensor::matrix(B, K), Tensor::matrix(B, k), std::vector<double>(B), std::vector<double>(B)};
    for (std::size_t r = 0; r < B; ++r) {
        const auto chz = draw_realization(kind, snr_db[r], rngs[r]);
        const auto nz = equalized_noise(chz, active[r], K, rngs[r]);
        const auto chc = draw_realization(kind, snr_db[r], rngs[r]);
        const auto nc = equalized_noise(chc, k, k, rngs[r]);
        std::copy(nz.begin(), nz.end(), n.jscc.data.begin() + static_cast<std::ptrdiff_t>(r * K));
        std::copy(nc.begin(), nc.end(), n.check.data.begin() + static_cast<std::ptrdiff_t>(r * k));
        n.gain_jscc[r] = chz.gain;
        n.gain_check[r] = chc.gain;
    }
    return n;
}

/// Noise-free channel (used for channel-free reference passes).
inline RoundNoise silent_noise(std::size_t B, std::size_t K, std::size_t k) {
    return {Tensor::matrix(B, K), Tensor::matrix(B, k), std::vector<double>(B, 1.0), std::vector<double>(B, 1.0)};
}

struct Round1Graph {
    Var x;           // semantic features (retained at the transmitter)
    Var z_sent;      // masked, power-normalized
    Var z_rx;        // equalized received
    Var mu, sigma;   // check distribution (empty when the check path is off)
    Var check_sent;  // power-normalized check sample
    Var check_rx;    // zeros when the check path is off
    Var recon;
    Var estimate;    // empty without an estimator
    std::vector<std::size_t> active;
};

/// `eps` (B x k) selects training-mode reparameterization; null means eps = 0.
/// With `use_check` false the decoder's check slot is fed zeros.
inline Round1Graph round1_graph(const CodecBundle& b, const Var& pixels, std::span<const double> ratios,
                                std::span<const double> snr_db, const RoundNoise& noise, const Tensor* eps,
                                bool use_check = true) {
    Round1Graph g;
    const std::size_t B = pixels.rows();
    g.x = encode_graph(b, pixels, ratios, snr_db);
    Var z = ad::mul(g.x, ad::constant(mask_rows(b.K(), ratios, &g.active)));
    g.z_sent = ad::normalize_rows(z, g.active);
    g.z_rx = ad::add(g.z_sent, ad::constant(noise.jscc));
    use_check = use_check && !b.check_encoder.empty();
    if (use_check) {
        std::tie(g.mu, g.sigma) = check_graph(b, g.x, ratios, snr_db);
        Var sample = eps ? ad::add(g.mu, ad::mul(g.sigma, ad::constant(*eps))) : g.mu;
        g.check_sent = ad::normalize_rows(sample, std::vector<std::size_t>(B, b.k()));
        g.check_rx = ad::add(g.check_sent, ad::constant(noise.check));
    } else {
        g.check_rx = ad::constant(Tensor::matrix(B, b.k()));
    }
    g.recon = decode_graph(b, g.z_rx, g.check_rx, snr_db);
    if (use_check && !b.estimator.empty()) g.estimate = estimate_graph(b, g.z_rx, g.check_rx, snr_db, ratios);
    return g;
}

struct Round2Graph {
    Var x2, x_sec;
    Var z_sent, z_rx;
    Var mu, sigma;
    Var check_sent, check_rx;
    Var recon;
    Var estimate;
    std::vector<std::size_t> active;
};

/// Round-1 inputs are the transmitter's retained features and estimate feedback, and the
/// receiver's retained (equalized) round-1 codewords.
inline Round2Graph round2_graph(const RetxBundle& r, std::size_t k, const Var& x, const Var& z_rx, const Var& check_rx,
                                const Var& estimate1, std::span<const double> ratios2, std::span<const double> snr_db,
                                const RoundNoise& noise, const Tensor* eps) {
    Round2Graph g;
    const std::size_t B = x.rows();
    const std::size_t K = x.cols();
    Var snr = ad::constant(column(snr_db, 1.0 / kSnrScale));
    Var r2 = ad::constant(column(ratios2));
    g.x2 = r.second_encoder.forward(ad::concat_cols({x, r2, snr}));
    g.x_sec = r.entropy_optimizer.forward(ad::concat_cols({g.x2, x}));
    Var z = ad::mul(g.x_sec, ad::constant(mask_rows(K, ratios2, &g.active)));
    g.z_sent = ad::normalize_rows(z, g.active);
    g.z_rx = ad::add(g.z_sent, ad::constant(noise.jscc));
    std::tie(g.mu, g.sigma) =
        gaussian_head(r.second_check_encoder.forward(ad::concat_cols({x, g.x_sec, r2, snr, estimate1})), k);
    Var sample = eps ? ad::add(g.mu, ad::mul(g.sigma, ad::constant(*eps))) : g.mu;
    g.check_sent = ad::normalize_rows(sample, std::vector<std::size_t>(B, k));
    g.check_rx = ad::add(g.check_sent, ad::constant(noise.check));
    Var joint = ad::concat_cols({z_rx, check_rx, g.z_rx, g.check_rx, snr});
    g.recon = r.second_joint_decoder.forward(joint);
    g.estimate = r.second_estimator.forward(ad::concat_cols({z_rx, check_rx, g.z_rx, g.check_rx, snr, r2}));
    return g;
}

// ---------------------------------------------------------------------------------------------
// Records

struct RoundTrace {
    std::size_t active = 0;
    std::vector<double> jscc_sent, jscc_rx;
    std::vector<double> check_sent, check_rx;
    double scale_jscc = 1.0, scale_check = 1.0;
    double gain_jscc = 1.0, gain_check = 1.0;
    Image reconstruction;
    double score = 0.0;
    double psnr = 0.0;
    double estimate = 0.0;
};

struct TransmissionRecord {
    std::uint64_t sample_id = 0;
    double snr_db = 0.0;
    double R = 1.0;
    double R2 = 1.0;
    std::size_t check_len = 0;
    RoundTrace round1;
    int action = 0;
    bool nak_sent = false;
    std::optional<RoundTrace> round2;
    std::optional<double> reward;
    double final_psnr = 0.0;
    double final_score = 0.0;
    std::size_t symbols_sent = 0;
    std::vector<Frame> frames;
};

/// Throws if the record breaks its structural invariants.
inline void validate_record(const TransmissionRecord& rec) {
    if (rec.action != 0 && rec.action != 1) throw ProtocolError("action must be 0 or 1");
    if (rec.round2.has_value() != (rec.action == 1)) throw ProtocolError("round-2 fields present iff action = 1");
    std::size_t expected = rec.round1.active + rec.check_len;
    if (rec.round2) expected += rec.round2->active + rec.check_len;
    if (rec.symbols_sent != expected)
        throw ProtocolError("symbols_sent " + std::to_string(rec.symbols_sent) + " != " + std::to_string(expected));
    if (rec.nak_sent != (rec.action == 1)) throw ProtocolError("NAK must accompany a retransmission");
}

// ---------------------------------------------------------------------------------------------
// System and decisions

struct System {
    CodecBundle codec;
    RetxBundle retx;
    ChannelKind channel = ChannelKind::awgn;
    PerceptualProjector projector{0, 1, 1};
    double threshold = -1.0;  // negative: no reward is attached to records
};

/// Decides accept (0) or NAK (1) from the round-1 part of a record.
using DecisionRule = std::function<int(const TransmissionRecord&)>;

inline int never_retransmit(const TransmissionRecord&) { return 0; }
inline int always_retransmit(const TransmissionRecord&) { return 1; }

namespace detail {

inline std::vector<double> row_vec(const Var& v, std::size_t r) { return row_of(v.value(), r); }

inline Image image_from_row(const CodecDims& d, const Var& v, std::size_t r) {
    Image img(d.channels, d.height, d.width);
    const auto row = row_of(v.value(), r);
    for (std::size_t i = 0; i < img.size(); ++i) img.pixels[i] = std::clamp(row[i], 0.0, 1.0);
    return img;
}

inline double rms_of(const std::vector<double>& v, std::size_t active) {
    double s = 0.0;
    for (std::size_t i = 0; i < active; ++i) s += v[i] * v[i];
    return std::sqrt(s / static_cast<double>(active));
}

inline Frame make_frame(std::uint8_t round, FrameRole role, double R, double snr, const std::vector<double>& sent,
                        std::size_t active) {
    Frame f{round, role, static_cast<float>(R), static_cast<float>(snr), {}};
    f.payload.reserve(active);
    for (std::size_t i = 0; i < active; ++i) f.payload.push_back(static_cast<float>(sent[i]));
    return f;
}

}  // namespace detail

/// Receiver- and transmitter-side state retained between rounds, as batched tensors.
struct RetainedBatch {
    Tensor x;         // transmitter: semantic features
    Tensor estimate;  // transmitter: fed-back estimate (B x 1)
    Tensor z_rx;      // receiver: equalized round-1 codeword
    Tensor check_rx;  // receiver: equalized round-1 check codeword
};

struct Round1Result {
    std::vector<TransmissionRecord> records;
    RetainedBatch retained;
};

/// Initial round for a batch; rngs[r] is sample r's channel stream.
inline Round1Result initial_round_batch(const System& sys, std::span<const Image* const> images,
                                        std::span<const std::uint64_t> ids, std::span<const double> ratios,
                                        std::span<const double> snr_db, std::span<Rng> rngs) {
    const CodecBundle& b = sys.codec;
    if (b.check_encoder.empty() || b.estimator.empty())
        throw UsageError("initial_round: codec bundle lacks a check encoder or estimator");
    const std::size_t B = images.size();
    std::vector<std::size_t> active;
    mask_rows(b.K(), ratios, &active);
    const RoundNoise noise = draw_round_noise(sys.channel, snr_db, active, b.K(), b.k(), rngs);

    ad::NoGradGuard guard;
    const Round1Graph g = round1_graph(b, ad::constant(image_rows(images)), ratios, snr_db, noise, nullptr);

    Round1Result out;
    out.retained = {g.x.value(), g.estimate.value(), g.z_rx.value(), g.check_rx.value()};
    out.records.resize(B);
    for (std::size_t r = 0; r < B; ++r) {
        auto& rec = out.records[r];
        rec.sample_id = ids[r];
        rec.snr_db = snr_db[r];
        rec.R = ratios[r];
        rec.R2 = ratios[r];
        rec.check_len = b.k();
        RoundTrace& t = rec.round1;
        t.active = g.active[r];
        t.jscc_sent = detail::row_vec(g.z_sent, r);
        t.jscc_rx = detail::row_vec(g.z_rx, r);
        t.check_sent = detail::row_vec(g.check_sent, r);
        t.check_rx = detail::row_vec(g.check_rx, r);
        const auto masked = detail::row_vec(g.x, r);
        t.scale_jscc = detail::rms_of(masked, t.active);
        t.scale_check = detail::rms_of(detail::row_vec(g.mu, r), b.k());
        t.gain_jscc = noise.gain_jscc[r];
        t.gain_check = noise.gain_check[r];
        t.reconstruction = detail::image_from_row(b.dims, g.recon, r);
        t.score = perceptual_score(*images[r], t.reconstruction, sys.projector);
        t.psnr = psnr(*images[r], t.reconstruction);
        t.estimate = g.estimate.value().data[r];
        rec.final_psnr = t.psnr;
        rec.final_score = t.score;
        rec.symbols_sent = t.active + b.k();
        rec.frames.push_back(detail::make_frame(1, FrameRole::jscc, rec.R, rec.snr_db, t.jscc_sent, t.active));
        rec.frames.push_back(detail::make_frame(1, FrameRole::check, rec.R, rec.snr_db, t.check_sent, b.k()));
    }
    return out;
}

/// Retransmission for the rows of `records` listed in `rows`; completes those records.
inline void retransmission_batch(const System& sys, std::span<const Image* const> images,
                                 std::span<TransmissionRecord> records, const RetainedBatch& retained,
                                 std::span<const std::size_t> rows, std::span<const double> ratios2,
                                 std::span<Rng> rngs) {
    if (rows.empty()) return;
    if (sys.retx.empty()) throw UsageError("retransmission: no retransmission bundle loaded");
    const CodecBundle& b = sys.codec;
    const std::size_t K = b.K();
    const std::size_t k = b.k();
    if (retained.x.rows() != records.size() || retained.x.cols() != K)
        throw ProtocolError("retransmission requested without retained transmitter features");
    const std::size_t B = rows.size();
    auto gather = [&](const Tensor& t) {
        Tensor out = Tensor::matrix(B, t.cols());
        for (std::size_t i = 0; i < B; ++i)
            std::copy_n(t.data.begin() + static_cast<std::ptrdiff_t>(rows[i] * t.cols()), t.cols(),
                        out.data.begin() + static_cast<std::ptrdiff_t>(i * t.cols()));
        return out;
    };
    std::vector<double> snr(B), r2(B);
    std::vector<Rng> sub_rngs;
    std::vector<std::size_t> active2;
    for (std::size_t i = 0; i < B; ++i) {
        snr[i] = records[rows[i]].snr_db;
        r2[i] = ratios2[rows[i]];
    }
    mask_rows(K, r2, &active2);
    for (std::size_t i = 0; i < B; ++i) sub_rngs.push_back(rngs[rows[i]]);
    const RoundNoise noise = draw_round_noise(sys.channel, snr, active2, K, k, sub_rngs);
    for (std::size_t i = 0; i < B; ++i) rngs[rows[i]] = sub_rngs[i];

    ad::NoGradGuard guard;
    const Round2Graph g =
        round2_graph(sys.retx, k, ad::constant(gather(retained.x)), ad::constant(gather(retained.z_rx)),
                     ad::constant(gather(retained.check_rx)), ad::constant(gather(retained.estimate)), r2, snr, noise,
                     nullptr);
    for (std::size_t i = 0; i < B; ++i) {
        auto& rec = records[rows[i]];
        RoundTrace t;
        t.active = g.active[i];
        t.jscc_sent = detail::row_vec(g.z_sent, i);
        t.jscc_rx = detail::row_vec(g.z_rx, i);
        t.check_sent = detail::row_vec(g.check_sent, i);
        t.check_rx = detail::row_vec(g.check_rx, i);
        t.scale_jscc = detail::rms_of(detail::row_vec(g.x_sec, i), t.active);
        t.scale_check = detail::rms_of(detail::row_vec(g.mu, i), k);
        t.gain_jscc = noise.gain_jscc[i];
        t.gain_check = noise.gain_check[i];
        t.reconstruction = detail::image_from_row(b.dims, g.recon, i);
        t.score = perceptual_score(*images[rows[i]], t.reconstruction, sys.projector);
        t.psnr = psnr(*images[rows[i]], t.reconstruction);
        t.estimate = g.estimate.value().data[i];
        rec.R2 = r2[i];
        rec.final_psnr = t.psnr;
        rec.final_score = t.score;
        rec.symbols_sent += t.active + k;
        rec.frames.push_back(detail::make_frame(2, FrameRole::jscc, rec.R2, rec.snr_db, t.jscc_sent, t.active));
        rec.frames.push_back(detail::make_frame(2, FrameRole::check, rec.R2, rec.snr_db, t.check_sent, k));
        rec.round2 = std::move(t);
    }
}

/// Full state machine for a batch sharing one SNR and ratio pair. Sample r's channel stream is
/// make_stream(seed, {ids[r], bits(snr_db)}), so results do not depend on batch composition
/// beyond floating-point summation order.
inline std::vector<TransmissionRecord> run_transmission_batch(const System& sys, std::span<const Image* const> images,
                                                              std::span<const std::uint64_t> ids, double snr_db,
                                                              double R, double R2, const DecisionRule& decide,
                                                              std::uint64_t seed) {
    const std::size_t B = images.size();
    std::vector<Rng> rngs;
    rngs.reserve(B);
    for (std::size_t r = 0; r < B; ++r) rngs.push_back(make_stream(seed, {ids[r], std::bit_cast<std::uint64_t>(snr_db)}));
    const std::vector<double> snr(B, snr_db), ratios(B, R), ratios2(B, R2);
    Round1Result r1 = initial_round_batch(sys, images, ids, ratios, snr, rngs);
    std::vector<std::size_t> nak_rows;
    for (std::size_t r = 0; r < B; ++r) {
        auto& rec = r1.records[r];
        rec.R2 = R2;
        rec.action = decide(rec);
        if (rec.action != 0 && rec.action != 1) throw ProtocolError("decision rule returned an invalid action");
        rec.nak_sent = rec.action == 1;
        if (rec.nak_sent) nak_rows.push_back(r);
    }
    retransmission_batch(sys, images, r1.records, r1.retained, nak_rows, ratios2, rngs);
    if (sys.threshold >= 0.0) {
        for (auto& rec : r1.records) {
            rec.reward = reward(rec.round1.score, rec.round2 ? std::optional<double>(rec.round2->score) : std::nullopt,
                                rec.action, sys.threshold);
        }
    }
    return std::move(r1.records);
}

inline TransmissionRecord run_transmission(const System& sys, const Image& p, std::uint64_t sample_id, double snr_db,
                                           double R, double R2, const DecisionRule& decide, std::uint64_t seed) {
    const Image* ptr = &p;
    auto recs = run_transmission_batch(sys, std::span(&ptr, 1), std::span(&sample_id, 1), snr_db, R, R2, decide, seed);
    return std::move(recs.front());
}

// Single-sample round functions, for callers that drive the protocol step by step.

struct InitialRound {
    std::vector<double> z_rx;
    std::vector<double> check_rx;
    Image reconstruction;
    QualityEstimate estimate;
    TransmissionRecord record;
    SemanticFeature retained_x;  // kept by the transmitter for a possible retransmission
};

inline InitialRound initial_round(const System& sys, const Image& p, double R, double snr_db, Rng& rng,
                                  std::uint64_t sample_id = 0) {
    const Image* ptr = &p;
    const double r[1] = {R};
    const double s[1] = {snr_db};
    Round1Result res = initial_round_batch(sys, std::span(&ptr, 1), std::span(&sample_id, 1), r, s, std::span(&rng, 1));
    auto& rec = res.records.front();
    return {rec.round1.jscc_rx, rec.round1.check_rx, rec.round1.reconstruction, {rec.round1.estimate}, rec,
            {res.retained.x.data}};
}

/// Completes `round.record` with a retransmission. Requires the transmitter's retained features.
inline Image retransmission_round(const System& sys, const Image& p, InitialRound& round, double R2, double snr_db,
                                  Rng& rng) {
    if (round.retained_x.values.size() != sys.codec.K())
        throw ProtocolError("retransmission requested but the transmitter holds no retained features");
    if (snr_db != round.record.snr_db) throw ProtocolError("SNR must stay constant across rounds");
    RetainedBatch retained{Tensor::row(round.retained_x.values), Tensor::row({round.estimate.value}),
                           Tensor::row(round.z_rx), Tensor::row(round.check_rx)};
    const Image* ptr = &p;
    const std::size_t row0[1] = {0};
    const double r2[1] = {R2};
    round.record.action = 1;
    round.record.nak_sent = true;
    retransmission_batch(sys, std::span(&ptr, 1), std::span(&round.record, 1), retained, row0, r2, std::span(&rng, 1));
    return round.record.round2->reconstruction;
}

}  // namespace s3charq
