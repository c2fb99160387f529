#include <gtest/gtest.h>

#include <cmath>

#include "s3charq/harq.hpp"
#include "s3charq/reward.hpp"

using namespace s3charq;
using ad::Tensor;

namespace {

CodecDims small_dims() {
    CodecDims d;
    d.height = 4;
    d.width = 4;
    d.feature_len = 8;
    d.check_len = 3;
    d.hidden = 16;
    return d;
}

System small_system(ChannelKind kind = ChannelKind::awgn) {
    const auto d = small_dims();
    System s;
    s.codec = make_codec(d, 1);
    s.retx = make_retx(d, 1);
    s.channel = kind;
    s.projector = PerceptualProjector(1, 16, d.pixels());
    s.threshold = 0.2;
    return s;
}

std::vector<Image> images(std::size_t n) {
    std::vector<Image> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(generate_image(9, i, 1, 4, 4));
    return out;
}

std::vector<const Image*> ptrs(const std::vector<Image>& v) {
    std::vector<const Image*> out;
    for (const auto& i : v) out.push_back(&i);
    return out;
}

std::vector<std::uint64_t> ids(std::size_t n) {
    std::vector<std::uint64_t> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = i;
    return out;
}

}  // namespace

TEST(Harq, NeverRetransmitAccounting) {
    const System sys = small_system();
    const auto imgs = images(6);
    const auto p = ptrs(imgs);
    const auto id = ids(6);
    const auto recs = run_transmission_batch(sys, p, id, 3.0, 0.5, 0.5, never_retransmit, 7);
    for (const auto& r : recs) {
        EXPECT_NO_THROW(validate_record(r));
        EXPECT_FALSE(r.round2.has_value());
        EXPECT_EQ(r.symbols_sent, 4u + 3u);
        EXPECT_EQ(r.final_psnr, r.round1.psnr);
        EXPECT_EQ(r.frames.size(), 2u);
    }
}

TEST(Harq, AlwaysRetransmitAccounting) {
    const System sys = small_system();
    const auto imgs = images(6);
    const auto recs = run_transmission_batch(sys, ptrs(imgs), ids(6), 3.0, 0.5, 0.25, always_retransmit, 7);
    for (const auto& r : recs) {
        EXPECT_NO_THROW(validate_record(r));
        ASSERT_TRUE(r.round2.has_value());
        EXPECT_EQ(r.symbols_sent, 4u + 3u + 2u + 3u);
        EXPECT_EQ(r.final_score, r.round2->score);
        EXPECT_EQ(r.frames.size(), 4u);
        EXPECT_TRUE(r.nak_sent);
        ASSERT_TRUE(r.reward.has_value());
    }
}

TEST(Harq, UnreachableThresholdNeverRetransmits) {
    const System sys = small_system();
    const auto imgs = images(20);
    const DecisionRule rule = [](const TransmissionRecord& r) { return r.round1.score > 1.0 ? 1 : 0; };
    for (double snr : {0.0, 13.0}) {
        for (const auto& r : run_transmission_batch(sys, ptrs(imgs), ids(20), snr, 0.5, 0.5, rule, 3))
            EXPECT_EQ(r.action, 0);
    }
}

TEST(Harq, NeverPolicyMatchesInitialRound) {
    const System sys = small_system(ChannelKind::rayleigh);
    const Image p = generate_image(9, 0, 1, 4, 4);
    const auto rec = run_transmission(sys, p, 5, 2.0, 0.5, 0.5, never_retransmit, 11);
    Rng rng = make_stream(11, {5, std::bit_cast<std::uint64_t>(2.0)});
    const auto r1 = initial_round(sys, p, 0.5, 2.0, rng, 5);
    EXPECT_EQ(rec.round1.jscc_rx, r1.z_rx);
    EXPECT_EQ(rec.round1.check_rx, r1.check_rx);
    EXPECT_EQ(rec.round1.reconstruction, r1.reconstruction);
    EXPECT_EQ(rec.round1.estimate, r1.estimate.value);
}

TEST(Harq, StepwiseRoundsMatchStateMachine) {
    const System sys = small_system(ChannelKind::rayleigh);
    const Image p = generate_image(9, 1, 1, 4, 4);
    const auto rec = run_transmission(sys, p, 8, 4.0, 0.5, 0.5, always_retransmit, 2);
    Rng rng = make_stream(2, {8, std::bit_cast<std::uint64_t>(4.0)});
    auto r1 = initial_round(sys, p, 0.5, 4.0, rng, 8);
    const Image p2 = retransmission_round(sys, p, r1, 0.5, 4.0, rng);
    EXPECT_EQ(p2, rec.round2->reconstruction);
    EXPECT_EQ(r1.record.symbols_sent, rec.symbols_sent);
}

TEST(Harq, DeterministicPerSeed) {
    const System sys = small_system(ChannelKind::rayleigh);
    const auto imgs = images(5);
    const auto a = run_transmission_batch(sys, ptrs(imgs), ids(5), 1.0, 0.25, 0.25, always_retransmit, 4);
    const auto b = run_transmission_batch(sys, ptrs(imgs), ids(5), 1.0, 0.25, 0.25, always_retransmit, 4);
    const auto c = run_transmission_batch(sys, ptrs(imgs), ids(5), 1.0, 0.25, 0.25, always_retransmit, 5);
    for (std::size_t i = 0; i < 5; ++i) {
        EXPECT_EQ(a[i].round2->jscc_rx, b[i].round2->jscc_rx);
        EXPECT_EQ(a[i].final_psnr, b[i].final_psnr);
        EXPECT_NE(a[i].round1.jscc_rx, c[i].round1.jscc_rx);
    }
}

TEST(Harq, ResultsIndependentOfBatchComposition) {
    const System sys = small_system();
    const auto imgs = images(4);
    const auto batch = run_transmission_batch(sys, ptrs(imgs), ids(4), 2.0, 0.5, 0.5, always_retransmit, 6);
    const auto single = run_transmission(sys, imgs[2], 2, 2.0, 0.5, 0.5, always_retransmit, 6);
    ASSERT_EQ(batch[2].round1.jscc_rx.size(), single.round1.jscc_rx.size());
    for (std::size_t i = 0; i < single.round1.jscc_rx.size(); ++i)
        EXPECT_NEAR(batch[2].round1.jscc_rx[i], single.round1.jscc_rx[i], 1e-12);
    EXPECT_NEAR(batch[2].final_psnr, single.final_psnr, 1e-9);
}

TEST(Harq, RetransmissionWithoutRetainedFeaturesIsAProtocolError) {
    const System sys = small_system();
    const Image p = generate_image(9, 0, 1, 4, 4);
    Rng rng = make_stream(1);
    auto r1 = initial_round(sys, p, 0.5, 2.0, rng);
    r1.retained_x.values.clear();
    EXPECT_THROW(retransmission_round(sys, p, r1, 0.5, 2.0, rng), ProtocolError);
}

TEST(Harq, SnrMustStayConstantAcrossRounds) {
    const System sys = small_system();
    const Image p = generate_image(9, 0, 1, 4, 4);
    Rng rng = make_stream(1);
    auto r1 = initial_round(sys, p, 0.5, 2.0, rng);
    EXPECT_THROW(retransmission_round(sys, p, r1, 0.5, 3.0, rng), ProtocolError);
}

TEST(Harq, MaskedTailArrivesAsZero) {
    const System sys = small_system(ChannelKind::rayleigh);
    const auto imgs = images(3);
    for (const auto& r : run_transmission_batch(sys, ptrs(imgs), ids(3), 0.0, 0.25, 0.5, always_retransmit, 1)) {
        for (std::size_t i = r.round1.active; i < 8; ++i) EXPECT_EQ(r.round1.jscc_rx[i], 0.0);
        for (std::size_t i = r.round2->active; i < 8; ++i) EXPECT_EQ(r.round2->jscc_rx[i], 0.0);
        EXPECT_EQ(r.round1.active, 2u);
        EXPECT_EQ(r.round2->active, 4u);
    }
}

TEST(Harq, SentCodewordsHaveUnitPowerAndFramesCarryThem) {
    const System sys = small_system();
    const auto imgs = images(3);
    for (const auto& r : run_transmission_batch(sys, ptrs(imgs), ids(3), 5.0, 0.5, 0.5, always_retransmit, 1)) {
        double s = 0;
        for (std::size_t i = 0; i < r.round1.active; ++i) s += r.round1.jscc_sent[i] * r.round1.jscc_sent[i];
        EXPECT_NEAR(s / static_cast<double>(r.round1.active), 1.0, 1e-12);
        ASSERT_EQ(r.frames[0].payload.size(), r.round1.active);
        EXPECT_EQ(r.frames[0].payload[0], static_cast<float>(r.round1.jscc_sent[0]));
        EXPECT_EQ(r.frames[3].round, 2);
        EXPECT_EQ(r.frames[3].role, FrameRole::check);
    }
}

TEST(Harq, EstimateFeedbackChangesSecondCheckCodeword) {
    const System sys = small_system();
    const auto d = small_dims();
    Rng rng = make_stream(3);
    Tensor x = Tensor::matrix(1, d.feature_len), z = Tensor::matrix(1, d.feature_len), c = Tensor::matrix(1, d.check_len);
    for (auto& v : x.data) v = standard_normal(rng);
    for (auto& v : z.data) v = standard_normal(rng);
    for (auto& v : c.data) v = standard_normal(rng);
    const double snr[1] = {3.0}, r2[1] = {0.5};
    const auto noise = silent_noise(1, d.feature_len, d.check_len);
    auto with = [&](double est) {
        ad::NoGradGuard g;
        return round2_graph(sys.retx, d.check_len, ad::constant(x), ad::constant(z), ad::constant(c),
                            ad::constant(Tensor({1, 1}, {est})), r2, snr, noise, nullptr)
            .check_sent.value()
            .data;
    };
    EXPECT_NE(with(0.1), with(0.9));
}

TEST(Harq, AgentStateUsesReceivedCheckCodeword) {
    const System sys = small_system();
    const auto imgs = images(1);
    const auto r = run_transmission_batch(sys, ptrs(imgs), ids(1), 0.0, 0.5, 0.5, never_retransmit, 1).front();
    EXPECT_NE(r.round1.check_rx, r.round1.check_sent);
}

TEST(Harq, RecordValidationCatchesBrokenInvariants) {
    const System sys = small_system();
    const auto imgs = images(1);
    auto r = run_transmission_batch(sys, ptrs(imgs), ids(1), 0.0, 0.5, 0.5, never_retransmit, 1).front();
    auto broken = r;
    broken.symbols_sent += 1;
    EXPECT_THROW(validate_record(broken), ProtocolError);
    broken = r;
    broken.action = 1;
    EXPECT_THROW(validate_record(broken), ProtocolError);
}

TEST(Harq, RetransmissionNeedsBundle) {
    System sys = small_system();
    sys.retx = RetxBundle{};
    const auto imgs = images(2);
    EXPECT_THROW(run_transmission_batch(sys, ptrs(imgs), ids(2), 0.0, 0.5, 0.5, always_retransmit, 1), UsageError);
    EXPECT_NO_THROW(run_transmission_batch(sys, ptrs(imgs), ids(2), 0.0, 0.5, 0.5, never_retransmit, 1));
}

TEST(Harq, RetxExportImportRoundTrip) {
    const auto d = small_dims();
    const RetxBundle r = make_retx(d, 3);
    const RetxBundle back = import_retx(export_retx(r, d), d, "memory");
    EXPECT_EQ(ad::serialize_checkpoint(export_retx(back, d)), ad::serialize_checkpoint(export_retx(r, d)));
    auto other = d;
    other.feature_len = 16;
    EXPECT_THROW(import_retx(export_retx(r, d), other, "memory"), CheckpointError);
}

TEST(Reward, PaperTable) {
    EXPECT_EQ(reward(0.4, 0.2, 1, 0.3), 10.0);
    EXPECT_EQ(reward(0.2, std::nullopt, 0, 0.3), 0.5);
    EXPECT_EQ(reward(0.4, std::nullopt, 0, 0.3), -5.0);
    EXPECT_EQ(reward(0.2, 0.1, 1, 0.3), -1.0);
    EXPECT_EQ(reward(0.4, 0.35, 1, 0.3), -0.5);
}

TEST(Reward, BoundaryCountsAsSuccess) {
    EXPECT_EQ(reward(0.3, std::nullopt, 0, 0.3), 0.5);
    EXPECT_EQ(reward(0.4, 0.3, 1, 0.3), 10.0);
}

TEST(Reward, ContractErrors) {
    EXPECT_THROW(reward(0.4, std::nullopt, 1, 0.3), UsageError);
    EXPECT_THROW(reward(0.4, 0.2, 0, 0.3), UsageError);
    EXPECT_THROW(reward(0.4, 0.2, 2, 0.3), UsageError);
}

TEST(Reward, EnumerationIsTotalAndExclusive) {
    std::set<double> seen;
    for (double pre : {0.2, 0.4})
        for (int a : {0, 1}) {
            if (a == 0) {
                seen.insert(reward(pre, std::nullopt, a, 0.3));
            } else {
                for (double post : {0.2, 0.4}) seen.insert(reward(pre, post, a, 0.3));
            }
        }
    EXPECT_EQ(seen, (std::set<double>{-5.0, -1.0, -0.5, 0.5, 10.0}));
}
