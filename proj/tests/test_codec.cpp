#include <gtest/gtest.h>

#include <cmath>

#include "s3charq/codec.hpp"
#include "s3charq/rng.hpp"

using namespace s3charq;
using ad::Tensor;
using ad::Var;

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

void zero_parameters(const ad::Mlp& net) {
    for (auto& p : net.parameters()) std::fill(p.value().data.begin(), p.value().data.end(), 0.0);
}

Image random_image(const CodecDims& d, std::uint64_t seed) {
    Rng rng = make_stream(seed);
    Image img(d.channels, d.height, d.width);
    for (auto& v : img.pixels) v = uniform(rng, 0, 1);
    return img;
}

}  // namespace

TEST(Mask, CeilingRule) {
    EXPECT_EQ(mask_count(8, 0.5), 4u);
    EXPECT_EQ(mask_count(8, 0.51), 5u);
    EXPECT_EQ(mask_count(8, 1.0), 8u);
    EXPECT_EQ(mask_count(100, 0.07), 7u);
    EXPECT_EQ(mask_count(8, 0.01), 1u);
    EXPECT_THROW(mask_count(8, 0.0), ConfigError);
    EXPECT_THROW(mask_count(8, 1.5), ConfigError);
}

TEST(Mask, TailIsZeroed) {
    SemanticFeature x{{1, 2, 3, 4, 5, 6, 7, 8}};
    const auto z = adaptive_mask(x, 0.5);
    EXPECT_EQ(z.active_count, 4u);
    EXPECT_EQ(z.values, (std::vector<double>{1, 2, 3, 4, 0, 0, 0, 0}));
    EXPECT_EQ(adaptive_mask(x, 1.0).values, x.values);
}

TEST(Mask, CardinalityProperty) {
    Rng rng = make_stream(4);
    for (int t = 0; t < 500; ++t) {
        const std::size_t K = 1 + rng() % 80;
        const double R = uniform(rng, 0.001, 1.0);
        SemanticFeature x{std::vector<double>(K)};
        for (auto& v : x.values) v = 1.0 + uniform(rng, 0, 1);
        const auto z = adaptive_mask(x, R);
        const auto cap = static_cast<std::size_t>(std::ceil(static_cast<double>(K) * R - 1e-9));
        std::size_t nonzero = 0;
        for (std::size_t i = 0; i < K; ++i) {
            if (z.values[i] != 0.0) ++nonzero;
            if (i >= z.active_count) {
                EXPECT_EQ(z.values[i], 0.0);
            }
        }
        EXPECT_LE(nonzero, std::max<std::size_t>(cap, 1));
    }
}

TEST(PowerNormalize, SingleActiveSymbol) {
    const std::vector<double> c{2, 0, 0, 0};
    const auto n = power_normalize(c, 1);
    EXPECT_DOUBLE_EQ(n.values[0], 1.0);
    EXPECT_DOUBLE_EQ(n.scale, 2.0);
}

TEST(PowerNormalize, UnitPowerAndRoundTrip) {
    Rng rng = make_stream(5);
    for (int t = 0; t < 100; ++t) {
        std::vector<double> c(12);
        for (auto& v : c) v = 3.0 * standard_normal(rng);
        const std::size_t active = 1 + rng() % 12;
        const auto n = power_normalize(c, active);
        double s = 0;
        for (std::size_t i = 0; i < active; ++i) s += n.values[i] * n.values[i];
        EXPECT_NEAR(s / static_cast<double>(active), 1.0, 1e-12);
        for (std::size_t i = 0; i < c.size(); ++i) EXPECT_NEAR(n.values[i] * n.scale, c[i], 1e-12);
    }
}

TEST(PowerNormalize, AllZeroIsDegenerate) {
    const std::vector<double> c{0, 0, 0};
    EXPECT_THROW(power_normalize(c, 2), DomainError);
}

TEST(Kl, ClosedFormValues) {
    const std::vector<double> zero{0, 0}, one{1, 1};
    EXPECT_EQ(kl_to_standard_normal(zero, one), 0.0);
    const std::vector<double> m{1}, s{1};
    EXPECT_DOUBLE_EQ(kl_to_standard_normal(m, s), 0.5);
    const std::vector<double> bad{0.0};
    EXPECT_THROW(kl_to_standard_normal(m, bad), DomainError);
}

TEST(Kl, NonNegativeWithEqualityAtStandardNormal) {
    Rng rng = make_stream(6);
    for (int t = 0; t < 1000; ++t) {
        std::vector<double> mu(4), sigma(4);
        for (auto& v : mu) v = uniform(rng, -2, 2);
        for (auto& v : sigma) v = uniform(rng, 0.05, 3);
        EXPECT_GT(kl_to_standard_normal(mu, sigma), 0.0);
    }
}

TEST(Kl, MatchesMonteCarlo) {
    Rng rng = make_stream(7);
    const std::vector<double> mu{0.7}, sigma{0.6};
    const double closed = kl_to_standard_normal(mu, sigma);
    double acc = 0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double x = mu[0] + sigma[0] * standard_normal(rng);
        const double logq = -0.5 * std::pow((x - mu[0]) / sigma[0], 2) - std::log(sigma[0]);
        const double logp = -0.5 * x * x;
        acc += logq - logp;
    }
    EXPECT_NEAR(acc / n, closed, 0.02 * closed + 0.01);
}

TEST(Kl, GraphFormMatchesScalar) {
    Rng rng = make_stream(8);
    Tensor mu = Tensor::matrix(3, 4), sigma = Tensor::matrix(3, 4);
    for (auto& v : mu.data) v = standard_normal(rng);
    for (auto& v : sigma.data) v = uniform(rng, 0.2, 2);
    const Var rows = kl_rows(ad::constant(mu), ad::constant(sigma));
    for (std::size_t r = 0; r < 3; ++r) {
        const std::span<const double> m(mu.data.data() + r * 4, 4), s(sigma.data.data() + r * 4, 4);
        EXPECT_NEAR(rows.value().data[r], kl_to_standard_normal(m, s), 1e-12);
    }
}

TEST(Codec, ZeroEncoderGivesZeroFeatures) {
    const auto d = small_dims();
    CodecBundle b = make_codec(d, 1);
    zero_parameters(b.encoder);
    const auto x = encode(b, random_image(d, 1), 0.5, 3.0);
    EXPECT_EQ(x.values, std::vector<double>(d.feature_len, 0.0));
}

TEST(Codec, OperationsAreDeterministic) {
    const auto d = small_dims();
    const CodecBundle b = make_codec(d, 2);
    const Image p = random_image(d, 2);
    const auto x1 = encode(b, p, 0.5, 3.0);
    EXPECT_EQ(x1.values, encode(b, p, 0.5, 3.0).values);
    const auto c = check_encode(b, x1, 0.5, 3.0);
    EXPECT_EQ(joint_decode(b, x1.values, c.sample, 3.0), joint_decode(b, x1.values, c.sample, 3.0));
    EXPECT_EQ(estimate_quality(b, x1.values, c.sample, 3.0, 0.5).value,
              estimate_quality(b, x1.values, c.sample, 3.0, 0.5).value);
}

TEST(Codec, DistinctInputsGiveDistinctFeatures) {
    const auto d = small_dims();
    const CodecBundle b = make_codec(d, 3);
    EXPECT_NE(encode(b, random_image(d, 1), 0.5, 3.0).values, encode(b, random_image(d, 2), 0.5, 3.0).values);
}

TEST(CheckEncode, EvalSampleIsMuAndSigmaPositive) {
    const auto d = small_dims();
    const CodecBundle b = make_codec(d, 4);
    Rng rng = make_stream(4);
    for (int t = 0; t < 50; ++t) {
        SemanticFeature x{std::vector<double>(d.feature_len)};
        for (auto& v : x.values) v = 20.0 * standard_normal(rng);
        const auto c = check_encode(b, x, 0.25, 7.0);
        EXPECT_EQ(c.sample, c.mu);
        for (double s : c.sigma) EXPECT_GT(s, 0.0);
    }
}

TEST(CheckEncode, TrainingSamplesMatchMoments) {
    const auto d = small_dims();
    const CodecBundle b = make_codec(d, 5);
    const auto x = encode(b, random_image(d, 5), 0.5, 3.0);
    Rng rng = make_stream(5, {2});
    const auto ref = check_encode(b, x, 0.5, 3.0);
    const int n = 10000;
    std::vector<double> s1(d.check_len), s2(d.check_len);
    for (int i = 0; i < n; ++i) {
        const auto c = check_encode(b, x, 0.5, 3.0, NoiseMode::train, &rng);
        for (std::size_t j = 0; j < d.check_len; ++j) {
            s1[j] += c.sample[j];
            s2[j] += c.sample[j] * c.sample[j];
        }
    }
    for (std::size_t j = 0; j < d.check_len; ++j) {
        const double mean = s1[j] / n;
        const double sd = std::sqrt(s2[j] / n - mean * mean);
        EXPECT_NEAR(mean, ref.mu[j], 0.03 * ref.sigma[j] + 0.03 * std::abs(ref.mu[j]));
        EXPECT_NEAR(sd, ref.sigma[j], 0.03 * ref.sigma[j]);
    }
}

TEST(CheckEncode, TrainingModeNeedsRng) {
    const auto d = small_dims();
    const CodecBundle b = make_codec(d, 6);
    EXPECT_THROW(check_encode(b, SemanticFeature{std::vector<double>(d.feature_len)}, 0.5, 0.0, NoiseMode::train),
                 UsageError);
}

TEST(CheckEncode, ReadsOnlyTheSemanticFeature) {
    const auto d = small_dims();
    const CodecBundle b = make_codec(d, 6);
    EXPECT_EQ(b.check_encoder.input_dim(), d.feature_len + 2);
    EXPECT_THROW(check_encode(b, SemanticFeature{std::vector<double>(d.pixels())}, 0.5, 0.0), ConfigError);
}

TEST(Reparameterization, GradientsMatchFiniteDifferences) {
    Rng rng = make_stream(9);
    Tensor mu0 = Tensor::matrix(2, 3), sg0 = Tensor::matrix(2, 3), eps = Tensor::matrix(2, 3), w = Tensor::matrix(2, 3);
    for (auto& v : mu0.data) v = standard_normal(rng);
    for (auto& v : sg0.data) v = uniform(rng, 0.3, 1.5);
    for (auto& v : eps.data) v = standard_normal(rng);
    for (auto& v : w.data) v = standard_normal(rng);
    auto loss = [&](const Var& mu, const Var& sg) {
        Var sample = ad::add(mu, ad::mul(sg, ad::constant(eps)));
        return ad::add(ad::sum(ad::square(ad::sub(sample, ad::constant(w)))), ad::sum(kl_rows(mu, sg)));
    };
    Var mu = ad::parameter(mu0, "mu"), sg = ad::parameter(sg0, "sigma");
    ad::backward(loss(mu, sg));
    auto value = [&](const Tensor& m, const Tensor& s) {
        ad::NoGradGuard g;
        return loss(ad::constant(m), ad::constant(s)).item();
    };
    const double h = 1e-6;
    for (std::size_t i = 0; i < 6; ++i) {
        Tensor mp = mu0, mm = mu0, sp = sg0, sm = sg0;
        mp.data[i] += h;
        mm.data[i] -= h;
        sp.data[i] += h;
        sm.data[i] -= h;
        const double fd_mu = (value(mp, sg0) - value(mm, sg0)) / (2 * h);
        const double fd_sg = (value(mu0, sp) - value(mu0, sm)) / (2 * h);
        EXPECT_LE(std::abs(mu.grad()[i] - fd_mu), 1e-4 * std::max(1.0, std::abs(fd_mu)));
        EXPECT_LE(std::abs(sg.grad()[i] - fd_sg), 1e-4 * std::max(1.0, std::abs(fd_sg)));
    }
}

TEST(JointDecode, OutputClippedAndLengthsChecked) {
    const auto d = small_dims();
    CodecBundle b = make_codec(d, 7);
    auto bias = b.joint_decoder.parameters().back();
    for (auto& v : bias.value().data) v = 50.0;
    const std::vector<double> z(d.feature_len, 1.0), c(d.check_len, 1.0);
    const Image img = joint_decode(b, z, c, 0.0);
    for (double v : img.pixels) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
    EXPECT_THROW(joint_decode(b, c, c, 0.0), ConfigError);
    EXPECT_THROW(joint_decode(b, z, z, 0.0), ConfigError);
}

TEST(JointDecode, CheckCodewordIsADecoderInput) {
    const auto d = small_dims();
    const CodecBundle b = make_codec(d, 8);
    EXPECT_EQ(b.joint_decoder.input_dim(), d.feature_len + d.check_len + 1);
    EXPECT_EQ(b.estimator.input_dim(), d.feature_len + d.check_len + 2);
    const std::vector<double> z(d.feature_len, 0.3), c1(d.check_len, 0.0), c2(d.check_len, 2.0);
    EXPECT_NE(joint_decode(b, z, c1, 0.0), joint_decode(b, z, c2, 0.0));
}

TEST(EstimateQuality, StrictlyInsideUnitInterval) {
    const auto d = small_dims();
    const CodecBundle b = make_codec(d, 9);
    Rng rng = make_stream(9);
    for (int t = 0; t < 100; ++t) {
        std::vector<double> z(d.feature_len), c(d.check_len);
        for (auto& v : z) v = standard_normal(rng);
        for (auto& v : c) v = standard_normal(rng);
        const double e = estimate_quality(b, z, c, uniform(rng, 0, 13), 0.5).value;
        EXPECT_GT(e, 0.0);
        EXPECT_LT(e, 1.0);
    }
}

TEST(IbLoss, VanishesForPerfectBatch) {
    const Image p(1, 2, 2, 0.5);
    std::vector<IbSample> batch{{&p, &p, 0.2, 0.2, {0, 0}, {1, 1}}};
    EXPECT_EQ(ib_loss(batch), 0.0);
}

TEST(IbLoss, HandComputedBatch) {
    const Image p1(1, 1, 2, 0.0), r1(1, 1, 2, 0.1);
    Image p2(1, 1, 2, 0.5), r2(1, 1, 2, 0.5);
    r2.pixels[1] = 0.7;
    std::vector<IbSample> batch{{&p1, &r1, 0.3, 0.1, {1}, {1}}, {&p2, &r2, 0.5, 0.6, {0}, {2}}};
    // est: (0.04 + 0.01)/2 = 0.025; mse: (0.01 + 0.02)/2 = 0.015; kl: (0.5 + 1.5 - log 2)/2
    const double kl = (0.5 + (1.5 - std::log(2.0))) / 2;
    EXPECT_NEAR(ib_loss(batch, 0.0), 0.025 + 0.015, 1e-15);
    EXPECT_NEAR(ib_loss(batch, 1e-4), 0.025 + 0.015 + 1e-4 * kl, 1e-15);
    EXPECT_NEAR(ib_loss(batch, 0.0, 3.0), 3 * 0.025 + 0.015, 1e-15);
    EXPECT_EQ(kDefaultGamma, 1e-4);
}

TEST(IbLoss, GraphFormMatchesScalarForm) {
    const Image p1(1, 1, 2, 0.0), r1(1, 1, 2, 0.1);
    Image p2(1, 1, 2, 0.5), r2(1, 1, 2, 0.5);
    r2.pixels[1] = 0.7;
    std::vector<IbSample> batch{{&p1, &r1, 0.3, 0.1, {1}, {1}}, {&p2, &r2, 0.5, 0.6, {0}, {2}}};
    const Var g = ib_loss_graph(ad::constant(Tensor({2, 2}, {0, 0, 0.5, 0.5})),
                                ad::constant(Tensor({2, 2}, {0.1, 0.1, 0.5, 0.7})),
                                ad::constant(Tensor({2, 1}, {0.3, 0.5})), ad::constant(Tensor({2, 1}, {0.1, 0.6})),
                                ad::constant(Tensor({2, 1}, {1, 0})), ad::constant(Tensor({2, 1}, {1, 2})), 0.01, 2.0);
    EXPECT_NEAR(g.item(), ib_loss(batch, 0.01, 2.0), 1e-15);
}

TEST(IbLoss, EmptyBatchThrows) {
    EXPECT_THROW(ib_loss({}), UsageError);
}

TEST(Persistence, ExportImportRoundTrip) {
    const auto d = small_dims();
    const CodecBundle b = make_codec(d, 10);
    const CodecBundle back = import_codec(export_codec(b), d, "memory");
    const Image p = random_image(d, 10);
    const auto x = encode(back, p, 0.5, 3.0);
    EXPECT_EQ(x.values, encode(b, p, 0.5, 3.0).values);
    const auto c = check_encode(b, x, 0.5, 3.0);
    EXPECT_EQ(joint_decode(back, x.values, c.sample, 3.0), joint_decode(b, x.values, c.sample, 3.0));
}

TEST(Persistence, DimensionMismatchNamesBothValues) {
    const auto d = small_dims();
    auto other = d;
    other.check_len = 5;
    try {
        import_codec(export_codec(make_codec(d, 11)), other, "memory");
        FAIL() << "expected CheckpointError";
    } catch (const CheckpointError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find('3'), std::string::npos) << msg;
        EXPECT_NE(msg.find('5'), std::string::npos) << msg;
    }
}
