#pragma once

// Joint source-channel-check coding chain: semantic encoder, adaptive mask, power normalization,
// reparameterized Gaussian check encoder, joint decoder over both codewords, and the quality
// estimator. Batched graph builders are shared by training and inference; the single-sample
// functions below wrap them.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "s3charq/autodiff.hpp"
#include "s3charq/checkpoint.hpp"
#include "s3charq/errors.hpp"
#include "s3charq/mlp.hpp"
#include "s3charq/rng.hpp"
#include "s3charq/source_data.hpp"

namespace s3charq {

using ad::Activation;
using ad::Mlp;
using ad::Tensor;
using ad::Var;

/// SNR enters networks as snr_db / 13.
inline constexpr double kSnrScale = 13.0;
inline constexpr double kSigmaFloor = 1e-6;
inline constexpr double kDefaultGamma = 1e-4;

struct SemanticFeature {
    std::vector<double> values;
};

struct MaskedCodeword {
    std::vector<double> values;
    std::size_t active_count = 0;
    double ratio = 1.0;
};

struct CheckCodeword {
    std::vector<double> mu;
    std::vector<double> sigma;
    std::vector<double> sample;
};

struct QualityEstimate {
    double value = 0.0;
};

enum class NoiseMode { eval, train };

struct CodecDims {
    std::size_t channels = 1;
    std::size_t height = 16;
    std::size_t width = 16;
    std::size_t feature_len = 64;  // K
    std::size_t check_len = 8;     // k
    std::size_t hidden = 256;

    std::size_t pixels() const { return channels * height * width; }
};

/// Number of transmitted feature symbols, ceil(K * R), never below 1.
/// The 1e-9 slack absorbs binary representation error of decimal ratios such as 0.07.
inline std::size_t mask_count(std::size_t K, double R) {
    if (!(R > 0.0 && R <= 1.0)) throw ConfigError("compression ratio " + std::to_string(R) + " outside (0, 1]");
    const double raw = std::ceil(static_cast<double>(K) * R - 1e-9);
    return std::clamp<std::size_t>(static_cast<std::size_t>(std::max(raw, 1.0)), 1, K);
}

/// Keeps the leading ceil(K*R) features and zeroes the tail.
inline MaskedCodeword adaptive_mask(const SemanticFeature& x, double R) {
    MaskedCodeword z{x.values, mask_count(x.values.size(), R), R};
    std::fill(z.values.begin() + static_cast<std::ptrdiff_t>(z.active_count), z.values.end(), 0.0);
    return z;
}

struct Normalized {
    std::vector<double> values;
    double scale = 1.0;  // values * scale reproduces the input
};

/// Scales so the mean square over the leading `active` symbols is 1.
inline Normalized power_normalize(std::span<const double> c, std::size_t active) {
    if (active == 0 || active > c.size()) throw ConfigError("power_normalize: invalid active count");
    double s = 0.0;
    for (std::size_t i = 0; i < active; ++i) s += c[i] * c[i];
    if (s == 0.0) throw DomainError("power_normalize: degenerate all-zero codeword");
    const double rms = std::sqrt(s / static_cast<double>(active));
    Normalized out{std::vector<double>(c.begin(), c.end()), rms};
    for (auto& v : out.values) v /= rms;
    return out;
}

inline double kl_to_standard_normal(std::span<const double> mu, std::span<const double> sigma) {
    if (mu.size() != sigma.size()) throw ConfigError("kl_to_standard_normal: mu and sigma lengths differ");
    double kl = 0.0;
    for (std::size_t i = 0; i < mu.size(); ++i) {
        if (!(sigma[i] > 0.0)) throw DomainError("kl_to_standard_normal: sigma must be positive");
        kl += (mu[i] * mu[i] + sigma[i] * sigma[i] - 1.0) / 2.0 - std::log(sigma[i]);
    }
    return kl;
}

/// Per-row closed-form KL summed over coordinates: (B x k, B x k) -> B x 1.
inline Var kl_rows(const Var& mu, const Var& sigma) {
    using namespace ad;
    Var t = scale(add_scalar(add(square(mu), square(sigma)), -1.0), 0.5);
    return row_sum(sub(t, log(sigma)));
}

/// Splits a (B x 2k) check-head output into mu and sigma = softplus(raw) + floor.
inline std::pair<Var, Var> gaussian_head(const Var& raw, std::size_t k) {
    Var mu = ad::slice_cols(raw, 0, k);
    Var sigma = ad::add_scalar(ad::softplus(ad::slice_cols(raw, k, k)), kSigmaFloor);
    return {mu, sigma};
}

struct CodecBundle {
    CodecDims dims;
    Mlp encoder;        // enc.  [pixels, R, snr] -> K
    Mlp check_encoder;  // chk.  [x, R, snr] -> (mu, raw sigma)
    Mlp joint_decoder;  // dec.  [z, x_com, snr] -> pixels
    Mlp estimator;      // est.  [z, x_com, snr, R] -> score

    std::size_t K() const { return dims.feature_len; }
    std::size_t k() const { return dims.check_len; }
};

inline CodecBundle make_codec(const CodecDims& d, std::uint64_t seed) {
    Rng rng = make_stream(seed, {0xC0DEC});
    const std::size_t n = d.pixels();
    const std::size_t K = d.feature_len;
    const std::size_t k = d.check_len;
    const std::size_t H = d.hidden;
    CodecBundle b;
    b.dims = d;
    b.encoder = Mlp("enc", {n + 2, H, H, K}, Activation::relu, Activation::identity, rng);
    b.check_encoder = Mlp("chk", {K + 2, H, H, 2 * k}, Activation::relu, Activation::identity, rng);
    b.joint_decoder = Mlp("dec", {K + k + 1, H, H, n}, Activation::relu, Activation::sigmoid, rng);
    b.estimator = Mlp("est", {K + k + 2, H, H / 2, 1}, Activation::relu, Activation::sigmoid, rng);
    return b;
}

// ---------------------------------------------------------------------------------------------
// Batched graph pieces

inline Tensor column(std::span<const double> v, double scale = 1.0) {
    Tensor t = Tensor::matrix(v.size(), 1);
    for (std::size_t i = 0; i < v.size(); ++i) t.data[i] = v[i] * scale;
    return t;
}

inline Tensor image_rows(std::span<const Image* const> images) {
    const std::size_t n = images.front()->size();
    Tensor t = Tensor::matrix(images.size(), n);
    for (std::size_t r = 0; r < images.size(); ++r) {
        if (images[r]->size() != n) throw ConfigError("image batch has mixed sizes");
        std::copy(images[r]->pixels.begin(), images[r]->pixels.end(), t.data.begin() + static_cast<std::ptrdiff_t>(r * n));
    }
    return t;
}

/// 0/1 mask with the first ceil(K*R_r) entries of each row set.
inline Tensor mask_rows(std::size_t K, std::span<const double> ratios, std::vector<std::size_t>* counts = nullptr) {
    Tensor m = Tensor::matrix(ratios.size(), K);
    if (counts) counts->clear();
    for (std::size_t r = 0; r < ratios.size(); ++r) {
        const std::size_t a = mask_count(K, ratios[r]);
        if (counts) counts->push_back(a);
        for (std::size_t c = 0; c < a; ++c) m.data[r * K + c] = 1.0;
    }
    return m;
}

inline Var encode_graph(const CodecBundle& b, const Var& pixels, std::span<const double> ratios,
                        std::span<const double> snr_db) {
    Var in = ad::concat_cols({pixels, ad::constant(column(ratios)), ad::constant(column(snr_db, 1.0 / kSnrScale))});
    return b.encoder.forward(in);
}

inline std::pair<Var, Var> check_graph(const CodecBundle& b, const Var& x, std::span<const double> ratios,
                                       std::span<const double> snr_db) {
    Var in = ad::concat_cols({x, ad::constant(column(ratios)), ad::constant(column(snr_db, 1.0 / kSnrScale))});
    return gaussian_head(b.check_encoder.forward(in), b.k());
}

inline Var decode_graph(const CodecBundle& b, const Var& z_rx, const Var& check_rx, std::span<const double> snr_db) {
    Var in = ad::concat_cols({z_rx, check_rx, ad::constant(column(snr_db, 1.0 / kSnrScale))});
    return b.joint_decoder.forward(in);
}

inline Var estimate_graph(const CodecBundle& b, const Var& z_rx, const Var& check_rx, std::span<const double> snr_db,
                          std::span<const double> ratios) {
    Var in = ad::concat_cols(
        {z_rx, check_rx, ad::constant(column(snr_db, 1.0 / kSnrScale)), ad::constant(column(ratios))});
    return b.estimator.forward(in);
}

// ---------------------------------------------------------------------------------------------
// Single-sample operations

namespace detail {
inline std::vector<double> row_of(const Tensor& t, std::size_t r = 0) {
    return {t.data.begin() + static_cast<std::ptrdiff_t>(r * t.cols()),
            t.data.begin() + static_cast<std::ptrdiff_t>((r + 1) * t.cols())};
}
inline void require_len(std::span<const double> v, std::size_t n, const char* what) {
    if (v.size() != n)
        throw ConfigError(std::string(what) + " has length " + std::to_string(v.size()) + ", bundle expects " +
                          std::to_string(n));
}
}  // namespace detail

inline SemanticFeature encode(const CodecBundle& b, const Image& p, double R, double snr_db) {
    ad::NoGradGuard guard;
    const Image* ptr = &p;
    const double r[1] = {R};
    const double s[1] = {snr_db};
    Var x = encode_graph(b, ad::constant(image_rows(std::span(&ptr, 1))), r, s);
    return {detail::row_of(x.value())};
}

/// Eval mode: sample = mu. Train mode: sample = mu + sigma * eps with eps ~ N(0, I) from `rng`.
inline CheckCodeword check_encode(const CodecBundle& b, const SemanticFeature& x, double R, double snr_db,
                                  NoiseMode mode = NoiseMode::eval, Rng* rng = nullptr) {
    detail::require_len(x.values, b.K(), "semantic feature");
    ad::NoGradGuard guard;
    const double r[1] = {R};
    const double s[1] = {snr_db};
    auto [mu, sigma] = check_graph(b, ad::constant(Tensor::row(x.values)), r, s);
    CheckCodeword c{detail::row_of(mu.value()), detail::row_of(sigma.value()), detail::row_of(mu.value())};
    if (mode == NoiseMode::train) {
        if (!rng) throw UsageError("check_encode: training mode needs an rng");
        for (std::size_t i = 0; i < c.sample.size(); ++i) c.sample[i] += c.sigma[i] * standard_normal(*rng);
    }
    return c;
}

inline Image joint_decode(const CodecBundle& b, std::span<const double> z_rx, std::span<const double> check_rx,
                          double snr_db) {
    detail::require_len(z_rx, b.K(), "received codeword");
    detail::require_len(check_rx, b.k(), "received check codeword");
    ad::NoGradGuard guard;
    const double s[1] = {snr_db};
    Var out = decode_graph(b, ad::constant(Tensor::row({z_rx.begin(), z_rx.end()})),
                           ad::constant(Tensor::row({check_rx.begin(), check_rx.end()})), s);
    Image img(b.dims.channels, b.dims.height, b.dims.width);
    for (std::size_t i = 0; i < img.size(); ++i) img.pixels[i] = std::clamp(out.value().data[i], 0.0, 1.0);
    return img;
}

inline QualityEstimate estimate_quality(const CodecBundle& b, std::span<const double> z_rx,
                                        std::span<const double> check_rx, double snr_db, double R) {
    detail::require_len(z_rx, b.K(), "received codeword");
    detail::require_len(check_rx, b.k(), "received check codeword");
    ad::NoGradGuard guard;
    const double s[1] = {snr_db};
    const double r[1] = {R};
    Var out = estimate_graph(b, ad::constant(Tensor::row({z_rx.begin(), z_rx.end()})),
                             ad::constant(Tensor::row({check_rx.begin(), check_rx.end()})), s, r);
    return {out.item()};
}

// ---------------------------------------------------------------------------------------------
// Information-bottleneck loss

struct IbSample {
    const Image* source = nullptr;
    const Image* reconstruction = nullptr;
    double score_truth = 0.0;
    double score_estimate = 0.0;
    std::vector<double> mu;
    std::vector<double> sigma;
};

/// w (1/B) sum (s - s_est)^2 + (1/B) sum MSE(p, p~) + gamma (1/B) sum KL(mu, sigma), w = `estimate_weight`.
inline double ib_loss(std::span<const IbSample> batch, double gamma = kDefaultGamma, double estimate_weight = 1.0) {
    if (batch.empty()) throw UsageError("ib_loss: empty batch");
    double est = 0.0, rec = 0.0, kl = 0.0;
    for (const auto& s : batch) {
        const double d = s.score_truth - s.score_estimate;
        est += d * d;
        rec += mse(*s.source, *s.reconstruction);
        kl += kl_to_standard_normal(s.mu, s.sigma);
    }
    const double B = static_cast<double>(batch.size());
    return estimate_weight * est / B + rec / B + gamma * kl / B;
}

/// Graph form of ib_loss over batched tensors (rows are samples).
inline Var ib_loss_graph(const Var& source, const Var& reconstruction, const Var& score_truth,
                         const Var& score_estimate, const Var& mu, const Var& sigma, double gamma = kDefaultGamma,
                         double estimate_weight = 1.0) {
    using namespace ad;
    const double B = static_cast<double>(source.rows());
    const double n = static_cast<double>(source.cols());
    Var est = scale(sum(square(sub(score_truth, score_estimate))), estimate_weight / B);
    Var rec = scale(sum(square(sub(source, reconstruction))), 1.0 / (B * n));
    Var kl = scale(sum(kl_rows(mu, sigma)), gamma / B);
    return add(add(est, rec), kl);
}

// ---------------------------------------------------------------------------------------------
// Persistence

inline Tensor dims_tensor(const CodecDims& d) {
    return Tensor(std::vector<std::size_t>{6},
                  std::vector<double>{static_cast<double>(d.channels), static_cast<double>(d.height),
                                      static_cast<double>(d.width), static_cast<double>(d.feature_len),
                                      static_cast<double>(d.check_len), static_cast<double>(d.hidden)});
}

inline CodecDims dims_from_tensor(const Tensor& t) {
    if (t.size() != 6) throw CheckpointError("meta.dims must hold 6 values");
    auto u = [&](std::size_t i) { return static_cast<std::size_t>(t.data[i]); };
    return {u(0), u(1), u(2), u(3), u(4), u(5)};
}

/// Throws naming both values when a checkpoint's dimensions disagree with the configuration.
inline void require_matching_dims(const CodecDims& expected, const CodecDims& found, const std::string& source) {
    auto check = [&](const char* name, std::size_t want, std::size_t got) {
        if (want != got)
            throw CheckpointError(source + ": " + name + " is " + std::to_string(got) + " in checkpoint but " +
                                  std::to_string(want) + " in config");
    };
    check("K", expected.feature_len, found.feature_len);
    check("k", expected.check_len, found.check_len);
    check("channels", expected.channels, found.channels);
    check("height", expected.height, found.height);
    check("width", expected.width, found.width);
    check("hidden", expected.hidden, found.hidden);
}

/// Writes whichever components are non-empty, under enc./chk./dec./est.
inline std::vector<ad::NamedTensor> export_codec(const CodecBundle& b) {
    std::vector<ad::NamedTensor> out;
    out.push_back({"meta.dims", dims_tensor(b.dims)});
    for (const Mlp* m : {&b.encoder, &b.check_encoder, &b.joint_decoder, &b.estimator})
        if (!m->empty()) ad::append_mlp(out, *m);
    return out;
}

inline CodecBundle import_codec(const std::vector<ad::NamedTensor>& tensors, const CodecDims& expected,
                                const std::string& source = "checkpoint") {
    const auto idx = ad::index_tensors(tensors);
    CodecBundle b;
    b.dims = dims_from_tensor(ad::require_tensor(idx, "meta.dims"));
    require_matching_dims(expected, b.dims, source);
    auto maybe = [&](const char* prefix) {
        return idx.contains(std::string(prefix) + ".0.weight") ? ad::extract_mlp(idx, prefix) : Mlp{};
    };
    b.encoder = maybe("enc");
    b.check_encoder = maybe("chk");
    b.joint_decoder = maybe("dec");
    b.estimator = maybe("est");
    if (b.encoder.empty() || b.joint_decoder.empty()) throw CheckpointError(source + ": encoder/decoder missing");
    return b;
}

}  // namespace s3charq
