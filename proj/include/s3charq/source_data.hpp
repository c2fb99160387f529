#pragma once

// Synthetic image generation, raw image ingestion, and the two ground-truth quality metrics:
// PSNR and a seeded random-projection perceptual score (lower is better, bounded in [0, 1)).

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include <Eigen/Dense>

#include "s3charq/errors.hpp"
#include "s3charq/rng.hpp"

namespace s3charq {

struct Image {
    std::size_t channels = 1;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> pixels;  // channel-first, row-major

    Image() = default;
    Image(std::size_t c, std::size_t h, std::size_t w, double fill = 0.0)
        : channels(c), height(h), width(w), pixels(c * h * w, fill) {}

    std::size_t size() const { return pixels.size(); }
    bool same_dims(const Image& o) const {
        return channels == o.channels && height == o.height && width == o.width;
    }
    friend bool operator==(const Image&, const Image&) = default;
};

enum class SplitRole { codec_train, agent_train, test };

inline const char* to_string(SplitRole r) {
    switch (r) {
        case SplitRole::codec_train: return "codec_train";
        case SplitRole::agent_train: return "agent_train";
        case SplitRole::test: return "test";
    }
    return "test";
}

struct DatasetSplit {
    SplitRole role = SplitRole::test;
    std::vector<Image> images;
    std::uint64_t seed = 0;
};

/// Smooth blobs plus a texture sinusoid plus faint noise, clipped to [0,1] and quantized to 8 bits.
/// Deterministic in (seed, index).
inline Image generate_image(std::uint64_t seed, std::uint64_t index, std::size_t c, std::size_t h, std::size_t w) {
    if (c == 0 || h == 0 || w == 0) throw ConfigError("generate_image: dimensions must be positive");
    Rng rng = make_stream(seed, {index});
    Image img(c, h, w);
    const double scale = static_cast<double>(std::max(h, w)) / 16.0;

    std::vector<double> base(c);
    for (auto& b : base) b = uniform(rng, 0.15, 0.45);

    struct Blob {
        double cy, cx, sigma;
        std::vector<double> amp;
    };
    const int blob_count = 2 + static_cast<int>(rng() % 3);
    std::vector<Blob> blobs;
    for (int b = 0; b < blob_count; ++b) {
        Blob blob{uniform(rng, 0.0, static_cast<double>(h)), uniform(rng, 0.0, static_cast<double>(w)),
                  uniform(rng, 1.5, 4.0) * scale, std::vector<double>(c)};
        const double sign = (rng() & 1u) ? 1.0 : -0.6;
        for (auto& a : blob.amp) a = sign * uniform(rng, 0.25, 0.6);
        blobs.push_back(std::move(blob));
    }

    const double fy = uniform(rng, 0.5, 3.0) / static_cast<double>(h);
    const double fx = uniform(rng, 0.5, 3.0) / static_cast<double>(w);
    const double phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    const double tex_amp = uniform(rng, 0.05, 0.15);

    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                double v = base[ch];
                for (const auto& blob : blobs) {
                    const double dy = static_cast<double>(y) - blob.cy;
                    const double dx = static_cast<double>(x) - blob.cx;
                    v += blob.amp[ch] * std::exp(-(dy * dy + dx * dx) / (2.0 * blob.sigma * blob.sigma));
                }
                v += tex_amp * std::sin(2.0 * std::numbers::pi * (fy * static_cast<double>(y) +
                                                                  fx * static_cast<double>(x)) + phase);
                v += 0.02 * standard_normal(rng);
                img.pixels[(ch * h + y) * w + x] = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
            }
        }
    }
    return img;
}

inline std::uint64_t image_hash(const Image& img) {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](std::uint64_t v) {
        for (int i = 0; i < 8; ++i) {
            h ^= (v >> (8 * i)) & 0xffu;
            h *= 1099511628211ULL;
        }
    };
    mix(img.channels);
    mix(img.height);
    mix(img.width);
    for (double p : img.pixels) mix(std::bit_cast<std::uint64_t>(p));
    return h;
}

/// Each role draws from its own generator seed derived from `base_seed`.
inline std::uint64_t split_seed(std::uint64_t base_seed, SplitRole role) {
    return splitmix64(base_seed * 3 + static_cast<std::uint64_t>(role) + 1);
}

inline DatasetSplit make_split(SplitRole role, std::size_t count, std::uint64_t base_seed, std::size_t c,
                               std::size_t h, std::size_t w) {
    if (count == 0) throw ConfigError(std::string("split ") + to_string(role) + " must be non-empty");
    DatasetSplit split{role, {}, split_seed(base_seed, role)};
    split.images.reserve(count);
    for (std::size_t i = 0; i < count; ++i) split.images.push_back(generate_image(split.seed, i, c, h, w));
    return split;
}

/// Throws if any image appears in more than one split.
inline void check_disjoint(const std::vector<const DatasetSplit*>& splits) {
    std::unordered_set<std::uint64_t> seen;
    for (const auto* s : splits) {
        std::unordered_set<std::uint64_t> own;
        for (const auto& img : s->images) own.insert(image_hash(img));
        for (auto hsh : own) {
            if (!seen.insert(hsh).second)
                throw ConfigError(std::string("split ") + to_string(s->role) + " shares an image with another split");
        }
    }
}

// Raw format: "JS3C-IMGS v1 <count> <c> <h> <w>\n" then count*c*h*w unsigned bytes.

inline void write_raw_images(const std::string& path, const std::vector<Image>& images) {
    if (images.empty()) throw ConfigError("write_raw_images: nothing to write");
    const auto& f = images.front();
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open " + path + " for writing");
    os << "JS3C-IMGS v1 " << images.size() << ' ' << f.channels << ' ' << f.height << ' ' << f.width << '\n';
    for (const auto& img : images) {
        if (!img.same_dims(f)) throw ConfigError("write_raw_images: images have differing dimensions");
        for (double p : img.pixels) os.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(p, 0.0, 1.0) * 255.0))));
    }
    if (!os) throw FormatError("write failed for " + path);
}

inline DatasetSplit load_raw_images(const std::string& path, std::size_t c, std::size_t h, std::size_t w,
                                    SplitRole role = SplitRole::test) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open raw image file " + path);
    std::string header;
    std::getline(is, header);
    std::istringstream hs(header);
    std::string magic, version;
    std::size_t count = 0, fc = 0, fh = 0, fw = 0;
    hs >> magic >> version >> count >> fc >> fh >> fw;
    if (!hs || magic != "JS3C-IMGS" || version != "v1") throw FormatError(path + ": bad raw image header");
    if (fc != c || fh != h || fw != w) {
        throw FormatError(path + ": file holds " + std::to_string(fc) + "x" + std::to_string(fh) + "x" +
                          std::to_string(fw) + " images, expected " + std::to_string(c) + "x" + std::to_string(h) +
                          "x" + std::to_string(w));
    }
    const std::size_t header_bytes = header.size() + 1;
    const std::size_t per_image = c * h * w;
    DatasetSplit split{role, {}, 0};
    std::vector<char> buf(per_image);
    for (std::size_t i = 0; i < count; ++i) {
        is.read(buf.data(), static_cast<std::streamsize>(per_image));
        if (static_cast<std::size_t>(is.gcount()) != per_image) {
            throw FormatError(path + ": truncated at byte offset " +
                              std::to_string(header_bytes + i * per_image + static_cast<std::size_t>(is.gcount())) +
                              " (image " + std::to_string(i) + " of " + std::to_string(count) + ")");
        }
        Image img(c, h, w);
        for (std::size_t k = 0; k < per_image; ++k)
            img.pixels[k] = static_cast<double>(static_cast<unsigned char>(buf[k])) / 255.0;
        split.images.push_back(std::move(img));
    }
    return split;
}

inline constexpr double kPsnrCap = 99.0;

inline double mse(const Image& p, const Image& q) {
    if (!p.same_dims(q)) throw ConfigError("image dimensions differ");
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) s += (p.pixels[i] - q.pixels[i]) * (p.pixels[i] - q.pixels[i]);
    return s / static_cast<double>(p.size());
}

/// Peak value 1. Identical images (and anything above the cap) report 99 dB.
inline double psnr(const Image& p, const Image& q) {
    const double e = mse(p, q);
    if (e <= 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / e));
}

/// F x n projection with unit-norm Gaussian rows, fixed by (seed, F, n).
class PerceptualProjector {
public:
    PerceptualProjector(std::uint64_t seed, std::size_t features, std::size_t input_dim)
        : seed_(seed), features_(features), input_dim_(input_dim), rows_(features * input_dim) {
        if (features == 0 || input_dim == 0) throw ConfigError("PerceptualProjector: dimensions must be positive");
        Rng rng = make_stream(seed, {features, input_dim});
        for (std::size_t f = 0; f < features; ++f) {
            double norm2 = 0.0;
            for (std::size_t j = 0; j < input_dim; ++j) {
                const double v = standard_normal(rng);
                rows_[f * input_dim + j] = v;
                norm2 += v * v;
            }
            const double inv = 1.0 / std::sqrt(norm2);
            for (std::size_t j = 0; j < input_dim; ++j) rows_[f * input_dim + j] *= inv;
        }
    }

    std::uint64_t seed() const { return seed_; }
    std::size_t feature_count() const { return features_; }
    std::size_t input_dim() const { return input_dim_; }
    const std::vector<double>& matrix() const { return rows_; }

    std::vector<double> project(const std::vector<double>& v) const {
        if (v.size() != input_dim_) {
            throw ConfigError("perceptual projector expects " + std::to_string(input_dim_) + " values, got " +
                              std::to_string(v.size()));
        }
        using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
        std::vector<double> out(features_);
        const auto f = static_cast<Eigen::Index>(features_), n = static_cast<Eigen::Index>(input_dim_);
        Eigen::Map<Eigen::VectorXd>(out.data(), f).noalias() =
            Eigen::Map<const RowMatrix>(rows_.data(), f, n) * Eigen::Map<const Eigen::VectorXd>(v.data(), n);
        return out;
    }

    /// L2 distance between the projections of p and q.
    double projected_distance(const Image& p, const Image& q) const {
        if (!p.same_dims(q)) throw ConfigError("perceptual_score: image dimensions differ");
        std::vector<double> diff(p.size());
        for (std::size_t i = 0; i < p.size(); ++i) diff[i] = p.pixels[i] - q.pixels[i];
        double s = 0.0;
        for (double v : project(diff)) s += v * v;
        return std::sqrt(s);
    }

private:
    std::uint64_t seed_;
    std::size_t features_;
    std::size_t input_dim_;
    std::vector<double> rows_;
};

inline double score_from_distance(double distance, std::size_t features) {
    return 1.0 - std::exp(-distance / std::sqrt(static_cast<double>(features)));
}

/// 1 - exp(-|P p - P q| / sqrt(F)); 0 for identical inputs, always below 1.
inline double perceptual_score(const Image& p, const Image& q, const PerceptualProjector& proj) {
    return score_from_distance(proj.projected_distance(p, q), proj.feature_count());
}

}  // namespace s3charq
