#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "s3charq/rng.hpp"
#include "s3charq/source_data.hpp"

using namespace s3charq;

namespace {

std::string temp_path(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / "s3charq_test_source_data";
    std::filesystem::create_directories(dir);
    return (dir / name).string();
}

Image noisy(const Image& p, double sigma, Rng& rng) {
    Image q = p;
    for (auto& v : q.pixels) v += sigma * standard_normal(rng);
    return q;
}

}  // namespace

TEST(GenerateImage, Deterministic) {
    EXPECT_EQ(generate_image(3, 7, 1, 16, 16), generate_image(3, 7, 1, 16, 16));
}

TEST(GenerateImage, NeighbouringIndicesDiffer) {
    const Image a = generate_image(1, 0, 1, 16, 16);
    const Image b = generate_image(1, 1, 1, 16, 16);
    std::size_t diff = 0;
    for (std::size_t i = 0; i < a.size(); ++i) diff += a.pixels[i] != b.pixels[i];
    EXPECT_GE(diff * 10, a.size());
}

TEST(GenerateImage, PixelsInUnitRange) {
    for (std::uint64_t i = 0; i < 200; ++i) {
        const Image img = generate_image(5, i, 3, 8, 12);
        ASSERT_EQ(img.size(), 3u * 8u * 12u);
        const auto [lo, hi] = std::minmax_element(img.pixels.begin(), img.pixels.end());
        EXPECT_GE(*lo, 0.0);
        EXPECT_LE(*hi, 1.0);
    }
}

TEST(GenerateImage, RejectsZeroDimension) {
    EXPECT_THROW(generate_image(1, 0, 1, 0, 16), ConfigError);
}

TEST(Splits, DistinctRolesAreDisjoint) {
    const auto a = make_split(SplitRole::codec_train, 64, 9, 1, 16, 16);
    const auto b = make_split(SplitRole::agent_train, 64, 9, 1, 16, 16);
    const auto c = make_split(SplitRole::test, 64, 9, 1, 16, 16);
    EXPECT_NO_THROW(check_disjoint({&a, &b, &c}));
    EXPECT_THROW(check_disjoint({&a, &a}), ConfigError);
}

TEST(Splits, EmptySplitIsRejected) {
    EXPECT_THROW(make_split(SplitRole::test, 0, 1, 1, 16, 16), ConfigError);
}

TEST(RawImages, AllZeroImage) {
    const std::string path = temp_path("zero.imgs");
    write_raw_images(path, {Image(1, 2, 3, 0.0)});
    const auto s = load_raw_images(path, 1, 2, 3);
    ASSERT_EQ(s.images.size(), 1u);
    EXPECT_EQ(s.images[0], Image(1, 2, 3, 0.0));
}

TEST(RawImages, ByteEndpointsScaleExactly) {
    const std::string path = temp_path("endpoints.imgs");
    {
        std::ofstream os(path, std::ios::binary);
        os << "JS3C-IMGS v1 1 1 1 2\n";
        os.put(static_cast<char>(0));
        os.put(static_cast<char>(255));
    }
    const auto s = load_raw_images(path, 1, 1, 2);
    EXPECT_EQ(s.images[0].pixels[0], 0.0);
    EXPECT_EQ(s.images[0].pixels[1], 1.0);
}

TEST(RawImages, RoundTripWithinQuantization) {
    const std::string path = temp_path("split.imgs");
    const auto split = make_split(SplitRole::test, 20, 4, 1, 16, 16);
    write_raw_images(path, split.images);
    const auto back = load_raw_images(path, 1, 16, 16);
    ASSERT_EQ(back.images.size(), split.images.size());
    for (std::size_t i = 0; i < split.images.size(); ++i)
        for (std::size_t j = 0; j < split.images[i].size(); ++j)
            EXPECT_LE(std::abs(back.images[i].pixels[j] - split.images[i].pixels[j]), 1.0 / 255.0);
}

TEST(RawImages, TruncationReportsOffset) {
    const std::string path = temp_path("short.imgs");
    {
        std::ofstream os(path, std::ios::binary);
        os << "JS3C-IMGS v1 2 1 2 2\n";
        for (int i = 0; i < 6; ++i) os.put('a');
    }
    try {
        load_raw_images(path, 1, 2, 2);
        FAIL() << "expected FormatError";
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("byte offset 27"), std::string::npos) << e.what();
    }
}

TEST(RawImages, DimensionMismatchThrows) {
    const std::string path = temp_path("dims.imgs");
    write_raw_images(path, {Image(1, 2, 2, 0.5)});
    EXPECT_THROW(load_raw_images(path, 1, 4, 4), FormatError);
}

TEST(Psnr, IdenticalImagesAreCapped) {
    const Image p = generate_image(1, 0, 1, 16, 16);
    EXPECT_EQ(psnr(p, p), 99.0);
}

TEST(Psnr, ConstantShift) {
    Image p(1, 4, 4, 0.3), q(1, 4, 4, 0.4);
    EXPECT_NEAR(psnr(p, q), 20.0, 1e-9);
}

TEST(Psnr, MatchesDirectMse) {
    Rng rng = make_stream(8);
    for (int t = 0; t < 20; ++t) {
        Image p(1, 5, 5), q(1, 5, 5);
        for (auto& v : p.pixels) v = uniform(rng, 0, 1);
        for (auto& v : q.pixels) v = uniform(rng, 0, 1);
        double s = 0;
        for (std::size_t i = 0; i < 25; ++i) s += std::pow(p.pixels[i] - q.pixels[i], 2);
        EXPECT_NEAR(psnr(p, q), -10.0 * std::log10(s / 25.0), 1e-9);
    }
}

TEST(Psnr, DimensionMismatchThrows) {
    EXPECT_THROW(psnr(Image(1, 2, 2), Image(1, 2, 3)), ConfigError);
}

TEST(Psnr, DecreasesWithNoiseVariance) {
    const Image p = generate_image(2, 0, 1, 16, 16);
    Rng rng = make_stream(2, {1});
    double previous = 1e9;
    for (double sigma : {0.01, 0.03, 0.1, 0.3}) {
        double total = 0;
        for (int t = 0; t < 100; ++t) total += psnr(p, noisy(p, sigma, rng));
        EXPECT_LT(total / 100, previous);
        previous = total / 100;
    }
}

TEST(Projector, RowsAreUnitNormAndSeeded) {
    const PerceptualProjector a(7, 32, 48), b(7, 32, 48), c(8, 32, 48);
    EXPECT_EQ(a.matrix(), b.matrix());
    EXPECT_NE(a.matrix(), c.matrix());
    for (std::size_t f = 0; f < 32; ++f) {
        double s = 0;
        for (std::size_t j = 0; j < 48; ++j) s += a.matrix()[f * 48 + j] * a.matrix()[f * 48 + j];
        EXPECT_NEAR(std::sqrt(s), 1.0, 1e-9);
    }
}

TEST(PerceptualScore, IdenticalInputsScoreZero) {
    const PerceptualProjector proj(1, 32, 256);
    const Image p = generate_image(1, 3, 1, 16, 16);
    EXPECT_EQ(perceptual_score(p, p, proj), 0.0);
}

TEST(PerceptualScore, ClosedFormFromDistance) {
    const PerceptualProjector proj(1, 16, 256);
    const Image p = generate_image(1, 3, 1, 16, 16);
    const Image q = generate_image(1, 4, 1, 16, 16);
    const double d = proj.projected_distance(p, q);
    EXPECT_EQ(perceptual_score(p, q, proj), 1.0 - std::exp(-d / 4.0));
}

TEST(PerceptualScore, SymmetricAndBounded) {
    const PerceptualProjector proj(2, 32, 256);
    for (std::uint64_t i = 0; i < 50; ++i) {
        const Image p = generate_image(3, i, 1, 16, 16);
        const Image q = generate_image(3, i + 100, 1, 16, 16);
        const double s = perceptual_score(p, q, proj);
        EXPECT_EQ(s, perceptual_score(q, p, proj));
        EXPECT_GE(s, 0.0);
        EXPECT_LT(s, 1.0);
    }
}

TEST(PerceptualScore, HeavierNoiseScoresHigher) {
    const PerceptualProjector proj(3, 32, 256);
    Rng rng = make_stream(3);
    int wins = 0;
    for (int t = 0; t < 100; ++t) {
        const Image p = generate_image(4, static_cast<std::uint64_t>(t), 1, 16, 16);
        wins += perceptual_score(p, noisy(p, 0.3, rng), proj) > perceptual_score(p, noisy(p, 0.03, rng), proj);
    }
    EXPECT_EQ(wins, 100);
}

TEST(PerceptualScore, DimensionMismatchThrows) {
    const PerceptualProjector proj(3, 8, 16);
    EXPECT_THROW(perceptual_score(Image(1, 4, 4), Image(1, 4, 5), proj), ConfigError);
    EXPECT_THROW(perceptual_score(Image(1, 5, 5), Image(1, 5, 5), proj), ConfigError);
}
