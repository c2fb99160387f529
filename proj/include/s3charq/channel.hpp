#pragma once

// Real-valued AWGN and block-fading Rayleigh channels. Rayleigh output is coherently equalized
// (perfect receiver CSI), so the receiver sees c + n / h.

#include <cmath>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "s3charq/errors.hpp"
#include "s3charq/rng.hpp"

namespace s3charq {

enum class ChannelKind { awgn, rayleigh };

inline std::string_view to_string(ChannelKind k) { return k == ChannelKind::awgn ? "awgn" : "rayleigh"; }

inline ChannelKind parse_channel_kind(std::string_view s) {
    if (s == "awgn") return ChannelKind::awgn;
    if (s == "rayleigh") return ChannelKind::rayleigh;
    throw ConfigError("unknown channel kind '" + std::string(s) + "' (expected awgn or rayleigh)");
}

/// Noise standard deviation for unit average signal power.
inline double snr_to_noise_std(double snr_db) { return std::sqrt(std::pow(10.0, -snr_db / 10.0)); }

struct ChannelRealization {
    ChannelKind kind = ChannelKind::awgn;
    double snr_db = 0.0;
    double gain = 1.0;
    double noise_std = 1.0;
};

/// One block-fading draw: |h| with E[h^2] = 1 for Rayleigh, h = 1 for AWGN.
inline ChannelRealization draw_realization(ChannelKind kind, double snr_db, Rng& rng) {
    ChannelRealization ch{kind, snr_db, 1.0, snr_to_noise_std(snr_db)};
    if (kind == ChannelKind::rayleigh) {
        const double a = standard_normal(rng);
        const double b = standard_normal(rng);
        ch.gain = std::sqrt(0.5 * (a * a + b * b));
        // Measure-zero, but a zero gain would make equalization undefined.
        if (ch.gain < 1e-12) ch.gain = 1e-12;
    }
    return ch;
}

/// Equalized additive noise for a codeword of length `n` whose first `active` symbols are sent.
inline std::vector<double> equalized_noise(const ChannelRealization& ch, std::size_t active, std::size_t n, Rng& rng) {
    if (active > n) throw ConfigError("active symbol count exceeds codeword length");
    std::vector<double> noise(n, 0.0);
    const double s = ch.noise_std / ch.gain;
    for (std::size_t i = 0; i < active; ++i) noise[i] = s * standard_normal(rng);
    return noise;
}

/// Sends the leading `active` symbols of `c`; the tail is not transmitted and arrives as exact zeros.
inline std::vector<double> transmit(std::span<const double> c, std::size_t active, const ChannelRealization& ch,
                                    Rng& rng) {
    const auto noise = equalized_noise(ch, active, c.size(), rng);
    std::vector<double> out(c.size(), 0.0);
    for (std::size_t i = 0; i < active; ++i) out[i] = c[i] + noise[i];
    return out;
}

}  // namespace s3charq
