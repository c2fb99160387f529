#pragma once

// Wire frame for one codeword in one round.
//
//   offset  size  field
//   0       4     magic "J3CF"
//   4       1     version (1)
//   5       1     round (1 or 2)
//   6       1     role (0 = jscc, 1 = check)
//   7       4     active length N, u32 LE
//   11      4     R, f32 LE
//   15      4     snr_db, f32 LE
//   19      4N    payload, f32 LE

#include <bit>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "s3charq/errors.hpp"

namespace s3charq {

enum class FrameRole : std::uint8_t { jscc = 0, check = 1 };

struct Frame {
    std::uint8_t round = 1;
    FrameRole role = FrameRole::jscc;
    float ratio = 1.0f;
    float snr_db = 0.0f;
    std::vector<float> payload;
};

inline constexpr std::size_t kFrameHeaderBytes = 19;
inline constexpr std::uint8_t kFrameVersion = 1;

/// Bitwise equality (distinguishes -0.0 from 0.0, compares NaN payloads by bits).
inline bool bit_equal(const Frame& a, const Frame& b) {
    if (a.round != b.round || a.role != b.role || a.payload.size() != b.payload.size()) return false;
    if (std::bit_cast<std::uint32_t>(a.ratio) != std::bit_cast<std::uint32_t>(b.ratio)) return false;
    if (std::bit_cast<std::uint32_t>(a.snr_db) != std::bit_cast<std::uint32_t>(b.snr_db)) return false;
    for (std::size_t i = 0; i < a.payload.size(); ++i)
        if (std::bit_cast<std::uint32_t>(a.payload[i]) != std::bit_cast<std::uint32_t>(b.payload[i])) return false;
    return true;
}

namespace detail {
inline void put_u32_le(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xffu));
}
inline std::uint32_t get_u32_le(std::span<const std::uint8_t> in, std::size_t at) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in[at + i]) << (8 * i);
    return v;
}
}  // namespace detail

inline std::vector<std::uint8_t> serialize_frame(const Frame& f) {
    if (f.round != 1 && f.round != 2) throw ProtocolError("frame round must be 1 or 2");
    std::vector<std::uint8_t> out{'J', '3', 'C', 'F', kFrameVersion, f.round, static_cast<std::uint8_t>(f.role)};
    out.reserve(kFrameHeaderBytes + 4 * f.payload.size());
    detail::put_u32_le(out, static_cast<std::uint32_t>(f.payload.size()));
    detail::put_u32_le(out, std::bit_cast<std::uint32_t>(f.ratio));
    detail::put_u32_le(out, std::bit_cast<std::uint32_t>(f.snr_db));
    for (float v : f.payload) detail::put_u32_le(out, std::bit_cast<std::uint32_t>(v));
    return out;
}

inline Frame parse_frame(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < kFrameHeaderBytes)
        throw FormatError("frame shorter than header: " + std::to_string(bytes.size()) + " bytes");
    if (bytes[0] != 'J' || bytes[1] != '3' || bytes[2] != 'C' || bytes[3] != 'F')
        throw FormatError("frame magic is not J3CF");
    if (bytes[4] != kFrameVersion) throw FormatError("unsupported frame version " + std::to_string(bytes[4]));
    Frame f;
    f.round = bytes[5];
    if (f.round != 1 && f.round != 2) throw FormatError("frame round " + std::to_string(f.round) + " is not 1 or 2");
    if (bytes[6] > 1) throw FormatError("frame role byte " + std::to_string(bytes[6]) + " is not jscc(0) or check(1)");
    f.role = static_cast<FrameRole>(bytes[6]);
    const std::uint32_t n = detail::get_u32_le(bytes, 7);
    f.ratio = std::bit_cast<float>(detail::get_u32_le(bytes, 11));
    f.snr_db = std::bit_cast<float>(detail::get_u32_le(bytes, 15));
    const std::size_t expected = kFrameHeaderBytes + 4 * static_cast<std::size_t>(n);
    if (bytes.size() != expected) {
        throw FormatError("frame length mismatch: header declares " + std::to_string(n) + " symbols (" +
                          std::to_string(expected) + " bytes), got " + std::to_string(bytes.size()) + " bytes");
    }
    f.payload.resize(n);
    for (std::uint32_t i = 0; i < n; ++i)
        f.payload[i] = std::bit_cast<float>(detail::get_u32_le(bytes, kFrameHeaderBytes + 4 * i));
    return f;
}

inline Frame frame_roundtrip(const Frame& f) { return parse_frame(serialize_frame(f)); }

}  // namespace s3charq
