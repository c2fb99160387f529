#pragma once

// Flat named-tensor container.
//
//   "JS3C-CKPT v1\n"
//   repeated until end of stream:
//     u32 name length, name bytes (UTF-8)
//     u32 rank, rank x u64 dims
//     prod(dims) x f64 values
//
// All integers and floats are little-endian.

#include <bit>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "s3charq/autodiff.hpp"
#include "s3charq/errors.hpp"
#include "s3charq/mlp.hpp"

namespace s3charq::ad {

inline constexpr const char* kCheckpointMagic = "JS3C-CKPT v1\n";

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xffu));
}
inline void put_u64(std::ostream& os, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline std::uint64_t get_le(std::istream& is, int bytes, const char* what) {
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) {
        const int c = is.get();
        if (c == std::char_traits<char>::eof())
            throw CheckpointError(std::string("checkpoint truncated while reading ") + what + " at byte " +
                                  std::to_string(static_cast<long long>(is.tellg())));
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
    }
    return v;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const std::vector<NamedTensor>& tensors) {
    os << kCheckpointMagic;
    for (const auto& nt : tensors) {
        detail::put_u32(os, static_cast<std::uint32_t>(nt.name.size()));
        os.write(nt.name.data(), static_cast<std::streamsize>(nt.name.size()));
        detail::put_u32(os, static_cast<std::uint32_t>(nt.tensor.shape.size()));
        for (auto d : nt.tensor.shape) detail::put_u64(os, d);
        for (double v : nt.tensor.data) detail::put_u64(os, std::bit_cast<std::uint64_t>(v));
    }
}

inline std::vector<NamedTensor> read_checkpoint(std::istream& is) {
    std::string magic(std::char_traits<char>::length(kCheckpointMagic), '\0');
    is.read(magic.data(), static_cast<std::streamsize>(magic.size()));
    if (!is || magic != kCheckpointMagic) throw CheckpointError("not a JS3C-CKPT v1 checkpoint");
    std::vector<NamedTensor> out;
    while (is.peek() != std::char_traits<char>::eof()) {
        NamedTensor nt;
        const auto len = detail::get_le(is, 4, "name length");
        nt.name.resize(len);
        is.read(nt.name.data(), static_cast<std::streamsize>(len));
        if (!is) throw CheckpointError("checkpoint truncated inside a tensor name");
        const auto rank = detail::get_le(is, 4, "rank");
        std::vector<std::size_t> shape;
        for (std::uint64_t i = 0; i < rank; ++i) shape.push_back(detail::get_le(is, 8, "dims"));
        Tensor t(shape, 0.0);
        for (auto& v : t.data) v = std::bit_cast<double>(detail::get_le(is, 8, ("values of " + nt.name).c_str()));
        nt.tensor = std::move(t);
        out.push_back(std::move(nt));
    }
    return out;
}

inline std::string serialize_checkpoint(const std::vector<NamedTensor>& tensors) {
    std::ostringstream os(std::ios::binary);
    write_checkpoint(os, tensors);
    return os.str();
}

inline void save_checkpoint(const std::string& path, const std::vector<NamedTensor>& tensors) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw CheckpointError("cannot open " + path + " for writing");
    write_checkpoint(os, tensors);
    if (!os) throw CheckpointError("write failed for " + path);
}

inline std::vector<NamedTensor> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("cannot open checkpoint " + path);
    return read_checkpoint(is);
}

/// Parameters of `net` plus one `<prefix>.<layer>.act` entry per layer holding the activation id.
inline void append_mlp(std::vector<NamedTensor>& out, const Mlp& net) {
    for (std::size_t l = 0; l < net.layers().size(); ++l) {
        const auto& layer = net.layers()[l];
        out.push_back({layer.weight.name(), layer.weight.value()});
        out.push_back({layer.bias.name(), layer.bias.value()});
        out.push_back({net.prefix() + "." + std::to_string(l) + ".act",
                       Tensor(std::vector<std::size_t>{1}, std::vector<double>{static_cast<double>(static_cast<int>(layer.activation))})});
    }
    for (auto& nt : out) nt.tensor.grad.clear();
}

using TensorIndex = std::map<std::string, const Tensor*>;

inline TensorIndex index_tensors(const std::vector<NamedTensor>& tensors) {
    TensorIndex idx;
    for (const auto& nt : tensors) idx[nt.name] = &nt.tensor;
    return idx;
}

inline const Tensor& require_tensor(const TensorIndex& idx, const std::string& name) {
    auto it = idx.find(name);
    if (it == idx.end()) throw CheckpointError("checkpoint is missing tensor '" + name + "'");
    return *it->second;
}

inline Mlp extract_mlp(const TensorIndex& idx, const std::string& prefix) {
    std::vector<Tensor> w, b;
    std::vector<Activation> a;
    for (std::size_t l = 0;; ++l) {
        const std::string base = prefix + "." + std::to_string(l);
        if (!idx.contains(base + ".weight")) break;
        w.push_back(require_tensor(idx, base + ".weight"));
        b.push_back(require_tensor(idx, base + ".bias"));
        a.push_back(static_cast<Activation>(static_cast<int>(require_tensor(idx, base + ".act").data.at(0))));
        if (w.back().shape.size() != 2 || b.back().cols() != w.back().cols())
            throw CheckpointError("malformed layer tensors under " + base);
    }
    if (w.empty()) throw CheckpointError("checkpoint has no layers under prefix '" + prefix + "'");
    return Mlp::from_layers(prefix, std::move(w), std::move(b), std::move(a));
}

}  // namespace s3charq::ad
