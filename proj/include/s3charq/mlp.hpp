#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "s3charq/autodiff.hpp"
#include "s3charq/errors.hpp"
#include "s3charq/rng.hpp"

namespace s3charq::ad {

enum class Activation { relu, tanh, sigmoid, identity };

inline std::string_view to_string(Activation a) {
    switch (a) {
        case Activation::relu: return "relu";
        case Activation::tanh: return "tanh";
        case Activation::sigmoid: return "sigmoid";
        case Activation::identity: return "identity";
    }
    return "identity";
}

inline Var activate(const Var& x, Activation a) {
    switch (a) {
        case Activation::relu: return relu(x);
        case Activation::tanh: return tanh(x);
        case Activation::sigmoid: return sigmoid(x);
        case Activation::identity: return x;
    }
    return x;
}

struct Layer {
    Var weight;  // in x out
    Var bias;    // 1 x out
    Activation activation = Activation::identity;
};

/// Fully connected stack. Parameters are named `<prefix>.<layer>.weight|bias`.
class Mlp {
public:
    Mlp() = default;

    /// `widths` lists input, hidden..., output sizes; `hidden` applies to every layer but the
    /// last, which uses `output`.
    Mlp(std::string prefix, const std::vector<std::size_t>& widths, Activation hidden, Activation output,
        Rng& rng)
        : prefix_(std::move(prefix)) {
        if (widths.size() < 2) throw ConfigError("Mlp '" + prefix_ + "' needs at least input and output widths");
        for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
            const std::size_t in = widths[l];
            const std::size_t out = widths[l + 1];
            if (in == 0 || out == 0) throw ConfigError("Mlp '" + prefix_ + "' has a zero-width layer");
            const Activation act = (l + 2 == widths.size()) ? output : hidden;
            const double std_dev = act == Activation::relu ? std::sqrt(2.0 / static_cast<double>(in))
                                                           : std::sqrt(1.0 / static_cast<double>(in));
            Tensor w = Tensor::matrix(in, out);
            for (auto& v : w.data) v = std_dev * standard_normal(rng);
            add_layer(std::move(w), Tensor::matrix(1, out), act);
        }
    }

    /// Builds from explicit weights. Used by tests and by checkpoint loading.
    static Mlp from_layers(std::string prefix, std::vector<Tensor> weights, std::vector<Tensor> biases,
                           std::vector<Activation> activations) {
        if (weights.size() != biases.size() || weights.size() != activations.size() || weights.empty())
            throw ConfigError("Mlp::from_layers: inconsistent layer lists");
        Mlp net;
        net.prefix_ = std::move(prefix);
        for (std::size_t l = 1; l < weights.size(); ++l) {
            if (weights[l].rows() != weights[l - 1].cols())
                throw ConfigError("Mlp::from_layers: layer " + std::to_string(l) + " input width " +
                                  std::to_string(weights[l].rows()) + " does not chain from " +
                                  std::to_string(weights[l - 1].cols()));
        }
        for (std::size_t l = 0; l < weights.size(); ++l)
            net.add_layer(std::move(weights[l]), std::move(biases[l]), activations[l]);
        return net;
    }

    Var forward(const Var& input) const {
        if (layers_.empty()) throw ConfigError("Mlp '" + prefix_ + "' has no layers");
        if (input.cols() != input_dim()) {
            throw ConfigError("Mlp '" + prefix_ + "': input width " + std::to_string(input.cols()) +
                              " but network expects " + std::to_string(input_dim()));
        }
        Var h = input;
        for (const auto& layer : layers_) h = activate(add_bias(matmul(h, layer.weight), layer.bias), layer.activation);
        return h;
    }

    /// Graph-free evaluation; bit-identical to forward().value().
    Tensor infer(const Tensor& input) const {
        NoGradGuard guard;
        return forward(constant(input)).value();
    }

    std::size_t input_dim() const { return layers_.front().weight.rows(); }
    std::size_t output_dim() const { return layers_.back().weight.cols(); }
    const std::string& prefix() const { return prefix_; }
    const std::vector<Layer>& layers() const { return layers_; }
    bool empty() const { return layers_.empty(); }

    std::vector<Var> parameters() const {
        std::vector<Var> out;
        for (const auto& l : layers_) {
            out.push_back(l.weight);
            out.push_back(l.bias);
        }
        return out;
    }

    void set_trainable(bool trainable) const {
        for (auto& p : parameters()) p.set_requires_grad(trainable);
    }

    /// Deep copy with fresh parameter nodes.
    Mlp clone() const {
        if (layers_.empty()) return Mlp{};
        std::vector<Tensor> w, b;
        std::vector<Activation> a;
        for (const auto& l : layers_) {
            w.push_back(l.weight.value());
            b.push_back(l.bias.value());
            a.push_back(l.activation);
        }
        Mlp copy = from_layers(prefix_, std::move(w), std::move(b), std::move(a));
        copy.set_trainable(layers_.front().weight.requires_grad());
        return copy;
    }

private:
    void add_layer(Tensor w, Tensor b, Activation act) {
        const std::string base = prefix_ + "." + std::to_string(layers_.size());
        if (b.rows() != 1 || b.cols() != w.cols()) throw ConfigError("bias of " + base + " does not match weight");
        w.shape = {w.rows(), w.cols()};
        b.shape = {1, b.cols()};
        layers_.push_back({parameter(std::move(w), base + ".weight"), parameter(std::move(b), base + ".bias"), act});
    }

    std::string prefix_;
    std::vector<Layer> layers_;
};

}  // namespace s3charq::ad
