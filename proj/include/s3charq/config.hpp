#pragma once

// Run configuration: flat `key = value` lines grouped under [data], [codec], [channel], [train],
// [agent], [eval]. `#` starts a comment. Lists are comma-separated. Unknown keys are errors.
// config/defaults.conf documents every key with its default.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "s3charq/channel.hpp"
#include "s3charq/codec.hpp"
#include "s3charq/errors.hpp"

namespace s3charq {

struct DataConfig {
    std::uint64_t seed = 1;
    std::size_t channels = 1;
    std::size_t height = 16;
    std::size_t width = 16;
    std::size_t codec_train = 4096;
    std::size_t agent_train = 1024;
    std::size_t test = 1024;
    std::uint64_t projector_seed = 7;
    std::size_t features = 128;
    std::string dir = "data";
};

struct CodecConfig {
    std::size_t K = 64;
    std::size_t k = 8;
    std::size_t hidden = 256;
    double gamma = kDefaultGamma;
    double estimate_weight = 30.0;  // weight of the estimator term in the stage-2/3 loss
};

struct ChannelConfig {
    ChannelKind kind = ChannelKind::awgn;
    std::vector<double> snr_db_grid{0, 1, 4, 7, 10, 13};
};

struct TrainConfig {
    std::uint64_t seed = 11;
    std::size_t stage1_epochs = 200;
    std::size_t stage2_epochs = 400;
    std::size_t stage3_epochs = 200;
    std::size_t batch = 64;
    double lr = 1e-4;
    double stage2_lr = 1e-3;
    double stage3_lr = 1e-3;
    double r_min = 0.1;
    double r_max = 1.0;
    std::string out_dir = "run";
};

struct AgentConfig {
    std::uint64_t seed = 23;
    std::size_t epochs = 200;
    double lr = 1e-4;
    double clip_eps = 0.2;
    std::size_t ppo_epochs = 4;
    std::size_t minibatch = 64;
    double entropy_coef = 0.01;  // decayed linearly to 0 over training
    double gamma = 0.99;
    double lambda = 0.95;
    std::size_t width = 64;
    double threshold_quantile = 0.9;
};

struct EvalConfig {
    double R = 0.125;
    double R2 = 0.125;
    std::vector<double> r_values{0.125, 0.25, 0.5};
    std::vector<std::uint64_t> seeds{101};
    std::vector<std::string> policies{"none", "always", "threshold", "oracle", "agent"};
    double threshold_scale = 1.0;
    double calibrate_snr = 1.0;
    double target_retx = -1.0;  // negative: match the agent's ratio at calibrate_snr
    std::string out_dir = "eval";
};

struct RunConfig {
    DataConfig data;
    CodecConfig codec;
    ChannelConfig channel;
    TrainConfig train;
    AgentConfig agent;
    EvalConfig eval;

    CodecDims dims() const {
        return {data.channels, data.height, data.width, codec.K, codec.k, codec.hidden};
    }
};

namespace detail {

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
    T out{};
    const char* b = v.data();
    const char* e = v.data() + v.size();
    auto [ptr, ec] = std::from_chars(b, e, out);
    if (ec != std::errc() || ptr != e) throw ConfigError("config key '" + key + "': cannot parse '" + v + "'");
    return out;
}

template <class T>
std::vector<T> parse_list(const std::string& key, const std::string& v) {
    std::vector<T> out;
    for (const auto& item : split_list(v)) out.push_back(parse_number<T>(key, item));
    if (out.empty()) throw ConfigError("config key '" + key + "': empty list");
    return out;
}

}  // namespace detail

/// Applies `key = value` text on top of `cfg`. `origin` names the source in error messages.
inline void apply_config_text(RunConfig& cfg, std::string_view text, const std::string& origin = "config") {
    using Setter = std::function<void(const std::string&, const std::string&)>;
    auto sz = [](std::size_t& dst) -> Setter { return [&dst](auto& k, auto& v) { dst = detail::parse_number<std::size_t>(k, v); }; };
    auto u64 = [](std::uint64_t& dst) -> Setter { return [&dst](auto& k, auto& v) { dst = detail::parse_number<std::uint64_t>(k, v); }; };
    auto dbl = [](double& dst) -> Setter { return [&dst](auto& k, auto& v) { dst = detail::parse_number<double>(k, v); }; };
    auto str = [](std::string& dst) -> Setter { return [&dst](auto&, auto& v) { dst = v; }; };

    const std::map<std::string, Setter> keys = {
        {"data.seed", u64(cfg.data.seed)},
        {"data.channels", sz(cfg.data.channels)},
        {"data.height", sz(cfg.data.height)},
        {"data.width", sz(cfg.data.width)},
        {"data.codec_train", sz(cfg.data.codec_train)},
        {"data.agent_train", sz(cfg.data.agent_train)},
        {"data.test", sz(cfg.data.test)},
        {"data.projector_seed", u64(cfg.data.projector_seed)},
        {"data.features", sz(cfg.data.features)},
        {"data.dir", str(cfg.data.dir)},
        {"codec.K", sz(cfg.codec.K)},
        {"codec.k", sz(cfg.codec.k)},
        {"codec.hidden", sz(cfg.codec.hidden)},
        {"codec.gamma", dbl(cfg.codec.gamma)},
        {"codec.estimate_weight", dbl(cfg.codec.estimate_weight)},
        {"channel.kind", [&cfg](auto&, auto& v) { cfg.channel.kind = parse_channel_kind(v); }},
        {"channel.snr_db_grid", [&cfg](auto& k, auto& v) { cfg.channel.snr_db_grid = detail::parse_list<double>(k, v); }},
        {"train.seed", u64(cfg.train.seed)},
        {"train.stage1_epochs", sz(cfg.train.stage1_epochs)},
        {"train.stage2_epochs", sz(cfg.train.stage2_epochs)},
        {"train.stage3_epochs", sz(cfg.train.stage3_epochs)},
        {"train.batch", sz(cfg.train.batch)},
        {"train.lr", dbl(cfg.train.lr)},
        {"train.stage2_lr", dbl(cfg.train.stage2_lr)},
        {"train.stage3_lr", dbl(cfg.train.stage3_lr)},
        {"train.r_min", dbl(cfg.train.r_min)},
        {"train.r_max", dbl(cfg.train.r_max)},
        {"train.out_dir", str(cfg.train.out_dir)},
        {"agent.seed", u64(cfg.agent.seed)},
        {"agent.epochs", sz(cfg.agent.epochs)},
        {"agent.lr", dbl(cfg.agent.lr)},
        {"agent.clip_eps", dbl(cfg.agent.clip_eps)},
        {"agent.ppo_epochs", sz(cfg.agent.ppo_epochs)},
        {"agent.minibatch", sz(cfg.agent.minibatch)},
        {"agent.entropy_coef", dbl(cfg.agent.entropy_coef)},
        {"agent.gamma", dbl(cfg.agent.gamma)},
        {"agent.lambda", dbl(cfg.agent.lambda)},
        {"agent.width", sz(cfg.agent.width)},
        {"agent.threshold_quantile", dbl(cfg.agent.threshold_quantile)},
        {"eval.R", dbl(cfg.eval.R)},
        {"eval.R2", dbl(cfg.eval.R2)},
        {"eval.r_values", [&cfg](auto& k, auto& v) { cfg.eval.r_values = detail::parse_list<double>(k, v); }},
        {"eval.seeds", [&cfg](auto& k, auto& v) { cfg.eval.seeds = detail::parse_list<std::uint64_t>(k, v); }},
        {"eval.policies", [&cfg](auto&, auto& v) { cfg.eval.policies = detail::split_list(v); }},
        {"eval.threshold_scale", dbl(cfg.eval.threshold_scale)},
        {"eval.calibrate_snr", dbl(cfg.eval.calibrate_snr)},
        {"eval.target_retx", dbl(cfg.eval.target_retx)},
        {"eval.out_dir", str(cfg.eval.out_dir)},
    };

    std::string section;
    std::istringstream in{std::string(text)};
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const std::string where = origin + ":" + std::to_string(lineno);
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError(where + ": unterminated section header");
            section = detail::trim(std::string_view(line).substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
        const std::string key = detail::trim(std::string_view(line).substr(0, eq));
        const std::string value = detail::trim(std::string_view(line).substr(eq + 1));
        const std::string full = section.empty() ? key : section + "." + key;
        auto it = keys.find(full);
        if (it == keys.end()) throw ConfigError(where + ": unknown key '" + full + "'");
        try {
            it->second(full, value);
        } catch (const ConfigError& e) {
            throw ConfigError(where + ": " + e.what());
        }
    }
}

inline void validate_config(const RunConfig& cfg) {
    auto fail = [](const std::string& m) { throw ConfigError(m); };
    if (cfg.codec.K == 0 || cfg.codec.k == 0 || cfg.codec.hidden < 2) fail("codec dimensions must be positive");
    if (cfg.data.channels == 0 || cfg.data.height == 0 || cfg.data.width == 0) fail("image dimensions must be positive");
    if (cfg.data.codec_train == 0 || cfg.data.agent_train == 0 || cfg.data.test == 0) fail("dataset sizes must be positive");
    if (!(cfg.train.r_min > 0.0 && cfg.train.r_min <= cfg.train.r_max && cfg.train.r_max <= 1.0))
        fail("train.r_min/r_max must satisfy 0 < r_min <= r_max <= 1");
    for (double r : {cfg.eval.R, cfg.eval.R2})
        if (!(r > 0.0 && r <= 1.0)) fail("eval.R and eval.R2 must lie in (0, 1]");
    for (double r : cfg.eval.r_values)
        if (!(r > 0.0 && r <= 1.0)) fail("eval.r_values must lie in (0, 1]");
    if (cfg.channel.snr_db_grid.empty()) fail("channel.snr_db_grid is empty");
    if (cfg.train.batch == 0 || cfg.agent.minibatch == 0) fail("batch sizes must be positive");
    if (!(cfg.train.lr > 0.0 && cfg.train.stage2_lr > 0.0 && cfg.train.stage3_lr > 0.0 && cfg.agent.lr > 0.0))
        fail("learning rates must be positive");
    if (!(cfg.codec.estimate_weight >= 0.0) || !(cfg.codec.gamma >= 0.0))
        fail("codec.gamma and codec.estimate_weight must be non-negative");
    if (!(cfg.agent.threshold_quantile > 0.0 && cfg.agent.threshold_quantile < 1.0))
        fail("agent.threshold_quantile must lie in (0, 1)");
    if (!(cfg.eval.threshold_scale > 0.0)) fail("eval.threshold_scale must be positive");
    if (cfg.eval.seeds.empty()) fail("eval.seeds is empty");
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    RunConfig cfg;
    apply_config_text(cfg, ss.str(), path);
    validate_config(cfg);
    return cfg;
}

}  // namespace s3charq
