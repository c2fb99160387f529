#pragma once

// Condition-aware retransmission agent: state construction, grouped actor and critic networks,
// generalized advantage estimation, and clipped-surrogate PPO updates.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "s3charq/adam.hpp"
#include "s3charq/autodiff.hpp"
#include "s3charq/checkpoint.hpp"
#include "s3charq/codec.hpp"
#include "s3charq/errors.hpp"
#include "s3charq/harq.hpp"
#include "s3charq/mlp.hpp"
#include "s3charq/reward.hpp"
#include "s3charq/rng.hpp"

namespace s3charq {

struct AgentState {
    double snr_db = 0.0;
    double R = 1.0;
    double threshold = 0.0;
    double estimate = 0.0;
    double deviation = 0.0;  // estimate - threshold
    std::vector<double> check_codeword;
};

/// Uses the received (equalized) round-1 check codeword, the same tensor the decoder sees.
inline AgentState build_state(const TransmissionRecord& rec, double threshold) {
    return {rec.snr_db, rec.R, threshold, rec.round1.estimate, rec.round1.estimate - threshold, rec.round1.check_rx};
}

/// Projects each semantic group (channel, quality, codeword) through its own linear layer,
/// concatenates, and runs a trunk. Actor and critic hold separate parameters.
struct GroupedNet {
    Mlp channel;   // [snr/13, R] -> width
    Mlp quality;   // [threshold, estimate, deviation] * quality_scale -> width
    Mlp codeword;  // k -> width
    Mlp trunk;     // 3*width -> out

    std::vector<Var> parameters() const {
        std::vector<Var> out;
        for (const Mlp* m : {&channel, &quality, &codeword, &trunk}) {
            auto p = m->parameters();
            out.insert(out.end(), p.begin(), p.end());
        }
        return out;
    }

    Var forward(const Var& ch, const Var& q, const Var& cw) const {
        Var h = ad::concat_cols({channel.forward(ch), quality.forward(q), codeword.forward(cw)});
        return trunk.forward(ad::tanh(h));
    }
};

inline GroupedNet make_grouped(const std::string& prefix, std::size_t k, std::size_t width, std::size_t out, Rng& rng) {
    return {Mlp(prefix + ".channel", {2, width}, Activation::identity, Activation::identity, rng),
            Mlp(prefix + ".quality", {3, width}, Activation::identity, Activation::identity, rng),
            Mlp(prefix + ".codeword", {k, width}, Activation::identity, Activation::identity, rng),
            Mlp(prefix + ".trunk", {3 * width, width, out}, Activation::tanh, Activation::identity, rng)};
}

struct ActorCritic {
    GroupedNet actor;   // 2 logits: accept, retransmit
    GroupedNet critic;  // 1 value
    std::size_t check_len = 0;
    // Quality-group inputs are multiplied by this so they sit near unit scale.
    double quality_scale = 1.0;

    std::vector<Var> parameters() const {
        auto a = actor.parameters();
        auto c = critic.parameters();
        a.insert(a.end(), c.begin(), c.end());
        return a;
    }
};

inline ActorCritic make_actor_critic(std::size_t k, double threshold, std::uint64_t seed, std::size_t width = 64) {
    Rng rng = make_stream(seed, {0xAC});
    ActorCritic ac{make_grouped("actor", k, width, 2, rng), make_grouped("critic", k, width, 1, rng), k,
                   threshold > 0.0 ? 1.0 / threshold : 1.0};
    // Small final layers: near-uniform initial policy, near-zero initial values.
    for (GroupedNet* g : {&ac.actor, &ac.critic}) {
        auto& w = g->trunk.layers().back().weight.node()->value.data;
        for (auto& v : w) v *= 0.01;
    }
    return ac;
}

struct StateBatch {
    Var channel, quality, codeword;
};

inline StateBatch encode_states(const ActorCritic& ac, std::span<const AgentState> states) {
    const std::size_t B = states.size();
    const std::size_t k = ac.check_len;
    Tensor ch = Tensor::matrix(B, 2), q = Tensor::matrix(B, 3), cw = Tensor::matrix(B, k);
    for (std::size_t r = 0; r < B; ++r) {
        const auto& s = states[r];
        if (s.check_codeword.size() != k)
            throw ConfigError("agent state codeword length " + std::to_string(s.check_codeword.size()) +
                              " != " + std::to_string(k));
        ch.at(r, 0) = s.snr_db / kSnrScale;
        ch.at(r, 1) = s.R;
        q.at(r, 0) = s.threshold * ac.quality_scale;
        q.at(r, 1) = s.estimate * ac.quality_scale;
        q.at(r, 2) = s.deviation * ac.quality_scale;
        std::copy(s.check_codeword.begin(), s.check_codeword.end(), cw.data.begin() + static_cast<std::ptrdiff_t>(r * k));
    }
    return {ad::constant(std::move(ch)), ad::constant(std::move(q)), ad::constant(std::move(cw))};
}

inline Var policy_logits(const ActorCritic& ac, const StateBatch& s) { return ac.actor.forward(s.channel, s.quality, s.codeword); }
inline Var state_values(const ActorCritic& ac, const StateBatch& s) { return ac.critic.forward(s.channel, s.quality, s.codeword); }

enum class ActMode { sample, greedy };

struct ActResult {
    int action = 0;
    double log_prob = 0.0;
    double value = 0.0;
    double prob_retransmit = 0.0;
};

/// Draws from (sample) or takes the argmax of (greedy) the softmax over the two actor logits.
/// Greedy ties go to action 0.
inline ActResult act_from_logits(double logit0, double logit1, ActMode mode, Rng* rng) {
    const double m = std::max(logit0, logit1);
    const double lse = m + std::log(std::exp(logit0 - m) + std::exp(logit1 - m));
    const double lp0 = logit0 - lse;
    const double lp1 = logit1 - lse;
    ActResult r;
    r.prob_retransmit = std::exp(lp1);
    if (mode == ActMode::greedy) {
        r.action = logit1 > logit0 ? 1 : 0;
    } else {
        if (!rng) throw UsageError("act: sampling mode needs an rng");
        r.action = uniform(*rng, 0.0, 1.0) < r.prob_retransmit ? 1 : 0;
    }
    r.log_prob = r.action == 1 ? lp1 : lp0;
    return r;
}

inline std::vector<ActResult> act_batch(const ActorCritic& ac, std::span<const AgentState> states, ActMode mode,
                                        Rng* rng) {
    ad::NoGradGuard guard;
    const StateBatch s = encode_states(ac, states);
    const Var logits = policy_logits(ac, s);
    const Var values = state_values(ac, s);
    std::vector<ActResult> out;
    out.reserve(states.size());
    for (std::size_t r = 0; r < states.size(); ++r) {
        ActResult a = act_from_logits(logits.value().at(r, 0), logits.value().at(r, 1), mode, rng);
        a.value = values.value().data[r];
        out.push_back(a);
    }
    return out;
}

inline ActResult act(const ActorCritic& ac, const AgentState& s, ActMode mode, Rng* rng = nullptr) {
    return act_batch(ac, std::span(&s, 1), mode, rng).front();
}

// ---------------------------------------------------------------------------------------------
// Rollouts and advantages

struct RolloutBuffer {
    std::vector<AgentState> states;
    std::vector<int> actions;
    std::vector<double> log_probs;
    std::vector<double> rewards;
    std::vector<double> values;
    std::vector<int> dones;  // 1 marks the last step of an episode
    double bootstrap_value = 0.0;  // V(s_T) when the final step is not terminal
    std::size_t capacity = 0;

    std::size_t size() const { return states.size(); }

    void push(AgentState s, int action, double log_prob, double rew, double value, int done) {
        if (capacity != 0 && size() >= capacity) throw UsageError("rollout buffer is full");
        states.push_back(std::move(s));
        actions.push_back(action);
        log_probs.push_back(log_prob);
        rewards.push_back(rew);
        values.push_back(value);
        dones.push_back(done);
    }
};

struct Advantages {
    std::vector<double> advantages;
    std::vector<double> returns;
};

/// delta_t = r_t + gamma (1 - d_t) V(s_{t+1}) - V(s_t);  A_t = delta_t + gamma lambda (1 - d_t) A_{t+1};
/// R_t = A_t + V(s_t).
inline Advantages gae(const RolloutBuffer& buf, double gamma, double lambda) {
    const std::size_t T = buf.size();
    Advantages out{std::vector<double>(T), std::vector<double>(T)};
    double next_adv = 0.0;
    double next_value = buf.bootstrap_value;
    for (std::size_t i = T; i-- > 0;) {
        const double cont = buf.dones[i] ? 0.0 : 1.0;
        const double delta = buf.rewards[i] + gamma * cont * next_value - buf.values[i];
        next_adv = delta + gamma * lambda * cont * next_adv;
        out.advantages[i] = next_adv;
        out.returns[i] = next_adv + buf.values[i];
        next_value = buf.values[i];
    }
    return out;
}

inline std::vector<double> normalize_advantages(std::vector<double> a) {
    if (a.empty()) return a;
    const double n = static_cast<double>(a.size());
    const double m = std::accumulate(a.begin(), a.end(), 0.0) / n;
    double v = 0.0;
    for (double x : a) v += (x - m) * (x - m);
    const double sd = std::sqrt(v / n);
    for (auto& x : a) x = (x - m) / (sd + 1e-8);
    return a;
}

/// -mean(min(rho A, clip(rho, 1 - eps, 1 + eps) A)) with rho = exp(log pi_new(a) - log pi_old(a)).
/// `log_probs` holds the row-wise log-softmax of the new logits.
inline Var ppo_actor_loss(const Var& log_probs, const std::vector<std::size_t>& actions,
                          std::span<const double> old_log_probs, std::span<const double> advantages, double clip_eps) {
    using namespace ad;
    Var ratio = exp(sub(pick(log_probs, actions), constant(column(old_log_probs))));
    Var adv = constant(column(advantages));
    Var unclipped = mul(ratio, adv);
    Var clipped = mul(clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps), adv);
    return scale(mean(minimum(unclipped, clipped)), -1.0);
}

inline Var critic_loss(const Var& values, std::span<const double> returns) {
    return ad::mean(ad::square(ad::sub(values, ad::constant(column(returns)))));
}

/// Mean categorical entropy of row-wise log-probabilities.
inline Var policy_entropy(const Var& log_probs) {
    return ad::scale(ad::mean(ad::mul(ad::exp(log_probs), log_probs)), -static_cast<double>(log_probs.cols()));
}

struct PpoConfig {
    double clip_eps = 0.2;
    std::size_t epochs = 4;
    std::size_t minibatch = 64;
    double entropy_coef = 0.01;
    double gamma = 0.99;
    double lambda = 0.95;
};

struct PpoLosses {
    double actor = 0.0;
    double critic = 0.0;
    double entropy = 0.0;
};

/// Runs `cfg.epochs` passes of shuffled minibatch updates over the buffer.
inline PpoLosses ppo_update(const ActorCritic& ac, const RolloutBuffer& buf, const PpoConfig& cfg,
                            ad::AdamState& opt, Rng& rng) {
    if (buf.size() == 0) throw UsageError("ppo_update: empty rollout buffer");
    const Advantages est = gae(buf, cfg.gamma, cfg.lambda);
    const std::vector<double> adv = normalize_advantages(est.advantages);
    const auto params = ac.parameters();
    std::vector<std::size_t> order(buf.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    PpoLosses last;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t start = 0; start < order.size(); start += cfg.minibatch) {
            const std::size_t end = std::min(order.size(), start + cfg.minibatch);
            std::vector<AgentState> states;
            std::vector<std::size_t> actions;
            std::vector<double> old_lp, a, ret;
            for (std::size_t i = start; i < end; ++i) {
                const std::size_t j = order[i];
                states.push_back(buf.states[j]);
                actions.push_back(static_cast<std::size_t>(buf.actions[j]));
                old_lp.push_back(buf.log_probs[j]);
                a.push_back(adv[j]);
                ret.push_back(est.returns[j]);
            }
            const StateBatch s = encode_states(ac, states);
            Var lp = ad::log_softmax(policy_logits(ac, s));
            Var la = ppo_actor_loss(lp, actions, old_lp, a, cfg.clip_eps);
            Var lc = critic_loss(state_values(ac, s), ret);
            Var ent = policy_entropy(lp);
            Var total = ad::sub(ad::add(la, lc), ad::scale(ent, cfg.entropy_coef));
            if (!std::isfinite(total.item())) {
                std::ostringstream dump;
                dump << "PPO loss is not finite (actor " << la.item() << ", critic " << lc.item() << "); buffer:";
                for (std::size_t i = 0; i < buf.size() && i < 16; ++i)
                    dump << " [a=" << buf.actions[i] << " r=" << buf.rewards[i] << " v=" << buf.values[i]
                         << " lp=" << buf.log_probs[i] << "]";
                throw TrainingError(dump.str());
            }
            ad::zero_grad(params);
            ad::backward(total);
            ad::adam_step(params, opt);
            last = {la.item(), lc.item(), ent.item()};
        }
    }
    return last;
}

// ---------------------------------------------------------------------------------------------
// Persistence (actor.* and critic.* prefixes)

inline std::vector<ad::NamedTensor> export_agent(const ActorCritic& ac, double threshold) {
    std::vector<ad::NamedTensor> out;
    out.push_back({"agent.meta", Tensor(std::vector<std::size_t>{3},
                                        std::vector<double>{static_cast<double>(ac.check_len), ac.quality_scale,
                                                            threshold})});
    for (const GroupedNet* g : {&ac.actor, &ac.critic})
        for (const Mlp* m : {&g->channel, &g->quality, &g->codeword, &g->trunk}) ad::append_mlp(out, *m);
    return out;
}

struct LoadedAgent {
    ActorCritic ac;
    double threshold = 0.0;
};

inline LoadedAgent import_agent(const std::vector<ad::NamedTensor>& tensors, std::size_t expected_k,
                                const std::string& source = "checkpoint") {
    const auto idx = ad::index_tensors(tensors);
    const Tensor& meta = ad::require_tensor(idx, "agent.meta");
    if (meta.size() != 3) throw CheckpointError(source + ": agent.meta must hold 3 values");
    const auto k = static_cast<std::size_t>(meta.data[0]);
    if (k != expected_k)
        throw CheckpointError(source + ": k is " + std::to_string(k) + " in checkpoint but " +
                              std::to_string(expected_k) + " in config");
    auto grouped = [&](const std::string& p) {
        return GroupedNet{ad::extract_mlp(idx, p + ".channel"), ad::extract_mlp(idx, p + ".quality"),
                          ad::extract_mlp(idx, p + ".codeword"), ad::extract_mlp(idx, p + ".trunk")};
    };
    return {ActorCritic{grouped("actor"), grouped("critic"), k, meta.data[1]}, meta.data[2]};
}

/// Greedy agent decision rule for the transmission state machine.
inline DecisionRule agent_rule(const ActorCritic& ac, double threshold) {
    return [&ac, threshold](const TransmissionRecord& rec) {
        return act(ac, build_state(rec, threshold), ActMode::greedy).action;
    };
}

}  // namespace s3charq
