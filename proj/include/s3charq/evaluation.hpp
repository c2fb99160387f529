#pragma once

// Policy sweeps, summary statistics and CSV/JSON output.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "s3charq/agent.hpp"
#include "s3charq/errors.hpp"
#include "s3charq/harq.hpp"
#include "s3charq/source_data.hpp"
#include "s3charq/training.hpp"

namespace s3charq {

/// The q-th percentile PSNR in the "at least q of samples achieve it" sense: sorted ascending,
/// index ceil((1 - q) N) - 1.
inline double percentile_psnr(std::vector<double> values, double q) {
    if (values.empty()) throw UsageError("percentile_psnr: empty list");
    if (!(q > 0.0 && q < 1.0)) throw UsageError("percentile_psnr: q must lie in (0, 1)");
    std::sort(values.begin(), values.end());
    const double pos = std::ceil((1.0 - q) * static_cast<double>(values.size()) - 1e-9);
    const auto idx = static_cast<std::size_t>(std::clamp(pos - 1.0, 0.0, static_cast<double>(values.size() - 1)));
    return values[idx];
}

inline double outage(std::span<const double> final_scores, double threshold) {
    if (final_scores.empty()) throw UsageError("outage: empty list");
    std::size_t n = 0;
    for (double s : final_scores) n += s > threshold ? 1 : 0;
    return static_cast<double>(n) / static_cast<double>(final_scores.size());
}

inline double retx_fraction(std::span<const double> estimates, double cutoff) {
    std::size_t n = 0;
    for (double e : estimates) n += e > cutoff ? 1 : 0;
    return static_cast<double>(n) / static_cast<double>(estimates.size());
}

struct Calibration {
    double scale = 1.0;
    double achieved = 0.0;
    bool attained = false;
    std::size_t iterations = 0;
};

/// Finds s such that the fraction of estimates above threshold * s is within `tol` of `target`.
/// Targets outside (0, 1) resolve to the extreme scales. When the empirical step function jumps
/// over the band the closest scale is returned with `attained` false.
inline Calibration calibrate_threshold_scale(std::span<const double> estimates, double threshold, double target,
                                             double tol = 0.02, std::size_t max_iter = 40) {
    if (estimates.empty()) throw UsageError("calibrate_threshold_scale: no estimates");
    if (!(threshold > 0.0)) throw UsageError("calibrate_threshold_scale: threshold must be positive");
    const double top = *std::max_element(estimates.begin(), estimates.end());
    double lo = 0.0;
    double hi = std::max(top / threshold, 0.0) * 2.0 + 1.0;
    auto ratio = [&](double s) { return retx_fraction(estimates, threshold * s); };
    if (target <= 0.0) {
        const double r = ratio(hi);
        return {hi, r, r <= tol, 0};
    }
    if (target >= 1.0) {
        const double r = ratio(lo);
        return {lo, r, r >= 1.0 - tol, 0};
    }
    Calibration best{hi, ratio(hi), false, 0};
    for (std::size_t it = 1; it <= max_iter; ++it) {
        const double mid = 0.5 * (lo + hi);
        const double r = ratio(mid);
        if (std::abs(r - target) < std::abs(best.achieved - target)) best = {mid, r, false, it};
        if (std::abs(r - target) <= tol) return {mid, r, true, it};
        if (r > target)
            lo = mid;
        else
            hi = mid;
    }
    best.iterations = max_iter;
    return best;
}

// ---------------------------------------------------------------------------------------------
// Policies

enum class PolicyKind { none, always, threshold, oracle, agent };

inline PolicyKind parse_policy(const std::string& s) {
    if (s == "none") return PolicyKind::none;
    if (s == "always") return PolicyKind::always;
    if (s == "threshold") return PolicyKind::threshold;
    if (s == "oracle") return PolicyKind::oracle;
    if (s == "agent") return PolicyKind::agent;
    throw ConfigError("unknown policy '" + s + "' (expected none, always, threshold, oracle, agent)");
}

inline std::string to_string(PolicyKind k) {
    switch (k) {
        case PolicyKind::none: return "none";
        case PolicyKind::always: return "always";
        case PolicyKind::threshold: return "threshold";
        case PolicyKind::oracle: return "oracle";
        case PolicyKind::agent: return "agent";
    }
    return "?";
}

struct Policy {
    PolicyKind kind = PolicyKind::none;
    double threshold = 0.0;
    double scale = 1.0;                   // threshold policy: NAK when estimate > threshold * scale
    const ActorCritic* agent = nullptr;   // agent policy
};

/// The oracle reads the true round-1 score, which a real receiver never has.
inline DecisionRule make_rule(const Policy& p) {
    switch (p.kind) {
        case PolicyKind::none: return never_retransmit;
        case PolicyKind::always: return always_retransmit;
        case PolicyKind::threshold: {
            const double cut = p.threshold * p.scale;
            return [cut](const TransmissionRecord& r) { return r.round1.estimate > cut ? 1 : 0; };
        }
        case PolicyKind::oracle: {
            const double th = p.threshold;
            return [th](const TransmissionRecord& r) { return r.round1.score > th ? 1 : 0; };
        }
        case PolicyKind::agent:
            if (!p.agent) throw UsageError("agent policy without a trained agent");
            return agent_rule(*p.agent, p.threshold);
    }
    throw UsageError("unknown policy");
}

// ---------------------------------------------------------------------------------------------
// Records and summaries

/// One evaluated transmission, flattened for CSV.
struct EvalRow {
    std::string policy;
    std::uint64_t seed = 0;
    std::uint64_t sample_id = 0;
    double snr_db = 0.0;
    double R = 0.0;
    double R2 = 0.0;
    std::size_t active1 = 0;
    double estimate1 = 0.0;
    double score1 = 0.0;
    double psnr1 = 0.0;
    int action = 0;
    std::optional<std::size_t> active2;
    std::optional<double> estimate2, score2, psnr2, reward;
    double final_score = 0.0;
    double final_psnr = 0.0;
    std::size_t symbols_sent = 0;
};

inline EvalRow to_row(const std::string& policy, std::uint64_t seed, const TransmissionRecord& rec) {
    EvalRow r;
    r.policy = policy;
    r.seed = seed;
    r.sample_id = rec.sample_id;
    r.snr_db = rec.snr_db;
    r.R = rec.R;
    r.R2 = rec.R2;
    r.active1 = rec.round1.active;
    r.estimate1 = rec.round1.estimate;
    r.score1 = rec.round1.score;
    r.psnr1 = rec.round1.psnr;
    r.action = rec.action;
    if (rec.round2) {
        r.active2 = rec.round2->active;
        r.estimate2 = rec.round2->estimate;
        r.score2 = rec.round2->score;
        r.psnr2 = rec.round2->psnr;
    }
    r.reward = rec.reward;
    r.final_score = rec.final_score;
    r.final_psnr = rec.final_psnr;
    r.symbols_sent = rec.symbols_sent;
    return r;
}

struct SummaryRow {
    std::string policy;
    double snr_db = 0.0;
    double R = 0.0;
    double R2 = 0.0;
    std::size_t n = 0;
    double mean_psnr = 0.0;
    double p97_psnr = 0.0;
    double mean_score = 0.0;
    double p97_score = 0.0;  // 97% of samples score at or below this
    double outage = 0.0;
    double retx_ratio = 0.0;
    double mean_symbols = 0.0;
};

/// Groups rows by (policy, snr, R, R2) in first-appearance order.
inline std::vector<SummaryRow> summarize(const std::vector<EvalRow>& rows, double threshold) {
    std::vector<SummaryRow> out;
    std::vector<std::vector<const EvalRow*>> groups;
    for (const auto& r : rows) {
        std::size_t g = 0;
        for (; g < out.size(); ++g)
            if (out[g].policy == r.policy && out[g].snr_db == r.snr_db && out[g].R == r.R && out[g].R2 == r.R2) break;
        if (g == out.size()) {
            SummaryRow s;
            s.policy = r.policy;
            s.snr_db = r.snr_db;
            s.R = r.R;
            s.R2 = r.R2;
            out.push_back(s);
            groups.emplace_back();
        }
        groups[g].push_back(&r);
    }
    for (std::size_t g = 0; g < out.size(); ++g) {
        auto& s = out[g];
        std::vector<double> ps, sc;
        double retx = 0.0, sym = 0.0;
        for (const EvalRow* r : groups[g]) {
            ps.push_back(r->final_psnr);
            sc.push_back(r->final_score);
            retx += r->action;
            sym += static_cast<double>(r->symbols_sent);
        }
        const double n = static_cast<double>(ps.size());
        s.n = ps.size();
        s.mean_psnr = std::accumulate(ps.begin(), ps.end(), 0.0) / n;
        s.p97_psnr = percentile_psnr(ps, 0.97);
        s.mean_score = std::accumulate(sc.begin(), sc.end(), 0.0) / n;
        s.p97_score = upper_quantile(sc, 0.97);
        s.outage = outage(sc, threshold);
        s.retx_ratio = retx / n;
        s.mean_symbols = sym / n;
    }
    return out;
}

namespace detail {

inline std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::stringstream ss(line);
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

inline double to_double(const std::string& s) {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw FormatError("bad number '" + s + "'");
    return v;
}

}  // namespace detail

inline const char* kRecordsHeader =
    "policy,seed,sample_id,snr_db,R,R2,active1,estimate1,score1,psnr1,action,active2,estimate2,score2,psnr2,"
    "reward,final_score,final_psnr,symbols_sent";
inline const char* kSummaryHeader =
    "policy,snr_db,R,R2,n,mean_psnr,p97_psnr,mean_score,p97_score,outage,retx_ratio,mean_symbols";

inline std::string records_csv(const std::vector<EvalRow>& rows) {
    std::string out = std::string(kRecordsHeader) + "\n";
    auto opt = [](const auto& o) { return o ? detail::fmt(static_cast<double>(*o)) : std::string(); };
    for (const auto& r : rows) {
        out += r.policy + ',' + std::to_string(r.seed) + ',' + std::to_string(r.sample_id) + ',' +
               detail::fmt(r.snr_db) + ',' + detail::fmt(r.R) + ',' + detail::fmt(r.R2) + ',' +
               std::to_string(r.active1) + ',' + detail::fmt(r.estimate1) + ',' + detail::fmt(r.score1) + ',' +
               detail::fmt(r.psnr1) + ',' + std::to_string(r.action) + ',' + opt(r.active2) + ',' + opt(r.estimate2) +
               ',' + opt(r.score2) + ',' + opt(r.psnr2) + ',' + opt(r.reward) + ',' + detail::fmt(r.final_score) + ',' +
               detail::fmt(r.final_psnr) + ',' + std::to_string(r.symbols_sent) + '\n';
    }
    return out;
}

inline std::vector<EvalRow> parse_records_csv(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    if (!std::getline(is, line) || line != kRecordsHeader) throw FormatError("records.csv: unexpected header");
    std::vector<EvalRow> rows;
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto c = detail::split_csv(line);
        if (c.size() != 19) throw FormatError("records.csv line " + std::to_string(lineno) + ": expected 19 fields");
        EvalRow r;
        r.policy = c[0];
        r.seed = std::stoull(c[1]);
        r.sample_id = std::stoull(c[2]);
        r.snr_db = detail::to_double(c[3]);
        r.R = detail::to_double(c[4]);
        r.R2 = detail::to_double(c[5]);
        r.active1 = std::stoul(c[6]);
        r.estimate1 = detail::to_double(c[7]);
        r.score1 = detail::to_double(c[8]);
        r.psnr1 = detail::to_double(c[9]);
        r.action = std::stoi(c[10]);
        if (!c[11].empty()) r.active2 = static_cast<std::size_t>(detail::to_double(c[11]));
        if (!c[12].empty()) r.estimate2 = detail::to_double(c[12]);
        if (!c[13].empty()) r.score2 = detail::to_double(c[13]);
        if (!c[14].empty()) r.psnr2 = detail::to_double(c[14]);
        if (!c[15].empty()) r.reward = detail::to_double(c[15]);
        r.final_score = detail::to_double(c[16]);
        r.final_psnr = detail::to_double(c[17]);
        r.symbols_sent = std::stoul(c[18]);
        rows.push_back(std::move(r));
    }
    return rows;
}

inline std::string summary_csv(const std::vector<SummaryRow>& rows) {
    std::string out = std::string(kSummaryHeader) + "\n";
    for (const auto& s : rows) {
        out += s.policy + ',' + detail::fmt(s.snr_db) + ',' + detail::fmt(s.R) + ',' + detail::fmt(s.R2) + ',' +
               std::to_string(s.n) + ',' + detail::fmt(s.mean_psnr) + ',' + detail::fmt(s.p97_psnr) + ',' +
               detail::fmt(s.mean_score) + ',' + detail::fmt(s.p97_score) + ',' + detail::fmt(s.outage) + ',' +
               detail::fmt(s.retx_ratio) + ',' + detail::fmt(s.mean_symbols) + '\n';
    }
    return out;
}

inline std::vector<SummaryRow> parse_summary_csv(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    if (!std::getline(is, line) || line != kSummaryHeader) throw FormatError("summary.csv: unexpected header");
    std::vector<SummaryRow> rows;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto c = detail::split_csv(line);
        if (c.size() != 12) throw FormatError("summary.csv: expected 12 fields");
        SummaryRow s;
        s.policy = c[0];
        s.snr_db = detail::to_double(c[1]);
        s.R = detail::to_double(c[2]);
        s.R2 = detail::to_double(c[3]);
        s.n = std::stoul(c[4]);
        s.mean_psnr = detail::to_double(c[5]);
        s.p97_psnr = detail::to_double(c[6]);
        s.mean_score = detail::to_double(c[7]);
        s.p97_score = detail::to_double(c[8]);
        s.outage = detail::to_double(c[9]);
        s.retx_ratio = detail::to_double(c[10]);
        s.mean_symbols = detail::to_double(c[11]);
        rows.push_back(std::move(s));
    }
    return rows;
}

inline nlohmann::json summary_json(const std::vector<SummaryRow>& rows, double threshold) {
    nlohmann::json j;
    j["threshold"] = threshold;
    j["rows"] = nlohmann::json::array();
    for (const auto& s : rows)
        j["rows"].push_back({{"policy", s.policy}, {"snr_db", s.snr_db}, {"R", s.R}, {"R2", s.R2}, {"n", s.n},
                             {"mean_psnr", s.mean_psnr}, {"p97_psnr", s.p97_psnr}, {"mean_score", s.mean_score},
                             {"p97_score", s.p97_score}, {"outage", s.outage}, {"retx_ratio", s.retx_ratio},
                             {"mean_symbols", s.mean_symbols}});
    return j;
}

inline std::string read_text(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

inline void write_text(const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ConfigError("cannot write " + path);
    os << text;
}

// ---------------------------------------------------------------------------------------------
// Sweeps

struct SweepSpec {
    std::vector<Policy> policies;
    std::vector<double> snr_db;
    std::vector<std::uint64_t> seeds;
    double R = 0.125;
    double R2 = 0.125;
    std::size_t batch = 256;
};

struct SweepResult {
    std::vector<EvalRow> rows;
    std::vector<SummaryRow> summary;
};

/// Evaluates every policy at every SNR and seed on `split`. sys.threshold defines outage and rewards.
inline SweepResult evaluate_sweep(const System& sys, const DatasetSplit& split, const SweepSpec& spec) {
    if (!(sys.threshold > 0.0)) throw UsageError("evaluate_sweep: system threshold not set");
    SweepResult res;
    const std::size_t N = split.images.size();
    std::vector<const Image*> imgs(N);
    std::vector<std::uint64_t> ids(N);
    for (std::size_t i = 0; i < N; ++i) {
        imgs[i] = &split.images[i];
        ids[i] = i;
    }
    for (const auto& p : spec.policies) {
        const DecisionRule rule = make_rule(p);
        const std::string name = to_string(p.kind);
        for (double snr : spec.snr_db) {
            for (auto seed : spec.seeds) {
                for (std::size_t start = 0; start < N; start += spec.batch) {
                    const std::size_t end = std::min(N, start + spec.batch);
                    auto recs = run_transmission_batch(
                        sys, std::span(imgs).subspan(start, end - start), std::span(ids).subspan(start, end - start),
                        snr, spec.R, spec.R2, rule, seed);
                    for (const auto& rec : recs) res.rows.push_back(to_row(name, seed, rec));
                }
            }
        }
    }
    res.summary = summarize(res.rows, sys.threshold);
    return res;
}

inline void write_sweep(const std::string& dir, const SweepResult& res, double threshold) {
    std::filesystem::create_directories(dir);
    write_text(dir + "/records.csv", records_csv(res.rows));
    write_text(dir + "/summary.csv", summary_csv(res.summary));
    write_text(dir + "/summary.json", summary_json(res.summary, threshold).dump(2) + "\n");
}

/// Round-1 estimates of every test image at one SNR, for threshold calibration.
inline std::vector<double> round1_estimates(const System& sys, const DatasetSplit& split, double snr_db, double R,
                                            std::uint64_t seed) {
    std::vector<const Image*> imgs;
    std::vector<std::uint64_t> ids;
    for (std::size_t i = 0; i < split.images.size(); ++i) {
        imgs.push_back(&split.images[i]);
        ids.push_back(i);
    }
    std::vector<double> out;
    for (const auto& rec : run_transmission_batch(sys, imgs, ids, snr_db, R, R, never_retransmit, seed))
        out.push_back(rec.round1.estimate);
    return out;
}

struct Round1Stats {
    std::vector<double> psnr, score, estimate;  // estimate empty without an estimator

    double mean_psnr() const { return std::accumulate(psnr.begin(), psnr.end(), 0.0) / static_cast<double>(psnr.size()); }
};

/// Initial round over a split with the protocol's per-sample channel streams. Works on a
/// stage-1 bundle (check slot fed zeros). `zero_check` feeds zeros to the decoder's check slot
/// of a full bundle while keeping the transmitted codeword and noise draws unchanged.
inline Round1Stats round1_stats(const CodecBundle& b, const PerceptualProjector& proj, ChannelKind kind,
                                const DatasetSplit& split, double snr_db, double R, std::uint64_t seed,
                                bool zero_check = false, std::size_t batch = 256) {
    Round1Stats out;
    const std::size_t N = split.images.size();
    for (std::size_t start = 0; start < N; start += batch) {
        const std::size_t B = std::min(N, start + batch) - start;
        std::vector<const Image*> imgs;
        std::vector<Rng> rngs;
        for (std::size_t i = 0; i < B; ++i) {
            imgs.push_back(&split.images[start + i]);
            rngs.push_back(make_stream(seed, {start + i, std::bit_cast<std::uint64_t>(snr_db)}));
        }
        const std::vector<double> snr(B, snr_db), ratio(B, R);
        std::vector<std::size_t> active;
        mask_rows(b.K(), ratio, &active);
        const RoundNoise noise = draw_round_noise(kind, snr, active, b.K(), b.k(), rngs);
        ad::NoGradGuard guard;
        Round1Graph g = round1_graph(b, ad::constant(image_rows(imgs)), ratio, snr, noise, nullptr);
        if (zero_check) g.recon = decode_graph(b, g.z_rx, ad::constant(Tensor::matrix(B, b.k())), snr);
        for (std::size_t r = 0; r < B; ++r) {
            const Image rec = detail::image_from_row(b.dims, g.recon, r);
            out.psnr.push_back(psnr(*imgs[r], rec));
            out.score.push_back(perceptual_score(*imgs[r], rec, proj));
            if (g.estimate.node()) out.estimate.push_back(g.estimate.value().data[r]);
        }
    }
    return out;
}

inline double pearson(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size() || a.size() < 2) throw UsageError("pearson: need two equal-length lists of size >= 2");
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
    const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    return sab / std::sqrt(saa * sbb);
}

// ---------------------------------------------------------------------------------------------
// Figure tables

/// One CSV per metric: rows are SNR points, columns are policies.
inline std::map<std::string, std::string> figure_tables(const std::vector<SummaryRow>& summary) {
    std::vector<std::string> policies;
    std::vector<double> snrs;
    for (const auto& s : summary) {
        if (std::find(policies.begin(), policies.end(), s.policy) == policies.end()) policies.push_back(s.policy);
        if (std::find(snrs.begin(), snrs.end(), s.snr_db) == snrs.end()) snrs.push_back(s.snr_db);
    }
    std::sort(snrs.begin(), snrs.end());
    const std::vector<std::pair<std::string, double SummaryRow::*>> metrics = {
        {"mean_psnr", &SummaryRow::mean_psnr}, {"p97_psnr", &SummaryRow::p97_psnr},
        {"mean_score", &SummaryRow::mean_score}, {"outage", &SummaryRow::outage},
        {"retx_ratio", &SummaryRow::retx_ratio}, {"mean_symbols", &SummaryRow::mean_symbols}};
    std::map<std::string, std::string> out;
    for (const auto& [name, field] : metrics) {
        std::string csv = "snr_db";
        for (const auto& p : policies) csv += ',' + p;
        csv += '\n';
        for (double snr : snrs) {
            csv += detail::fmt(snr);
            for (const auto& p : policies) {
                csv += ',';
                for (const auto& s : summary)
                    if (s.policy == p && s.snr_db == snr) {
                        csv += detail::fmt(s.*field);
                        break;
                    }
            }
            csv += '\n';
        }
        out["fig_" + name + "_vs_snr.csv"] = csv;
    }
    return out;
}

}  // namespace s3charq
