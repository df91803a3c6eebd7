// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "rlvrsim/errors.hpp"
#include "rlvrsim/numerics.hpp"
#include "rlvrsim/policy.hpp"
#include "rlvrsim/random.hpp"

namespace rlvrsim {

/// Verifiable reward. "target-count": 1 when the response contains `target_token` at least
/// `threshold` times. "constant": every response scores `constant_value`.
struct TaskSpec {
    std::string name = "target-count";
    int target_token = 0;
    int threshold = 2;
    double constant_value = 1.0;

    friend bool operator==(const TaskSpec&, const TaskSpec&) = default;
};

inline double reward(const Sequence& seq, const TaskSpec& task) {
    if (task.name == "target-count") {
        int count = 0;
        for (int t : seq.tokens) count += (t == task.target_token);
        return count >= task.threshold ? 1.0 : 0.0;
    }
    if (task.name == "constant") return task.constant_value;
    throw ConfigError("task.name", "unknown task '" + task.name + "'");
}

/// Group-normalized advantages with population std. A group whose rewards are all equal
/// (std < 1e-8) gets zero advantages.
inline std::vector<double> compute_advantages(std::span<const double> rewards) {
    if (rewards.size() < 2) throw DomainError("compute_advantages: group size must be >= 2");
    const double m = mean(rewards);
    const double s = population_stddev(rewards);
    std::vector<double> out(rewards.size(), 0.0);
    if (s < 1e-8) return out;
    for (std::size_t i = 0; i < rewards.size(); ++i) out[i] = (rewards[i] - m) / s;
    return out;
}

/// Which engine's distribution the responses were drawn from.
enum class SampledUnder { Infer, Train };

struct TokenRecord {
    double p_train_old = 0.0;
    double p_infer_old = 0.0;
    double p_train_cur = 0.0;
    double advantage = 0.0;
    double r = 1.0;
    double rho = 1.0;
    double phi = 1.0;
    int position = 0;
    int group_index = 0;
    int prompt_id = 0;
    int prev = kBos;
    int token = 0;
    std::size_t response = 0;  // index into RolloutBatch::responses
    std::size_t response_length = 0;

    double inv_rho() const { return p_infer_old / p_train_old; }
};

inline double importance_rho(double p_train, double p_infer) {
    return p_infer > 0.0 ? p_train / p_infer : std::numeric_limits<double>::infinity();
}

struct GroupRollout {
    std::vector<Sequence> sequences;
    std::vector<TokenRecord> records;
};

/// Samples G responses for one prompt and records, per token, the inference-engine
/// probability and the full-precision re-score of the same token under the same parameters.
inline GroupRollout generate_group(const PolicyParams& params, int prompt_id, std::size_t group_size,
                                   PrecisionMode infer_mode, Rng& rng, std::size_t max_len,
                                   SampledUnder sampled_under = SampledUnder::Infer) {
    if (group_size < 2) throw DomainError("generate_group: group size must be >= 2");
    const PrecisionMode sample_mode = sampled_under == SampledUnder::Infer ? infer_mode : PrecisionMode::Full;
    GroupRollout out;
    out.sequences.reserve(group_size);
    for (std::size_t g = 0; g < group_size; ++g) {
        Sequence seq = sample_sequence(params, sample_mode, rng, max_len, prompt_id);
        for (std::size_t t = 0; t < seq.size(); ++t) {
            TokenRecord rec;
            rec.prev = seq.prev_of(t);
            rec.token = seq.tokens[t];
            const auto tok = static_cast<std::size_t>(rec.token);
            rec.p_train_old = token_dist(params, rec.prev, PrecisionMode::Full)[tok];
            rec.p_infer_old = infer_mode == PrecisionMode::Full ? rec.p_train_old
                                                                : token_dist(params, rec.prev, infer_mode)[tok];
            rec.p_train_cur = rec.p_train_old;
            rec.rho = importance_rho(rec.p_train_old, rec.p_infer_old);
            rec.r = 1.0;
            rec.position = static_cast<int>(t);
            rec.group_index = static_cast<int>(g);
            rec.prompt_id = prompt_id;
            rec.response = g;
            rec.response_length = seq.size();
            out.records.push_back(rec);
        }
        out.sequences.push_back(std::move(seq));
    }
    return out;
}

/// P groups of G responses. Responses and records are stored in (prompt, group, position) order.
struct RolloutBatch {
    std::vector<int> prompt_ids;
    std::size_t group_size = 0;
    std::vector<Sequence> responses;  // index = prompt_slot * G + group_index
    std::vector<double> rewards;
    std::vector<double> advantages;
    std::vector<TokenRecord> records;
    PrecisionMode infer_mode = PrecisionMode::Full;
    SampledUnder sampled_under = SampledUnder::Infer;

    std::size_t num_groups() const noexcept { return prompt_ids.size(); }
};

struct RolloutRequest {
    std::size_t group_size = 8;
    std::size_t max_len = 32;
    PrecisionMode infer_mode = PrecisionMode::Bf16;
    SampledUnder sampled_under = SampledUnder::Infer;
    TaskSpec task;
};

/// Generates every group from its own substream (seed, stream_tag, prompt), scores rewards and
/// fills advantages into the token records.
inline RolloutBatch collect_rollout(const PolicyParams& params, std::span<const int> prompt_ids,
                                    const RolloutRequest& req, std::uint64_t seed, std::uint64_t stream_tag) {
    RolloutBatch batch;
    batch.prompt_ids.assign(prompt_ids.begin(), prompt_ids.end());
    batch.group_size = req.group_size;
    batch.infer_mode = req.infer_mode;
    batch.sampled_under = req.sampled_under;
    for (std::size_t slot = 0; slot < prompt_ids.size(); ++slot) {
        Rng rng = substream(seed, {stream_tag, static_cast<std::uint64_t>(prompt_ids[slot])});
        GroupRollout group = generate_group(params, prompt_ids[slot], req.group_size, req.infer_mode, rng,
                                            req.max_len, req.sampled_under);
        std::vector<double> rewards;
        for (const auto& s : group.sequences) rewards.push_back(reward(s, req.task));
        const std::vector<double> adv = compute_advantages(rewards);
        const std::size_t base = batch.responses.size();
        for (auto rec : group.records) {
            rec.advantage = adv[rec.response];
            rec.response += base;
            batch.records.push_back(rec);
        }
        for (std::size_t g = 0; g < group.sequences.size(); ++g) {
            batch.responses.push_back(std::move(group.sequences[g]));
            batch.rewards.push_back(rewards[g]);
            batch.advantages.push_back(adv[g]);
        }
    }
    return batch;
}

/// Re-scores every token under `params` (full precision) and refreshes r = p_cur / p_old.
inline void refresh_current(RolloutBatch& batch, const PolicyParams& params) {
    for (auto& rec : batch.records) {
        rec.p_train_cur = token_dist(params, rec.prev, PrecisionMode::Full)[static_cast<std::size_t>(rec.token)];
        rec.r = rec.p_train_cur / rec.p_train_old;
    }
}

// ---------------------------------------------------------------------------
// Discrepancy metrics
// ---------------------------------------------------------------------------

/// Population standard deviation of rho over all tokens.
inline double mismatch(std::span<const TokenRecord> records) {
    if (records.size() < 2) throw DomainError("mismatch: need at least two token records");
    std::vector<double> rho;
    rho.reserve(records.size());
    for (const auto& r : records) rho.push_back(r.rho);
    return population_stddev(rho);
}

inline double max_rho(std::span<const TokenRecord> records) {
    double m = 0.0;
    for (const auto& r : records) m = std::max(m, r.rho);
    return m;
}

/// Pearson correlation between p_train_old and p_infer_old of the sampled tokens.
inline double pcc_train_infer(std::span<const TokenRecord> records) {
    std::vector<double> tr, inf;
    tr.reserve(records.size());
    inf.reserve(records.size());
    for (const auto& r : records) {
        tr.push_back(r.p_train_old);
        inf.push_back(r.p_infer_old);
    }
    return pearson_cc(tr, inf);
}

struct BucketStat {
    double lo = 0.0;
    double hi = 0.0;
    std::size_t count = 0;
    std::optional<double> mean_rho;
    std::optional<double> std_rho;
};

inline const std::vector<double>& default_bucket_edges() {
    static const std::vector<double> edges{0.0, 0.05, 0.1, 0.2, 0.4, 0.7, 1.0};
    return edges;
}

/// Groups tokens by p_train_old into buckets (lo, hi] and reports rho mean/std per bucket.
/// Empty buckets carry count 0 and no statistics.
inline std::vector<BucketStat> bucket_drift(std::span<const TokenRecord> records,
                                            std::span<const double> edges = default_bucket_edges()) {
    if (edges.size() < 2) throw DomainError("bucket_drift: need at least two edges");
    for (std::size_t i = 1; i < edges.size(); ++i) {
        if (!(edges[i] > edges[i - 1])) throw DomainError("bucket_drift: edges must be strictly increasing");
    }
    if (edges.front() > 0.0 || edges.back() < 1.0) throw DomainError("bucket_drift: edges must cover (0, 1]");

    std::vector<std::vector<double>> members(edges.size() - 1);
    for (const auto& r : records) {
        for (std::size_t b = 0; b + 1 < edges.size(); ++b) {
            if (r.p_train_old > edges[b] && r.p_train_old <= edges[b + 1]) {
                members[b].push_back(r.rho);
                break;
            }
        }
    }
    std::vector<BucketStat> out;
    for (std::size_t b = 0; b + 1 < edges.size(); ++b) {
        BucketStat s{edges[b], edges[b + 1], members[b].size(), std::nullopt, std::nullopt};
        if (!members[b].empty()) {
            s.mean_rho = mean(members[b]);
            s.std_rho = population_stddev(members[b]);
        }
        out.push_back(s);
    }
    return out;
}

inline void write_token_csv_header(std::ostream& os) {
    os << "step,prompt_id,group_index,position,p_train_old,p_infer_old,p_train_cur,rho,r,advantage,phi\n";
}

inline void write_token_csv_rows(std::ostream& os, std::span<const TokenRecord> records, std::uint64_t step) {
    const auto old = os.precision(17);
    for (const auto& r : records) {
        os << step << ',' << r.prompt_id << ',' << r.group_index << ',' << r.position << ',' << r.p_train_old << ','
           << r.p_infer_old << ',' << r.p_train_cur << ',' << r.rho << ',' << r.r << ',' << r.advantage << ','
           << r.phi << '\n';
    }
    os.precision(old);
}

}  // namespace rlvrsim
