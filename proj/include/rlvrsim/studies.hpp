// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <cstdio>
#include <span>
#include <ostream>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "rlvrsim/errors.hpp"
#include "rlvrsim/numerics.hpp"
#include "rlvrsim/objectives.hpp"
#include "rlvrsim/policy.hpp"
#include "rlvrsim/random.hpp"
#include "rlvrsim/rollout.hpp"

namespace rlvrsim {

// ===========================================================================
// bfloat16 softmax discretization
// ===========================================================================

struct Bf16StudyConfig {
    std::size_t vocab_size = 2048;
    std::size_t num_tokens = 50000;
    double logit_std = 1.5;
    std::vector<std::uint64_t> seeds{1234, 1235, 1236, 1237, 1238};
    /// Engine compared against the full-precision softmax. Full gives the identity control.
    PrecisionMode infer_mode = PrecisionMode::Bf16;

    friend bool operator==(const Bf16StudyConfig&, const Bf16StudyConfig&) = default;
};

inline void validate(const Bf16StudyConfig& c) {
    if (c.vocab_size < 2) throw ConfigError("vocab_size", "must be >= 2");
    if (c.num_tokens < 1) throw ConfigError("num_tokens", "must be >= 1");
    if (!(c.logit_std > 0.0)) throw ConfigError("logit_std", "must be > 0");
    if (c.seeds.empty()) throw ConfigError("seeds", "at least one seed required");
}

/// Statistics of ratio = p_full / p_engine over sampled tokens, plus two divergence readings:
///   kl_full:    mean over draws of KL(p_full || p_engine normalized) on the whole vocabulary
///   kl_sampled: KL between the distributions of sampled-token probabilities, each probability
///               binned on the bfloat16 lattice (cell = its bfloat16 rounding), full || engine,
///               with a 0.5 pseudo-count on every occupied cell.
struct Bf16StudyRow {
    std::string label;
    double mean = 0.0;
    double std = 0.0;
    double max = 0.0;
    double min = 0.0;
    double kl_full = 0.0;
    double kl_sampled = 0.0;
    std::size_t distinct_engine = 0;  // distinct engine probabilities among sampled tokens
    std::size_t distinct_full = 0;
};

struct Bf16StudyReport {
    std::vector<Bf16StudyRow> seeds;
    Bf16StudyRow average;
    /// Occupancy of bfloat16 probability levels (by bit pattern) among sampled tokens, per seed.
    std::vector<std::map<std::uint16_t, std::size_t>> level_counts;
};

namespace detail {

/// KL(a || b) over histograms keyed by lattice cell, with `pseudo` added to every cell in the
/// union of both supports.
inline double histogram_kl(const std::map<std::uint16_t, std::size_t>& a, const std::map<std::uint16_t, std::size_t>& b,
                           double pseudo = 0.5) {
    std::set<std::uint16_t> cells;
    for (const auto& [k, _] : a) cells.insert(k);
    for (const auto& [k, _] : b) cells.insert(k);
    double na = 0.0, nb = 0.0;
    for (const auto& [_, c] : a) na += static_cast<double>(c);
    for (const auto& [_, c] : b) nb += static_cast<double>(c);
    const double k = static_cast<double>(cells.size());
    double kl = 0.0;
    for (auto cell : cells) {
        const auto ia = a.find(cell);
        const auto ib = b.find(cell);
        const double pa = ((ia == a.end() ? 0.0 : static_cast<double>(ia->second)) + pseudo) / (na + pseudo * k);
        const double pb = ((ib == b.end() ? 0.0 : static_cast<double>(ib->second)) + pseudo) / (nb + pseudo * k);
        kl += pa * std::log(pa / pb);
    }
    return kl;
}

}  // namespace detail

/// Each of `num_tokens` draws uses fresh logits z ~ N(0, logit_std^2) (generated as binary32),
/// computes both softmaxes, samples one token from the engine distribution and records
/// p_full / p_engine for it.
inline Bf16StudyReport bf16_discretization_study(const Bf16StudyConfig& config) {
    validate(config);
    Bf16StudyReport report;
    const std::size_t v = config.vocab_size;
    std::vector<double> logits(v), pf(v), pe(v);
    std::vector<float> scratch;
    std::vector<double> log_table(1u << 16);
    for (std::uint32_t b = 0; b < log_table.size(); ++b) {
        log_table[b] = std::log(static_cast<double>(std::bit_cast<float>(b << 16)));
    }

    for (std::uint64_t seed : config.seeds) {
        // 32-bit engine and binary32 normals: the logits are binary32 values anyway, and this
        // loop dominates the study's runtime
        std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
        std::mt19937 logit_rng(seq);
        Rng rng = substream(seed);
        std::normal_distribution<float> normal(0.0f, static_cast<float>(config.logit_std));
        std::vector<double> ratios;
        ratios.reserve(config.num_tokens);
        std::map<std::uint16_t, std::size_t> hist_full, hist_engine;
        std::set<double> distinct_full, distinct_engine;
        double kl_full = 0.0;

        for (std::size_t n = 0; n < config.num_tokens; ++n) {
            for (double& z : logits) z = static_cast<double>(normal(logit_rng));
            // full-precision softmax kept inline so log p_full comes from the log-sum-exp
            const double mx = *std::max_element(logits.begin(), logits.end());
            double sum_full = 0.0;
            for (std::size_t i = 0; i < v; ++i) {
                pf[i] = std::exp(logits[i] - mx);
                sum_full += pf[i];
            }
            const double log_sum_full = std::log(sum_full);
            for (double& p : pf) p /= sum_full;
            softmax_into(logits, config.infer_mode, pe, scratch);

            // engine probabilities are bfloat16 values, so their logs come from a table
            const double log_total = std::log(std::accumulate(pe.begin(), pe.end(), 0.0));
            double kl = 0.0;
            for (std::size_t i = 0; i < v; ++i) {
                if (pf[i] == 0.0) continue;
                const double log_pe = config.infer_mode == PrecisionMode::Bf16 ? log_table[bf16_bits(pe[i])]
                                                                               : std::log(pe[i]);
                kl += pf[i] * ((logits[i] - mx - log_sum_full) - (log_pe - log_total));
            }
            kl_full += kl;

            const auto idx = static_cast<std::size_t>(sample_index(pe, rng));
            ratios.push_back(pf[idx] / pe[idx]);
            distinct_full.insert(pf[idx]);
            distinct_engine.insert(pe[idx]);
            ++hist_full[bf16_bits(quantize_bf16(pf[idx]))];
            ++hist_engine[bf16_bits(quantize_bf16(pe[idx]))];
        }

        Bf16StudyRow row;
        row.label = std::to_string(seed);
        row.mean = mean(ratios);
        row.std = population_stddev(ratios);
        row.max = *std::max_element(ratios.begin(), ratios.end());
        row.min = *std::min_element(ratios.begin(), ratios.end());
        row.kl_full = kl_full / static_cast<double>(config.num_tokens);
        row.kl_sampled = detail::histogram_kl(hist_full, hist_engine);
        row.distinct_full = distinct_full.size();
        row.distinct_engine = distinct_engine.size();
        report.seeds.push_back(row);
        report.level_counts.push_back(std::move(hist_engine));
    }

    Bf16StudyRow& avg = report.average;
    avg.label = "average";
    const double n = static_cast<double>(report.seeds.size());
    for (const auto& r : report.seeds) {
        avg.mean += r.mean / n;
        avg.std += r.std / n;
        avg.max += r.max / n;
        avg.min += r.min / n;
        avg.kl_full += r.kl_full / n;
        avg.kl_sampled += r.kl_sampled / n;
        avg.distinct_full += r.distinct_full;
        avg.distinct_engine += r.distinct_engine;
    }
    avg.distinct_full = static_cast<std::size_t>(static_cast<double>(avg.distinct_full) / n);
    avg.distinct_engine = static_cast<std::size_t>(static_cast<double>(avg.distinct_engine) / n);
    return report;
}

inline void write_bf16_study_csv(std::ostream& os, const Bf16StudyReport& rep) {
    os << "seed,mean,std,max,min,kl_sampled,kl_full,distinct_engine,distinct_full\n";
    char buf[512];
    auto line = [&](const Bf16StudyRow& r) {
        std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f,%.6f,%.6f,%.6f,%.6e,%zu,%zu\n", r.label.c_str(), r.mean, r.std,
                      r.max, r.min, r.kl_sampled, r.kl_full, r.distinct_engine, r.distinct_full);
        os << buf;
    };
    for (const auto& r : rep.seeds) line(r);
    line(rep.average);
}

// ===========================================================================
// Survival bias: E_{x~p}[p(x)/q(x)] >= 1
// ===========================================================================

/// Exact sum_x p(x)^2 / q(x).
inline double survival_expectation(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size()) throw DomainError("survival_expectation: length mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] == 0.0) continue;
        if (q[i] == 0.0) return std::numeric_limits<double>::infinity();
        acc += p[i] * p[i] / q[i];
    }
    return acc;
}

struct SurvivalReport {
    std::size_t num_pairs = 0;
    std::size_t support_size = 0;
    std::string generator = "normalized uniform(0,1] draws";
    std::vector<double> values;
    double min_value = 0.0;
    double max_value = 0.0;
    double mean_value = 0.0;
    std::size_t violations = 0;  // values below 1 - 1e-12
    double equality_value = 0.0;  // p = q case
};

inline std::vector<double> random_distribution(std::size_t support, Rng& rng) {
    std::vector<double> d(support);
    double s = 0.0;
    for (double& x : d) {
        x = 1.0 - uniform01(rng);  // (0, 1]
        s += x;
    }
    for (double& x : d) x /= s;
    return d;
}

inline SurvivalReport survival_bias_study(std::size_t num_pairs, std::size_t support_size, Rng& rng) {
    if (support_size < 2) throw DomainError("survival_bias_study: support size must be >= 2");
    if (num_pairs < 1) throw DomainError("survival_bias_study: need at least one pair");
    SurvivalReport rep;
    rep.num_pairs = num_pairs;
    rep.support_size = support_size;
    rep.values.reserve(num_pairs);
    std::vector<double> first_p;
    for (std::size_t k = 0; k < num_pairs; ++k) {
        const auto p = random_distribution(support_size, rng);
        const auto q = random_distribution(support_size, rng);
        if (k == 0) first_p = p;
        rep.values.push_back(survival_expectation(p, q));
    }
    rep.min_value = *std::min_element(rep.values.begin(), rep.values.end());
    rep.max_value = *std::max_element(rep.values.begin(), rep.values.end());
    rep.mean_value = mean(rep.values);
    rep.violations = static_cast<std::size_t>(
        std::count_if(rep.values.begin(), rep.values.end(), [](double v) { return v < 1.0 - 1e-12; }));
    rep.equality_value = survival_expectation(first_p, first_p);
    return rep;
}

// ===========================================================================
// On-policy identity: E_{x~pi_train}[pi_infer / pi_train] = sum_x pi_infer(x)
// ===========================================================================

struct IdentityReport {
    std::size_t num_tokens = 0;
    double exact = 0.0;     // sum_x pi_train(x) * (pi_infer(x) / pi_train(x))
    double infer_mass = 0.0;  // sum_x pi_infer(x)
    double mc_mean = 0.0;
    double mc_se = 0.0;
    double z_score = 0.0;
    double survival_mc_mean = 0.0;  // same ratio with tokens drawn from pi_infer instead
    double survival_mc_se = 0.0;
};

/// Random single-context policy (`vocab` logits ~ N(0, logit_std^2)); pi_train is its full-
/// precision softmax and pi_infer its `infer_mode` softmax.
inline IdentityReport identity_check_rho(std::size_t num_tokens, Rng& rng, PrecisionMode infer_mode = PrecisionMode::Bf16,
                                         std::size_t vocab = 256, double logit_std = 2.0) {
    if (num_tokens < 1000) throw DomainError("identity_check_rho: need at least 1000 tokens");
    std::vector<double> logits(vocab);
    std::normal_distribution<double> normal(0.0, logit_std);
    for (double& z : logits) z = normal(rng);
    const ProbVector train = softmax(logits, PrecisionMode::Full);
    const ProbVector infer = softmax(logits, infer_mode);

    IdentityReport rep;
    rep.num_tokens = num_tokens;
    for (std::size_t i = 0; i < vocab; ++i) {
        rep.exact += train[i] * (infer[i] / train[i]);
        rep.infer_mass += infer[i];
    }
    std::vector<double> ratios(num_tokens);
    for (double& r : ratios) {
        const auto x = static_cast<std::size_t>(sample_index(train.values(), rng));
        r = infer[x] / train[x];
    }
    rep.mc_mean = mean(ratios);
    rep.mc_se = standard_error(ratios);
    rep.z_score = rep.mc_se > 0.0 ? (rep.mc_mean - rep.exact) / rep.mc_se : 0.0;
    for (double& r : ratios) {
        const auto x = static_cast<std::size_t>(sample_index(infer.values(), rng));
        r = infer[x] / train[x];
    }
    rep.survival_mc_mean = mean(ratios);
    rep.survival_mc_se = standard_error(ratios);
    return rep;
}

// ===========================================================================
// Covariance decomposition by exact enumeration
// ===========================================================================

enum class AdvantageMode {
    PerSequence,      // A(o) = R(o) - 0.5, no coupling between group members
    GroupNormalized,  // group-normalized rewards; couples all G responses
};

struct CovInstance {
    std::size_t vocab = 3;
    std::size_t max_len = 1;
    std::size_t group_size = 2;
    double logit_std = 2.0;
    double theta_shift = 0.3;  // current params = old params + N(0, theta_shift^2)
    std::uint64_t seed = 7;
    AdvantageMode advantages = AdvantageMode::PerSequence;
    PrecisionMode infer_mode = PrecisionMode::Bf16;
    TaskSpec task{"target-count", 0, 1, 1.0};
};

/// Exact expectations. The inference distribution is the engine's sampling distribution
/// (bf16 probabilities renormalized per context), so both measures are proper.
struct CovReport {
    std::size_t num_sequences = 0;
    std::size_t num_groups = 0;
    double j_train = 0.0;       // E_train[sum X]
    double j_infer = 0.0;       // E_infer[sum X]
    double delta_exact = 0.0;   // j_infer - j_train
    double delta_cov = 0.0;     // sum_{i,t} Cov_train(X_{i,t}, rho^-1_{i,t})
    double residual = 0.0;      // |delta_exact - delta_cov|
};

namespace detail {

struct EnumSeq {
    Sequence seq;
    double p_train = 1.0;
    double p_infer = 1.0;
    std::vector<double> r;      // current / old, per position
    std::vector<double> inv_rho;  // infer / train (old params), per position
    double reward = 0.0;
};

inline void enumerate_sequences(const PolicyParams& old, const PolicyParams& cur, const CovInstance& inst, EnumSeq prefix,
                                std::vector<EnumSeq>& out) {
    const int prev = prefix.seq.tokens.empty() ? kBos : prefix.seq.tokens.back();
    const ProbVector pt = token_dist(old, prev, PrecisionMode::Full);
    const ProbVector pi = inst.infer_mode == PrecisionMode::Full ? pt : token_dist(old, prev, inst.infer_mode).normalized();
    const ProbVector pc = token_dist(cur, prev, PrecisionMode::Full);
    for (std::size_t tok = 0; tok < inst.vocab; ++tok) {
        EnumSeq next = prefix;
        next.seq.tokens.push_back(static_cast<int>(tok));
        next.p_train *= pt[tok];
        next.p_infer *= pi[tok];
        next.r.push_back(pc[tok] / pt[tok]);
        next.inv_rho.push_back(pi[tok] / pt[tok]);
        const bool done = static_cast<int>(tok) == old.eos_token() || next.seq.size() == inst.max_len;
        if (done) {
            next.seq.terminated = static_cast<int>(tok) == old.eos_token();
            next.reward = reward(next.seq, inst.task);
            out.push_back(std::move(next));
        } else {
            enumerate_sequences(old, cur, inst, std::move(next), out);
        }
    }
}

}  // namespace detail

inline CovReport cov_identity_check(const CovInstance& inst) {
    if (inst.vocab < 2 || inst.vocab > 4 || inst.max_len < 1 || inst.max_len > 3 || inst.group_size < 2 ||
        inst.group_size > 3) {
        throw DomainError("cov_identity_check: instance too large to enumerate (need 2 <= V <= 4, 1 <= max_len <= 3, "
                          "2 <= G <= 3)");
    }
    Rng rng = substream(inst.seed);
    const PolicyParams old = PolicyParams::random(inst.vocab, inst.logit_std, rng);
    PolicyParams cur = old;
    std::normal_distribution<double> shift(0.0, inst.theta_shift);
    for (double& x : cur.logits.data) x += inst.theta_shift > 0.0 ? shift(rng) : 0.0;

    std::vector<detail::EnumSeq> seqs;
    detail::enumerate_sequences(old, cur, inst, {}, seqs);

    const std::size_t G = inst.group_size;
    const std::size_t L = inst.max_len;
    const double g = static_cast<double>(G);
    CovReport rep;
    rep.num_sequences = seqs.size();

    // Slot (i, t) accumulators: E[X], E[v], E[X v] under train.
    const std::size_t slots = G * L;
    std::vector<double> ex(slots, 0.0), ev(slots, 0.0), exv(slots, 0.0);

    auto visit = [&](const std::vector<const detail::EnumSeq*>& group, std::span<const double> adv) {
        double pt = 1.0, pi = 1.0;
        for (const auto* s : group) {
            pt *= s->p_train;
            pi *= s->p_infer;
        }
        double sum_x = 0.0;
        for (std::size_t i = 0; i < G; ++i) {
            const auto& s = *group[i];
            const double len = static_cast<double>(s.seq.size());
            for (std::size_t t = 0; t < L; ++t) {
                const bool present = t < s.seq.size();
                const double x = present ? s.r[t] * adv[i] / (g * len) : 0.0;
                const double v = present ? s.inv_rho[t] : 1.0;
                sum_x += x;
                ex[i * L + t] += pt * x;
                ev[i * L + t] += pt * v;
                exv[i * L + t] += pt * x * v;
            }
        }
        rep.j_train += pt * sum_x;
        rep.j_infer += pi * sum_x;
        ++rep.num_groups;
    };

    if (inst.advantages == AdvantageMode::PerSequence) {
        // Responses are independent, so every slot has the same marginal; enumerate one
        // response and replicate across the G slots.
        std::vector<double> adv(G);
        for (const auto& s : seqs) {
            std::fill(adv.begin(), adv.end(), s.reward - 0.5);
            const double pt = s.p_train, pi = s.p_infer;
            double sum_x = 0.0;
            const double len = static_cast<double>(s.seq.size());
            for (std::size_t t = 0; t < L; ++t) {
                const bool present = t < s.seq.size();
                const double x = present ? s.r[t] * adv[0] / (g * len) : 0.0;
                const double v = present ? s.inv_rho[t] : 1.0;
                sum_x += x;
                for (std::size_t i = 0; i < G; ++i) {
                    ex[i * L + t] += pt * x;
                    ev[i * L + t] += pt * v;
                    exv[i * L + t] += pt * x * v;
                }
            }
            rep.j_train += g * pt * sum_x;
            rep.j_infer += g * pi * sum_x;
            ++rep.num_groups;
        }
    } else {
        std::vector<std::size_t> idx(G, 0);
        std::vector<const detail::EnumSeq*> group(G);
        std::vector<double> rewards(G);
        while (true) {
            for (std::size_t i = 0; i < G; ++i) {
                group[i] = &seqs[idx[i]];
                rewards[i] = group[i]->reward;
            }
            visit(group, compute_advantages(rewards));
            std::size_t k = 0;
            while (k < G && ++idx[k] == seqs.size()) idx[k++] = 0;
            if (k == G) break;
        }
    }

    rep.delta_exact = rep.j_infer - rep.j_train;
    for (std::size_t s = 0; s < slots; ++s) rep.delta_cov += exv[s] - ex[s] * ev[s];
    rep.residual = std::abs(rep.delta_exact - rep.delta_cov);
    return rep;
}

// ===========================================================================
// Unbiased (variance) vs biased (injection) modulation
// ===========================================================================

struct VarianceStudyConfig {
    std::size_t batches = 200;
    double sigma = 0.2;
    double delta = 2.0;
    double pi_low = 0.1;
    std::uint64_t seed = 11;
    std::size_t prompts = 8;
    std::size_t group_size = 8;
    std::size_t max_len = 8;
};

struct VarianceStudyReport {
    std::vector<double> variance_samples;
    std::vector<double> injection_samples;
    double variance_mean = 0.0;
    double variance_se = 0.0;
    double injection_mean = 0.0;
    double injection_se = 0.0;
    bool variance_unbiased = false;  // |mean| <= 5 SE
    bool injection_biased = false;   // |mean| > 5 SE
};

/// Policy for the constructed task: V = 8, every context puts logit -1 on the target token 0
/// and +1 elsewhere, so the target is a low-probability token (p ~ 0.019 < pi_low) and the
/// reward (target present) correlates low-probability membership with positive advantages.
inline PolicyParams constructed_low_prob_policy() {
    PolicyParams p(8);
    for (std::size_t row = 0; row < p.logits.rows; ++row) {
        for (std::size_t j = 0; j < p.vocab; ++j) p.logits(row, j) = j == 0 ? -1.0 : 1.0;
    }
    return p;
}

/// Records delta_j_direct at the on-policy point (r = 1) for R independent Full-mode batches
/// under GSPO, once with Gaussian weights N(1, sigma^2) and once with low-probability injection.
inline VarianceStudyReport variance_unbiasedness_study(const VarianceStudyConfig& cfg) {
    if (cfg.batches < 30) throw DomainError("variance_unbiasedness_study: need at least 30 batches");
    const PolicyParams params = constructed_low_prob_policy();
    RolloutRequest req;
    req.group_size = cfg.group_size;
    req.max_len = cfg.max_len;
    req.infer_mode = PrecisionMode::Full;
    req.task = TaskSpec{"target-count", 0, 1, 1.0};

    ObjectiveConfig var_cfg = ObjectiveConfig::gspo();
    var_cfg.modulation = {ModulationKind::GaussianVariance, cfg.delta, cfg.pi_low, cfg.sigma};
    ObjectiveConfig inj_cfg = ObjectiveConfig::gspo();
    inj_cfg.modulation = {ModulationKind::InjectLowProb, cfg.delta, cfg.pi_low, cfg.sigma};

    VarianceStudyReport rep;
    std::vector<int> prompts(cfg.prompts);
    for (std::size_t b = 0; b < cfg.batches; ++b) {
        for (std::size_t p = 0; p < prompts.size(); ++p) prompts[p] = static_cast<int>(b * cfg.prompts + p);
        RolloutBatch batch = collect_rollout(params, prompts, req, cfg.seed, b);

        Rng xi = substream(cfg.seed, {0x5e, b});
        assign_modulation_weights(batch, var_cfg.modulation, xi);
        rep.variance_samples.push_back(objective_and_gradient(batch, params, var_cfg).delta_j_direct);

        assign_modulation_weights(batch, inj_cfg.modulation, xi);
        rep.injection_samples.push_back(objective_and_gradient(batch, params, inj_cfg).delta_j_direct);
    }
    rep.variance_mean = mean(rep.variance_samples);
    rep.variance_se = standard_error(rep.variance_samples);
    rep.injection_mean = mean(rep.injection_samples);
    rep.injection_se = standard_error(rep.injection_samples);
    rep.variance_unbiased = std::abs(rep.variance_mean) <= 5.0 * rep.variance_se;
    rep.injection_biased = std::abs(rep.injection_mean) > 5.0 * rep.injection_se;
    return rep;
}

}  // namespace rlvrsim
