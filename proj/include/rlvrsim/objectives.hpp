// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "rlvrsim/errors.hpp"
#include "rlvrsim/numerics.hpp"
#include "rlvrsim/policy.hpp"
#include "rlvrsim/random.hpp"
#include "rlvrsim/rollout.hpp"

namespace rlvrsim {

enum class ObjectiveKind { GrpoToken, GspoSequence };

/// Per-token multiplicative weight applied on top of the surrogate.
///   ClipMask:         hard 0/1 mask on the unclipped ratio term (clipping viewed as reweighting)
///   InjectLowProb:    weight `delta` for tokens with p_train_old < pi_low, 1 otherwise
///   GaussianVariance: weight drawn i.i.d. from N(1, sigma^2) per token
enum class ModulationKind { None, ClipMask, InjectLowProb, GaussianVariance };

struct Modulation {
    ModulationKind kind = ModulationKind::None;
    double delta = 2.0;
    double pi_low = 0.1;
    double sigma = 0.2;

    friend bool operator==(const Modulation&, const Modulation&) = default;
};

struct ObjectiveConfig {
    ObjectiveKind kind = ObjectiveKind::GrpoToken;
    double eps_low = 0.2;
    double eps_high = 0.2;
    std::optional<double> tis_cap;  // truncated importance sampling cap C; absent = no correction
    Modulation modulation;
    double monitor_delta = 2.0;  // delta used by the spurious-signal monitor J
    double monitor_pi_low = 0.1;

    static ObjectiveConfig grpo() { return {}; }

    static ObjectiveConfig gspo() {
        ObjectiveConfig c;
        c.kind = ObjectiveKind::GspoSequence;
        c.eps_low = 3e-4;
        c.eps_high = 4e-4;
        return c;
    }

    friend bool operator==(const ObjectiveConfig&, const ObjectiveConfig&) = default;
};

inline void validate(const ObjectiveConfig& c) {
    if (!(c.eps_low > 0.0)) throw ConfigError("objective.eps_low", "must be > 0");
    if (!(c.eps_high > 0.0)) throw ConfigError("objective.eps_high", "must be > 0");
    if (c.tis_cap && !(*c.tis_cap >= 1.0)) throw ConfigError("objective.tis_cap", "must be >= 1");
    if (!(c.modulation.delta >= 0.0)) throw ConfigError("modulation.delta", "must be >= 0");
    if (!(c.modulation.pi_low > 0.0 && c.modulation.pi_low < 1.0)) throw ConfigError("modulation.pi_low", "must lie in (0, 1)");
    if (!(c.modulation.sigma >= 0.0)) throw ConfigError("modulation.sigma", "must be >= 0");
    if (!(c.monitor_delta >= 0.0)) throw ConfigError("objective.monitor_delta", "must be >= 0");
    if (!(c.monitor_pi_low > 0.0 && c.monitor_pi_low < 1.0)) throw ConfigError("objective.monitor_pi_low", "must lie in (0, 1)");
}

// ---------------------------------------------------------------------------
// Per-token pieces
// ---------------------------------------------------------------------------

inline double clip_ratio(double ratio, double eps_low, double eps_high) {
    return std::clamp(ratio, 1.0 - eps_low, 1.0 + eps_high);
}

/// min(r A, clip(r, 1-eps_low, 1+eps_high) A)
inline double grpo_term(double r, double advantage, double eps_low, double eps_high) {
    return std::min(r * advantage, clip_ratio(r, eps_low, eps_high) * advantage);
}

/// Same clipped-min form evaluated on the sequence-level ratio s.
inline double gspo_term(double s, double advantage, double eps_low, double eps_high) {
    return grpo_term(s, advantage, eps_low, eps_high);
}

/// Length-normalized sequence ratio exp(mean_t ln r_t).
inline double sequence_ratio(std::span<const double> token_ratios) {
    if (token_ratios.empty()) throw DomainError("sequence_ratio: empty sequence");
    double acc = 0.0;
    for (double r : token_ratios) acc += std::log(r);
    return std::exp(acc / static_cast<double>(token_ratios.size()));
}

inline double tis_weight(double rho, double cap) { return std::min(rho, cap); }

/// 0 for tokens outside the clip band, 1 otherwise.
inline double clip_mask(double r, double eps_low, double eps_high) {
    return (r < 1.0 - eps_low || r > 1.0 + eps_high) ? 0.0 : 1.0;
}

inline double injection_weight(double p_train_old, double delta, double pi_low) {
    return p_train_old < pi_low ? delta : 1.0;
}

inline double variance_weight(Rng& rng, double sigma) {
    if (sigma == 0.0) return 1.0;
    return std::normal_distribution<double>(1.0, sigma)(rng);
}

/// Stores the static per-token weight of `m` in each record's `phi`. ClipMask and None leave
/// phi = 1 (the clip mask depends on the current ratio and is evaluated inside the objective).
inline void assign_modulation_weights(RolloutBatch& batch, const Modulation& m, Rng& rng) {
    for (auto& rec : batch.records) {
        switch (m.kind) {
            case ModulationKind::InjectLowProb: rec.phi = injection_weight(rec.p_train_old, m.delta, m.pi_low); break;
            case ModulationKind::GaussianVariance: rec.phi = variance_weight(rng, m.sigma); break;
            default: rec.phi = 1.0; break;
        }
    }
}

// ---------------------------------------------------------------------------
// Batch objective
// ---------------------------------------------------------------------------

inline double delta_j_cov(const RolloutBatch& batch);

struct ObjectiveReport {
    double value = 0.0;
    Matrix gradient;
    double clip_fraction = 0.0;
    double j_monitor = 0.0;
    double delta_j_direct = 0.0;
    double delta_j_cov = 0.0;
};

/// J = sum over tokens of A (phi - 1) with phi the low-probability injection weight.
inline double spurious_signal_J(std::span<const TokenRecord> records, double delta, double pi_low) {
    double j = 0.0;
    for (const auto& r : records) j += r.advantage * (injection_weight(r.p_train_old, delta, pi_low) - 1.0);
    return j;
}

namespace detail {

inline double token_norm(const RolloutBatch& batch, const TokenRecord& rec) {
    return 1.0 / (static_cast<double>(batch.num_groups()) * static_cast<double>(batch.group_size) *
                  static_cast<double>(rec.response_length));
}

/// Per-token X = r A / (G |o_i|), additionally divided by the number of groups P.
inline double token_x(const RolloutBatch& batch, const TokenRecord& rec) {
    return rec.r * rec.advantage * token_norm(batch, rec);
}

inline Matrix full_prob_table(const PolicyParams& params) {
    Matrix probs(params.logits.rows, params.logits.cols);
    for (std::size_t row = 0; row < probs.rows; ++row) {
        const ProbVector p = softmax(params.logits.row(row), PrecisionMode::Full);
        std::copy(p.values().begin(), p.values().end(), probs.row(row).begin());
    }
    return probs;
}

inline void add_logprob_grad(const Matrix& probs, std::size_t row, int tok, double scale, Matrix& grad) {
    auto g = grad.row(row);
    auto p = probs.row(row);
    for (std::size_t j = 0; j < g.size(); ++j) g[j] -= scale * p[j];
    g[static_cast<std::size_t>(tok)] += scale;
}

inline std::string describe_batch(const RolloutBatch& batch, std::size_t max_rows = 64) {
    std::ostringstream os;
    os << "groups=" << batch.num_groups() << " G=" << batch.group_size << " tokens=" << batch.records.size() << '\n';
    write_token_csv_header(os);
    write_token_csv_rows(os, std::span(batch.records).first(std::min(max_rows, batch.records.size())), 0);
    return os.str();
}

}  // namespace detail

/// Surrogate value, gradient and diagnostics at parameters `params` for a batch collected under
/// the frozen old parameters. Only the ratio (r or s) carries gradient; advantages, rho,
/// modulation weights and the clip-branch choice are constants.
inline ObjectiveReport objective_and_gradient(const RolloutBatch& batch, const PolicyParams& params,
                                              const ObjectiveConfig& config, const std::string& context = {}) {
    validate(config);
    if (batch.records.empty()) throw DomainError("objective_and_gradient: empty batch");
    if (!params.all_finite()) {
        throw NumericalError("objective_and_gradient: non-finite parameters" + (context.empty() ? std::string() : " at " + context),
                             detail::describe_batch(batch));
    }

    const Matrix probs = detail::full_prob_table(params);
    const std::size_t n = batch.records.size();

    std::vector<double> ratio(n);
    for (std::size_t k = 0; k < n; ++k) {
        const auto& rec = batch.records[k];
        ratio[k] = probs(params.row_of(rec.prev), static_cast<std::size_t>(rec.token)) / rec.p_train_old;
    }
    if (config.kind == ObjectiveKind::GspoSequence) {
        // records of one response are contiguous
        for (std::size_t k = 0; k < n;) {
            std::size_t end = k;
            while (end < n && batch.records[end].response == batch.records[k].response) ++end;
            const double s = sequence_ratio(std::span<const double>(ratio).subspan(k, end - k));
            std::fill(ratio.begin() + static_cast<std::ptrdiff_t>(k), ratio.begin() + static_cast<std::ptrdiff_t>(end), s);
            k = end;
        }
    }

    const bool mask_form = config.modulation.kind == ModulationKind::ClipMask;
    ObjectiveReport rep;
    rep.gradient = Matrix(params.logits.rows, params.logits.cols, 0.0);
    std::vector<double> coef(n, 0.0);  // d value / d ratio_k
    std::size_t clipped = 0;

    for (std::size_t k = 0; k < n; ++k) {
        const auto& rec = batch.records[k];
        const double a = rec.advantage;
        const double x = ratio[k];
        const double mask = clip_mask(x, config.eps_low, config.eps_high);
        clipped += (mask == 0.0);

        double weight = 1.0;
        if (mask_form) {
            weight = mask;
        } else if (config.modulation.kind != ModulationKind::None) {
            weight = rec.phi;
        }
        const double tis = config.tis_cap ? tis_weight(rec.rho, *config.tis_cap) : 1.0;
        const double norm = detail::token_norm(batch, rec);

        double base = 0.0;
        double dbase = 0.0;
        if (mask_form) {
            base = x * a;
            dbase = a;
        } else {
            const double unclipped = x * a;
            const double clipped_term = clip_ratio(x, config.eps_low, config.eps_high) * a;
            base = std::min(unclipped, clipped_term);
            dbase = unclipped <= clipped_term ? a : 0.0;
        }
        rep.value += norm * weight * tis * base;
        rep.delta_j_direct += norm * tis * base * (weight - 1.0);
        coef[k] = norm * weight * tis * dbase;
    }

    if (config.kind == ObjectiveKind::GrpoToken) {
        for (std::size_t k = 0; k < n; ++k) {
            const auto& rec = batch.records[k];
            if (coef[k] != 0.0) detail::add_logprob_grad(probs, params.row_of(rec.prev), rec.token, coef[k] * ratio[k], rep.gradient);
        }
    } else {
        for (std::size_t k = 0; k < n;) {
            std::size_t end = k;
            double total = 0.0;
            while (end < n && batch.records[end].response == batch.records[k].response) total += coef[end++];
            if (total != 0.0) {
                const double scale = total * ratio[k] / static_cast<double>(end - k);
                for (std::size_t u = k; u < end; ++u) {
                    detail::add_logprob_grad(probs, params.row_of(batch.records[u].prev), batch.records[u].token, scale, rep.gradient);
                }
            }
            k = end;
        }
    }

    rep.clip_fraction = static_cast<double>(clipped) / static_cast<double>(n);
    rep.j_monitor = spurious_signal_J(batch.records, config.monitor_delta, config.monitor_pi_low);
    rep.delta_j_cov = delta_j_cov(batch);

    if (!std::isfinite(rep.value) || !std::isfinite(rep.delta_j_direct) || !rep.gradient.all_finite()) {
        throw NumericalError("objective_and_gradient: non-finite value or gradient" +
                                 (context.empty() ? std::string() : " at " + context),
                             detail::describe_batch(batch));
    }
    return rep;
}

/// (1/P) sum_{i,t} X_{i,t} (w_{i,t} - 1) with X = r A / (G |o_i|) taken from the records.
inline double delta_j_weighted(const RolloutBatch& batch, std::span<const double> weights) {
    if (weights.size() != batch.records.size()) throw DomainError("delta_j_weighted: one weight per token required");
    double acc = 0.0;
    for (std::size_t k = 0; k < weights.size(); ++k) acc += detail::token_x(batch, batch.records[k]) * (weights[k] - 1.0);
    return acc;
}

/// Direct estimate of the modulation-induced shift sum X (phi - 1) for a batch whose records'
/// phi have been assigned (ClipMask evaluates its mask on the stored r).
inline double delta_j_direct(const RolloutBatch& batch, const Modulation& m, double eps_low = 0.2,
                             double eps_high = 0.2) {
    std::vector<double> w(batch.records.size(), 1.0);
    for (std::size_t k = 0; k < w.size(); ++k) {
        const auto& rec = batch.records[k];
        switch (m.kind) {
            case ModulationKind::None: w[k] = 1.0; break;
            case ModulationKind::ClipMask: w[k] = clip_mask(rec.r, eps_low, eps_high); break;
            default: w[k] = rec.phi; break;
        }
    }
    return delta_j_weighted(batch, w);
}

/// Covariance form of the mismatch-induced shift, sum Cov_train(X, rho^-1), estimated from the
/// batch tokens. Only meaningful for train-sampled batches; for inference-sampled batches the
/// shift is estimated directly as (1/P) sum X (1 - rho).
inline double delta_j_cov(const RolloutBatch& batch) {
    if (batch.records.empty()) return 0.0;
    if (batch.sampled_under == SampledUnder::Infer) {
        double acc = 0.0;
        for (const auto& rec : batch.records) acc += detail::token_x(batch, rec) * (1.0 - rec.rho);
        return acc;
    }
    const double n = static_cast<double>(batch.records.size());
    double sx = 0.0, sv = 0.0, sxv = 0.0;
    for (const auto& rec : batch.records) {
        const double x = detail::token_x(batch, rec);
        const double v = rec.inv_rho();
        sx += x;
        sv += v;
        sxv += x * v;
    }
    return n * (sxv / n - (sx / n) * (sv / n));
}

}  // namespace rlvrsim
