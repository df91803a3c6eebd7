// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "rlvrsim/errors.hpp"
#include "rlvrsim/numerics.hpp"
#include "rlvrsim/objectives.hpp"
#include "rlvrsim/policy.hpp"
#include "rlvrsim/random.hpp"
#include "rlvrsim/rollout.hpp"

namespace rlvrsim {

struct TrainerConfig {
    std::size_t vocab = 32;
    std::size_t prompts_per_step = 32;
    std::size_t group_size = 8;
    std::size_t inner_updates = 4;
    double learning_rate = 2.0;
    std::size_t total_steps = 300;
    std::size_t max_len = 32;
    double init_logit_std = 1.0;
    PrecisionMode infer_mode = PrecisionMode::Bf16;
    ObjectiveConfig objective;
    std::uint64_t seed = 1;
    TaskSpec task;

    friend bool operator==(const TrainerConfig&, const TrainerConfig&) = default;
};

inline void validate(const TrainerConfig& c) {
    if (c.vocab < 2) throw ConfigError("vocab", "must be >= 2");
    if (c.prompts_per_step < 2) throw ConfigError("prompts_per_step", "must be >= 2");
    if (c.group_size < 2) throw ConfigError("group_size", "must be >= 2");
    if (c.inner_updates < 1) throw ConfigError("inner_updates", "must be >= 1");
    if (!(c.learning_rate > 0.0)) throw ConfigError("learning_rate", "must be > 0");
    if (c.max_len < 1) throw ConfigError("max_len", "must be >= 1");
    if (!(c.init_logit_std >= 0.0)) throw ConfigError("init_logit_std", "must be >= 0");
    if (c.task.name != "target-count" && c.task.name != "constant") {
        throw ConfigError("task.name", "unknown task '" + c.task.name + "'");
    }
    if (c.task.name == "target-count" && (c.task.target_token < 0 || c.task.target_token >= static_cast<int>(c.vocab))) {
        throw ConfigError("task.target_token", "must lie in [0, vocab)");
    }
    validate(c.objective);
}

/// One telemetry row, emitted per inner update.
struct StepMetrics {
    std::uint64_t step = 0;
    std::uint64_t inner_update = 0;
    double reward_mean = 0.0;
    double mismatch = 0.0;
    double entropy_mean = 0.0;
    double clip_fraction = 0.0;
    double pcc_train_infer = 1.0;
    double max_rho = 1.0;
    double j_monitor = 0.0;
    double delta_j_direct = 0.0;
    double grad_norm = 0.0;

    friend bool operator==(const StepMetrics&, const StepMetrics&) = default;
};

inline constexpr const char* kMetricsCsvHeader =
    "step,inner_update,reward_mean,mismatch,entropy_mean,clip_fraction,pcc_train_infer,max_rho,j_monitor,"
    "delta_j_direct,grad_norm";

inline void write_metrics_row(std::ostream& os, const StepMetrics& m) {
    char buf[512];
    std::snprintf(buf, sizeof buf, "%llu,%llu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                  static_cast<unsigned long long>(m.step), static_cast<unsigned long long>(m.inner_update),
                  m.reward_mean, m.mismatch, m.entropy_mean, m.clip_fraction, m.pcc_train_infer, m.max_rho,
                  m.j_monitor, m.delta_j_direct, m.grad_norm);
    os << buf;
}

/// Gradient ascent step; increments the version.
inline PolicyParams update_params(const PolicyParams& params, const Matrix& gradient, double learning_rate) {
    if (!params.logits.same_shape(gradient)) throw DomainError("update_params: gradient shape does not match parameters");
    PolicyParams out = params;
    for (std::size_t i = 0; i < out.logits.data.size(); ++i) out.logits.data[i] += learning_rate * gradient.data[i];
    ++out.version;
    return out;
}

struct TrainerState {
    PolicyParams params;
    std::uint64_t step = 0;  // completed rollout phases
};

namespace detail {

inline constexpr std::uint64_t kInitTag = 0x1417;
inline constexpr std::uint64_t kModulationTag = 0x3a11;

inline double safe_pcc(std::span<const TokenRecord> records) {
    bool identical = true;
    for (const auto& r : records) identical = identical && r.p_train_old == r.p_infer_old;
    if (identical) return 1.0;
    try {
        return pcc_train_infer(records);
    } catch (const DomainError&) {
        return 0.0;
    }
}

}  // namespace detail

inline TrainerState initial_state(const TrainerConfig& config) {
    Rng rng = substream(config.seed, {detail::kInitTag});
    return {PolicyParams::random(config.vocab, config.init_logit_std, rng), 0};
}

/// Rollout under the frozen parameters, then `inner_updates` ascent steps on the same batch.
/// Returns one metrics row per inner update. Also exposes the rollout batch when requested.
inline std::vector<StepMetrics> train_step(TrainerState& state, const TrainerConfig& config,
                                           RolloutBatch* batch_out = nullptr) {
    const std::uint64_t step = state.step;
    const PolicyParams old = state.params;

    std::vector<int> prompts(config.prompts_per_step);
    for (std::size_t p = 0; p < prompts.size(); ++p) prompts[p] = static_cast<int>(step * config.prompts_per_step + p);

    RolloutRequest req;
    req.group_size = config.group_size;
    req.max_len = config.max_len;
    req.infer_mode = config.infer_mode;
    req.task = config.task;
    RolloutBatch batch = collect_rollout(old, prompts, req, config.seed, step);
    Rng mod_rng = substream(config.seed, {detail::kModulationTag, step});
    assign_modulation_weights(batch, config.objective.modulation, mod_rng);

    StepMetrics phase;
    phase.step = step;
    phase.reward_mean = mean(batch.rewards);
    phase.mismatch = batch.records.size() >= 2 ? mismatch(batch.records) : 0.0;
    phase.max_rho = max_rho(batch.records);
    phase.pcc_train_infer = batch.records.size() >= 2 ? detail::safe_pcc(batch.records) : 1.0;
    {
        double h = 0.0;
        for (const auto& rec : batch.records) h += entropy(token_dist(old, rec.prev, PrecisionMode::Full));
        phase.entropy_mean = h / static_cast<double>(batch.records.size());
    }

    std::vector<StepMetrics> rows;
    for (std::size_t m = 0; m < config.inner_updates; ++m) {
        refresh_current(batch, state.params);
        const std::string ctx = "step " + std::to_string(step) + " inner_update " + std::to_string(m);
        const ObjectiveReport rep = objective_and_gradient(batch, state.params, config.objective, ctx);
        StepMetrics row = phase;
        row.inner_update = m;
        row.clip_fraction = rep.clip_fraction;
        row.j_monitor = rep.j_monitor;
        row.delta_j_direct = rep.delta_j_direct;
        row.grad_norm = rep.gradient.frobenius_norm();
        rows.push_back(row);
        state.params = update_params(state.params, rep.gradient, config.learning_rate);
    }
    ++state.step;
    if (batch_out) *batch_out = std::move(batch);
    return rows;
}

struct ExperimentResult {
    std::vector<StepMetrics> metrics;
    PolicyParams initial;
    PolicyParams final_params;
};

using MetricsSink = std::function<void(const StepMetrics&)>;
/// Receives each rollout batch after its inner updates (records carry the last r values).
using BatchSink = std::function<void(std::uint64_t step, const RolloutBatch&)>;

/// Runs `total_steps` rollout phases. With `resume_from`, training continues from the
/// snapshot: its version must be a multiple of `inner_updates`, and the step counter resumes
/// at version / inner_updates.
inline ExperimentResult run_experiment(const TrainerConfig& config, const MetricsSink& sink = {},
                                       const std::optional<PolicyParams>& resume_from = std::nullopt,
                                       const BatchSink& batch_sink = {}) {
    validate(config);
    TrainerState state = initial_state(config);
    if (resume_from) {
        if (resume_from->vocab != config.vocab) throw ConfigError("vocab", "snapshot vocabulary does not match config");
        if (resume_from->version % config.inner_updates != 0) {
            throw ConfigError("inner_updates", "snapshot version is not a whole number of rollout phases");
        }
        state.params = *resume_from;
        state.step = resume_from->version / config.inner_updates;
    }
    ExperimentResult result;
    result.initial = state.params;
    RolloutBatch batch;
    while (state.step < config.total_steps) {
        const std::uint64_t step = state.step;
        for (const auto& row : train_step(state, config, batch_sink ? &batch : nullptr)) {
            if (sink) sink(row);
            result.metrics.push_back(row);
        }
        if (batch_sink) batch_sink(step, batch);
    }
    result.final_params = state.params;
    return result;
}

}  // namespace rlvrsim
