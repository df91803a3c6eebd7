// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>
#include <vector>

#include "rlvrsim/trainer.hpp"

using namespace rlvrsim;

namespace {

TrainerConfig small_config() {
    TrainerConfig c;
    c.vocab = 8;
    c.prompts_per_step = 4;
    c.group_size = 4;
    c.inner_updates = 2;
    c.total_steps = 5;
    c.max_len = 8;
    c.task = TaskSpec{"target-count", 0, 1, 1.0};
    return c;
}

}  // namespace

TEST(UpdateParams, AscentAndVersion) {
    PolicyParams p(2);
    Matrix g(3, 2, 0.0);
    g(0, 1) = 0.5;
    const auto q = update_params(p, g, 2.0);
    EXPECT_EQ(q.logits(0, 1), 1.0);
    EXPECT_EQ(q.logits(0, 0), 0.0);
    EXPECT_EQ(q.version, 1u);
    EXPECT_EQ(p.version, 0u);
    EXPECT_THROW(update_params(p, Matrix(2, 2, 0.0), 1.0), DomainError);
}

TEST(Validate, NamesOffendingKey) {
    TrainerConfig c = small_config();
    c.group_size = 1;
    try {
        validate(c);
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_EQ(e.key(), "group_size");
    }
    c = small_config();
    c.task.target_token = 8;
    EXPECT_THROW(validate(c), ConfigError);
    c = small_config();
    c.learning_rate = 0.0;
    EXPECT_THROW(validate(c), ConfigError);
}

TEST(RunExperiment, Deterministic) {
    const auto a = run_experiment(small_config());
    const auto b = run_experiment(small_config());
    EXPECT_EQ(a.metrics, b.metrics);
    EXPECT_EQ(a.final_params.logits, b.final_params.logits);
    TrainerConfig other = small_config();
    other.seed = 2;
    EXPECT_NE(run_experiment(other).final_params.logits, a.final_params.logits);
}

TEST(RunExperiment, ZeroStepsLeavesInitialParams) {
    TrainerConfig c = small_config();
    c.total_steps = 0;
    const auto r = run_experiment(c);
    EXPECT_TRUE(r.metrics.empty());
    EXPECT_EQ(r.final_params.logits, r.initial.logits);
}

TEST(RunExperiment, VersionCountsInnerUpdates) {
    const auto r = run_experiment(small_config());
    EXPECT_EQ(r.final_params.version, 10u);
    EXPECT_EQ(r.metrics.size(), 10u);
    for (std::size_t k = 0; k < r.metrics.size(); ++k) {
        EXPECT_EQ(r.metrics[k].step, k / 2);
        EXPECT_EQ(r.metrics[k].inner_update, k % 2);
    }
}

TEST(RunExperiment, FirstInnerUpdateIsOnPolicy) {
    TrainerConfig c = small_config();
    c.learning_rate = 50.0;
    for (const auto& m : run_experiment(c).metrics) {
        if (m.inner_update == 0) {
            EXPECT_EQ(m.clip_fraction, 0.0);
        }
    }
}

TEST(RunExperiment, FullModeHasNoMismatch) {
    TrainerConfig c = small_config();
    c.infer_mode = PrecisionMode::Full;
    for (const auto& m : run_experiment(c).metrics) {
        EXPECT_EQ(m.mismatch, 0.0);
        EXPECT_EQ(m.max_rho, 1.0);
        EXPECT_EQ(m.pcc_train_infer, 1.0);
    }
}

TEST(RunExperiment, Bf16ModeHasMismatch) {
    TrainerConfig c = small_config();
    c.vocab = 32;
    double total = 0.0;
    for (const auto& m : run_experiment(c).metrics) total += m.mismatch;
    EXPECT_GT(total, 0.0);
}

TEST(RunExperiment, EqualRewardsGiveZeroGradient) {
    TrainerConfig c = small_config();
    c.task = TaskSpec{"constant", 0, 1, 1.0};
    const auto r = run_experiment(c);
    for (const auto& m : r.metrics) {
        EXPECT_EQ(m.grad_norm, 0.0);
        EXPECT_EQ(m.reward_mean, 1.0);
    }
    EXPECT_EQ(r.final_params.logits, r.initial.logits);
}

TEST(RunExperiment, ResumeMatchesUninterruptedRun) {
    const auto full = run_experiment(small_config());
    TrainerConfig half = small_config();
    half.total_steps = 2;
    const auto first = run_experiment(half);
    const auto rest = run_experiment(small_config(), {}, first.final_params);
    EXPECT_EQ(rest.final_params.logits, full.final_params.logits);
    EXPECT_EQ(rest.metrics.size(), 6u);
    EXPECT_EQ(rest.metrics.front().step, 2u);

    PolicyParams odd = first.final_params;
    odd.version = 3;
    EXPECT_THROW(run_experiment(small_config(), {}, odd), ConfigError);
    EXPECT_THROW(run_experiment(small_config(), {}, PolicyParams(5)), ConfigError);
}

TEST(RunExperiment, SinksSeeEveryRowAndBatch) {
    std::size_t rows = 0, batches = 0;
    run_experiment(small_config(), [&](const StepMetrics&) { ++rows; }, std::nullopt,
                   [&](std::uint64_t step, const RolloutBatch& b) {
                       EXPECT_EQ(step, batches);
                       EXPECT_EQ(b.responses.size(), 16u);
                       ++batches;
                   });
    EXPECT_EQ(rows, 10u);
    EXPECT_EQ(batches, 5u);
}

TEST(RunExperiment, RewardTrendsUpInFullPrecision) {
    TrainerConfig c;
    c.infer_mode = PrecisionMode::Full;
    c.total_steps = 200;
    std::vector<double> reward;
    for (const auto& m : run_experiment(c).metrics) {
        if (m.inner_update == 0) reward.push_back(m.reward_mean);
    }
    EXPECT_GT(trend_slope(reward), 0.0);
    EXPECT_GT(mean(std::span(reward).last(20)), mean(std::span(reward).first(20)));
}

TEST(RunExperiment, InjectionMatchesBaselineUntilFirstLowProbToken) {
    // Uniform start over 4 tokens: nothing is below pi_low until training concentrates mass.
    TrainerConfig base = small_config();
    base.vocab = 4;
    base.init_logit_std = 0.0;
    base.infer_mode = PrecisionMode::Full;
    base.learning_rate = 5.0;
    base.objective = ObjectiveConfig::grpo();
    TrainerConfig inj = base;
    inj.objective.modulation = {ModulationKind::InjectLowProb, 2.0, 0.1, 0.2};

    TrainerState a = initial_state(base), b = initial_state(inj);
    bool diverged = false;
    for (int step = 0; step < 40 && !diverged; ++step) {
        RolloutBatch ba, bb;
        train_step(a, base, &ba);
        train_step(b, inj, &bb);
        bool any_low = false;
        for (const auto& r : bb.records) any_low = any_low || r.p_train_old < 0.1;
        if (!any_low) {
            ASSERT_EQ(a.params.logits, b.params.logits) << "step " << step;
        } else {
            diverged = a.params.logits != b.params.logits;
        }
    }
    EXPECT_TRUE(diverged);
}

TEST(Metrics, CsvRowFormat) {
    std::ostringstream os;
    StepMetrics m;
    m.step = 3;
    m.reward_mean = 0.5;
    write_metrics_row(os, m);
    EXPECT_EQ(os.str(), "3,0,0.5,0,0,0,1,1,0,0,0\n");
    EXPECT_EQ(std::string(kMetricsCsvHeader).substr(0, 17), "step,inner_update");
}
