// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>
#include <vector>

#include "rlvrsim/studies.hpp"

using namespace rlvrsim;

TEST(HistogramKl, IdenticalAndHandValue) {
    std::map<std::uint16_t, std::size_t> a{{1, 5}, {2, 3}};
    EXPECT_EQ(detail::histogram_kl(a, a), 0.0);
    // cells {1, 2}; a -> (0.75, 0.25), b -> (0.25, 0.75)
    std::map<std::uint16_t, std::size_t> x{{1, 1}}, y{{2, 1}};
    EXPECT_NEAR(detail::histogram_kl(x, y), 0.5 * std::log(3.0), 1e-15);
}

TEST(Bf16Study, FullEngineIsIdentityControl) {
    Bf16StudyConfig c;
    c.vocab_size = 64;
    c.num_tokens = 2000;
    c.seeds = {1};
    c.infer_mode = PrecisionMode::Full;
    const auto rep = bf16_discretization_study(c);
    ASSERT_EQ(rep.seeds.size(), 1u);
    EXPECT_EQ(rep.seeds[0].mean, 1.0);
    EXPECT_EQ(rep.seeds[0].std, 0.0);
    EXPECT_EQ(rep.seeds[0].kl_sampled, 0.0);
    EXPECT_LE(std::abs(rep.seeds[0].kl_full), 1e-12);
}

TEST(Bf16Study, SmallBf16RunShowsDiscretization) {
    Bf16StudyConfig c;
    c.vocab_size = 256;
    c.num_tokens = 5000;
    c.seeds = {3, 4};
    const auto rep = bf16_discretization_study(c);
    EXPECT_EQ(rep.seeds.size(), 2u);
    EXPECT_EQ(rep.level_counts.size(), 2u);
    for (const auto& r : rep.seeds) {
        EXPECT_NEAR(r.mean, 1.0, 0.01);
        EXPECT_GT(r.std, 0.0);
        EXPECT_GT(r.max, 1.0);
        EXPECT_LT(r.min, 1.0);
        EXPECT_LT(r.distinct_engine, r.distinct_full);
        EXPECT_GE(r.kl_full, 0.0);
    }
    EXPECT_EQ(rep.average.label, "average");
    EXPECT_NEAR(rep.average.mean, 0.5 * (rep.seeds[0].mean + rep.seeds[1].mean), 1e-15);
    EXPECT_EQ(bf16_discretization_study(c).seeds[0].mean, rep.seeds[0].mean);

    std::ostringstream os;
    write_bf16_study_csv(os, rep);
    EXPECT_EQ(os.str().substr(0, os.str().find('\n')), "seed,mean,std,max,min,kl_sampled,kl_full,distinct_engine,distinct_full");
}

TEST(Bf16Study, ValidatesConfig) {
    Bf16StudyConfig c;
    c.seeds.clear();
    EXPECT_THROW(bf16_discretization_study(c), ConfigError);
    c = {};
    c.vocab_size = 1;
    EXPECT_THROW(bf16_discretization_study(c), ConfigError);
}

TEST(Survival, HandValueAndEquality) {
    const std::vector<double> p{0.9, 0.1}, q{0.5, 0.5};
    EXPECT_NEAR(survival_expectation(p, q), 1.64, 1e-15);
    EXPECT_NEAR(survival_expectation(q, q), 1.0, 1e-15);
    const std::vector<double> zero{1.0, 0.0};
    EXPECT_EQ(survival_expectation(q, zero), std::numeric_limits<double>::infinity());
    EXPECT_THROW(survival_expectation(p, std::vector<double>{1.0}), DomainError);
}

TEST(Survival, StudyHasNoViolations) {
    Rng rng = substream(5);
    const auto rep = survival_bias_study(2000, 16, rng);
    EXPECT_EQ(rep.values.size(), 2000u);
    EXPECT_EQ(rep.violations, 0u);
    EXPECT_GE(rep.min_value, 1.0);
    EXPECT_LE(std::abs(rep.equality_value - 1.0), 1e-15);
    Rng bad = substream(1);
    EXPECT_THROW(survival_bias_study(10, 1, bad), DomainError);
}

TEST(Identity, FullModeIsExactlyOne) {
    Rng rng = substream(6);
    const auto rep = identity_check_rho(5000, rng, PrecisionMode::Full);
    EXPECT_EQ(rep.mc_mean, 1.0);
    EXPECT_NEAR(rep.exact, 1.0, 1e-12);
}

TEST(Identity, Bf16AgreesWithInferenceMass) {
    Rng rng = substream(7);
    const auto rep = identity_check_rho(200000, rng);
    EXPECT_NEAR(rep.exact, rep.infer_mass, 1e-12);
    EXPECT_LE(std::abs(rep.z_score), 5.0);
    // the same ratio under inference sampling picks up the survival bias
    EXPECT_GE(rep.survival_mc_mean + 5.0 * rep.survival_mc_se, rep.mc_mean);
    Rng bad = substream(1);
    EXPECT_THROW(identity_check_rho(10, bad), DomainError);
}

TEST(Cov, SingleTokenInstancesAreExact) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        CovInstance inst;
        inst.vocab = 4;
        inst.max_len = 1;
        inst.group_size = 3;
        inst.seed = seed;
        const auto rep = cov_identity_check(inst);
        EXPECT_EQ(rep.num_sequences, 4u);
        EXPECT_LE(rep.residual, 1e-12) << "seed " << seed;
        EXPECT_TRUE(std::isfinite(rep.delta_exact));
    }
}

TEST(Cov, SameEngineHasNoShift) {
    CovInstance inst;
    inst.vocab = 3;
    inst.max_len = 3;
    inst.infer_mode = PrecisionMode::Full;
    const auto rep = cov_identity_check(inst);
    EXPECT_LE(std::abs(rep.delta_exact), 1e-15);
    EXPECT_LE(std::abs(rep.delta_cov), 1e-15);
}

TEST(Cov, EnumerationCountsAndProbabilityMass) {
    // V=3, max_len 2: sequences ending in EOS at step 1 (1) plus two-token sequences (2*3) = 7
    CovInstance inst;
    inst.vocab = 3;
    inst.max_len = 2;
    std::vector<detail::EnumSeq> seqs;
    Rng rng = substream(inst.seed);
    const PolicyParams old = PolicyParams::random(3, inst.logit_std, rng);
    detail::enumerate_sequences(old, old, inst, {}, seqs);
    EXPECT_EQ(seqs.size(), 7u);
    double mass = 0.0;
    for (const auto& s : seqs) mass += s.p_train;
    EXPECT_NEAR(mass, 1.0, 1e-14);
    EXPECT_EQ(cov_identity_check(inst).num_sequences, 7u);
}

TEST(Cov, GroupCoupledRunsAndIsReproducible) {
    CovInstance inst;
    inst.vocab = 3;
    inst.max_len = 2;
    inst.group_size = 2;
    inst.advantages = AdvantageMode::GroupNormalized;
    const auto a = cov_identity_check(inst);
    const auto b = cov_identity_check(inst);
    EXPECT_TRUE(std::isfinite(a.residual));
    EXPECT_EQ(a.residual, b.residual);
    EXPECT_EQ(a.num_groups, 49u);
}

TEST(Cov, RejectsLargeInstances) {
    CovInstance inst;
    inst.vocab = 5;
    EXPECT_THROW(cov_identity_check(inst), DomainError);
    inst.vocab = 3;
    inst.group_size = 4;
    EXPECT_THROW(cov_identity_check(inst), DomainError);
}

TEST(Variance, GaussianUnbiasedInjectionBiased) {
    const auto rep = variance_unbiasedness_study(VarianceStudyConfig{});
    EXPECT_EQ(rep.variance_samples.size(), 200u);
    EXPECT_TRUE(rep.variance_unbiased);
    EXPECT_TRUE(rep.injection_biased);
    EXPECT_GT(rep.injection_mean, 0.0);
}

TEST(Variance, ZeroSigmaGivesExactlyZero) {
    VarianceStudyConfig c;
    c.sigma = 0.0;
    c.batches = 40;
    for (double v : variance_unbiasedness_study(c).variance_samples) EXPECT_EQ(v, 0.0);
}

TEST(Variance, ConstructedPolicyHasLowProbabilityTarget) {
    const auto p = constructed_low_prob_policy();
    const auto d = token_dist(p, kBos, PrecisionMode::Full);
    EXPECT_LT(d[0], 0.1);
    EXPECT_NEAR(d[0], std::exp(-1.0) / (std::exp(-1.0) + 7.0 * std::exp(1.0)), 1e-15);
}
