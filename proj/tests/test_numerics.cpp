// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <set>
#include <vector>

#include "rlvrsim/numerics.hpp"
#include "rlvrsim/random.hpp"

using namespace rlvrsim;

namespace {

// Reference rounding by enumeration: the two bfloat16 neighbours of the binary32 image are
// the truncation and the next pattern up; pick the closer, ties to the even pattern.
double oracle_bf16(double x) {
    const float f = static_cast<float>(x);
    const std::uint32_t bits = std::bit_cast<std::uint32_t>(f);
    const std::uint32_t lo_bits = bits & 0xFFFF0000u;
    const std::uint32_t hi_bits = lo_bits + 0x10000u;
    const double lo = std::bit_cast<float>(lo_bits);
    const double hi = std::bit_cast<float>(hi_bits);
    const double df = static_cast<double>(f);
    const double d_lo = std::abs(df - lo);
    const double d_hi = std::abs(hi - df);
    if (d_lo < d_hi) return lo;
    if (d_hi < d_lo) return hi;
    return ((lo_bits >> 16) & 1u) == 0 ? lo : hi;
}

}  // namespace

TEST(QuantizeBf16, ExactValuesAreFixed) {
    EXPECT_EQ(quantize_bf16(1.0), 1.0);
    EXPECT_EQ(quantize_bf16(0.0), 0.0);
    EXPECT_EQ(quantize_bf16(-2.5), -2.5);
    EXPECT_EQ(quantize_bf16(std::numeric_limits<double>::infinity()), std::numeric_limits<double>::infinity());
}

TEST(QuantizeBf16, TiesRoundToEven) {
    // 1 + 2^-8 sits halfway between 1 and 1 + 2^-7; the even neighbour is 1
    EXPECT_EQ(oracle_bf16(1.00390625), 1.0);
    EXPECT_EQ(quantize_bf16(1.00390625), 1.0);
    // 1 + 3 * 2^-8 sits between 1 + 2^-7 (odd) and 1 + 2^-6 (even)
    EXPECT_EQ(oracle_bf16(1.01171875), 1.015625);
    EXPECT_EQ(quantize_bf16(1.01171875), 1.015625);
    // the input is rounded to binary32 first: 1 + 2^-8 + 2^-22 is the next float above the tie
    EXPECT_EQ(quantize_bf16(1.00390625 + 0x1p-22), 1.0078125);
    EXPECT_EQ(quantize_bf16(1.00390625 + 0x1p-26), 1.0);
}

TEST(QuantizeBf16, MatchesEnumerationOracle) {
    Rng rng = substream(42);
    std::uniform_int_distribution<std::uint32_t> bits_dist;
    int checked = 0;
    while (checked < 200000) {
        const float f = std::bit_cast<float>(bits_dist(rng));
        if (!std::isfinite(f) || std::abs(f) > 3.0e38f) continue;
        ASSERT_EQ(quantize_bf16(f), oracle_bf16(f)) << "bits " << std::bit_cast<std::uint32_t>(f);
        ++checked;
    }
}

TEST(QuantizeBf16, IdempotentAndMonotone) {
    Rng rng = substream(7);
    std::normal_distribution<double> nd(0.0, 10.0);
    std::vector<double> xs(20000);
    for (double& x : xs) x = nd(rng);
    std::sort(xs.begin(), xs.end());
    double prev = -std::numeric_limits<double>::infinity();
    for (double x : xs) {
        const double q = quantize_bf16(x);
        EXPECT_EQ(quantize_bf16(q), q);
        EXPECT_GE(q, prev);
        prev = q;
    }
}

TEST(QuantizeBf16, NanPropagates) { EXPECT_TRUE(std::isnan(quantize_bf16(std::nan("")))); }

TEST(Softmax, SymmetricPair) {
    const auto p = softmax(std::vector<double>{0.0, 0.0}, PrecisionMode::Full);
    EXPECT_EQ(p[0], 0.5);
    EXPECT_EQ(p[1], 0.5);
}

TEST(Softmax, LargeLogitsDoNotOverflow) {
    const auto p = softmax(std::vector<double>{1000.0, 0.0}, PrecisionMode::Full);
    EXPECT_EQ(p[0], 1.0);
    EXPECT_LT(p[1], 1e-300);
    const auto q = softmax(std::vector<double>{1000.0, 0.0}, PrecisionMode::Bf16);
    EXPECT_EQ(q[0], 1.0);
}

TEST(Softmax, HandValueV4) {
    const auto p = softmax(std::vector<double>{2.0, 0.0, 0.0, 0.0}, PrecisionMode::Full);
    const double e2 = std::exp(2.0);
    EXPECT_NEAR(p[0], e2 / (e2 + 3.0), 1e-15);
    EXPECT_NEAR(p[0], 0.7112, 1e-4);
    for (int i = 1; i < 4; ++i) EXPECT_NEAR(p[i], 0.0963, 1e-4);
}

TEST(Softmax, EmptyIsDomainError) {
    EXPECT_THROW(softmax(std::vector<double>{}, PrecisionMode::Full), DomainError);
    EXPECT_THROW(softmax(std::vector<double>{}, PrecisionMode::Bf16), DomainError);
}

TEST(Softmax, FullSumsToOneAndIsShiftInvariant) {
    Rng rng = substream(3);
    std::normal_distribution<double> nd(0.0, 3.0);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> z(1 + trial % 64);
        for (double& v : z) v = nd(rng);
        const auto p = softmax(z, PrecisionMode::Full);
        EXPECT_NEAR(p.total(), 1.0, 1e-12);
        std::vector<double> shifted(z);
        for (double& v : shifted) v += 17.25;
        const auto q = softmax(shifted, PrecisionMode::Full);
        for (std::size_t i = 0; i < z.size(); ++i) EXPECT_NEAR(p[i], q[i], 1e-12);
    }
}

TEST(Softmax, Bf16OutputsAreRepresentableAndNearlyNormalized) {
    Rng rng = substream(4);
    std::normal_distribution<double> nd(0.0, 1.5);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> z(2048);
        for (double& v : z) v = nd(rng);
        const auto p = softmax(z, PrecisionMode::Bf16);
        EXPECT_LE(std::abs(p.total() - 1.0), kBf16SumTolerance);
        for (double v : p.values()) ASSERT_EQ(quantize_bf16(v), v);
    }
}

TEST(Softmax, Bf16ConcentratesOnFewerLevels) {
    Rng rng = substream(5);
    std::normal_distribution<double> nd(0.0, 1.5);
    std::vector<double> z(2048);
    for (double& v : z) v = nd(rng);
    const auto full = softmax(z, PrecisionMode::Full);
    const auto bf = softmax(z, PrecisionMode::Bf16);
    const std::set<double> lf(full.values().begin(), full.values().end());
    const std::set<double> lb(bf.values().begin(), bf.values().end());
    EXPECT_LT(lb.size(), lf.size() / 2);
}

TEST(ProbVector, Validation) {
    EXPECT_THROW(ProbVector({}, PrecisionMode::Full), DomainError);
    EXPECT_THROW(ProbVector({0.5, 0.6}, PrecisionMode::Full), DomainError);
    EXPECT_THROW(ProbVector({-0.1, 1.1}, PrecisionMode::Full), DomainError);
    EXPECT_NO_THROW(ProbVector({0.5, 0.505}, PrecisionMode::Bf16));
    EXPECT_THROW(ProbVector({0.5, 0.52}, PrecisionMode::Bf16), DomainError);
}

TEST(KlDivergence, HandValues) {
    const ProbVector p({0.3, 0.7}, PrecisionMode::Full);
    EXPECT_EQ(kl_divergence(p, p), 0.0);
    EXPECT_NEAR(kl_divergence(ProbVector({1.0, 0.0}, PrecisionMode::Full), ProbVector({0.5, 0.5}, PrecisionMode::Full)),
                std::log(2.0), 1e-15);
}

TEST(KlDivergence, Errors) {
    const ProbVector two({0.5, 0.5}, PrecisionMode::Full);
    const ProbVector three({0.2, 0.3, 0.5}, PrecisionMode::Full);
    EXPECT_THROW(kl_divergence(two, three), DomainError);
    EXPECT_THROW(kl_divergence(two, ProbVector({1.0, 0.0}, PrecisionMode::Full)), DomainError);
}

TEST(KlDivergence, NonNegativeOnRandomPairs) {
    Rng rng = substream(9);
    for (int trial = 0; trial < 500; ++trial) {
        std::vector<double> a(8), b(8);
        double sa = 0, sb = 0;
        for (int i = 0; i < 8; ++i) {
            sa += a[i] = 1.0 - uniform01(rng);
            sb += b[i] = 1.0 - uniform01(rng);
        }
        for (int i = 0; i < 8; ++i) {
            a[i] /= sa;
            b[i] /= sb;
        }
        const ProbVector p(a, PrecisionMode::Full), q(b, PrecisionMode::Full);
        EXPECT_GT(kl_divergence(p, q), 0.0);
        EXPECT_LE(std::abs(kl_divergence(p, p)), 1e-12);
    }
}

TEST(PearsonCc, HandValues) {
    const std::vector<double> x{1, 2, 3}, y{1, 2, 4}, neg{-1, -2, -3};
    EXPECT_NEAR(pearson_cc(x, x), 1.0, 1e-15);
    EXPECT_NEAR(pearson_cc(x, neg), -1.0, 1e-15);
    // cov = 1.5, var_x = 1, var_y = 7/3 (sums of squares 2 and 14/3)
    EXPECT_NEAR(pearson_cc(x, y), 3.0 / std::sqrt(2.0 * 14.0 / 3.0), 1e-15);
    EXPECT_NEAR(pearson_cc(x, y), 0.98198, 1e-5);
}

TEST(PearsonCc, Errors) {
    const std::vector<double> c{2, 2, 2}, x{1, 2, 3};
    EXPECT_THROW(pearson_cc(c, c), DomainError);
    EXPECT_THROW(pearson_cc(std::vector<double>{1}, std::vector<double>{1}), DomainError);
    EXPECT_THROW(pearson_cc(x, std::vector<double>{1, 2}), DomainError);
}

TEST(Entropy, HandValues) {
    EXPECT_EQ(entropy(ProbVector({1.0, 0.0, 0.0}, PrecisionMode::Full)), 0.0);
    EXPECT_NEAR(entropy(ProbVector({0.25, 0.25, 0.25, 0.25}, PrecisionMode::Full)), std::log(4.0), 1e-15);
    EXPECT_NEAR(entropy(ProbVector({0.5, 0.25, 0.25}, PrecisionMode::Full)), 1.5 * std::log(2.0), 1e-15);
    EXPECT_NEAR(entropy(ProbVector({0.5, 0.25, 0.25}, PrecisionMode::Full)), 1.0397, 1e-4);
}

TEST(Entropy, UniformIsMaximal) {
    Rng rng = substream(10);
    for (std::size_t n : {2u, 3u, 7u, 16u}) {
        const double h_uniform = std::log(static_cast<double>(n));
        for (int trial = 0; trial < 100; ++trial) {
            std::vector<double> p(n);
            double s = 0;
            for (double& v : p) s += v = 1.0 - uniform01(rng);
            for (double& v : p) v /= s;
            EXPECT_LE(entropy(ProbVector(p, PrecisionMode::Full)), h_uniform + 1e-12);
        }
    }
}

TEST(Statistics, MeanStdSe) {
    const std::vector<double> xs{0.9, 1.1};
    EXPECT_DOUBLE_EQ(mean(xs), 1.0);
    EXPECT_NEAR(population_stddev(xs), 0.1, 1e-15);
    EXPECT_NEAR(standard_error(xs), 0.1, 1e-15);  // sample sd 0.1414 / sqrt(2)
    EXPECT_THROW(mean(std::vector<double>{}), DomainError);
    EXPECT_THROW(standard_error(std::vector<double>{1.0}), DomainError);
}

TEST(Statistics, TrendSlope) {
    EXPECT_NEAR(trend_slope(std::vector<double>{1, 3, 5, 7}), 2.0, 1e-15);
    EXPECT_NEAR(trend_slope(std::vector<double>{4, 4, 4}), 0.0, 1e-15);
}

TEST(Precision, ParseRoundTrip) {
    EXPECT_EQ(parse_precision(to_string(PrecisionMode::Full)), PrecisionMode::Full);
    EXPECT_EQ(parse_precision(to_string(PrecisionMode::Bf16)), PrecisionMode::Bf16);
    EXPECT_THROW(parse_precision("fp8"), DomainError);
}
