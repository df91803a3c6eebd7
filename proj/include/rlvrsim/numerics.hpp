// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rlvrsim/errors.hpp"

namespace rlvrsim {

/// Precision of a softmax evaluation.
///   Full: binary64 throughout (the training engine).
///   Bf16: logits and output probabilities rounded to bfloat16, exp/sum in binary32
///         (the inference engine).
enum class PrecisionMode { Full, Bf16 };

inline std::string_view to_string(PrecisionMode mode) {
    return mode == PrecisionMode::Full ? "full" : "bf16";
}

inline PrecisionMode parse_precision(std::string_view text) {
    if (text == "full") return PrecisionMode::Full;
    if (text == "bf16") return PrecisionMode::Bf16;
    throw DomainError("unknown precision mode '" + std::string(text) + "' (expected full|bf16)");
}

// ---------------------------------------------------------------------------
// bfloat16 emulation
// ---------------------------------------------------------------------------

/// Rounds the binary32 image of `x` to bfloat16 (round-to-nearest-even) and widens back.
/// NaN propagates; overflow past the largest bfloat16 rounds to infinity.
inline double quantize_bf16(double x) {
    if (std::isnan(x)) return x;
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(x));
    const std::uint32_t lsb = (bits >> 16) & 1u;
    const std::uint32_t rounded = (bits + 0x7FFFu + lsb) & 0xFFFF0000u;
    return static_cast<double>(std::bit_cast<float>(rounded));
}

inline float quantize_bf16f(float x) { return static_cast<float>(quantize_bf16(x)); }

/// Upper 16 bits of the binary32 pattern; valid only for bfloat16-representable inputs.
inline std::uint16_t bf16_bits(double representable) {
    return static_cast<std::uint16_t>(std::bit_cast<std::uint32_t>(static_cast<float>(representable)) >> 16);
}

// ---------------------------------------------------------------------------
// ProbVector
// ---------------------------------------------------------------------------

inline constexpr double kFullSumTolerance = 1e-12;
inline constexpr double kBf16SumTolerance = 1e-2;

/// A categorical distribution tagged with the precision that produced it. Bf16 vectors are
/// only approximately normalized (quantization), see `kBf16SumTolerance`.
class ProbVector {
public:
    ProbVector() = default;

    ProbVector(std::vector<double> probs, PrecisionMode mode) : probs_(std::move(probs)), mode_(mode) {
        if (probs_.empty()) throw DomainError("ProbVector: empty");
        double sum = 0.0;
        for (double p : probs_) {
            if (!(p >= 0.0) || !std::isfinite(p)) throw DomainError("ProbVector: entry not a probability");
            sum += p;
        }
        const double tol = mode_ == PrecisionMode::Full ? kFullSumTolerance : kBf16SumTolerance;
        if (std::abs(sum - 1.0) > tol) {
            throw DomainError("ProbVector: mass " + std::to_string(sum) + " outside tolerance");
        }
    }

    std::size_t size() const noexcept { return probs_.size(); }
    double operator[](std::size_t i) const { return probs_[i]; }
    std::span<const double> values() const noexcept { return probs_; }
    PrecisionMode mode() const noexcept { return mode_; }

    double total() const { return std::accumulate(probs_.begin(), probs_.end(), 0.0); }

    /// Rescaled to unit mass; this is the distribution an engine actually samples from.
    ProbVector normalized() const {
        const double s = total();
        std::vector<double> out(probs_);
        for (double& p : out) p /= s;
        return ProbVector(std::move(out), PrecisionMode::Full);
    }

private:
    std::vector<double> probs_;
    PrecisionMode mode_ = PrecisionMode::Full;
};

/// Softmax into a caller-provided buffer (no allocation for Full mode; `scratch` is reused by
/// the Bf16 path). Bf16: logits rounded to bfloat16, exp/sum/divide in binary32, result rounded
/// to bfloat16.
inline void softmax_into(std::span<const double> logits, PrecisionMode mode, std::span<double> out,
                         std::vector<float>& scratch) {
    if (logits.empty()) throw DomainError("softmax: empty logits");
    if (out.size() != logits.size()) throw DomainError("softmax: output size mismatch");
    if (mode == PrecisionMode::Full) {
        const double mx = *std::max_element(logits.begin(), logits.end());
        double sum = 0.0;
        for (std::size_t i = 0; i < logits.size(); ++i) {
            out[i] = std::exp(logits[i] - mx);
            sum += out[i];
        }
        for (double& p : out) p /= sum;
        return;
    }
    scratch.resize(logits.size());
    float mx = -std::numeric_limits<float>::infinity();
    for (std::size_t i = 0; i < logits.size(); ++i) {
        scratch[i] = quantize_bf16f(static_cast<float>(logits[i]));
        mx = std::max(mx, scratch[i]);
    }
    float sum = 0.0f;
    for (float& z : scratch) {
        z = std::exp(z - mx);
        sum += z;
    }
    for (std::size_t i = 0; i < logits.size(); ++i) out[i] = quantize_bf16(scratch[i] / sum);
}

/// Softmax of `logits` in the given precision.
inline ProbVector softmax(std::span<const double> logits, PrecisionMode mode) {
    if (logits.empty()) throw DomainError("softmax: empty logits");
    std::vector<double> out(logits.size());
    std::vector<float> scratch;
    softmax_into(logits, mode, out, scratch);
    return ProbVector(std::move(out), mode);
}

inline ProbVector softmax(const std::vector<double>& logits, PrecisionMode mode) {
    return softmax(std::span<const double>(logits), mode);
}

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

inline double mean(std::span<const double> xs) {
    if (xs.empty()) throw DomainError("mean: empty series");
    return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

/// Population (1/N) standard deviation.
inline double population_stddev(std::span<const double> xs) {
    const double m = mean(xs);
    double ss = 0.0;
    for (double x : xs) ss += (x - m) * (x - m);
    return std::sqrt(ss / static_cast<double>(xs.size()));
}

/// Standard error of the mean using the unbiased sample variance.
inline double standard_error(std::span<const double> xs) {
    if (xs.size() < 2) throw DomainError("standard_error: need at least two samples");
    const double m = mean(xs);
    double ss = 0.0;
    for (double x : xs) ss += (x - m) * (x - m);
    const double n = static_cast<double>(xs.size());
    return std::sqrt(ss / (n - 1.0) / n);
}

/// Kullback-Leibler divergence sum_i p_i ln(p_i / q_i), with 0 ln 0 = 0.
inline double kl_divergence(const ProbVector& p, const ProbVector& q) {
    if (p.size() != q.size()) throw DomainError("kl_divergence: length mismatch");
    double kl = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] == 0.0) continue;
        if (q[i] == 0.0) throw DomainError("kl_divergence: p not absolutely continuous w.r.t. q");
        kl += p[i] * std::log(p[i] / q[i]);
    }
    return kl;
}

/// Product-moment correlation. Throws if either series is constant.
inline double pearson_cc(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw DomainError("pearson_cc: length mismatch");
    if (x.size() < 2) throw DomainError("pearson_cc: need at least two points");
    const double mx = mean(x);
    const double my = mean(y);
    double sxx = 0.0, syy = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = x[i] - mx;
        const double dy = y[i] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if (sxx == 0.0 || syy == 0.0) throw DomainError("pearson_cc: correlation undefined for a constant series");
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

/// Shannon entropy in nats.
inline double entropy(const ProbVector& p) {
    double h = 0.0;
    for (double v : p.values()) {
        if (v > 0.0) h -= v * std::log(v);
    }
    return h;
}

/// Least-squares slope of ys against 0..n-1.
inline double trend_slope(std::span<const double> ys) {
    if (ys.size() < 2) throw DomainError("trend_slope: need at least two points");
    const double n = static_cast<double>(ys.size());
    const double mx = (n - 1.0) / 2.0;
    const double my = mean(ys);
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t i = 0; i < ys.size(); ++i) {
        const double dx = static_cast<double>(i) - mx;
        sxy += dx * (ys[i] - my);
        sxx += dx * dx;
    }
    return sxy / sxx;
}

// ---------------------------------------------------------------------------
// Matrix
// ---------------------------------------------------------------------------

/// Dense row-major matrix of binary64.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    bool same_shape(const Matrix& o) const noexcept { return rows == o.rows && cols == o.cols; }

    double frobenius_norm() const {
        double s = 0.0;
        for (double v : data) s += v * v;
        return std::sqrt(s);
    }

    bool all_finite() const {
        return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
    }

    Matrix& operator+=(const Matrix& o) {
        if (!same_shape(o)) throw DomainError("Matrix: shape mismatch");
        for (std::size_t i = 0; i < data.size(); ++i) data[i] += o.data[i];
        return *this;
    }

    friend bool operator==(const Matrix&, const Matrix&) = default;
};

}  // namespace rlvrsim
