// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "rlvrsim/errors.hpp"
#include "rlvrsim/numerics.hpp"
#include "rlvrsim/random.hpp"

namespace rlvrsim {

/// Context of the first token of a response.
inline constexpr int kBos = -1;

/// Bigram softmax policy. Row 0 holds begin-of-sequence logits, row k+1 the logits after
/// token k. The last vocabulary entry is the end-of-sequence token.
struct PolicyParams {
    std::size_t vocab = 0;
    Matrix logits;
    std::uint64_t version = 0;

    PolicyParams() = default;
    explicit PolicyParams(std::size_t v) : vocab(v), logits(v + 1, v, 0.0) {
        if (v < 2) throw DomainError("PolicyParams: vocabulary must hold at least two tokens");
    }

    /// Logits drawn i.i.d. from N(0, stddev^2).
    static PolicyParams random(std::size_t v, double stddev, Rng& rng) {
        PolicyParams p(v);
        std::normal_distribution<double> normal(0.0, stddev);
        for (double& x : p.logits.data) x = normal(rng);
        return p;
    }

    int eos_token() const noexcept { return static_cast<int>(vocab) - 1; }

    std::size_t row_of(int prev) const {
        if (prev < kBos || prev >= static_cast<int>(vocab)) {
            throw DomainError("context token " + std::to_string(prev) + " out of range");
        }
        return static_cast<std::size_t>(prev + 1);
    }

    bool all_finite() const { return logits.all_finite(); }
};

struct Sequence {
    int prompt_id = 0;
    std::vector<int> tokens;
    bool terminated = false;  // ended on the end-of-sequence token

    std::size_t size() const noexcept { return tokens.size(); }
    int prev_of(std::size_t pos) const { return pos == 0 ? kBos : tokens[pos - 1]; }
};

inline ProbVector token_dist(const PolicyParams& params, int prev, PrecisionMode mode) {
    return softmax(params.logits.row(params.row_of(prev)), mode);
}

/// Draws an index proportionally to `weights` (need not sum to one).
inline int sample_index(std::span<const double> weights, Rng& rng) {
    double total = 0.0;
    for (double w : weights) total += w;
    const double u = uniform01(rng) * total;
    double acc = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        acc += weights[i];
        if (u < acc) return static_cast<int>(i);
    }
    // u landed on the rounding slack at the top; return the last positive entry
    for (std::size_t i = weights.size(); i-- > 0;) {
        if (weights[i] > 0.0) return static_cast<int>(i);
    }
    throw DomainError("sample_index: all weights are zero");
}

/// Ancestral sampling until the end token or `max_len` tokens.
inline Sequence sample_sequence(const PolicyParams& params, PrecisionMode mode, Rng& rng, std::size_t max_len,
                                int prompt_id = 0) {
    if (max_len < 1) throw DomainError("sample_sequence: max_len must be >= 1");
    Sequence seq;
    seq.prompt_id = prompt_id;
    int prev = kBos;
    while (seq.tokens.size() < max_len) {
        const int tok = sample_index(token_dist(params, prev, mode).values(), rng);
        seq.tokens.push_back(tok);
        if (tok == params.eos_token()) {
            seq.terminated = true;
            break;
        }
        prev = tok;
    }
    return seq;
}

/// Per-position log-probabilities. A zero Bf16 probability yields -inf for that entry.
inline std::vector<double> log_prob_sequence(const PolicyParams& params, const Sequence& seq, PrecisionMode mode) {
    std::vector<double> out;
    out.reserve(seq.size());
    for (std::size_t t = 0; t < seq.size(); ++t) {
        const int tok = seq.tokens[t];
        if (tok < 0 || tok >= static_cast<int>(params.vocab)) throw DomainError("log_prob_sequence: token out of range");
        const double p = token_dist(params, seq.prev_of(t), mode)[static_cast<std::size_t>(tok)];
        out.push_back(p > 0.0 ? std::log(p) : -std::numeric_limits<double>::infinity());
    }
    return out;
}

/// Adds `scale * d/dlogits log pi(tok | prev)` into `grad`.
inline void accumulate_token_grad(const PolicyParams& params, int prev, int tok, double scale, Matrix& grad) {
    const std::size_t r = params.row_of(prev);
    const ProbVector p = token_dist(params, prev, PrecisionMode::Full);
    auto row = grad.row(r);
    for (std::size_t j = 0; j < params.vocab; ++j) row[j] -= scale * p[j];
    row[static_cast<std::size_t>(tok)] += scale;
}

/// Gradient of the full-precision sequence log-likelihood with respect to the logit table.
inline Matrix grad_log_prob(const PolicyParams& params, const Sequence& seq) {
    Matrix g(params.logits.rows, params.logits.cols, 0.0);
    for (std::size_t t = 0; t < seq.size(); ++t) accumulate_token_grad(params, seq.prev_of(t), seq.tokens[t], 1.0, g);
    return g;
}

// ---------------------------------------------------------------------------
// Snapshots
//
// Little-endian layout:
//   offset 0   char[8]  magic "RLVRSNP1"
//   offset 8   uint64   vocabulary size V
//   offset 16  uint64   version (number of parameter updates applied)
//   offset 24  float64  logits[(V+1) * V], row-major, row 0 = begin-of-sequence
//   trailer    uint64   FNV-1a 64 checksum over every preceding byte
// ---------------------------------------------------------------------------

namespace detail {

inline constexpr std::array<char, 8> kSnapshotMagic{'R', 'L', 'V', 'R', 'S', 'N', 'P', '1'};

inline std::uint64_t fnv1a(const std::string& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_u64(const std::string& in, std::size_t off) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[off + i])) << (8 * i);
    return v;
}

}  // namespace detail

inline std::string encode_snapshot(const PolicyParams& params) {
    std::string out(detail::kSnapshotMagic.begin(), detail::kSnapshotMagic.end());
    detail::put_u64(out, params.vocab);
    detail::put_u64(out, params.version);
    for (double v : params.logits.data) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
    detail::put_u64(out, detail::fnv1a(out));
    return out;
}

inline PolicyParams decode_snapshot(const std::string& bytes) {
    constexpr std::size_t header = 24;
    if (bytes.size() < header + 8 || !std::equal(detail::kSnapshotMagic.begin(), detail::kSnapshotMagic.end(), bytes.begin())) {
        throw IntegrityError("snapshot: bad magic or truncated header");
    }
    const std::uint64_t v = detail::get_u64(bytes, 8);
    if (v < 2 || v > (1u << 16)) throw IntegrityError("snapshot: implausible vocabulary size");
    const std::size_t expected = header + 8 * (v + 1) * v + 8;
    if (bytes.size() != expected) throw IntegrityError("snapshot: size does not match header");
    const std::uint64_t stored = detail::get_u64(bytes, expected - 8);
    if (stored != detail::fnv1a(bytes.substr(0, expected - 8))) throw IntegrityError("snapshot: checksum mismatch");

    PolicyParams p(static_cast<std::size_t>(v));
    p.version = detail::get_u64(bytes, 16);
    for (std::size_t i = 0; i < p.logits.data.size(); ++i) {
        p.logits.data[i] = std::bit_cast<double>(detail::get_u64(bytes, header + 8 * i));
    }
    if (!p.all_finite()) throw IntegrityError("snapshot: non-finite logits");
    return p;
}

inline void save_snapshot(const PolicyParams& params, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open snapshot for writing: " + path.string());
    const std::string bytes = encode_snapshot(params);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw IoError("failed writing snapshot: " + path.string());
}

inline PolicyParams load_snapshot(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open snapshot: " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    try {
        return decode_snapshot(bytes);
    } catch (const IntegrityError& e) {
        throw IntegrityError(path.string() + ": " + e.what());
    }
}

}  // namespace rlvrsim
