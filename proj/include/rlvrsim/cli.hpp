// SPDX-License-Identifier: Apache-2.0
//
// Command dispatch for the rlvrsim tool. Every command writes into its own run directory
// and finishes with a manifest of file hashes.

#pragma once

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "rlvrsim/config.hpp"
#include "rlvrsim/errors.hpp"
#include "rlvrsim/run_io.hpp"
#include "rlvrsim/studies.hpp"
#include "rlvrsim/trainer.hpp"

namespace rlvrsim {

inline constexpr const char* kUsage =
    "usage: rlvrsim <command> [options]\n"
    "\n"
    "commands:\n"
    "  simulate        train the bigram policy (--preset, --config, --seed, --steps, --resume, --tokens)\n"
    "  sweep           one training run per value (--param KEY --values V1,V2,...)\n"
    "  bf16-study      bf16 softmax discretization study\n"
    "  survival-bias   exact check of E_p[p/q] >= 1 on random pairs\n"
    "  identity-check  on-policy identity E_train[pi_infer/pi_train] = sum pi_infer\n"
    "  cov-check       covariance decomposition by exact enumeration\n"
    "  variance-study  zero-mean Gaussian weights vs low-probability injection\n"
    "  report          verify a run directory's manifest and summarise its metrics (--run DIR)\n"
    "\n"
    "common options: --seed N, --out DIR (default $RLVRSIM_OUTPUT_ROOT or ./runs)\n"
    "run `rlvrsim <command> --help` for the options of one command\n";

/// One assertion in a study summary. Informational checks never fail a command.
struct Check {
    std::string name;
    bool pass = false;
    std::string detail;
    bool informational = false;
};

inline void write_summary(std::ostream& os, const std::string& title, const std::vector<Check>& checks) {
    os << "== " << title << " ==\n";
    for (const auto& c : checks) {
        const char* tag = c.informational ? (c.pass ? "PASS/INFO" : "INFO") : (c.pass ? "PASS" : "FAIL");
        os << tag << "  " << c.name << ": " << c.detail << "\n";
    }
}

inline bool all_pass(const std::vector<Check>& checks) {
    return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.pass || c.informational; });
}

namespace detail {

inline std::string fmt(double v, int prec = 6) {
    std::ostringstream ss;
    ss << std::setprecision(prec) << v;
    return ss.str();
}

inline std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream ss(s);
    while (std::getline(ss, cur, sep)) out.push_back(cur);
    return out;
}

inline double elapsed_seconds(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct CommonOptions {
    std::uint64_t seed = 1;
    bool seed_given = false;
    std::string out;
};

/// Writes the summary, the manifest, and reports the outcome on `out`.
inline int finish_study(const fs::path& dir, const std::string& title, const std::vector<Check>& checks,
                        const nlohmann::json& meta, std::ostream& out, std::ostream& err) {
    std::ostringstream summary;
    write_summary(summary, title, checks);
    write_text_file(dir / "summary.txt", summary.str());
    write_manifest(dir, meta);
    out << summary.str() << "run directory: " << dir.string() << "\n";
    if (!all_pass(checks)) {
        for (const auto& c : checks) {
            if (!c.pass && !c.informational) {
                err << "rlvrsim: assertion failed: " << c.name << "\n";
                break;
            }
        }
        return 1;
    }
    return 0;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainingRun {
    ExperimentResult result;
    bool numerical_failure = false;
};

/// Runs one experiment into `dir`: config.json, metrics.csv (written as rows arrive),
/// optional tokens.csv, final.snap. A non-finite objective leaves diagnostic.txt behind.
inline TrainingRun run_training(const TrainerConfig& config, const fs::path& dir, bool token_csv,
                                const std::optional<PolicyParams>& resume, std::ostream& err) {
    write_text_file(dir / "config.json", serialize(config));
    auto metrics = open_output(dir / "metrics.csv");
    metrics << kMetricsCsvHeader << "\n";
    std::ofstream tokens;
    if (token_csv) {
        tokens = open_output(dir / "tokens.csv");
        write_token_csv_header(tokens);
    }
    TrainingRun run;
    try {
        run.result = run_experiment(
            config,
            [&](const StepMetrics& m) {
                write_metrics_row(metrics, m);
                metrics.flush();
            },
            resume,
            token_csv ? BatchSink([&](std::uint64_t step, const RolloutBatch& b) {
                write_token_csv_rows(tokens, b.records, step);
            })
                      : BatchSink{});
    } catch (const NumericalError& e) {
        metrics.close();
        write_text_file(dir / "diagnostic.txt", std::string(e.what()) + "\n" + e.context() + "\n");
        err << "rlvrsim: " << e.what() << " (diagnostic written to " << (dir / "diagnostic.txt").string() << ")\n";
        run.numerical_failure = true;
        return run;
    }
    if (!metrics) throw IoError("failed writing " + (dir / "metrics.csv").string());
    metrics.close();
    save_snapshot(run.result.final_params, dir / "final.snap");
    return run;
}

inline TrainerConfig resolve_training_config(const std::string& preset, const std::string& config_path,
                                             const CommonOptions& common, std::optional<std::size_t> steps) {
    TrainerConfig c = trainer_preset(preset);
    if (!config_path.empty()) c = parse_trainer_config(read_text_file(config_path), c);
    if (common.seed_given) c.seed = common.seed;
    if (steps) c.total_steps = *steps;
    validate(c);
    return c;
}

inline int cmd_simulate(CLI::App& app, std::vector<std::string> args, std::ostream& out, std::ostream& err) {
    std::string preset = "baseline", config_path, resume_path;
    std::optional<std::size_t> steps;
    bool tokens = false;
    CommonOptions common;
    app.add_option("--preset", preset, "training preset");
    app.add_option("--config", config_path, "JSON config applied on top of the preset");
    app.add_option("--steps", steps, "rollout phases to run");
    app.add_option("--resume", resume_path, "continue from a snapshot file");
    app.add_flag("--tokens", tokens, "also write per-token records to tokens.csv");
    auto* seed_opt = app.add_option("--seed", common.seed, "random seed");
    app.add_option("--out", common.out, "output root");
    app.parse(args);
    common.seed_given = seed_opt->count() > 0;

    const TrainerConfig config = resolve_training_config(preset, config_path, common, steps);
    std::optional<PolicyParams> resume;
    if (!resume_path.empty()) resume = load_snapshot(resume_path);

    const fs::path dir = make_run_dir(output_root(common.out), config.seed, "simulate");
    out << serialize(config);
    const TrainingRun run = run_training(config, dir, tokens, resume, err);
    nlohmann::json meta{{"command", "simulate"}, {"preset", preset}, {"seed", config.seed}};
    if (!resume_path.empty()) meta["resumed_from"] = resume_path;
    write_manifest(dir, meta);
    out << "run directory: " << dir.string() << "\n";
    if (run.numerical_failure) return 1;
    if (!run.result.metrics.empty()) {
        const auto& last = run.result.metrics.back();
        out << "final step " << last.step << ": reward_mean " << fmt(last.reward_mean) << ", mismatch "
            << fmt(last.mismatch) << "\n";
    }
    return 0;
}

inline int cmd_sweep(CLI::App& app, std::vector<std::string> args, std::ostream& out, std::ostream& err) {
    std::string preset = "baseline", config_path, param, values_text;
    std::optional<std::size_t> steps;
    CommonOptions common;
    app.add_option("--preset", preset, "base training preset");
    app.add_option("--config", config_path, "JSON config applied on top of the preset");
    app.add_option("--param", param, "key to vary (e.g. eps_high or objective.eps_high)")->required();
    app.add_option("--values", values_text, "comma-separated values")->required();
    app.add_option("--steps", steps, "rollout phases per run");
    auto* seed_opt = app.add_option("--seed", common.seed, "random seed");
    app.add_option("--out", common.out, "output root");
    app.parse(args);
    common.seed_given = seed_opt->count() > 0;

    const TrainerConfig base = resolve_training_config(preset, config_path, common, steps);
    const std::vector<std::string> values = split(values_text, ',');
    if (values.empty()) throw ConfigError("values", "no values given");
    std::vector<TrainerConfig> configs;
    for (const auto& v : values) configs.push_back(with_override(base, param, v));

    const fs::path dir = make_run_dir(output_root(common.out), base.seed, "sweep");
    auto summary = open_output(dir / "sweep.csv");
    summary << "param,value,run,final_reward_mean,mean_mismatch,mean_clip_fraction,mean_j_monitor\n";
    bool failed = false;
    for (std::size_t i = 0; i < values.size(); ++i) {
        const std::string sub = param + "=" + values[i];
        out << "running " << sub << "\n";
        const TrainingRun run = run_training(configs[i], dir / sub, false, std::nullopt, err);
        failed = failed || run.numerical_failure;
        double mm = 0.0, cf = 0.0, jm = 0.0, reward = 0.0;
        const auto& rows = run.result.metrics;
        for (const auto& r : rows) {
            mm += r.mismatch;
            cf += r.clip_fraction;
            jm += r.j_monitor;
        }
        if (!rows.empty()) {
            const double n = static_cast<double>(rows.size());
            mm /= n;
            cf /= n;
            jm /= n;
            reward = rows.back().reward_mean;
        }
        summary << param << ',' << values[i] << ',' << sub << ',' << std::setprecision(17) << reward << ',' << mm
                << ',' << cf << ',' << jm << '\n';
    }
    summary.close();
    write_manifest(dir, {{"command", "sweep"}, {"preset", preset}, {"param", param}, {"values", values},
                         {"seed", base.seed}});
    out << "run directory: " << dir.string() << "\n";
    return failed ? 1 : 0;
}

// ---------------------------------------------------------------------------
// Studies
// ---------------------------------------------------------------------------

/// Levels holding at least `share` of the samples in some seed must be occupied in every seed.
inline bool levels_shared_across_seeds(const Bf16StudyReport& rep, double share, std::size_t num_tokens,
                                       std::size_t& checked) {
    std::set<std::uint16_t> heavy;
    for (const auto& levels : rep.level_counts) {
        for (const auto& [bits, count] : levels) {
            if (static_cast<double>(count) >= share * static_cast<double>(num_tokens)) heavy.insert(bits);
        }
    }
    checked = heavy.size();
    for (auto bits : heavy) {
        for (const auto& levels : rep.level_counts) {
            if (!levels.contains(bits)) return false;
        }
    }
    return true;
}

inline std::vector<Check> bf16_study_checks(const Bf16StudyConfig& c, const Bf16StudyReport& rep, double seconds) {
    std::vector<Check> checks;
    const auto& a = rep.average;
    for (const auto& r : rep.seeds) {
        checks.push_back({"seed " + r.label + " min <= mean <= max", r.min <= r.mean && r.mean <= r.max,
                          fmt(r.min) + " <= " + fmt(r.mean) + " <= " + fmt(r.max)});
    }
    if (c.infer_mode == PrecisionMode::Full) {
        bool ones = true;
        for (const auto& r : rep.seeds) ones = ones && r.min == 1.0 && r.max == 1.0;
        checks.push_back({"full-vs-full ratios", ones, "every ratio is 1"});
        checks.push_back({"full-vs-full KL", a.kl_full == 0.0 && a.kl_sampled == 0.0,
                          "kl_full " + fmt(a.kl_full) + ", kl_sampled " + fmt(a.kl_sampled)});
        return checks;
    }
    checks.push_back({"ratio mean in 1 +- 0.001", std::abs(a.mean - 1.0) <= 1e-3, fmt(a.mean)});
    checks.push_back({"ratio std in [0.003, 0.007]", a.std >= 0.003 && a.std <= 0.007, fmt(a.std)});
    checks.push_back({"ratio max in [1.012, 1.026]", a.max >= 1.012 && a.max <= 1.026, fmt(a.max)});
    checks.push_back({"ratio min in [0.974, 0.988]", a.min >= 0.974 && a.min <= 0.988, fmt(a.min)});
    checks.push_back({"sampled-token KL in [0.005, 0.08]", a.kl_sampled >= 0.005 && a.kl_sampled <= 0.08,
                      fmt(a.kl_sampled)});
    checks.push_back({"full-vocabulary KL", true, fmt(a.kl_full) + " (reported only)", true});
    bool fewer = true;
    for (const auto& r : rep.seeds) fewer = fewer && r.distinct_engine < r.distinct_full;
    checks.push_back({"bf16 probabilities take fewer distinct values", fewer,
                      std::to_string(a.distinct_engine) + " vs " + std::to_string(a.distinct_full) + " per seed"});
    std::size_t heavy = 0;
    const bool shared = levels_shared_across_seeds(rep, 0.002, c.num_tokens, heavy);
    checks.push_back({"occupied levels shared across seeds", shared,
                      std::to_string(heavy) + " levels holding >= 0.2% of samples in some seed"});
    checks.push_back({"runtime < 30 s", seconds < 30.0, fmt(seconds, 3) + " s"});
    return checks;
}

inline int cmd_bf16_study(CLI::App& app, std::vector<std::string> args, std::ostream& out, std::ostream& err) {
    std::string config_path, mode;
    std::optional<std::size_t> tokens, vocab;
    CommonOptions common;
    app.add_option("--config", config_path, "JSON study config");
    app.add_option("--tokens", tokens, "tokens per seed");
    app.add_option("--vocab", vocab, "vocabulary size");
    app.add_option("--mode", mode, "engine compared with full precision: bf16 or full");
    auto* seed_opt = app.add_option("--seed", common.seed, "first of five consecutive seeds");
    app.add_option("--out", common.out, "output root");
    app.parse(args);

    Bf16StudyConfig c = std::get<Bf16StudyConfig>(find_preset("bf16-discretization").config);
    if (!config_path.empty()) c = parse_bf16_study_config(read_text_file(config_path), c);
    if (seed_opt->count() > 0) {
        c.seeds.clear();
        for (std::uint64_t k = 0; k < 5; ++k) c.seeds.push_back(common.seed + k);
    }
    if (tokens) c.num_tokens = *tokens;
    if (vocab) c.vocab_size = *vocab;
    if (!mode.empty()) {
        try {
            c.infer_mode = parse_precision(mode);
        } catch (const DomainError&) {
            throw ConfigError("mode", "expected \"full\" or \"bf16\"");
        }
    }
    validate(c);

    const fs::path dir = make_run_dir(output_root(common.out), c.seeds.front(), "bf16-study");
    write_text_file(dir / "config.json", serialize(c));
    const auto t0 = std::chrono::steady_clock::now();
    const Bf16StudyReport rep = bf16_discretization_study(c);
    const double seconds = elapsed_seconds(t0);
    {
        auto os = open_output(dir / "study.csv");
        write_bf16_study_csv(os, rep);
        auto lv = open_output(dir / "levels.csv");
        lv << "seed,level_bits,level,count\n";
        for (std::size_t s = 0; s < rep.level_counts.size(); ++s) {
            for (const auto& [bits, count] : rep.level_counts[s]) {
                lv << c.seeds[s] << ",0x" << std::hex << std::setw(4) << std::setfill('0') << bits << std::dec
                   << std::setfill(' ') << ',' << std::setprecision(9)
                   << std::bit_cast<float>(static_cast<std::uint32_t>(bits) << 16) << ',' << count << '\n';
            }
        }
    }
    std::ostringstream table;
    write_bf16_study_csv(table, rep);
    out << table.str();
    return finish_study(dir, "bf16 discretization study", bf16_study_checks(c, rep, seconds),
                        {{"command", "bf16-study"}, {"seeds", c.seeds}}, out, err);
}

inline int cmd_survival(CLI::App& app, std::vector<std::string> args, std::ostream& out, std::ostream& err) {
    std::size_t pairs = 10000, support = 16;
    CommonOptions common;
    app.add_option("--pairs", pairs, "number of random (p, q) pairs");
    app.add_option("--support", support, "support size");
    app.add_option("--seed", common.seed, "random seed");
    app.add_option("--out", common.out, "output root");
    app.parse(args);

    const fs::path dir = make_run_dir(output_root(common.out), common.seed, "survival-bias");
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng = substream(common.seed);
    const SurvivalReport rep = survival_bias_study(pairs, support, rng);
    const double seconds = elapsed_seconds(t0);
    {
        auto os = open_output(dir / "survival.csv");
        os << "pair,value\n" << std::setprecision(17);
        for (std::size_t i = 0; i < rep.values.size(); ++i) os << i << ',' << rep.values[i] << '\n';
    }
    std::vector<Check> checks{
        {"every value >= 1 - 1e-12", rep.violations == 0,
         "min " + fmt(rep.min_value, 12) + ", max " + fmt(rep.max_value) + ", mean " + fmt(rep.mean_value) + ", " +
             std::to_string(rep.violations) + " violations; generator: " + rep.generator},
        {"p = q gives 1", std::abs(rep.equality_value - 1.0) <= 1e-15, fmt(rep.equality_value, 17)},
        {"runtime < 5 s", seconds < 5.0, fmt(seconds, 3) + " s"},
    };
    return finish_study(dir, "survival bias", checks, {{"command", "survival-bias"}, {"seed", common.seed}}, out, err);
}

inline int cmd_identity(CLI::App& app, std::vector<std::string> args, std::ostream& out, std::ostream& err) {
    std::size_t tokens = 1000000;
    CommonOptions common;
    app.add_option("--tokens", tokens, "Monte Carlo samples (>= 1000)");
    app.add_option("--seed", common.seed, "random seed");
    app.add_option("--out", common.out, "output root");
    app.parse(args);

    const fs::path dir = make_run_dir(output_root(common.out), common.seed, "identity-check");
    Rng rng = substream(common.seed);
    const IdentityReport bf = identity_check_rho(tokens, rng, PrecisionMode::Bf16);
    Rng rng2 = substream(common.seed);
    const IdentityReport full = identity_check_rho(tokens, rng2, PrecisionMode::Full);
    {
        auto os = open_output(dir / "identity.csv");
        os << "infer_mode,num_tokens,exact,infer_mass,mc_mean,mc_se,z,infer_sampled_mean,infer_sampled_se\n"
           << std::setprecision(17);
        for (const auto* r : {&bf, &full}) {
            os << (r == &bf ? "bf16" : "full") << ',' << r->num_tokens << ',' << r->exact << ',' << r->infer_mass << ','
               << r->mc_mean << ',' << r->mc_se << ',' << r->z_score << ',' << r->survival_mc_mean << ','
               << r->survival_mc_se << '\n';
        }
    }
    std::vector<Check> checks{
        {"Monte Carlo within 5 SE of exact sum", std::abs(bf.z_score) <= 5.0,
         "mc " + fmt(bf.mc_mean, 9) + ", exact " + fmt(bf.exact, 9) + ", z " + fmt(bf.z_score, 3)},
        {"exact sum equals total inference mass", std::abs(bf.exact - bf.infer_mass) <= 1e-12,
         fmt(bf.exact, 17) + " vs " + fmt(bf.infer_mass, 17)},
        {"pi_infer = pi_train gives exactly 1", full.mc_mean == 1.0, fmt(full.mc_mean, 17)},
        {"sampling under pi_infer instead", true,
         "mean " + fmt(bf.survival_mc_mean, 9) + " +- " + fmt(bf.survival_mc_se, 3) + " (reported only)", true},
    };
    return finish_study(dir, "on-policy identity", checks, {{"command", "identity-check"}, {"seed", common.seed}}, out,
                        err);
}

struct CovRow {
    std::string kind;
    std::uint64_t seed;
    CovInstance inst;
    CovReport rep;
};

inline std::vector<CovRow> run_cov_instances(std::uint64_t first_seed, std::size_t num_seeds) {
    std::vector<CovRow> rows;
    for (std::uint64_t s = first_seed; s < first_seed + num_seeds; ++s) {
        CovInstance single;
        single.seed = s;
        single.vocab = 4;
        single.max_len = 1;
        single.group_size = 3;
        rows.push_back({"single-token", s, single, cov_identity_check(single)});

        CovInstance same = single;
        same.infer_mode = PrecisionMode::Full;
        rows.push_back({"same-engine", s, same, cov_identity_check(same)});

        CovInstance multi = single;
        multi.vocab = 3;
        multi.max_len = 3;
        rows.push_back({"multi-token", s, multi, cov_identity_check(multi)});

        CovInstance coupled = single;
        coupled.vocab = 3;
        coupled.max_len = 2;
        coupled.advantages = AdvantageMode::GroupNormalized;
        rows.push_back({"group-coupled", s, coupled, cov_identity_check(coupled)});
    }
    return rows;
}

inline std::vector<Check> cov_checks(const std::vector<CovRow>& rows, const std::vector<CovRow>& rerun) {
    double single_worst = 0.0, same_worst = 0.0;
    bool coupled_finite = true, reproducible = rows.size() == rerun.size();
    std::vector<double> coupled;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& r = rows[i];
        if (r.kind == "single-token") single_worst = std::max(single_worst, r.rep.residual);
        if (r.kind == "same-engine") {
            same_worst = std::max({same_worst, std::abs(r.rep.delta_exact), std::abs(r.rep.delta_cov)});
        }
        if (r.kind == "group-coupled") {
            coupled_finite = coupled_finite && std::isfinite(r.rep.residual);
            coupled.push_back(r.rep.residual);
        }
        reproducible = reproducible && i < rerun.size() && rerun[i].rep.residual == r.rep.residual &&
                       rerun[i].rep.delta_exact == r.rep.delta_exact;
    }
    const auto [lo, hi] = std::minmax_element(coupled.begin(), coupled.end());
    return {
        {"single-token residual <= 1e-12", single_worst <= 1e-12, "worst " + fmt(single_worst, 3)},
        {"same engine gives zero shift", same_worst <= 1e-15, "worst |dJ| " + fmt(same_worst, 3)},
        {"group-coupled residual finite and reproducible", coupled_finite && reproducible,
         "range [" + fmt(*lo, 3) + ", " + fmt(*hi, 3) + "] over " + std::to_string(coupled.size()) + " seeds"},
    };
}

inline void write_cov_csv(std::ostream& os, const std::vector<CovRow>& rows) {
    os << "kind,seed,vocab,max_len,group_size,advantages,infer_mode,j_train,j_infer,delta_exact,delta_cov,residual\n"
       << std::setprecision(17);
    for (const auto& r : rows) {
        os << r.kind << ',' << r.seed << ',' << r.inst.vocab << ',' << r.inst.max_len << ',' << r.inst.group_size << ','
           << (r.inst.advantages == AdvantageMode::PerSequence ? "per-sequence" : "group-normalized") << ','
           << to_string(r.inst.infer_mode) << ',' << r.rep.j_train << ',' << r.rep.j_infer << ','
           << r.rep.delta_exact << ',' << r.rep.delta_cov << ',' << r.rep.residual << '\n';
    }
}

inline int cmd_cov(CLI::App& app, std::vector<std::string> args, std::ostream& out, std::ostream& err) {
    std::size_t seeds = 5;
    CommonOptions common;
    app.add_option("--seeds", seeds, "number of consecutive seeds");
    app.add_option("--seed", common.seed, "first seed");
    app.add_option("--out", common.out, "output root");
    app.parse(args);
    if (seeds < 1) throw ConfigError("seeds", "must be >= 1");

    const fs::path dir = make_run_dir(output_root(common.out), common.seed, "cov-check");
    const auto rows = run_cov_instances(common.seed, seeds);
    const auto rerun = run_cov_instances(common.seed, seeds);
    {
        auto os = open_output(dir / "cov.csv");
        write_cov_csv(os, rows);
    }
    std::vector<Check> checks = cov_checks(rows, rerun);
    double multi_worst = 0.0;
    for (const auto& r : rows) {
        if (r.kind == "multi-token") multi_worst = std::max(multi_worst, r.rep.residual);
    }
    checks.push_back({"multi-token per-sequence residual", true, "worst " + fmt(multi_worst, 3) + " (reported only)",
                      true});
    return finish_study(dir, "covariance decomposition", checks, {{"command", "cov-check"}, {"seed", common.seed}}, out,
                        err);
}

inline int cmd_variance(CLI::App& app, std::vector<std::string> args, std::ostream& out, std::ostream& err) {
    VarianceStudyConfig cfg;
    CommonOptions common;
    common.seed = cfg.seed;
    app.add_option("--batches", cfg.batches, "independent batches (>= 30)");
    app.add_option("--sigma", cfg.sigma, "std of the Gaussian weights");
    app.add_option("--delta", cfg.delta, "injection weight for low-probability tokens");
    app.add_option("--seed", common.seed, "random seed");
    app.add_option("--out", common.out, "output root");
    app.parse(args);
    cfg.seed = common.seed;

    const fs::path dir = make_run_dir(output_root(common.out), cfg.seed, "variance-study");
    const auto t0 = std::chrono::steady_clock::now();
    const VarianceStudyReport rep = variance_unbiasedness_study(cfg);
    VarianceStudyConfig zero = cfg;
    zero.sigma = 0.0;
    const VarianceStudyReport control = variance_unbiasedness_study(zero);
    const double seconds = elapsed_seconds(t0);
    {
        auto os = open_output(dir / "variance.csv");
        os << "batch,gaussian_variance,inject_low_prob\n" << std::setprecision(17);
        for (std::size_t b = 0; b < rep.variance_samples.size(); ++b) {
            os << b << ',' << rep.variance_samples[b] << ',' << rep.injection_samples[b] << '\n';
        }
    }
    const bool zero_exact = std::all_of(control.variance_samples.begin(), control.variance_samples.end(),
                                        [](double v) { return v == 0.0; });
    std::vector<Check> checks{
        {"Gaussian weights: |mean| <= 5 SE", rep.variance_unbiased,
         "mean " + fmt(rep.variance_mean, 4) + ", SE " + fmt(rep.variance_se, 4)},
        {"low-probability injection: |mean| > 5 SE", rep.injection_biased,
         "mean " + fmt(rep.injection_mean, 4) + ", SE " + fmt(rep.injection_se, 4)},
        {"sigma = 0 gives exactly 0", zero_exact, "all " + std::to_string(control.variance_samples.size()) + " batches"},
        {"runtime < 120 s", seconds < 120.0, fmt(seconds, 3) + " s"},
    };
    return finish_study(dir, "unbiased vs biased modulation", checks,
                        {{"command", "variance-study"}, {"seed", cfg.seed}}, out, err);
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

inline int cmd_report(CLI::App& app, std::vector<std::string> args, std::ostream& out, std::ostream& err) {
    std::string run;
    app.add_option("--run", run, "run directory")->required();
    app.parse(args);

    const fs::path dir(run);
    const auto bad = verify_manifest(dir);
    if (!bad.empty()) {
        err << "rlvrsim: integrity error: " << bad.size() << " file(s) differ from the manifest, first: " << bad.front()
            << "\n";
        return 1;
    }
    out << "manifest verified: " << dir.string() << "\n";
    if (fs::exists(dir / "summary.txt")) out << read_text_file(dir / "summary.txt");
    if (!fs::exists(dir / "metrics.csv")) return 0;

    std::istringstream csv(read_text_file(dir / "metrics.csv"));
    std::string line;
    std::getline(csv, line);
    if (line != kMetricsCsvHeader) throw IntegrityError((dir / "metrics.csv").string() + ": unexpected header");
    std::vector<double> step_reward, steps, mismatch, clip;
    std::size_t rows = 0;
    while (std::getline(csv, line)) {
        const auto f = split(line, ',');
        if (f.size() != 11) throw IntegrityError((dir / "metrics.csv").string() + ": malformed row");
        ++rows;
        clip.push_back(std::stod(f[5]));
        if (f[1] == "0") {
            steps.push_back(std::stod(f[0]));
            step_reward.push_back(std::stod(f[2]));
            mismatch.push_back(std::stod(f[3]));
        }
    }
    out << "metric rows: " << rows << ", rollout phases: " << steps.size() << "\n";
    if (steps.empty()) return 0;
    out << "reward_mean first/last: " << fmt(step_reward.front()) << " / " << fmt(step_reward.back()) << "\n";
    out << "mean mismatch: " << fmt(mean(mismatch)) << ", mean clip_fraction: " << fmt(mean(clip)) << "\n";
    if (steps.size() >= 2) out << "reward trend slope per step: " << fmt(trend_slope(step_reward)) << "\n";
    return 0;
}

}  // namespace detail

/// `args` excludes the program name. Returns the process exit status.
inline int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    using Handler = int (*)(CLI::App&, std::vector<std::string>, std::ostream&, std::ostream&);
    static const std::vector<std::pair<std::string, Handler>> commands{
        {"simulate", detail::cmd_simulate},        {"sweep", detail::cmd_sweep},
        {"bf16-study", detail::cmd_bf16_study},    {"survival-bias", detail::cmd_survival},
        {"identity-check", detail::cmd_identity},  {"cov-check", detail::cmd_cov},
        {"variance-study", detail::cmd_variance},  {"report", detail::cmd_report},
    };
    if (args.empty() || args[0] == "--help" || args[0] == "-h" || args[0] == "help") {
        (args.empty() ? err : out) << kUsage;
        return args.empty() ? 2 : 0;
    }
    const auto it = std::find_if(commands.begin(), commands.end(), [&](const auto& c) { return c.first == args[0]; });
    if (it == commands.end()) {
        err << "rlvrsim: unknown command '" << args[0] << "'\n" << kUsage;
        return 2;
    }
    CLI::App app("rlvrsim " + args[0], "rlvrsim " + args[0]);
    // CLI11 consumes the vector from the back
    std::vector<std::string> rest(args.rbegin(), args.rend() - 1);
    try {
        return it->second(app, std::move(rest), out, err);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "rlvrsim " << args[0] << ": " << e.what() << "\n";
        return 2;
    } catch (const ConfigError& e) {
        err << "rlvrsim: config error: " << e.what() << "\n";
        return 1;
    } catch (const IntegrityError& e) {
        err << "rlvrsim: integrity error: " << e.what() << "\n";
        return 1;
    } catch (const IoError& e) {
        err << "rlvrsim: i/o error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        err << "rlvrsim: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace rlvrsim
