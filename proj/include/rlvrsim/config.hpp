// SPDX-License-Identifier: Apache-2.0
//
// JSON configuration for training runs and the bf16 study, plus the named presets.
//
// Training schema (every key optional, defaults shown by `rlvrsim simulate --steps 0`):
//   vocab, prompts_per_step, group_size, inner_updates, learning_rate, total_steps, max_len,
//   init_logit_std, infer_mode ("full" | "bf16"), seed,
//   task       { name ("target-count" | "constant"), target_token, threshold, constant_value }
//   objective  { kind ("grpo" | "gspo"), eps_low, eps_high, tis_cap (number | null),
//                monitor_delta, monitor_pi_low }
//   modulation { kind ("none" | "clip-mask" | "inject-low-prob" | "gaussian-variance"),
//                delta, pi_low, sigma }

#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "json.hpp"
#include "rlvrsim/errors.hpp"
#include "rlvrsim/objectives.hpp"
#include "rlvrsim/studies.hpp"
#include "rlvrsim/trainer.hpp"

namespace rlvrsim {

using nlohmann::json;

inline std::string_view to_string(ObjectiveKind k) { return k == ObjectiveKind::GrpoToken ? "grpo" : "gspo"; }

inline std::string_view to_string(ModulationKind k) {
    switch (k) {
        case ModulationKind::None: return "none";
        case ModulationKind::ClipMask: return "clip-mask";
        case ModulationKind::InjectLowProb: return "inject-low-prob";
        case ModulationKind::GaussianVariance: return "gaussian-variance";
    }
    return "none";
}

namespace detail {

inline std::string join_key(const std::string& prefix, const std::string& key) {
    return prefix.empty() ? key : prefix + "." + key;
}

inline void reject_unknown(const json& obj, const std::string& prefix, std::initializer_list<std::string_view> allowed) {
    for (const auto& [k, _] : obj.items()) {
        if (std::find(allowed.begin(), allowed.end(), k) == allowed.end()) {
            throw ConfigError(join_key(prefix, k), "unknown key");
        }
    }
}

inline const json* section(const json& obj, const std::string& prefix, const char* key) {
    auto it = obj.find(key);
    if (it == obj.end()) return nullptr;
    if (!it->is_object()) throw ConfigError(join_key(prefix, key), "expected an object");
    return &*it;
}

inline void read(const json& obj, const std::string& prefix, const char* key, double& out) {
    auto it = obj.find(key);
    if (it == obj.end()) return;
    if (!it->is_number()) throw ConfigError(join_key(prefix, key), "expected a number");
    out = it->get<double>();
}

template <typename Int>
    requires std::is_integral_v<Int>
inline void read(const json& obj, const std::string& prefix, const char* key, Int& out) {
    auto it = obj.find(key);
    if (it == obj.end()) return;
    const std::string k = join_key(prefix, key);
    if (!it->is_number_integer()) throw ConfigError(k, "expected an integer");
    if constexpr (std::is_unsigned_v<Int>) {
        if (it->is_number_unsigned()) {
            out = it->get<Int>();
            return;
        }
        if (it->get<std::int64_t>() < 0) throw ConfigError(k, "must be non-negative");
    }
    out = it->get<Int>();
}

inline void read(const json& obj, const std::string& prefix, const char* key, std::string& out) {
    auto it = obj.find(key);
    if (it == obj.end()) return;
    if (!it->is_string()) throw ConfigError(join_key(prefix, key), "expected a string");
    out = it->get<std::string>();
}

inline json parse_json_text(std::string_view text) {
    const bool blank = std::all_of(text.begin(), text.end(), [](unsigned char c) { return std::isspace(c); });
    if (blank) return json::object();
    try {
        json j = json::parse(text);
        if (!j.is_object()) throw ConfigError("", "configuration must be a JSON object");
        return j;
    } catch (const json::parse_error& e) {
        throw ConfigError("", std::string("malformed configuration: ") + e.what());
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Training configuration
// ---------------------------------------------------------------------------

inline json to_json(const TrainerConfig& c) {
    const auto& o = c.objective;
    return json{
        {"vocab", c.vocab},
        {"prompts_per_step", c.prompts_per_step},
        {"group_size", c.group_size},
        {"inner_updates", c.inner_updates},
        {"learning_rate", c.learning_rate},
        {"total_steps", c.total_steps},
        {"max_len", c.max_len},
        {"init_logit_std", c.init_logit_std},
        {"infer_mode", std::string(to_string(c.infer_mode))},
        {"seed", c.seed},
        {"task",
         {{"name", c.task.name},
          {"target_token", c.task.target_token},
          {"threshold", c.task.threshold},
          {"constant_value", c.task.constant_value}}},
        {"objective",
         {{"kind", std::string(to_string(o.kind))},
          {"eps_low", o.eps_low},
          {"eps_high", o.eps_high},
          {"tis_cap", o.tis_cap ? json(*o.tis_cap) : json(nullptr)},
          {"monitor_delta", o.monitor_delta},
          {"monitor_pi_low", o.monitor_pi_low}}},
        {"modulation",
         {{"kind", std::string(to_string(o.modulation.kind))},
          {"delta", o.modulation.delta},
          {"pi_low", o.modulation.pi_low},
          {"sigma", o.modulation.sigma}}},
    };
}

/// Missing keys keep the values already in `base`.
inline TrainerConfig trainer_config_from_json(const json& j, TrainerConfig base = {}) {
    if (!j.is_object()) throw ConfigError("", "configuration must be a JSON object");
    detail::reject_unknown(j, "",
                           {"vocab", "prompts_per_step", "group_size", "inner_updates", "learning_rate", "total_steps",
                            "max_len", "init_logit_std", "infer_mode", "seed", "task", "objective", "modulation"});
    TrainerConfig c = std::move(base);
    detail::read(j, "", "vocab", c.vocab);
    detail::read(j, "", "prompts_per_step", c.prompts_per_step);
    detail::read(j, "", "group_size", c.group_size);
    detail::read(j, "", "inner_updates", c.inner_updates);
    detail::read(j, "", "learning_rate", c.learning_rate);
    detail::read(j, "", "total_steps", c.total_steps);
    detail::read(j, "", "max_len", c.max_len);
    detail::read(j, "", "init_logit_std", c.init_logit_std);
    detail::read(j, "", "seed", c.seed);
    if (j.contains("infer_mode")) {
        std::string mode;
        detail::read(j, "", "infer_mode", mode);
        try {
            c.infer_mode = parse_precision(mode);
        } catch (const DomainError&) {
            throw ConfigError("infer_mode", "expected \"full\" or \"bf16\", got \"" + mode + "\"");
        }
    }
    if (const json* t = detail::section(j, "", "task")) {
        detail::reject_unknown(*t, "task", {"name", "target_token", "threshold", "constant_value"});
        detail::read(*t, "task", "name", c.task.name);
        detail::read(*t, "task", "target_token", c.task.target_token);
        detail::read(*t, "task", "threshold", c.task.threshold);
        detail::read(*t, "task", "constant_value", c.task.constant_value);
    }
    if (const json* o = detail::section(j, "", "objective")) {
        detail::reject_unknown(*o, "objective",
                               {"kind", "eps_low", "eps_high", "tis_cap", "monitor_delta", "monitor_pi_low"});
        if (o->contains("kind")) {
            std::string kind;
            detail::read(*o, "objective", "kind", kind);
            if (kind == "grpo") c.objective.kind = ObjectiveKind::GrpoToken;
            else if (kind == "gspo") c.objective.kind = ObjectiveKind::GspoSequence;
            else throw ConfigError("objective.kind", "expected \"grpo\" or \"gspo\", got \"" + kind + "\"");
        }
        detail::read(*o, "objective", "eps_low", c.objective.eps_low);
        detail::read(*o, "objective", "eps_high", c.objective.eps_high);
        if (auto it = o->find("tis_cap"); it != o->end()) {
            if (it->is_null()) {
                c.objective.tis_cap.reset();
            } else {
                double cap = 0.0;
                detail::read(*o, "objective", "tis_cap", cap);
                c.objective.tis_cap = cap;
            }
        }
        detail::read(*o, "objective", "monitor_delta", c.objective.monitor_delta);
        detail::read(*o, "objective", "monitor_pi_low", c.objective.monitor_pi_low);
    }
    if (const json* m = detail::section(j, "", "modulation")) {
        detail::reject_unknown(*m, "modulation", {"kind", "delta", "pi_low", "sigma"});
        auto& mod = c.objective.modulation;
        if (m->contains("kind")) {
            std::string kind;
            detail::read(*m, "modulation", "kind", kind);
            if (kind == "none") mod.kind = ModulationKind::None;
            else if (kind == "clip-mask") mod.kind = ModulationKind::ClipMask;
            else if (kind == "inject-low-prob") mod.kind = ModulationKind::InjectLowProb;
            else if (kind == "gaussian-variance") mod.kind = ModulationKind::GaussianVariance;
            else throw ConfigError("modulation.kind", "unknown modulation \"" + kind + "\"");
        }
        detail::read(*m, "modulation", "delta", mod.delta);
        detail::read(*m, "modulation", "pi_low", mod.pi_low);
        detail::read(*m, "modulation", "sigma", mod.sigma);
    }
    validate(c);
    return c;
}

inline TrainerConfig parse_trainer_config(std::string_view text, TrainerConfig base = {}) {
    return trainer_config_from_json(detail::parse_json_text(text), std::move(base));
}

inline std::string serialize(const TrainerConfig& c) { return to_json(c).dump(2) + "\n"; }

// ---------------------------------------------------------------------------
// bf16 study configuration
// ---------------------------------------------------------------------------

inline json to_json(const Bf16StudyConfig& c) {
    return json{{"vocab_size", c.vocab_size},
                {"num_tokens", c.num_tokens},
                {"logit_std", c.logit_std},
                {"seeds", c.seeds},
                {"infer_mode", std::string(to_string(c.infer_mode))}};
}

inline Bf16StudyConfig bf16_study_config_from_json(const json& j, Bf16StudyConfig base = {}) {
    if (!j.is_object()) throw ConfigError("", "configuration must be a JSON object");
    detail::reject_unknown(j, "", {"vocab_size", "num_tokens", "logit_std", "seeds", "infer_mode"});
    Bf16StudyConfig c = std::move(base);
    detail::read(j, "", "vocab_size", c.vocab_size);
    detail::read(j, "", "num_tokens", c.num_tokens);
    detail::read(j, "", "logit_std", c.logit_std);
    if (auto it = j.find("seeds"); it != j.end()) {
        if (!it->is_array()) throw ConfigError("seeds", "expected an array of non-negative integers");
        c.seeds.clear();
        for (const auto& s : *it) {
            if (!s.is_number_unsigned()) throw ConfigError("seeds", "expected an array of non-negative integers");
            c.seeds.push_back(s.get<std::uint64_t>());
        }
    }
    if (j.contains("infer_mode")) {
        std::string mode;
        detail::read(j, "", "infer_mode", mode);
        try {
            c.infer_mode = parse_precision(mode);
        } catch (const DomainError&) {
            throw ConfigError("infer_mode", "expected \"full\" or \"bf16\", got \"" + mode + "\"");
        }
    }
    validate(c);
    return c;
}

inline Bf16StudyConfig parse_bf16_study_config(std::string_view text, Bf16StudyConfig base = {}) {
    return bf16_study_config_from_json(detail::parse_json_text(text), std::move(base));
}

inline std::string serialize(const Bf16StudyConfig& c) { return to_json(c).dump(2) + "\n"; }

/// Sets one key of a training config. `key` is either a dotted path ("objective.eps_high") or
/// a bare name that is unique across the sections ("eps_high"). `value_text` is parsed as JSON,
/// falling back to a plain string.
inline TrainerConfig with_override(const TrainerConfig& c, const std::string& key, const std::string& value_text) {
    json j = to_json(c);
    json value;
    try {
        value = json::parse(value_text);
    } catch (const json::parse_error&) {
        value = value_text;
    }
    json* target = nullptr;
    std::string leaf;
    if (auto dot = key.find('.'); dot != std::string::npos) {
        const std::string sec = key.substr(0, dot);
        leaf = key.substr(dot + 1);
        if (!j.contains(sec) || !j[sec].is_object() || !j[sec].contains(leaf)) throw ConfigError(key, "unknown key");
        target = &j[sec];
    } else if (j.contains(key) && !j[key].is_object()) {
        target = &j;
        leaf = key;
    } else {
        for (const char* sec : {"task", "objective", "modulation"}) {
            if (j[sec].contains(key)) {
                if (target) throw ConfigError(key, "ambiguous key; use section.key");
                target = &j[sec];
                leaf = key;
            }
        }
        if (!target) throw ConfigError(key, "unknown key");
    }
    (*target)[leaf] = value;
    return trainer_config_from_json(j);
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

struct ExperimentPreset {
    std::string name;
    std::variant<TrainerConfig, Bf16StudyConfig> config;
    std::string description;
};

inline const std::vector<ExperimentPreset>& presets() {
    static const std::vector<ExperimentPreset> table = [] {
        std::vector<ExperimentPreset> out;
        auto grpo = [](std::optional<double> tis, double eps_high) {
            TrainerConfig c;
            c.objective = ObjectiveConfig::grpo();
            c.objective.tis_cap = tis;
            c.objective.eps_high = eps_high;
            return c;
        };
        auto gspo = [](ModulationKind kind, double delta) {
            TrainerConfig c;
            c.objective = ObjectiveConfig::gspo();
            c.objective.modulation = {kind, delta, 0.1, 0.2};
            return c;
        };
        out.push_back({"baseline", grpo(std::nullopt, 0.2),
                       "token-level clipped objective under bf16 inference, no correction"});
        out.push_back({"tis", grpo(2.0, 0.2), "baseline plus truncated importance sampling, cap 2"});
        out.push_back({"clip-strong", grpo(std::nullopt, 0.2), "clipping-strength sweep, right range 0.2"});
        out.push_back({"clip-mid", grpo(std::nullopt, 0.24), "clipping-strength sweep, right range 0.24"});
        out.push_back({"clip-low", grpo(std::nullopt, 0.28), "clipping-strength sweep, right range 0.28"});
        out.push_back({"gspo", gspo(ModulationKind::None, 2.0), "sequence-level objective, no modulation"});
        out.push_back({"inject-delta3", gspo(ModulationKind::InjectLowProb, 3.0),
                       "sequence-level objective, low-probability tokens (p < 0.1) weighted by 3"});
        out.push_back({"inject-delta2", gspo(ModulationKind::InjectLowProb, 2.0),
                       "sequence-level objective, low-probability tokens (p < 0.1) weighted by 2"});
        out.push_back({"inject-delta1.2", gspo(ModulationKind::InjectLowProb, 1.2),
                       "sequence-level objective, low-probability tokens (p < 0.1) weighted by 1.2"});
        out.push_back({"variance", gspo(ModulationKind::GaussianVariance, 2.0),
                       "sequence-level objective, per-token weights drawn from N(1, 0.2^2)"});
        out.push_back({"bf16-discretization", Bf16StudyConfig{},
                       "bf16 softmax study: vocab 2048, 50000 tokens, logits N(0, 1.5^2), 5 seeds"});
        return out;
    }();
    return table;
}

inline const ExperimentPreset& find_preset(std::string_view name) {
    for (const auto& p : presets()) {
        if (p.name == name) return p;
    }
    throw ConfigError("preset", "unknown preset \"" + std::string(name) + "\"");
}

inline const TrainerConfig& trainer_preset(std::string_view name) {
    const auto& p = find_preset(name);
    if (const auto* c = std::get_if<TrainerConfig>(&p.config)) return *c;
    throw ConfigError("preset", "preset \"" + std::string(name) + "\" is not a training preset");
}

}  // namespace rlvrsim
