// Copyright 2026 The dlora-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "dlora/config.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <set>

namespace dlora {

std::string to_string(PeftKind k) { return k == PeftKind::Lora ? "lora" : "adapter"; }

PeftKind peft_kind_from_string(const std::string& s) {
  if (s == "lora") return PeftKind::Lora;
  if (s == "adapter") return PeftKind::Adapter;
  throw InputError("unknown peft kind '" + s + "' (expected lora or adapter)");
}

std::string to_string(FrozenPolicy p) {
  return p == FrozenPolicy::SkipFrozen ? "skip_frozen" : "compute_frozen_on_edge";
}

FrozenPolicy frozen_policy_from_string(const std::string& s) {
  if (s == "skip_frozen") return FrozenPolicy::SkipFrozen;
  if (s == "compute_frozen_on_edge") return FrozenPolicy::ComputeFrozenOnEdge;
  throw InputError("unknown frozen policy '" + s + "' (expected skip_frozen or compute_frozen_on_edge)");
}

std::string to_string(TransportKind t) { return t == TransportKind::Local ? "local" : "tcp"; }

TransportKind transport_from_string(const std::string& s) {
  if (s == "local") return TransportKind::Local;
  if (s == "tcp") return TransportKind::Tcp;
  throw InputError("unknown transport '" + s + "' (expected local or tcp)");
}

void RunConfig::validate() const {
  model.validate();
  peft.validate();
  if (mode != Mode::FT && (budget < 1 || budget > model.n_layers)) {
    throw InputError("budget must be in [1, n_layers=" + std::to_string(model.n_layers) + "]");
  }
  if (epochs < 1) throw InputError("epochs must be >= 1");
  if (batch_size < 1) throw InputError("batch_size must be >= 1");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw InputError("lr must be a finite non-negative number");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) throw InputError("weight_decay must be >= 0");
  QuantSpec{quant_bits}.validate();
  if (train_samples < batch_size) throw InputError("train_samples must be >= batch_size");
  if (eval_samples < 1) throw InputError("eval_samples must be >= 1");
  if (output.empty()) throw InputError("output path must not be empty");
  if (task != Task::CharLm && model.max_seq % 2 != 0) {
    throw InputError("copy/reverse tasks need an even max_seq");
  }
}

namespace {

nlohmann::ordered_json model_json(const ModelConfig& m) {
  return {{"vocab", m.vocab},       {"d_model", m.d_model},   {"n_heads", m.n_heads},
          {"d_ff", m.d_ff},         {"n_layers", m.n_layers}, {"max_seq", m.max_seq},
          {"precision", static_cast<int>(m.precision)},       {"seed", m.seed}};
}

nlohmann::ordered_json peft_json(const PeftConfig& p) {
  return {{"kind", to_string(p.kind)}, {"rank", p.rank}, {"adapter_dim", p.adapter_dim}, {"alpha", p.alpha}};
}

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw InputError(where + " must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw InputError("unknown config field '" + where + k + "'");
  }
}

template <typename V>
void get(const nlohmann::json& j, const char* key, V& out) {
  if (!j.contains(key)) return;
  try {
    const auto& v = j.at(key);
    if constexpr (std::is_integral_v<V>) {
      if (!v.is_number_integer()) throw InputError(std::string("config field '") + key + "' must be an integer");
      if (v.is_number_unsigned() ? v.get<std::uint64_t>() > std::numeric_limits<V>::max()
                                 : v.get<std::int64_t>() < 0 ||
                                       static_cast<std::uint64_t>(v.get<std::int64_t>()) >
                                           std::numeric_limits<V>::max()) {
        throw InputError(std::string("config field '") + key + "' is out of range");
      }
    }
    out = v.get<V>();
  } catch (const nlohmann::json::exception&) {
    throw InputError(std::string("config field '") + key + "' has the wrong type");
  }
}

template <typename E, typename F>
void get_enum(const nlohmann::json& j, const char* key, E& out, F parse) {
  std::string s;
  get(j, key, s);
  if (j.contains(key)) out = parse(s);
}

}  // namespace

nlohmann::ordered_json resolved_config_json(const RunConfig& c) {
  return {{"model", model_json(c.model)},
          {"peft", peft_json(c.peft)},
          {"mode", to_string(c.mode)},
          {"budget", c.budget},
          {"epochs", c.epochs},
          {"warmup_steps", c.warmup_steps},
          {"batch_size", c.batch_size},
          {"lr", c.lr},
          {"weight_decay", c.weight_decay},
          {"quant_bits", c.quant_bits},
          {"frozen_policy", to_string(c.policy)},
          {"task", to_string(c.task)},
          {"seed", c.seed},
          {"train_samples", c.train_samples},
          {"eval_samples", c.eval_samples},
          {"backbone", c.backbone},
          {"peft_in", c.peft_in}};
}

nlohmann::ordered_json to_json(const RunConfig& c) {
  nlohmann::ordered_json j = resolved_config_json(c);
  j["peft_out"] = c.peft_out;
  j["transport"] = to_string(c.transport);
  j["host"] = c.host;
  j["port"] = c.port;
  j["output"] = c.output;
  return j;
}

RunConfig run_config_from_json(const nlohmann::json& j, const RunConfig& base) {
  reject_unknown(j,
                 {"model", "peft", "mode", "budget", "epochs", "warmup_steps", "batch_size", "lr", "weight_decay",
                  "quant_bits", "frozen_policy", "task", "seed", "train_samples", "eval_samples", "backbone",
                  "peft_in", "peft_out", "transport", "host", "port", "output"},
                 "");
  RunConfig c = base;
  if (j.contains("model")) {
    const auto& m = j.at("model");
    reject_unknown(m, {"vocab", "d_model", "n_heads", "d_ff", "n_layers", "max_seq", "precision", "seed"}, "model.");
    get(m, "vocab", c.model.vocab);
    get(m, "d_model", c.model.d_model);
    get(m, "n_heads", c.model.n_heads);
    get(m, "d_ff", c.model.d_ff);
    get(m, "n_layers", c.model.n_layers);
    get(m, "max_seq", c.model.max_seq);
    get(m, "seed", c.model.seed);
    if (m.contains("precision")) {
      int p = 0;
      get(m, "precision", p);
      if (p != 32 && p != 64) throw InputError("model.precision must be 32 or 64");
      c.model.precision = static_cast<Precision>(p);
    }
  }
  if (j.contains("peft")) {
    const auto& p = j.at("peft");
    reject_unknown(p, {"kind", "rank", "adapter_dim", "alpha"}, "peft.");
    get_enum(p, "kind", c.peft.kind, peft_kind_from_string);
    get(p, "rank", c.peft.rank);
    get(p, "adapter_dim", c.peft.adapter_dim);
    get(p, "alpha", c.peft.alpha);
  }
  get_enum(j, "mode", c.mode, mode_from_string);
  get(j, "budget", c.budget);
  get(j, "epochs", c.epochs);
  get(j, "warmup_steps", c.warmup_steps);
  get(j, "batch_size", c.batch_size);
  get(j, "lr", c.lr);
  get(j, "weight_decay", c.weight_decay);
  get(j, "quant_bits", c.quant_bits);
  get_enum(j, "frozen_policy", c.policy, frozen_policy_from_string);
  get_enum(j, "task", c.task, task_from_string);
  get(j, "seed", c.seed);
  get(j, "train_samples", c.train_samples);
  get(j, "eval_samples", c.eval_samples);
  get(j, "backbone", c.backbone);
  get(j, "peft_in", c.peft_in);
  get(j, "peft_out", c.peft_out);
  get_enum(j, "transport", c.transport, transport_from_string);
  get(j, "host", c.host);
  get(j, "port", c.port);
  get(j, "output", c.output);
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open config file " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw InputError("config file " + path + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace dlora
