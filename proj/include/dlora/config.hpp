// Copyright 2026 The dlora-desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>

#include <nlohmann/json.hpp>

#include "dlora/dataset.hpp"
#include "dlora/model.hpp"
#include "dlora/optim.hpp"
#include "dlora/peft.hpp"
#include "dlora/protocol.hpp"
#include "dlora/scheduler.hpp"

namespace dlora {

enum class TransportKind : std::uint8_t { Local = 0, Tcp = 1 };

struct RunConfig {
  ModelConfig model;
  PeftConfig peft;
  Mode mode = Mode::FT;
  std::uint32_t budget = 4;
  std::uint32_t epochs = 4;
  std::uint32_t warmup_steps = 0;  // 0: one full warm-up epoch
  std::uint32_t batch_size = 16;
  double lr = 3e-4;
  double weight_decay = 0.01;
  std::uint8_t quant_bits = 32;
  FrozenPolicy policy = FrozenPolicy::SkipFrozen;
  TransportKind transport = TransportKind::Local;
  std::string host = "127.0.0.1";
  std::uint16_t port = kDefaultPort;
  Task task = Task::Copy;
  std::uint64_t seed = 42;
  std::uint32_t train_samples = 256;
  std::uint32_t eval_samples = 64;
  std::string backbone;   // checkpoint path; empty means a fresh init from model.seed
  std::string peft_in;    // optional PEFT checkpoint to start from
  std::string peft_out;   // optional PEFT checkpoint written after training
  std::string output = "metrics.ndjson";

  /// Throws InputError naming the offending field.
  void validate() const;

  /// Budget actually used by the scheduler (L in FT mode).
  std::uint32_t effective_budget() const { return mode == Mode::FT ? model.n_layers : budget; }
  std::size_t seq_len() const { return model.max_seq; }
};

nlohmann::ordered_json to_json(const RunConfig& c);

/// Fields not present keep `base` values; unknown fields are rejected.
RunConfig run_config_from_json(const nlohmann::json& j, const RunConfig& base = {});

RunConfig load_run_config(const std::string& path);

/// The run-defining fields only: no transport or output locations, so runs
/// that differ only in where they execute log identical headers.
nlohmann::ordered_json resolved_config_json(const RunConfig& c);

std::string to_string(PeftKind k);
PeftKind peft_kind_from_string(const std::string& s);
std::string to_string(FrozenPolicy p);
FrozenPolicy frozen_policy_from_string(const std::string& s);
std::string to_string(TransportKind t);
TransportKind transport_from_string(const std::string& s);

}  // namespace dlora
