// Copyright 2026 The dlora-desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dlora/config.hpp"
#include "dlora/cost.hpp"
#include "dlora/dataset.hpp"
#include "dlora/metrics.hpp"
#include "dlora/model.hpp"
#include "dlora/peft.hpp"
#include "dlora/scheduler.hpp"
#include "dlora/transport.hpp"

namespace dlora {

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
  std::size_t tokens = 0;  // counted positions
};

struct EpochOutcome {
  std::vector<double> norms;
  std::vector<double> scores;  // empty in FT mode
  std::vector<ModuleStatus> next_status;
  LedgerTotals edge;           // edge ledger delta over the epoch
  std::uint64_t cloud_flops = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 0 is the warm-up epoch
  bool warmup = false;
  std::size_t steps = 0;
  double mean_loss = 0.0;
  double last_loss = 0.0;
  std::vector<ModuleStatus> status;  // active set used during the epoch
  EpochOutcome outcome;
};

struct FinetuneResult {
  std::vector<double> losses;  // every training step, warm-up included
  std::vector<EpochRecord> epochs;
  EvalResult eval;
  LedgerTotals edge_totals;
  LedgerTotals cloud_totals;
};

/// Optimizer steps of a whole run: warm-up plus `epochs` main epochs.
std::size_t total_steps(const RunConfig& cfg);

std::size_t count_active(std::span<const ModuleStatus> status);

/// Execution backend behind the shared epoch driver: the split edge node or
/// the single-process reference trainer.
template <typename T>
class TrainingEngine {
 public:
  virtual ~TrainingEngine() = default;
  virtual PeftTrainer<T>& trainer() = 0;
  virtual void begin() {}
  virtual double train_step(const Batch& batch) = 0;
  virtual EvalResult evaluate(const std::vector<Batch>& batches) = 0;
  /// Computes norms, runs the kill/revive decision and applies it.
  virtual EpochOutcome end_epoch(std::size_t epoch) = 0;
  virtual void finish() {}
};

/// Warm-up epoch, `cfg.epochs` main epochs, held-out evaluation. Writes the
/// metrics log when `log` is given.
template <typename T>
FinetuneResult drive_finetune(const RunConfig& cfg, TrainingEngine<T>& engine, MetricsLog* log);

/// Edge node: embedding table, PEFT pool and optimizer, private data and the
/// loss. Drives the session over `channel`.
template <typename T>
class EdgeNode : public TrainingEngine<T> {
 public:
  EdgeNode(const RunConfig& cfg, const ModelConfig& model, Embedding<T> embedding, PeftPool<T> pool,
           Channel& channel, CostLedger& ledger);

  PeftTrainer<T>& trainer() override { return trainer_; }
  /// Sends Config, then the initial norm report when a scheduler is in use.
  void begin() override;
  double train_step(const Batch& batch) override;
  EvalResult evaluate(const std::vector<Batch>& batches) override;
  EpochOutcome end_epoch(std::size_t epoch) override;
  /// Sends Shutdown.
  void finish() override;

 private:
  /// Serves cloud forward requests until the logits arrive.
  Tensor<T> forward(const Batch& batch);
  FlopMeter meter(CostClass cls) { return FlopMeter{&ledger_, Node::Edge, cls}; }

  RunConfig cfg_;
  ModelConfig model_;
  Embedding<T> embedding_;
  PeftTrainer<T> trainer_;
  Channel& ch_;
  CostLedger& ledger_;
  QuantSpec quant_;
  std::uint64_t cloud_flops_seen_ = 0;
};

/// Cloud node: frozen trunk and LM head plus the kill/revive scheduler.
/// Reacts to edge frames until Shutdown.
template <typename T>
class CloudNode {
 public:
  CloudNode(const ModelConfig& model, Trunk<T> trunk, Channel& channel, CostLedger& ledger);

  void serve();

  /// Scheduler state of the last session (absent before Config).
  const std::optional<KrScheduler>& scheduler() const noexcept { return sched_; }

 private:
  void step(const FwdActivationMsg& emb, std::optional<WireMessage>& pending);
  void epoch_end(const EpochEndMsg& msg);
  FlopMeter meter() { return FlopMeter{&ledger_, Node::Cloud, CostClass::Base}; }

  ModelConfig model_;
  Trunk<T> trunk_;
  Channel& ch_;
  CostLedger& ledger_;
  ConfigMsg session_;
  std::optional<KrScheduler> sched_;
  std::vector<ModuleStatus> status_;
  std::vector<double> norms_pre_;
  std::optional<std::vector<double>> norms_post_;
};

/// Single-process trainer with no protocol: same kernels, same order, same
/// scheduler. The split runtime must reproduce its losses bit for bit.
template <typename T>
class ReferenceEngine : public TrainingEngine<T> {
 public:
  ReferenceEngine(const RunConfig& cfg, Backbone<T> backbone, PeftPool<T> pool);

  PeftTrainer<T>& trainer() override { return trainer_; }
  double train_step(const Batch& batch) override;
  EvalResult evaluate(const std::vector<Batch>& batches) override;
  EpochOutcome end_epoch(std::size_t epoch) override;

  CostLedger& ledger() { return ledger_; }

 private:
  RunConfig cfg_;
  Backbone<T> backbone_;
  PeftTrainer<T> trainer_;
  KrScheduler sched_;
  std::vector<double> norms_pre_;
  CostLedger ledger_;
};

/// Observes every frame the edge sends or receives.
struct RunHooks {
  FrameCapture capture;
};

/// Both nodes in one process (threads) over the configured transport; tcp
/// uses loopback on `cfg.port` (0 picks a free port).
FinetuneResult run_finetune(const RunConfig& cfg, const RunHooks& hooks = {});

/// Single-process reference run over the same schedule and data.
FinetuneResult run_reference(const RunConfig& cfg);

/// Forward-only split session on the held-out set.
EvalResult run_evaluate(const RunConfig& cfg);

/// Edge side only, connecting to a remote cloud at cfg.host:cfg.port.
FinetuneResult run_edge(const RunConfig& cfg);

/// Listens on host:port and serves one session with the given backbone.
void serve_cloud(const std::string& backbone_path, const ModelConfig& fallback, const std::string& host,
                 std::uint16_t port, const std::function<void(std::uint16_t)>& on_listening = {});

struct PretrainOptions {
  std::size_t steps = 400;
  std::size_t batch_size = 16;
  std::size_t samples = 2048;
  double lr = 3e-3;
  std::uint64_t seed = 7;
  Task task = Task::CharLm;
};

/// Monolithic full-backbone training, charlm unless `opt.task` says otherwise.
template <typename T>
Backbone<T> pretrain_backbone(Backbone<T> backbone, const PretrainOptions& opt,
                              const std::function<void(std::size_t, double)>& on_step = {});

/// Backbone named by cfg.backbone, or a fresh init from cfg.model.
template <typename T>
Backbone<T> load_or_init_backbone(const RunConfig& cfg);

/// PEFT pool from cfg.peft_in, or a fresh init seeded from cfg.seed.
template <typename T>
PeftPool<T> load_or_init_pool(const RunConfig& cfg);

/// Masked loss and token accuracy over one batch of logits.
template <typename T>
EvalResult score_logits(const Tensor<T>& logits, const Batch& batch);

}  // namespace dlora
