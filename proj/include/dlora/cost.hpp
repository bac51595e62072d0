// Copyright 2026 The dlora-desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace dlora {

enum class Node : std::uint8_t { Edge = 0, Cloud = 1 };
enum class Direction : std::uint8_t { ToCloud = 0, ToEdge = 1 };

/// What a frame or a FLOP was spent on. Module traffic is everything that
/// scales with the number of participating PEFT modules.
enum class CostClass : std::uint8_t { Base = 0, Module = 1, Control = 2 };

// FLOP conventions. Matmul is 2mkn; elementwise ops cost one FLOP per scalar
// per operation; composite ops are counted by their scalar-op expansion.
namespace flops {
constexpr std::uint64_t matmul(std::uint64_t m, std::uint64_t k, std::uint64_t n) { return 2 * m * k * n; }
constexpr std::uint64_t elementwise(std::uint64_t n, std::uint64_t ops = 1) { return n * ops; }
// max, subtract, exp, sum, divide
constexpr std::uint64_t softmax(std::uint64_t rows, std::uint64_t n) { return 5 * rows * n; }
constexpr std::uint64_t softmax_backward(std::uint64_t rows, std::uint64_t n) { return 4 * rows * n; }
// square+sum, mean/eps/sqrt/reciprocal, two multiplies
constexpr std::uint64_t rmsnorm(std::uint64_t rows, std::uint64_t d) { return rows * (4 * d + 4); }
constexpr std::uint64_t rmsnorm_backward(std::uint64_t rows, std::uint64_t d) { return rows * (9 * d + 3); }
// exp, add, divide, multiply
constexpr std::uint64_t silu(std::uint64_t n) { return 4 * n; }
constexpr std::uint64_t silu_backward(std::uint64_t n) { return 8 * n; }
constexpr std::uint64_t causal_attention(std::uint64_t batch, std::uint64_t heads, std::uint64_t seq,
                                         std::uint64_t head_dim) {
  const std::uint64_t tri = seq * (seq + 1) / 2;
  return batch * heads * tri * (4 * head_dim + 6);
}
constexpr std::uint64_t causal_attention_backward(std::uint64_t batch, std::uint64_t heads,
                                                  std::uint64_t seq, std::uint64_t head_dim) {
  const std::uint64_t tri = seq * (seq + 1) / 2;
  return batch * heads * tri * (8 * head_dim + 5);
}
constexpr std::uint64_t cross_entropy(std::uint64_t counted_rows, std::uint64_t vocab) {
  return counted_rows * (6 * vocab + 3);
}
// weight decay, two moment updates, bias corrections, sqrt, divide, apply
constexpr std::uint64_t adamw(std::uint64_t n) { return 12 * n; }
constexpr std::uint64_t l2_norm(std::uint64_t n) { return 2 * n + 1; }
}  // namespace flops

struct LedgerTotals {
  std::uint64_t edge_flops = 0;
  std::uint64_t cloud_flops = 0;
  std::uint64_t edge_module_flops = 0;
  std::uint64_t bytes_to_cloud = 0;
  std::uint64_t bytes_to_edge = 0;
  std::uint64_t module_bytes = 0;
  std::uint64_t control_bytes = 0;
  std::uint64_t frames_sent = 0;
  std::uint64_t frames_received = 0;

  LedgerTotals operator-(const LedgerTotals& rhs) const;
  bool operator==(const LedgerTotals&) const = default;
};

nlohmann::ordered_json to_json(const LedgerTotals& t);
LedgerTotals ledger_totals_from_json(const nlohmann::json& j);

/// Per-node cost counters. Monotone within a run; snapshots mark epoch ends.
class CostLedger {
 public:
  struct Snapshot {
    std::string label;
    LedgerTotals delta;
  };

  void add_flops(Node node, std::uint64_t n, CostClass cls = CostClass::Base);
  void count_matmul(Node node, std::uint64_t m, std::uint64_t k, std::uint64_t n,
                    CostClass cls = CostClass::Base) {
    add_flops(node, flops::matmul(m, k, n), cls);
  }

  /// Headers are included in `encoded_len`.
  void record_frame(Direction dir, std::size_t encoded_len, CostClass cls, bool sent_by_this_node);

  /// Closes the current interval: stores totals minus the previous snapshot.
  void snapshot(std::string label);

  const LedgerTotals& totals() const noexcept { return totals_; }
  const std::vector<Snapshot>& snapshots() const noexcept { return snapshots_; }

  /// Totals plus per-snapshot rows, with a stable field order.
  nlohmann::ordered_json report() const;

 private:
  LedgerTotals totals_;
  LedgerTotals at_last_snapshot_;
  std::vector<Snapshot> snapshots_;
};

/// Lightweight handle passed into compute code so it can charge FLOPs to a
/// node's ledger. A default-constructed meter discards everything.
struct FlopMeter {
  CostLedger* ledger = nullptr;
  Node node = Node::Edge;
  CostClass cls = CostClass::Base;

  void add(std::uint64_t n) const {
    if (ledger) ledger->add_flops(node, n, cls);
  }
  void matmul(std::uint64_t m, std::uint64_t k, std::uint64_t n) const { add(flops::matmul(m, k, n)); }
  FlopMeter with(CostClass c) const { return FlopMeter{ledger, node, c}; }
};

}  // namespace dlora
