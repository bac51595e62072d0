// Copyright 2026 The dlora-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "dlora/cost.hpp"

namespace dlora {

LedgerTotals LedgerTotals::operator-(const LedgerTotals& rhs) const {
  LedgerTotals d;
  d.edge_flops = edge_flops - rhs.edge_flops;
  d.cloud_flops = cloud_flops - rhs.cloud_flops;
  d.edge_module_flops = edge_module_flops - rhs.edge_module_flops;
  d.bytes_to_cloud = bytes_to_cloud - rhs.bytes_to_cloud;
  d.bytes_to_edge = bytes_to_edge - rhs.bytes_to_edge;
  d.module_bytes = module_bytes - rhs.module_bytes;
  d.control_bytes = control_bytes - rhs.control_bytes;
  d.frames_sent = frames_sent - rhs.frames_sent;
  d.frames_received = frames_received - rhs.frames_received;
  return d;
}

nlohmann::ordered_json to_json(const LedgerTotals& t) {
  nlohmann::ordered_json j;
  j["edge_flops"] = t.edge_flops;
  j["cloud_flops"] = t.cloud_flops;
  j["edge_module_flops"] = t.edge_module_flops;
  j["bytes_to_cloud"] = t.bytes_to_cloud;
  j["bytes_to_edge"] = t.bytes_to_edge;
  j["module_bytes"] = t.module_bytes;
  j["control_bytes"] = t.control_bytes;
  j["frames_sent"] = t.frames_sent;
  j["frames_received"] = t.frames_received;
  return j;
}

LedgerTotals ledger_totals_from_json(const nlohmann::json& j) {
  LedgerTotals t;
  t.edge_flops = j.value("edge_flops", std::uint64_t{0});
  t.cloud_flops = j.value("cloud_flops", std::uint64_t{0});
  t.edge_module_flops = j.value("edge_module_flops", std::uint64_t{0});
  t.bytes_to_cloud = j.value("bytes_to_cloud", std::uint64_t{0});
  t.bytes_to_edge = j.value("bytes_to_edge", std::uint64_t{0});
  t.module_bytes = j.value("module_bytes", std::uint64_t{0});
  t.control_bytes = j.value("control_bytes", std::uint64_t{0});
  t.frames_sent = j.value("frames_sent", std::uint64_t{0});
  t.frames_received = j.value("frames_received", std::uint64_t{0});
  return t;
}

void CostLedger::add_flops(Node node, std::uint64_t n, CostClass cls) {
  if (node == Node::Edge) {
    totals_.edge_flops += n;
    if (cls == CostClass::Module) totals_.edge_module_flops += n;
  } else {
    totals_.cloud_flops += n;
  }
}

void CostLedger::record_frame(Direction dir, std::size_t encoded_len, CostClass cls,
                              bool sent_by_this_node) {
  if (dir == Direction::ToCloud) {
    totals_.bytes_to_cloud += encoded_len;
  } else {
    totals_.bytes_to_edge += encoded_len;
  }
  if (cls == CostClass::Module) totals_.module_bytes += encoded_len;
  if (cls == CostClass::Control) totals_.control_bytes += encoded_len;
  if (sent_by_this_node) {
    ++totals_.frames_sent;
  } else {
    ++totals_.frames_received;
  }
}

void CostLedger::snapshot(std::string label) {
  snapshots_.push_back(Snapshot{std::move(label), totals_ - at_last_snapshot_});
  at_last_snapshot_ = totals_;
}

nlohmann::ordered_json CostLedger::report() const {
  nlohmann::ordered_json j;
  j["totals"] = to_json(totals_);
  auto rows = nlohmann::ordered_json::array();
  for (const auto& s : snapshots_) {
    nlohmann::ordered_json row;
    row["label"] = s.label;
    row["delta"] = to_json(s.delta);
    rows.push_back(std::move(row));
  }
  j["snapshots"] = std::move(rows);
  return j;
}

}  // namespace dlora
