// Copyright 2026 The dlora-desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace dlora {

/// Newline-delimited JSON records, flushed per line so an aborted run keeps
/// everything written so far.
class MetricsLog {
 public:
  explicit MetricsLog(const std::string& path);

  void write(const nlohmann::ordered_json& record);
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
  std::ofstream out_;
};

/// JSON number, or the string "inf" for the +inf change sentinel.
nlohmann::ordered_json json_score(double v);

std::vector<nlohmann::json> read_metrics(const std::string& path);

/// One CSV row per main (non-warm-up) epoch record.
std::string metrics_to_csv(const std::vector<nlohmann::json>& records);

}  // namespace dlora
