// Copyright 2026 The dlora-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "dlora/metrics.hpp"

#include <cmath>
#include <filesystem>
#include <sstream>
#include <stdexcept>

#include "dlora/tensor.hpp"

namespace dlora {

MetricsLog::MetricsLog(const std::string& path) : path_(path) {
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  out_.open(path, std::ios::trunc);
  if (!out_) throw std::runtime_error("cannot open metrics log " + path);
}

void MetricsLog::write(const nlohmann::ordered_json& record) {
  out_ << record.dump() << '\n';
  out_.flush();
}

nlohmann::ordered_json json_score(double v) {
  if (std::isinf(v)) return "inf";
  return v;
}

std::vector<nlohmann::json> read_metrics(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open metrics log " + path);
  std::vector<nlohmann::json> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::parse_error&) {
      throw InputError("metrics log " + path + " line " + std::to_string(n) + " is not JSON");
    }
  }
  return out;
}

namespace {

std::string join(const nlohmann::json& arr) {
  std::string s;
  for (const auto& v : arr) {
    if (!s.empty()) s += ';';
    s += v.is_string() ? v.get<std::string>() : v.dump();
  }
  return s;
}

}  // namespace

std::string metrics_to_csv(const std::vector<nlohmann::json>& records) {
  std::ostringstream out;
  out << "epoch,mean_loss,last_loss,active,status,scores,edge_flops,edge_module_flops,cloud_flops,"
         "bytes_to_cloud,bytes_to_edge,module_bytes,control_bytes\n";
  for (const auto& r : records) {
    if (r.value("record", "") != "epoch" || r.value("phase", "") != "train") continue;
    const auto& edge = r.at("edge");
    std::string status;
    for (const auto& s : r.at("status")) status += std::to_string(s.get<int>());
    out << r.at("epoch").get<std::uint64_t>() << ',' << r.at("mean_loss").dump() << ','
        << r.at("last_loss").dump() << ',' << r.at("active").get<std::uint64_t>() << ',' << status << ','
        << join(r.at("scores")) << ',' << edge.at("edge_flops").dump() << ','
        << edge.at("edge_module_flops").dump() << ',' << r.at("cloud_flops").dump() << ','
        << edge.at("bytes_to_cloud").dump() << ',' << edge.at("bytes_to_edge").dump() << ','
        << edge.at("module_bytes").dump() << ',' << edge.at("control_bytes").dump() << '\n';
  }
  return out.str();
}

}  // namespace dlora
