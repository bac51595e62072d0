// Copyright 2026 The dlora-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "dlora/scheduler.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace dlora {

std::string to_string(Mode m) {
  switch (m) {
    case Mode::FT: return "ft";
    case Mode::EK: return "ek";
    case Mode::KR: return "kr";
  }
  return "?";
}

Mode mode_from_string(const std::string& s) {
  if (s == "ft") return Mode::FT;
  if (s == "ek") return Mode::EK;
  if (s == "kr") return Mode::KR;
  throw InputError("unknown mode '" + s + "' (expected ft, ek or kr)");
}

namespace {

void check_lengths(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw ShapeError(std::string(what) + ": length mismatch " + std::to_string(a) + " vs " + std::to_string(b));
  }
}

}  // namespace

std::vector<double> diff_relative(std::span<const double> prev, std::span<const double> cur) {
  check_lengths(prev.size(), cur.size(), "diff_relative");
  std::vector<double> out(prev.size());
  for (std::size_t i = 0; i < prev.size(); ++i) {
    if (prev[i] < 0.0 || cur[i] < 0.0) throw InputError("diff_relative: norms must be non-negative");
    if (prev[i] == 0.0) {
      out[i] = cur[i] == 0.0 ? 0.0 : kMaxChange;
    } else {
      out[i] = std::fabs(prev[i] - cur[i]) / prev[i];
    }
  }
  return out;
}

std::vector<ModuleStatus> select_active_among(std::span<const double> scores, std::size_t budget,
                                              std::span<const ModuleStatus> eligible) {
  check_lengths(scores.size(), eligible.size(), "select_active");
  if (budget < 1) throw InputError("select_active: budget must be >= 1");
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (eligible[i] == ModuleStatus::Active) order.push_back(i);
  }
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<ModuleStatus> out(scores.size(), ModuleStatus::Killed);
  for (std::size_t i = 0; i < std::min(budget, order.size()); ++i) out[order[i]] = ModuleStatus::Active;
  return out;
}

std::vector<ModuleStatus> select_active(std::span<const double> scores, std::size_t budget) {
  const std::vector<ModuleStatus> all(scores.size(), ModuleStatus::Active);
  return select_active_among(scores, budget, all);
}

std::vector<double> carry_forward(std::span<const double> d_new, std::span<const double> d_prev,
                                  std::span<const ModuleStatus> status) {
  check_lengths(d_new.size(), d_prev.size(), "carry_forward");
  check_lengths(d_new.size(), status.size(), "carry_forward");
  std::vector<double> out(d_new.size());
  for (std::size_t i = 0; i < d_new.size(); ++i) {
    out[i] = status[i] == ModuleStatus::Killed ? d_prev[i] : d_new[i];
  }
  return out;
}

KrScheduler::KrScheduler(Mode mode, std::size_t n_modules, std::size_t budget)
    : mode_(mode), size_(n_modules), budget_(budget), status_(n_modules, ModuleStatus::Active) {
  if (n_modules < 1) throw InputError("scheduler: need at least one module");
  if (budget < 1 || budget > n_modules) {
    throw InputError("scheduler: budget must be in [1, " + std::to_string(n_modules) + "]");
  }
}

std::vector<double> KrScheduler::record(std::span<const double> pre, std::span<const double> post) {
  check_lengths(pre.size(), size_, "scheduler norms");
  check_lengths(post.size(), size_, "scheduler norms");
  n_.emplace_back(pre.begin(), pre.end());
  n_.emplace_back(post.begin(), post.end());
  return diff_relative(pre, post);
}

std::vector<ModuleStatus> KrScheduler::epoch_transition(std::span<const double> norms_pre,
                                                        std::span<const double> norms_post) {
  if (mode_ == Mode::FT) throw std::logic_error("scheduler: epoch_transition called in FT mode");
  std::vector<double> d_new = record(norms_pre, norms_post);
  if (mode_ == Mode::KR) {
    std::vector<double> scores = d_.empty() ? d_new : carry_forward(d_new, d_.back(), status_);
    status_ = select_active(scores, budget_);
    d_.push_back(std::move(scores));
  } else {
    status_ = select_active_among(d_new, budget_, status_);
    d_.push_back(std::move(d_new));
  }
  return status_;
}

std::vector<ModuleStatus> KrScheduler::end_epoch(std::span<const double> norms_pre,
                                                 std::span<const double> norms_post) {
  if (mode_ != Mode::FT) return epoch_transition(norms_pre, norms_post);
  d_.push_back(record(norms_pre, norms_post));
  return status_;
}

std::vector<double> KrScheduler::last_scores() const {
  return d_.empty() ? std::vector<double>(size_, 0.0) : d_.back();
}

}  // namespace dlora
