// Copyright 2026 The dlora-desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "dlora/peft.hpp"

namespace dlora {

enum class Mode : std::uint8_t { FT = 0, EK = 1, KR = 2 };

std::string to_string(Mode m);
Mode mode_from_string(const std::string& s);

inline constexpr double kMaxChange = std::numeric_limits<double>::infinity();

/// |prev - cur| / prev per module; 0/0 is 0 and x/0 is +inf.
std::vector<double> diff_relative(std::span<const double> prev, std::span<const double> cur);

/// Keeps the min(B, L) largest scores Active; the lower index wins ties.
std::vector<ModuleStatus> select_active(std::span<const double> scores, std::size_t budget);

/// Same ranking restricted to `eligible` modules; keeps min(B, |eligible|).
std::vector<ModuleStatus> select_active_among(std::span<const double> scores, std::size_t budget,
                                              std::span<const ModuleStatus> eligible);

/// Killed modules take their previous score, active ones the new one.
std::vector<double> carry_forward(std::span<const double> d_new, std::span<const double> d_prev,
                                  std::span<const ModuleStatus> status);

/// Cloud-side kill/revive state. Epoch 0 is the warm-up epoch, which runs with
/// every module Active; each completed epoch contributes one pre and one post
/// row to N and one row to D.
class KrScheduler {
 public:
  KrScheduler(Mode mode, std::size_t n_modules, std::size_t budget);

  Mode mode() const noexcept { return mode_; }
  std::size_t budget() const noexcept { return budget_; }
  std::size_t epochs_done() const noexcept { return d_.size(); }
  const std::vector<ModuleStatus>& status() const noexcept { return status_; }
  const std::vector<std::vector<double>>& norms() const noexcept { return n_; }
  const std::vector<std::vector<double>>& changes() const noexcept { return d_; }

  /// Rank-and-select at an epoch boundary. Throws std::logic_error in FT mode.
  std::vector<ModuleStatus> epoch_transition(std::span<const double> norms_pre,
                                             std::span<const double> norms_post);

  /// Mode-dispatching boundary handler: FT records the rows and keeps every
  /// module Active, EK/KR call epoch_transition.
  std::vector<ModuleStatus> end_epoch(std::span<const double> norms_pre, std::span<const double> norms_post);

  /// Scores that drove the most recent decision (the last D row).
  std::vector<double> last_scores() const;

 private:
  std::vector<double> record(std::span<const double> pre, std::span<const double> post);

  Mode mode_;
  std::size_t size_;
  std::size_t budget_;
  std::vector<ModuleStatus> status_;
  std::vector<std::vector<double>> n_;
  std::vector<std::vector<double>> d_;
};

}  // namespace dlora
