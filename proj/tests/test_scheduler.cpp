// Copyright 2026 The dlora-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "dlora/rng.hpp"
#include "dlora/scheduler.hpp"

namespace dlora {
namespace {

using S = ModuleStatus;
constexpr double kInf = std::numeric_limits<double>::infinity();

std::vector<std::size_t> active_set(const std::vector<S>& s) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == S::Active) out.push_back(i);
  }
  return out;
}

/// Exhaustive oracle: the unique subset of size min(B, L) whose members all
/// outrank every non-member under (score desc, index asc).
std::vector<S> brute_force_top(const std::vector<double>& scores, std::size_t budget) {
  const std::size_t n = scores.size(), k = std::min(budget, n);
  auto outranks = [&](std::size_t a, std::size_t b) {
    return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
  };
  std::vector<S> found;
  for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
    if (static_cast<std::size_t>(__builtin_popcount(mask)) != k) continue;
    bool ok = true;
    for (std::size_t a = 0; a < n && ok; ++a) {
      for (std::size_t b = 0; b < n && ok; ++b) {
        if ((mask >> a & 1) && !(mask >> b & 1)) ok = outranks(a, b);
      }
    }
    if (ok) {
      EXPECT_TRUE(found.empty()) << "selection is not unique";
      found.assign(n, S::Killed);
      for (std::size_t i = 0; i < n; ++i) {
        if (mask >> i & 1) found[i] = S::Active;
      }
    }
  }
  return found;
}

TEST(Mode, StringRoundTrip) {
  for (Mode m : {Mode::FT, Mode::EK, Mode::KR}) EXPECT_EQ(mode_from_string(to_string(m)), m);
  EXPECT_EQ(to_string(Mode::KR), "kr");
  EXPECT_THROW(mode_from_string("xx"), InputError);
}

TEST(DiffRelative, Examples) {
  const std::vector<double> a{2, 4}, b{3, 3};
  EXPECT_EQ(diff_relative(a, a), (std::vector<double>{0, 0}));
  EXPECT_EQ(diff_relative(a, b), (std::vector<double>{0.5, 0.25}));
  EXPECT_EQ(diff_relative(std::vector<double>{0}, std::vector<double>{1}), (std::vector<double>{kInf}));
  EXPECT_EQ(diff_relative(std::vector<double>{0}, std::vector<double>{0}), (std::vector<double>{0}));
  EXPECT_THROW(diff_relative(a, std::vector<double>{1}), ShapeError);
}

TEST(SelectActive, Examples) {
  EXPECT_EQ(active_set(select_active(std::vector<double>{0.1, 0.5, 0.3, 0.2}, 2)),
            (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(select_active(std::vector<double>{0.1, 0.5}, 5), (std::vector<S>{S::Active, S::Active}));
  EXPECT_EQ(active_set(select_active(std::vector<double>(4, 0.7), 2)), (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(active_set(select_active(std::vector<double>{0.1, kInf, 0.3}, 1)), (std::vector<std::size_t>{1}));
}

TEST(SelectActive, MatchesExhaustiveOracle) {
  Rng rng(77);
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t n = 1 + rng.below(8);
    const std::size_t budget = 1 + rng.below(n + 2);
    std::vector<double> scores(n);
    // Few distinct values so that ties are common.
    for (auto& s : scores) s = rng.below(4) == 0 ? kInf : static_cast<double>(rng.below(5)) / 4.0;
    EXPECT_EQ(select_active(scores, budget), brute_force_top(scores, budget));
  }
}

TEST(SelectActiveAmong, OnlyEligibleModules) {
  const std::vector<double> scores{0.9, 0.1, 0.5, 0.7};
  const std::vector<S> eligible{S::Killed, S::Active, S::Active, S::Killed};
  EXPECT_EQ(active_set(select_active_among(scores, 1, eligible)), (std::vector<std::size_t>{2}));
  EXPECT_EQ(active_set(select_active_among(scores, 3, eligible)), (std::vector<std::size_t>{1, 2}));
}

TEST(CarryForward, Examples) {
  EXPECT_EQ(carry_forward(std::vector<double>{0, 0.4}, std::vector<double>{0.3, 0.2},
                          std::vector<S>{S::Killed, S::Active}),
            (std::vector<double>{0.3, 0.4}));
  const std::vector<double> d{0.1, 0.2};
  EXPECT_EQ(carry_forward(d, std::vector<double>{5, 6}, std::vector<S>{S::Active, S::Active}), d);
  EXPECT_THROW(carry_forward(d, std::vector<double>{5}, std::vector<S>{S::Active, S::Active}), ShapeError);
}

TEST(CarryForward, KilledScoreSurvivesManyEpochs) {
  std::vector<double> d{0.42, 0.1};
  const std::vector<S> status{S::Killed, S::Active};
  for (int e = 0; e < 6; ++e) d = carry_forward(std::vector<double>{0.0, 0.01 * e}, d, status);
  EXPECT_EQ(d[0], 0.42);
}

TEST(KrScheduler, ConstructionErrors) {
  EXPECT_THROW(KrScheduler(Mode::KR, 4, 0), InputError);
  EXPECT_THROW(KrScheduler(Mode::KR, 4, 5), InputError);
  EXPECT_THROW(KrScheduler(Mode::KR, 0, 1), InputError);
  EXPECT_NO_THROW(KrScheduler(Mode::EK, 4, 4));
}

TEST(KrScheduler, FtKeepsEverythingActiveAndRejectsTransitions) {
  KrScheduler s(Mode::FT, 3, 3);
  const std::vector<double> pre{1, 1, 1}, post{1.5, 1, 2};
  EXPECT_EQ(s.end_epoch(pre, post), std::vector<S>(3, S::Active));
  EXPECT_THROW(s.epoch_transition(pre, post), std::logic_error);
}

TEST(KrScheduler, KillAndReviveScenario) {
  KrScheduler s(Mode::KR, 3, 1);
  // Epoch 1: scores [0.95, 0.9, 0.1]; module 1 is killed with score 0.9.
  auto status = s.epoch_transition(std::vector<double>{1, 1, 1}, std::vector<double>{1.95, 1.9, 1.1});
  EXPECT_EQ(active_set(status), (std::vector<std::size_t>{0}));
  // Epoch 2: only module 0 moved (0.3); module 1 carries 0.9 and comes back.
  status = s.epoch_transition(std::vector<double>{2, 1.9, 1.1}, std::vector<double>{2.6, 1.9, 1.1});
  EXPECT_EQ(active_set(status), (std::vector<std::size_t>{1}));
  EXPECT_NEAR(s.last_scores()[1], 0.9, 1e-12);
  EXPECT_NEAR(s.last_scores()[0], 0.3, 1e-12);
  EXPECT_EQ(s.norms().size(), 4u);
  EXPECT_EQ(s.changes().size(), 2u);
}

TEST(KrScheduler, EkNeverRevives) {
  KrScheduler s(Mode::EK, 3, 1);
  auto status = s.epoch_transition(std::vector<double>{1, 1, 1}, std::vector<double>{1.95, 1.9, 1.1});
  EXPECT_EQ(active_set(status), (std::vector<std::size_t>{0}));
  status = s.epoch_transition(std::vector<double>{2, 1.9, 1.1}, std::vector<double>{2.6, 1.9, 1.1});
  EXPECT_EQ(active_set(status), (std::vector<std::size_t>{0}));
}

TEST(KrScheduler, BudgetCoversPool) {
  KrScheduler s(Mode::KR, 4, 4);
  Rng rng(1);
  for (int e = 0; e < 5; ++e) {
    std::vector<double> pre(4), post(4);
    for (std::size_t i = 0; i < 4; ++i) {
      pre[i] = rng.uniform();
      post[i] = rng.uniform();
    }
    EXPECT_EQ(s.epoch_transition(pre, post), std::vector<S>(4, S::Active));
  }
}

TEST(KrScheduler, RandomizedInvariants) {
  Rng rng(2024);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 1 + rng.below(8);
    const std::size_t budget = 1 + rng.below(n);
    KrScheduler kr(Mode::KR, n, budget), ek(Mode::EK, n, budget);
    std::vector<double> norms(n);
    for (auto& v : norms) v = rng.uniform() < 0.1 ? 0.0 : rng.uniform();
    std::size_t prev_ek = n;
    for (int e = 0; e < 6; ++e) {
      std::vector<double> kr_post(n), ek_post(n);
      for (std::size_t i = 0; i < n; ++i) {
        const double step = rng.uniform() < 0.2 ? 0.0 : rng.uniform();
        kr_post[i] = kr.status()[i] == S::Active ? norms[i] + step : norms[i];
        ek_post[i] = ek.status()[i] == S::Active ? norms[i] + step : norms[i];
      }
      const auto ek_before = ek.status();
      const auto kr_status = kr.epoch_transition(norms, kr_post);
      const auto ek_status = ek.epoch_transition(norms, ek_post);
      EXPECT_EQ(active_set(kr_status).size(), budget);
      for (std::size_t i = 0; i < n; ++i) {
        if (ek_before[i] == S::Killed) {
          EXPECT_EQ(ek_status[i], S::Killed);
        }
      }
      EXPECT_LE(active_set(ek_status).size(), prev_ek);
      EXPECT_EQ(active_set(ek_status).size(), budget);
      prev_ek = active_set(ek_status).size();
      for (double v : kr.last_scores()) EXPECT_GE(v, 0.0);
      norms = kr_post;
    }
    EXPECT_EQ(kr.norms().size(), 12u);
    EXPECT_EQ(kr.changes().size(), 6u);
  }
}

TEST(KrScheduler, SelectionIsScaleInvariant) {
  Rng rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng.below(7);
    const std::size_t budget = 1 + rng.below(n);
    std::vector<double> pre(n), post(n);
    for (std::size_t i = 0; i < n; ++i) {
      pre[i] = 0.5 + rng.uniform();
      post[i] = pre[i] * (1.0 + 0.5 * rng.uniform());
    }
    const auto base = select_active(diff_relative(pre, post), budget);
    for (double c : {0.25, 3.7, 1e3}) {
      std::vector<double> sp(n), sq(n);
      for (std::size_t i = 0; i < n; ++i) {
        sp[i] = c * pre[i];
        sq[i] = c * post[i];
      }
      EXPECT_EQ(select_active(diff_relative(sp, sq), budget), base);
    }
  }
}

}  // namespace
}  // namespace dlora
