// Copyright 2026 The dlora-desk Authors
// SPDX-License-Identifier: Apache-2.0

// Runs the eight acceptance criteria and prints one PASS/FAIL line each.
// Exit status is the number of failed criteria.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <spdlog/spdlog.h>

#include "dlora/checkpoint.hpp"
#include "dlora/kernels.hpp"
#include "dlora/runtime.hpp"
#include "support.hpp"

namespace {

using namespace dlora;
using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + what;
    }
  }
  void note(const std::string& what) { detail += (detail.empty() ? "" : "; ") + what; }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

RunConfig desk_run(const std::string& name) {
  RunConfig c;
  c.seed = 42;
  c.output = test::temp_path("acceptance-" + name + ".ndjson").string();
  return c;
}

// --- 1 -------------------------------------------------------------------------------

Outcome split_equivalence() {
  Outcome o;
  const auto t0 = Clock::now();
  RunConfig c = desk_run("c1");
  c.batch_size = 8;
  c.train_samples = 80;  // 10 steps per epoch: warm-up + 4 epochs = 50 steps
  c.mode = Mode::FT;
  const auto split = run_finetune(c);
  const auto ref = run_reference(c);
  const double secs = seconds_since(t0);
  o.require(split.losses.size() == 50, "expected 50 steps, got " + std::to_string(split.losses.size()));
  std::size_t equal = 0;
  for (std::size_t i = 0; i < std::min(split.losses.size(), ref.losses.size()); ++i) {
    std::uint64_t a = 0, b = 0;
    std::memcpy(&a, &split.losses[i], 8);
    std::memcpy(&b, &ref.losses[i], 8);
    equal += a == b;
  }
  o.require(equal == ref.losses.size() && split.losses.size() == ref.losses.size(),
            std::to_string(equal) + " of " + std::to_string(ref.losses.size()) + " losses bit-identical");
  o.require(secs < 120.0, "took " + fmt("%.1f s", secs));
  o.note(std::to_string(equal) + "/50 steps bit-identical, " + fmt("%.1f s", secs));
  return o;
}

// --- 2 -------------------------------------------------------------------------------

Outcome gradient_check() {
  Outcome o;
  const auto t0 = Clock::now();
  ModelConfig mc;
  mc.vocab = 12;
  mc.d_model = 16;
  mc.n_heads = 2;
  mc.d_ff = 32;
  mc.n_layers = 2;
  mc.max_seq = 8;
  mc.precision = Precision::F64;
  mc.seed = 5;
  const auto backbone = Backbone<double>::init(mc);
  const SeqShape shape{2, 5};
  const std::vector<std::int32_t> toks{1, 5, 2, 9, 0, 3, 7, 7, 11, 4}, targets{5, 2, 9, 0, 3, 7, 7, 1, 4, 6};
  const std::vector<std::uint8_t> mask{1, 1, 1, 1, 1, 0, 1, 1, 1, 1};
  double worst = 0.0;
  std::size_t tensors = 0;
  for (PeftKind kind : {PeftKind::Lora, PeftKind::Adapter}) {
    PeftConfig pc;
    pc.kind = kind;
    pc.rank = 3;
    pc.adapter_dim = 4;
    pc.alpha = 1.5;
    auto pool = init_pool<double>(pc, mc, 9);
    std::uint64_t seed = 1000;
    // Nonzero everywhere, so no gradient path is trivially zero.
    for (auto& m : pool) {
      for (auto* t : m.params()) *t = test::random_tensor(seed++, t->dims(), -0.3, 0.3);
    }
    auto loss_of = [&] {
      PeftTrainer<double> tr(pool, AdamWConfig{}, FrozenPolicy::SkipFrozen);
      tr.begin_step();
      LocalPeftHook<double> hook(tr);
      const auto logits = forward_backbone<double>(toks, shape, backbone, &hook);
      return kernels::cross_entropy(logits.reshaped({shape.tokens(), mc.vocab}), targets, mask).loss;
    };
    PeftTrainer<double> tr(pool, AdamWConfig{}, FrozenPolicy::SkipFrozen);
    tr.set_apply_updates(false);
    tr.begin_step();
    LocalPeftHook<double> hook(tr);
    const auto h0 = embed<double>(toks, shape, backbone.embedding, mc);
    TrunkCache<double> cache;
    const auto logits = forward_trunk<double>(h0, backbone.trunk, mc, shape, &hook, &cache);
    const auto ce = kernels::cross_entropy(logits.reshaped({shape.tokens(), mc.vocab}), targets, mask);
    backward_trunk<double>(cache, ce.dlogits, backbone.trunk, mc, shape, &hook,
                           static_cast<TrunkGrads<double>*>(nullptr));
    for (std::size_t l = 0; l < pool.size(); ++l) {
      auto params = pool[l].params();
      for (std::size_t k = 0; k < params.size(); ++k) {
        const auto numeric = test::numeric_grad(*params[k], loss_of);
        const auto analytic = tr.last_grads()[l][k].reshaped(numeric.dims());
        double num = 0.0, den = 0.0;
        for (std::size_t i = 0; i < numeric.size(); ++i) {
          num += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
          den += numeric[i] * numeric[i];
        }
        const double rel = std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
        worst = std::max(worst, rel);
        ++tensors;
        o.require(rel <= 1e-5, "layer " + std::to_string(l) + " tensor " + std::to_string(k) + " rel " +
                                   fmt("%.2e", rel));
      }
    }
  }
  const double secs = seconds_since(t0);
  o.require(secs < 60.0, "took " + fmt("%.1f s", secs));
  o.note(std::to_string(tensors) + " parameter tensors, worst relative error " + fmt("%.2e", worst) + ", " +
         fmt("%.1f s", secs));
  return o;
}

// --- 3 -------------------------------------------------------------------------------

std::vector<ModuleStatus> brute_force_top(const std::vector<double>& scores, std::size_t budget) {
  const std::size_t n = scores.size(), k = std::min(budget, n);
  for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
    if (static_cast<std::size_t>(__builtin_popcount(mask)) != k) continue;
    bool ok = true;
    for (std::size_t a = 0; a < n && ok; ++a) {
      for (std::size_t b = 0; b < n && ok; ++b) {
        if ((mask >> a & 1) && !(mask >> b & 1)) {
          ok = scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
        }
      }
    }
    if (ok) {
      std::vector<ModuleStatus> out(n, ModuleStatus::Killed);
      for (std::size_t i = 0; i < n; ++i) {
        if (mask >> i & 1) out[i] = ModuleStatus::Active;
      }
      return out;
    }
  }
  return {};
}

Outcome budget_invariant() {
  Outcome o;
  for (std::uint32_t b : {2u, 4u}) {
    RunConfig c = desk_run("c3");
    c.mode = Mode::KR;
    c.budget = b;
    c.epochs = 4;
    c.batch_size = 8;
    c.train_samples = 32;
    c.eval_samples = 8;
    const auto res = run_finetune(c);
    for (std::size_t e = 1; e < res.epochs.size(); ++e) {
      o.require(count_active(res.epochs[e].status) == b,
                "B=" + std::to_string(b) + " epoch " + std::to_string(e) + " had " +
                    std::to_string(count_active(res.epochs[e].status)) + " active");
    }
    o.require(count_active(res.epochs.back().outcome.next_status) == b, "final status violates the budget");
  }
  Rng rng(3);
  std::size_t agree = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.below(8);
    const std::size_t budget = 1 + rng.below(n);
    std::vector<double> scores(n);
    for (auto& s : scores) {
      const auto pick = rng.below(6);
      s = pick == 0 ? std::numeric_limits<double>::infinity() : pick == 1 ? 0.0 : rng.uniform();
    }
    if (rng.below(4) == 0 && n > 1) scores[1] = scores[0];
    agree += select_active(scores, budget) == brute_force_top(scores, budget);
  }
  o.require(agree == 1000, std::to_string(agree) + "/1000 selections match the exhaustive oracle");
  o.note("B in {2,4} hold every epoch; " + std::to_string(agree) + "/1000 random selections match");
  return o;
}

// --- 4 -------------------------------------------------------------------------------

struct EpochCost {
  std::uint64_t module_bytes, module_flops, base_bytes, edge_flops;
};

EpochCost epoch_cost(Mode mode, std::uint32_t budget, std::size_t epoch) {
  RunConfig c = desk_run("c4");
  c.mode = mode;
  c.budget = budget;
  c.epochs = 2;
  c.batch_size = 8;
  c.train_samples = 32;
  c.eval_samples = 8;
  c.policy = FrozenPolicy::SkipFrozen;
  const auto t = run_finetune(c).epochs.at(epoch).outcome.edge;
  return {t.module_bytes, t.edge_module_flops, t.bytes_to_cloud + t.bytes_to_edge - t.module_bytes - t.control_bytes,
          t.edge_flops};
}

Outcome linear_scaling() {
  Outcome o;
  for (std::size_t epoch : {1u, 2u}) {
    const EpochCost ft = epoch_cost(Mode::FT, 8, epoch);
    const EpochCost kr = epoch_cost(Mode::KR, 4, epoch);
    o.require(2 * kr.module_bytes == ft.module_bytes, "module bytes KR " + std::to_string(kr.module_bytes) +
                                                          " vs FT " + std::to_string(ft.module_bytes));
    o.require(2 * kr.module_flops == ft.module_flops, "module FLOPs KR " + std::to_string(kr.module_flops) +
                                                          " vs FT " + std::to_string(ft.module_flops));
    o.require(kr.base_bytes == ft.base_bytes, "budget-independent traffic differs");
    if (epoch == 1) {
      o.note("epoch 1 module bytes KR/FT = " + std::to_string(kr.module_bytes) + "/" +
             std::to_string(ft.module_bytes) + ", module FLOPs " + std::to_string(kr.module_flops) + "/" +
             std::to_string(ft.module_flops));
    }
  }
  // Edge cost per epoch is c0 + c1 * |Active|: fit on |Active| in {1, 2},
  // check the rest, and require the module part to vanish at zero.
  std::vector<EpochCost> pts;
  for (std::uint32_t b = 1; b <= 4; ++b) pts.push_back(epoch_cost(Mode::KR, b, 1));
  pts.push_back(epoch_cost(Mode::FT, 8, 1));
  const std::vector<std::int64_t> active{1, 2, 3, 4, 8};
  auto affine = [&](auto field, const std::string& name, bool through_origin) {
    const std::int64_t c1 = static_cast<std::int64_t>(field(pts[1])) - static_cast<std::int64_t>(field(pts[0]));
    const std::int64_t c0 = static_cast<std::int64_t>(field(pts[0])) - c1;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      o.require(static_cast<std::int64_t>(field(pts[i])) == c0 + c1 * active[i],
                name + " off the line at |Active|=" + std::to_string(active[i]));
    }
    if (through_origin) o.require(c0 == 0, name + " has a nonzero intercept");
    o.note(name + " = " + std::to_string(c0) + " + " + std::to_string(c1) + "*|Active|");
  };
  affine([](const EpochCost& e) { return e.module_bytes; }, "module bytes", true);
  affine([](const EpochCost& e) { return e.module_flops; }, "module FLOPs", true);
  affine([](const EpochCost& e) { return e.edge_flops; }, "edge FLOPs", false);
  for (const auto& p : pts) o.require(p.base_bytes == pts[0].base_bytes, "base traffic depends on the budget");
  return o;
}

// --- 5 -------------------------------------------------------------------------------

Outcome quantization() {
  Outcome o;
  std::uint64_t payload[2] = {0, 0}, module[2] = {0, 0};
  for (int i = 0; i < 2; ++i) {
    RunConfig c = desk_run("c5");
    c.quant_bits = i == 0 ? 32 : 8;
    c.mode = Mode::KR;
    c.budget = 4;
    c.epochs = 1;
    c.batch_size = 8;
    c.train_samples = 32;
    c.eval_samples = 8;
    const auto t = run_finetune(c).edge_totals;
    payload[i] = t.bytes_to_cloud + t.bytes_to_edge - t.control_bytes;
    module[i] = t.module_bytes;
  }
  const double ratio = static_cast<double>(payload[0]) / static_cast<double>(payload[1]);
  const double module_ratio = static_cast<double>(module[0]) / static_cast<double>(module[1]);
  o.require(ratio >= 3.9, "activation/gradient byte ratio " + fmt("%.3f", ratio));
  o.require(module_ratio >= 3.9, "module byte ratio " + fmt("%.3f", module_ratio));

  Rng rng(55);
  double worst = 0.0;
  std::size_t violations = 0;
  for (int i = 0; i < 10000; ++i) {
    const std::size_t n = 1 + rng.below(256);
    const double scale = std::pow(10.0, -4.0 + 8.0 * rng.uniform());
    Tensor<float> t(Dims{n});
    for (std::size_t k = 0; k < n; ++k) t[k] = static_cast<float>(scale * (2.0 * rng.uniform() - 1.0));
    if (i % 1000 == 0) t.fill(0.0f);
    const auto back = dequantize<float>(quantize(t));
    float max_abs = 0.0f;
    for (std::size_t k = 0; k < n; ++k) max_abs = std::max(max_abs, std::fabs(t[k]));
    for (std::size_t k = 0; k < n; ++k) {
      const double err = std::fabs(static_cast<double>(back[k]) - static_cast<double>(t[k]));
      const double bound = static_cast<double>(max_abs) / 254.0;
      if (err > bound) ++violations;
      if (max_abs > 0) worst = std::max(worst, err / bound);
    }
  }
  o.require(violations == 0, std::to_string(violations) + " elements exceed max|x|/254");
  o.note("payload ratio " + fmt("%.3f", ratio) + ", module ratio " + fmt("%.3f", module_ratio) +
         ", worst error " + fmt("%.3f", worst) + " of the bound over 10^4 tensors");
  return o;
}

// --- 6 -------------------------------------------------------------------------------

Outcome kr_dynamics() {
  Outcome o;
  const auto t0 = Clock::now();
  const std::string bb = test::temp_path("acceptance-pretrained.dlbk").string();
  {
    PretrainOptions opt;
    auto pretrained = pretrain_backbone<float>(Backbone<float>::init(ModelConfig{}), opt);
    save_backbone(pretrained, bb);
  }
  double final_loss[3] = {0, 0, 0};
  const Mode modes[3] = {Mode::FT, Mode::KR, Mode::EK};
  for (int i = 0; i < 3; ++i) {
    RunConfig c = desk_run("c6");
    c.backbone = bb;
    c.task = Task::Copy;
    c.mode = modes[i];
    c.budget = c.model.n_layers / 2;
    c.epochs = 4;
    final_loss[i] = run_finetune(c).epochs.back().mean_loss;
  }
  const double ft = final_loss[0], kr = final_loss[1], ek = final_loss[2];
  o.require(kr <= 1.2 * ft, "KR final loss " + fmt("%.4f", kr) + " > 1.2 x FT " + fmt("%.4f", ft));
  o.require(ek >= kr, "EK final loss " + fmt("%.4f", ek) + " < KR " + fmt("%.4f", kr));
  o.note("final loss FT " + fmt("%.5f", ft) + ", KR " + fmt("%.5f", kr) + ", EK " + fmt("%.5f", ek) + ", " +
         fmt("%.0f s", seconds_since(t0)));
  return o;
}

// --- 7 -------------------------------------------------------------------------------

Outcome protocol_robustness() {
  Outcome o;
  RunConfig c = desk_run("c7-local");
  c.mode = Mode::KR;
  c.budget = 4;
  c.epochs = 2;
  c.batch_size = 8;
  c.train_samples = 32;
  c.eval_samples = 8;
  std::vector<std::vector<std::uint8_t>> frames;
  run_finetune(c, RunHooks{[&](Direction, std::span<const std::uint8_t> f) {
                 frames.emplace_back(f.begin(), f.end());
               }});
  RunConfig tcp = c;
  tcp.transport = TransportKind::Tcp;
  tcp.port = 0;
  tcp.output = test::temp_path("acceptance-c7-tcp.ndjson").string();
  run_finetune(tcp);
  const std::string a = slurp(c.output), b = slurp(tcp.output);
  o.require(!a.empty() && a == b, "local and tcp metrics logs differ");

  // Mutations of captured session frames: magic corruption and truncation
  // must be rejected as protocol errors, anything else must decode or be
  // rejected the same way.
  Rng rng(77);
  std::size_t rejected = 0, decoded = 0, crashed = 0, missed = 0;
  for (int i = 0; i < 1000; ++i) {
    auto bytes = frames[rng.below(frames.size())];
    const int kind = static_cast<int>(rng.below(3));
    if (kind == 0) {
      bytes[rng.below(4)] ^= static_cast<std::uint8_t>(1 + rng.below(255));
    } else if (kind == 1) {
      bytes.resize(rng.below(bytes.size()));
    } else {
      for (int k = 0; k < 3; ++k) bytes[rng.below(bytes.size())] = static_cast<std::uint8_t>(rng.below(256));
    }
    try {
      decode_frame(bytes);
      ++decoded;
      if (kind != 2) ++missed;
    } catch (const ProtocolError&) {
      ++rejected;
    } catch (...) {
      ++crashed;
    }
  }
  o.require(crashed == 0, std::to_string(crashed) + " mutated frames raised a non-protocol error");
  o.require(missed == 0, std::to_string(missed) + " corrupted or truncated frames were accepted");

  // A live cloud aborts its session on a corrupted frame instead of hanging.
  std::size_t aborted = 0;
  for (int variant = 0; variant < 2; ++variant) {
    auto [edge_t, cloud_t] = make_local_pair();
    CostLedger el, cl;
    Channel edge(*edge_t, el, Node::Edge), cloud_ch(*cloud_t, cl, Node::Cloud);
    const auto backbone = Backbone<float>::init(c.model);
    std::thread server([&] {
      try {
        CloudNode<float>(c.model, backbone.trunk, cloud_ch, cl).serve();
      } catch (const ProtocolError&) {
        ++aborted;
      } catch (...) {
      }
    });
    edge.send(ConfigMsg{c.model, c.peft, Mode::FT, c.model.n_layers, 32, FrozenPolicy::SkipFrozen});
    auto bad = encode_frame(EpochEndMsg{0, 0});
    if (variant == 0) {
      bad[1] = 'X';
    } else {
      bad.resize(bad.size() - 3);
    }
    edge_t->send(bad);
    server.join();
  }
  o.require(aborted == 2, "live session did not abort with a protocol error");
  o.note("logs identical (" + std::to_string(a.size()) + " bytes); fuzz: " + std::to_string(rejected) +
         " rejected, " + std::to_string(decoded) + " decoded, " + std::to_string(crashed) + " crashes");
  return o;
}

// --- 8 -------------------------------------------------------------------------------

Outcome privacy_audit() {
  Outcome o;
  RunConfig c = desk_run("c8");
  c.mode = Mode::KR;
  c.budget = 4;
  c.epochs = 4;
  c.batch_size = 8;
  c.train_samples = 32;
  c.eval_samples = 8;
  std::vector<std::vector<std::uint8_t>> frames;
  run_finetune(c, RunHooks{[&](Direction, std::span<const std::uint8_t> f) {
                 frames.emplace_back(f.begin(), f.end());
               }});
  auto sequences = gen_dataset(c.task, c.seed, c.train_samples, c.model.vocab, c.seq_len());
  const auto heldout = gen_dataset(c.task, derive_seed(c.seed, 202), c.eval_samples, c.model.vocab, c.seq_len());
  sequences.insert(sequences.end(), heldout.begin(), heldout.end());

  std::vector<std::vector<std::uint8_t>> needles;
  for (const auto& ex : sequences) {
    for (const auto* ids : {&ex.inputs, &ex.targets}) {
      std::vector<std::uint8_t> u8(ids->begin(), ids->end());
      std::vector<std::uint8_t> i32(ids->size() * 4), f32(ids->size() * 4);
      std::memcpy(i32.data(), ids->data(), i32.size());
      for (std::size_t k = 0; k < ids->size(); ++k) {
        const float v = static_cast<float>((*ids)[k]);
        std::memcpy(f32.data() + 4 * k, &v, 4);
      }
      needles.push_back(std::move(u8));
      needles.push_back(std::move(i32));
      needles.push_back(std::move(f32));
    }
  }
  std::size_t leaks = 0, integer_tensors = 0, tensors = 0;
  for (const auto& f : frames) {
    for (const auto& n : needles) leaks += std::search(f.begin(), f.end(), n.begin(), n.end()) != f.end();
    const auto m = decode_frame(f);
    auto inspect = [&](const WireTensor& w) {
      ++tensors;
      const auto t = from_wire<double>(w);
      // Constant tensors (zero deltas before the first update) carry no ids.
      bool all_ids = t.size() > 1;
      bool varied = false;
      for (std::size_t i = 0; i < t.size() && all_ids; ++i) {
        all_ids = t[i] == std::floor(t[i]) && t[i] >= 0 && t[i] < c.model.vocab;
        varied = varied || t[i] != t[0];
      }
      integer_tensors += all_ids && varied;
    };
    std::visit(
        [&](const auto& msg) {
          using M = std::decay_t<decltype(msg)>;
          if constexpr (std::is_same_v<M, FwdActivationMsg>) inspect(msg.tensor);
          if constexpr (std::is_same_v<M, FwdDeltaMsg> || std::is_same_v<M, BwdGradMsg>) {
            for (const auto& w : msg.tensors) inspect(w);
          }
          if constexpr (std::is_same_v<M, LogitsMsg> || std::is_same_v<M, LossGradMsg> ||
                        std::is_same_v<M, BwdDeltaGradMsg>) {
            inspect(msg.tensor);
          }
        },
        m);
  }
  o.require(leaks == 0, std::to_string(leaks) + " token or label sequences found in frames");
  o.require(integer_tensors == 0, std::to_string(integer_tensors) + " tensors look like token ids");
  o.note(std::to_string(frames.size()) + " frames, " + std::to_string(tensors) + " tensors, " +
         std::to_string(needles.size()) + " sequence encodings searched, no leaks");
  return o;
}

}  // namespace

int main() {
  spdlog::set_level(spdlog::level::warn);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"C1 split-vs-monolithic equivalence", split_equivalence},
      {"C2 gradient correctness", gradient_check},
      {"C3 budget invariant", budget_invariant},
      {"C4 linear cost scaling", linear_scaling},
      {"C5 quantization", quantization},
      {"C6 kill-and-revive dynamics", kr_dynamics},
      {"C7 protocol robustness and equivalence", protocol_robustness},
      {"C8 privacy invariant", privacy_audit},
  };
  int failed = 0;
  for (const auto& [name, run] : criteria) {
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    failed += !o.pass;
    std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  return failed;
}
