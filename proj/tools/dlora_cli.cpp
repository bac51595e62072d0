// Copyright 2026 The dlora-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "dlora/checkpoint.hpp"
#include "dlora/config.hpp"
#include "dlora/metrics.hpp"
#include "dlora/runtime.hpp"

namespace {

using dlora::InputError;

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("dlora");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%l] %v");
  const char* env = std::getenv("DLORA_LOG_LEVEL");
  const std::string level = env ? env : "info";
  if (level == "error") {
    spdlog::set_level(spdlog::level::err);
  } else if (level == "debug") {
    spdlog::set_level(spdlog::level::debug);
  } else {
    spdlog::set_level(spdlog::level::info);
    if (level != "info") spdlog::warn("unknown DLORA_LOG_LEVEL '{}', using info", level);
  }
}

struct ModelFlags {
  std::optional<std::uint32_t> vocab, d_model, n_heads, d_ff, n_layers, max_seq, precision;
  std::optional<std::uint64_t> seed;

  void add(CLI::App* app) {
    app->add_option("--vocab", vocab, "vocabulary size");
    app->add_option("--d-model", d_model, "model width");
    app->add_option("--n-heads", n_heads, "attention heads");
    app->add_option("--d-ff", d_ff, "MLP hidden width");
    app->add_option("--n-layers", n_layers, "decoder blocks");
    app->add_option("--max-seq", max_seq, "maximum sequence length");
    app->add_option("--precision", precision, "32 or 64")->check(CLI::IsMember({32, 64}));
    app->add_option("--model-seed", seed, "backbone initialization seed");
  }

  bool any() const { return vocab || d_model || n_heads || d_ff || n_layers || max_seq || precision || seed; }

  void apply(dlora::ModelConfig& m) const {
    if (vocab) m.vocab = *vocab;
    if (d_model) m.d_model = *d_model;
    if (n_heads) m.n_heads = *n_heads;
    if (d_ff) m.d_ff = *d_ff;
    if (n_layers) m.n_layers = *n_layers;
    if (max_seq) m.max_seq = *max_seq;
    if (precision) m.precision = static_cast<dlora::Precision>(*precision);
    if (seed) m.seed = *seed;
  }
};

struct RunFlags {
  std::string config_path;
  ModelFlags model;
  std::optional<std::string> peft, mode, frozen_policy, transport, host, task, backbone, peft_in, peft_out, output;
  std::optional<std::uint32_t> rank, adapter_dim, budget, epochs, warmup_steps, batch_size, quant_bits,
      train_samples, eval_samples;
  std::optional<std::uint16_t> port;
  std::optional<double> alpha, lr, weight_decay;
  std::optional<std::uint64_t> seed;

  void add(CLI::App* app) {
    app->add_option("--config", config_path, "JSON run config; flags override it");
    model.add(app);
    app->add_option("--peft", peft, "lora or adapter");
    app->add_option("--rank", rank, "LoRA rank");
    app->add_option("--adapter-dim", adapter_dim, "adapter bottleneck width");
    app->add_option("--alpha", alpha, "LoRA scaling");
    app->add_option("--mode", mode, "ft, ek or kr");
    app->add_option("--budget", budget, "active modules per epoch (ek/kr)");
    app->add_option("--epochs", epochs, "main epochs after warm-up");
    app->add_option("--warmup-steps", warmup_steps, "warm-up steps (0: one epoch)");
    app->add_option("--batch-size", batch_size, "sequences per step");
    app->add_option("--lr", lr, "peak learning rate");
    app->add_option("--weight-decay", weight_decay, "AdamW decoupled weight decay");
    app->add_option("--quant-bits", quant_bits, "8 or 32");
    app->add_option("--frozen-policy", frozen_policy, "skip_frozen or compute_frozen_on_edge");
    app->add_option("--transport", transport, "local or tcp");
    app->add_option("--host", host, "cloud host");
    app->add_option("--port", port, "cloud port");
    app->add_option("--task", task, "copy, reverse or charlm");
    app->add_option("--seed", seed, "run seed");
    app->add_option("--train-samples", train_samples, "training sequences");
    app->add_option("--eval-samples", eval_samples, "held-out sequences");
    app->add_option("--backbone", backbone, "backbone checkpoint (DLBK)");
    app->add_option("--peft-in", peft_in, "PEFT checkpoint to start from (DLPF)");
    app->add_option("--peft-out", peft_out, "write the trained PEFT pool here (DLPF)");
    app->add_option("--output", output, "metrics log path (NDJSON)");
  }

  dlora::RunConfig resolve() const {
    dlora::RunConfig c = config_path.empty() ? dlora::RunConfig{} : dlora::load_run_config(config_path);
    if (backbone) c.backbone = *backbone;
    if (!c.backbone.empty()) c.model = dlora::peek_backbone_config(c.backbone);
    model.apply(c.model);
    if (peft) c.peft.kind = dlora::peft_kind_from_string(*peft);
    if (rank) c.peft.rank = *rank;
    if (adapter_dim) c.peft.adapter_dim = *adapter_dim;
    if (alpha) c.peft.alpha = *alpha;
    if (mode) c.mode = dlora::mode_from_string(*mode);
    if (budget) c.budget = *budget;
    if (epochs) c.epochs = *epochs;
    if (warmup_steps) c.warmup_steps = *warmup_steps;
    if (batch_size) c.batch_size = *batch_size;
    if (lr) c.lr = *lr;
    if (weight_decay) c.weight_decay = *weight_decay;
    if (quant_bits) {
      if (*quant_bits > 255) throw InputError("quant bits must be 8 or 32");
      c.quant_bits = static_cast<std::uint8_t>(*quant_bits);
    }
    if (frozen_policy) c.policy = dlora::frozen_policy_from_string(*frozen_policy);
    if (transport) c.transport = dlora::transport_from_string(*transport);
    if (host) c.host = *host;
    if (port) c.port = *port;
    if (task) c.task = dlora::task_from_string(*task);
    if (seed) c.seed = *seed;
    if (train_samples) c.train_samples = *train_samples;
    if (eval_samples) c.eval_samples = *eval_samples;
    if (peft_in) c.peft_in = *peft_in;
    if (peft_out) c.peft_out = *peft_out;
    if (output) c.output = *output;
    c.validate();
    return c;
  }
};

template <typename T>
void pretrain_and_save(const dlora::ModelConfig& model, const std::string& init_path,
                       const dlora::PretrainOptions& opt, const std::string& out) {
  dlora::Backbone<T> b =
      init_path.empty() ? dlora::Backbone<T>::init(model) : dlora::load_backbone<T>(init_path);
  const std::size_t every = std::max<std::size_t>(1, opt.steps / 10);
  b = dlora::pretrain_backbone<T>(std::move(b), opt, [&](std::size_t step, double loss) {
    if (step % every == 0 || step + 1 == opt.steps) spdlog::info("pretrain step {}: loss {:.6f}", step, loss);
  });
  dlora::save_backbone(b, out);
}

int run(int argc, char** argv) {
  CLI::App app{"Split-execution PEFT with kill/revive scheduling on a toy decoder"};
  app.require_subcommand(1);

  ModelFlags init_model;
  std::string init_out;
  auto* init = app.add_subcommand("init-backbone", "write a seeded, untrained backbone checkpoint");
  init_model.add(init);
  init->add_option("--out", init_out, "checkpoint path")->required();

  ModelFlags pre_model;
  std::string pre_out, pre_in;
  dlora::PretrainOptions pre_opt;
  auto* pre = app.add_subcommand("pretrain-backbone", "train the full backbone on the charlm task");
  pre_model.add(pre);
  pre->add_option("--backbone", pre_in, "start from this checkpoint instead of a fresh init");
  pre->add_option("--steps", pre_opt.steps, "optimizer steps");
  pre->add_option("--batch-size", pre_opt.batch_size, "sequences per step");
  pre->add_option("--samples", pre_opt.samples, "corpus windows");
  pre->add_option("--lr", pre_opt.lr, "peak learning rate");
  pre->add_option("--seed", pre_opt.seed, "data seed");
  pre->add_option("--out", pre_out, "checkpoint path")->required();

  RunFlags ft_flags, ev_flags, edge_flags;
  auto* ft = app.add_subcommand("finetune", "run both nodes in this process");
  ft_flags.add(ft);
  auto* ev = app.add_subcommand("evaluate", "held-out loss and token accuracy (forward only)");
  ev_flags.add(ev);
  auto* edge = app.add_subcommand("run-edge", "connect to a cloud node and drive a fine-tuning session");
  edge_flags.add(edge);

  ModelFlags cloud_model;
  std::string cloud_backbone, cloud_host = "127.0.0.1";
  std::uint16_t cloud_port = dlora::kDefaultPort;
  auto* cloud = app.add_subcommand("serve-cloud", "listen for one edge session");
  cloud_model.add(cloud);
  cloud->add_option("--backbone", cloud_backbone, "backbone checkpoint (DLBK)");
  cloud->add_option("--host", cloud_host, "bind address");
  cloud->add_option("--port", cloud_port, "listen port");

  std::string report_log, report_out;
  auto* report = app.add_subcommand("report", "flatten a metrics log to CSV (one row per main epoch)");
  report->add_option("--log", report_log, "metrics log (NDJSON)")->required();
  report->add_option("--out", report_out, "CSV path (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  setup_logging();
  try {
    if (*init) {
      dlora::ModelConfig m;
      init_model.apply(m);
      m.validate();
      if (m.precision == dlora::Precision::F64) {
        dlora::save_backbone(dlora::Backbone<double>::init(m), init_out);
      } else {
        dlora::save_backbone(dlora::Backbone<float>::init(m), init_out);
      }
      spdlog::info("wrote {}", init_out);
    } else if (*pre) {
      dlora::ModelConfig m = pre_in.empty() ? dlora::ModelConfig{} : dlora::peek_backbone_config(pre_in);
      if (!pre_in.empty() && pre_model.any()) throw InputError("model flags cannot be combined with --backbone");
      pre_model.apply(m);
      m.validate();
      if (pre_opt.steps == 0 || pre_opt.batch_size == 0) throw InputError("steps and batch size must be positive");
      if (m.precision == dlora::Precision::F64) {
        pretrain_and_save<double>(m, pre_in, pre_opt, pre_out);
      } else {
        pretrain_and_save<float>(m, pre_in, pre_opt, pre_out);
      }
      spdlog::info("wrote {}", pre_out);
    } else if (*ft) {
      const auto res = dlora::run_finetune(ft_flags.resolve());
      std::cout << "final loss " << res.epochs.back().mean_loss << ", held-out accuracy " << res.eval.accuracy
                << '\n';
    } else if (*ev) {
      const auto r = dlora::run_evaluate(ev_flags.resolve());
      nlohmann::ordered_json j;
      j["loss"] = r.loss;
      j["accuracy"] = r.accuracy;
      j["tokens"] = r.tokens;
      std::cout << j.dump() << '\n';
    } else if (*edge) {
      dlora::RunConfig c = edge_flags.resolve();
      c.transport = dlora::TransportKind::Tcp;
      const auto res = dlora::run_edge(c);
      std::cout << "final loss " << res.epochs.back().mean_loss << ", held-out accuracy " << res.eval.accuracy
                << '\n';
    } else if (*cloud) {
      dlora::ModelConfig m;
      if (!cloud_backbone.empty() && cloud_model.any()) {
        throw InputError("model flags cannot be combined with --backbone");
      }
      cloud_model.apply(m);
      dlora::serve_cloud(cloud_backbone, m, cloud_host, cloud_port);
    } else if (*report) {
      const std::string csv = dlora::metrics_to_csv(dlora::read_metrics(report_log));
      if (report_out.empty()) {
        std::cout << csv;
      } else {
        std::ofstream out(report_out);
        if (!out) throw std::runtime_error("cannot write " + report_out);
        out << csv;
      }
    }
  } catch (const InputError& e) {
    spdlog::error("{}", e.what());
    return 2;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) { return run(argc, argv); }
