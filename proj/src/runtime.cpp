// Copyright 2026 The dlora-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "dlora/runtime.hpp"

#include <cmath>
#include <exception>
#include <memory>
#include <thread>

#include <spdlog/spdlog.h>

#include "dlora/checkpoint.hpp"
#include "dlora/kernels.hpp"
#include "dlora/rng.hpp"

namespace dlora {

namespace {

constexpr std::uint64_t kPoolSalt = 101;
constexpr std::uint64_t kHeldoutSalt = 202;

std::size_t steps_per_epoch(const RunConfig& cfg) { return cfg.train_samples / cfg.batch_size; }

std::size_t warmup_length(const RunConfig& cfg) {
  const std::size_t spe = steps_per_epoch(cfg);
  return cfg.warmup_steps > 0 ? std::min<std::size_t>(cfg.warmup_steps, spe) : spe;
}

AdamWConfig adamw_config(const RunConfig& cfg) {
  AdamWConfig a;
  a.lr = cfg.lr;
  a.weight_decay = cfg.weight_decay;
  a.total_steps = total_steps(cfg);
  return a;
}

std::size_t mask_count(const Batch& b) {
  std::size_t n = 0;
  for (std::uint8_t m : b.mask) n += m != 0;
  return n;
}

nlohmann::ordered_json status_json(std::span<const ModuleStatus> status) {
  auto arr = nlohmann::ordered_json::array();
  for (ModuleStatus s : status) arr.push_back(static_cast<int>(s));
  return arr;
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ProtocolError(what);
}

/// Cloud-side hook: every delta comes from, and every branch gradient goes
/// back to, the edge.
template <typename T>
class RemoteHook : public PeftHook<T> {
 public:
  RemoteHook(Channel& ch, const ConfigMsg& session, const std::vector<ModuleStatus>& status)
      : ch_(ch), s_(session), status_(status), quant_{session.quant_bits} {}

  std::optional<QkvDelta<T>> qkv_delta(std::size_t layer, const Tensor<T>& input) override {
    if (s_.peft.kind != PeftKind::Lora || !in_forward(layer)) return std::nullopt;
    ch_.send(FwdActivationMsg{static_cast<std::uint32_t>(layer), Site::QkvInput, to_wire(input, quant_)});
    auto r = ch_.expect<FwdDeltaMsg>();
    require(r.layer == layer && r.tensors.size() == 3, "FwdDelta for the wrong layer or with a wrong tensor count");
    return QkvDelta<T>{from_wire<T>(r.tensors[0]), from_wire<T>(r.tensors[1]), from_wire<T>(r.tensors[2])};
  }

  std::optional<Tensor<T>> mlp_delta(std::size_t layer, const Tensor<T>& input) override {
    if (s_.peft.kind != PeftKind::Adapter || !in_forward(layer)) return std::nullopt;
    ch_.send(FwdActivationMsg{static_cast<std::uint32_t>(layer), Site::MlpInput, to_wire(input, quant_)});
    auto r = ch_.expect<FwdDeltaMsg>();
    require(r.layer == layer && r.tensors.size() == 1, "FwdDelta for the wrong layer or with a wrong tensor count");
    return from_wire<T>(r.tensors[0]);
  }

  std::optional<Tensor<T>> qkv_backward(std::size_t layer, const Tensor<T>& dq, const Tensor<T>& dk,
                                        const Tensor<T>& dv) override {
    if (status_[layer] != ModuleStatus::Active) return std::nullopt;
    ch_.send(BwdGradMsg{static_cast<std::uint32_t>(layer), Site::QkvInput,
                        {to_wire(dq, quant_), to_wire(dk, quant_), to_wire(dv, quant_)}});
    return receive_dh(layer);
  }

  std::optional<Tensor<T>> mlp_backward(std::size_t layer, const Tensor<T>& dout) override {
    if (status_[layer] != ModuleStatus::Active) return std::nullopt;
    ch_.send(BwdGradMsg{static_cast<std::uint32_t>(layer), Site::MlpInput, {to_wire(dout, quant_)}});
    return receive_dh(layer);
  }

  std::size_t lowest_backward_layer(std::size_t n_layers) const override {
    const std::size_t low = lowest_active_layer(status_);
    return low < status_.size() ? low : n_layers;
  }

 private:
  bool in_forward(std::size_t layer) const {
    return status_[layer] == ModuleStatus::Active || s_.policy == FrozenPolicy::ComputeFrozenOnEdge;
  }

  Tensor<T> receive_dh(std::size_t layer) {
    auto r = ch_.expect<BwdDeltaGradMsg>();
    require(r.layer == layer, "BwdDeltaGrad for layer " + std::to_string(r.layer) + ", expected " +
                                  std::to_string(layer));
    return from_wire<T>(r.tensor);
  }

  Channel& ch_;
  const ConfigMsg& s_;
  const std::vector<ModuleStatus>& status_;
  QuantSpec quant_;
};

}  // namespace

std::size_t total_steps(const RunConfig& cfg) { return warmup_length(cfg) + cfg.epochs * steps_per_epoch(cfg); }

std::size_t count_active(std::span<const ModuleStatus> status) {
  std::size_t n = 0;
  for (ModuleStatus s : status) n += s == ModuleStatus::Active;
  return n;
}

template <typename T>
EvalResult score_logits(const Tensor<T>& logits, const Batch& batch) {
  const std::size_t n = batch.shape.tokens();
  const Tensor<T> flat = logits.reshaped({n, logits.size() / n});
  auto ce = kernels::cross_entropy(flat, batch.targets, batch.mask);
  EvalResult r;
  r.loss = ce.loss;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!batch.mask[i]) continue;
    ++r.tokens;
    correct += argmax<T>(flat.row(i)) == static_cast<std::size_t>(batch.targets[i]);
  }
  r.accuracy = r.tokens ? static_cast<double>(correct) / static_cast<double>(r.tokens) : 0.0;
  return r;
}

namespace {

template <typename T, typename F>
EvalResult evaluate_batches(const std::vector<Batch>& batches, F&& logits_of) {
  double loss_sum = 0.0, correct = 0.0;
  std::size_t tokens = 0;
  for (const Batch& b : batches) {
    const EvalResult r = score_logits<T>(logits_of(b), b);
    loss_sum += r.loss * static_cast<double>(r.tokens);
    correct += r.accuracy * static_cast<double>(r.tokens);
    tokens += r.tokens;
  }
  EvalResult out;
  out.tokens = tokens;
  if (tokens) {
    out.loss = loss_sum / static_cast<double>(tokens);
    out.accuracy = correct / static_cast<double>(tokens);
  }
  return out;
}

}  // namespace

// --- driver -------------------------------------------------------------------

template <typename T>
FinetuneResult drive_finetune(const RunConfig& cfg, TrainingEngine<T>& engine, MetricsLog* log) {
  const auto train = gen_dataset(cfg.task, cfg.seed, cfg.train_samples, cfg.model.vocab, cfg.seq_len());
  const auto heldout = gen_dataset(cfg.task, derive_seed(cfg.seed, kHeldoutSalt), cfg.eval_samples,
                                   cfg.model.vocab, cfg.seq_len());
  if (log) {
    nlohmann::ordered_json h;
    h["record"] = "header";
    h["format"] = 1;
    h["config"] = resolved_config_json(cfg);
    log->write(h);
  }
  FinetuneResult res;
  engine.begin();
  std::size_t global = 0;
  for (std::size_t e = 0; e <= cfg.epochs; ++e) {
    EpochRecord rec;
    rec.epoch = e;
    rec.warmup = e == 0;
    rec.status = engine.trainer().status();
    auto batches = make_batches(train, cfg.batch_size, cfg.seed, e);
    if (rec.warmup) batches.resize(warmup_length(cfg));
    double sum = 0.0;
    for (const Batch& b : batches) {
      const double loss = engine.train_step(b);
      res.losses.push_back(loss);
      sum += loss;
      rec.last_loss = loss;
      if (log) {
        nlohmann::ordered_json s;
        s["record"] = "step";
        s["epoch"] = e;
        s["step"] = global;
        s["loss"] = loss;
        log->write(s);
      }
      ++global;
    }
    rec.steps = batches.size();
    rec.mean_loss = sum / static_cast<double>(rec.steps);
    rec.outcome = engine.end_epoch(e);
    spdlog::info("epoch {} ({}): mean loss {:.6f}, active {}/{} -> {}", e, rec.warmup ? "warm-up" : "train",
                 rec.mean_loss, count_active(rec.status), rec.status.size(),
                 count_active(rec.outcome.next_status));
    if (log) {
      nlohmann::ordered_json r;
      r["record"] = "epoch";
      r["epoch"] = e;
      r["phase"] = rec.warmup ? "warmup" : "train";
      r["steps"] = rec.steps;
      r["mean_loss"] = rec.mean_loss;
      r["last_loss"] = rec.last_loss;
      r["status"] = status_json(rec.status);
      r["active"] = count_active(rec.status);
      auto scores = nlohmann::ordered_json::array();
      for (double s : rec.outcome.scores) scores.push_back(json_score(s));
      r["scores"] = scores;
      r["next_status"] = status_json(rec.outcome.next_status);
      r["norms"] = rec.outcome.norms;
      r["edge"] = to_json(rec.outcome.edge);
      r["cloud_flops"] = rec.outcome.cloud_flops;
      log->write(r);
    }
    res.epochs.push_back(std::move(rec));
  }
  res.eval = engine.evaluate(sequential_batches(heldout, cfg.batch_size));
  spdlog::info("held-out: loss {:.6f}, token accuracy {:.4f}", res.eval.loss, res.eval.accuracy);
  if (log) {
    nlohmann::ordered_json r;
    r["record"] = "eval";
    r["loss"] = res.eval.loss;
    r["accuracy"] = res.eval.accuracy;
    r["tokens"] = res.eval.tokens;
    log->write(r);
  }
  engine.finish();
  if (log) {
    nlohmann::ordered_json r;
    r["record"] = "summary";
    r["steps"] = res.losses.size();
    r["final_loss"] = res.epochs.back().mean_loss;
    r["final_status"] = status_json(engine.trainer().status());
    log->write(r);
  }
  return res;
}

// --- edge node ------------------------------------------------------------------

template <typename T>
EdgeNode<T>::EdgeNode(const RunConfig& cfg, const ModelConfig& model, Embedding<T> embedding, PeftPool<T> pool,
                      Channel& channel, CostLedger& ledger)
    : cfg_(cfg),
      model_(model),
      embedding_(std::move(embedding)),
      trainer_(std::move(pool), adamw_config(cfg), cfg.policy),
      ch_(channel),
      ledger_(ledger),
      quant_{cfg.quant_bits} {
  if (trainer_.size() != model_.n_layers) throw InputError("edge: PEFT pool size differs from n_layers");
  if (trainer_.kind() != cfg.peft.kind) throw InputError("edge: PEFT pool kind differs from the config");
}

template <typename T>
void EdgeNode<T>::begin() {
  ch_.send(ConfigMsg{model_, cfg_.peft, cfg_.mode, cfg_.effective_budget(), cfg_.quant_bits, cfg_.policy});
  if (cfg_.mode != Mode::FT) ch_.send(NormReportMsg{trainer_.norms(meter(CostClass::Control))});
}

template <typename T>
Tensor<T> EdgeNode<T>::forward(const Batch& batch) {
  const std::size_t n = batch.shape.tokens(), d = model_.d_model, layers = model_.n_layers;
  Tensor<T> h0 = embed<T>(batch.tokens, batch.shape, embedding_, model_, meter(CostClass::Base));
  ch_.send(FwdActivationMsg{0, Site::Embedding, to_wire(h0, quant_)});
  const Site site = trainer_.kind() == PeftKind::Lora ? Site::QkvInput : Site::MlpInput;
  std::size_t next = 0;
  auto next_forward_layer = [&](std::size_t from) {
    while (from < layers && !trainer_.in_forward(from)) ++from;
    return from;
  };
  while (true) {
    WireMessage m = ch_.recv();
    if (auto* lg = std::get_if<LogitsMsg>(&m)) {
      require(next_forward_layer(next) == layers, "logits arrived before every module was served");
      Tensor<T> logits = from_wire<T>(lg->tensor);
      require(logits.dims() == Dims{batch.shape.batch, batch.shape.seq, model_.vocab}, "logits have a wrong shape");
      return logits;
    }
    auto* fa = std::get_if<FwdActivationMsg>(&m);
    if (!fa) throw ProtocolError(std::string("unexpected ") + to_string(type_of(m)) + " frame during forward");
    const std::size_t expected = next_forward_layer(next);
    require(fa->layer == expected && fa->site == site,
            "forward request for layer " + std::to_string(fa->layer) + ", expected " + std::to_string(expected));
    Tensor<T> input = from_wire<T>(fa->tensor);
    require(input.size() == n * d, "forward activation has a wrong shape");
    input = input.reshaped({n, d});
    FwdDeltaMsg reply{fa->layer, {}};
    if (site == Site::QkvInput) {
      QkvDelta<T> delta = trainer_.forward_qkv(expected, input, meter(CostClass::Module));
      reply.tensors = {to_wire(delta.q, quant_), to_wire(delta.k, quant_), to_wire(delta.v, quant_)};
    } else {
      reply.tensors = {to_wire(trainer_.forward_mlp(expected, input, meter(CostClass::Module)), quant_)};
    }
    ch_.send(reply);
    next = expected + 1;
  }
}

template <typename T>
double EdgeNode<T>::train_step(const Batch& batch) {
  const std::size_t n = batch.shape.tokens(), d = model_.d_model;
  trainer_.begin_step();
  Tensor<T> logits = forward(batch);
  auto ce = kernels::cross_entropy(logits.reshaped({n, model_.vocab}), batch.targets, batch.mask);
  meter(CostClass::Base).add(flops::cross_entropy(mask_count(batch), model_.vocab));
  if (!std::isfinite(ce.loss)) {
    throw std::runtime_error("non-finite training loss at optimizer step " + std::to_string(trainer_.optimizer().step()));
  }
  ch_.send(LossGradMsg{ce.loss, to_wire(ce.dlogits.reshaped(logits.dims()), quant_)});
  const Site site = trainer_.kind() == PeftKind::Lora ? Site::QkvInput : Site::MlpInput;
  for (std::size_t l = model_.n_layers; l-- > 0;) {
    if (!trainer_.trains(l)) continue;
    auto g = ch_.expect<BwdGradMsg>();
    require(g.layer == l && g.site == site, "backward request for layer " + std::to_string(g.layer) +
                                                ", expected " + std::to_string(l));
    require(g.tensors.size() == (site == Site::QkvInput ? 3u : 1u), "BwdGrad with a wrong tensor count");
    std::vector<Tensor<T>> grads;
    for (const auto& w : g.tensors) {
      Tensor<T> t = from_wire<T>(w);
      require(t.size() == n * d, "BwdGrad tensor has a wrong shape");
      grads.push_back(t.reshaped({n, d}));
    }
    Tensor<T> dh = site == Site::QkvInput
                       ? trainer_.backward_qkv(l, grads[0], grads[1], grads[2], meter(CostClass::Module))
                       : trainer_.backward_mlp(l, grads[0], meter(CostClass::Module));
    ch_.send(BwdDeltaGradMsg{static_cast<std::uint32_t>(l), to_wire(dh, quant_)});
  }
  trainer_.end_step();
  return ce.loss;
}

template <typename T>
EvalResult EdgeNode<T>::evaluate(const std::vector<Batch>& batches) {
  return evaluate_batches<T>(batches, [this](const Batch& b) {
    Tensor<T> logits = forward(b);
    trainer_.end_step();
    return logits;
  });
}

template <typename T>
EpochOutcome EdgeNode<T>::end_epoch(std::size_t epoch) {
  EpochOutcome o;
  o.norms = trainer_.norms(meter(CostClass::Control));
  if (cfg_.mode != Mode::FT) ch_.send(NormReportMsg{o.norms});
  ch_.send(EpochEndMsg{static_cast<std::uint32_t>(epoch), ledger_.totals().edge_flops});
  if (cfg_.mode != Mode::FT) {
    auto cmd = ch_.expect<CommandMsg>();
    require(cmd.status.size() == trainer_.size() && cmd.scores.size() == trainer_.size(),
            "command vector length differs from the module count");
    trainer_.set_status(cmd.status);
    o.scores = std::move(cmd.scores);
  }
  auto ack = ch_.expect<EpochEndMsg>();
  require(ack.epoch == epoch, "epoch acknowledgement out of order");
  o.cloud_flops = ack.sender_flops - cloud_flops_seen_;
  cloud_flops_seen_ = ack.sender_flops;
  o.next_status = trainer_.status();
  ledger_.snapshot(epoch == 0 ? "warmup" : "epoch " + std::to_string(epoch));
  o.edge = ledger_.snapshots().back().delta;
  return o;
}

template <typename T>
void EdgeNode<T>::finish() {
  ch_.send(ShutdownMsg{});
}

// --- cloud node -----------------------------------------------------------------

template <typename T>
CloudNode<T>::CloudNode(const ModelConfig& model, Trunk<T> trunk, Channel& channel, CostLedger& ledger)
    : model_(model), trunk_(std::move(trunk)), ch_(channel), ledger_(ledger) {}

template <typename T>
void CloudNode<T>::serve() {
  session_ = ch_.expect<ConfigMsg>();
  require(session_.model == model_, "edge model config does not match the cloud backbone");
  try {
    session_.peft.validate();
    QuantSpec{session_.quant_bits}.validate();
    sched_.emplace(session_.mode, model_.n_layers, session_.budget);
  } catch (const InputError& e) {
    throw ProtocolError(std::string("invalid session config: ") + e.what());
  }
  status_ = sched_->status();
  if (session_.mode != Mode::FT) {
    norms_pre_ = ch_.expect<NormReportMsg>().norms;
    require(norms_pre_.size() == model_.n_layers, "norm report length differs from the module count");
  }
  spdlog::debug("cloud: session open (mode {}, budget {})", to_string(session_.mode), session_.budget);
  std::optional<WireMessage> pending;
  while (true) {
    WireMessage m = pending ? std::move(*pending) : ch_.recv();
    pending.reset();
    if (auto* fa = std::get_if<FwdActivationMsg>(&m)) {
      require(fa->site == Site::Embedding && fa->layer == 0, "step must start with the embedding upload");
      step(*fa, pending);
    } else if (auto* nr = std::get_if<NormReportMsg>(&m)) {
      require(session_.mode != Mode::FT, "norm report in FT mode");
      require(nr->norms.size() == model_.n_layers, "norm report length differs from the module count");
      norms_post_ = std::move(nr->norms);
    } else if (auto* ee = std::get_if<EpochEndMsg>(&m)) {
      epoch_end(*ee);
    } else if (std::holds_alternative<ShutdownMsg>(m)) {
      spdlog::debug("cloud: shutdown");
      return;
    } else {
      throw ProtocolError(std::string("unexpected ") + to_string(type_of(m)) + " frame at step boundary");
    }
  }
}

template <typename T>
void CloudNode<T>::step(const FwdActivationMsg& emb, std::optional<WireMessage>& pending) {
  Tensor<T> h0 = from_wire<T>(emb.tensor);
  const Dims dims = h0.dims();
  require(dims.size() == 3 && dims[2] == model_.d_model && dims[1] <= model_.max_seq,
          "embedding upload has shape " + dims_to_string(dims));
  const SeqShape shape{dims[0], dims[1]};
  const QuantSpec quant{session_.quant_bits};
  RemoteHook<T> hook(ch_, session_, status_);
  TrunkCache<T> cache;
  Tensor<T> logits = forward_trunk(h0, trunk_, model_, shape, &hook, &cache, meter());
  ch_.send(LogitsMsg{to_wire(logits, quant)});
  WireMessage next = ch_.recv();
  auto* lg = std::get_if<LossGradMsg>(&next);
  if (!lg) {
    pending = std::move(next);  // forward-only (evaluation) step
    return;
  }
  Tensor<T> dlogits = from_wire<T>(lg->tensor);
  require(dlogits.dims() == logits.dims(), "loss gradient has a wrong shape");
  backward_trunk(cache, dlogits, trunk_, model_, shape, &hook, static_cast<TrunkGrads<T>*>(nullptr), meter());
}

template <typename T>
void CloudNode<T>::epoch_end(const EpochEndMsg& msg) {
  if (session_.mode != Mode::FT) {
    require(norms_post_.has_value(), "epoch end without a norm report");
    status_ = sched_->end_epoch(norms_pre_, *norms_post_);
    norms_pre_ = std::move(*norms_post_);
    norms_post_.reset();
    ch_.send(CommandMsg{status_, sched_->last_scores()});
  }
  ch_.send(EpochEndMsg{msg.epoch, ledger_.totals().cloud_flops});
}

// --- reference engine -------------------------------------------------------------

template <typename T>
ReferenceEngine<T>::ReferenceEngine(const RunConfig& cfg, Backbone<T> backbone, PeftPool<T> pool)
    : cfg_(cfg),
      backbone_(std::move(backbone)),
      trainer_(std::move(pool), adamw_config(cfg), cfg.policy),
      sched_(cfg.mode, backbone_.config.n_layers, cfg.effective_budget()) {
  norms_pre_ = trainer_.norms(cfg.mode == Mode::FT ? FlopMeter{}
                                                   : FlopMeter{&ledger_, Node::Edge, CostClass::Control});
}

template <typename T>
double ReferenceEngine<T>::train_step(const Batch& batch) {
  const ModelConfig& mc = backbone_.config;
  const std::size_t n = batch.shape.tokens();
  trainer_.begin_step();
  LocalPeftHook<T> hook(trainer_, FlopMeter{&ledger_, Node::Edge, CostClass::Module});
  const FlopMeter base{&ledger_, Node::Edge, CostClass::Base};
  Tensor<T> h0 = embed<T>(batch.tokens, batch.shape, backbone_.embedding, mc, base);
  TrunkCache<T> cache;
  Tensor<T> logits = forward_trunk(h0, backbone_.trunk, mc, batch.shape, &hook, &cache,
                                   FlopMeter{&ledger_, Node::Cloud, CostClass::Base});
  auto ce = kernels::cross_entropy(logits.reshaped({n, mc.vocab}), batch.targets, batch.mask);
  base.add(flops::cross_entropy(mask_count(batch), mc.vocab));
  if (!std::isfinite(ce.loss)) throw std::runtime_error("non-finite training loss");
  backward_trunk(cache, ce.dlogits.reshaped(logits.dims()), backbone_.trunk, mc, batch.shape, &hook,
                 static_cast<TrunkGrads<T>*>(nullptr), FlopMeter{&ledger_, Node::Cloud, CostClass::Base});
  trainer_.end_step();
  return ce.loss;
}

template <typename T>
EvalResult ReferenceEngine<T>::evaluate(const std::vector<Batch>& batches) {
  return evaluate_batches<T>(batches, [this](const Batch& b) {
    const ModelConfig& mc = backbone_.config;
    LocalPeftHook<T> hook(trainer_, FlopMeter{&ledger_, Node::Edge, CostClass::Module});
    Tensor<T> h0 = embed<T>(b.tokens, b.shape, backbone_.embedding, mc, FlopMeter{&ledger_, Node::Edge});
    Tensor<T> logits = forward_trunk(h0, backbone_.trunk, mc, b.shape, &hook, static_cast<TrunkCache<T>*>(nullptr),
                                     FlopMeter{&ledger_, Node::Cloud, CostClass::Base});
    trainer_.end_step();
    return logits;
  });
}

template <typename T>
EpochOutcome ReferenceEngine<T>::end_epoch(std::size_t epoch) {
  EpochOutcome o;
  o.norms = trainer_.norms(FlopMeter{&ledger_, Node::Edge, CostClass::Control});
  if (cfg_.mode != Mode::FT) {
    trainer_.set_status(sched_.end_epoch(norms_pre_, o.norms));
    o.scores = sched_.last_scores();
  }
  norms_pre_ = o.norms;
  o.next_status = trainer_.status();
  ledger_.snapshot(epoch == 0 ? "warmup" : "epoch " + std::to_string(epoch));
  o.edge = ledger_.snapshots().back().delta;
  o.cloud_flops = o.edge.cloud_flops;
  return o;
}

// --- backbone / pool loading --------------------------------------------------------

template <typename T>
Backbone<T> load_or_init_backbone(const RunConfig& cfg) {
  if (cfg.backbone.empty()) return Backbone<T>::init(cfg.model);
  Backbone<T> b = load_backbone<T>(cfg.backbone);
  if (!(b.config == cfg.model)) {
    throw InputError("backbone checkpoint " + cfg.backbone + " does not match the configured model");
  }
  return b;
}

template <typename T>
PeftPool<T> load_or_init_pool(const RunConfig& cfg) {
  if (cfg.peft_in.empty()) return init_pool<T>(cfg.peft, cfg.model, derive_seed(cfg.seed, kPoolSalt));
  PeftPool<T> pool = load_pool<T>(cfg.peft_in, cfg.peft.alpha);
  const PeftPool<T> shape = init_pool<T>(cfg.peft, cfg.model, 0);
  bool ok = pool.size() == shape.size();
  for (std::size_t l = 0; ok && l < pool.size(); ++l) {
    auto a = pool[l].params();
    auto b = shape[l].params();
    ok = pool[l].kind() == shape[l].kind() && a.size() == b.size();
    for (std::size_t i = 0; ok && i < a.size(); ++i) ok = a[i]->dims() == b[i]->dims();
  }
  if (!ok) throw InputError("PEFT checkpoint " + cfg.peft_in + " does not match the configured model/peft");
  for (auto& m : pool) m.status = ModuleStatus::Active;
  return pool;
}

// --- launchers ------------------------------------------------------------------------

namespace {

bool is_transport_error(const std::exception_ptr& e) {
  try {
    std::rethrow_exception(e);
  } catch (const TransportError&) {
    return true;
  } catch (...) {
    return false;
  }
}

/// Runs `edge_fn` against an in-process cloud over the configured transport.
template <typename T, typename R, typename F>
R with_split_session(const RunConfig& cfg, const Backbone<T>& backbone, CostLedger& edge_ledger,
                     CostLedger& cloud_ledger, const FrameCapture& capture, F&& edge_fn) {
  std::unique_ptr<Transport> edge_t, cloud_t;
  std::unique_ptr<TcpListener> listener;
  if (cfg.transport == TransportKind::Local) {
    std::tie(edge_t, cloud_t) = make_local_pair();
  } else {
    listener = std::make_unique<TcpListener>(cfg.host, cfg.port);
  }
  std::exception_ptr cloud_err;
  std::mutex cloud_mu;
  std::thread cloud([&, trunk = backbone.trunk, model = backbone.config]() mutable {
    try {
      if (listener) {
        auto accepted = listener->accept();
        std::lock_guard lock(cloud_mu);
        cloud_t = std::move(accepted);
      }
      Channel ch(*cloud_t, cloud_ledger, Node::Cloud);
      CloudNode<T> node(model, std::move(trunk), ch, cloud_ledger);
      node.serve();
    } catch (...) {
      cloud_err = std::current_exception();
      std::lock_guard lock(cloud_mu);
      if (cloud_t) cloud_t->close();
    }
  });
  std::exception_ptr edge_err;
  R result{};
  try {
    if (listener) edge_t = TcpTransport::connect(cfg.host, listener->port());
    Channel ch(*edge_t, edge_ledger, Node::Edge);
    if (capture) ch.set_capture(capture);
    result = edge_fn(ch);
  } catch (...) {
    edge_err = std::current_exception();
    if (edge_t) edge_t->close();
    if (listener && !edge_t) {
      // Unblock a cloud still waiting in accept().
      try {
        TcpTransport::connect(cfg.host, listener->port(), 500)->close();
      } catch (...) {
      }
    }
  }
  cloud.join();
  if (edge_err) {
    if (cloud_err && is_transport_error(edge_err)) std::rethrow_exception(cloud_err);
    std::rethrow_exception(edge_err);
  }
  if (cloud_err) std::rethrow_exception(cloud_err);
  return result;
}

template <typename T>
FinetuneResult finetune_split(const RunConfig& cfg, const RunHooks& hooks) {
  Backbone<T> backbone = load_or_init_backbone<T>(cfg);
  PeftPool<T> pool = load_or_init_pool<T>(cfg);
  CostLedger edge_ledger, cloud_ledger;
  FinetuneResult res = with_split_session<T, FinetuneResult>(
      cfg, backbone, edge_ledger, cloud_ledger, hooks.capture, [&](Channel& ch) {
        MetricsLog log(cfg.output);
        EdgeNode<T> edge(cfg, backbone.config, backbone.embedding, std::move(pool), ch, edge_ledger);
        FinetuneResult r = drive_finetune(cfg, edge, &log);
        if (!cfg.peft_out.empty()) save_pool(edge.trainer().pool(), cfg.peft_out);
        return r;
      });
  res.edge_totals = edge_ledger.totals();
  res.cloud_totals = cloud_ledger.totals();
  return res;
}

template <typename T>
FinetuneResult reference_run(const RunConfig& cfg) {
  ReferenceEngine<T> engine(cfg, load_or_init_backbone<T>(cfg), load_or_init_pool<T>(cfg));
  FinetuneResult res = drive_finetune<T>(cfg, engine, nullptr);
  res.edge_totals = engine.ledger().totals();
  return res;
}

template <typename T>
EvalResult evaluate_split(const RunConfig& cfg) {
  Backbone<T> backbone = load_or_init_backbone<T>(cfg);
  PeftPool<T> pool = load_or_init_pool<T>(cfg);
  const auto heldout = gen_dataset(cfg.task, derive_seed(cfg.seed, kHeldoutSalt), cfg.eval_samples,
                                   cfg.model.vocab, cfg.seq_len());
  CostLedger edge_ledger, cloud_ledger;
  return with_split_session<T, EvalResult>(cfg, backbone, edge_ledger, cloud_ledger, {}, [&](Channel& ch) {
    EdgeNode<T> edge(cfg, backbone.config, backbone.embedding, std::move(pool), ch, edge_ledger);
    edge.begin();
    EvalResult r = edge.evaluate(sequential_batches(heldout, cfg.batch_size));
    edge.finish();
    return r;
  });
}

template <typename T>
FinetuneResult edge_only(const RunConfig& cfg) {
  Backbone<T> backbone = load_or_init_backbone<T>(cfg);
  PeftPool<T> pool = load_or_init_pool<T>(cfg);
  CostLedger ledger;
  auto t = TcpTransport::connect(cfg.host, cfg.port);
  Channel ch(*t, ledger, Node::Edge);
  MetricsLog log(cfg.output);
  EdgeNode<T> edge(cfg, backbone.config, std::move(backbone.embedding), std::move(pool), ch, ledger);
  FinetuneResult res = drive_finetune(cfg, edge, &log);
  if (!cfg.peft_out.empty()) save_pool(edge.trainer().pool(), cfg.peft_out);
  res.edge_totals = ledger.totals();
  return res;
}

template <typename T>
void cloud_only(const std::string& backbone_path, const ModelConfig& model, const std::string& host,
                std::uint16_t port, const std::function<void(std::uint16_t)>& on_listening) {
  Backbone<T> backbone = backbone_path.empty() ? Backbone<T>::init(model) : load_backbone<T>(backbone_path);
  TcpListener listener(host, port);
  spdlog::info("cloud: listening on {}:{}", host, listener.port());
  if (on_listening) on_listening(listener.port());
  auto t = listener.accept();
  CostLedger ledger;
  Channel ch(*t, ledger, Node::Cloud);
  CloudNode<T> node(backbone.config, std::move(backbone.trunk), ch, ledger);
  node.serve();
  spdlog::info("cloud: session done, {} FLOPs, {} bytes in, {} bytes out", ledger.totals().cloud_flops,
               ledger.totals().bytes_to_cloud, ledger.totals().bytes_to_edge);
}

}  // namespace

FinetuneResult run_finetune(const RunConfig& cfg, const RunHooks& hooks) {
  cfg.validate();
  return cfg.model.precision == Precision::F64 ? finetune_split<double>(cfg, hooks)
                                               : finetune_split<float>(cfg, hooks);
}

FinetuneResult run_reference(const RunConfig& cfg) {
  cfg.validate();
  return cfg.model.precision == Precision::F64 ? reference_run<double>(cfg) : reference_run<float>(cfg);
}

EvalResult run_evaluate(const RunConfig& cfg) {
  cfg.validate();
  return cfg.model.precision == Precision::F64 ? evaluate_split<double>(cfg) : evaluate_split<float>(cfg);
}

FinetuneResult run_edge(const RunConfig& cfg) {
  cfg.validate();
  return cfg.model.precision == Precision::F64 ? edge_only<double>(cfg) : edge_only<float>(cfg);
}

void serve_cloud(const std::string& backbone_path, const ModelConfig& fallback, const std::string& host,
                 std::uint16_t port, const std::function<void(std::uint16_t)>& on_listening) {
  const ModelConfig model = backbone_path.empty() ? fallback : peek_backbone_config(backbone_path);
  model.validate();
  if (model.precision == Precision::F64) {
    cloud_only<double>(backbone_path, model, host, port, on_listening);
  } else {
    cloud_only<float>(backbone_path, model, host, port, on_listening);
  }
}

// --- pretraining ----------------------------------------------------------------------

template <typename T>
Backbone<T> pretrain_backbone(Backbone<T> b, const PretrainOptions& opt,
                              const std::function<void(std::size_t, double)>& on_step) {
  const ModelConfig& mc = b.config;
  const auto data = gen_dataset(opt.task, opt.seed, opt.samples, mc.vocab, mc.max_seq);
  std::vector<Tensor<T>*> params{&b.embedding.table};
  for (auto& blk : b.trunk.blocks) {
    for (auto* t : blk.tensors()) params.push_back(t);
  }
  params.push_back(&b.trunk.final_gain);
  params.push_back(&b.trunk.lm_head);
  AdamW optim(AdamWConfig{opt.lr, 0.9, 0.999, 1e-8, 0.0, opt.steps});
  auto moments = AdamWMoments<T>::zeros_like(std::span<Tensor<T>* const>(params));
  std::vector<Batch> batches;
  std::size_t epoch = 0, cursor = 0;
  for (std::size_t step = 0; step < opt.steps; ++step) {
    if (cursor == batches.size()) {
      batches = make_batches(data, opt.batch_size, opt.seed, epoch++);
      cursor = 0;
      if (batches.empty()) throw InputError("pretrain: fewer samples than one batch");
    }
    const Batch& batch = batches[cursor++];
    const std::size_t n = batch.shape.tokens();
    optim.begin_step();
    Tensor<T> h0 = embed<T>(batch.tokens, batch.shape, b.embedding, mc);
    TrunkCache<T> cache;
    Tensor<T> logits = forward_trunk<T>(h0, b.trunk, mc, batch.shape, nullptr, &cache);
    auto ce = kernels::cross_entropy(logits.reshaped({n, mc.vocab}), batch.targets, batch.mask);
    if (!std::isfinite(ce.loss)) throw std::runtime_error("pretrain: non-finite loss at step " + std::to_string(step));
    TrunkGrads<T> g = TrunkGrads<T>::zeros_like(b.trunk);
    auto dh0 = backward_trunk<T>(cache, ce.dlogits, b.trunk, mc, batch.shape, nullptr, &g);
    Tensor<T> g_table(b.embedding.table.dims());
    const Tensor<T> dh = dh0->reshaped({n, mc.d_model});
    for (std::size_t r = 0; r < n; ++r) {
      auto dst = g_table.row(static_cast<std::size_t>(batch.tokens[r]));
      auto src = dh.row(r);
      for (std::size_t j = 0; j < src.size(); ++j) dst[j] += src[j];
    }
    std::vector<Tensor<T>> grads{std::move(g_table)};
    for (auto& blk : g.blocks) {
      for (auto* t : blk.tensors()) grads.push_back(std::move(*t));
    }
    grads.push_back(std::move(g.final_gain));
    grads.push_back(std::move(g.lm_head));
    optim.update(std::span<Tensor<T>* const>(params), std::span<const Tensor<T>>(grads), moments);
    if (on_step) on_step(step, ce.loss);
  }
  return b;
}

#define DLORA_INSTANTIATE(T)                                                                          \
  template FinetuneResult drive_finetune<T>(const RunConfig&, TrainingEngine<T>&, MetricsLog*);      \
  template class EdgeNode<T>;                                                                       \
  template class CloudNode<T>;                                                                      \
  template class ReferenceEngine<T>;                                                                \
  template Backbone<T> pretrain_backbone<T>(Backbone<T>, const PretrainOptions&,                   \
                                            const std::function<void(std::size_t, double)>&);       \
  template Backbone<T> load_or_init_backbone<T>(const RunConfig&);                                  \
  template PeftPool<T> load_or_init_pool<T>(const RunConfig&);                                      \
  template EvalResult score_logits<T>(const Tensor<T>&, const Batch&);

DLORA_INSTANTIATE(float)
DLORA_INSTANTIATE(double)

}  // namespace dlora
