// Copyright 2026 The dlora-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "dlora/protocol.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <limits>

namespace dlora {

const char* to_string(MsgType t) {
  switch (t) {
    case MsgType::Config: return "Config";
    case MsgType::FwdActivation: return "FwdActivation";
    case MsgType::FwdDelta: return "FwdDelta";
    case MsgType::LogitsToEdge: return "LogitsToEdge";
    case MsgType::LossGradToCloud: return "LossGradToCloud";
    case MsgType::BwdGrad: return "BwdGrad";
    case MsgType::BwdDeltaGrad: return "BwdDeltaGrad";
    case MsgType::NormReport: return "NormReport";
    case MsgType::Command: return "Command";
    case MsgType::EpochEnd: return "EpochEnd";
    case MsgType::Shutdown: return "Shutdown";
  }
  return "Unknown";
}

void QuantSpec::validate() const {
  if (bits != 8 && bits != 32) throw InputError("quant bits must be 8 or 32");
}

// --- quantization -------------------------------------------------------------

namespace {

// Truncated toward zero to 17 significant bits: any int8 code times the scale
// is then exact in float32, so decoding adds no rounding of its own.
float scale_bits17(double v) {
  int e = 0;
  const double m = std::frexp(v, &e);
  float f = static_cast<float>(std::ldexp(std::floor(std::ldexp(m, 17)), e - 17));
  if (static_cast<double>(f) > v) f = std::nextafter(f, 0.0f);
  return f;
}

}  // namespace

template <typename T>
QuantizedTensor quantize(const Tensor<T>& t) {
  if (!t.all_finite()) throw InputError("quantize: tensor contains non-finite values");
  double max_abs = 0.0;
  for (T x : t.data()) max_abs = std::max(max_abs, std::fabs(static_cast<double>(x)));
  QuantizedTensor q;
  q.dims = t.dims();
  q.codes.assign(t.size(), 0);
  q.scale = scale_bits17(max_abs / 127.0);
  if (q.scale == 0.0f) return q;
  const double scale = q.scale;
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double r = std::round(static_cast<double>(t[i]) / scale);  // half away from zero
    q.codes[i] = static_cast<std::int8_t>(std::clamp(r, -127.0, 127.0));
  }
  return q;
}

template <typename T>
Tensor<T> dequantize(const QuantizedTensor& q) {
  Tensor<T> out(q.dims);
  const double scale = q.scale;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(q.codes[i] * scale);
  return out;
}

template <typename T>
WireTensor to_wire(const Tensor<T>& t, QuantSpec quant) {
  if (quant.quantized()) return quantize(t);
  return t;
}

template <typename T>
Tensor<T> from_wire(const WireTensor& w) {
  return std::visit(
      [](const auto& t) -> Tensor<T> {
        using S = std::decay_t<decltype(t)>;
        if constexpr (std::is_same_v<S, QuantizedTensor>) {
          return dequantize<T>(t);
        } else if constexpr (std::is_same_v<S, Tensor<T>>) {
          return t;
        } else {
          Tensor<T> out(t.dims());
          for (std::size_t i = 0; i < t.size(); ++i) out[i] = static_cast<T>(t[i]);
          return out;
        }
      },
      w);
}

Dims wire_dims(const WireTensor& w) {
  return std::visit([](const auto& t) -> Dims {
    using S = std::decay_t<decltype(t)>;
    if constexpr (std::is_same_v<S, QuantizedTensor>) {
      return t.dims;
    } else {
      return t.dims();
    }
  }, w);
}

Dtype wire_dtype(const WireTensor& w) { return static_cast<Dtype>(w.index()); }

MsgType type_of(const WireMessage& m) { return static_cast<MsgType>(m.index() + 1); }

CostClass cost_class(const WireMessage& m) {
  switch (type_of(m)) {
    case MsgType::FwdActivation:
      return std::get<FwdActivationMsg>(m).site == Site::Embedding ? CostClass::Base : CostClass::Module;
    case MsgType::FwdDelta:
    case MsgType::BwdGrad:
    case MsgType::BwdDeltaGrad:
      return CostClass::Module;
    case MsgType::LogitsToEdge:
    case MsgType::LossGradToCloud:
      return CostClass::Base;
    default:
      return CostClass::Control;
  }
}

// --- byte-level encoding --------------------------------------------------------

namespace {

class Writer {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

  void tensor(const WireTensor& w) {
    const Dims dims = wire_dims(w);
    u8(static_cast<std::uint8_t>(wire_dtype(w)));
    if (dims.empty() || dims.size() > 255) throw InputError("encode: tensor rank out of range");
    u8(static_cast<std::uint8_t>(dims.size()));
    for (std::size_t d : dims) {
      if (d > std::numeric_limits<std::uint32_t>::max()) throw InputError("encode: dimension too large");
      u32(static_cast<std::uint32_t>(d));
    }
    std::visit([this](const auto& t) {
      using S = std::decay_t<decltype(t)>;
      if constexpr (std::is_same_v<S, QuantizedTensor>) {
        f32(t.scale);
        for (std::int8_t c : t.codes) u8(static_cast<std::uint8_t>(c));
      } else if constexpr (std::is_same_v<S, Tensor<float>>) {
        for (float x : t.data()) f32(x);
      } else {
        for (double x : t.data()) f64(x);
      }
    }, w);
  }

  void tensors(const std::vector<WireTensor>& ts) {
    if (ts.size() > 255) throw InputError("encode: too many tensors in one message");
    u8(static_cast<std::uint8_t>(ts.size()));
    for (const auto& t : ts) tensor(t);
  }

  std::vector<std::uint8_t> take() { return std::move(buf_); }

 private:
  std::vector<std::uint8_t> buf_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::size_t remaining() const { return bytes_.size() - pos_; }

  std::uint8_t u8() {
    need(1);
    return bytes_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }

  WireTensor tensor() {
    const std::uint8_t dtype = u8();
    if (dtype > 2) throw ProtocolError("decode: unknown tensor dtype " + std::to_string(dtype));
    const std::uint8_t ndim = u8();
    if (ndim == 0) throw ProtocolError("decode: tensor with zero dimensions");
    Dims dims;
    std::uint64_t count = 1;
    for (int i = 0; i < ndim; ++i) {
      const std::uint32_t d = u32();
      if (d == 0) throw ProtocolError("decode: zero-length tensor dimension");
      count *= d;
      if (count > kMaxPayload) throw ProtocolError("decode: tensor larger than the payload cap");
      dims.push_back(d);
    }
    const std::size_t elem = dtype == 0 ? 4 : dtype == 1 ? 8 : 1;
    need(count * elem + (dtype == 2 ? 4 : 0));
    if (dtype == 0) {
      Tensor<float> t(dims);
      for (std::size_t i = 0; i < t.size(); ++i) t[i] = f32();
      return t;
    }
    if (dtype == 1) {
      Tensor<double> t(dims);
      for (std::size_t i = 0; i < t.size(); ++i) t[i] = f64();
      return t;
    }
    QuantizedTensor q;
    q.dims = dims;
    q.scale = f32();
    if (!std::isfinite(q.scale) || q.scale < 0.0f) throw ProtocolError("decode: invalid quantization scale");
    q.codes.resize(count);
    for (auto& c : q.codes) {
      c = static_cast<std::int8_t>(u8());
      if (c == -128) throw ProtocolError("decode: int8 code outside [-127, 127]");
    }
    return q;
  }

  std::vector<WireTensor> tensors() {
    const std::uint8_t n = u8();
    std::vector<WireTensor> out;
    for (int i = 0; i < n; ++i) out.push_back(tensor());
    return out;
  }

  std::size_t consumed() const { return pos_; }

  void finish() const {
    if (pos_ != bytes_.size()) throw ProtocolError("decode: trailing bytes after payload");
  }

 private:
  void need(std::uint64_t n) const {
    if (n > remaining()) throw ProtocolError("decode: truncated payload");
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

template <typename E>
E checked_enum(std::uint8_t v, std::uint8_t max, const char* what) {
  if (v > max) throw ProtocolError(std::string("decode: invalid ") + what + " " + std::to_string(v));
  return static_cast<E>(v);
}

void write_payload(Writer& w, const WireMessage& m) {
  std::visit([&w](const auto& msg) {
    using M = std::decay_t<decltype(msg)>;
    if constexpr (std::is_same_v<M, ConfigMsg>) {
      const ModelConfig& c = msg.model;
      for (std::uint32_t v : {c.vocab, c.d_model, c.n_heads, c.d_ff, c.n_layers, c.max_seq}) w.u32(v);
      w.u8(static_cast<std::uint8_t>(c.precision));
      w.u64(c.seed);
      w.u8(static_cast<std::uint8_t>(msg.peft.kind));
      w.u32(msg.peft.rank);
      w.u32(msg.peft.adapter_dim);
      w.f64(msg.peft.alpha);
      w.u8(static_cast<std::uint8_t>(msg.mode));
      w.u32(msg.budget);
      w.u8(msg.quant_bits);
      w.u8(static_cast<std::uint8_t>(msg.policy));
    } else if constexpr (std::is_same_v<M, FwdActivationMsg>) {
      w.u32(msg.layer);
      w.u8(static_cast<std::uint8_t>(msg.site));
      w.tensor(msg.tensor);
    } else if constexpr (std::is_same_v<M, FwdDeltaMsg>) {
      w.u32(msg.layer);
      w.tensors(msg.tensors);
    } else if constexpr (std::is_same_v<M, LogitsMsg>) {
      w.tensor(msg.tensor);
    } else if constexpr (std::is_same_v<M, LossGradMsg>) {
      w.f64(msg.loss);
      w.tensor(msg.tensor);
    } else if constexpr (std::is_same_v<M, BwdGradMsg>) {
      w.u32(msg.layer);
      w.u8(static_cast<std::uint8_t>(msg.site));
      w.tensors(msg.tensors);
    } else if constexpr (std::is_same_v<M, BwdDeltaGradMsg>) {
      w.u32(msg.layer);
      w.tensor(msg.tensor);
    } else if constexpr (std::is_same_v<M, NormReportMsg>) {
      if (msg.norms.size() > 255) throw InputError("encode: too many norms");
      w.u8(static_cast<std::uint8_t>(msg.norms.size()));
      for (double n : msg.norms) w.f64(n);
    } else if constexpr (std::is_same_v<M, CommandMsg>) {
      if (msg.status.size() > 255 || msg.scores.size() != msg.status.size()) {
        throw InputError("encode: command status and scores must have equal length <= 255");
      }
      w.u8(static_cast<std::uint8_t>(msg.status.size()));
      for (ModuleStatus s : msg.status) w.u8(static_cast<std::uint8_t>(s));
      for (double s : msg.scores) w.f64(s);
    } else if constexpr (std::is_same_v<M, EpochEndMsg>) {
      w.u32(msg.epoch);
      w.u64(msg.sender_flops);
    }
  }, m);
}

WireMessage read_payload(MsgType type, Reader& r) {
  switch (type) {
    case MsgType::Config: {
      ConfigMsg c;
      c.model.vocab = r.u32();
      c.model.d_model = r.u32();
      c.model.n_heads = r.u32();
      c.model.d_ff = r.u32();
      c.model.n_layers = r.u32();
      c.model.max_seq = r.u32();
      const std::uint8_t prec = r.u8();
      if (prec != 32 && prec != 64) throw ProtocolError("decode: invalid precision " + std::to_string(prec));
      c.model.precision = static_cast<Precision>(prec);
      c.model.seed = r.u64();
      c.peft.kind = checked_enum<PeftKind>(r.u8(), 1, "peft kind");
      c.peft.rank = r.u32();
      c.peft.adapter_dim = r.u32();
      c.peft.alpha = r.f64();
      c.mode = checked_enum<Mode>(r.u8(), 2, "mode");
      c.budget = r.u32();
      c.quant_bits = r.u8();
      if (c.quant_bits != 8 && c.quant_bits != 32) throw ProtocolError("decode: invalid quant bits");
      c.policy = checked_enum<FrozenPolicy>(r.u8(), 1, "frozen policy");
      return c;
    }
    case MsgType::FwdActivation: {
      FwdActivationMsg m;
      m.layer = r.u32();
      m.site = checked_enum<Site>(r.u8(), 2, "site");
      m.tensor = r.tensor();
      return m;
    }
    case MsgType::FwdDelta: {
      FwdDeltaMsg m;
      m.layer = r.u32();
      m.tensors = r.tensors();
      return m;
    }
    case MsgType::LogitsToEdge:
      return LogitsMsg{r.tensor()};
    case MsgType::LossGradToCloud: {
      LossGradMsg m;
      m.loss = r.f64();
      m.tensor = r.tensor();
      return m;
    }
    case MsgType::BwdGrad: {
      BwdGradMsg m;
      m.layer = r.u32();
      m.site = checked_enum<Site>(r.u8(), 2, "site");
      m.tensors = r.tensors();
      return m;
    }
    case MsgType::BwdDeltaGrad: {
      BwdDeltaGradMsg m;
      m.layer = r.u32();
      m.tensor = r.tensor();
      return m;
    }
    case MsgType::NormReport: {
      NormReportMsg m;
      m.norms.resize(r.u8());
      for (double& n : m.norms) n = r.f64();
      return m;
    }
    case MsgType::Command: {
      CommandMsg m;
      const std::uint8_t n = r.u8();
      for (int i = 0; i < n; ++i) m.status.push_back(checked_enum<ModuleStatus>(r.u8(), 1, "module status"));
      for (int i = 0; i < n; ++i) m.scores.push_back(r.f64());
      return m;
    }
    case MsgType::EpochEnd: {
      EpochEndMsg m;
      m.epoch = r.u32();
      m.sender_flops = r.u64();
      return m;
    }
    case MsgType::Shutdown:
      return ShutdownMsg{};
  }
  throw ProtocolError("decode: unknown message type");
}

}  // namespace

void append_tensor(std::vector<std::uint8_t>& out, const WireTensor& t) {
  Writer w;
  w.tensor(t);
  const auto bytes = w.take();
  out.insert(out.end(), bytes.begin(), bytes.end());
}

WireTensor read_tensor(std::span<const std::uint8_t> bytes, std::size_t& offset) {
  if (offset > bytes.size()) throw ProtocolError("decode: offset past end of buffer");
  Reader r(bytes.subspan(offset));
  WireTensor t = r.tensor();
  offset += r.consumed();
  return t;
}

FrameHeader decode_header(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kFrameHeaderSize) throw ProtocolError("decode: truncated frame header");
  if (!std::equal(kFrameMagic.begin(), kFrameMagic.end(), bytes.begin())) {
    throw ProtocolError("decode: bad frame magic");
  }
  if (bytes[4] != kProtocolVersion) {
    throw ProtocolError("decode: unsupported protocol version " + std::to_string(bytes[4]));
  }
  const std::uint8_t type = bytes[5];
  if (type < 1 || type > 11) throw ProtocolError("decode: unknown message type " + std::to_string(type));
  FrameHeader h;
  h.type = static_cast<MsgType>(type);
  h.payload_len = static_cast<std::uint32_t>(bytes[6]) | static_cast<std::uint32_t>(bytes[7]) << 8 |
                  static_cast<std::uint32_t>(bytes[8]) << 16 | static_cast<std::uint32_t>(bytes[9]) << 24;
  if (h.payload_len > kMaxPayload) throw ProtocolError("decode: payload exceeds size cap");
  return h;
}

std::vector<std::uint8_t> encode_frame(const WireMessage& m) {
  Writer payload;
  write_payload(payload, m);
  std::vector<std::uint8_t> body = payload.take();
  if (body.size() > kMaxPayload) throw InputError("encode: payload exceeds size cap");
  Writer frame;
  for (std::uint8_t b : kFrameMagic) frame.u8(b);
  frame.u8(kProtocolVersion);
  frame.u8(static_cast<std::uint8_t>(type_of(m)));
  frame.u32(static_cast<std::uint32_t>(body.size()));
  std::vector<std::uint8_t> out = frame.take();
  out.insert(out.end(), body.begin(), body.end());
  return out;
}

WireMessage decode_frame(std::span<const std::uint8_t> frame) {
  const FrameHeader h = decode_header(frame);
  if (frame.size() - kFrameHeaderSize < h.payload_len) throw ProtocolError("decode: truncated payload");
  if (frame.size() - kFrameHeaderSize > h.payload_len) throw ProtocolError("decode: trailing bytes after frame");
  Reader r(frame.subspan(kFrameHeaderSize));
  WireMessage m = read_payload(h.type, r);
  r.finish();
  return m;
}

template QuantizedTensor quantize(const Tensor<float>&);
template QuantizedTensor quantize(const Tensor<double>&);
template Tensor<float> dequantize<float>(const QuantizedTensor&);
template Tensor<double> dequantize<double>(const QuantizedTensor&);
template WireTensor to_wire(const Tensor<float>&, QuantSpec);
template WireTensor to_wire(const Tensor<double>&, QuantSpec);
template Tensor<float> from_wire<float>(const WireTensor&);
template Tensor<double> from_wire<double>(const WireTensor&);

}  // namespace dlora
