// Copyright 2026 The dlora-desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "dlora/cost.hpp"
#include "dlora/model.hpp"
#include "dlora/peft.hpp"
#include "dlora/scheduler.hpp"
#include "dlora/tensor.hpp"

namespace dlora {

/// Malformed, unexpected or out-of-order frames. Always aborts the session.
class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::array<std::uint8_t, 4> kFrameMagic{'D', 'L', 'O', 'R'};
inline constexpr std::uint8_t kProtocolVersion = 1;
inline constexpr std::size_t kFrameHeaderSize = 10;
inline constexpr std::uint32_t kMaxPayload = 1u << 28;
inline constexpr std::uint16_t kDefaultPort = 7431;

enum class MsgType : std::uint8_t {
  Config = 1,
  FwdActivation = 2,
  FwdDelta = 3,
  LogitsToEdge = 4,
  LossGradToCloud = 5,
  BwdGrad = 6,
  BwdDeltaGrad = 7,
  NormReport = 8,
  Command = 9,
  EpochEnd = 10,
  Shutdown = 11,
};

const char* to_string(MsgType t);

/// Where an activation was tapped. Embedding is the initial upload.
enum class Site : std::uint8_t { QkvInput = 0, MlpInput = 1, Embedding = 2 };

enum class Dtype : std::uint8_t { F32 = 0, F64 = 1, Int8 = 2 };

struct QuantSpec {
  std::uint8_t bits = 32;

  void validate() const;
  bool quantized() const { return bits == 8; }
};

/// Symmetric per-tensor int8 codes; value = code * scale.
struct QuantizedTensor {
  Dims dims;
  float scale = 0.0f;
  std::vector<std::int8_t> codes;

  bool operator==(const QuantizedTensor&) const = default;
};

/// scale = max|x| / 127 truncated toward zero to 17 significant bits, so
/// code * scale is exact in float; codes are
/// round-half-away-from-zero of x / scale clamped to [-127, 127].
template <typename T>
QuantizedTensor quantize(const Tensor<T>& t);

template <typename T>
Tensor<T> dequantize(const QuantizedTensor& q);

using WireTensor = std::variant<Tensor<float>, Tensor<double>, QuantizedTensor>;

template <typename T>
WireTensor to_wire(const Tensor<T>& t, QuantSpec quant);

/// Decodes to working precision (dequantizing int8 payloads).
template <typename T>
Tensor<T> from_wire(const WireTensor& w);

Dims wire_dims(const WireTensor& w);

/// Tensor encoding shared by frames and checkpoint files: dtype byte, ndim
/// byte, u32 dims, [f32 scale], little-endian data.
void append_tensor(std::vector<std::uint8_t>& out, const WireTensor& t);

/// Reads one tensor starting at `offset` and advances it. Throws ProtocolError.
WireTensor read_tensor(std::span<const std::uint8_t> bytes, std::size_t& offset);
Dtype wire_dtype(const WireTensor& w);

struct ConfigMsg {
  ModelConfig model;
  PeftConfig peft;
  Mode mode = Mode::FT;
  std::uint32_t budget = 1;
  std::uint8_t quant_bits = 32;
  FrozenPolicy policy = FrozenPolicy::SkipFrozen;

  bool operator==(const ConfigMsg&) const = default;
};

struct FwdActivationMsg {
  std::uint32_t layer = 0;
  Site site = Site::QkvInput;
  WireTensor tensor;
  bool operator==(const FwdActivationMsg&) const = default;
};

struct FwdDeltaMsg {
  std::uint32_t layer = 0;
  std::vector<WireTensor> tensors;  // Q, K, V for LoRA; one for adapters
  bool operator==(const FwdDeltaMsg&) const = default;
};

struct LogitsMsg {
  WireTensor tensor;
  bool operator==(const LogitsMsg&) const = default;
};

struct LossGradMsg {
  double loss = 0.0;
  WireTensor tensor;
  bool operator==(const LossGradMsg&) const = default;
};

struct BwdGradMsg {
  std::uint32_t layer = 0;
  Site site = Site::QkvInput;
  std::vector<WireTensor> tensors;  // dQ, dK, dV for LoRA; d(out) for adapters
  bool operator==(const BwdGradMsg&) const = default;
};

struct BwdDeltaGradMsg {
  std::uint32_t layer = 0;
  WireTensor tensor;
  bool operator==(const BwdDeltaGradMsg&) const = default;
};

struct NormReportMsg {
  std::vector<double> norms;
  bool operator==(const NormReportMsg&) const = default;
};

struct CommandMsg {
  std::vector<ModuleStatus> status;
  std::vector<double> scores;  // the ranking scores behind `status`
  bool operator==(const CommandMsg&) const = default;
};

struct EpochEndMsg {
  std::uint32_t epoch = 0;
  std::uint64_t sender_flops = 0;  // sender's FLOPs during the epoch
  bool operator==(const EpochEndMsg&) const = default;
};

struct ShutdownMsg {
  bool operator==(const ShutdownMsg&) const = default;
};

// Alternative index + 1 is the wire type byte.
using WireMessage = std::variant<ConfigMsg, FwdActivationMsg, FwdDeltaMsg, LogitsMsg, LossGradMsg, BwdGradMsg,
                                 BwdDeltaGradMsg, NormReportMsg, CommandMsg, EpochEndMsg, ShutdownMsg>;

MsgType type_of(const WireMessage& m);

/// Module traffic scales with the number of participating PEFT modules.
CostClass cost_class(const WireMessage& m);

struct FrameHeader {
  MsgType type = MsgType::Shutdown;
  std::uint32_t payload_len = 0;
};

/// Validates magic, version, type and the payload size cap.
FrameHeader decode_header(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> encode_frame(const WireMessage& m);
WireMessage decode_frame(std::span<const std::uint8_t> frame);

}  // namespace dlora
