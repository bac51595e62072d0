// Copyright 2026 The dlora-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <set>

#include "dlora/protocol.hpp"
#include "support.hpp"

namespace dlora {
namespace {

template <typename V>
void put(std::vector<std::uint8_t>& out, V v) {
  static_assert(std::endian::native == std::endian::little);
  std::uint8_t b[sizeof(V)];
  std::memcpy(b, &v, sizeof(V));
  out.insert(out.end(), b, b + sizeof(V));
}

std::vector<std::uint8_t> header(std::uint8_t type, std::uint32_t len) {
  std::vector<std::uint8_t> h{'D', 'L', 'O', 'R', 1, type};
  put(h, len);
  return h;
}

Tensor<float> random_float(std::uint64_t seed, Dims dims) { return test::cast<float>(test::random_tensor(seed, dims)); }

/// Scale oracle: max|x| / 127 rounded toward zero to float, then the low
/// 7 mantissa bits cleared.
float oracle_scale(const Tensor<double>& x) {
  double m = 0.0;
  for (double v : x.data()) m = std::max(m, std::abs(v));
  const double exact = m / 127.0;
  float s = static_cast<float>(exact);
  if (static_cast<double>(s) > exact) s = std::nextafter(s, 0.0f);
  return std::bit_cast<float>(std::bit_cast<std::uint32_t>(s) & ~std::uint32_t{0x7f});
}

TEST(Quantize, HandExample) {
  const Tensor<double> x({3}, {0, 1, -2});
  const auto q = quantize(x);
  EXPECT_EQ(q.scale, oracle_scale(x));
  EXPECT_NEAR(q.scale, 2.0 / 127.0, 2.0 / 127.0 * std::ldexp(1.0, -16));
  EXPECT_EQ(q.codes, (std::vector<std::int8_t>{0, 64, -127}));
  const auto back = dequantize<double>(q);
  EXPECT_EQ(back[0], 0.0);
  EXPECT_NEAR(back[1], 1.00787, 1e-5);
  EXPECT_NEAR(back[2], -2.0, 1e-6);
}

TEST(Quantize, ZeroTensorIsExact) {
  const Tensor<float> z({4, 4});
  const auto q = quantize(z);
  EXPECT_EQ(q.scale, 0.0f);
  for (auto c : q.codes) EXPECT_EQ(c, 0);
  EXPECT_EQ(dequantize<float>(q), z);
}

TEST(Quantize, CodesMatchRoundingOracleAndErrorBound) {
  Rng rng(8);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.below(64);
    const double span = std::ldexp(1.0, static_cast<int>(rng.below(20)) - 10);
    auto x = test::random_tensor(1000 + trial, {n}, -span, span);
    const auto q = quantize(x);
    const float s = oracle_scale(x);
    ASSERT_EQ(q.scale, s);
    double m = 0.0;
    for (double v : x.data()) m = std::max(m, std::abs(v));
    const auto back = dequantize<double>(q);
    for (std::size_t i = 0; i < n; ++i) {
      const double code = std::clamp(std::round(x[i] / static_cast<double>(s)), -127.0, 127.0);
      EXPECT_EQ(q.codes[i], static_cast<std::int8_t>(code));
      EXPECT_LE(std::abs(back[i] - x[i]), m / 254.0 * (1 + 1e-6));
    }
  }
}

TEST(Quantize, FloatDecodeIsExactAndBounded) {
  for (int trial = 0; trial < 1000; ++trial) {
    const auto x = random_float(5000 + trial, {97});
    const auto q = quantize(x);
    float m = 0.0f;
    for (float v : x.data()) m = std::max(m, std::abs(v));
    const auto wide = dequantize<double>(q);
    const auto back = dequantize<float>(q);
    for (std::size_t i = 0; i < x.size(); ++i) {
      ASSERT_EQ(static_cast<double>(back[i]), wide[i]);
      ASSERT_LE(std::abs(static_cast<double>(back[i]) - static_cast<double>(x[i])), static_cast<double>(m) / 254.0);
    }
  }
}

TEST(Quantize, HalfwayRoundsAwayFromZero) {
  // max 127 gives scale exactly 1, so 2.5 and -0.5 sit exactly between codes.
  const Tensor<double> x({4}, {127, 2.5, -0.5, -126.5});
  const auto q = quantize(x);
  EXPECT_EQ(q.scale, 1.0f);
  EXPECT_EQ(q.codes, (std::vector<std::int8_t>{127, 3, -1, -127}));
}

TEST(TensorEncoding, ByteLayout) {
  const Tensor<float> t({1, 2}, {1.5f, -2.0f});
  std::vector<std::uint8_t> got;
  append_tensor(got, WireTensor{t});
  std::vector<std::uint8_t> want{0, 2};
  put<std::uint32_t>(want, 1);
  put<std::uint32_t>(want, 2);
  put(want, 1.5f);
  put(want, -2.0f);
  EXPECT_EQ(got, want);

  QuantizedTensor q{{3}, 0.5f, {1, -2, 127}};
  got.clear();
  append_tensor(got, WireTensor{q});
  want = {2, 1};
  put<std::uint32_t>(want, 3);
  put(want, 0.5f);
  want.insert(want.end(), {1, 0xFE, 127});
  EXPECT_EQ(got, want);

  std::size_t offset = 0;
  EXPECT_EQ(std::get<QuantizedTensor>(read_tensor(got, offset)), q);
  EXPECT_EQ(offset, got.size());
}

TEST(Frame, ShutdownIsTenBytes) {
  const auto f = encode_frame(ShutdownMsg{});
  EXPECT_EQ(f, header(11, 0));
  EXPECT_EQ(f.size(), kFrameHeaderSize);
}

TEST(Frame, NormReportLayout) {
  NormReportMsg m;
  for (int i = 0; i < 8; ++i) m.norms.push_back(0.25 * i);
  const auto f = encode_frame(m);
  auto want = header(8, 65);
  want.push_back(8);
  for (double v : m.norms) put(want, v);
  EXPECT_EQ(f, want);
}

TEST(Frame, ActivationLayout) {
  const FwdActivationMsg m{3, Site::MlpInput, WireTensor{Tensor<double>({1, 1}, {0.75})}};
  auto want = header(2, 4 + 1 + 2 + 8 + 8);
  put<std::uint32_t>(want, 3);
  want.push_back(1);
  want.insert(want.end(), {1, 2});
  put<std::uint32_t>(want, 1);
  put<std::uint32_t>(want, 1);
  put(want, 0.75);
  EXPECT_EQ(encode_frame(m), want);
}

std::vector<WireMessage> sample_messages() {
  ConfigMsg cfg;
  cfg.model.seed = 0x0123456789ABCDEFULL;
  cfg.model.precision = Precision::F64;
  cfg.peft.kind = PeftKind::Adapter;
  cfg.peft.alpha = 0.375;
  cfg.mode = Mode::KR;
  cfg.budget = 3;
  cfg.quant_bits = 8;
  cfg.policy = FrozenPolicy::ComputeFrozenOnEdge;
  const WireTensor f{random_float(1, {4, 6})};
  const WireTensor d{test::random_tensor(2, {2, 3, 5})};
  const WireTensor q{quantize(random_float(3, {7, 2}))};
  return {cfg,
          FwdActivationMsg{7, Site::QkvInput, f},
          FwdActivationMsg{0, Site::Embedding, q},
          FwdDeltaMsg{2, {f, d, q}},
          LogitsMsg{d},
          LossGradMsg{3.25, f},
          BwdGradMsg{5, Site::MlpInput, {q}},
          BwdDeltaGradMsg{1, d},
          NormReportMsg{{1.0, 0.0, std::numeric_limits<double>::infinity()}},
          CommandMsg{{ModuleStatus::Active, ModuleStatus::Killed}, {0.5, 0.25}},
          EpochEndMsg{4, 123456789012ULL},
          ShutdownMsg{}};
}

TEST(Frame, RoundTripEveryMessageType) {
  const auto msgs = sample_messages();
  std::set<std::uint8_t> types;
  for (const auto& m : msgs) {
    const auto bytes = encode_frame(m);
    EXPECT_EQ(decode_frame(bytes), m) << to_string(type_of(m));
    EXPECT_EQ(bytes[5], static_cast<std::uint8_t>(type_of(m)));
    EXPECT_EQ(decode_header(bytes).payload_len, bytes.size() - kFrameHeaderSize);
    types.insert(bytes[5]);
  }
  EXPECT_EQ(types.size(), 11u);
}

TEST(Frame, RandomActivationRoundTripIsBitIdentical) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto t = random_float(50 + s, {3, 16});
    const FwdActivationMsg m{static_cast<std::uint32_t>(s), Site::QkvInput, to_wire(t, QuantSpec{32})};
    const auto back = std::get<FwdActivationMsg>(decode_frame(encode_frame(m)));
    EXPECT_TRUE(bit_identical(from_wire<float>(back.tensor), t));
  }
}

TEST(Frame, EncodingIsInjective) {
  std::set<std::vector<std::uint8_t>> seen;
  for (const auto& m : sample_messages()) EXPECT_TRUE(seen.insert(encode_frame(m)).second);
  EXPECT_NE(encode_frame(EpochEndMsg{1, 0}), encode_frame(EpochEndMsg{2, 0}));
}

TEST(Frame, RejectsMalformedHeaders) {
  const auto good = encode_frame(EpochEndMsg{1, 2});
  auto bad = good;
  bad[0] = 'X';
  EXPECT_THROW(decode_frame(bad), ProtocolError);
  bad = good;
  bad[4] = 2;
  EXPECT_THROW(decode_frame(bad), ProtocolError);
  for (std::uint8_t type : {0, 12, 255}) {
    bad = good;
    bad[5] = type;
    EXPECT_THROW(decode_frame(bad), ProtocolError);
  }
  EXPECT_THROW(decode_frame(std::span(good).first(9)), ProtocolError);
  EXPECT_THROW(decode_frame(std::span(good).first(good.size() - 1)), ProtocolError);
  bad = good;
  bad.push_back(0);
  EXPECT_THROW(decode_frame(bad), ProtocolError);
  auto huge = header(3, kMaxPayload + 1);
  EXPECT_THROW(decode_header(huge), ProtocolError);
}

TEST(Frame, RejectsInvalidFields) {
  auto act = encode_frame(FwdActivationMsg{0, Site::QkvInput, WireTensor{Tensor<float>({1}, {1.0f})}});
  act[14] = 3;  // site
  EXPECT_THROW(decode_frame(act), ProtocolError);
  act[14] = 0;
  act[15] = 3;  // dtype
  EXPECT_THROW(decode_frame(act), ProtocolError);
  act[15] = 0;
  act[16] = 0;  // ndim
  EXPECT_THROW(decode_frame(act), ProtocolError);

  auto cmd = encode_frame(CommandMsg{{ModuleStatus::Active}, {1.0}});
  cmd[11] = 2;
  EXPECT_THROW(decode_frame(cmd), ProtocolError);

  QuantizedTensor q{{2}, 1.0f, {1, 1}};
  auto frame = encode_frame(LogitsMsg{q});
  frame.back() = 0x80;  // code -128
  EXPECT_THROW(decode_frame(frame), ProtocolError);
}

TEST(Frame, FuzzedFramesNeverCrash) {
  Rng rng(4242);
  const auto msgs = sample_messages();
  std::size_t rejected = 0, total = 0;
  for (int i = 0; i < 3000; ++i) {
    auto bytes = encode_frame(msgs[rng.below(msgs.size())]);
    const int flips = 1 + static_cast<int>(rng.below(4));
    for (int k = 0; k < flips; ++k) bytes[rng.below(bytes.size())] = static_cast<std::uint8_t>(rng.below(256));
    if (rng.below(5) == 0) bytes.resize(rng.below(bytes.size() + 1));
    ++total;
    try {
      decode_frame(bytes);
    } catch (const ProtocolError&) {
      ++rejected;
    }
  }
  for (int i = 0; i < 1000; ++i) {
    std::vector<std::uint8_t> bytes(rng.below(64));
    for (auto& b : bytes) b = static_cast<std::uint8_t>(rng.below(256));
    ++total;
    try {
      decode_frame(bytes);
    } catch (const ProtocolError&) {
      ++rejected;
    }
  }
  EXPECT_GT(rejected, 0u);
  EXPECT_LE(rejected, total);
}

TEST(CostClass, Classification) {
  const WireTensor t{Tensor<float>({1}, {1.0f})};
  EXPECT_EQ(cost_class(FwdActivationMsg{0, Site::Embedding, t}), CostClass::Base);
  EXPECT_EQ(cost_class(FwdActivationMsg{0, Site::QkvInput, t}), CostClass::Module);
  EXPECT_EQ(cost_class(FwdDeltaMsg{0, {t}}), CostClass::Module);
  EXPECT_EQ(cost_class(BwdGradMsg{0, Site::MlpInput, {t}}), CostClass::Module);
  EXPECT_EQ(cost_class(BwdDeltaGradMsg{0, t}), CostClass::Module);
  EXPECT_EQ(cost_class(LogitsMsg{t}), CostClass::Base);
  EXPECT_EQ(cost_class(LossGradMsg{1.0, t}), CostClass::Base);
  EXPECT_EQ(cost_class(NormReportMsg{}), CostClass::Control);
  EXPECT_EQ(cost_class(CommandMsg{}), CostClass::Control);
  EXPECT_EQ(cost_class(ConfigMsg{}), CostClass::Control);
  EXPECT_EQ(cost_class(ShutdownMsg{}), CostClass::Control);
}

TEST(Wire, QuantSpecAndConversion) {
  EXPECT_THROW(QuantSpec{16}.validate(), InputError);
  EXPECT_NO_THROW(QuantSpec{8}.validate());
  const auto t = random_float(9, {4, 4});
  EXPECT_EQ(wire_dtype(to_wire(t, QuantSpec{32})), Dtype::F32);
  EXPECT_EQ(wire_dtype(to_wire(test::cast<double>(t), QuantSpec{32})), Dtype::F64);
  const auto w8 = to_wire(t, QuantSpec{8});
  EXPECT_EQ(wire_dtype(w8), Dtype::Int8);
  EXPECT_EQ(wire_dims(w8), (Dims{4, 4}));
  EXPECT_EQ(from_wire<float>(w8), dequantize<float>(quantize(t)));
}

TEST(Wire, EightBitPayloadRatio) {
  for (std::size_t n : {512u, 1024u, 4096u, 32768u}) {
    const auto t = random_float(n, {n});
    std::vector<std::uint8_t> full, small;
    append_tensor(full, to_wire(t, QuantSpec{32}));
    append_tensor(small, to_wire(t, QuantSpec{8}));
    EXPECT_EQ(full.size(), 2 + 4 + 4 * n);
    EXPECT_EQ(small.size(), 2 + 4 + 4 + n);
    EXPECT_GE(static_cast<double>(full.size()) / static_cast<double>(small.size()), 3.9);
  }
}

}  // namespace
}  // namespace dlora
