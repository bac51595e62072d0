// Copyright 2026 The dlora-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "dlora/checkpoint.hpp"

#include <array>
#include <fstream>
#include <iterator>
#include <string>
#include <type_traits>

#include "dlora/protocol.hpp"

namespace dlora {

namespace {

constexpr std::array<std::uint8_t, 4> kBackboneMagic{'D', 'L', 'B', 'K'};
constexpr std::array<std::uint8_t, 4> kPoolMagic{'D', 'L', 'P', 'F'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Cursor {
 public:
  explicit Cursor(std::span<const std::uint8_t> b) : b_(b) {}

  std::uint8_t u8() {
    need(1);
    return b_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b_[pos_++]) << (8 * i);
    return v;
  }
  void magic(const std::array<std::uint8_t, 4>& m, const char* what) {
    need(4);
    for (std::uint8_t c : m) {
      if (b_[pos_++] != c) throw CheckpointError(std::string(what) + ": bad magic");
    }
    if (u8() != kCheckpointVersion) throw CheckpointError(std::string(what) + ": unsupported version");
  }
  template <typename T>
  Tensor<T> any_tensor(const char* what) {
    try {
      return from_wire<T>(read_tensor(b_, pos_));
    } catch (const ProtocolError& e) {
      throw CheckpointError(std::string(what) + ": " + e.what());
    }
  }
  template <typename T>
  Tensor<T> tensor(const Dims& expect, const char* what) {
    WireTensor w;
    try {
      w = read_tensor(b_, pos_);
    } catch (const ProtocolError& e) {
      throw CheckpointError(std::string(what) + ": " + e.what());
    }
    if (wire_dims(w) != expect) {
      throw CheckpointError(std::string(what) + ": tensor shape " + dims_to_string(wire_dims(w)) + ", expected " +
                            dims_to_string(expect));
    }
    return from_wire<T>(w);
  }
  void finish(const char* what) const {
    if (pos_ != b_.size()) throw CheckpointError(std::string(what) + ": trailing bytes");
  }

 private:
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) throw CheckpointError("checkpoint truncated");
  }
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

ModelConfig read_config(Cursor& c) {
  ModelConfig cfg;
  cfg.vocab = c.u32();
  cfg.d_model = c.u32();
  cfg.n_heads = c.u32();
  cfg.d_ff = c.u32();
  cfg.n_layers = c.u32();
  cfg.max_seq = c.u32();
  const std::uint32_t prec = c.u32();
  if (prec != 32 && prec != 64) throw CheckpointError("backbone checkpoint: invalid precision");
  cfg.precision = static_cast<Precision>(prec);
  cfg.seed = c.u64();
  try {
    cfg.validate();
  } catch (const InputError& e) {
    throw CheckpointError(std::string("backbone checkpoint: ") + e.what());
  }
  return cfg;
}

}  // namespace

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("write failed for " + path.string());
}

template <typename T>
std::vector<std::uint8_t> serialize_backbone(const Backbone<T>& b) {
  std::vector<std::uint8_t> out(kBackboneMagic.begin(), kBackboneMagic.end());
  out.push_back(kCheckpointVersion);
  const ModelConfig& c = b.config;
  for (std::uint32_t v : {c.vocab, c.d_model, c.n_heads, c.d_ff, c.n_layers, c.max_seq}) put_u32(out, v);
  put_u32(out, static_cast<std::uint32_t>(c.precision));
  put_u64(out, c.seed);
  for (const Tensor<T>* t : b.tensors()) append_tensor(out, *t);
  return out;
}

template <typename T>
Backbone<T> deserialize_backbone(std::span<const std::uint8_t> bytes) {
  Cursor c(bytes);
  c.magic(kBackboneMagic, "backbone checkpoint");
  const ModelConfig cfg = read_config(c);
  const Precision want = std::is_same_v<T, double> ? Precision::F64 : Precision::F32;
  if (cfg.precision != want) {
    throw CheckpointError("backbone checkpoint: stored as " + std::to_string(static_cast<int>(cfg.precision)) +
                          "-bit, requested " + std::to_string(static_cast<int>(want)) + "-bit");
  }
  // Shapes come from a freshly initialized backbone of the same config.
  Backbone<T> b = Backbone<T>::init(cfg);
  for (Tensor<T>* t : b.tensors()) *t = c.tensor<T>(t->dims(), "backbone checkpoint");
  c.finish("backbone checkpoint");
  return b;
}

ModelConfig peek_backbone_config(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  Cursor c(bytes);
  c.magic(kBackboneMagic, "backbone checkpoint");
  return read_config(c);
}

template <typename T>
void save_backbone(const Backbone<T>& b, const std::filesystem::path& path) {
  write_file(path, serialize_backbone(b));
}

template <typename T>
Backbone<T> load_backbone(const std::filesystem::path& path) {
  return deserialize_backbone<T>(read_file(path));
}

template <typename T>
std::vector<std::uint8_t> serialize_pool(const PeftPool<T>& pool) {
  std::vector<std::uint8_t> out(kPoolMagic.begin(), kPoolMagic.end());
  out.push_back(kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(pool.size()));
  for (const auto& m : pool) {
    out.push_back(static_cast<std::uint8_t>(m.kind()));
    out.push_back(static_cast<std::uint8_t>(m.status));
    for (const Tensor<T>* t : m.params()) append_tensor(out, *t);
  }
  return out;
}

template <typename T>
PeftPool<T> deserialize_pool(std::span<const std::uint8_t> bytes, double alpha) {
  Cursor c(bytes);
  c.magic(kPoolMagic, "peft checkpoint");
  const std::uint32_t n = c.u32();
  if (n == 0 || n > 255) throw CheckpointError("peft checkpoint: invalid module count");
  PeftPool<T> pool;
  for (std::uint32_t l = 0; l < n; ++l) {
    const std::uint8_t kind = c.u8();
    const std::uint8_t status = c.u8();
    if (kind > 1 || status > 1) throw CheckpointError("peft checkpoint: invalid kind or status byte");
    PeftModule<T> m;
    m.layer = l;
    m.status = static_cast<ModuleStatus>(status);
    if (l > 0 && pool.front().kind() != static_cast<PeftKind>(kind)) {
      throw CheckpointError("peft checkpoint: mixed module kinds");
    }
    constexpr const char* what = "peft checkpoint";
    if (static_cast<PeftKind>(kind) == PeftKind::Lora) {
      LoraTriplet<T> trip;
      for (auto& p : trip.qkv) {
        p.down = c.any_tensor<T>(what);
        if (p.down.dims().size() != 2) throw CheckpointError("peft checkpoint: LoRA factor must be a matrix");
        p.up = c.tensor<T>(p.down.dims(), what);
        p.alpha = static_cast<T>(alpha);
      }
      m.body = std::move(trip);
    } else {
      SerialAdapter<T> a;
      a.w_a = c.any_tensor<T>(what);
      if (a.w_a.dims().size() != 2) throw CheckpointError("peft checkpoint: adapter W_a must be a matrix");
      const std::size_t d = a.w_a.dims()[0], k = a.w_a.dims()[1];
      a.b_a = c.tensor<T>({k}, what);
      a.w_b = c.tensor<T>({k, d}, what);
      a.b_b = c.tensor<T>({d}, what);
      m.body = std::move(a);
    }
    pool.push_back(std::move(m));
  }
  c.finish("peft checkpoint");
  return pool;
}

template <typename T>
void save_pool(const PeftPool<T>& pool, const std::filesystem::path& path) {
  write_file(path, serialize_pool(pool));
}

template <typename T>
PeftPool<T> load_pool(const std::filesystem::path& path, double alpha) {
  return deserialize_pool<T>(read_file(path), alpha);
}

#define DLORA_INSTANTIATE(T)                                                                 \
  template std::vector<std::uint8_t> serialize_backbone(const Backbone<T>&);                \
  template Backbone<T> deserialize_backbone<T>(std::span<const std::uint8_t>);              \
  template void save_backbone(const Backbone<T>&, const std::filesystem::path&);            \
  template Backbone<T> load_backbone<T>(const std::filesystem::path&);                      \
  template std::vector<std::uint8_t> serialize_pool(const PeftPool<T>&);                    \
  template PeftPool<T> deserialize_pool<T>(std::span<const std::uint8_t>, double);          \
  template void save_pool(const PeftPool<T>&, const std::filesystem::path&);                \
  template PeftPool<T> load_pool<T>(const std::filesystem::path&, double);

DLORA_INSTANTIATE(float)
DLORA_INSTANTIATE(double)

}  // namespace dlora
