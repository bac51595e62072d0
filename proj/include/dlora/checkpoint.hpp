// Copyright 2026 The dlora-desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <vector>

#include "dlora/model.hpp"
#include "dlora/peft.hpp"

namespace dlora {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint8_t kCheckpointVersion = 1;

/// "DLBK", version, ModelConfig as little-endian integers, then every backbone
/// tensor in declaration order in the frame tensor encoding.
template <typename T>
std::vector<std::uint8_t> serialize_backbone(const Backbone<T>& b);

template <typename T>
Backbone<T> deserialize_backbone(std::span<const std::uint8_t> bytes);

/// Reads only the config block of a backbone checkpoint.
ModelConfig peek_backbone_config(const std::filesystem::path& path);

template <typename T>
void save_backbone(const Backbone<T>& b, const std::filesystem::path& path);

template <typename T>
Backbone<T> load_backbone(const std::filesystem::path& path);

/// "DLPF", version, u32 module count, then per module: kind byte, status
/// byte, tensors. LoRA alpha is not stored; it comes from the run config.
template <typename T>
std::vector<std::uint8_t> serialize_pool(const PeftPool<T>& pool);

template <typename T>
PeftPool<T> deserialize_pool(std::span<const std::uint8_t> bytes, double alpha);

template <typename T>
void save_pool(const PeftPool<T>& pool, const std::filesystem::path& path);

template <typename T>
PeftPool<T> load_pool(const std::filesystem::path& path, double alpha);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace dlora
