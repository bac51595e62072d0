// Copyright 2026 The dlora-desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "dlora/model.hpp"

namespace dlora {

enum class Task : std::uint8_t { Copy = 0, Reverse = 1, CharLm = 2 };

std::string to_string(Task t);
Task task_from_string(const std::string& s);

/// Token id reserved as the separator for copy/reverse.
inline constexpr std::int32_t kSepToken = 0;

/// One training sequence. `mask[i]` selects the positions whose prediction
/// counts toward loss and accuracy.
struct Example {
  std::vector<std::int32_t> inputs;
  std::vector<std::int32_t> targets;
  std::vector<std::uint8_t> mask;
};

/// copy/reverse: a random segment s of length seq_len/2 over ids 1..V-1;
/// the sequence is s SEP s (or s SEP reverse(s)); inputs drop the last
/// token, targets drop the first, and only the continuation counts.
/// charlm: windows of the embedded corpus, every position counts.
std::vector<Example> gen_dataset(Task task, std::uint64_t seed, std::size_t n_samples, std::uint32_t vocab,
                                 std::size_t seq_len);

struct Batch {
  SeqShape shape;
  std::vector<std::int32_t> tokens;
  std::vector<std::int32_t> targets;
  std::vector<std::uint8_t> mask;
};

/// Full batches of a per-epoch deterministic permutation; a trailing partial
/// batch is dropped so every step has the same shape.
std::vector<Batch> make_batches(const std::vector<Example>& data, std::size_t batch_size, std::uint64_t seed,
                                std::size_t epoch);

/// Batches in dataset order, keeping a trailing partial batch (evaluation).
std::vector<Batch> sequential_batches(const std::vector<Example>& data, std::size_t batch_size);

/// Character vocabulary of the charlm task; id = index + 1.
std::string_view charlm_alphabet();
std::string_view charlm_corpus();
std::vector<std::int32_t> encode_text(std::string_view text);

}  // namespace dlora
