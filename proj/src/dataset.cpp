// Copyright 2026 The dlora-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "dlora/dataset.hpp"

#include <algorithm>
#include <numeric>

#include "dlora/rng.hpp"

namespace dlora {

namespace {

constexpr std::string_view kAlphabet =
    " abcdefghijklmnopqrstuvwxyz.,;:'!?-\nABCDEFGHIJKLMNOPRSTUVWY0123";

constexpr std::string_view kCorpus =
    "The lighthouse keeper climbed the stairs every evening at the same hour. "
    "He counted the steps, one hundred and twelve, and at the top he wiped the glass "
    "until it was clear enough to see the first ships coming home.\n"
    "In the village below, the baker folded dough and the fishermen mended their nets. "
    "Children ran along the harbour wall, and the gulls followed them, hoping for bread. "
    "When the wind turned cold, the mothers called them in for supper.\n"
    "A small boat left the harbour before dawn. The sea was calm, the sky was grey, "
    "and the old sailor at the oars hummed a song his father had taught him. "
    "He rowed past the rocks, past the buoy, and out to the place where the water turned dark.\n"
    "Winter came early that year. Snow covered the roofs and the paths, "
    "and the river froze from bank to bank. People stayed close to their fires, "
    "told stories, and waited for the long nights to pass.\n"
    "Spring returned slowly. First the ice cracked, then the birds came back, "
    "and one morning the fields were green again. The keeper opened his window, "
    "listened to the water, and smiled, because the light had never gone out.\n"
    "Every story in the village began the same way: once there was a boat, a storm, "
    "and a light on the hill. Every story ended the same way too: the boat came home.\n";

}  // namespace

std::string to_string(Task t) {
  switch (t) {
    case Task::Copy: return "copy";
    case Task::Reverse: return "reverse";
    case Task::CharLm: return "charlm";
  }
  return "?";
}

Task task_from_string(const std::string& s) {
  if (s == "copy") return Task::Copy;
  if (s == "reverse") return Task::Reverse;
  if (s == "charlm") return Task::CharLm;
  throw InputError("unknown task '" + s + "' (expected copy, reverse or charlm)");
}

std::string_view charlm_alphabet() { return kAlphabet; }
std::string_view charlm_corpus() { return kCorpus; }

std::vector<std::int32_t> encode_text(std::string_view text) {
  std::vector<std::int32_t> out;
  for (char c : text) {
    const auto pos = kAlphabet.find(c);
    if (pos != std::string_view::npos) out.push_back(static_cast<std::int32_t>(pos) + 1);
  }
  return out;
}

std::vector<Example> gen_dataset(Task task, std::uint64_t seed, std::size_t n_samples, std::uint32_t vocab,
                                 std::size_t seq_len) {
  if (seq_len < 2) throw InputError("dataset: sequence length must be >= 2");
  Rng rng(seed);
  std::vector<Example> out;
  out.reserve(n_samples);
  if (task == Task::CharLm) {
    if (vocab < kAlphabet.size() + 1) {
      throw InputError("dataset: charlm needs vocab >= " + std::to_string(kAlphabet.size() + 1));
    }
    static const std::vector<std::int32_t> corpus = encode_text(kCorpus);
    if (corpus.size() < seq_len + 1) throw InputError("dataset: sequence longer than the charlm corpus");
    for (std::size_t n = 0; n < n_samples; ++n) {
      const std::size_t start = rng.below(corpus.size() - seq_len);
      Example ex;
      ex.inputs.assign(corpus.begin() + start, corpus.begin() + start + seq_len);
      ex.targets.assign(corpus.begin() + start + 1, corpus.begin() + start + seq_len + 1);
      ex.mask.assign(seq_len, 1);
      out.push_back(std::move(ex));
    }
    return out;
  }
  if (vocab < 3) throw InputError("dataset: copy/reverse need vocab >= 3");
  if (seq_len % 2 != 0) throw InputError("dataset: copy/reverse need an even sequence length");
  const std::size_t k = seq_len / 2;
  for (std::size_t n = 0; n < n_samples; ++n) {
    std::vector<std::int32_t> seg(k);
    for (auto& t : seg) t = static_cast<std::int32_t>(1 + rng.below(vocab - 1));
    std::vector<std::int32_t> seq(seg);
    seq.push_back(kSepToken);
    if (task == Task::Reverse) {
      seq.insert(seq.end(), seg.rbegin(), seg.rend());
    } else {
      seq.insert(seq.end(), seg.begin(), seg.end());
    }
    Example ex;
    ex.inputs.assign(seq.begin(), seq.end() - 1);
    ex.targets.assign(seq.begin() + 1, seq.end());
    ex.mask.assign(seq_len, 0);
    std::fill(ex.mask.begin() + static_cast<std::ptrdiff_t>(k), ex.mask.end(), 1);
    out.push_back(std::move(ex));
  }
  return out;
}

namespace {

Batch gather(const std::vector<Example>& data, std::span<const std::size_t> idx) {
  Batch b;
  b.shape = {idx.size(), data[idx[0]].inputs.size()};
  for (std::size_t i : idx) {
    const Example& ex = data[i];
    if (ex.inputs.size() != b.shape.seq) throw ShapeError("batch: examples differ in length");
    b.tokens.insert(b.tokens.end(), ex.inputs.begin(), ex.inputs.end());
    b.targets.insert(b.targets.end(), ex.targets.begin(), ex.targets.end());
    b.mask.insert(b.mask.end(), ex.mask.begin(), ex.mask.end());
  }
  return b;
}

}  // namespace

std::vector<Batch> make_batches(const std::vector<Example>& data, std::size_t batch_size, std::uint64_t seed,
                                std::size_t epoch) {
  if (batch_size == 0) throw InputError("batch size must be >= 1");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, epoch + 1));
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  std::vector<Batch> out;
  for (std::size_t s = 0; s + batch_size <= order.size(); s += batch_size) {
    out.push_back(gather(data, std::span(order).subspan(s, batch_size)));
  }
  return out;
}

std::vector<Batch> sequential_batches(const std::vector<Example>& data, std::size_t batch_size) {
  if (batch_size == 0) throw InputError("batch size must be >= 1");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<Batch> out;
  for (std::size_t s = 0; s < order.size(); s += batch_size) {
    out.push_back(gather(data, std::span(order).subspan(s, std::min(batch_size, order.size() - s))));
  }
  return out;
}

}  // namespace dlora
