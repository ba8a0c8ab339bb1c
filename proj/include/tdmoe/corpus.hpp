// Copyright (c) 2026, The tdmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tdmoe/rng.hpp"

namespace tdmoe {

/// Byte-level vocabulary: every observed byte value in ascending order, then
/// one unknown symbol for bytes never seen.
class Vocabulary {
 public:
  Vocabulary() { index_.fill(-1); }

  static Vocabulary from_text(std::string_view text);
  /// Symbols must be strictly ascending.
  static Vocabulary from_symbols(std::vector<unsigned char> symbols);

  std::size_t size() const noexcept { return symbols_.size() + 1; }
  int unknown_id() const noexcept { return static_cast<int>(symbols_.size()); }
  int id(unsigned char c) const noexcept {
    return index_[c] < 0 ? unknown_id() : index_[c];
  }
  std::vector<int> encode(std::string_view text) const;
  std::string decode(std::span<const int> ids) const;
  const std::vector<unsigned char>& symbols() const noexcept { return symbols_; }

 private:
  std::vector<unsigned char> symbols_;
  std::array<int, 256> index_{};
};

struct Corpus {
  Vocabulary vocab;
  std::vector<int> train;
  std::vector<int> heldout;
};

struct SplitOptions {
  double heldout_fraction = 0.05;
  std::size_t block_size = 1024;
};

/// Tokenizes `text` and splits it by contiguous blocks of `block_size`
/// tokens: block i is held out iff floor((i+1)f) > floor(i f), which spreads
/// the held-out fraction f evenly through the text.
Corpus split_corpus(std::string_view text, const SplitOptions& options = {});

/// Same split, encoding with an existing vocabulary (unseen bytes map to unk).
Corpus split_corpus(std::string_view text, Vocabulary vocab, const SplitOptions& options = {});

std::string read_text_file(const std::filesystem::path& path);

/// read_text_file + split_corpus. Empty files raise LoadError.
Corpus ingest_corpus(const std::filesystem::path& path, const SplitOptions& options = {});

/// `batch` sequences of `seq` token ids, row-major.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<int> ids;

  std::size_t tokens() const noexcept { return batch * seq; }
  int at(std::size_t b, std::size_t t) const { return ids[b * seq + t]; }
};

/// Random windows of `seq` tokens; offsets drawn from `rng`.
TokenBatch sample_batch(std::span<const int> stream, std::size_t batch, std::size_t seq,
                        Rng& rng);

/// Consecutive non-overlapping windows of `seq` tokens grouped `batch` at a
/// time. `max_tokens` caps the total (0 means no cap); the last batch may be
/// smaller.
std::vector<TokenBatch> eval_batches(std::span<const int> stream, std::size_t batch,
                                     std::size_t seq, std::size_t max_tokens = 0);

/// Deterministic English-like prose of at least `bytes` bytes, generated from
/// a small probabilistic grammar. Used as the default desk corpus.
std::string synthesize_text(std::uint64_t seed, std::size_t bytes);

}  // namespace tdmoe
