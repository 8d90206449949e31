#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string_view>
#include <vector>

#include "tqpt/model.hpp"
#include "tqpt/rng.hpp"

namespace tqpt {

/// Byte-level tokenizer: every byte is one token in [0, 256).
std::vector<std::int32_t> tokenize(std::string_view text);

/// Reads a text file and tokenizes it. Throws InvalidArgument if the file is
/// missing or empty.
std::vector<std::int32_t> load_corpus(const std::filesystem::path& path);

struct CorpusSplit {
  std::vector<std::int32_t> train;
  std::vector<std::int32_t> heldout;
};

/// The final `heldout_fraction` of the tokens becomes the held-out split.
CorpusSplit split_corpus(std::span<const std::int32_t> tokens, double heldout_fraction = 0.1);

struct CalibrationSet {
  std::vector<std::vector<std::int32_t>> sequences;

  std::size_t size() const noexcept { return sequences.size(); }
  std::size_t seq_len() const noexcept { return sequences.empty() ? 0 : sequences.front().size(); }
  std::size_t tokens() const noexcept { return size() * seq_len(); }
  /// N >= 1, equal lengths T <= max_seq_len, every id < vocab_size.
  void validate(const ModelConfig& cfg) const;
};

/// N windows of length T with start offsets drawn uniformly from `rng`.
CalibrationSet sample_calibration(std::span<const std::int32_t> tokens, std::size_t n,
                                  std::size_t seq_len, Rng& rng);

/// exp(mean next-token cross-entropy) over consecutive non-overlapping
/// windows of max_seq_len tokens. A trailing window shorter than two tokens
/// is dropped.
template <typename T>
double perplexity(const BasicModel<T>& model, std::span<const std::int32_t> tokens);

}  // namespace tqpt
