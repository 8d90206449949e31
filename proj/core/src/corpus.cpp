#include "tqpt/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <string>

#include "tqpt/parallel.hpp"

namespace tqpt {

std::vector<std::int32_t> tokenize(std::string_view text) {
  std::vector<std::int32_t> out;
  out.reserve(text.size());
  for (char ch : text) out.push_back(static_cast<std::int32_t>(static_cast<unsigned char>(ch)));
  return out;
}

std::vector<std::int32_t> load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidArgument("cannot open corpus " + path.string());
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (text.empty()) throw InvalidArgument("corpus " + path.string() + " is empty");
  return tokenize(text);
}

CorpusSplit split_corpus(std::span<const std::int32_t> tokens, double heldout_fraction) {
  if (tokens.empty()) throw InvalidArgument("split_corpus: empty corpus");
  if (!(heldout_fraction >= 0.0 && heldout_fraction < 1.0)) {
    throw InvalidArgument("split_corpus: held-out fraction must lie in [0, 1)");
  }
  const auto n_train = tokens.size() - static_cast<std::size_t>(
                                           std::floor(heldout_fraction * static_cast<double>(tokens.size())));
  CorpusSplit s;
  s.train.assign(tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.heldout.assign(tokens.begin() + static_cast<std::ptrdiff_t>(n_train), tokens.end());
  return s;
}

void CalibrationSet::validate(const ModelConfig& cfg) const {
  if (sequences.empty()) throw InvalidArgument("calibration set is empty");
  const std::size_t t = sequences.front().size();
  if (t < 1 || t > cfg.max_seq_len) {
    throw InvalidArgument("calibration length " + std::to_string(t) + " outside [1, " +
                          std::to_string(cfg.max_seq_len) + "]");
  }
  for (const auto& s : sequences) {
    if (s.size() != t) throw InvalidArgument("calibration sequences have unequal lengths");
    for (auto id : s) {
      if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
        throw InvalidArgument("calibration token id " + std::to_string(id) + " out of range");
      }
    }
  }
}

CalibrationSet sample_calibration(std::span<const std::int32_t> tokens, std::size_t n,
                                  std::size_t seq_len, Rng& rng) {
  if (n == 0 || seq_len == 0) throw InvalidArgument("sample_calibration: N and T must be >= 1");
  if (tokens.size() < seq_len) {
    throw InvalidArgument("sample_calibration: corpus of " + std::to_string(tokens.size()) +
                          " tokens is shorter than T=" + std::to_string(seq_len));
  }
  CalibrationSet set;
  set.sequences.reserve(n);
  const std::size_t starts = tokens.size() - seq_len + 1;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t s = rng.below(starts);
    set.sequences.emplace_back(tokens.begin() + static_cast<std::ptrdiff_t>(s),
                               tokens.begin() + static_cast<std::ptrdiff_t>(s + seq_len));
  }
  return set;
}

template <typename T>
double perplexity(const BasicModel<T>& model, std::span<const std::int32_t> tokens) {
  if (tokens.size() < 2) throw InvalidArgument("perplexity: corpus needs at least two tokens");
  const std::size_t w = model.config().max_seq_len;
  std::vector<std::span<const std::int32_t>> windows;
  for (std::size_t s = 0; s < tokens.size(); s += w) {
    const std::size_t len = std::min(w, tokens.size() - s);
    if (len >= 2) windows.push_back(tokens.subspan(s, len));
  }
  std::vector<double> sums(windows.size());
  parallel_for(windows.size(), [&](std::size_t i) {
    const double mean = model.sequence_loss(windows[i]);
    sums[i] = mean * static_cast<double>(windows[i].size() - 1);
  });
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < windows.size(); ++i) {
    total += sums[i];
    count += windows[i].size() - 1;
  }
  return std::exp(total / static_cast<double>(count));
}

template double perplexity<float>(const BasicModel<float>&, std::span<const std::int32_t>);
template double perplexity<double>(const BasicModel<double>&, std::span<const std::int32_t>);

}  // namespace tqpt
