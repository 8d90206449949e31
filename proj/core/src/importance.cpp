#include "tqpt/importance.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tqpt/parallel.hpp"

namespace tqpt {

std::vector<double> fisher_diag(std::size_t n_samples, std::size_t dim, const SampleGradient& grad) {
  if (n_samples == 0) throw InvalidArgument("fisher_diag: no samples");
  std::vector<double> acc(dim, 0.0);
  const std::size_t chunk = std::max<std::size_t>(1, worker_count());
  std::vector<std::vector<double>> slots(chunk);
  for (std::size_t base = 0; base < n_samples; base += chunk) {
    const std::size_t count = std::min(chunk, n_samples - base);
    parallel_for(count, [&](std::size_t i) {
      slots[i].assign(dim, 0.0);
      grad(base + i, slots[i]);
    });
    for (std::size_t i = 0; i < count; ++i)
      for (std::size_t j = 0; j < dim; ++j) acc[j] += slots[i][j] * slots[i][j];
  }
  const double inv = 1.0 / static_cast<double>(n_samples);
  for (auto& v : acc) v *= inv;
  return acc;
}

FisherDiag fisher_diag(const Model& model, const CalibrationSet& calib) {
  calib.validate(model.config());
  const auto& params = model.params();
  const auto layers = params.layers();
  std::vector<std::size_t> offsets;
  std::size_t dim = 0;
  for (const auto& id : layers) {
    offsets.push_back(dim);
    dim += params.n_params(id);
  }
  const auto flat = fisher_diag(calib.size(), dim, [&](std::size_t n, std::span<double> g) {
    ParamRegistry<float> grads(model.config());
    model.sequence_loss(calib.sequences[n], &grads);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto src = std::as_const(grads).weight(layers[l]).data();
      std::copy(src.begin(), src.end(), g.begin() + static_cast<std::ptrdiff_t>(offsets[l]));
    }
  });
  FisherDiag out;
  out.layers.reserve(layers.size());
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& w = params.weight(layers[l]);
    std::vector<double> v(flat.begin() + static_cast<std::ptrdiff_t>(offsets[l]),
                          flat.begin() + static_cast<std::ptrdiff_t>(offsets[l] + w.size()));
    out.layers.emplace_back(w.shape(), std::move(v));
  }
  return out;
}

ChannelImportance channel_scores(const FisherDiag& fisher) {
  ChannelImportance out;
  out.scores.reserve(fisher.layers.size());
  for (const auto& f : fisher.layers) {
    const std::size_t rows = f.rows(), cols = f.cols();
    std::vector<double> s(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      double sum = 0.0;
      const double* row = f.row(r);
      for (std::size_t c = 0; c < cols; ++c) sum += row[c];
      s[r] = sum / static_cast<double>(cols);
    }
    out.scores.push_back(std::move(s));
  }
  return out;
}

void to_json(nlohmann::json& j, const ChannelImportance& c) {
  j = nlohmann::json{{"layers", nlohmann::json::array()}};
  for (std::size_t l = 0; l < c.scores.size(); ++l) {
    const auto id = LayerId::from_index(l);
    j["layers"].push_back({{"block", id.block},
                           {"kind", to_string(id.kind)},
                           {"c_out", c.scores[l].size()},
                           {"scores", c.scores[l]}});
  }
}

void from_json(const nlohmann::json& j, ChannelImportance& c) {
  c.scores.clear();
  for (const auto& layer : j.at("layers")) {
    const LayerId id{layer.at("block").get<std::size_t>(),
                     parse_layer_kind(layer.at("kind").get<std::string>())};
    if (id.index() != c.scores.size())
      throw InvalidArgument("importance file lists layers out of canonical order");
    auto s = layer.at("scores").get<std::vector<double>>();
    if (s.size() != layer.at("c_out").get<std::size_t>())
      throw InvalidArgument("importance file: score count differs from c_out for " + id.name());
    c.scores.push_back(std::move(s));
  }
}

std::size_t high_channel_count(double ratio, std::size_t c_out) {
  if (!(ratio >= 0.0 && ratio <= 1.0))
    throw InvalidArgument("ratio " + std::to_string(ratio) + " outside [0, 1]");
  if (ratio == 0.0) return 0;
  const auto n = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(c_out)));
  return std::clamp<std::size_t>(n, 1, c_out);
}

std::vector<std::size_t> channel_ranking(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

ChannelPartition partition(const ChannelImportance& importance, LayerId layer, double ratio) {
  const auto& s = importance.layer(layer);
  const std::size_t n = high_channel_count(ratio, s.size());
  auto order = channel_ranking(s);
  order.resize(n);
  std::sort(order.begin(), order.end());
  return {layer, ratio, std::move(order)};
}

}  // namespace tqpt
