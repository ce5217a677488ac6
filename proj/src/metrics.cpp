#include "regvit/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "regvit/errors.hpp"
#include "regvit/parallel.hpp"

namespace regvit {

namespace {

constexpr double kTwoOverPi = 0.6366197723675814;

double quantile(const std::vector<double>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

}  // namespace

const char* to_string(TokenType type) {
  switch (type) {
    case TokenType::Cls: return "cls";
    case TokenType::Register: return "register";
    case TokenType::Patch: return "patch";
  }
  return "patch";
}

Tensor token_norms(const Tensor& features) {
  if (features.rank() != 2) throw DimensionError("token_norms expects T x d, got " + shape_to_string(features.shape()));
  Tensor out({features.dim(0)});
  for (std::size_t i = 0; i < features.dim(0); ++i) {
    double s = 0.0;
    for (double v : features.row(i)) s += v * v;
    out[i] = std::sqrt(s);
  }
  return out;
}

OutlierReport detect_outliers(const Tensor& norms, double tau, TokenLayout layout) {
  if (!(tau > 0.0)) throw ContractError("outlier threshold must be positive");
  OutlierReport report;
  report.norms = norms;
  report.tau = tau;
  std::size_t patches = 0, patch_outliers = 0;
  for (std::size_t i = 0; i < norms.numel(); ++i) {
    const bool out = norms[i] > tau;
    const TokenType type = layout.type_of(i);
    report.mask.push_back(out);
    report.types.push_back(type);
    auto& s = report.by_type[static_cast<std::size_t>(type)];
    ++s.count;
    s.outliers += out ? 1 : 0;
    s.mean_norm += norms[i];
    s.max_norm = std::max(s.max_norm, norms[i]);
    if (type == TokenType::Patch) {
      ++patches;
      patch_outliers += out ? 1 : 0;
    }
  }
  for (auto& s : report.by_type)
    if (s.count) s.mean_norm /= static_cast<double>(s.count);
  report.proportion = patches ? static_cast<double>(patch_outliers) / static_cast<double>(patches) : 0.0;
  return report;
}

Threshold auto_threshold(std::span<const double> norms) {
  if (norms.size() < 2) throw ContractError("auto_threshold needs at least two norms");
  std::vector<double> logs;
  logs.reserve(norms.size());
  for (double v : norms) {
    if (!(v > 0.0) || !std::isfinite(v)) throw DataError("auto_threshold needs positive finite norms");
    logs.push_back(std::log(v));
  }
  std::sort(logs.begin(), logs.end());
  if (logs.front() == logs.back()) {
    throw DataError("all norms are equal; no cut exists, pass a manual threshold");
  }
  const auto n = static_cast<double>(logs.size());
  const double total_sum = std::accumulate(logs.begin(), logs.end(), 0.0);
  const double mean = total_sum / n;
  double total_var = 0.0;
  for (double v : logs) total_var += (v - mean) * (v - mean);
  total_var /= n;

  double best = -1.0;
  std::size_t best_k = 0;
  double prefix = 0.0;
  for (std::size_t k = 1; k < logs.size(); ++k) {
    prefix += logs[k - 1];
    if (logs[k] == logs[k - 1]) continue;
    const double w0 = static_cast<double>(k) / n;
    const double w1 = 1.0 - w0;
    const double mu0 = prefix / static_cast<double>(k);
    const double mu1 = (total_sum - prefix) / static_cast<double>(logs.size() - k);
    const double between = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
    if (between > best) {
      best = between;
      best_k = k;
    }
  }
  Threshold t;
  t.tau = std::exp(0.5 * (logs[best_k - 1] + logs[best_k]));
  t.separability = total_var > 0.0 ? best / total_var : 0.0;
  t.confidence = std::clamp((t.separability - kTwoOverPi) / (1.0 - kTwoOverPi), 0.0, 1.0);
  t.low_confidence = t.confidence < 0.5;
  return t;
}

NormSummary summarize_norms(std::vector<double> values) {
  if (values.empty()) throw DataError("cannot summarize an empty norm list");
  std::sort(values.begin(), values.end());
  return {quantile(values, 0.01), quantile(values, 0.25), quantile(values, 0.50),
          quantile(values, 0.75), quantile(values, 0.99), values.back()};
}

Tensor patch_norms_by_layer(const ForwardTrace& trace) {
  if (!trace.captured) throw ContractError("per-layer norms require a captured trace");
  const std::size_t first_patch = 1 + trace.n_registers;
  const std::size_t n = trace.grid.area();
  const std::size_t begin = trace.depth() == 0 ? 0 : 1;
  const std::size_t layers = trace.states.size() - begin;
  Tensor out({layers, n});
  for (std::size_t l = 0; l < layers; ++l) {
    const Tensor norms = token_norms(trace.states[begin + l]);
    for (std::size_t p = 0; p < n; ++p) out.at(l, p) = norms[first_patch + p];
  }
  return out;
}

LayerNormProfile profile_from_norms(const Tensor& layer_norms) {
  if (layer_norms.rank() != 2) throw DimensionError("layer norms must be [layers, N]");
  LayerNormProfile profile;
  for (std::size_t l = 0; l < layer_norms.dim(0); ++l) {
    const auto row = layer_norms.row(l);
    profile.layers.push_back(summarize_norms(std::vector<double>(row.begin(), row.end())));
  }
  return profile;
}

LayerNormProfile norms_by_layer(const ForwardTrace& trace) { return profile_from_norms(patch_norms_by_layer(trace)); }

std::vector<NormSummary> norms_by_checkpoint(const std::vector<Snapshot>& checkpoints, const ModelConfig& config,
                                             const Dataset& probe_set) {
  if (probe_set.empty()) throw DataError("probe set is empty");
  std::vector<NormSummary> series;
  for (const auto& ck : checkpoints) {
    check_params(config, ck.params);
    std::vector<Tensor> per_image(probe_set.size());
    parallel_for(probe_set.size(), [&](std::size_t i) {
      per_image[i] = token_norms(split_outputs(run_model(probe_set[i].image, ck.params, config, false)).patches);
    });
    std::vector<double> pooled;
    for (const auto& norms : per_image) pooled.insert(pooled.end(), norms.data().begin(), norms.data().end());
    series.push_back(summarize_norms(std::move(pooled)));
  }
  return series;
}

NeighborCosine neighbor_cosine(const Tensor& patch_embeds, GridShape grid, const std::vector<bool>& outlier_mask) {
  if (patch_embeds.rank() != 2 || patch_embeds.dim(0) != grid.area()) {
    throw DimensionError("patch embeddings " + shape_to_string(patch_embeds.shape()) + " do not cover a " +
                         std::to_string(grid.rows) + "x" + std::to_string(grid.cols) + " grid");
  }
  if (outlier_mask.size() != grid.area()) throw DimensionError("outlier mask size does not match the grid");
  const std::size_t n = grid.area();
  const Tensor norms = token_norms(patch_embeds);
  NeighborCosine result;
  result.per_patch = Tensor({n});
  result.zero_vector.resize(n);
  for (std::size_t p = 0; p < n; ++p) result.zero_vector[p] = norms[p] == 0.0;

  auto cosine = [&](std::size_t a, std::size_t b) {
    if (result.zero_vector[a] || result.zero_vector[b]) return 0.0;
    double dot = 0.0;
    const auto ra = patch_embeds.row(a), rb = patch_embeds.row(b);
    for (std::size_t k = 0; k < ra.size(); ++k) dot += ra[k] * rb[k];
    return dot / (norms[a] * norms[b]);
  };

  for (std::size_t r = 0; r < grid.rows; ++r) {
    for (std::size_t c = 0; c < grid.cols; ++c) {
      const std::size_t p = r * grid.cols + c;
      double total = 0.0;
      int count = 0;
      if (r > 0) total += cosine(p, p - grid.cols), ++count;
      if (r + 1 < grid.rows) total += cosine(p, p + grid.cols), ++count;
      if (c > 0) total += cosine(p, p - 1), ++count;
      if (c + 1 < grid.cols) total += cosine(p, p + 1), ++count;
      const double mean = count ? total / count : 0.0;
      result.per_patch[p] = mean;
      (outlier_mask[p] ? result.outlier_dist : result.normal_dist).push_back(mean);
    }
  }
  return result;
}

PositionHeatmap position_heatmap(std::span<const Tensor> patch_norms, GridShape grid, double tau) {
  if (!(tau > 0.0)) throw ContractError("outlier threshold must be positive");
  if (patch_norms.empty()) throw DataError("position heatmap needs at least one image");
  PositionHeatmap map;
  map.grid = grid;
  map.n_images = patch_norms.size();
  map.counts.assign(grid.area(), 0);
  for (std::size_t i = 0; i < patch_norms.size(); ++i) {
    if (patch_norms[i].numel() != grid.area()) {
      throw DataError("image " + std::to_string(i) + " has " + std::to_string(patch_norms[i].numel()) +
                      " patches; mixed resolutions are not supported (grid has " + std::to_string(grid.area()) + ")");
    }
    for (std::size_t p = 0; p < grid.area(); ++p)
      if (patch_norms[i][p] > tau) ++map.counts[p];
  }
  map.frequency = Tensor({grid.rows, grid.cols});
  for (std::size_t p = 0; p < grid.area(); ++p) {
    map.frequency[p] = static_cast<double>(map.counts[p]) / static_cast<double>(map.n_images);
  }
  return map;
}

PositionHeatmap position_heatmap(const Params& params, const ModelConfig& config, const Dataset& dataset, double tau) {
  const Shape expected{config.channels, config.image_size, config.image_size};
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    if (dataset[i].image.shape() != expected) {
      throw DataError("image " + std::to_string(i) + " has shape " + shape_to_string(dataset[i].image.shape()) +
                      "; mixed resolutions are not supported");
    }
  }
  std::vector<Tensor> norms(dataset.size());
  parallel_for(dataset.size(), [&](std::size_t i) {
    norms[i] = token_norms(split_outputs(run_model(dataset[i].image, params, config, false)).patches);
  });
  return position_heatmap(norms, config.grid(), tau);
}

}  // namespace regvit
