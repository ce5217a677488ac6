#include "regvit/lost.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "regvit/errors.hpp"
#include "regvit/rng.hpp"

namespace regvit {

const char* to_string(FeatureKind kind) {
  switch (kind) {
    case FeatureKind::Keys: return "keys";
    case FeatureKind::Queries: return "queries";
    case FeatureKind::Values: return "values";
    case FeatureKind::Outputs: return "outputs";
  }
  return "outputs";
}

FeatureKind parse_feature_kind(const std::string& text) {
  for (auto kind : {FeatureKind::Keys, FeatureKind::Queries, FeatureKind::Values, FeatureKind::Outputs})
    if (text == to_string(kind)) return kind;
  throw UsageError("unknown feature kind '" + text + "' (expected keys, queries, values or outputs)");
}

Tensor extract_features(const ForwardTrace& trace, FeatureSelection selection) {
  if (!trace.captured) throw ContractError("feature extraction requires a captured trace");
  const std::size_t layer = resolve_layer(selection.layer, trace.depth());
  const Tensor* source = nullptr;
  switch (selection.kind) {
    case FeatureKind::Keys: source = &trace.keys[layer]; break;
    case FeatureKind::Queries: source = &trace.queries[layer]; break;
    case FeatureKind::Values: source = &trace.values[layer]; break;
    case FeatureKind::Outputs: source = &trace.states[layer + 1]; break;
  }
  const std::size_t first = 1 + trace.n_registers;
  return source->slice0(first, source->dim(0));
}

Tensor gram_with_bias(const Tensor& features, double bias) {
  if (features.rank() != 2) throw DimensionError("features must be N × d, got " + shape_to_string(features.shape()));
  Tensor a = matmul_nt(features, features);
  const std::size_t n = a.dim(0);
  for (std::size_t i = 0; i < n; ++i) {
    a.at(i, i) += bias;
    for (std::size_t j = i + 1; j < n; ++j) {
      a.at(i, j) += bias;
      a.at(j, i) = a.at(i, j);
    }
  }
  return a;
}

double auto_bias(const Tensor& features) {
  Tensor a = gram_with_bias(features, 0.0);
  std::vector<double> v(a.data().begin(), a.data().end());
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size();
  const double median = m % 2 ? v[m / 2] : 0.5 * (v[m / 2 - 1] + v[m / 2]);
  return -median;
}

std::vector<std::size_t> degrees(const Tensor& similarity) {
  if (similarity.rank() != 2 || similarity.dim(0) != similarity.dim(1)) {
    throw DimensionError("similarity must be square, got " + shape_to_string(similarity.shape()));
  }
  const std::size_t n = similarity.dim(0);
  std::vector<std::size_t> deg(n, 0);
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t q = 0; q < n; ++q)
      if (q != p && similarity.at(p, q) >= 0.0) ++deg[p];
  return deg;
}

std::size_t select_seed(const Tensor& similarity) {
  const auto deg = degrees(similarity);
  return static_cast<std::size_t>(std::min_element(deg.begin(), deg.end()) - deg.begin());
}

std::size_t default_k(std::size_t n_patches) {
  return std::min(n_patches, (4 * n_patches + 9) / 10);
}

LostIntermediates expand_and_mask(const Tensor& similarity, GridShape grid, std::size_t seed, std::size_t k) {
  LostIntermediates out;
  out.degrees = degrees(similarity);
  const std::size_t n = out.degrees.size();
  if (n != grid.area()) {
    throw DimensionError("similarity covers " + std::to_string(n) + " patches, grid has " + std::to_string(grid.area()));
  }
  if (seed >= n) throw RangeError("seed " + std::to_string(seed) + " out of range for " + std::to_string(n) + " patches");
  if (k < 1 || k > n) throw ContractError("k must lie in [1, " + std::to_string(n) + "], got " + std::to_string(k));
  out.similarity = similarity;
  out.seed = seed;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return out.degrees[a] < out.degrees[b]; });
  std::vector<bool> in_set(n, false);
  in_set[seed] = true;
  for (std::size_t i = 0; i < k; ++i)
    if (similarity.at(order[i], seed) >= 0.0) in_set[order[i]] = true;
  for (std::size_t q = 0; q < n; ++q)
    if (in_set[q]) out.expansion.push_back(q);

  out.mask.assign(n, false);
  for (std::size_t q = 0; q < n; ++q) {
    double score = 0.0;
    for (std::size_t s : out.expansion) score += similarity.at(q, s);
    out.mask[q] = score >= 0.0;
  }

  const int sr = static_cast<int>(seed / grid.cols), sc = static_cast<int>(seed % grid.cols);
  out.box = {sc, sr, sc, sr};
  if (!out.mask[seed]) return out;
  std::vector<bool> seen(n, false);
  std::vector<std::size_t> stack{seed};
  seen[seed] = true;
  while (!stack.empty()) {
    const std::size_t p = stack.back();
    stack.pop_back();
    const int r = static_cast<int>(p / grid.cols), c = static_cast<int>(p % grid.cols);
    out.box = {std::min(out.box.x0, c), std::min(out.box.y0, r), std::max(out.box.x1, c), std::max(out.box.y1, r)};
    const int nr[4] = {r - 1, r + 1, r, r};
    const int nc[4] = {c, c, c - 1, c + 1};
    for (int i = 0; i < 4; ++i) {
      if (nr[i] < 0 || nc[i] < 0 || nr[i] >= static_cast<int>(grid.rows) || nc[i] >= static_cast<int>(grid.cols)) continue;
      const auto q = static_cast<std::size_t>(nr[i]) * grid.cols + static_cast<std::size_t>(nc[i]);
      if (out.mask[q] && !seen[q]) {
        seen[q] = true;
        stack.push_back(q);
      }
    }
  }
  return out;
}

LostIntermediates run_lost(const Tensor& features, GridShape grid, double bias, std::optional<std::size_t> k) {
  const Tensor a = gram_with_bias(features, bias);
  return expand_and_mask(a, grid, select_seed(a), k.value_or(default_k(a.dim(0))));
}

CorlocReport corloc(const std::vector<Box>& predictions, const std::vector<std::vector<Box>>& ground_truth) {
  if (predictions.size() != ground_truth.size()) {
    throw DimensionError(std::to_string(predictions.size()) + " predictions for " + std::to_string(ground_truth.size()) +
                         " images");
  }
  if (predictions.empty()) throw DataError("corloc needs at least one image");
  CorlocReport report;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    if (ground_truth[i].empty()) throw DataError("image " + std::to_string(i) + " has no ground-truth box");
    bool hit = false;
    for (const Box& gt : ground_truth[i]) hit = hit || iou(predictions[i], gt) >= 0.5;
    report.hits.push_back(hit);
    hits += hit ? 1 : 0;
  }
  report.corloc = static_cast<double>(hits) / static_cast<double>(predictions.size());
  return report;
}

PlantedScene planted_scene(std::uint64_t seed, GridShape grid, std::size_t dim, double noise) {
  if (dim < 2) throw ContractError("planted scenes need at least two feature dimensions");
  if (grid.rows < 2 || grid.cols < 2) throw ContractError("planted scenes need a grid of at least 2x2");
  Rng rng(seed);
  // Random orthonormal pair via Gram-Schmidt.
  std::vector<double> u(dim), v(dim);
  for (auto& x : u) x = rng.normal();
  for (auto& x : v) x = rng.normal();
  auto normalize = [](std::vector<double>& w) {
    double s = 0.0;
    for (double x : w) s += x * x;
    for (double& x : w) x /= std::sqrt(s);
  };
  normalize(u);
  double proj = 0.0;
  for (std::size_t i = 0; i < dim; ++i) proj += u[i] * v[i];
  for (std::size_t i = 0; i < dim; ++i) v[i] -= proj * u[i];
  normalize(v);

  // Keep the object strictly under half of the grid area.
  const std::size_t area = grid.area();
  int w = 0, h = 0;
  do {
    w = static_cast<int>(rng.uniform_int(1, static_cast<std::int64_t>(grid.cols) / 2 + 1));
    h = static_cast<int>(rng.uniform_int(1, static_cast<std::int64_t>(grid.rows) / 2 + 1));
  } while (2 * static_cast<std::size_t>(w * h) >= area);
  const int x0 = static_cast<int>(rng.uniform_int(0, static_cast<std::int64_t>(grid.cols) - w));
  const int y0 = static_cast<int>(rng.uniform_int(0, static_cast<std::int64_t>(grid.rows) - h));

  PlantedScene scene{Tensor({area, dim}), {x0, y0, x0 + w - 1, y0 + h - 1}};
  for (std::size_t p = 0; p < area; ++p) {
    const int r = static_cast<int>(p / grid.cols), c = static_cast<int>(p % grid.cols);
    const bool inside = c >= x0 && c <= scene.object.x1 && r >= y0 && r <= scene.object.y1;
    const auto& base = inside ? v : u;
    for (std::size_t j = 0; j < dim; ++j) scene.features.at(p, j) = base[j] + noise * rng.normal();
  }
  return scene;
}

}  // namespace regvit
