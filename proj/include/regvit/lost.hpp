#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "regvit/box.hpp"
#include "regvit/tensor.hpp"
#include "regvit/vit.hpp"

// LOST-style object discovery on patch features: degree-based seed, seed
// expansion over the lowest-degree patches, mask, and the box of the seed's
// connected mask component.
namespace regvit {

enum class FeatureKind { Keys, Queries, Values, Outputs };
const char* to_string(FeatureKind kind);
FeatureKind parse_feature_kind(const std::string& text);

struct FeatureSelection {
  FeatureKind kind = FeatureKind::Outputs;
  int layer = -1;  // negative counts from the last block
};

// Patch rows (CLS and registers removed) of the selected per-layer tensor;
// keys/queries/values are head-concatenated, so the width is d.
Tensor extract_features(const ForwardTrace& trace, FeatureSelection selection);

// A = F·Fᵀ + b on every entry; exactly symmetric.
Tensor gram_with_bias(const Tensor& features, double bias);
// -median of the unbiased gram entries.
double auto_bias(const Tensor& features);

// degree[p] = #{q ≠ p : A[p,q] ≥ 0}
std::vector<std::size_t> degrees(const Tensor& similarity);
// argmin degree, lowest index on ties.
std::size_t select_seed(const Tensor& similarity);

std::size_t default_k(std::size_t n_patches);

struct LostIntermediates {
  Tensor similarity;  // N × N
  std::vector<std::size_t> degrees;
  std::size_t seed = 0;
  std::vector<std::size_t> expansion;  // sorted patch indices, contains seed
  std::vector<bool> mask;              // N, row-major over the grid
  Box box;                             // patch coordinates, inclusive
};

// If the seed falls outside its own mask the box is the seed cell.
LostIntermediates expand_and_mask(const Tensor& similarity, GridShape grid, std::size_t seed, std::size_t k);

// Full pipeline on one image's patch features.
LostIntermediates run_lost(const Tensor& features, GridShape grid, double bias, std::optional<std::size_t> k = {});

struct CorlocReport {
  std::vector<bool> hits;
  double corloc = 0.0;
};

// An image is a hit iff IoU(pred, some gt) ≥ 0.5.
CorlocReport corloc(const std::vector<Box>& predictions, const std::vector<std::vector<Box>>& ground_truth);

// Synthetic scene in feature space: background patches share a unit vector u,
// object patches a unit vector v ⊥ u, both with small isotropic noise. The
// object is a rectangle covering less than half the grid.
struct PlantedScene {
  Tensor features;  // N × d
  Box object;
};
PlantedScene planted_scene(std::uint64_t seed, GridShape grid, std::size_t dim, double noise = 0.05);

}  // namespace regvit
