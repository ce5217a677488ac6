#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "regvit/scenes.hpp"
#include "regvit/tensor.hpp"
#include "regvit/train.hpp"
#include "regvit/vit.hpp"

// Norm-based artifact measurements over token features and traces.
namespace regvit {

enum class TokenType { Cls, Register, Patch };
const char* to_string(TokenType type);

// Where the CLS token and registers sit in a row-ordered token list.
struct TokenLayout {
  std::size_t n_cls = 1;
  std::size_t n_registers = 0;

  static TokenLayout patches_only() { return {0, 0}; }
  TokenType type_of(std::size_t index) const {
    if (index < n_cls) return TokenType::Cls;
    if (index < n_cls + n_registers) return TokenType::Register;
    return TokenType::Patch;
  }
};

// L2 norm of every row.
Tensor token_norms(const Tensor& features);

struct TypeSummary {
  std::size_t count = 0;
  std::size_t outliers = 0;
  double mean_norm = 0.0;
  double max_norm = 0.0;
};

struct OutlierReport {
  Tensor norms;
  double tau = 0.0;
  std::vector<bool> mask;       // mask[i] iff norms[i] > tau
  std::vector<TokenType> types;
  double proportion = 0.0;      // outliers among patch tokens only
  std::array<TypeSummary, 3> by_type{};  // indexed by TokenType

  const TypeSummary& summary(TokenType t) const { return by_type[static_cast<std::size_t>(t)]; }
};

OutlierReport detect_outliers(const Tensor& norms, double tau, TokenLayout layout = TokenLayout::patches_only());

struct Threshold {
  double tau = 0.0;
  // Otsu's between-class / total variance of the log norms at the chosen cut.
  double separability = 0.0;
  // separability rescaled so a single Gaussian scores 0 and two point masses 1.
  double confidence = 0.0;
  bool low_confidence = false;
};

// Otsu's criterion on log-norms over all midpoints between distinct sorted
// values; returns the cut in the original scale. Flags low confidence when
// confidence < 0.5.
Threshold auto_threshold(std::span<const double> norms);

struct NormSummary {
  double q1 = 0, q25 = 0, q50 = 0, q75 = 0, q99 = 0, max = 0;
};
// Linear-interpolation quantiles.
NormSummary summarize_norms(std::vector<double> values);

struct LayerNormProfile {
  std::vector<NormSummary> layers;
};

// Patch-token norms after each encoder block (the encoder input for depth 0).
LayerNormProfile norms_by_layer(const ForwardTrace& trace);
// Patch norms per layer, shape [layers, N], as exported to trace files.
Tensor patch_norms_by_layer(const ForwardTrace& trace);
LayerNormProfile profile_from_norms(const Tensor& layer_norms);

// Output patch-norm summary per checkpoint, pooled over the probe set.
std::vector<NormSummary> norms_by_checkpoint(const std::vector<Snapshot>& checkpoints, const ModelConfig& config,
                                             const Dataset& probe_set);

struct NeighborCosine {
  Tensor per_patch;               // N: mean cosine to existing 4-neighbours
  std::vector<double> outlier_dist;
  std::vector<double> normal_dist;
  std::vector<bool> zero_vector;  // patches whose embedding is all zeros
};

// Mean cosine similarity of each patch to its up/down/left/right neighbours,
// split by the output-token outlier mask. Cosine terms involving a zero vector
// count as 0.
NeighborCosine neighbor_cosine(const Tensor& patch_embeds, GridShape grid, const std::vector<bool>& outlier_mask);

struct PositionHeatmap {
  GridShape grid;
  std::size_t n_images = 0;
  std::vector<std::size_t> counts;
  Tensor frequency;  // rows × cols, counts / n_images
};

// Per-cell frequency of patch norms above tau. Each tensor holds the patch
// norms of one image.
PositionHeatmap position_heatmap(std::span<const Tensor> patch_norms, GridShape grid, double tau);
PositionHeatmap position_heatmap(const Params& params, const ModelConfig& config, const Dataset& dataset, double tau);

}  // namespace regvit
