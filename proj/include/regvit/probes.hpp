#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "regvit/scenes.hpp"
#include "regvit/tensor.hpp"
#include "regvit/vit.hpp"

// Linear and logistic probes over frozen token features.
namespace regvit {

// Solves (XᵀX + λI) W = XᵀY. λ = 0 with a rank-deficient X throws SingularError.
Tensor fit_ridge(const Tensor& x, const Tensor& y, double lambda);

struct LogisticOptions {
  double lambda = 1e-4;
  std::size_t steps = 500;
  double lr = 0.1;
};

// Multinomial logistic regression on standardized features. Weights and bias
// start at zero, so zero steps give uniform predictions.
struct LogisticModel {
  Tensor mean;     // p
  Tensor scale;    // p, 1 where a feature is constant
  Tensor weights;  // p × K
  Tensor bias;     // K
  std::size_t n_classes() const { return bias.numel(); }
};

LogisticModel fit_logistic(const Tensor& x, const std::vector<std::size_t>& labels, const LogisticOptions& options = {});
Tensor predict_proba(const LogisticModel& model, const Tensor& x);
std::vector<std::size_t> predict(const LogisticModel& model, const Tensor& x);
// Mean cross-entropy, without the L2 term.
double logistic_loss(const LogisticModel& model, const Tensor& x, const std::vector<std::size_t>& labels);
double accuracy(const std::vector<std::size_t>& predicted, const std::vector<std::size_t>& labels);

// Deterministic 80/20 split keyed by a hash of the group (image) index.
bool is_held_out(std::size_t group);

struct PositionProbeResult {
  double top1 = 0.0;
  double mean_distance = 0.0;  // patch units, argmax cell vs true cell
};

// tokens: [images, N, d]; token n of every image sits at grid cell n.
PositionProbeResult position_probe(const Tensor& tokens, GridShape grid, const LogisticOptions& options = {});

// Ridge from tokens to pixels with an unpenalized intercept. Returns the root
// mean squared per-patch L2 error on held-out images. tokens [images, N, d],
// pixels [images, N, P²C].
double reconstruction_probe(const Tensor& tokens, const Tensor& pixels, double lambda);
// Default λ = 1e-3 · (number of training rows).
double reconstruction_probe(const Tensor& tokens, const Tensor& pixels);

enum class SelectorKind { Cls, Register, RandomNormalPatch, RandomOutlierPatch };

struct TokenSelector {
  SelectorKind kind = SelectorKind::Cls;
  std::size_t register_index = 0;

  bool stochastic() const { return kind == SelectorKind::RandomNormalPatch || kind == SelectorKind::RandomOutlierPatch; }
  std::string name() const;
  // "cls", "register:<i>", "random_normal_patch", "random_outlier_patch"
  static TokenSelector parse(const std::string& text);
};

// Per-image tokens for classification probing.
struct ProbeFeatures {
  Tensor cls;          // images × d
  Tensor registers;    // images × R × d, empty when R = 0
  Tensor patches;      // images × N × d
  Tensor patch_norms;  // images × N
  std::vector<std::size_t> labels;

  std::size_t n_images() const { return labels.size(); }
  std::size_t n_registers() const { return registers.rank() == 3 ? registers.dim(1) : 0; }
};

// Output tokens (before the final norm) of every image.
ProbeFeatures probe_features(const Params& params, const ModelConfig& config, const Dataset& dataset);

struct ProbeResult {
  std::string task;
  std::string selector;
  std::string metric;
  double value = 0.0;
  double std = 0.0;  // population std over seeds
  std::size_t n_seeds = 1;
};

// Held-out accuracy of a logistic probe on one token per image. Stochastic
// selectors draw a fresh token per image for each of n_seeds seeds; images
// with no eligible token are skipped, and EmptyMaskError is thrown if none
// remain. Deterministic selectors run once.
ProbeResult classification_probe(const ProbeFeatures& features, const TokenSelector& selector, double tau,
                                 std::size_t n_seeds, std::uint64_t seed, const LogisticOptions& options = {});
ProbeResult classification_probe(const Params& params, const ModelConfig& config, const Dataset& dataset,
                                 const TokenSelector& selector, double tau, std::size_t n_seeds, std::uint64_t seed);

// Columns task,selector,metric,value,std,n_seeds.
std::string probe_results_csv(const std::vector<ProbeResult>& results);

}  // namespace regvit
