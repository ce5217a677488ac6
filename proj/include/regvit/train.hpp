#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "regvit/scenes.hpp"
#include "regvit/vit.hpp"

namespace regvit {

// AdamW with cosine learning-rate decay; decoupled weight decay applies to
// parameters whose name ends in ".weight".
struct TrainConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.05;
  double adam_eps = 1e-8;
  std::size_t batch_size = 16;
  std::size_t steps = 2000;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 500;

  void validate() const;
};

// Model used by the training preset: small enough that 2,000 steps run in
// well under a minute on one core.
ModelConfig toy_model_config();

struct LogRow {
  std::size_t step = 0;
  double loss = 0.0;
  double accuracy = 0.0;
};

struct Snapshot {
  std::size_t step = 0;
  Params params;
  std::filesystem::path path;  // empty when not written to disk
};

struct TrainResult {
  Params params;
  std::vector<LogRow> log;
  std::vector<Snapshot> checkpoints;
};

// Cross-entropy on the CLS head. Checkpoints are taken at step 0, every
// checkpoint_every steps and after the last step; with out_dir they are also
// written to out_dir/step_XXXXXX. A non-finite loss writes out_dir/last_good
// and throws DivergenceError.
TrainResult train(const ModelConfig& model, const TrainConfig& config, const Dataset& dataset,
                  const std::optional<std::filesystem::path>& out_dir = std::nullopt);

// Top-1 accuracy; image shards may run in parallel.
double evaluate(const Params& params, const ModelConfig& model, const Dataset& dataset);

// CSV with header step,loss,accuracy and round-trippable decimals.
std::string metric_log_csv(const std::vector<LogRow>& log);

std::string checkpoint_dir_name(std::size_t step);

}  // namespace regvit
