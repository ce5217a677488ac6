#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "regvit/autodiff.hpp"
#include "regvit/tensor.hpp"

namespace regvit {

struct GridShape {
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t area() const noexcept { return rows * cols; }
  bool operator==(const GridShape&) const = default;
};

// Architecture hyperparameters. Defaults are the desk configuration.
struct ModelConfig {
  std::size_t image_size = 64;
  std::size_t patch_size = 8;
  std::size_t channels = 3;
  std::size_t embed_dim = 64;
  std::size_t depth = 6;
  std::size_t heads = 4;
  double mlp_ratio = 4.0;
  std::size_t n_registers = 0;
  std::size_t n_classes = 2;
  // Ablation switch: give registers their own position-embedding rows.
  bool register_pos_embed = false;
  double ln_eps = 1e-6;

  void validate() const;
  GridShape grid() const { return {image_size / patch_size, image_size / patch_size}; }
  std::size_t num_patches() const { return grid().area(); }
  // T = 1 + R + N
  std::size_t seq_len() const { return 1 + n_registers + num_patches(); }
  std::size_t head_dim() const { return embed_dim / heads; }
  std::size_t mlp_hidden() const;
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
  std::size_t pos_rows() const { return 1 + num_patches() + (register_pos_embed ? n_registers : 0); }

  bool operator==(const ModelConfig&) const = default;
};

template <class T>
struct BlockParamsT {
  T ln1_gain, ln1_bias;
  T qkv_weight, qkv_bias;
  T proj_weight, proj_bias;
  T ln2_gain, ln2_bias;
  T fc1_weight, fc1_bias;
  T fc2_weight, fc2_bias;

  template <class F>
  void for_each(const std::string& prefix, F&& f) {
    f(prefix + "norm1.gain", ln1_gain);
    f(prefix + "norm1.bias", ln1_bias);
    f(prefix + "attn.qkv.weight", qkv_weight);
    f(prefix + "attn.qkv.bias", qkv_bias);
    f(prefix + "attn.proj.weight", proj_weight);
    f(prefix + "attn.proj.bias", proj_bias);
    f(prefix + "norm2.gain", ln2_gain);
    f(prefix + "norm2.bias", ln2_bias);
    f(prefix + "mlp.fc1.weight", fc1_weight);
    f(prefix + "mlp.fc1.bias", fc1_bias);
    f(prefix + "mlp.fc2.weight", fc2_weight);
    f(prefix + "mlp.fc2.bias", fc2_bias);
  }
};

// All learnable arrays. Weights are stored input-major (in × out) so a layer
// is x · W + b. There is no position-embedding row for registers unless
// register_pos_embed is set, in which case rows [1, 1+R) belong to them.
template <class T>
struct ParamsT {
  T patch_weight, patch_bias;
  T cls_token;
  std::optional<T> registers;
  T pos_embed;
  std::vector<BlockParamsT<T>> blocks;
  T norm_gain, norm_bias;
  T head_weight, head_bias;

  // Visits every parameter with a stable dotted name, in a fixed order.
  template <class F>
  void for_each(F&& f) {
    f(std::string("patch_embed.weight"), patch_weight);
    f(std::string("patch_embed.bias"), patch_bias);
    f(std::string("cls_token"), cls_token);
    if (registers) f(std::string("registers"), *registers);
    f(std::string("pos_embed"), pos_embed);
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].for_each("blocks." + std::to_string(i) + ".", f);
    f(std::string("norm.gain"), norm_gain);
    f(std::string("norm.bias"), norm_bias);
    f(std::string("head.weight"), head_weight);
    f(std::string("head.bias"), head_bias);
  }
  template <class F>
  void for_each(F&& f) const {
    const_cast<ParamsT*>(this)->for_each([&](const std::string& name, T& value) { f(name, std::as_const(value)); });
  }
};

using Params = ParamsT<Tensor>;
using BoundParams = ParamsT<ad::Var>;

Params init_params(const ModelConfig& config, std::uint64_t seed);
// Throws CheckpointError when any array disagrees with the configuration.
void check_params(const ModelConfig& config, const Params& params);
std::size_t total_scalars(const Params& params);

// Registers every parameter on the tape, as leaves when trainable.
BoundParams bind_params(ad::Tape& tape, const Params& params, bool trainable);

// Captured state of one forward pass.
struct ForwardTrace {
  GridShape grid;
  std::size_t n_registers = 0;
  std::size_t heads = 0;
  bool captured = false;
  Tensor patch_embeddings;             // N × d, before position embeddings
  std::vector<Tensor> states;          // encoder input, then after each block; T × d
  std::vector<Tensor> attention;       // per block, heads × T × T
  std::vector<Tensor> queries;         // per block, T × d, heads concatenated
  std::vector<Tensor> keys;
  std::vector<Tensor> values;
  Tensor logits;

  std::size_t depth() const { return attention.size(); }
  std::size_t seq_len() const { return states.back().dim(0); }
  const Tensor& output() const { return states.back(); }
};

// C×H×W image to N × (C·P·P) rows in row-major patch order; each row is
// flattened channel-major, then row, then column.
Tensor patchify(const Tensor& image, const ModelConfig& config);

Tensor patch_embed(const Tensor& image, const Params& params, const ModelConfig& config);
// Sequence order [CLS, reg_0..reg_{R-1}, patch_0..patch_{N-1}].
Tensor assemble_sequence(const Tensor& patch_tokens, const Params& params, const ModelConfig& config);
ForwardTrace encoder_forward(const Tensor& seq, const Params& params, const ModelConfig& config, bool capture);
// Image → logits with an optional full trace.
ForwardTrace run_model(const Tensor& image, const Params& params, const ModelConfig& config, bool capture);

struct SplitOutputs {
  Tensor cls;      // d
  Tensor patches;  // N × d
};
// Register outputs are dropped here.
SplitOutputs split_outputs(const ForwardTrace& trace);

// Block index for a possibly negative layer (-1 is the last block).
std::size_t resolve_layer(int layer, std::size_t depth);

struct AttentionMap {
  Tensor map;  // grid rows × grid cols
  // Set when the query addresses a patch token rather than CLS or a register.
  bool nonstandard_query = false;
};
// head == nullopt selects the mean over heads. layer may be negative (from end).
AttentionMap attention_map(const ForwardTrace& trace, int layer, std::optional<std::size_t> head,
                           std::size_t query_index);

// Taped building blocks shared by inference and training.
namespace graph {
ad::Var patch_embed(ad::Tape& tape, const BoundParams& params, const ModelConfig& config, const Tensor& image);
ad::Var assemble_sequence(const BoundParams& params, const ModelConfig& config, ad::Var patch_tokens);
ad::Var encoder(const BoundParams& params, const ModelConfig& config, ad::Var seq, ForwardTrace* trace);
// Final layer norm on the CLS state followed by the linear head.
ad::Var classify(const BoundParams& params, const ModelConfig& config, ad::Var tokens);
}  // namespace graph

std::uint64_t count_params(const ModelConfig& config);
// Forward-pass FLOPs counting 2·m·n·k per matrix product (see flops_formula()).
std::uint64_t count_flops(const ModelConfig& config);
std::string flops_formula();

void save_checkpoint(const std::filesystem::path& dir, const ModelConfig& config, const Params& params);
struct Checkpoint {
  ModelConfig config;
  Params params;
};
Checkpoint load_checkpoint(const std::filesystem::path& dir);
std::string config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const std::string& text);

}  // namespace regvit
