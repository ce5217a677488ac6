#include "regvit/vit.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "regvit/errors.hpp"
#include "regvit/rng.hpp"

namespace regvit {

namespace {

constexpr double kInitStd = 0.02;

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

// Each array draws from its own stream keyed by name, so adding or removing
// registers leaves every other array bit-identical for a given seed.
Tensor truncated_normal(Shape shape, std::uint64_t seed, const std::string& name) {
  Rng rng(derive_seed(seed, fnv1a(name)));
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.truncated_normal(kInitStd);
  return t;
}

}  // namespace

std::size_t resolve_layer(int layer, std::size_t depth) {
  const auto d = static_cast<int>(depth);
  const int resolved = layer < 0 ? d + layer : layer;
  if (resolved < 0 || resolved >= d) {
    throw RangeError("layer " + std::to_string(layer) + " out of range for depth " + std::to_string(depth));
  }
  return static_cast<std::size_t>(resolved);
}

void ModelConfig::validate() const {
  if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
    throw ConfigError("image_size " + std::to_string(image_size) + " is not divisible by patch_size " +
                      std::to_string(patch_size));
  }
  if (heads == 0 || embed_dim == 0 || embed_dim % heads != 0) {
    throw ConfigError("embed_dim " + std::to_string(embed_dim) + " is not divisible by heads " + std::to_string(heads));
  }
  if (channels == 0) throw ConfigError("channels must be positive");
  if (n_classes < 2) throw ConfigError("n_classes must be at least 2");
  if (!(mlp_ratio > 0.0) || mlp_hidden() == 0) throw ConfigError("mlp_ratio must give a positive hidden width");
  if (!(ln_eps > 0.0)) throw ConfigError("ln_eps must be positive");
}

std::size_t ModelConfig::mlp_hidden() const {
  return static_cast<std::size_t>(std::llround(mlp_ratio * static_cast<double>(embed_dim)));
}

Params init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const std::size_t d = config.embed_dim;
  const std::size_t hidden = config.mlp_hidden();
  Params p;
  p.patch_weight = truncated_normal({config.patch_dim(), d}, seed, "patch_embed.weight");
  p.patch_bias = Tensor::zeros({d});
  p.cls_token = truncated_normal({1, d}, seed, "cls_token");
  if (config.n_registers > 0) p.registers = truncated_normal({config.n_registers, d}, seed, "registers");
  p.pos_embed = truncated_normal({config.pos_rows(), d}, seed, "pos_embed");
  if (config.register_pos_embed && config.n_registers > 0) {
    // Keep CLS and patch rows identical to the registers-free layout.
    const Tensor base = truncated_normal({1 + config.num_patches(), d}, seed, "pos_embed");
    const Tensor extra = truncated_normal({config.n_registers, d}, seed, "pos_embed.registers");
    std::copy(base.row(0).begin(), base.row(0).end(), p.pos_embed.row(0).begin());
    for (std::size_t r = 0; r < config.n_registers; ++r) {
      std::copy(extra.row(r).begin(), extra.row(r).end(), p.pos_embed.row(1 + r).begin());
    }
    for (std::size_t n = 0; n < config.num_patches(); ++n) {
      std::copy(base.row(1 + n).begin(), base.row(1 + n).end(), p.pos_embed.row(1 + config.n_registers + n).begin());
    }
  }
  for (std::size_t l = 0; l < config.depth; ++l) {
    const std::string prefix = "blocks." + std::to_string(l) + ".";
    BlockParamsT<Tensor> b;
    b.ln1_gain = Tensor::ones({d});
    b.ln1_bias = Tensor::zeros({d});
    b.qkv_weight = truncated_normal({d, 3 * d}, seed, prefix + "attn.qkv.weight");
    b.qkv_bias = Tensor::zeros({3 * d});
    b.proj_weight = truncated_normal({d, d}, seed, prefix + "attn.proj.weight");
    b.proj_bias = Tensor::zeros({d});
    b.ln2_gain = Tensor::ones({d});
    b.ln2_bias = Tensor::zeros({d});
    b.fc1_weight = truncated_normal({d, hidden}, seed, prefix + "mlp.fc1.weight");
    b.fc1_bias = Tensor::zeros({hidden});
    b.fc2_weight = truncated_normal({hidden, d}, seed, prefix + "mlp.fc2.weight");
    b.fc2_bias = Tensor::zeros({d});
    p.blocks.push_back(std::move(b));
  }
  p.norm_gain = Tensor::ones({d});
  p.norm_bias = Tensor::zeros({d});
  p.head_weight = truncated_normal({d, config.n_classes}, seed, "head.weight");
  p.head_bias = Tensor::zeros({config.n_classes});
  return p;
}

void check_params(const ModelConfig& config, const Params& params) {
  config.validate();
  Params expected = init_params(config, 0);
  std::vector<std::pair<std::string, Shape>> want;
  expected.for_each([&](const std::string& name, const Tensor& t) { want.emplace_back(name, t.shape()); });
  std::vector<std::pair<std::string, Shape>> have;
  params.for_each([&](const std::string& name, const Tensor& t) { have.emplace_back(name, t.shape()); });
  if (want.size() != have.size()) {
    throw CheckpointError("parameter count " + std::to_string(have.size()) + " does not match config (" +
                          std::to_string(want.size()) + ")");
  }
  for (std::size_t i = 0; i < want.size(); ++i) {
    if (want[i] != have[i]) {
      throw CheckpointError("parameter " + have[i].first + " has shape " + shape_to_string(have[i].second) +
                            ", config expects " + want[i].first + " " + shape_to_string(want[i].second));
    }
  }
}

std::size_t total_scalars(const Params& params) {
  std::size_t total = 0;
  params.for_each([&](const std::string&, const Tensor& t) { total += t.numel(); });
  return total;
}

BoundParams bind_params(ad::Tape& tape, const Params& params, bool trainable) {
  BoundParams bound;
  bound.blocks.resize(params.blocks.size());
  if (params.registers) bound.registers = ad::Var{};
  std::vector<ad::Var*> slots;
  bound.for_each([&](const std::string&, ad::Var& v) { slots.push_back(&v); });
  std::size_t i = 0;
  params.for_each([&](const std::string&, const Tensor& t) {
    *slots[i++] = trainable ? tape.leaf(t) : tape.constant(t);
  });
  return bound;
}

Tensor patchify(const Tensor& image, const ModelConfig& config) {
  config.validate();
  const std::size_t c = config.channels;
  const std::size_t size = config.image_size;
  if (image.shape() != Shape{c, size, size}) {
    if (image.rank() == 3 && image.dim(1) % config.patch_size != 0) {
      throw ConfigError("image size " + std::to_string(image.dim(1)) + " is not divisible by patch size " +
                        std::to_string(config.patch_size));
    }
    throw DimensionError("image shape " + shape_to_string(image.shape()) + " does not match config " +
                         shape_to_string({c, size, size}));
  }
  const std::size_t p = config.patch_size;
  const GridShape grid = config.grid();
  Tensor out({grid.area(), config.patch_dim()});
  for (std::size_t gy = 0; gy < grid.rows; ++gy) {
    for (std::size_t gx = 0; gx < grid.cols; ++gx) {
      auto row = out.row(gy * grid.cols + gx);
      std::size_t f = 0;
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t py = 0; py < p; ++py)
          for (std::size_t px = 0; px < p; ++px)
            row[f++] = image[(ch * size + gy * p + py) * size + gx * p + px];
    }
  }
  return out;
}

namespace graph {

ad::Var patch_embed(ad::Tape& tape, const BoundParams& params, const ModelConfig& config, const Tensor& image) {
  ad::Var patches = tape.constant(patchify(image, config));
  return ad::add_row(ad::matmul(patches, params.patch_weight), params.patch_bias);
}

ad::Var assemble_sequence(const BoundParams& params, const ModelConfig& config, ad::Var patch_tokens) {
  const std::size_t n = config.num_patches();
  const std::size_t r = config.n_registers;
  if (patch_tokens.shape() != Shape{n, config.embed_dim}) {
    throw DimensionError("patch tokens " + shape_to_string(patch_tokens.shape()) + " do not match " +
                         shape_to_string({n, config.embed_dim}));
  }
  std::vector<ad::Var> parts;
  parts.push_back(ad::add(params.cls_token, ad::slice_rows(params.pos_embed, 0, 1)));
  std::size_t patch_pos = 1;
  if (r > 0) {
    if (config.register_pos_embed) {
      parts.push_back(ad::add(*params.registers, ad::slice_rows(params.pos_embed, 1, 1 + r)));
      patch_pos += r;
    } else {
      parts.push_back(*params.registers);
    }
  }
  parts.push_back(ad::add(patch_tokens, ad::slice_rows(params.pos_embed, patch_pos, patch_pos + n)));
  return ad::concat_rows(parts);
}

ad::Var encoder(const BoundParams& params, const ModelConfig& config, ad::Var seq, ForwardTrace* trace) {
  const std::size_t d = config.embed_dim;
  const std::size_t heads = config.heads;
  const std::size_t dh = config.head_dim();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  if (seq.shape() != Shape{config.seq_len(), d}) {
    throw DimensionError("sequence " + shape_to_string(seq.shape()) + " does not match T x d = " +
                         shape_to_string({config.seq_len(), d}));
  }
  ad::Var x = seq;
  if (trace) trace->states.push_back(x.value());
  for (std::size_t l = 0; l < params.blocks.size(); ++l) {
    const auto& b = params.blocks[l];
    ad::Var h = ad::layer_norm(x, b.ln1_gain, b.ln1_bias, config.ln_eps);
    ad::Var qkv = ad::add_row(ad::matmul(h, b.qkv_weight), b.qkv_bias);
    std::vector<ad::Var> head_out;
    std::vector<Tensor> attn_maps;
    for (std::size_t i = 0; i < heads; ++i) {
      ad::Var q = ad::slice_cols(qkv, i * dh, (i + 1) * dh);
      ad::Var k = ad::slice_cols(qkv, d + i * dh, d + (i + 1) * dh);
      ad::Var v = ad::slice_cols(qkv, 2 * d + i * dh, 2 * d + (i + 1) * dh);
      ad::Var attn = ad::softmax_lastdim(ad::scale(ad::matmul_nt(q, k), inv_sqrt));
      if (trace) attn_maps.push_back(attn.value());
      head_out.push_back(ad::matmul(attn, v));
    }
    ad::Var mixed = ad::concat_cols(head_out);
    x = ad::add(x, ad::add_row(ad::matmul(mixed, b.proj_weight), b.proj_bias));
    ad::Var h2 = ad::layer_norm(x, b.ln2_gain, b.ln2_bias, config.ln_eps);
    ad::Var hidden = ad::gelu(ad::add_row(ad::matmul(h2, b.fc1_weight), b.fc1_bias));
    x = ad::add(x, ad::add_row(ad::matmul(hidden, b.fc2_weight), b.fc2_bias));
    if (!x.value().all_finite()) throw NumericError("non-finite activation after encoder layer " + std::to_string(l));
    if (trace) {
      const Tensor& qkv_v = qkv.value();
      Tensor q({qkv_v.dim(0), d}), k({qkv_v.dim(0), d}), v({qkv_v.dim(0), d});
      for (std::size_t t = 0; t < qkv_v.dim(0); ++t) {
        for (std::size_t j = 0; j < d; ++j) {
          q.at(t, j) = qkv_v.at(t, j);
          k.at(t, j) = qkv_v.at(t, d + j);
          v.at(t, j) = qkv_v.at(t, 2 * d + j);
        }
      }
      trace->queries.push_back(std::move(q));
      trace->keys.push_back(std::move(k));
      trace->values.push_back(std::move(v));
      trace->attention.push_back(stack(attn_maps));
      trace->states.push_back(x.value());
    }
  }
  return x;
}

ad::Var classify(const BoundParams& params, const ModelConfig& config, ad::Var tokens) {
  ad::Var cls = ad::slice_rows(tokens, 0, 1);
  ad::Var normed = ad::layer_norm(cls, params.norm_gain, params.norm_bias, config.ln_eps);
  return ad::add_row(ad::matmul(normed, params.head_weight), params.head_bias);
}

}  // namespace graph

Tensor patch_embed(const Tensor& image, const Params& params, const ModelConfig& config) {
  ad::Tape tape;
  const BoundParams bound = bind_params(tape, params, false);
  return graph::patch_embed(tape, bound, config, image).value();
}

Tensor assemble_sequence(const Tensor& patch_tokens, const Params& params, const ModelConfig& config) {
  ad::Tape tape;
  const BoundParams bound = bind_params(tape, params, false);
  return graph::assemble_sequence(bound, config, tape.constant(patch_tokens)).value();
}

ForwardTrace encoder_forward(const Tensor& seq, const Params& params, const ModelConfig& config, bool capture) {
  ad::Tape tape;
  const BoundParams bound = bind_params(tape, params, false);
  ForwardTrace trace;
  trace.grid = config.grid();
  trace.n_registers = config.n_registers;
  trace.heads = config.heads;
  trace.captured = capture;
  ad::Var out = graph::encoder(bound, config, tape.constant(seq), capture ? &trace : nullptr);
  if (!capture) trace.states.push_back(out.value());
  return trace;
}

ForwardTrace run_model(const Tensor& image, const Params& params, const ModelConfig& config, bool capture) {
  ad::Tape tape;
  const BoundParams bound = bind_params(tape, params, false);
  ForwardTrace trace;
  trace.grid = config.grid();
  trace.n_registers = config.n_registers;
  trace.heads = config.heads;
  trace.captured = capture;
  ad::Var patches = graph::patch_embed(tape, bound, config, image);
  if (capture) trace.patch_embeddings = patches.value();
  ad::Var seq = graph::assemble_sequence(bound, config, patches);
  ad::Var out = graph::encoder(bound, config, seq, capture ? &trace : nullptr);
  if (!capture) trace.states.push_back(out.value());
  trace.logits = graph::classify(bound, config, out).value().reshaped({config.n_classes});
  return trace;
}

SplitOutputs split_outputs(const ForwardTrace& trace) {
  if (trace.states.empty()) throw ContractError("trace has no final layer");
  const Tensor& out = trace.output();
  const std::size_t first_patch = 1 + trace.n_registers;
  return {out.slice0(0, 1).reshaped({out.dim(1)}), out.slice0(first_patch, out.dim(0))};
}

AttentionMap attention_map(const ForwardTrace& trace, int layer, std::optional<std::size_t> head,
                           std::size_t query_index) {
  if (!trace.captured) throw ContractError("attention maps require a captured trace");
  const std::size_t l = resolve_layer(layer, trace.depth());
  const Tensor& attn = trace.attention[l];
  const std::size_t heads = attn.dim(0);
  const std::size_t seq = attn.dim(1);
  if (query_index >= seq) {
    throw RangeError("query index " + std::to_string(query_index) + " out of range for sequence length " +
                     std::to_string(seq));
  }
  if (head && *head >= heads) {
    throw RangeError("head " + std::to_string(*head) + " out of range for " + std::to_string(heads) + " heads");
  }
  const std::size_t first_patch = 1 + trace.n_registers;
  AttentionMap result{Tensor({trace.grid.rows, trace.grid.cols}), query_index >= first_patch};
  const std::size_t h_begin = head ? *head : 0;
  const std::size_t h_end = head ? *head + 1 : heads;
  for (std::size_t h = h_begin; h < h_end; ++h) {
    for (std::size_t n = 0; n < trace.grid.area(); ++n) {
      result.map[n] += attn[(h * seq + query_index) * seq + first_patch + n];
    }
  }
  if (!head) {
    for (auto& v : result.map.data()) v /= static_cast<double>(heads);
  }
  return result;
}

std::uint64_t count_params(const ModelConfig& config) {
  config.validate();
  const std::uint64_t d = config.embed_dim;
  const std::uint64_t m = config.mlp_hidden();
  const std::uint64_t patch = config.patch_dim() * d + d;
  const std::uint64_t tokens = d + config.n_registers * d;
  const std::uint64_t pos = config.pos_rows() * d;
  const std::uint64_t block = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * m + m) + (m * d + d);
  const std::uint64_t head = 2 * d + d * config.n_classes + config.n_classes;
  return patch + tokens + pos + config.depth * block + head;
}

std::uint64_t count_flops(const ModelConfig& config) {
  config.validate();
  const std::uint64_t d = config.embed_dim;
  const std::uint64_t m = config.mlp_hidden();
  const std::uint64_t n = config.num_patches();
  const std::uint64_t t = config.seq_len();
  const std::uint64_t patch = 2 * n * config.patch_dim() * d;
  const std::uint64_t qkv = 2 * t * d * 3 * d;
  const std::uint64_t scores = 2 * t * t * d;  // summed over heads: h · 2·T·T·(d/h)
  const std::uint64_t mix = 2 * t * t * d;
  const std::uint64_t proj = 2 * t * d * d;
  const std::uint64_t mlp = 2 * t * d * m + 2 * t * m * d;
  const std::uint64_t head = 2 * d * config.n_classes;
  return patch + config.depth * (qkv + scores + mix + proj + mlp) + head;
}

std::string flops_formula() {
  return "2*N*(P*P*C)*d + L*(6*T*d*d + 4*T*T*d + 2*T*d*d + 4*T*d*m) + 2*d*n_classes, "
         "T = 1 + R + N, m = round(mlp_ratio*d); matrix products only (2*m*n*k each)";
}

std::string config_to_json(const ModelConfig& config) {
  nlohmann::ordered_json j;
  j["image_size"] = config.image_size;
  j["patch_size"] = config.patch_size;
  j["channels"] = config.channels;
  j["embed_dim"] = config.embed_dim;
  j["depth"] = config.depth;
  j["heads"] = config.heads;
  j["mlp_ratio"] = config.mlp_ratio;
  j["n_registers"] = config.n_registers;
  j["n_classes"] = config.n_classes;
  j["register_pos_embed"] = config.register_pos_embed;
  j["ln_eps"] = config.ln_eps;
  return j.dump(2) + "\n";
}

ModelConfig config_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("bad config.json: ") + e.what());
  }
  ModelConfig c;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& key = it.key();
    if (key == "image_size") c.image_size = it->get<std::size_t>();
    else if (key == "patch_size") c.patch_size = it->get<std::size_t>();
    else if (key == "channels") c.channels = it->get<std::size_t>();
    else if (key == "embed_dim") c.embed_dim = it->get<std::size_t>();
    else if (key == "depth") c.depth = it->get<std::size_t>();
    else if (key == "heads") c.heads = it->get<std::size_t>();
    else if (key == "mlp_ratio") c.mlp_ratio = it->get<double>();
    else if (key == "n_registers") c.n_registers = it->get<std::size_t>();
    else if (key == "n_classes") c.n_classes = it->get<std::size_t>();
    else if (key == "register_pos_embed") c.register_pos_embed = it->get<bool>();
    else if (key == "ln_eps") c.ln_eps = it->get<double>();
    else throw CheckpointError("unknown key in config.json: " + key);
  }
  c.validate();
  return c;
}

void save_checkpoint(const std::filesystem::path& dir, const ModelConfig& config, const Params& params) {
  check_params(config, params);
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "config.json", std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + (dir / "config.json").string());
    out << config_to_json(config);
  }
  params.for_each([&](const std::string& name, const Tensor& t) { save_tensor(t, dir / (name + ".tns")); });
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream in(dir / "config.json", std::ios::binary);
  if (!in) throw IoError("missing " + (dir / "config.json").string());
  std::stringstream text;
  text << in.rdbuf();
  Checkpoint ck{config_from_json(text.str()), {}};
  ck.params = init_params(ck.config, 0);
  ck.params.for_each([&](const std::string& name, Tensor& t) {
    const auto path = dir / (name + ".tns");
    if (!std::filesystem::exists(path)) throw CheckpointError("checkpoint is missing " + path.string());
    Tensor loaded = load_tensor(path);
    if (loaded.shape() != t.shape()) {
      throw CheckpointError(name + " has shape " + shape_to_string(loaded.shape()) + ", config expects " +
                            shape_to_string(t.shape()));
    }
    t = std::move(loaded);
  });
  return ck;
}

}  // namespace regvit
