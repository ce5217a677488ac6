#include "commands.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "regvit/errors.hpp"
#include "regvit/interp.hpp"
#include "regvit/lost.hpp"
#include "regvit/metrics.hpp"
#include "regvit/parallel.hpp"
#include "regvit/probes.hpp"
#include "regvit/report.hpp"
#include "regvit/rng.hpp"
#include "regvit/scenes.hpp"
#include "regvit/train.hpp"
#include "regvit/vit.hpp"

namespace regvit::cli {

namespace fs = std::filesystem;

namespace {

constexpr const char* kKinds[] = {"keys", "queries", "values", "outputs"};

std::string num(double v) { return format_double(v); }
std::string num(std::size_t v) { return std::to_string(v); }

std::size_t uint_at(const Json& cfg, const std::string& path) { return at(cfg, path).get<std::size_t>(); }
double float_at(const Json& cfg, const std::string& path) { return at(cfg, path).get<double>(); }
std::string string_at(const Json& cfg, const std::string& path) { return at(cfg, path).get<std::string>(); }

ModelConfig model_from(const Json& cfg) { return config_from_json(at(cfg, "model").dump()); }

SceneSpec scene_from(const Json& cfg, const ModelConfig& model) {
  SceneSpec s;
  s.image_size = model.image_size;
  s.channels = model.channels;
  s.background = parse_background(string_at(cfg, "data.background"));
  s.class_rule = parse_class_rule(string_at(cfg, "data.class_rule"));
  s.min_size = uint_at(cfg, "data.min_size");
  s.max_size = uint_at(cfg, "data.max_size");
  s.noise_std = float_at(cfg, "data.noise_std");
  s.validate();
  return s;
}

std::vector<Key> with(std::vector<Key> a, const std::vector<Key>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

// Element i along the first axis.
Tensor item(const Tensor& t, std::size_t i) {
  Shape rest(t.shape().begin() + 1, t.shape().end());
  return t.slice0(i, i + 1).reshaped(rest);
}

Json read_json(const fs::path& path) {
  try {
    return Json::parse(read_text(path));
  } catch (const Json::exception& e) {
    throw DataError(path.string() + " is not valid JSON: " + e.what());
  }
}

fs::path require_file(const fs::path& path, const std::string& hint) {
  if (!fs::is_regular_file(path)) throw IoError("missing " + path.string() + (hint.empty() ? "" : " (" + hint + ")"));
  return path;
}

Tensor load_required(const fs::path& path, const std::string& hint = "") { return load_tensor(require_file(path, hint)); }

// A checkpoint directory, or a train run whose latest checkpoint is used.
Checkpoint resolve_checkpoint(const fs::path& path) {
  if (fs::is_regular_file(path / "config.json")) return load_checkpoint(path);
  const fs::path ckdir = path / "checkpoints";
  if (fs::is_directory(ckdir)) {
    std::vector<fs::path> steps;
    for (const auto& e : fs::directory_iterator(ckdir))
      if (e.is_directory() && e.path().filename().string().rfind("step_", 0) == 0) steps.push_back(e.path());
    if (!steps.empty()) return load_checkpoint(*std::max_element(steps.begin(), steps.end()));
  }
  throw IoError("no checkpoint at " + path.string() + " (expected config.json or checkpoints/step_*)");
}

struct TraceMeta {
  GridShape grid;
  std::size_t depth = 0;
  std::size_t n_registers = 0;
  std::size_t images = 0;
  std::size_t patch_size = 0;
};

TraceMeta read_meta(const fs::path& features_json) {
  const Json j = read_json(require_file(features_json, "written by extract"));
  try {
    TraceMeta m;
    m.grid = {j.at("grid").at(0).get<std::size_t>(), j.at("grid").at(1).get<std::size_t>()};
    m.depth = j.at("depth").get<std::size_t>();
    m.n_registers = j.at("n_registers").get<std::size_t>();
    m.images = j.at("images").get<std::size_t>();
    m.patch_size = j.at("patch_size").get<std::size_t>();
    return m;
  } catch (const Json::exception& e) {
    throw DataError(features_json.string() + " is missing trace metadata: " + e.what());
  }
}

// Patch-token output norms per image from a [images, T] norm table.
std::vector<Tensor> patch_norms(const Tensor& norms, const TraceMeta& meta) {
  std::vector<Tensor> out;
  const std::size_t first = 1 + meta.n_registers;
  for (std::size_t i = 0; i < norms.dim(0); ++i) {
    const Tensor row = item(norms, i);
    out.push_back(row.slice0(first, row.numel()));
  }
  return out;
}

struct ResolvedTau {
  double tau = 0.0;
  std::optional<Threshold> automatic;
};

ResolvedTau resolve_tau(const Json& value, const std::vector<Tensor>& per_image) {
  if (value.is_number()) {
    if (!(value.get<double>() > 0.0)) throw UsageError("tau must be positive");
    return {value.get<double>(), std::nullopt};
  }
  std::vector<double> pooled;
  for (const auto& t : per_image) pooled.insert(pooled.end(), t.data().begin(), t.data().end());
  const Threshold t = auto_threshold(pooled);
  return {t.tau, t};
}

Json tau_json(const ResolvedTau& t) {
  Json j;
  j["tau"] = t.tau;
  j["source"] = t.automatic ? "auto" : "manual";
  if (t.automatic) {
    j["separability"] = t.automatic->separability;
    j["confidence"] = t.automatic->confidence;
    j["low_confidence"] = t.automatic->low_confidence;
  }
  return j;
}

void write_json(const fs::path& path, const Json& j) { write_text(path, j.dump(2) + "\n"); }

// ---------------------------------------------------------------- train

void cmd_train(const Json& cfg, const fs::path& dir, std::ostream& out) {
  const ModelConfig model = model_from(cfg);
  TrainConfig tc;
  tc.lr = float_at(cfg, "train.lr");
  tc.beta1 = float_at(cfg, "train.beta1");
  tc.beta2 = float_at(cfg, "train.beta2");
  tc.weight_decay = float_at(cfg, "train.weight_decay");
  tc.adam_eps = float_at(cfg, "train.adam_eps");
  tc.batch_size = uint_at(cfg, "train.batch_size");
  tc.steps = uint_at(cfg, "train.steps");
  tc.checkpoint_every = uint_at(cfg, "train.checkpoint_every");
  tc.seed = uint_at(cfg, "seed");
  const SceneSpec spec = scene_from(cfg, model);
  const Dataset data = synth_dataset(derive_seed(tc.seed, 100), uint_at(cfg, "data.n_train"), spec);

  const TrainResult result = train(model, tc, data, dir / "checkpoints");
  write_text(dir / "metrics.csv", metric_log_csv(result.log));
  const double accuracy = evaluate(result.params, model, data);

  Json summary;
  summary["train_accuracy"] = accuracy;
  summary["final_loss"] = result.log.back().loss;
  summary["steps"] = tc.steps;
  summary["params"] = count_params(model);
  summary["checkpoints"] = Json::array();
  for (const auto& s : result.checkpoints) summary["checkpoints"].push_back(checkpoint_dir_name(s.step));
  write_json(dir / "summary.json", summary);
  out << "train accuracy " << num(accuracy) << " after " << tc.steps << " steps\n";
}

std::vector<Key> train_keys() {
  const TrainConfig t;
  return with(with(model_keys(),
                   {
                       {"seed", Kind::UInt, 0, "seed", "Global seed for init, sampling and data"},
                       {"train.lr", Kind::Float, t.lr, "lr", "Peak learning rate"},
                       {"train.beta1", Kind::Float, t.beta1, "", ""},
                       {"train.beta2", Kind::Float, t.beta2, "", ""},
                       {"train.weight_decay", Kind::Float, t.weight_decay, "", ""},
                       {"train.adam_eps", Kind::Float, t.adam_eps, "", ""},
                       {"train.batch_size", Kind::UInt, t.batch_size, "batch-size", "Images per step"},
                       {"train.steps", Kind::UInt, t.steps, "steps", "Optimizer steps"},
                       {"train.checkpoint_every", Kind::UInt, t.checkpoint_every, "checkpoint-every", ""},
                       {"data.n_train", Kind::UInt, 128, "n-train", "Training scenes"},
                   }),
              scene_keys());
}

// ---------------------------------------------------------------- extract

void cmd_extract(const Json& cfg, const fs::path& dir, std::ostream& out) {
  const Checkpoint ck = resolve_checkpoint(string_at(cfg, "checkpoint"));
  const ModelConfig& model = ck.config;
  if (model.depth == 0) throw ContractError("extract needs a model with at least one block");
  const SceneSpec spec = scene_from(cfg, model);
  const std::size_t m = uint_at(cfg, "data.n_images");
  if (m == 0) throw UsageError("n_images must be positive");
  const Dataset data = synth_dataset(uint_at(cfg, "seed"), m, spec);

  std::vector<ForwardTrace> traces(m);
  parallel_for(m, [&](std::size_t i) { traces[i] = run_model(data[i].image, ck.params, model, true); });

  const std::size_t depth = model.depth, n = model.num_patches(), d = model.embed_dim, r = model.n_registers;
  const std::size_t t = model.seq_len();

  Tensor features({m, depth, 4, n, d});
  std::vector<Tensor> patch_embeds, outputs, cls, registers, norms, layer_norms, pixels;
  for (std::size_t i = 0; i < m; ++i) {
    const ForwardTrace& tr = traces[i];
    for (std::size_t l = 0; l < depth; ++l) {
      for (std::size_t k = 0; k < 4; ++k) {
        const Tensor f = extract_features(tr, {static_cast<FeatureKind>(k), static_cast<int>(l)});
        std::copy(f.data().begin(), f.data().end(),
                  features.data().begin() + static_cast<long>(((i * depth + l) * 4 + k) * n * d));
      }
    }
    const SplitOutputs split = split_outputs(tr);
    patch_embeds.push_back(tr.patch_embeddings);
    outputs.push_back(split.patches);
    cls.push_back(split.cls);
    if (r) registers.push_back(tr.output().slice0(1, 1 + r));
    norms.push_back(token_norms(tr.output()));
    layer_norms.push_back(patch_norms_by_layer(tr));
    pixels.push_back(patchify(data[i].image, model));
  }

  save_tensor(features, dir / "features.tns");
  Json meta;
  meta["layout"] = {"image", "layer", "kind", "patch", "dim"};
  meta["kinds"] = {kKinds[0], kKinds[1], kKinds[2], kKinds[3]};
  meta["images"] = m;
  meta["depth"] = depth;
  meta["grid"] = {model.grid().rows, model.grid().cols};
  meta["patch_size"] = model.patch_size;
  meta["n_registers"] = r;
  meta["embed_dim"] = d;
  meta["seq_len"] = t;
  meta["registers_exported"] = at(cfg, "include_registers").get<bool>() && r > 0;
  write_json(dir / "features.json", meta);

  save_tensor(stack(patch_embeds), dir / "patch_embeds.tns");
  save_tensor(stack(outputs), dir / "outputs.tns");
  save_tensor(stack(cls), dir / "cls.tns");
  if (meta["registers_exported"].get<bool>()) save_tensor(stack(registers), dir / "registers.tns");
  save_tensor(stack(norms), dir / "norms.tns");
  save_tensor(stack(layer_norms), dir / "layer_norms.tns");
  save_tensor(stack(pixels), dir / "pixels.tns");

  CsvWriter boxes({"image_id", "label", "x0", "y0", "x1", "y1"});
  for (std::size_t i = 0; i < m; ++i) {
    const Box b = to_patch_box(data[i].box, model.patch_size);
    boxes.row({num(i), num(data[i].label), std::to_string(b.x0), std::to_string(b.y0), std::to_string(b.x1),
               std::to_string(b.y1)});
  }
  boxes.save(dir / "gt_boxes.csv");

  const std::size_t a = std::min(m, uint_at(cfg, "attention_images"));
  if (a > 0) {
    Tensor attention({a, depth, model.heads, t, t});
    for (std::size_t i = 0; i < a; ++i)
      for (std::size_t l = 0; l < depth; ++l) {
        const Tensor& src = traces[i].attention[l];
        std::copy(src.data().begin(), src.data().end(),
                  attention.data().begin() + static_cast<long>((i * depth + l) * src.numel()));
      }
    save_tensor(attention, dir / "attention.tns");
  }
  out << "extracted " << m << " images, " << depth << " layers\n";
}

std::vector<Key> extract_keys() {
  return with(
      {
          {"checkpoint", Kind::String, nullptr, "checkpoint", "Checkpoint directory or train run directory"},
          {"seed", Kind::UInt, 1, "seed", "Scene seed"},
          {"data.n_images", Kind::UInt, 32, "n-images", "Scenes to trace"},
          {"include_registers", Kind::Bool, false, "include-registers", "Also export register output tokens"},
          {"attention_images", Kind::UInt, 4, "attention-images", "Images whose attention tensors are exported"},
      },
      scene_keys());
}

// ---------------------------------------------------------------- analyze

void cmd_analyze(const Json& cfg, const fs::path& dir, std::ostream& out) {
  const fs::path trace = string_at(cfg, "trace_dir");
  const TraceMeta meta = read_meta(trace / "features.json");
  const Tensor norms = load_required(trace / "norms.tns");
  const std::vector<Tensor> per_image = patch_norms(norms, meta);
  const ResolvedTau tau = resolve_tau(at(cfg, "tau"), per_image);
  write_json(dir / "tau.json", tau_json(tau));

  // Per-type outlier statistics pooled over images.
  std::array<TypeSummary, 3> pooled{};
  const TokenLayout layout{1, meta.n_registers};
  std::vector<std::vector<bool>> masks;
  for (std::size_t i = 0; i < norms.dim(0); ++i) {
    const OutlierReport rep = detect_outliers(item(norms, i), tau.tau, layout);
    for (std::size_t k = 0; k < 3; ++k) {
      pooled[k].count += rep.by_type[k].count;
      pooled[k].outliers += rep.by_type[k].outliers;
      pooled[k].mean_norm += rep.by_type[k].mean_norm * static_cast<double>(rep.by_type[k].count);
      pooled[k].max_norm = std::max(pooled[k].max_norm, rep.by_type[k].max_norm);
    }
    masks.emplace_back(rep.mask.begin() + static_cast<long>(1 + meta.n_registers), rep.mask.end());
  }
  CsvWriter outliers({"type", "count", "outliers", "fraction", "mean_norm", "max_norm"});
  for (auto type : {TokenType::Cls, TokenType::Register, TokenType::Patch}) {
    const auto& s = pooled[static_cast<std::size_t>(type)];
    if (s.count == 0) continue;
    const double c = static_cast<double>(s.count);
    outliers.row({to_string(type), num(s.count), num(s.outliers), num(static_cast<double>(s.outliers) / c),
                  num(s.mean_norm / c), num(s.max_norm)});
  }
  outliers.save(dir / "outliers.csv");

  // Layer profile pooled over images.
  const Tensor layer_norms = load_required(trace / "layer_norms.tns");
  const std::size_t m = layer_norms.dim(0), layers = layer_norms.dim(1), n = layer_norms.dim(2);
  Tensor by_layer({layers, m * n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t l = 0; l < layers; ++l)
      for (std::size_t p = 0; p < n; ++p) by_layer.at(l, i * n + p) = layer_norms[(i * layers + l) * n + p];
  const LayerNormProfile profile = profile_from_norms(by_layer);
  CsvWriter layer_csv({"layer", "q1", "q25", "q50", "q75", "q99", "max"});
  for (std::size_t l = 0; l < profile.layers.size(); ++l) {
    const auto& s = profile.layers[l];
    layer_csv.row({num(l), num(s.q1), num(s.q25), num(s.q50), num(s.q75), num(s.q99), num(s.max)});
  }
  layer_csv.save(dir / "layer_norms.csv");

  // Neighbour cosine after patch embedding, split by the output-norm mask.
  const Tensor embeds = load_required(trace / "patch_embeds.tns");
  CsvWriter cos_csv({"image_id", "patch", "cosine", "outlier", "zero_vector"});
  double sum_out = 0, sum_norm = 0;
  std::size_t n_out = 0, n_norm = 0;
  for (std::size_t i = 0; i < embeds.dim(0); ++i) {
    const NeighborCosine nc = neighbor_cosine(item(embeds, i), meta.grid, masks[i]);
    for (std::size_t p = 0; p < meta.grid.area(); ++p) {
      cos_csv.row({num(i), num(p), num(nc.per_patch[p]), masks[i][p] ? "1" : "0", nc.zero_vector[p] ? "1" : "0"});
    }
    for (double v : nc.outlier_dist) sum_out += v, ++n_out;
    for (double v : nc.normal_dist) sum_norm += v, ++n_norm;
  }
  cos_csv.save(dir / "neighbor_cosine.csv");
  CsvWriter cos_summary({"group", "count", "mean_cosine"});
  cos_summary.row({"outlier", num(n_out), n_out ? num(sum_out / static_cast<double>(n_out)) : "nan"});
  cos_summary.row({"normal", num(n_norm), n_norm ? num(sum_norm / static_cast<double>(n_norm)) : "nan"});
  cos_summary.save(dir / "neighbor_cosine_summary.csv");

  // Positional heatmap.
  const PositionHeatmap heat = position_heatmap(per_image, meta.grid, tau.tau);
  CsvWriter heat_csv({"row", "col", "count", "frequency"});
  for (std::size_t p = 0; p < meta.grid.area(); ++p) {
    heat_csv.row({num(p / meta.grid.cols), num(p % meta.grid.cols), num(heat.counts[p]), num(heat.frequency[p])});
  }
  heat_csv.save(dir / "heatmap.csv");
  write_pgm_minmax(heat.frequency, dir / "heatmap.pgm");

  const std::size_t maps = std::min(per_image.size(), uint_at(cfg, "norm_map_images"));
  for (std::size_t i = 0; i < maps; ++i) {
    write_pgm_minmax(per_image[i].reshaped({meta.grid.rows, meta.grid.cols}),
                     dir / ("norm_map_" + std::to_string(i) + ".pgm"));
  }

  const std::string train_dir = string_at(cfg, "train_dir");
  if (!train_dir.empty()) {
    const fs::path ckdir = fs::path(train_dir) / "checkpoints";
    if (!fs::is_directory(ckdir)) throw IoError("missing " + ckdir.string());
    std::vector<fs::path> steps;
    for (const auto& e : fs::directory_iterator(ckdir))
      if (e.is_directory() && e.path().filename().string().rfind("step_", 0) == 0) steps.push_back(e.path());
    std::sort(steps.begin(), steps.end());
    if (steps.empty()) throw IoError("no checkpoints under " + ckdir.string());
    std::vector<Snapshot> snaps;
    ModelConfig model;
    for (const auto& path : steps) {
      Checkpoint ck = load_checkpoint(path);
      model = ck.config;
      snaps.push_back({std::stoul(path.filename().string().substr(5)), std::move(ck.params), path});
    }
    const SceneSpec spec = scene_from(cfg, model);
    const Dataset probe = synth_dataset(uint_at(cfg, "seed"), uint_at(cfg, "probe_images"), spec);
    const auto series = norms_by_checkpoint(snaps, model, probe);
    CsvWriter ck_csv({"step", "q1", "q25", "q50", "q75", "q99", "max"});
    for (std::size_t i = 0; i < series.size(); ++i) {
      const auto& s = series[i];
      ck_csv.row({num(snaps[i].step), num(s.q1), num(s.q25), num(s.q50), num(s.q75), num(s.q99), num(s.max)});
    }
    ck_csv.save(dir / "norms_by_checkpoint.csv");
  }
  const auto& patch = pooled[static_cast<std::size_t>(TokenType::Patch)];
  out << "tau " << num(tau.tau) << ", patch outlier proportion "
      << num(static_cast<double>(patch.outliers) / static_cast<double>(patch.count)) << "\n";
}

std::vector<Key> analyze_keys() {
  return with(
      {
          {"trace_dir", Kind::String, nullptr, "trace-dir", "Output directory of an extract run"},
          {"tau", Kind::NumberOrAuto, "auto", "tau", "Outlier norm threshold or auto"},
          {"norm_map_images", Kind::UInt, 4, "norm-maps", "Per-image norm maps written as PGM"},
          {"train_dir", Kind::String, "", "train-dir", "Train run for per-checkpoint norm summaries"},
          {"seed", Kind::UInt, 2, "seed", "Probe-set seed for per-checkpoint summaries"},
          {"probe_images", Kind::UInt, 8, "probe-images", "Probe-set size for per-checkpoint summaries"},
      },
      scene_keys());
}

// ---------------------------------------------------------------- probe

void cmd_probe(const Json& cfg, const fs::path& dir, std::ostream& out) {
  const fs::path trace = string_at(cfg, "trace_dir");
  const TraceMeta meta = read_meta(trace / "features.json");
  const Tensor outputs = load_required(trace / "outputs.tns");
  const Tensor norms = load_required(trace / "norms.tns");
  const std::vector<Tensor> per_image = patch_norms(norms, meta);
  const ResolvedTau tau = resolve_tau(at(cfg, "tau"), per_image);

  LogisticOptions opts;
  opts.lambda = float_at(cfg, "logistic.lambda");
  opts.steps = uint_at(cfg, "logistic.steps");
  opts.lr = float_at(cfg, "logistic.lr");

  std::vector<ProbeResult> results;
  for (const auto& task_json : at(cfg, "tasks")) {
    const std::string task = task_json.get<std::string>();
    if (task == "position") {
      const PositionProbeResult r = position_probe(outputs, meta.grid, opts);
      results.push_back({"position", "all_patches", "top1", r.top1, 0.0, 1});
      results.push_back({"position", "all_patches", "mean_distance", r.mean_distance, 0.0, 1});
    } else if (task == "reconstruction") {
      const Tensor pixels = load_required(trace / "pixels.tns");
      const Json& lambda = at(cfg, "ridge_lambda");
      const double err = lambda.is_number() ? reconstruction_probe(outputs, pixels, lambda.get<double>())
                                            : reconstruction_probe(outputs, pixels);
      results.push_back({"reconstruction", "all_patches", "rms_l2_error", err, 0.0, 1});
    } else if (task == "classification") {
      ProbeFeatures f;
      f.cls = load_required(trace / "cls.tns");
      if (fs::exists(trace / "registers.tns")) f.registers = load_tensor(trace / "registers.tns");
      f.patches = outputs;
      f.patch_norms = stack(per_image);
      const std::string labels_csv = read_text(require_file(trace / "gt_boxes.csv", "written by extract"));
      std::stringstream lines(labels_csv);
      std::string line;
      std::getline(lines, line);
      while (std::getline(lines, line)) {
        const auto comma = line.find(',');
        f.labels.push_back(std::stoul(line.substr(comma + 1, line.find(',', comma + 1) - comma - 1)));
      }
      for (const auto& sel_json : at(cfg, "selectors")) {
        const TokenSelector sel = TokenSelector::parse(sel_json.get<std::string>());
        if (sel.kind == SelectorKind::Register && f.n_registers() == 0) {
          throw ContractError("selector " + sel.name() + " needs register tokens; rerun extract with --include-registers");
        }
        results.push_back(classification_probe(f, sel, tau.tau, uint_at(cfg, "n_seeds"), uint_at(cfg, "seed"), opts));
      }
    } else {
      throw UsageError("unknown probe task '" + task + "' (expected position, reconstruction or classification)");
    }
  }
  write_text(dir / "probe_results.csv", probe_results_csv(results));
  write_json(dir / "tau.json", tau_json(tau));
  out << results.size() << " probe results\n";
}

std::vector<Key> probe_keys() {
  const LogisticOptions o;
  return {
      {"trace_dir", Kind::String, nullptr, "trace-dir", "Output directory of an extract run"},
      {"tasks", Kind::StringList, Json::array({"position", "reconstruction", "classification"}), "tasks",
       "Comma-separated subset of position,reconstruction,classification"},
      {"selectors", Kind::StringList, Json::array({"cls", "random_normal_patch", "random_outlier_patch"}), "selectors",
       "Comma-separated token selectors for classification"},
      {"n_seeds", Kind::UInt, 5, "n-seeds", "Token draws per stochastic selector"},
      {"seed", Kind::UInt, 0, "seed", "Token-draw seed"},
      {"tau", Kind::NumberOrAuto, "auto", "tau", "Outlier norm threshold or auto"},
      {"ridge_lambda", Kind::NumberOrAuto, "auto", "lambda", "Reconstruction ridge penalty; auto = 1e-3 per row"},
      {"logistic.lambda", Kind::Float, o.lambda, "", ""},
      {"logistic.steps", Kind::UInt, o.steps, "", ""},
      {"logistic.lr", Kind::Float, o.lr, "", ""},
  };
}

// ---------------------------------------------------------------- lost

std::vector<std::vector<Box>> read_gt(const fs::path& path, std::size_t images) {
  std::stringstream lines(read_text(path));
  std::string line;
  std::getline(lines, line);
  std::vector<std::vector<Box>> gt(images);
  while (std::getline(lines, line)) {
    std::vector<long> v;
    std::stringstream fields(line);
    std::string f;
    while (std::getline(fields, f, ',')) v.push_back(std::stol(f));
    if (v.size() != 6) throw DataError(path.string() + ": expected image_id,label,x0,y0,x1,y1 rows");
    if (v[0] < 0 || static_cast<std::size_t>(v[0]) >= images) continue;
    gt[static_cast<std::size_t>(v[0])].push_back(
        {static_cast<int>(v[2]), static_cast<int>(v[3]), static_cast<int>(v[4]), static_cast<int>(v[5])});
  }
  return gt;
}

fs::path inside_run(const fs::path& dir, const std::string& rel, const std::string& key) {
  const fs::path p(rel);
  if (p.is_absolute() || rel.find("..") != std::string::npos) {
    throw UsageError("'" + key + "' must be a path inside the run directory, got " + rel);
  }
  return dir / p;
}

void cmd_lost(const Json& cfg, const fs::path& dir, std::ostream& out) {
  const fs::path features_path = string_at(cfg, "features");
  const Tensor bundle = load_required(features_path);
  fs::path meta_path = features_path;
  meta_path.replace_extension(".json");
  const TraceMeta meta = read_meta(meta_path);
  if (bundle.rank() != 5 || bundle.dim(2) != 4 || bundle.dim(3) != meta.grid.area()) {
    throw DimensionError("features bundle must be [images, layers, 4, N, d], got " + shape_to_string(bundle.shape()));
  }
  const FeatureKind kind = parse_feature_kind(string_at(cfg, "kind"));
  const int layer_arg = static_cast<int>(at(cfg, "layer").get<std::int64_t>());
  const std::size_t layer = resolve_layer(layer_arg, bundle.dim(1));
  const Json& bias_json = at(cfg, "bias");
  const std::size_t k_arg = uint_at(cfg, "k");
  const std::size_t m = bundle.dim(0), n = bundle.dim(3), d = bundle.dim(4);
  if (k_arg > n) throw UsageError("k = " + std::to_string(k_arg) + " exceeds the " + std::to_string(n) + " patches");

  std::vector<LostIntermediates> runs(m);
  std::vector<double> biases(m);
  parallel_for(m, [&](std::size_t i) {
    Tensor f({n, d});
    const auto offset = static_cast<long>(((i * bundle.dim(1) + layer) * 4 + static_cast<std::size_t>(kind)) * n * d);
    std::copy(bundle.data().begin() + offset, bundle.data().begin() + offset + static_cast<long>(n * d),
              f.data().begin());
    biases[i] = bias_json.is_number() ? bias_json.get<double>() : auto_bias(f);
    runs[i] = run_lost(f, meta.grid, biases[i], k_arg ? std::optional<std::size_t>(k_arg) : std::nullopt);
  });

  CsvWriter boxes({"image_id", "x0", "y0", "x1", "y1"});
  std::vector<Box> predicted;
  for (std::size_t i = 0; i < m; ++i) {
    const Box& b = runs[i].box;
    predicted.push_back(b);
    boxes.row({num(i), std::to_string(b.x0), std::to_string(b.y0), std::to_string(b.x1), std::to_string(b.y1)});
  }
  boxes.save(inside_run(dir, string_at(cfg, "out"), "out"));

  Json summary;
  summary["kind"] = to_string(kind);
  summary["layer"] = layer;
  summary["bias"] = bias_json;
  summary["k"] = k_arg ? k_arg : default_k(n);
  fs::path gt_path = string_at(cfg, "gt");
  if (gt_path.empty() && fs::exists(features_path.parent_path() / "gt_boxes.csv")) {
    gt_path = features_path.parent_path() / "gt_boxes.csv";
  }
  if (!gt_path.empty()) {
    const auto gt = read_gt(require_file(gt_path, "ground-truth boxes"), m);
    const CorlocReport rep = corloc(predicted, gt);
    CsvWriter hits({"image_id", "best_iou", "hit"});
    for (std::size_t i = 0; i < m; ++i) {
      double best = 0.0;
      for (const Box& g : gt[i]) best = std::max(best, iou(predicted[i], g));
      hits.row({num(i), num(best), rep.hits[i] ? "1" : "0"});
    }
    hits.save(dir / "corloc.csv");
    summary["corloc"] = rep.corloc;
    summary["images"] = m;
    out << "corloc " << num(rep.corloc) << " over " << m << " images\n";
  } else {
    out << "wrote " << m << " boxes (no ground truth)\n";
  }
  write_json(dir / "lost.json", summary);

  const std::size_t dumps = std::min(m, uint_at(cfg, "dump_intermediates"));
  for (std::size_t i = 0; i < dumps; ++i) {
    const LostIntermediates& r = runs[i];
    const std::string stem = "lost_" + std::to_string(i);
    Tensor mask({meta.grid.rows, meta.grid.cols});
    for (std::size_t p = 0; p < n; ++p) mask[p] = r.mask[p] ? 1.0 : 0.0;
    write_pgm_max(mask, dir / (stem + "_mask.pgm"));
    CsvWriter deg({"patch", "row", "col", "degree", "seed", "in_expansion", "mask", "bias"});
    for (std::size_t p = 0; p < n; ++p) {
      const bool in_s = std::binary_search(r.expansion.begin(), r.expansion.end(), p);
      deg.row({num(p), num(p / meta.grid.cols), num(p % meta.grid.cols), num(r.degrees[p]), p == r.seed ? "1" : "0",
               in_s ? "1" : "0", r.mask[p] ? "1" : "0", num(biases[i])});
    }
    deg.save(dir / (stem + "_degrees.csv"));
  }
}

std::vector<Key> lost_keys() {
  return {
      {"features", Kind::String, nullptr, "features", "features.tns bundle written by extract"},
      {"kind", Kind::Choice, "keys", "kind", "Feature kind", {"keys", "queries", "values", "outputs"}},
      {"layer", Kind::Int, -1, "layer", "Block index; negative counts from the end"},
      {"bias", Kind::NumberOrAuto, nullptr, "bias", "Gram bias b, or auto for -median"},
      {"k", Kind::UInt, 0, "k", "Expansion pool size; 0 = ceil(0.4 N)"},
      {"out", Kind::String, "boxes.csv", "out", "Boxes CSV, relative to the run directory"},
      {"gt", Kind::String, "", "gt", "Ground-truth CSV; defaults to gt_boxes.csv next to the features"},
      {"dump_intermediates", Kind::UInt, 0, "dump", "Images whose mask and degrees are written"},
  };
}

// ---------------------------------------------------------------- interp-analysis

void cmd_interp(const Json& cfg, const fs::path& dir, std::ostream& out) {
  ResizeSpec spec;
  spec.src_h = spec.src_w = uint_at(cfg, "src");
  spec.dst_h = spec.dst_w = uint_at(cfg, "dst");
  spec.antialias = string_at(cfg, "antialias") == "on";
  spec.a = float_at(cfg, "a");
  spec.validate();
  const Tensor g = unit_gradient_map(spec);
  save_tensor(g, dir / "unit_gradient.tns");
  write_pgm_minmax(g, dir / "unit_gradient.pgm");
  CsvWriter cols({"column", "sum"});
  for (std::size_t c = 0; c < g.dim(1); ++c) {
    double s = 0.0;
    for (std::size_t r = 0; r < g.dim(0); ++r) s += g.at(r, c);
    cols.row({num(c), num(s)});
  }
  cols.save(dir / "column_sums.csv");
  Json j;
  j["striping_metric"] = striping_metric(g);
  j["antialias"] = spec.antialias;
  j["src"] = spec.src_h;
  j["dst"] = spec.dst_h;
  write_json(dir / "striping.json", j);
  out << "striping " << num(j["striping_metric"].get<double>()) << "\n";
}

std::vector<Key> interp_keys() {
  return {
      {"src", Kind::UInt, 16, "src", "Source grid side"},
      {"dst", Kind::UInt, 7, "dst", "Target grid side"},
      {"antialias", Kind::Choice, "off", "antialias", "Antialias when downscaling", {"on", "off"}},
      {"a", Kind::Float, -0.5, "", ""},
  };
}

// ---------------------------------------------------------------- complexity

void cmd_complexity(const Json& cfg, const fs::path& dir, std::ostream& out) {
  ModelConfig base = model_from(cfg);
  CsvWriter csv({"registers", "seq_len", "output_tokens", "params", "param_delta", "flops", "flop_increase"});
  base.n_registers = 0;
  const auto p0 = count_params(base);
  const auto f0 = count_flops(base);
  for (const auto& r : at(cfg, "register_counts")) {
    ModelConfig c = base;
    c.n_registers = r.get<std::size_t>();
    c.validate();
    const auto p = count_params(c), f = count_flops(c);
    csv.row({num(c.n_registers), num(c.seq_len()), num(1 + c.num_patches()), std::to_string(p), std::to_string(p - p0),
             std::to_string(f), num(static_cast<double>(f - f0) / static_cast<double>(f0))});
  }
  csv.save(dir / "complexity.csv");
  write_text(dir / "flops_formula.txt", flops_formula() + "\n");
  out << "wrote " << (dir / "complexity.csv").generic_string() << "\n";
}

std::vector<Key> complexity_keys() {
  return with(model_keys(), {{"register_counts", Kind::UIntList, Json::array({0, 1, 2, 4, 8, 16}), "register-counts",
                              "Comma-separated register counts"}});
}

// ---------------------------------------------------------------- viz

struct MapRequest {
  int layer = -1;
  std::optional<std::size_t> head;
  std::size_t query = 0;
};

MapRequest parse_map(const std::string& text) {
  std::vector<std::string> parts;
  std::stringstream in(text);
  std::string p;
  while (std::getline(in, p, ':')) parts.push_back(p);
  try {
    if (parts.size() != 3) throw std::invalid_argument("parts");
    std::size_t used = 0;
    MapRequest m;
    m.layer = std::stoi(parts[0], &used);
    if (used != parts[0].size()) throw std::invalid_argument("layer");
    if (parts[1] != "mean") {
      if (parts[1].empty() || parts[1][0] == '-') throw std::invalid_argument("head");
      m.head = std::stoul(parts[1], &used);
      if (used != parts[1].size()) throw std::invalid_argument("head");
    }
    if (parts[2].empty() || parts[2][0] == '-') throw std::invalid_argument("query");
    m.query = std::stoul(parts[2], &used);
    if (used != parts[2].size()) throw std::invalid_argument("query");
    return m;
  } catch (const std::logic_error&) {
    throw UsageError("map '" + text + "' must look like LAYER:HEAD|mean:QUERY, e.g. -1:mean:0");
  }
}

void cmd_viz(const Json& cfg, const fs::path& dir, std::ostream& out) {
  const fs::path trace_dir = string_at(cfg, "trace_dir");
  const TraceMeta meta = read_meta(trace_dir / "features.json");
  const Tensor attention = load_required(trace_dir / "attention.tns", "extract --attention-images must be > 0");
  const std::size_t exported = attention.dim(0);

  CsvWriter index({"file", "image_id", "layer", "head", "query", "nonstandard_query", "max"});
  std::size_t written = 0;
  for (const auto& img : at(cfg, "images")) {
    const std::size_t i = img.get<std::size_t>();
    if (i >= exported) {
      throw RangeError("image " + std::to_string(i) + " has no exported attention (extract exported " +
                       std::to_string(exported) + ")");
    }
    ForwardTrace trace;
    trace.grid = meta.grid;
    trace.n_registers = meta.n_registers;
    trace.heads = attention.dim(2);
    trace.captured = true;
    const Tensor per_image = item(attention, i);
    for (std::size_t l = 0; l < per_image.dim(0); ++l) trace.attention.push_back(item(per_image, l));
    for (const auto& spec_json : at(cfg, "maps")) {
      const MapRequest req = parse_map(spec_json.get<std::string>());
      const AttentionMap map = attention_map(trace, req.layer, req.head, req.query);
      const std::size_t layer = resolve_layer(req.layer, trace.depth());
      const std::string head = req.head ? std::to_string(*req.head) : "mean";
      const std::string name = "attn_img" + std::to_string(i) + "_l" + std::to_string(layer) + "_h" + head + "_q" +
                               std::to_string(req.query) + ".pgm";
      const PgmScaling s = write_pgm_max(map.map, dir / name);
      index.row({name, num(i), num(layer), head, num(req.query), map.nonstandard_query ? "1" : "0", num(s.max)});
      ++written;
    }
  }
  index.save(dir / "viz.csv");
  out << "wrote " << written << " attention maps\n";
}

std::vector<Key> viz_keys() {
  return {
      {"trace_dir", Kind::String, nullptr, "trace-dir", "Output directory of an extract run"},
      {"maps", Kind::StringList, Json::array({"-1:mean:0"}), "maps",
       "Comma-separated LAYER:HEAD|mean:QUERY triples; query 0 is CLS, 1..R are registers"},
      {"images", Kind::UIntList, Json::array({0}), "images", "Comma-separated image ids"},
  };
}

}  // namespace

std::vector<Command> make_commands() {
  std::vector<Command> cmds;
  cmds.push_back({"train", "Train a ViT on synthetic scenes", Schema("train", train_keys()), cmd_train});
  cmds.push_back({"extract", "Trace a checkpoint over synthetic scenes and export features",
                  Schema("extract", extract_keys()), cmd_extract});
  cmds.push_back({"analyze", "Outlier, norm-profile, neighbour-cosine and heatmap reports",
                  Schema("analyze", analyze_keys()), cmd_analyze});
  cmds.push_back({"probe", "Position, reconstruction and classification probes", Schema("probe", probe_keys()),
                  cmd_probe});
  cmds.push_back({"lost", "Object discovery and corloc on exported features", Schema("lost", lost_keys()), cmd_lost});
  cmds.push_back({"interp-analysis", "Unit-gradient striping of a bicubic resize",
                  Schema("interp-analysis", interp_keys()), cmd_interp});
  cmds.push_back({"complexity", "Parameter and FLOP counts against register count",
                  Schema("complexity", complexity_keys()), cmd_complexity});
  cmds.push_back({"viz", "Attention maps as PGM images", Schema("viz", viz_keys()), cmd_viz});
  return cmds;
}

}  // namespace regvit::cli
