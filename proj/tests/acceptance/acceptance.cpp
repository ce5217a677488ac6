// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. Tolerances and runtime budgets are fixed below.

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <sstream>

#include "cli.hpp"
#include "json.hpp"
#include "oracles.hpp"
#include "regvit/errors.hpp"
#include "regvit/interp.hpp"
#include "regvit/lost.hpp"
#include "regvit/metrics.hpp"
#include "regvit/probes.hpp"
#include "regvit/report.hpp"
#include "regvit/rng.hpp"
#include "regvit/train.hpp"
#include "regvit/vit.hpp"
#include "test_util.hpp"

using namespace regvit;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances.
constexpr double kFdStep = 1e-5;
constexpr double kGradRelTol = 1e-4;
constexpr std::size_t kGradSamples = 200;
constexpr double kTrainAccuracy = 0.9;
constexpr double kPositionTop1 = 0.95;
constexpr double kReconRelTol = 1e-3;
constexpr double kBackgroundAccuracy = 0.95;
constexpr double kPlantedBias = -0.5;
constexpr double kConstantTol = 1e-9;
constexpr double kUnitGradTol = 1e-10;

struct Verdict {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << "[failed: " << what << "] ";
    }
  }
};

// ---------------------------------------------------------------- 1

double classification_loss(const Params& p, const ModelConfig& c, const Tensor& image, std::size_t label) {
  ad::Tape tape;
  const BoundParams b = bind_params(tape, p, false);
  ad::Var tokens = graph::encoder(b, c, graph::assemble_sequence(b, c, graph::patch_embed(tape, b, c, image)), nullptr);
  return ad::cross_entropy(ad::reshape(graph::classify(b, c, tokens), {c.n_classes}), label).value().item();
}

void gradient_check(Verdict& v) {
  ModelConfig c;
  c.image_size = 32;
  c.patch_size = 8;
  c.embed_dim = 32;
  c.depth = 2;
  c.heads = 2;
  c.n_registers = 2;
  const Params params = init_params(c, 101);
  const Tensor image = testing::random_tensor({3, 32, 32}, 102);
  const std::size_t label = 1;

  ad::Tape tape;
  const BoundParams bound = bind_params(tape, params, true);
  ad::Var tokens =
      graph::encoder(bound, c, graph::assemble_sequence(bound, c, graph::patch_embed(tape, bound, c, image)), nullptr);
  const ad::Var loss = ad::cross_entropy(ad::reshape(graph::classify(bound, c, tokens), {2}), label);
  const ad::Gradients grads = ad::backward(tape, loss);

  std::vector<std::string> names;
  std::vector<ad::Var> vars;
  bound.for_each([&](const std::string& name, const ad::Var& var) {
    names.push_back(name);
    vars.push_back(var);
  });
  std::size_t total = 0;
  for (const auto& var : vars) total += var.value().numel();

  Rng rng(103);
  double worst = 0.0;
  std::string worst_at;
  for (std::size_t s = 0; s < kGradSamples; ++s) {
    std::size_t flat = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(total) - 1));
    std::size_t which = 0;
    while (flat >= vars[which].value().numel()) flat -= vars[which++].value().numel();
    const double a = grads[vars[which]][flat];
    const auto f = [&](double delta) {
      Params p = params;
      std::size_t k = 0;
      p.for_each([&](const std::string&, Tensor& t) {
        if (k++ == which) t[flat] += delta;
      });
      return classification_loss(p, c, image, label);
    };
    const double numeric = (f(kFdStep) - f(-kFdStep)) / (2.0 * kFdStep);
    const double rel = testing::relative_error(a, numeric);
    if (rel > worst) worst = rel, worst_at = names[which] + "[" + std::to_string(flat) + "]";
  }
  v.require(worst < kGradRelTol, "max relative error");
  v.detail << "max rel err " << worst << " at " << worst_at << " over " << kGradSamples << " of " << total
           << " params";
}

// ---------------------------------------------------------------- 2

void register_contract(Verdict& v) {
  ModelConfig c = toy_model_config();
  const std::size_t n = c.num_patches(), d = c.embed_dim;
  const Tensor image = testing::random_tensor({3, c.image_size, c.image_size}, 201);
  const std::uint64_t p0 = count_params(c);
  std::uint64_t prev_flops = 0;
  for (std::size_t r : {0, 1, 2, 4, 8, 16}) {
    c.n_registers = r;
    const Params p = init_params(c, 202);
    const ForwardTrace trace = run_model(image, p, c, true);
    const SplitOutputs out = split_outputs(trace);
    v.require(trace.seq_len() == 1 + r + n && c.seq_len() == 1 + r + n, "sequence length R=" + std::to_string(r));
    v.require(1 + out.patches.dim(0) == 1 + n && out.cls.numel() == d, "output tokens R=" + std::to_string(r));
    v.require(count_params(c) - p0 == r * d, "param delta R=" + std::to_string(r));
    v.require(total_scalars(p) == count_params(c), "enumerated params R=" + std::to_string(r));
    const std::uint64_t flops = count_flops(c);
    v.require(r == 0 || flops > prev_flops, "FLOPs monotone R=" + std::to_string(r));
    prev_flops = flops;
  }

  // ViT-L/14 at 224 px: N = 256.
  ModelConfig large;
  large.image_size = 224;
  large.patch_size = 14;
  large.embed_dim = 1024;
  large.depth = 24;
  large.heads = 16;
  const double f0 = static_cast<double>(count_flops(large));
  auto increase = [&](std::size_t r) {
    ModelConfig m = large;
    m.n_registers = r;
    return static_cast<double>(count_flops(m)) / f0 - 1.0;
  };
  const double at4 = increase(4), at16 = increase(16);
  v.require(large.num_patches() == 256, "N=256");
  v.require(at4 < 0.02, "R=4 FLOP increase < 2%");
  v.require(at16 < 0.08, "R=16 FLOP increase < 8%");
  v.detail << "toy N=" << n << " d=" << d << "; ViT-L/14 FLOP increase R=4 " << 100.0 * at4 << "%, R=16 "
           << 100.0 * at16 << "%";
}

// ---------------------------------------------------------------- 3

void training_sanity(Verdict& v) {
  const TrainConfig tc;  // defaults: 2000 steps, seed 0
  const SceneSpec spec;
  const Dataset data = synth_dataset(derive_seed(tc.seed, 100), 128, spec);
  for (std::size_t r : {0, 4}) {
    ModelConfig c = toy_model_config();
    c.n_registers = r;
    const TrainResult a = train(c, tc, data);
    const double acc = evaluate(a.params, c, data);
    v.require(acc >= kTrainAccuracy, "accuracy R=" + std::to_string(r));
    v.detail << "R=" << r << " acc " << acc << " loss " << a.log.back().loss << "; ";
    if (r == 4) {
      const TrainResult b = train(c, tc, data);
      const bool same = metric_log_csv(a.log) == metric_log_csv(b.log);
      v.require(same, "bitwise log reproducibility");
      v.detail << "rerun log identical: " << (same ? "yes" : "no");
    }
  }
}

// ---------------------------------------------------------------- 4

void metrics_oracles(Verdict& v) {
  Rng rng(401);
  std::size_t checked = 0;
  for (std::size_t fixture = 0; fixture < 50; ++fixture) {
    const GridShape grid{static_cast<std::size_t>(rng.uniform_int(1, 8)), static_cast<std::size_t>(rng.uniform_int(1, 8))};
    const std::size_t n = grid.area(), r = static_cast<std::size_t>(rng.uniform_int(0, 4));
    const std::size_t d = static_cast<std::size_t>(rng.uniform_int(2, 16));
    const std::size_t images = static_cast<std::size_t>(rng.uniform_int(1, 10));
    const double tau = 5.0 + 10.0 * rng.uniform();
    const std::string tag = "fixture " + std::to_string(fixture);

    std::vector<Tensor> per_image;
    for (std::size_t i = 0; i < images; ++i) {
      Tensor x = testing::random_tensor({1 + r + n, d}, derive_seed(402, fixture * 100 + i));
      for (std::size_t row = 0; row < x.dim(0); ++row)
        if (rng.uniform() < 0.1)
          for (std::size_t k = 0; k < d; ++k) x.at(row, k) *= 20.0;
      if (n > 2 && rng.uniform() < 0.3)
        for (std::size_t k = 0; k < d; ++k) x.at(1 + r + 1, k) = 0.0;

      const Tensor norms = token_norms(x);
      for (std::size_t row = 0; row < x.dim(0); ++row)
        v.require(norms[row] == oracle::row_norm(x, row), tag + " norms");
      const OutlierReport rep = detect_outliers(norms, tau, TokenLayout{1, r});
      const auto want = oracle::count_outliers(norms, tau, 1 + r);
      v.require(rep.mask == want.mask, tag + " mask");
      v.require(rep.proportion == static_cast<double>(want.patch_outliers) / static_cast<double>(want.patches),
                tag + " proportion");

      const Tensor patches = x.slice0(1 + r, 1 + r + n);
      const std::vector<bool> patch_mask(want.mask.begin() + static_cast<long>(1 + r), want.mask.end());
      const NeighborCosine nc = neighbor_cosine(patches, grid, patch_mask);
      const auto cos = oracle::neighbor_cosine(patches, grid.rows, grid.cols);
      for (std::size_t p = 0; p < n; ++p) v.require(nc.per_patch[p] == cos[p], tag + " neighbor cosine");
      per_image.push_back(norms.slice0(1 + r, 1 + r + n));
      ++checked;
    }
    const PositionHeatmap heat = position_heatmap(per_image, grid, tau);
    const auto counts = oracle::heatmap_counts(per_image, tau);
    v.require(heat.counts == counts, tag + " heatmap counts");
    for (std::size_t p = 0; p < n; ++p)
      v.require(heat.frequency[p] == static_cast<double>(counts[p]) / static_cast<double>(images), tag + " frequency");
  }

  // Injected-outlier heatmap: one cell always high, the rest never.
  const GridShape grid{8, 8};
  std::vector<Tensor> injected;
  for (std::size_t i = 0; i < 40; ++i) {
    Tensor norms({64});
    for (auto& x : norms.data()) x = 20.0 + 10.0 * rng.uniform();
    norms[27] = 400.0 + rng.uniform();
    injected.push_back(norms);
  }
  const PositionHeatmap heat = position_heatmap(injected, grid, 150.0);
  for (std::size_t p = 0; p < 64; ++p) v.require(heat.frequency[p] == (p == 27 ? 1.0 : 0.0), "injected heatmap");
  v.require(heat.counts == oracle::heatmap_counts(injected, 150.0), "injected heatmap counts");
  v.detail << "50 fixtures (" << checked << " token maps, N<=64) plus injected heatmap, exact equality";
}

// ---------------------------------------------------------------- 5

void probe_suite(Verdict& v) {
  // Position: raw position embeddings of an 8x8 grid, one copy per image.
  ModelConfig c;
  c.image_size = 64;
  c.patch_size = 8;
  c.embed_dim = 32;
  const Params p = init_params(c, 501);
  const std::size_t n = c.num_patches();
  const Tensor pos = p.pos_embed.slice0(1, 1 + n);
  std::vector<Tensor> copies(20, pos);
  const PositionProbeResult position = position_probe(stack(copies), c.grid());
  v.require(position.top1 > kPositionTop1, "position top-1");

  // Reconstruction: tokens are a random linear encoding of real scene patches.
  ModelConfig small;
  small.image_size = 32;
  small.patch_size = 4;
  SceneSpec spec;
  spec.background = Background::Noise;
  const Dataset scenes = synth_dataset(502, 20, spec);
  std::vector<Tensor> pixel_rows;
  for (const auto& s : scenes) pixel_rows.push_back(patchify(s.image, small));
  const Tensor pixels = stack(pixel_rows);
  const std::size_t q = small.patch_dim(), m = pixels.dim(0), np = pixels.dim(1);
  const Tensor encoder = testing::random_tensor({q, 64}, 503);
  const Tensor tokens = matmul(pixels.reshaped({m * np, q}), encoder).reshaped({m, np, 64});
  const double err = reconstruction_probe(tokens, pixels, 1e-8);
  // Pixel scale: RMS distance of held-out patches from the mean patch.
  std::vector<double> mean(q, 0.0);
  for (std::size_t row = 0; row < m * np; ++row)
    for (std::size_t k = 0; k < q; ++k) mean[k] += pixels[row * q + k] / static_cast<double>(m * np);
  double sq = 0.0;
  for (std::size_t row = 0; row < m * np; ++row)
    for (std::size_t k = 0; k < q; ++k) sq += std::pow(pixels[row * q + k] - mean[k], 2);
  const double scale = std::sqrt(sq / static_cast<double>(m * np));
  v.require(err < kReconRelTol * scale, "reconstruction error");

  // Background colour decides the label and every patch token carries its
  // scene's background colour (read off a non-object pixel) plus noise.
  SceneSpec bg_spec;
  bg_spec.class_rule = ClassRule::Background;
  const Dataset bg = synth_dataset(504, 100, bg_spec);
  const std::size_t bg_n = 16, bg_d = 8, side = bg_spec.image_size;
  ProbeFeatures f{Tensor({bg.size(), bg_d}), Tensor(), Tensor({bg.size(), bg_n, bg_d}), Tensor({bg.size(), bg_n}), {}};
  Rng noise(505);
  for (std::size_t i = 0; i < bg.size(); ++i) {
    std::size_t pixel = 0;
    while (bg[i].mask[pixel] != 0.0) ++pixel;
    f.labels.push_back(bg[i].label);
    for (std::size_t p = 0; p < bg_n; ++p) {
      for (std::size_t k = 0; k < bg_d; ++k) {
        const double colour = k < 3 ? bg[i].image[k * side * side + pixel] : 0.0;
        f.patches[(i * bg_n + p) * bg_d + k] = colour + 0.05 * noise.normal();
      }
      f.patch_norms.at(i, p) = 1.0;
    }
  }
  const ProbeResult cls = classification_probe(f, TokenSelector::parse("random_normal_patch"), 150.0, 5, 506);
  v.require(cls.value > kBackgroundAccuracy, "background accuracy");
  v.require(cls.n_seeds == 5, "n_seeds");

  v.detail << "position top1 " << position.top1 << "; reconstruction " << err / scale << " of pixel scale "
           << scale << "; background acc " << cls.value << " +- " << cls.std << " over " << cls.n_seeds << " seeds";
}

// ---------------------------------------------------------------- 6

void lost_suite(Verdict& v) {
  std::size_t fixtures = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const std::size_t n = 4 + seed * 2;
    const Tensor a = gram_with_bias(testing::random_tensor({n, 5}, 600 + seed), 0.25 * static_cast<double>(seed % 5) - 0.5);
    v.require(select_seed(a) == oracle::lost_seed(a), "seed fixture " + std::to_string(seed));
    ++fixtures;
  }

  const GridShape grid{8, 8};
  std::vector<Box> pred;
  std::vector<std::vector<Box>> gt;
  for (std::uint64_t s = 0; s < 100; ++s) {
    const PlantedScene scene = planted_scene(1000 + s, grid, 16);
    const Tensor a = gram_with_bias(scene.features, kPlantedBias);
    v.require(select_seed(a) == oracle::lost_seed(a), "planted seed " + std::to_string(s));
    ++fixtures;
    pred.push_back(run_lost(scene.features, grid, kPlantedBias).box);
    gt.push_back({scene.object});
  }
  const double planted = corloc(pred, gt).corloc;
  v.require(planted == 1.0, "planted corloc");

  // IoU exactly 0.5 is a hit; 4/9 is not.
  const auto at_half = corloc({{0, 0, 1, 1}}, {{{0, 0, 1, 3}}});
  const auto below = corloc({{0, 0, 1, 1}}, {{{0, 0, 2, 2}}});
  v.require(iou({0, 0, 1, 1}, {0, 0, 1, 3}) == 0.5 && at_half.corloc == 1.0, "IoU 0.5 counts");
  v.require(below.corloc == 0.0, "IoU 4/9 misses");
  v.detail << "seed == brute force on " << fixtures << " fixtures; planted corloc " << planted
           << " over 100 scenes (b=" << kPlantedBias << ", k=ceil(0.4N)); IoU boundary exact";
}

// ---------------------------------------------------------------- 7

ResizeSpec square(std::size_t src, std::size_t dst, bool aa) {
  ResizeSpec s;
  s.src_h = s.src_w = src;
  s.dst_h = s.dst_w = dst;
  s.antialias = aa;
  return s;
}

void interp_suite(Verdict& v) {
  double worst_const = 0.0, worst_grad = 0.0;
  for (bool aa : {false, true}) {
    for (auto [src, dst] : {std::pair<std::size_t, std::size_t>{16, 7}, {7, 16}, {16, 16}, {14, 5}, {5, 9}}) {
      const ResizeSpec s = square(src, dst, aa);
      const Tensor out = bicubic_resize(Tensor({src, src, 2}, 3.25), s);
      for (double x : out.data()) worst_const = std::max(worst_const, std::abs(x - 3.25));

      const Tensor x = testing::random_tensor({src, src, 3}, 700 + src + dst);
      if (src == dst) v.require(bicubic_resize(x, s) == x, "identity resize");

      // Rᵀ·1 from the separable weights against the taped gradient.
      const Tensor wy = resize_weights(src, dst, aa, s.a);
      const Tensor g = unit_gradient_map(s);
      for (std::size_t yy = 0; yy < src; ++yy)
        for (std::size_t xx = 0; xx < src; ++xx) {
          double cy = 0.0, cx = 0.0;
          for (std::size_t i = 0; i < dst; ++i) cy += wy.at(i, yy), cx += wy.at(i, xx);
          worst_grad = std::max(worst_grad, std::abs(g.at(yy, xx) - cy * cx));
        }
    }
  }
  v.require(worst_const < kConstantTol, "constant maps");
  v.require(worst_grad < kUnitGradTol, "unit gradient");
  const double plain = striping_metric(unit_gradient_map(square(16, 7, false)));
  const double aa = striping_metric(unit_gradient_map(square(16, 7, true)));
  v.require(plain > aa, "striping strictness");
  v.detail << "constant err " << worst_const << "; Rt1 vs autodiff " << worst_grad << "; striping 16->7 " << plain
           << " (no AA) > " << aa << " (AA)";
}

// ---------------------------------------------------------------- 8

struct Stage {
  std::string command;
  nlohmann::ordered_json config;
  std::string run_dir;
};

// One pipeline config, split into a config file per stage.
std::vector<Stage> pipeline_stages() {
  const auto j = nlohmann::ordered_json::parse(R"({
    "train":   {"seed": 3, "train": {"steps": 150, "checkpoint_every": 50}, "model": {"n_registers": 2}},
    "extract": {"checkpoint": "train", "data": {"n_images": 24}, "include_registers": true},
    "analyze": {"trace_dir": "extract", "train_dir": "train"},
    "probe":   {"trace_dir": "extract", "selectors": ["cls", "register:1", "random_normal_patch"]},
    "lost":    {"features": "extract/features.tns", "kind": "outputs", "bias": "auto", "dump_intermediates": 2},
    "viz":     {"trace_dir": "extract", "maps": ["-1:mean:0", "0:1:1"], "images": [0, 1]}
  })");
  std::vector<Stage> stages;
  for (auto it = j.begin(); it != j.end(); ++it) stages.push_back({it.key(), it.value(), it.key()});
  return stages;
}

std::vector<std::string> run_pipeline(const fs::path& root, std::string& failure) {
  const fs::path saved = fs::current_path();
  fs::current_path(root);
  std::vector<std::string> manifests;
  for (const Stage& s : pipeline_stages()) {
    write_text(s.command + ".json", s.config.dump(2));
    std::ostringstream out, err;
    const int code = cli::run_cli({s.command, "--config", s.command + ".json", "--run-dir", s.run_dir}, out, err);
    if (code != 0) {
      failure = s.command + ": " + err.str();
      break;
    }
    manifests.push_back(read_text(fs::path(s.run_dir) / kManifestName));
  }
  fs::current_path(saved);
  return manifests;
}

void e2e_determinism(Verdict& v) {
  testing::TempDir a("accept_e2e_a"), b("accept_e2e_b");
  std::string fail_a, fail_b;
  const auto first = run_pipeline(a.path(), fail_a);
  const auto second = run_pipeline(b.path(), fail_b);
  v.require(fail_a.empty() && fail_b.empty(), "pipeline ran: " + fail_a + fail_b);
  const std::size_t stages = pipeline_stages().size();
  v.require(first.size() == stages && second.size() == stages, "all stages");
  std::size_t identical = 0;
  for (std::size_t i = 0; i < std::min(first.size(), second.size()); ++i) identical += first[i] == second[i] ? 1 : 0;
  v.require(identical == stages, "byte-identical manifests");
  v.detail << identical << "/" << stages << " stage manifests byte-identical (train, extract, analyze, probe, lost, viz)";
}

struct Criterion {
  int id;
  std::string name;
  double budget_s;
  std::function<void(Verdict&)> run;
};

}  // namespace

int main() {
  const std::vector<Criterion> criteria = {
      {1, "gradient correctness", 60, gradient_check},
      {2, "register contract", 60, register_contract},
      {3, "training sanity", 600, training_sanity},
      {4, "outlier metrics oracle equivalence", 30, metrics_oracles},
      {5, "probe sanity", 120, probe_suite},
      {6, "LOST correctness", 60, lost_suite},
      {7, "interpolation", 10, interp_suite},
      {8, "end-to-end determinism", 600, e2e_determinism},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    Verdict v;
    const auto start = std::chrono::steady_clock::now();
    try {
      c.run(v);
    } catch (const std::exception& e) {
      v.require(false, std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    v.require(secs < c.budget_s, "runtime budget");
    failed += v.pass ? 0 : 1;
    std::cout << (v.pass ? "PASS" : "FAIL") << " [" << c.id << "] " << c.name << ": " << v.detail.str() << " ("
              << secs << " s, budget " << c.budget_s << " s)" << std::endl;
  }
  std::cout << (criteria.size() - static_cast<std::size_t>(failed)) << "/" << criteria.size() << " criteria passed"
            << std::endl;
  return failed == 0 ? 0 : 1;
}
