#include "../common/oracles.hpp"
#include "doctest.h"
#include "regvit/errors.hpp"
#include "regvit/lost.hpp"
#include "test_util.hpp"

using namespace regvit;
using regvit::testing::random_tensor;

namespace {

ModelConfig lost_model() {
  ModelConfig c;
  c.image_size = 32;
  c.patch_size = 8;
  c.embed_dim = 16;
  c.depth = 2;
  c.heads = 2;
  c.n_registers = 2;
  return c;
}

}  // namespace

TEST_CASE("extract_features") {
  const ModelConfig c = lost_model();
  const ForwardTrace trace = run_model(random_tensor({3, 32, 32}, 1), init_params(c, 2), c, true);
  CHECK(extract_features(trace, {FeatureKind::Outputs, -1}) == split_outputs(trace).patches);
  for (auto kind : {FeatureKind::Keys, FeatureKind::Queries, FeatureKind::Values}) {
    const Tensor f = extract_features(trace, {kind, 0});
    CHECK(f.shape() == Shape{16, 16});
  }
  CHECK(extract_features(trace, {FeatureKind::Keys, 1}).row(0)[3] == trace.keys[1].at(3, 3));
  CHECK_THROWS_AS(extract_features(trace, {FeatureKind::Keys, 2}), RangeError);
  CHECK_THROWS_AS(extract_features(trace, {FeatureKind::Keys, -3}), RangeError);

  testing::TempDir dir("features");
  const Tensor f = extract_features(trace, {FeatureKind::Values, -1});
  save_tensor(f, dir.path() / "f.tns");
  CHECK(load_tensor(dir.path() / "f.tns") == f);

  CHECK(parse_feature_kind("keys") == FeatureKind::Keys);
  CHECK_THROWS_AS(parse_feature_kind("tokens"), UsageError);
}

TEST_CASE("gram_with_bias") {
  const Tensor a = gram_with_bias(Tensor::identity(5), 0.0);
  CHECK(a == Tensor::identity(5));

  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Tensor f = random_tensor({3 + seed, 7}, seed);
    const Tensor g = gram_with_bias(f, -0.3);
    for (std::size_t i = 0; i < g.dim(0); ++i)
      for (std::size_t j = 0; j < g.dim(0); ++j) {
        CHECK(g.at(i, j) == g.at(j, i));
        CHECK(std::abs(g.at(i, j) - oracle::gram_entry(f, i, j, -0.3)) < 1e-12);
      }
  }
  const Tensor f = Tensor::matrix({{1.0}, {2.0}, {3.0}});
  CHECK(auto_bias(f) == -3.0);
}

TEST_CASE("select_seed") {
  SUBCASE("isolated anti-correlated patch") {
    Tensor f({9, 2});
    for (std::size_t p = 0; p < 9; ++p) f.at(p, 0) = 1.0;
    f.at(4, 0) = -1.0;
    CHECK(select_seed(gram_with_bias(f, 0.0)) == 4);
  }
  SUBCASE("ties go to index 0") {
    CHECK(select_seed(Tensor({6, 6}, 1.0)) == 0);
    CHECK(select_seed(gram_with_bias(random_tensor({6, 3}, 3), -1e9)) == 0);
  }
  SUBCASE("matches brute-force degree scan") {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
      const std::size_t n = 4 + seed * 2;
      const Tensor a = gram_with_bias(random_tensor({n, 5}, seed), 0.5 * static_cast<double>(seed % 3) - 0.5);
      CHECK(select_seed(a) == oracle::lost_seed(a));
    }
  }
  SUBCASE("raising the bias never lowers a degree") {
    const Tensor f = random_tensor({20, 4}, 8);
    auto prev = degrees(gram_with_bias(f, -3.0));
    for (double b = -2.5; b <= 3.0; b += 0.5) {
      const auto now = degrees(gram_with_bias(f, b));
      for (std::size_t p = 0; p < now.size(); ++p) CHECK(now[p] >= prev[p]);
      prev = now;
    }
  }
}

TEST_CASE("expand_and_mask") {
  const GridShape grid{5, 6};
  Tensor f({30, 2});
  for (std::size_t p = 0; p < 30; ++p) f.at(p, 0) = 1.0;
  for (std::size_t p : {8u, 9u, 14u, 15u}) f.at(p, 0) = 0.0, f.at(p, 1) = 1.0;

  SUBCASE("planted 2x2 block") {
    const auto r = run_lost(f, grid, -0.5);
    CHECK(r.seed == 8);
    CHECK(r.box == Box{2, 1, 3, 2});
    CHECK(r.expansion == std::vector<std::size_t>{8, 9, 14, 15});
  }
  SUBCASE("k = 1 keeps only the seed") {
    const Tensor a = gram_with_bias(random_tensor({30, 3}, 5), 0.0);
    const auto r = expand_and_mask(a, grid, 7, 1);
    CHECK(r.expansion == std::vector<std::size_t>{7});
    for (std::size_t q = 0; q < 30; ++q) CHECK(r.mask[q] == (a.at(q, 7) >= 0.0));
  }
  SUBCASE("positive rescaling with zero bias") {
    const Tensor x = random_tensor({30, 4}, 9);
    const auto a = run_lost(x, grid, 0.0);
    const auto b = run_lost(scaled(x, 3.7), grid, 0.0);
    CHECK(a.mask == b.mask);
    CHECK(a.box == b.box);
  }
  SUBCASE("invariants") {
    const auto r = run_lost(random_tensor({30, 4}, 10), grid, 0.0);
    CHECK(std::find(r.expansion.begin(), r.expansion.end(), r.seed) != r.expansion.end());
    CHECK(r.box.valid());
  }
  CHECK(default_k(30) == 12);
  CHECK(default_k(64) == 26);
  CHECK(default_k(1) == 1);
  CHECK_THROWS_AS(expand_and_mask(gram_with_bias(f, 0.0), grid, 0, 31), ContractError);
}

TEST_CASE("corloc") {
  const std::vector<Box> boxes{{0, 0, 1, 1}, {2, 2, 4, 4}};
  CHECK(corloc(boxes, {{boxes[0]}, {boxes[1]}}).corloc == 1.0);
  CHECK(corloc(boxes, {{Box{5, 5, 6, 6}}, {Box{0, 0, 1, 1}}}).corloc == 0.0);
  CHECK(iou(Box{0, 0, 1, 1}, Box{0, 0, 1, 3}) == 0.5);
  const auto r = corloc({Box{0, 0, 1, 1}}, {{Box{7, 7, 7, 7}, Box{0, 0, 1, 3}}});
  CHECK(r.hits == std::vector<bool>{true});
  CHECK_THROWS_AS(corloc(boxes, {{boxes[0]}, {}}), DataError);
}

TEST_CASE("planted scenes are recovered") {
  const GridShape grid{8, 8};
  std::vector<Box> pred;
  std::vector<std::vector<Box>> gt;
  for (std::uint64_t s = 0; s < 30; ++s) {
    const PlantedScene scene = planted_scene(s, grid, 16);
    CHECK(2 * scene.object.area() < 64);
    pred.push_back(run_lost(scene.features, grid, -0.5).box);
    gt.push_back({scene.object});
    CHECK(pred.back() == scene.object);
  }
  CHECK(corloc(pred, gt).corloc == 1.0);
}
