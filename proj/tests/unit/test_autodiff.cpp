#include <cstring>

#include "doctest.h"
#include "regvit/autodiff.hpp"
#include "regvit/errors.hpp"
#include "test_util.hpp"

using namespace regvit;
using regvit::testing::central_difference;
using regvit::testing::random_tensor;
using regvit::testing::relative_error;

TEST_CASE("backward of sum and quadratic form") {
  ad::Tape tape;
  const Tensor x0 = random_tensor({3, 4}, 1);
  ad::Var x = tape.leaf(x0);
  ad::Var loss = ad::sum(x);
  CHECK(ad::backward(tape, loss)[x] == Tensor::ones({3, 4}));

  ad::Tape tape2;
  ad::Var y = tape2.leaf(x0);
  const auto grads = ad::backward(tape2, ad::sum(ad::mul(y, y)));
  CHECK(regvit::testing::max_abs_diff(grads[y], scaled(x0, 2.0)) == 0.0);
}

TEST_CASE("backward contract: scalar loss, unreachable leaves get zeros") {
  ad::Tape tape;
  ad::Var x = tape.leaf(random_tensor({2, 2}, 2));
  ad::Var unused = tape.leaf(random_tensor({5}, 3));
  CHECK_THROWS_AS(ad::backward(tape, x), ContractError);
  const auto grads = ad::backward(tape, ad::sum(ad::gelu(x)));
  CHECK(grads[unused] == Tensor::zeros({5}));
}

namespace {

// Builds a composite graph exercising every primitive the ViT uses and
// returns the scalar loss for the given leaf values.
struct CompositeGraph {
  Tensor a, b, row, gain, bias;

  ad::Var build(ad::Tape& tape, std::vector<ad::Var>& leaves) const {
    ad::Var va = tape.leaf(a), vb = tape.leaf(b), vr = tape.leaf(row), vg = tape.leaf(gain), vbias = tape.leaf(bias);
    leaves = {va, vb, vr, vg, vbias};
    ad::Var h = ad::add_row(ad::matmul(va, vb), vr);
    ad::Var n = ad::layer_norm(h, vg, vbias, 1e-6);
    ad::Var left = ad::slice_cols(n, 0, 2);
    ad::Var right = ad::slice_cols(n, 2, 4);
    ad::Var scores = ad::softmax_lastdim(ad::scale(ad::matmul_nt(left, right), 0.7));
    ad::Var mixed = ad::matmul(scores, ad::gelu(right));
    std::vector<ad::Var> cols{mixed, left};
    ad::Var cat = ad::concat_cols(cols);
    std::vector<ad::Var> rows{ad::slice_rows(cat, 0, 1), ad::transpose(ad::transpose(cat))};
    ad::Var stacked = ad::concat_rows(rows);
    ad::Var logits = ad::reshape(ad::slice_rows(stacked, 1, 2), {4});
    return ad::add(ad::cross_entropy(logits, 2), ad::sum(ad::mul(stacked, stacked)));
  }
};

}  // namespace

TEST_CASE("composite graph gradients match central finite differences") {
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    CompositeGraph g{random_tensor({3, 5}, 10 * seed + 1), random_tensor({5, 4}, 10 * seed + 2),
                     random_tensor({4}, 10 * seed + 3), random_tensor({4}, 10 * seed + 4, 0.5),
                     random_tensor({4}, 10 * seed + 5, 0.5)};
    ad::Tape tape;
    std::vector<ad::Var> leaves;
    ad::Var loss = g.build(tape, leaves);
    const auto grads = ad::backward(tape, loss);

    std::vector<Tensor*> fields{&g.a, &g.b, &g.row, &g.gain, &g.bias};
    for (std::size_t f = 0; f < fields.size(); ++f) {
      for (std::size_t i = 0; i < fields[f]->numel(); ++i) {
        auto eval = [&](const Tensor& x) {
          CompositeGraph copy = g;
          *std::vector<Tensor*>{&copy.a, &copy.b, &copy.row, &copy.gain, &copy.bias}[f] = x;
          ad::Tape t;
          std::vector<ad::Var> unused;
          return copy.build(t, unused).value().item();
        };
        const double numeric = central_difference(eval, *fields[f], i);
        CHECK(relative_error(grads[leaves[f]][i], numeric) < 1e-4);
      }
    }
  }
}

TEST_CASE("backward is deterministic on the same tape") {
  CompositeGraph g{random_tensor({3, 5}, 1), random_tensor({5, 4}, 2), random_tensor({4}, 3),
                   random_tensor({4}, 4), random_tensor({4}, 5)};
  ad::Tape tape;
  std::vector<ad::Var> leaves;
  ad::Var loss = g.build(tape, leaves);
  const auto first = ad::backward(tape, loss);
  const auto second = ad::backward(tape, loss);
  for (auto leaf : leaves) {
    CHECK(std::memcmp(first[leaf].data().data(), second[leaf].data().data(), first[leaf].numel() * sizeof(double)) ==
          0);
  }
}

TEST_CASE("variables from different tapes are rejected") {
  ad::Tape t1, t2;
  ad::Var a = t1.leaf(Tensor::ones({2, 2}));
  ad::Var b = t2.leaf(Tensor::ones({2, 2}));
  CHECK_THROWS_AS(ad::add(a, b), ContractError);
  CHECK_THROWS_AS(ad::matmul(a, t1.constant(Tensor::ones({3, 2}))), DimensionError);
}
