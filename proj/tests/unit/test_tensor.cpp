#include <cmath>
#include <cstring>

#include "doctest.h"
#include "regvit/errors.hpp"
#include "regvit/tensor.hpp"
#include "test_util.hpp"

using namespace regvit;
using regvit::testing::random_tensor;
using regvit::testing::reference_matmul;

TEST_CASE("matmul identity, zero and reference product") {
  const Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
  CHECK(matmul(a, Tensor::identity(2)) == a);
  CHECK(matmul(a, Tensor::zeros({2, 3})) == Tensor::zeros({2, 3}));

  const Tensor ones_col = Tensor::matrix({{1}, {1}});
  const Tensor expected = reference_matmul(a, ones_col);
  CHECK(expected == Tensor::matrix({{3}, {7}}));
  CHECK(matmul(a, ones_col) == expected);

  const Tensor x = random_tensor({5, 7}, 1);
  const Tensor y = random_tensor({7, 3}, 2);
  CHECK(regvit::testing::max_abs_diff(matmul(x, y), reference_matmul(x, y)) < 1e-12);
  CHECK(regvit::testing::max_abs_diff(matmul_nt(x, transpose(y)), reference_matmul(x, y)) < 1e-12);
  CHECK(regvit::testing::max_abs_diff(matmul_tn(transpose(x), y), reference_matmul(x, y)) < 1e-12);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(e.kind() == "dimension");
  }
}

TEST_CASE("softmax examples and row sums") {
  const Tensor u = softmax_lastdim(Tensor::vector({0, 0, 0}));
  for (double v : u.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  const Tensor closed = softmax_lastdim(Tensor::vector({0, std::log(2.0)}));
  CHECK(closed[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
  CHECK(closed[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-14));

  const Tensor shifted = softmax_lastdim(Tensor::vector({1000.0, 1000.5}));
  const Tensor base = softmax_lastdim(Tensor::vector({0.0, 0.5}));
  CHECK(shifted == base);

  const Tensor big = softmax_lastdim(random_tensor({9, 13}, 3, 20.0));
  for (std::size_t r = 0; r < big.outer_size(); ++r) {
    double total = 0.0;
    for (double v : big.row(r)) {
      CHECK(v >= 0.0);
      total += v;
    }
    CHECK(std::abs(total - 1.0) < 1e-12);
  }

  CHECK_THROWS_AS(softmax_lastdim(Tensor::vector({0.0, NAN})), NumericError);
}

TEST_CASE("layer norm examples") {
  const Tensor ones_gain = Tensor::ones({4});
  const Tensor zero_bias = Tensor::zeros({4});
  CHECK(layer_norm(Tensor::vector({3, 3, 3, 3}), ones_gain, zero_bias, 1e-6) == Tensor::zeros({4}));

  const Tensor pair = layer_norm(Tensor::vector({1, -1}), Tensor::ones({2}), Tensor::zeros({2}), 1e-14);
  CHECK(pair[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(pair[1] == doctest::Approx(-1.0).epsilon(1e-12));

  const Tensor bias = Tensor::vector({0.5, -2, 3, 7});
  const Tensor degenerate = layer_norm(random_tensor({3, 4}, 4), Tensor::zeros({4}), bias, 1e-6);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t j = 0; j < 4; ++j) CHECK(degenerate.at(r, j) == bias[j]);

  const Tensor x = random_tensor({6, 32}, 5, 3.0);
  const Tensor y = layer_norm(x, Tensor::ones({32}), Tensor::zeros({32}), 1e-6);
  for (std::size_t r = 0; r < 6; ++r) {
    double mean = 0.0, var = 0.0;
    for (double v : y.row(r)) mean += v;
    mean /= 32.0;
    for (double v : y.row(r)) var += (v - mean) * (v - mean);
    var /= 32.0;
    CHECK(std::abs(mean) < 1e-10);
    CHECK(std::abs(var - 1.0) < 1e-6);
  }
}

TEST_CASE("gelu tanh approximation") {
  const Tensor y = gelu(Tensor::vector({0.0, 1.0, 30.0, -30.0}));
  CHECK(y[0] == 0.0);
  CHECK(std::abs(y[1] - 0.8412) < 1e-3);
  CHECK(y[2] == doctest::Approx(30.0));
  CHECK(std::abs(y[3]) < 1e-12);
}

TEST_CASE("tensor file format round-trips bit-exactly") {
  regvit::testing::TempDir dir("tensor_io");
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    Shape shape;
    const auto rank = rng.uniform_int(0, 4);
    for (int i = 0; i < rank; ++i) shape.push_back(static_cast<std::size_t>(rng.uniform_int(1, 5)));
    Tensor t = random_tensor(shape, 100 + static_cast<std::uint64_t>(trial), 1e3);
    if (t.numel() > 1) t[1] = -0.0;
    const auto path = dir.path() / "t.tns";
    save_tensor(t, path);
    const Tensor back = load_tensor(path);
    REQUIRE(back.shape() == t.shape());
    CHECK(std::memcmp(back.data().data(), t.data().data(), t.numel() * sizeof(double)) == 0);
    CHECK(encode_tensor(back) == encode_tensor(t));
  }
}

TEST_CASE("tensor file header layout") {
  const std::string bytes = encode_tensor(Tensor::vector({1.0, 2.0}));
  const std::string header = bytes.substr(0, bytes.find('\n'));
  CHECK(header == R"({"shape":[2],"dtype":"f64"})");
  CHECK(bytes.size() == header.size() + 1 + 16);
  // 1.0 little-endian
  CHECK(static_cast<unsigned char>(bytes[header.size() + 1 + 7]) == 0x3F);
  CHECK(static_cast<unsigned char>(bytes[header.size() + 1 + 6]) == 0xF0);
  CHECK_THROWS_AS(decode_tensor(header + "\n" + "abc"), IoError);
}
