#include <random>

#include "deskmt/tensor.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace deskmt;

TEST_CASE("shape invariants") {
  Shape s{2, 3, 4};
  CHECK(s.rank() == 3);
  CHECK(s.elements() == 24);
  CHECK(s.cols() == 4);
  CHECK(s.rows() == 6);
  CHECK(s == Shape{2, 3, 4});
  CHECK(s != Shape{2, 4, 3});
  CHECK_THROWS_AS(Shape({2, 0}), DimensionError);
  CHECK_THROWS_AS(Shape(std::vector<std::size_t>{}), DimensionError);
}

TEST_CASE("tensor buffers must match their shape") {
  CHECK_THROWS_AS(Tensor(Shape{2, 2}, std::vector<float>{1, 2, 3}), DimensionError);
  Tensor t(Shape{2, 2}, DType::kInt16);
  CHECK(t.dtype() == DType::kInt16);
  CHECK_THROWS_AS(t.f32(), DimensionError);
}

TEST_CASE("gemm_f32 examples") {
  auto a = Tensor::matrix({{1, 2}, {3, 4}});
  CHECK(gemm_f32(a, Tensor::identity(2)) == a);
  auto c = gemm_f32(Tensor::matrix({{1, 2}}), Tensor::matrix({{0.5F}, {0.25F}}));
  CHECK(c.shape() == Shape{1, 1});
  CHECK(c.at(0, 0) == 1.0F);
  CHECK_THROWS_AS(gemm_f32(a, Tensor::matrix({{1, 2, 3}})), DimensionError);
}

TEST_CASE("gemm_f32 is bit-identical to the ordered triple loop") {
  std::mt19937 rng(7);
  for (std::size_t m = 1; m <= 16; m += 3) {
    for (std::size_t k = 1; k <= 16; k += 2) {
      for (std::size_t n = 1; n <= 16; n += 5) {
        auto a = oracle::random_matrix(rng, m, k, -4, 4);
        auto b = oracle::random_matrix(rng, k, n, -4, 4);
        auto want = oracle::naive_gemm({a.f32().begin(), a.f32().end()}, {b.f32().begin(), b.f32().end()}, m, k, n);
        auto got = gemm_f32(a, b);
        REQUIRE(got.size() == want.size());
        for (std::size_t i = 0; i < want.size(); ++i) CHECK(got.f32()[i] == want[i]);
      }
    }
  }
}

TEST_CASE("transpose2d") {
  CHECK(transpose2d(Tensor::matrix({{1, 2}, {3, 4}})) == Tensor::matrix({{1, 3}, {2, 4}}));
  CHECK(transpose2d(Tensor::matrix({{1, 2, 3}})).shape() == Shape{3, 1});
  CHECK_THROWS_AS(transpose2d(Tensor::vector({1, 2})), DimensionError);

  std::mt19937 rng(3);
  auto a = oracle::random_matrix(rng, 5, 7);
  CHECK(transpose2d(transpose2d(a)) == a);

  Tensor q(Shape{2, 3}, std::vector<std::int8_t>{1, 2, 3, 4, 5, 6});
  auto qt = transpose2d(q);
  CHECK(qt.dtype() == DType::kInt8);
  CHECK(qt.data<std::int8_t>()[1] == 4);
}

TEST_CASE("softmax_rows examples") {
  auto s = softmax_rows(Tensor::matrix({{0, 0}}));
  CHECK(s.at(0, 0) == doctest::Approx(0.5));
  CHECK(s.at(0, 1) == doctest::Approx(0.5));

  auto row = Tensor::matrix({{0.1F, 3.0F, -1.0F}});
  CHECK(argmax(softmax_rows(row).f32()) == 1);
  CHECK(argmax(row.f32()) == 1);

  // 1 / (1 + e) and e / (1 + e), computed in extended precision.
  auto big = softmax_rows(Tensor::matrix({{1000, 1001}}));
  CHECK(big.at(0, 0) == doctest::Approx(0.2689414213699951).epsilon(1e-6));
  CHECK(big.at(0, 1) == doctest::Approx(0.7310585786300049).epsilon(1e-6));
}

TEST_CASE("softmax_rows property: rows sum to one and argmax survives") {
  std::mt19937 rng(11);
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t m = 1 + rng() % 4;
    const std::size_t n = 1 + rng() % 32;
    auto a = oracle::random_matrix(rng, m, n, -30, 30);
    auto s = softmax_rows(a);
    for (std::size_t r = 0; r < m; ++r) {
      double sum = 0;
      for (std::size_t j = 0; j < n; ++j) sum += s.at(r, j);
      CHECK(std::abs(sum - 1.0) <= 1e-6);
      auto in_row = a.f32().subspan(r * n, n);
      auto out_row = s.f32().subspan(r * n, n);
      CHECK(argmax(in_row) == argmax(out_row));
    }
  }
}

TEST_CASE("softmax keeps argmax when neighbours differ by one ulp") {
  const float x = 3.0F;
  const float below = std::nextafter(x, 0.0F);
  auto s = softmax_rows(Tensor::matrix({{below, x, below}}));
  CHECK(argmax(s.f32()) == 1);
}

TEST_CASE("elementwise helpers") {
  auto a = Tensor::matrix({{1, -2}, {3, -4}});
  CHECK(add(a, Tensor::vector({10, 20})) == Tensor::matrix({{11, 18}, {13, 16}}));
  CHECK(relu(a) == Tensor::matrix({{1, 0}, {3, 0}}));
  CHECK(scalar_mul(a, 0.5F) == Tensor::matrix({{0.5F, -1}, {1.5F, -2}}));
  CHECK(mul(a, a) == Tensor::matrix({{1, 4}, {9, 16}}));
  CHECK_THROWS_AS(add(a, Tensor::vector({1, 2, 3})), DimensionError);

  Tensor parts[] = {Tensor::matrix({{1}, {2}}), Tensor::matrix({{3}, {4}})};
  CHECK(concat(parts, 1) == Tensor::matrix({{1, 3}, {2, 4}}));
  CHECK(concat(parts, 0) == Tensor::matrix({{1}, {2}, {3}, {4}}));
  CHECK(slice(Tensor::matrix({{1, 2, 3}, {4, 5, 6}}), 1, 1, 3) == Tensor::matrix({{2, 3}, {5, 6}}));
  CHECK(slice(Tensor::matrix({{1, 2, 3}, {4, 5, 6}}), 0, 1, 2) == Tensor::matrix({{4, 5, 6}}));

  auto ln = layer_norm(Tensor::matrix({{1, 3}}), Tensor::vector({1, 1}), Tensor::vector({0, 0}), 0.0F);
  CHECK(ln.at(0, 0) == doctest::Approx(-1.0));
  CHECK(ln.at(0, 1) == doctest::Approx(1.0));
}
