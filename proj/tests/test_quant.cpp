#include <random>

#include "deskmt/quant.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace deskmt;

namespace {

std::vector<std::int16_t> codes16(const QuantizedTensor& q) { return {q.i16().begin(), q.i16().end()}; }
std::vector<std::int8_t> codes8(const QuantizedTensor& q) { return {q.i8().begin(), q.i8().end()}; }

}  // namespace

TEST_CASE("clip") {
  CHECK(clip(Tensor::vector({3.1F, -5.0F, 1.5F}), 2.0F) == Tensor::vector({2.0F, -2.0F, 1.5F}));
  auto small = Tensor::vector({0.5F, -1.0F});
  CHECK(clip(small, 1.0F) == small);
  auto a = Tensor::vector({7, -7, 0.25F});
  CHECK(clip(clip(a, 2), 2) == clip(a, 2));
  CHECK_THROWS_AS(clip(a, 0.0F), ParameterError);
  CHECK_THROWS_AS(clip(a, -1.0F), ParameterError);
}

TEST_CASE("quantize_i16 examples") {
  CHECK(codes16(quantize_i16(Tensor::vector({1.0F, 0.0F, -0.5F}))) == std::vector<std::int16_t>{1024, 0, -512});
  CHECK(codes16(quantize_i16(Tensor::vector({40.0F})))[0] == oracle::fixed_point_i16(40.0F));
  CHECK(codes16(quantize_i16(Tensor::vector({40.0F, -40.0F}))) == std::vector<std::int16_t>{32767, -32767});
  // Half-way cases round away from zero.
  CHECK(codes16(quantize_i16(Tensor::vector({0.5F / 1024, -0.5F / 1024}))) == std::vector<std::int16_t>{1, -1});
}

TEST_CASE("quantize_i16 matches the scalar fixed-point oracle") {
  std::mt19937 rng(5);
  std::uniform_real_distribution<float> dist(-40, 40);
  std::vector<float> xs(5000);
  for (auto& x : xs) x = dist(rng);
  auto q = quantize_i16(Tensor(Shape{xs.size()}, xs));
  for (std::size_t i = 0; i < xs.size(); ++i) CHECK(q.i16()[i] == oracle::fixed_point_i16(xs[i]));
}

TEST_CASE("quantize_i8 examples") {
  Int8Scheme c2(2.0F);
  CHECK(codes8(quantize_i8(Tensor::vector({2.5F}), c2))[0] == 127);
  CHECK(codes8(quantize_i8(Tensor::vector({1.0F}), c2))[0] == 64);
  CHECK(codes8(quantize_i8(Tensor::vector({-2.0F, 0.0F}), c2)) == std::vector<std::int8_t>{-127, 0});
  CHECK(codes8(quantize_i8(Tensor::vector({-1e9F}), c2))[0] == -127);
  CHECK_THROWS_AS(Int8Scheme(0.0F), ParameterError);

  std::mt19937 rng(9);
  std::uniform_real_distribution<float> dist(-3, 3);
  for (float c : {1.0F, 2.0F, 3.0F}) {
    std::vector<float> xs(2000);
    for (auto& x : xs) x = dist(rng);
    auto q = quantize_i8(Tensor(Shape{xs.size()}, xs), Int8Scheme(c));
    for (std::size_t i = 0; i < xs.size(); ++i) CHECK(q.i8()[i] == oracle::fixed_point_i8(xs[i], c));
  }
}

TEST_CASE("dequantize") {
  CHECK(dequantize(QuantizedTensor(Shape{1}, Int16Scheme{}, {1024})) == Tensor::vector({1.0F}));
  CHECK(dequantize(QuantizedTensor(Shape{1}, Int8Scheme(2.0F), {127})) == Tensor::vector({2.0F}));
}

TEST_CASE("quantized tensors reject out-of-range codes") {
  CHECK_THROWS_AS(QuantizedTensor(Shape{1}, Int8Scheme{}, {-128}), ParameterError);
  CHECK_THROWS_AS(QuantizedTensor(Shape{1}, Int16Scheme{}, {-32768}), ParameterError);
  CHECK_THROWS_AS(QuantizedTensor(Shape{2}, Int16Scheme{}, {1}), DimensionError);
}

TEST_CASE("int16 roundtrip error bound") {
  for (int i = 0; i <= 20000; ++i) {
    const float x = -16.0F + 32.0F * static_cast<float>(i) / 20000.0F;
    const float back = dequantize(quantize_i16(Tensor::vector({x}))).f32()[0];
    CHECK(std::abs(back - x) <= 1.0F / 2048.0F);
  }
}

TEST_CASE("int8 roundtrip error bound is c/254 relative to the clipped value") {
  for (float c : {1.0F, 2.0F, 3.0F}) {
    for (int i = 0; i <= 6000; ++i) {
      const float x = -3.0F + 6.0F * static_cast<float>(i) / 6000.0F;
      const float back = dequantize(quantize_i8(Tensor::vector({x}), Int8Scheme(c))).f32()[0];
      const float clipped = std::min(c, std::max(-c, x));
      CHECK(std::abs(back - clipped) <= c / 254.0F + 1e-7F);
    }
  }
}

TEST_CASE("gemm_i16 examples") {
  auto aq = quantize_i16(Tensor::matrix({{1.0F, 2.0F}}));
  auto bqt = quantize_i16(Tensor::matrix({{0.5F, 0.25F}}));
  auto c = gemm_i16(aq, bqt);
  CHECK(c.shape() == Shape{1, 1});
  CHECK(c.at(0, 0) == 1.0F);

  auto z = gemm_i16(quantize_i16(Tensor(Shape{3, 4}, DType::kFloat32)), quantize_i16(Tensor(Shape{2, 4}, DType::kFloat32)));
  CHECK(z == Tensor(Shape{3, 2}, DType::kFloat32));

  CHECK_THROWS_AS(gemm_i16(aq, quantize_i16(Tensor::matrix({{1, 2, 3}}))), DimensionError);
  CHECK_THROWS_AS(gemm_i16(aq, quantize_i8(Tensor::matrix({{1, 2}}))), ParameterError);
}

TEST_CASE("gemm_i16 wraps on 32-bit overflow like the fixed-point oracle") {
  std::vector<std::int16_t> big(4, 32767);
  QuantizedTensor a(Shape{1, 4}, Int16Scheme{}, big);
  QuantizedTensor b(Shape{1, 4}, Int16Scheme{}, big);
  auto c = gemm_i16(a, b);
  auto want = oracle::fixed_point_gemm_i16(big, big, 1, 4, 1);
  CHECK(c.f32()[0] == want[0]);
  CHECK(c.f32()[0] < 0.0F);  // 4·32767² exceeds 2^31 and wraps negative
}

TEST_CASE("gemm_i16 approximates gemm_f32 within k·2^-9") {
  std::mt19937 rng(21);
  for (std::size_t k : {1, 7, 16, 33, 64}) {
    auto a = oracle::random_matrix(rng, 5, k);
    auto b = oracle::random_matrix(rng, k, 6);
    auto approx = gemm_i16(quantize_i16(a), quantize_i16(transpose2d(b)));
    auto exact = gemm_f32(a, b);
    for (std::size_t i = 0; i < exact.size(); ++i) {
      CHECK(std::abs(approx.f32()[i] - exact.f32()[i]) <= static_cast<float>(k) / 512.0F);
    }
  }
}

TEST_CASE("gemm_i8 examples") {
  Int8Scheme c2(2.0F);
  auto zero = gemm_i8(quantize_i8(Tensor(Shape{2, 3}, DType::kFloat32), c2), quantize_i8(Tensor(Shape{4, 3}, DType::kFloat32), c2));
  CHECK(zero == Tensor(Shape{2, 4}, DType::kFloat32));

  // 64 · 64 = 4096 code units of (2/127)^2.
  auto one = gemm_i8(quantize_i8(Tensor::matrix({{1.0F}}), c2), quantize_i8(Tensor::matrix({{1.0F}}), c2));
  CHECK(one.at(0, 0) == static_cast<float>(4096.0 * (2.0 / 127.0) * (2.0 / 127.0)));
  CHECK(one.at(0, 0) == doctest::Approx(16384.0 / 16129.0));

  // Sixteen 127·127 products: pairs of 32258 pin the accumulator at 32767.
  std::vector<float> twos(16, 2.0F);
  auto a = quantize_i8(Tensor(Shape{1, 16}, twos), c2);
  auto sat = gemm_i8(a, a);
  CHECK(sat.at(0, 0) == static_cast<float>(32767.0 * 4.0 / 16129.0));
  CHECK(sat.at(0, 0) == doctest::Approx(8.1262).epsilon(1e-4));
  auto wide = oracle::wide_gemm_i8(codes8(a), codes8(a), 1, 16, 1, 2.0F);
  CHECK(wide[0] == doctest::Approx(64.0));

  CHECK_THROWS_AS(gemm_i8(quantize_i8(Tensor::matrix({{1.0F}}), Int8Scheme(1.0F)),
                          quantize_i8(Tensor::matrix({{1.0F}}), c2)),
                  ParameterError);
}

TEST_CASE("gemm_i8 saturates negative sums too") {
  std::vector<float> pos(8, 2.0F), neg(8, -2.0F);
  auto a = quantize_i8(Tensor(Shape{1, 8}, pos));
  auto b = quantize_i8(Tensor(Shape{1, 8}, neg));
  CHECK(gemm_i8(a, b).at(0, 0) == static_cast<float>(-32768.0 * 4.0 / 16129.0));
}

TEST_CASE("gemm kernels match their oracles on random codes") {
  std::mt19937 rng(99);
  std::uniform_int_distribution<int> d16(-32767, 32767);
  std::uniform_int_distribution<int> d8(-127, 127);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t m = 1 + rng() % 16, k = 1 + rng() % 16, n = 1 + rng() % 16;
    std::vector<std::int16_t> a16(m * k), b16(n * k);
    for (auto& v : a16) v = static_cast<std::int16_t>(d16(rng));
    for (auto& v : b16) v = static_cast<std::int16_t>(d16(rng));
    auto got16 = gemm_i16(QuantizedTensor(Shape{m, k}, Int16Scheme{}, a16), QuantizedTensor(Shape{n, k}, Int16Scheme{}, b16));
    auto want16 = oracle::fixed_point_gemm_i16(a16, b16, m, k, n);
    for (std::size_t i = 0; i < want16.size(); ++i) REQUIRE(got16.f32()[i] == want16[i]);

    std::vector<std::int8_t> a8(m * k), b8(n * k);
    for (auto& v : a8) v = static_cast<std::int8_t>(d8(rng));
    for (auto& v : b8) v = static_cast<std::int8_t>(d8(rng));
    auto got8 = gemm_i8(QuantizedTensor(Shape{m, k}, Int8Scheme{}, a8), QuantizedTensor(Shape{n, k}, Int8Scheme{}, b8));
    auto want8 = oracle::saturating_gemm_i8(a8, b8, m, k, n, 2.0F);
    for (std::size_t i = 0; i < want8.size(); ++i) REQUIRE(got8.f32()[i] == want8[i]);
  }
}

TEST_CASE("gemm_i8 equals wide accumulation when nothing saturates") {
  std::mt19937 rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t m = 1 + rng() % 6, k = 1 + rng() % 8, n = 1 + rng() % 6;
    // |x| <= 0.7 gives codes <= 44, so 4 pairs stay below 2^15 - 1.
    auto a = quantize_i8(oracle::random_matrix(rng, m, k, -0.7F, 0.7F));
    auto bt = quantize_i8(oracle::random_matrix(rng, n, k, -0.7F, 0.7F));
    auto got = gemm_i8(a, bt);
    auto wide = oracle::wide_gemm_i8(codes8(a), codes8(bt), m, k, n, 2.0F);
    for (std::size_t i = 0; i < wide.size(); ++i) CHECK(got.f32()[i] == static_cast<float>(wide[i]));
  }
}
