#pragma once

#include <cstdint>
#include <span>
#include <variant>
#include <vector>

#include "deskmt/tensor.hpp"

namespace deskmt {

// Fixed-point int16: values are multiplied by 2^10 and rounded. The product
// of two quantized values therefore carries a scale of 2^20.
struct Int16Scheme {
  static constexpr float kScale = 1024.0F;
  static constexpr float kProductScale = 1048576.0F;
  friend bool operator==(const Int16Scheme&, const Int16Scheme&) = default;
};

// Clip to [-clip, clip], then map linearly onto [-127, 127].
struct Int8Scheme {
  float clip = 2.0F;

  Int8Scheme() = default;
  explicit Int8Scheme(float c);

  double scale() const { return 127.0 / clip; }
  // Float value of one code unit, i.e. clip / 127.
  double step() const { return static_cast<double>(clip) / 127.0; }

  friend bool operator==(const Int8Scheme&, const Int8Scheme&) = default;
};

using QuantScheme = std::variant<Int16Scheme, Int8Scheme>;

// Integer codes plus the scheme needed to read them. Immutable once built.
class QuantizedTensor {
 public:
  QuantizedTensor(Shape shape, Int16Scheme scheme, std::vector<std::int16_t> codes);
  QuantizedTensor(Shape shape, Int8Scheme scheme, std::vector<std::int8_t> codes);

  const Shape& shape() const { return shape_; }
  const QuantScheme& scheme() const { return scheme_; }
  bool is_int16() const { return std::holds_alternative<Int16Scheme>(scheme_); }
  bool is_int8() const { return std::holds_alternative<Int8Scheme>(scheme_); }

  std::span<const std::int16_t> i16() const;
  std::span<const std::int8_t> i8() const;

  friend bool operator==(const QuantizedTensor&, const QuantizedTensor&) = default;

 private:
  Shape shape_;
  QuantScheme scheme_;
  std::variant<std::vector<std::int16_t>, std::vector<std::int8_t>> codes_;
};

// Saturating narrowing to the full int16 range (the 16-bit accumulator of
// the int8 kernel).
constexpr std::int16_t saturate_i16(std::int32_t v) {
  if (v > 32767) return 32767;
  if (v < -32768) return -32768;
  return static_cast<std::int16_t>(v);
}

Tensor clip(const Tensor& a, float c);

// saturate(round(x * 1024)), rounding half away from zero, bounds +-32767.
QuantizedTensor quantize_i16(const Tensor& a);
// round(clip(x, c) * 127 / c), rounding half away from zero.
QuantizedTensor quantize_i8(const Tensor& a, const Int8Scheme& scheme = {});

Tensor dequantize(const QuantizedTensor& q);

// C = A · Bᵀ / 2^20 with B supplied already transposed ([n,k]). Products and
// sums use wrapping 32-bit integer arithmetic; callers are responsible for
// keeping k·max|a|·max|b| inside int32 range.
Tensor gemm_i16(const QuantizedTensor& a, const QuantizedTensor& bt);

// C = A · Bᵀ · (c/127)^2 with B supplied already transposed. Each output sums
// adjacent k-pairs in 32 bits, saturates the pair to int16, then adds it to a
// saturating int16 accumulator in ascending pair order. Odd k is treated as
// zero-padded.
Tensor gemm_i8(const QuantizedTensor& a, const QuantizedTensor& bt);

}  // namespace deskmt
