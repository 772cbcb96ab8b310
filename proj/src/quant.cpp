#include "deskmt/quant.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace deskmt {

namespace {

void require_f32(const Tensor& t, const char* what) {
  if (t.dtype() != DType::kFloat32) {
    throw DimensionError(std::string(what) + ": expected float32 input");
  }
}

struct GemmDims {
  std::size_t m, n, k;
};

GemmDims check_transposed_operands(const QuantizedTensor& a, const QuantizedTensor& bt, const char* what) {
  if (a.shape().rank() != 2 || bt.shape().rank() != 2) {
    throw DimensionError(std::string(what) + ": operands must be rank 2");
  }
  if (a.shape()[1] != bt.shape()[1]) {
    throw DimensionError(std::string(what) + ": inner dimensions disagree: " + a.shape().to_string() +
                         " vs transposed " + bt.shape().to_string());
  }
  return {a.shape()[0], bt.shape()[0], a.shape()[1]};
}

}  // namespace

Int8Scheme::Int8Scheme(float c) : clip(c) {
  if (!(c > 0.0F)) throw ParameterError("int8 clip must be positive, got " + std::to_string(c));
}

QuantizedTensor::QuantizedTensor(Shape shape, Int16Scheme scheme, std::vector<std::int16_t> codes)
    : shape_(std::move(shape)), scheme_(scheme), codes_(std::move(codes)) {
  const auto& v = std::get<std::vector<std::int16_t>>(codes_);
  if (v.size() != shape_.elements()) throw DimensionError("int16 codes do not match shape " + shape_.to_string());
  for (auto c : v) {
    if (c < -32767) throw ParameterError("int16 code outside [-32767, 32767]");
  }
}

QuantizedTensor::QuantizedTensor(Shape shape, Int8Scheme scheme, std::vector<std::int8_t> codes)
    : shape_(std::move(shape)), scheme_(scheme), codes_(std::move(codes)) {
  const auto& v = std::get<std::vector<std::int8_t>>(codes_);
  if (v.size() != shape_.elements()) throw DimensionError("int8 codes do not match shape " + shape_.to_string());
  for (auto c : v) {
    if (c < -127) throw ParameterError("int8 code outside [-127, 127]");
  }
}

std::span<const std::int16_t> QuantizedTensor::i16() const {
  if (!is_int16()) throw ParameterError("quantized tensor is not int16");
  return std::get<std::vector<std::int16_t>>(codes_);
}

std::span<const std::int8_t> QuantizedTensor::i8() const {
  if (!is_int8()) throw ParameterError("quantized tensor is not int8");
  return std::get<std::vector<std::int8_t>>(codes_);
}

Tensor clip(const Tensor& a, float c) {
  if (!(c > 0.0F)) throw ParameterError("clip bound must be positive, got " + std::to_string(c));
  require_f32(a, "clip");
  Tensor out(a.shape(), DType::kFloat32);
  auto src = a.f32();
  auto dst = out.f32();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = std::min(c, std::max(-c, src[i]));
  return out;
}

QuantizedTensor quantize_i16(const Tensor& a) {
  require_f32(a, "quantize_i16");
  auto src = a.f32();
  std::vector<std::int16_t> codes(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) {
    // std::round rounds half away from zero.
    const double r = std::round(static_cast<double>(src[i]) * Int16Scheme::kScale);
    codes[i] = static_cast<std::int16_t>(std::clamp(r, -32767.0, 32767.0));
  }
  return {a.shape(), Int16Scheme{}, std::move(codes)};
}

QuantizedTensor quantize_i8(const Tensor& a, const Int8Scheme& scheme) {
  require_f32(a, "quantize_i8");
  const double c = scheme.clip;
  auto src = a.f32();
  std::vector<std::int8_t> codes(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) {
    const double x = std::clamp(static_cast<double>(src[i]), -c, c);
    codes[i] = static_cast<std::int8_t>(std::round(x * 127.0 / c));
  }
  return {a.shape(), scheme, std::move(codes)};
}

Tensor dequantize(const QuantizedTensor& q) {
  Tensor out(q.shape(), DType::kFloat32);
  auto dst = out.f32();
  if (q.is_int16()) {
    auto src = q.i16();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<float>(src[i]) / Int16Scheme::kScale;
  } else {
    const double c = std::get<Int8Scheme>(q.scheme()).clip;
    auto src = q.i8();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<float>(src[i] * c / 127.0);
  }
  return out;
}

Tensor gemm_i16(const QuantizedTensor& a, const QuantizedTensor& bt) {
  if (!a.is_int16() || !bt.is_int16()) throw ParameterError("gemm_i16: operands must be int16-quantized");
  const auto [m, n, k] = check_transposed_operands(a, bt, "gemm_i16");
  auto pa = a.i16();
  auto pb = bt.i16();
  Tensor c(Shape{m, n}, DType::kFloat32);
  auto pc = c.f32();
  for (std::size_t i = 0; i < m; ++i) {
    const std::int16_t* arow = pa.data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const std::int16_t* brow = pb.data() + j * k;
      // Unsigned arithmetic gives the wrapping 32-bit sum without UB.
      std::uint32_t acc = 0;
      for (std::size_t kk = 0; kk < k; ++kk) {
        acc += static_cast<std::uint32_t>(static_cast<std::int32_t>(arow[kk]) * brow[kk]);
      }
      pc[i * n + j] = static_cast<float>(static_cast<std::int32_t>(acc)) / Int16Scheme::kProductScale;
    }
  }
  return c;
}

Tensor gemm_i8(const QuantizedTensor& a, const QuantizedTensor& bt) {
  if (!a.is_int8() || !bt.is_int8()) throw ParameterError("gemm_i8: operands must be int8-quantized");
  const auto& sa = std::get<Int8Scheme>(a.scheme());
  const auto& sb = std::get<Int8Scheme>(bt.scheme());
  if (!(sa == sb)) {
    throw ParameterError("gemm_i8: operand schemes differ (clip " + std::to_string(sa.clip) + " vs " +
                         std::to_string(sb.clip) + ")");
  }
  const auto [m, n, k] = check_transposed_operands(a, bt, "gemm_i8");
  const double unit = sa.step() * sa.step();
  const std::size_t full_pairs = k / 2;
  const bool odd = (k % 2) != 0;
  auto pa = a.i8();
  auto pb = bt.i8();
  Tensor c(Shape{m, n}, DType::kFloat32);
  auto pc = c.f32();
  for (std::size_t i = 0; i < m; ++i) {
    const std::int8_t* arow = pa.data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const std::int8_t* brow = pb.data() + j * k;
      std::int16_t acc = 0;
      for (std::size_t p = 0; p < full_pairs; ++p) {
        const std::int32_t pair = arow[2 * p] * brow[2 * p] + arow[2 * p + 1] * brow[2 * p + 1];
        acc = saturate_i16(acc + saturate_i16(pair));
      }
      if (odd) {
        const std::int32_t pair = arow[k - 1] * brow[k - 1];
        acc = saturate_i16(acc + saturate_i16(pair));
      }
      pc[i * n + j] = static_cast<float>(acc * unit);
    }
  }
  return c;
}

}  // namespace deskmt
