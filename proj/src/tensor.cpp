#include "deskmt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace deskmt {

namespace {

void require_rank2(const Tensor& t, const char* what) {
  if (t.shape().rank() != 2) {
    throw DimensionError(std::string(what) + ": expected rank 2, got " + t.shape().to_string());
  }
}

void require_f32(const Tensor& t, const char* what) {
  if (t.dtype() != DType::kFloat32) {
    throw DimensionError(std::string(what) + ": expected float32, got " + dtype_name(t.dtype()));
  }
}

template <typename Fn>
Tensor map_f32(const Tensor& a, const char* what, Fn fn) {
  require_f32(a, what);
  Tensor out(a.shape(), DType::kFloat32);
  auto src = a.f32();
  auto dst = out.f32();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = fn(src[i]);
  return out;
}

}  // namespace

const char* dtype_name(DType dtype) {
  switch (dtype) {
    case DType::kFloat32:
      return "float32";
    case DType::kInt32:
      return "int32";
    case DType::kInt16:
      return "int16";
    case DType::kInt8:
      return "int8";
  }
  return "?";
}

Shape::Shape(std::initializer_list<std::size_t> dims) : Shape(std::vector<std::size_t>(dims)) {}

Shape::Shape(std::vector<std::size_t> dims) : dims_(std::move(dims)) {
  if (dims_.empty()) throw DimensionError("shape must have at least one axis");
  for (auto d : dims_) {
    if (d == 0) throw DimensionError("shape extents must be >= 1: " + to_string());
  }
}

std::size_t Shape::elements() const {
  std::size_t n = 1;
  for (auto d : dims_) n *= d;
  return n;
}

std::string Shape::to_string() const {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims_.size(); ++i) {
    if (i) os << ',';
    os << dims_[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, DType dtype) : shape_(std::move(shape)) {
  const auto n = shape_.elements();
  switch (dtype) {
    case DType::kFloat32:
      storage_ = std::vector<float>(n, 0.0F);
      break;
    case DType::kInt32:
      storage_ = std::vector<std::int32_t>(n, 0);
      break;
    case DType::kInt16:
      storage_ = std::vector<std::int16_t>(n, 0);
      break;
    case DType::kInt8:
      storage_ = std::vector<std::int8_t>(n, 0);
      break;
  }
}

namespace {
template <typename T>
void check_len(const Shape& shape, const std::vector<T>& v) {
  if (v.size() != shape.elements()) {
    throw DimensionError("buffer of " + std::to_string(v.size()) + " elements does not match shape " +
                         shape.to_string());
  }
}
}  // namespace

Tensor::Tensor(Shape shape, std::vector<float> values) : shape_(std::move(shape)), storage_(std::move(values)) {
  check_len(shape_, std::get<std::vector<float>>(storage_));
}
Tensor::Tensor(Shape shape, std::vector<std::int32_t> values)
    : shape_(std::move(shape)), storage_(std::move(values)) {
  check_len(shape_, std::get<std::vector<std::int32_t>>(storage_));
}
Tensor::Tensor(Shape shape, std::vector<std::int16_t> values)
    : shape_(std::move(shape)), storage_(std::move(values)) {
  check_len(shape_, std::get<std::vector<std::int16_t>>(storage_));
}
Tensor::Tensor(Shape shape, std::vector<std::int8_t> values)
    : shape_(std::move(shape)), storage_(std::move(values)) {
  check_len(shape_, std::get<std::vector<std::int8_t>>(storage_));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<float>> rows) {
  const std::size_t m = rows.size();
  const std::size_t n = m ? rows.begin()->size() : 0;
  std::vector<float> values;
  values.reserve(m * n);
  for (const auto& row : rows) {
    if (row.size() != n) throw DimensionError("ragged matrix literal");
    values.insert(values.end(), row.begin(), row.end());
  }
  return Tensor(Shape{m, n}, std::move(values));
}

Tensor Tensor::vector(std::initializer_list<float> values) {
  return Tensor(Shape{values.size()}, std::vector<float>(values));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t(Shape{n, n}, DType::kFloat32);
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0F;
  return t;
}

DType Tensor::dtype() const {
  switch (storage_.index()) {
    case 0:
      return DType::kFloat32;
    case 1:
      return DType::kInt32;
    case 2:
      return DType::kInt16;
    default:
      return DType::kInt8;
  }
}

void Tensor::check_dtype(DType expected) const {
  if (dtype() != expected) {
    throw DimensionError(std::string("tensor is ") + dtype_name(dtype()) + ", accessed as " +
                         dtype_name(expected));
  }
}

float Tensor::at(std::size_t row, std::size_t col) const { return f32()[row * shape_.cols() + col]; }
float& Tensor::at(std::size_t row, std::size_t col) { return f32()[row * shape_.cols() + col]; }

Tensor Tensor::reshaped(Shape shape) const {
  if (shape.elements() != shape_.elements()) {
    throw DimensionError("cannot reshape " + shape_.to_string() + " to " + shape.to_string());
  }
  Tensor out = *this;
  out.shape_ = std::move(shape);
  return out;
}

Tensor gemm_f32(const Tensor& a, const Tensor& b) {
  require_rank2(a, "gemm_f32");
  require_rank2(b, "gemm_f32");
  require_f32(a, "gemm_f32");
  require_f32(b, "gemm_f32");
  const std::size_t m = a.shape()[0];
  const std::size_t k = a.shape()[1];
  const std::size_t n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("gemm_f32: inner dimensions disagree: " + a.shape().to_string() + " x " +
                         b.shape().to_string());
  }
  Tensor c(Shape{m, n}, DType::kFloat32);
  auto pa = a.f32();
  auto pb = b.f32();
  auto pc = c.f32();
  // i-k-j order: each C[i,j] still sums its terms in ascending k.
  for (std::size_t i = 0; i < m; ++i) {
    float* crow = pc.data() + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const float av = pa[i * k + kk];
      const float* brow = pb.data() + kk * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

namespace {
template <typename T>
void transpose_into(std::span<const T> src, std::span<T> dst, std::size_t m, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
  }
}
}  // namespace

Tensor transpose2d(const Tensor& a) {
  require_rank2(a, "transpose2d");
  const std::size_t m = a.shape()[0];
  const std::size_t n = a.shape()[1];
  Tensor out(Shape{n, m}, a.dtype());
  switch (a.dtype()) {
    case DType::kFloat32:
      transpose_into(a.data<float>(), out.data<float>(), m, n);
      break;
    case DType::kInt32:
      transpose_into(a.data<std::int32_t>(), out.data<std::int32_t>(), m, n);
      break;
    case DType::kInt16:
      transpose_into(a.data<std::int16_t>(), out.data<std::int16_t>(), m, n);
      break;
    case DType::kInt8:
      transpose_into(a.data<std::int8_t>(), out.data<std::int8_t>(), m, n);
      break;
  }
  return out;
}

std::size_t argmax(std::span<const float> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

Tensor softmax_rows(const Tensor& a) {
  require_f32(a, "softmax_rows");
  Tensor out(a.shape(), DType::kFloat32);
  const std::size_t cols = a.shape().cols();
  const std::size_t rows = a.shape().rows();
  auto src = a.f32();
  auto dst = out.f32();
  std::vector<double> ex(cols);
  for (std::size_t r = 0; r < rows; ++r) {
    auto in_row = src.subspan(r * cols, cols);
    auto out_row = dst.subspan(r * cols, cols);
    const std::size_t best = argmax(in_row);
    const double mx = in_row[best];
    double sum = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      ex[j] = std::exp(static_cast<double>(in_row[j]) - mx);
      sum += ex[j];
    }
    for (std::size_t j = 0; j < cols; ++j) out_row[j] = static_cast<float>(ex[j] / sum);
    // Rounding to float can merge a near-maximal value with the maximum.
    for (std::size_t j = 0; j < cols; ++j) {
      if (j != best && in_row[j] < in_row[best] && out_row[j] >= out_row[best]) {
        out_row[j] = std::nextafter(out_row[best], 0.0F);
      }
    }
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_f32(a, "add");
  require_f32(b, "add");
  Tensor out(a.shape(), DType::kFloat32);
  auto pa = a.f32();
  auto pb = b.f32();
  auto po = out.f32();
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < pa.size(); ++i) po[i] = pa[i] + pb[i];
    return out;
  }
  if (b.shape().rank() == 1 && b.shape()[0] == a.shape().cols()) {
    const std::size_t cols = a.shape().cols();
    for (std::size_t i = 0; i < pa.size(); ++i) po[i] = pa[i] + pb[i % cols];
    return out;
  }
  throw DimensionError("add: incompatible shapes " + a.shape().to_string() + " and " +
                       b.shape().to_string());
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_f32(a, "mul");
  require_f32(b, "mul");
  if (a.shape() != b.shape()) {
    throw DimensionError("mul: shapes differ " + a.shape().to_string() + " and " + b.shape().to_string());
  }
  Tensor out(a.shape(), DType::kFloat32);
  auto pa = a.f32();
  auto pb = b.f32();
  auto po = out.f32();
  for (std::size_t i = 0; i < pa.size(); ++i) po[i] = pa[i] * pb[i];
  return out;
}

Tensor scalar_mul(const Tensor& a, float factor) {
  return map_f32(a, "scalar_mul", [factor](float v) { return v * factor; });
}

Tensor relu(const Tensor& a) {
  return map_f32(a, "relu", [](float v) { return v > 0.0F ? v : 0.0F; });
}

Tensor sigmoid(const Tensor& a) {
  return map_f32(a, "sigmoid", [](float v) { return 1.0F / (1.0F + std::exp(-v)); });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps) {
  require_f32(x, "layer_norm");
  const std::size_t cols = x.shape().cols();
  const std::size_t rows = x.shape().rows();
  if (gain.size() != cols || bias.size() != cols) {
    throw DimensionError("layer_norm: gain/bias must match last axis of " + x.shape().to_string());
  }
  Tensor out(x.shape(), DType::kFloat32);
  auto px = x.f32();
  auto pg = gain.f32();
  auto pb = bias.f32();
  auto po = out.f32();
  for (std::size_t r = 0; r < rows; ++r) {
    const float* row = px.data() + r * cols;
    double mean = 0.0;
    for (std::size_t j = 0; j < cols; ++j) mean += row[j];
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      const double d = row[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(cols);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < cols; ++j) {
      po[r * cols + j] = static_cast<float>((row[j] - mean) * inv) * pg[j] + pb[j];
    }
  }
  return out;
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  if (axis > 1) throw DimensionError("concat: axis must be 0 or 1");
  for (const auto& p : parts) {
    require_rank2(p, "concat");
    require_f32(p, "concat");
  }
  const std::size_t other = 1 - axis;
  const std::size_t fixed = parts[0].shape()[other];
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.shape()[other] != fixed) throw DimensionError("concat: mismatched extents");
    total += p.shape()[axis];
  }
  if (axis == 0) {
    std::vector<float> values;
    values.reserve(total * fixed);
    for (const auto& p : parts) values.insert(values.end(), p.f32().begin(), p.f32().end());
    return Tensor(Shape{total, fixed}, std::move(values));
  }
  Tensor out(Shape{fixed, total}, DType::kFloat32);
  auto po = out.f32();
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape()[1];
    auto src = p.f32();
    for (std::size_t r = 0; r < fixed; ++r) {
      std::copy_n(src.data() + r * w, w, po.data() + r * total + offset);
    }
    offset += w;
  }
  return out;
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  require_rank2(a, "slice");
  require_f32(a, "slice");
  if (axis > 1 || begin >= end || end > a.shape()[axis]) {
    throw DimensionError("slice: bad range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") on axis " + std::to_string(axis) + " of " + a.shape().to_string());
  }
  const std::size_t rows = a.shape()[0];
  const std::size_t cols = a.shape()[1];
  auto src = a.f32();
  if (axis == 0) {
    return Tensor(Shape{end - begin, cols},
                  std::vector<float>(src.begin() + begin * cols, src.begin() + end * cols));
  }
  const std::size_t w = end - begin;
  Tensor out(Shape{rows, w}, DType::kFloat32);
  auto po = out.f32();
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(src.data() + r * cols + begin, w, po.data() + r * w);
  return out;
}

}  // namespace deskmt
