#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "deskmt/errors.hpp"

namespace deskmt {

enum class DType : std::uint8_t { kFloat32, kInt32, kInt16, kInt8 };

const char* dtype_name(DType dtype);

// Row-major extents. Every extent is at least 1.
class Shape {
 public:
  Shape() : dims_{1} {}
  Shape(std::initializer_list<std::size_t> dims);
  explicit Shape(std::vector<std::size_t> dims);

  std::size_t rank() const { return dims_.size(); }
  std::size_t operator[](std::size_t axis) const { return dims_.at(axis); }
  std::size_t elements() const;
  const std::vector<std::size_t>& dims() const { return dims_; }

  // Extent of the last axis; product of the others.
  std::size_t cols() const { return dims_.back(); }
  std::size_t rows() const { return elements() / cols(); }

  std::string to_string() const;

  friend bool operator==(const Shape&, const Shape&) = default;

 private:
  std::vector<std::size_t> dims_;
};

template <typename T>
struct dtype_of;
template <>
struct dtype_of<float> {
  static constexpr DType value = DType::kFloat32;
};
template <>
struct dtype_of<std::int32_t> {
  static constexpr DType value = DType::kInt32;
};
template <>
struct dtype_of<std::int16_t> {
  static constexpr DType value = DType::kInt16;
};
template <>
struct dtype_of<std::int8_t> {
  static constexpr DType value = DType::kInt8;
};

class Tensor {
 public:
  Tensor() : Tensor(Shape{1}, DType::kFloat32) {}
  // Zero-filled tensor.
  Tensor(Shape shape, DType dtype);
  Tensor(Shape shape, std::vector<float> values);
  Tensor(Shape shape, std::vector<std::int32_t> values);
  Tensor(Shape shape, std::vector<std::int16_t> values);
  Tensor(Shape shape, std::vector<std::int8_t> values);

  // 2-D float literal, mostly for tests: Tensor::matrix({{1, 2}, {3, 4}}).
  static Tensor matrix(std::initializer_list<std::initializer_list<float>> rows);
  static Tensor vector(std::initializer_list<float> values);
  static Tensor identity(std::size_t n);

  const Shape& shape() const { return shape_; }
  DType dtype() const;
  std::size_t size() const { return shape_.elements(); }

  template <typename T>
  std::span<T> data() {
    check_dtype(dtype_of<T>::value);
    return std::get<std::vector<T>>(storage_);
  }
  template <typename T>
  std::span<const T> data() const {
    check_dtype(dtype_of<T>::value);
    return std::get<std::vector<T>>(storage_);
  }

  std::span<float> f32() { return data<float>(); }
  std::span<const float> f32() const { return data<float>(); }

  // Float element access for rank-2 tensors.
  float at(std::size_t row, std::size_t col) const;
  float& at(std::size_t row, std::size_t col);

  // Same buffer, new extents with equal element count.
  Tensor reshaped(Shape shape) const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  void check_dtype(DType expected) const;

  Shape shape_;
  std::variant<std::vector<float>, std::vector<std::int32_t>, std::vector<std::int16_t>,
               std::vector<std::int8_t>>
      storage_;
};

// C = A·B, float32 accumulation in ascending-k order.
Tensor gemm_f32(const Tensor& a, const Tensor& b);

Tensor transpose2d(const Tensor& a);

// Row-wise softmax over the last axis, max-subtracted. The row argmax
// (lowest index on ties) is preserved exactly.
Tensor softmax_rows(const Tensor& a);

// Elementwise sum. `b` may also be a vector matching the last axis of `a`,
// in which case it is added to every row.
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scalar_mul(const Tensor& a, float factor);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);

// Normalizes each row to zero mean / unit variance, then applies gain and bias
// (both vectors over the last axis).
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps = 1e-6F);

// Rank-2 concatenation: axis 0 stacks rows, axis 1 joins columns.
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
// Half-open [begin, end) along `axis` of a rank-2 tensor.
Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end);

// Index of the largest element of a float span; lowest index on ties.
std::size_t argmax(std::span<const float> values);

}  // namespace deskmt
