#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include "deskmt/autotune.hpp"
#include "deskmt/quant.hpp"
#include "deskmt/tensor.hpp"

namespace deskmt {

using NodeId = std::uint32_t;
inline constexpr NodeId kNoNode = static_cast<NodeId>(-1);

enum class Op : std::uint8_t {
  kParam,
  kInput,
  kConstant,
  kTranspose,
  kQuantizeI16,
  kQuantizeI8,
  kClip,
  kGemmF32,
  kGemmI16,
  kGemmI8,
  kTunedGemm,
  kAdd,
  kMul,
  kRelu,
  kSigmoid,
  kLayerNorm,
  kSoftmax,
  kConcat,
  kSlice,
  kScalarMul,
  kCount
};

inline constexpr std::size_t kOpCount = static_cast<std::size_t>(Op::kCount);

const char* op_name(Op op);

using Value = std::variant<Tensor, QuantizedTensor>;
using ValuePtr = std::shared_ptr<const Value>;

enum class IntPrecision : std::uint8_t { kInt16, kInt8 };

// Per-op payload. Which fields matter depends on the op.
struct NodeAttrs {
  std::string name;               // param, input
  std::optional<Shape> declared;  // input
  ValuePtr literal;               // param, constant
  float scalar = 0.0F;            // clip bound, scalar-mul factor, layer-norm eps
  std::size_t axis = 0;           // concat, slice
  std::size_t begin = 0;          // slice
  std::size_t end = 0;            // slice
  Int8Scheme int8{};              // quantize-i8
  NodeId prep = kNoNode;          // tuned-gemm: int16 Bᵀ, evaluated on demand
  TunerState* tuner = nullptr;    // tuned-gemm
};

struct Node {
  NodeId id = kNoNode;
  Op op = Op::kParam;
  std::vector<NodeId> children;
  bool is_constant = false;
  Shape shape;
  bool quantized = false;
  NodeAttrs attrs;
  ValuePtr memo;
  std::uint64_t invocations = 0;
};

struct KernelCounters {
  std::array<std::uint64_t, kOpCount> invocations{};
  // Multiply-accumulates for products, elements touched for everything else.
  std::array<std::uint64_t, kOpCount> work{};

  std::uint64_t calls(Op op) const { return invocations[static_cast<std::size_t>(op)]; }
  std::uint64_t macs(Op op) const { return work[static_cast<std::size_t>(op)]; }
  std::uint64_t total_calls() const;
};

using Feeds = std::unordered_map<NodeId, Tensor>;

class ForwardResult {
 public:
  bool contains(NodeId id) const { return values_.count(id) != 0; }
  const Value& value(NodeId id) const;
  const Tensor& tensor(NodeId id) const;
  const QuantizedTensor& quantized(NodeId id) const;
  std::size_t size() const { return values_.size(); }

 private:
  friend class Graph;
  std::unordered_map<NodeId, ValuePtr> values_;
};

// Append-only inference graph.
//
// Params are constant, inputs are not, and any other node is constant iff all
// of its children are. Constant nodes are hash-consed (building the same
// constant expression twice returns the existing node) and, with memoization
// on, evaluated once for the lifetime of the graph.
class Graph {
 public:
  explicit Graph(bool memoize = true) : memoize_(memoize) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool memoize() const { return memoize_; }
  void set_memoize(bool on) { memoize_ = on; }

  // Parameters are looked up by name; a second call with the same name
  // returns the existing node.
  NodeId param(const std::string& name, const Tensor& value);
  NodeId param(const std::string& name, std::shared_ptr<const Value> value);
  NodeId input(const std::string& name, Shape shape);
  NodeId constant(Tensor value);

  // Generic construction; children must already exist.
  NodeId add_node(Op op, std::vector<NodeId> children, NodeAttrs attrs = {});

  // Constness rule applied by add_node.
  bool mark_constness(Op op, std::span<const NodeId> children) const;

  NodeId transpose(NodeId a);
  NodeId quantize_i16(NodeId a);
  NodeId quantize_i8(NodeId a, const Int8Scheme& scheme);
  NodeId clip(NodeId a, float c);
  NodeId gemm(NodeId a, NodeId b);
  NodeId add(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId relu(NodeId a);
  NodeId sigmoid(NodeId a);
  NodeId layer_norm(NodeId x, NodeId gain, NodeId bias, float eps = 1e-6F);
  NodeId softmax(NodeId a);
  NodeId concat(std::vector<NodeId> parts, std::size_t axis);
  NodeId slice(NodeId a, std::size_t axis, std::size_t begin, std::size_t end);
  NodeId scalar_mul(NodeId a, float factor);

  // Integer replacement for gemm(a, b): builds quantize(a), quantize(transpose(b))
  // and the transposed-operand integer product.
  NodeId dot_int(NodeId a, NodeId b, IntPrecision precision, const Int8Scheme& scheme = {});

  // gemm(a, b) whose kernel is chosen at run time between float32 and int16.
  NodeId tuned_gemm(NodeId a, NodeId b, TunerState& tuner);

  ForwardResult forward(const Feeds& feeds, std::span<const NodeId> outputs);
  // Evaluates every node; every input must be fed.
  ForwardResult forward(const Feeds& feeds);

  const Node& node(NodeId id) const;
  std::size_t size() const { return nodes_.size(); }
  const KernelCounters& counters() const { return counters_; }

  static const std::vector<std::string>& tuned_alternatives();

 private:
  NodeId append(Op op, std::vector<NodeId> children, NodeAttrs attrs);
  Shape infer_shape(Op op, const std::vector<NodeId>& children, const NodeAttrs& attrs, bool& quantized) const;
  std::string constant_key(Op op, const std::vector<NodeId>& children, const NodeAttrs& attrs) const;

  void evaluate(std::span<const NodeId> targets, const Feeds& feeds, ForwardResult& out);
  ValuePtr run_kernel(Node& n, const Feeds& feeds, ForwardResult& out);

  bool memoize_;
  std::vector<Node> nodes_;
  std::unordered_map<std::string, NodeId> params_;
  std::unordered_map<std::string, NodeId> constants_;
  KernelCounters counters_;
};

}  // namespace deskmt
