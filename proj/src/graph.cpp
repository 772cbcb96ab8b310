#include "deskmt/graph.hpp"

#include <algorithm>
#include <cstring>
#include <unordered_set>

namespace deskmt {

namespace {

std::uint64_t fnv(const void* data, std::size_t n, std::uint64_t h = 1469598103934665603ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

std::uint64_t content_hash(const Tensor& t) {
  std::uint64_t h = fnv(t.shape().dims().data(), t.shape().rank() * sizeof(std::size_t));
  const auto dt = static_cast<unsigned char>(t.dtype());
  h = fnv(&dt, 1, h);
  switch (t.dtype()) {
    case DType::kFloat32:
      return fnv(t.data<float>().data(), t.size() * sizeof(float), h);
    case DType::kInt32:
      return fnv(t.data<std::int32_t>().data(), t.size() * sizeof(std::int32_t), h);
    case DType::kInt16:
      return fnv(t.data<std::int16_t>().data(), t.size() * sizeof(std::int16_t), h);
    case DType::kInt8:
      return fnv(t.data<std::int8_t>().data(), t.size(), h);
  }
  return h;
}

std::uint32_t float_bits(float f) {
  std::uint32_t u;
  std::memcpy(&u, &f, sizeof u);
  return u;
}

const Tensor& as_tensor(const ValuePtr& v, const char* what) {
  if (const auto* t = std::get_if<Tensor>(v.get())) return *t;
  throw GraphError(std::string(what) + ": expected a float tensor operand");
}

const QuantizedTensor& as_quantized(const ValuePtr& v, const char* what) {
  if (const auto* q = std::get_if<QuantizedTensor>(v.get())) return *q;
  throw GraphError(std::string(what) + ": expected a quantized operand");
}

std::uint64_t elems(const Shape& s) { return s.elements(); }

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::kParam:
      return "param";
    case Op::kInput:
      return "input";
    case Op::kConstant:
      return "constant";
    case Op::kTranspose:
      return "transpose";
    case Op::kQuantizeI16:
      return "quantize-i16";
    case Op::kQuantizeI8:
      return "quantize-i8";
    case Op::kClip:
      return "clip";
    case Op::kGemmF32:
      return "gemm-f32";
    case Op::kGemmI16:
      return "gemm-i16";
    case Op::kGemmI8:
      return "gemm-i8";
    case Op::kTunedGemm:
      return "tuned-gemm";
    case Op::kAdd:
      return "add";
    case Op::kMul:
      return "mul";
    case Op::kRelu:
      return "relu";
    case Op::kSigmoid:
      return "sigmoid";
    case Op::kLayerNorm:
      return "layer-norm";
    case Op::kSoftmax:
      return "softmax";
    case Op::kConcat:
      return "concat";
    case Op::kSlice:
      return "slice";
    case Op::kScalarMul:
      return "scalar-mul";
    case Op::kCount:
      break;
  }
  return "?";
}

std::uint64_t KernelCounters::total_calls() const {
  std::uint64_t n = 0;
  for (auto c : invocations) n += c;
  return n;
}

const Value& ForwardResult::value(NodeId id) const {
  auto it = values_.find(id);
  if (it == values_.end()) throw GraphError("node " + std::to_string(id) + " was not evaluated");
  return *it->second;
}

const Tensor& ForwardResult::tensor(NodeId id) const {
  const Value& v = value(id);
  if (const auto* t = std::get_if<Tensor>(&v)) return *t;
  throw GraphError("node " + std::to_string(id) + " holds a quantized value");
}

const QuantizedTensor& ForwardResult::quantized(NodeId id) const {
  const Value& v = value(id);
  if (const auto* q = std::get_if<QuantizedTensor>(&v)) return *q;
  throw GraphError("node " + std::to_string(id) + " holds a float value");
}

const Node& Graph::node(NodeId id) const {
  if (id >= nodes_.size()) throw GraphError("unknown node id " + std::to_string(id));
  return nodes_[id];
}

const std::vector<std::string>& Graph::tuned_alternatives() {
  static const std::vector<std::string> ids{"f32", "i16"};
  return ids;
}

bool Graph::mark_constness(Op op, std::span<const NodeId> children) const {
  switch (op) {
    case Op::kParam:
    case Op::kConstant:
      return true;
    case Op::kInput:
      return false;
    default:
      return std::all_of(children.begin(), children.end(), [this](NodeId c) { return node(c).is_constant; });
  }
}

Shape Graph::infer_shape(Op op, const std::vector<NodeId>& ch, const NodeAttrs& attrs, bool& quantized) const {
  quantized = false;
  auto arity = [&](std::size_t n) {
    if (ch.size() != n) {
      throw GraphError(std::string(op_name(op)) + " expects " + std::to_string(n) + " operands, got " +
                       std::to_string(ch.size()));
    }
  };
  auto float_operand = [&](std::size_t i) -> const Shape& {
    const Node& c = node(ch[i]);
    if (c.quantized) throw GraphError(std::string(op_name(op)) + ": operand " + std::to_string(i) + " is quantized");
    return c.shape;
  };
  auto rank2 = [&](const Shape& s) {
    if (s.rank() != 2) throw GraphError(std::string(op_name(op)) + ": expected rank 2, got " + s.to_string());
  };

  switch (op) {
    case Op::kParam:
    case Op::kConstant: {
      if (!attrs.literal) throw GraphError("constant node without a value");
      arity(0);
      if (const auto* t = std::get_if<Tensor>(attrs.literal.get())) return t->shape();
      quantized = true;
      return std::get<QuantizedTensor>(*attrs.literal).shape();
    }
    case Op::kInput:
      arity(0);
      if (!attrs.declared) throw GraphError("input node without a declared shape");
      return *attrs.declared;
    case Op::kTranspose: {
      arity(1);
      const Shape& s = float_operand(0);
      rank2(s);
      return Shape{s[1], s[0]};
    }
    case Op::kQuantizeI16:
    case Op::kQuantizeI8:
      arity(1);
      quantized = true;
      return float_operand(0);
    case Op::kClip:
      arity(1);
      if (!(attrs.scalar > 0.0F)) throw ParameterError("clip bound must be positive");
      return float_operand(0);
    case Op::kGemmF32:
    case Op::kTunedGemm: {
      arity(2);
      const Shape& a = float_operand(0);
      const Shape& b = float_operand(1);
      rank2(a);
      rank2(b);
      if (a[1] != b[0]) {
        throw GraphError(std::string(op_name(op)) + ": inner dimensions disagree " + a.to_string() + " x " +
                         b.to_string());
      }
      return Shape{a[0], b[1]};
    }
    case Op::kGemmI16:
    case Op::kGemmI8: {
      arity(2);
      const Node& a = node(ch[0]);
      const Node& b = node(ch[1]);
      if (!a.quantized || !b.quantized) throw GraphError(std::string(op_name(op)) + ": operands must be quantized");
      rank2(a.shape);
      rank2(b.shape);
      if (a.shape[1] != b.shape[1]) {
        throw GraphError(std::string(op_name(op)) + ": inner dimensions disagree " + a.shape.to_string() +
                         " vs transposed " + b.shape.to_string());
      }
      return Shape{a.shape[0], b.shape[0]};
    }
    case Op::kAdd: {
      arity(2);
      const Shape& a = float_operand(0);
      const Shape& b = float_operand(1);
      if (a == b || (b.rank() == 1 && b[0] == a.cols())) return a;
      throw GraphError("add: incompatible shapes " + a.to_string() + " and " + b.to_string());
    }
    case Op::kMul: {
      arity(2);
      const Shape& a = float_operand(0);
      if (a != float_operand(1)) throw GraphError("mul: shapes differ");
      return a;
    }
    case Op::kRelu:
    case Op::kSigmoid:
    case Op::kSoftmax:
    case Op::kScalarMul:
      arity(1);
      return float_operand(0);
    case Op::kLayerNorm: {
      arity(3);
      const Shape& x = float_operand(0);
      if (float_operand(1).elements() != x.cols() || float_operand(2).elements() != x.cols()) {
        throw GraphError("layer-norm: gain/bias must match the last axis of " + x.to_string());
      }
      return x;
    }
    case Op::kConcat: {
      if (ch.empty()) throw GraphError("concat: no operands");
      if (attrs.axis > 1) throw GraphError("concat: axis must be 0 or 1");
      const std::size_t other = 1 - attrs.axis;
      std::size_t total = 0;
      const Shape& first = float_operand(0);
      rank2(first);
      for (std::size_t i = 0; i < ch.size(); ++i) {
        const Shape& s = float_operand(i);
        rank2(s);
        if (s[other] != first[other]) throw GraphError("concat: mismatched extents");
        total += s[attrs.axis];
      }
      return attrs.axis == 0 ? Shape{total, first[1]} : Shape{first[0], total};
    }
    case Op::kSlice: {
      arity(1);
      const Shape& s = float_operand(0);
      rank2(s);
      if (attrs.axis > 1 || attrs.begin >= attrs.end || attrs.end > s[attrs.axis]) {
        throw GraphError("slice: bad range on " + s.to_string());
      }
      return attrs.axis == 0 ? Shape{attrs.end - attrs.begin, s[1]} : Shape{s[0], attrs.end - attrs.begin};
    }
    case Op::kCount:
      break;
  }
  throw GraphError("unknown op");
}

std::string Graph::constant_key(Op op, const std::vector<NodeId>& ch, const NodeAttrs& attrs) const {
  std::string key = op_name(op);
  key += '(';
  for (auto c : ch) key += std::to_string(c) + ',';
  key += ')';
  key += std::to_string(float_bits(attrs.scalar)) + '/' + std::to_string(attrs.axis) + '/' +
         std::to_string(attrs.begin) + '/' + std::to_string(attrs.end) + '/' +
         std::to_string(float_bits(attrs.int8.clip)) + '/' + std::to_string(attrs.prep) + '/' +
         std::to_string(reinterpret_cast<std::uintptr_t>(attrs.tuner));
  return key;
}

NodeId Graph::append(Op op, std::vector<NodeId> children, NodeAttrs attrs) {
  for (auto c : children) {
    if (c >= nodes_.size()) throw GraphError("unknown child node id " + std::to_string(c));
  }
  if (attrs.prep != kNoNode && attrs.prep >= nodes_.size()) throw GraphError("unknown prep node id");
  bool quantized = false;
  Shape shape = infer_shape(op, children, attrs, quantized);
  const bool is_constant = mark_constness(op, children);

  std::string key;
  if (is_constant && op != Op::kParam && op != Op::kConstant) {
    key = constant_key(op, children, attrs);
    if (auto it = constants_.find(key); it != constants_.end()) return it->second;
  }

  Node n;
  n.id = static_cast<NodeId>(nodes_.size());
  n.op = op;
  n.children = std::move(children);
  n.is_constant = is_constant;
  n.shape = std::move(shape);
  n.quantized = quantized;
  n.attrs = std::move(attrs);
  nodes_.push_back(std::move(n));
  if (!key.empty()) constants_.emplace(std::move(key), nodes_.back().id);
  return nodes_.back().id;
}

NodeId Graph::add_node(Op op, std::vector<NodeId> children, NodeAttrs attrs) {
  switch (op) {
    case Op::kParam:
      if (!attrs.literal) throw GraphError("param node without a value");
      return param(attrs.name, attrs.literal);
    case Op::kInput:
      if (!attrs.declared) throw GraphError("input node without a declared shape");
      return input(attrs.name, *attrs.declared);
    case Op::kConstant:
      if (!attrs.literal) throw GraphError("constant node without a value");
      if (const auto* t = std::get_if<Tensor>(attrs.literal.get())) return constant(*t);
      return append(op, {}, std::move(attrs));
    default:
      return append(op, std::move(children), std::move(attrs));
  }
}

NodeId Graph::param(const std::string& name, const Tensor& value) {
  if (auto it = params_.find(name); it != params_.end()) {
    if (nodes_[it->second].shape != value.shape()) throw GraphError("param '" + name + "' re-declared with a new shape");
    return it->second;
  }
  return param(name, std::make_shared<const Value>(value));
}

NodeId Graph::param(const std::string& name, std::shared_ptr<const Value> value) {
  if (auto it = params_.find(name); it != params_.end()) return it->second;
  NodeAttrs attrs;
  attrs.name = name;
  attrs.literal = std::move(value);
  const NodeId id = append(Op::kParam, {}, std::move(attrs));
  params_.emplace(name, id);
  return id;
}

NodeId Graph::input(const std::string& name, Shape shape) {
  NodeAttrs attrs;
  attrs.name = name;
  attrs.declared = std::move(shape);
  return append(Op::kInput, {}, std::move(attrs));
}

NodeId Graph::constant(Tensor value) {
  std::string key = "literal:" + std::to_string(content_hash(value));
  if (auto it = constants_.find(key); it != constants_.end()) {
    const auto& existing = std::get<Tensor>(*nodes_[it->second].attrs.literal);
    if (existing == value) return it->second;
    key.clear();  // hash collision: keep both, only the first is shared
  }
  NodeAttrs attrs;
  attrs.literal = std::make_shared<const Value>(std::move(value));
  const NodeId id = append(Op::kConstant, {}, std::move(attrs));
  if (!key.empty()) constants_.emplace(std::move(key), id);
  return id;
}

NodeId Graph::transpose(NodeId a) { return append(Op::kTranspose, {a}, {}); }
NodeId Graph::quantize_i16(NodeId a) { return append(Op::kQuantizeI16, {a}, {}); }

NodeId Graph::quantize_i8(NodeId a, const Int8Scheme& scheme) {
  NodeAttrs attrs;
  attrs.int8 = scheme;
  return append(Op::kQuantizeI8, {a}, std::move(attrs));
}

NodeId Graph::clip(NodeId a, float c) {
  NodeAttrs attrs;
  attrs.scalar = c;
  return append(Op::kClip, {a}, std::move(attrs));
}

NodeId Graph::gemm(NodeId a, NodeId b) { return append(Op::kGemmF32, {a, b}, {}); }
NodeId Graph::add(NodeId a, NodeId b) { return append(Op::kAdd, {a, b}, {}); }
NodeId Graph::mul(NodeId a, NodeId b) { return append(Op::kMul, {a, b}, {}); }
NodeId Graph::relu(NodeId a) { return append(Op::kRelu, {a}, {}); }
NodeId Graph::sigmoid(NodeId a) { return append(Op::kSigmoid, {a}, {}); }
NodeId Graph::softmax(NodeId a) { return append(Op::kSoftmax, {a}, {}); }

NodeId Graph::layer_norm(NodeId x, NodeId gain, NodeId bias, float eps) {
  NodeAttrs attrs;
  attrs.scalar = eps;
  return append(Op::kLayerNorm, {x, gain, bias}, std::move(attrs));
}

NodeId Graph::concat(std::vector<NodeId> parts, std::size_t axis) {
  if (parts.size() == 1) return parts.front();
  NodeAttrs attrs;
  attrs.axis = axis;
  return append(Op::kConcat, std::move(parts), std::move(attrs));
}

NodeId Graph::slice(NodeId a, std::size_t axis, std::size_t begin, std::size_t end) {
  NodeAttrs attrs;
  attrs.axis = axis;
  attrs.begin = begin;
  attrs.end = end;
  return append(Op::kSlice, {a}, std::move(attrs));
}

NodeId Graph::scalar_mul(NodeId a, float factor) {
  NodeAttrs attrs;
  attrs.scalar = factor;
  return append(Op::kScalarMul, {a}, std::move(attrs));
}

NodeId Graph::dot_int(NodeId a, NodeId b, IntPrecision precision, const Int8Scheme& scheme) {
  const Node& na = node(a);
  const Node& nb = node(b);
  if (na.quantized || nb.quantized) throw GraphError("dot_int: operands must be float nodes");
  if (na.shape.rank() != 2 || nb.shape.rank() != 2 || na.shape[1] != nb.shape[0]) {
    throw GraphError("dot_int: cannot multiply " + na.shape.to_string() + " by " + nb.shape.to_string());
  }
  if (precision == IntPrecision::kInt16) {
    const NodeId qa = quantize_i16(a);
    const NodeId qbt = quantize_i16(transpose(b));
    return append(Op::kGemmI16, {qa, qbt}, {});
  }
  const NodeId qa = quantize_i8(a, scheme);
  const NodeId qbt = quantize_i8(transpose(b), scheme);
  return append(Op::kGemmI8, {qa, qbt}, {});
}

NodeId Graph::tuned_gemm(NodeId a, NodeId b, TunerState& tuner) {
  NodeAttrs attrs;
  attrs.tuner = &tuner;
  attrs.prep = quantize_i16(transpose(b));
  return append(Op::kTunedGemm, {a, b}, std::move(attrs));
}

ForwardResult Graph::forward(const Feeds& feeds, std::span<const NodeId> outputs) {
  for (const auto& [id, value] : feeds) {
    if (id >= nodes_.size() || nodes_[id].op != Op::kInput) {
      throw FeedError("feed for node " + std::to_string(id) + ", which is not an input");
    }
  }
  for (auto id : outputs) node(id);
  ForwardResult out;
  evaluate(outputs, feeds, out);
  return out;
}

ForwardResult Graph::forward(const Feeds& feeds) {
  std::vector<NodeId> all(nodes_.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<NodeId>(i);
  return forward(feeds, all);
}

void Graph::evaluate(std::span<const NodeId> targets, const Feeds& feeds, ForwardResult& out) {
  std::vector<NodeId> order;
  std::unordered_set<NodeId> seen;
  std::vector<NodeId> stack(targets.begin(), targets.end());
  while (!stack.empty()) {
    const NodeId id = stack.back();
    stack.pop_back();
    if (!seen.insert(id).second || out.contains(id)) continue;
    Node& n = nodes_[id];
    if (memoize_ && n.memo) {
      out.values_.emplace(id, n.memo);
      continue;
    }
    order.push_back(id);
    for (auto c : n.children) stack.push_back(c);
  }
  // Children always have smaller ids than their parents.
  std::sort(order.begin(), order.end());
  for (auto id : order) {
    Node& n = nodes_[id];
    ValuePtr v = run_kernel(n, feeds, out);
    ++n.invocations;
    ++counters_.invocations[static_cast<std::size_t>(n.op)];
    if (n.is_constant && memoize_) n.memo = v;
    out.values_.emplace(id, std::move(v));
  }
}

ValuePtr Graph::run_kernel(Node& n, const Feeds& feeds, ForwardResult& out) {
  auto child = [&](std::size_t i) -> const ValuePtr& { return out.values_.at(n.children[i]); };
  auto& work = counters_.work[static_cast<std::size_t>(n.op)];
  auto make = [](auto&& v) { return std::make_shared<const Value>(std::forward<decltype(v)>(v)); };

  switch (n.op) {
    case Op::kParam:
    case Op::kConstant:
      return n.attrs.literal;
    case Op::kInput: {
      auto it = feeds.find(n.id);
      if (it == feeds.end()) throw FeedError("no feed for input '" + n.attrs.name + "'");
      if (it->second.shape() != n.shape) {
        throw DimensionError("feed for '" + n.attrs.name + "' has shape " + it->second.shape().to_string() +
                             ", declared " + n.shape.to_string());
      }
      if (it->second.dtype() != DType::kFloat32) throw FeedError("feed for '" + n.attrs.name + "' is not float32");
      work += elems(n.shape);
      return make(it->second);
    }
    case Op::kTranspose:
      work += elems(n.shape);
      return make(transpose2d(as_tensor(child(0), "transpose")));
    case Op::kQuantizeI16:
      work += elems(n.shape);
      return make(deskmt::quantize_i16(as_tensor(child(0), "quantize-i16")));
    case Op::kQuantizeI8:
      work += elems(n.shape);
      return make(deskmt::quantize_i8(as_tensor(child(0), "quantize-i8"), n.attrs.int8));
    case Op::kClip:
      work += elems(n.shape);
      return make(deskmt::clip(as_tensor(child(0), "clip"), n.attrs.scalar));
    case Op::kGemmF32: {
      const Tensor& a = as_tensor(child(0), "gemm-f32");
      work += elems(a.shape()) * n.shape[1];
      return make(gemm_f32(a, as_tensor(child(1), "gemm-f32")));
    }
    case Op::kGemmI16: {
      const QuantizedTensor& a = as_quantized(child(0), "gemm-i16");
      work += elems(a.shape()) * n.shape[1];
      return make(gemm_i16(a, as_quantized(child(1), "gemm-i16")));
    }
    case Op::kGemmI8: {
      const QuantizedTensor& a = as_quantized(child(0), "gemm-i8");
      work += elems(a.shape()) * n.shape[1];
      return make(gemm_i8(a, as_quantized(child(1), "gemm-i8")));
    }
    case Op::kTunedGemm: {
      const Tensor& a = as_tensor(child(0), "tuned-gemm");
      const Tensor& b = as_tensor(child(1), "tuned-gemm");
      work += elems(a.shape()) * n.shape[1];
      const NodeId prep = n.attrs.prep;
      const std::vector<Alternative<Tensor>> alts{
          {"f32", [&] { return gemm_f32(a, b); }},
          {"i16",
           [&, prep] {
             const NodeId target[] = {prep};
             evaluate(target, feeds, out);
             ++counters_.invocations[static_cast<std::size_t>(Op::kQuantizeI16)];
             counters_.work[static_cast<std::size_t>(Op::kQuantizeI16)] += a.size();
             return gemm_i16(deskmt::quantize_i16(a), as_quantized(out.values_.at(prep), "tuned-gemm"));
           }},
      };
      const Shape shapes[] = {a.shape(), b.shape()};
      const TuneKey key = tune_key(shapes, tuned_alternatives());
      return make(tuned_execute<Tensor>(*n.attrs.tuner, key, alts));
    }
    case Op::kAdd:
      work += elems(n.shape);
      return make(deskmt::add(as_tensor(child(0), "add"), as_tensor(child(1), "add")));
    case Op::kMul:
      work += elems(n.shape);
      return make(deskmt::mul(as_tensor(child(0), "mul"), as_tensor(child(1), "mul")));
    case Op::kRelu:
      work += elems(n.shape);
      return make(deskmt::relu(as_tensor(child(0), "relu")));
    case Op::kSigmoid:
      work += elems(n.shape);
      return make(deskmt::sigmoid(as_tensor(child(0), "sigmoid")));
    case Op::kLayerNorm:
      work += elems(n.shape);
      return make(deskmt::layer_norm(as_tensor(child(0), "layer-norm"), as_tensor(child(1), "layer-norm"),
                                     as_tensor(child(2), "layer-norm"), n.attrs.scalar));
    case Op::kSoftmax:
      work += elems(n.shape);
      return make(softmax_rows(as_tensor(child(0), "softmax")));
    case Op::kConcat: {
      work += elems(n.shape);
      std::vector<Tensor> parts;
      parts.reserve(n.children.size());
      for (std::size_t i = 0; i < n.children.size(); ++i) parts.push_back(as_tensor(child(i), "concat"));
      return make(deskmt::concat(parts, n.attrs.axis));
    }
    case Op::kSlice:
      work += elems(n.shape);
      return make(deskmt::slice(as_tensor(child(0), "slice"), n.attrs.axis, n.attrs.begin, n.attrs.end));
    case Op::kScalarMul:
      work += elems(n.shape);
      return make(deskmt::scalar_mul(as_tensor(child(0), "scalar-mul"), n.attrs.scalar));
    case Op::kCount:
      break;
  }
  throw GraphError("unknown op");
}

}  // namespace deskmt
