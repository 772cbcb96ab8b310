#include <cmath>

#include "deskmt/model.hpp"

namespace deskmt {

struct Executor::Builder {
  Executor& ex;
  Graph& g;
  std::size_t e;

  explicit Builder(Executor& executor) : ex(executor), g(executor.graph_), e(executor.config().emb_dim) {}

  NodeId p(const std::string& name) { return g.param(name, ex.model_.params.shared(name)); }

  NodeId matmul(NodeId x, NodeId w) {
    switch (ex.options_.precision) {
      case Precision::kFloat32: return g.gemm(x, w);
      case Precision::kInt16: return g.dot_int(x, w, IntPrecision::kInt16);
      case Precision::kInt8: return g.dot_int(x, w, IntPrecision::kInt8, ex.options_.int8);
      case Precision::kAutotune: return g.tuned_gemm(x, w, *ex.tuner_);
    }
    throw ParameterError("bad precision");
  }

  NodeId linear(NodeId x, const std::string& prefix, const char* w, const char* b) {
    return g.add(matmul(x, p(prefix + w)), p(prefix + b));
  }

  NodeId norm(NodeId x, const std::string& prefix) { return g.layer_norm(x, p(prefix + "g"), p(prefix + "b")); }

  NodeId ffn(NodeId x, const std::string& prefix) {
    return linear(g.relu(linear(x, prefix, "w1", "b1")), prefix, "w2", "b2");
  }

  // Multi-head scaled dot-product attention; `mask` is added to the scores.
  NodeId attention(NodeId q, NodeId k, NodeId v, NodeId mask = kNoNode) {
    const std::size_t heads = ex.config().heads;
    const std::size_t d = e / heads;
    const float scale = static_cast<float>(1.0 / std::sqrt(static_cast<double>(d)));
    std::vector<NodeId> parts;
    for (std::size_t h = 0; h < heads; ++h) {
      NodeId qh = q, kh = k, vh = v;
      if (heads > 1) {
        qh = g.slice(q, 1, h * d, (h + 1) * d);
        kh = g.slice(k, 1, h * d, (h + 1) * d);
        vh = g.slice(v, 1, h * d, (h + 1) * d);
      }
      NodeId scores = g.scalar_mul(g.gemm(qh, g.transpose(kh)), scale);
      if (mask != kNoNode) scores = g.add(scores, mask);
      parts.push_back(g.gemm(g.softmax(scores), vh));
    }
    return g.concat(std::move(parts), 1);
  }

  NodeId aan_block(std::size_t l, NodeId y, NodeId avg) {
    const ModelConfig& c = ex.config();
    NodeId h = avg;
    if (c.aan_ffn_enabled) h = ffn(avg, pname::dec(l, "aan.ffn."));
    NodeId out = h;
    if (c.aan_gate_enabled) {
      const NodeId z = g.sigmoid(linear(g.concat({y, h}, 1), pname::dec(l, "aan.gate."), "w", "b"));
      const NodeId i = g.slice(z, 1, 0, e);
      const NodeId f = g.slice(z, 1, e, 2 * e);
      out = g.add(g.mul(i, y), g.mul(f, h));
    }
    return norm(g.add(y, out), pname::dec(l, "ln1."));
  }

  NodeId self_block(std::size_t l, NodeId x, NodeId keys, NodeId values, NodeId q, NodeId mask = kNoNode) {
    const std::string pre = pname::dec(l, "self.");
    return norm(g.add(x, linear(attention(q, keys, values, mask), pre, "wo", "bo")), pname::dec(l, "ln1."));
  }

  NodeId cross_and_ffn(std::size_t l, NodeId a, NodeId ck, NodeId cv) {
    const NodeId q = linear(a, pname::dec(l, "cross."), "wq", "bq");
    const NodeId att = linear(attention(q, ck, cv), pname::dec(l, "cross."), "wo", "bo");
    const NodeId c = norm(g.add(a, att), pname::dec(l, "ln2."));
    return norm(g.add(c, ffn(c, pname::dec(l, "ffn."))), pname::dec(l, "ln3."));
  }
};

Executor::Executor(const Model& model, ExecOptions options)
    : model_(model), options_(options), graph_(options.memoize), tuner_(options.tuner) {
  model_.config.validate();
  model_.params.check(model_.config);
  if (tuner_ == nullptr) {
    own_tuner_ = std::make_unique<TunerState>();
    tuner_ = own_tuner_.get();
  }
}

Executor::~Executor() = default;

std::vector<Tensor> Executor::run(const Subgraph& sub, const std::vector<const Tensor*>& feeds) {
  Feeds f;
  for (std::size_t i = 0; i < sub.in.size(); ++i) f.emplace(sub.in[i], *feeds.at(i));
  auto result = graph_.forward(f, sub.out);
  std::vector<Tensor> out;
  out.reserve(sub.out.size());
  for (auto id : sub.out) out.push_back(result.tensor(id));
  return out;
}

Tensor Executor::embed_source(std::span<const TokenId> ids) const {
  const ModelConfig& c = config();
  if (ids.empty()) throw ParameterError("empty source sentence");
  const Tensor& emb = model_.params.get("embedding");
  const float scale = static_cast<float>(std::sqrt(static_cast<double>(c.emb_dim)));
  Tensor x(Shape{ids.size(), c.emb_dim}, DType::kFloat32);
  const Tensor pe = c.positional_encoding ? positional_encoding(ids.size(), c.emb_dim) : Tensor{};
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= c.vocab_size) throw VocabError("token id " + std::to_string(ids[i]) + " outside vocabulary");
    for (std::size_t k = 0; k < c.emb_dim; ++k) {
      float v = emb.at(ids[i], k) * scale;
      if (c.positional_encoding) v += pe.at(i, k);
      x.at(i, k) = v;
    }
  }
  return x;
}

Tensor Executor::embed_target(std::optional<TokenId> prev, std::size_t t) const {
  const ModelConfig& c = config();
  Tensor y(Shape{1, c.emb_dim}, DType::kFloat32);
  if (prev) {
    if (*prev >= c.vocab_size) throw VocabError("token id " + std::to_string(*prev) + " outside vocabulary");
    const Tensor& emb = model_.params.get("embedding");
    const float scale = static_cast<float>(std::sqrt(static_cast<double>(c.emb_dim)));
    for (std::size_t k = 0; k < c.emb_dim; ++k) y.at(0, k) = emb.at(*prev, k) * scale;
  }
  if (c.positional_encoding) {
    const Tensor pe = positional_encoding(1, c.emb_dim, t);
    for (std::size_t k = 0; k < c.emb_dim; ++k) y.at(0, k) += pe.at(0, k);
  }
  return y;
}

const Executor::Subgraph& Executor::encoder_graph(std::size_t src_len) {
  auto it = encoders_.find(src_len);
  if (it != encoders_.end()) return it->second;
  Builder b(*this);
  Subgraph sub;
  const NodeId in = graph_.input("source", Shape{src_len, b.e});
  sub.in.push_back(in);
  NodeId x = in;
  for (std::size_t l = 0; l < config().enc_layers; ++l) {
    const std::string pre = pname::enc(l, "self.");
    const NodeId q = b.linear(x, pre, "wq", "bq");
    const NodeId k = b.linear(x, pre, "wk", "bk");
    const NodeId v = b.linear(x, pre, "wv", "bv");
    const NodeId a = b.norm(graph_.add(x, b.linear(b.attention(q, k, v), pre, "wo", "bo")), pname::enc(l, "ln1."));
    x = b.norm(graph_.add(a, b.ffn(a, pname::enc(l, "ffn."))), pname::enc(l, "ln2."));
  }
  sub.out.push_back(x);
  return encoders_.emplace(src_len, std::move(sub)).first->second;
}

Tensor Executor::encoder_forward(std::span<const TokenId> ids) {
  const Tensor x = embed_source(ids);
  ++encoder_runs_;
  return run(encoder_graph(ids.size()), {&x}).front();
}

const Executor::Subgraph& Executor::context_graph(std::size_t src_len) {
  auto it = contexts_.find(src_len);
  if (it != contexts_.end()) return it->second;
  Builder b(*this);
  Subgraph sub;
  const NodeId in = graph_.input("enc_out", Shape{src_len, b.e});
  sub.in.push_back(in);
  for (std::size_t l = 0; l < config().dec_layers; ++l) {
    sub.out.push_back(b.linear(in, pname::dec(l, "cross."), "wk", "bk"));
  }
  for (std::size_t l = 0; l < config().dec_layers; ++l) {
    sub.out.push_back(b.linear(in, pname::dec(l, "cross."), "wv", "bv"));
  }
  return contexts_.emplace(src_len, std::move(sub)).first->second;
}

EncoderContext Executor::encoder_context(const Tensor& enc_out) {
  if (enc_out.shape().rank() != 2 || enc_out.shape().cols() != config().emb_dim) {
    throw DimensionError("encoder output must be [n, " + std::to_string(config().emb_dim) + "]");
  }
  auto out = run(context_graph(enc_out.shape()[0]), {&enc_out});
  const std::size_t layers = config().dec_layers;
  EncoderContext ctx;
  ctx.enc_out = enc_out;
  ctx.keys.assign(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(layers));
  ctx.values.assign(out.begin() + static_cast<std::ptrdiff_t>(layers), out.end());
  return ctx;
}

DecoderState Executor::initial_state() const {
  if (!config().is_aan()) return DecoderState{SelfAttnState{}};
  AanState s;
  s.running_sum.assign(config().dec_layers, Tensor(Shape{1, config().emb_dim}, DType::kFloat32));
  return DecoderState{std::move(s)};
}

// Inputs: y, then per-layer state (caches or running sums, plus 1/(t+1) for
// AAN), then per-layer cross keys and values. Outputs: top-layer output, then
// the per-layer state to carry forward.
const Executor::Subgraph& Executor::step_graph(std::size_t t, std::size_t src_len) {
  const ModelConfig& c = config();
  const Key key{c.is_aan() ? 0 : t, src_len};
  auto it = steps_.find(key);
  if (it != steps_.end()) return it->second;
  Builder b(*this);
  const std::size_t layers = c.dec_layers;
  Subgraph sub;
  const NodeId y = graph_.input("y", Shape{1, b.e});
  sub.in.push_back(y);

  std::vector<NodeId> cache_k(layers, kNoNode), cache_v(layers, kNoNode), sums(layers, kNoNode);
  NodeId inv = kNoNode;
  if (c.is_aan()) {
    for (auto& s : sums) sub.in.push_back(s = graph_.input("running_sum", Shape{1, b.e}));
    inv = graph_.input("inv_steps", Shape{1, b.e});
    sub.in.push_back(inv);
  } else if (t > 0) {
    for (auto& k : cache_k) sub.in.push_back(k = graph_.input("cache_k", Shape{t, b.e}));
    for (auto& v : cache_v) sub.in.push_back(v = graph_.input("cache_v", Shape{t, b.e}));
  }
  std::vector<NodeId> ck(layers), cv(layers);
  for (auto& k : ck) sub.in.push_back(k = graph_.input("cross_k", Shape{src_len, b.e}));
  for (auto& v : cv) sub.in.push_back(v = graph_.input("cross_v", Shape{src_len, b.e}));

  std::vector<NodeId> carry_a, carry_b;
  NodeId x = y;
  for (std::size_t l = 0; l < layers; ++l) {
    NodeId a;
    if (c.is_aan()) {
      const NodeId s = graph_.add(sums[l], x);
      carry_a.push_back(s);
      a = b.aan_block(l, x, graph_.mul(s, inv));
    } else {
      const std::string pre = pname::dec(l, "self.");
      const NodeId q = b.linear(x, pre, "wq", "bq");
      NodeId k = b.linear(x, pre, "wk", "bk");
      NodeId v = b.linear(x, pre, "wv", "bv");
      if (t > 0) {
        k = graph_.concat({cache_k[l], k}, 0);
        v = graph_.concat({cache_v[l], v}, 0);
      }
      carry_a.push_back(k);
      carry_b.push_back(v);
      a = b.self_block(l, x, k, v, q);
    }
    x = b.cross_and_ffn(l, a, ck[l], cv[l]);
  }
  sub.out.push_back(x);
  sub.out.insert(sub.out.end(), carry_a.begin(), carry_a.end());
  sub.out.insert(sub.out.end(), carry_b.begin(), carry_b.end());
  return steps_.emplace(key, std::move(sub)).first->second;
}

Tensor Executor::decoder_step(DecoderState& state, const Tensor& y, const EncoderContext& ctx) {
  const ModelConfig& c = config();
  if (state.is_aan() != c.is_aan()) {
    throw StateError(std::string("decoder state is for the ") + (state.is_aan() ? "aan" : "self-attention") +
                     " variant but the model uses " + variant_name(c.decoder_variant));
  }
  if (ctx.keys.size() != c.dec_layers || ctx.values.size() != c.dec_layers) {
    throw StateError("encoder context does not match the decoder depth");
  }
  const std::size_t t = state.t();
  const std::size_t layers = c.dec_layers;
  const Subgraph& sub = step_graph(t, ctx.enc_out.shape()[0]);

  std::vector<const Tensor*> feeds{&y};
  Tensor inv;
  if (auto* s = std::get_if<AanState>(&state.v)) {
    if (s->running_sum.size() != layers) throw StateError("decoder state does not match the decoder depth");
    for (const auto& r : s->running_sum) feeds.push_back(&r);
    inv = Tensor(Shape{1, c.emb_dim}, std::vector<float>(c.emb_dim, static_cast<float>(1.0 / static_cast<double>(t + 1))));
    feeds.push_back(&inv);
  } else if (t > 0) {
    auto& s = std::get<SelfAttnState>(state.v);
    if (s.keys.size() != layers || s.values.size() != layers) throw StateError("decoder state does not match the decoder depth");
    for (const auto& k : s.keys) feeds.push_back(&k);
    for (const auto& v : s.values) feeds.push_back(&v);
  }
  for (const auto& k : ctx.keys) feeds.push_back(&k);
  for (const auto& v : ctx.values) feeds.push_back(&v);

  auto out = run(sub, feeds);
  ++decoder_steps_;
  auto carried = std::next(out.begin());
  if (auto* s = std::get_if<AanState>(&state.v)) {
    s->running_sum.assign(carried, carried + static_cast<std::ptrdiff_t>(layers));
    s->t = t + 1;
  } else {
    auto& sa = std::get<SelfAttnState>(state.v);
    sa.keys.assign(carried, carried + static_cast<std::ptrdiff_t>(layers));
    sa.values.assign(carried + static_cast<std::ptrdiff_t>(layers), out.end());
    sa.t = t + 1;
  }
  return std::move(out.front());
}

const Executor::Subgraph& Executor::full_graph(std::size_t steps, std::size_t src_len) {
  const Key key{steps, src_len};
  auto it = full_.find(key);
  if (it != full_.end()) return it->second;
  const ModelConfig& c = config();
  Builder b(*this);
  const std::size_t layers = c.dec_layers;
  Subgraph sub;
  const NodeId y = graph_.input("targets", Shape{steps, b.e});
  sub.in.push_back(y);
  std::vector<NodeId> ck(layers), cv(layers);
  for (auto& k : ck) sub.in.push_back(k = graph_.input("cross_k", Shape{src_len, b.e}));
  for (auto& v : cv) sub.in.push_back(v = graph_.input("cross_v", Shape{src_len, b.e}));

  NodeId mask = kNoNode, avg = kNoNode;
  if (c.is_aan()) {
    avg = graph_.constant(cumulative_average_matrix(steps));
  } else {
    Tensor m(Shape{steps, steps}, DType::kFloat32);
    for (std::size_t i = 0; i < steps; ++i) {
      for (std::size_t j = i + 1; j < steps; ++j) m.at(i, j) = -1e9F;
    }
    mask = graph_.constant(std::move(m));
  }
  NodeId x = y;
  for (std::size_t l = 0; l < layers; ++l) {
    NodeId a;
    if (c.is_aan()) {
      a = b.aan_block(l, x, graph_.gemm(avg, x));
    } else {
      const std::string pre = pname::dec(l, "self.");
      a = b.self_block(l, x, b.linear(x, pre, "wk", "bk"), b.linear(x, pre, "wv", "bv"), b.linear(x, pre, "wq", "bq"), mask);
    }
    x = b.cross_and_ffn(l, a, ck[l], cv[l]);
  }
  sub.out.push_back(x);
  return full_.emplace(key, std::move(sub)).first->second;
}

Tensor Executor::decoder_forward_full(const Tensor& y, const EncoderContext& ctx) {
  if (y.shape().rank() != 2 || y.shape().cols() != config().emb_dim) {
    throw DimensionError("decoder inputs must be [T, " + std::to_string(config().emb_dim) + "]");
  }
  std::vector<const Tensor*> feeds{&y};
  for (const auto& k : ctx.keys) feeds.push_back(&k);
  for (const auto& v : ctx.values) feeds.push_back(&v);
  return run(full_graph(y.shape()[0], ctx.enc_out.shape()[0]), feeds).front();
}

Tensor Executor::aan_parallel(std::size_t layer, const Tensor& y) {
  const ModelConfig& c = config();
  if (!c.is_aan()) throw StateError("aan_parallel needs an aan decoder");
  if (layer >= c.dec_layers) throw ParameterError("decoder layer " + std::to_string(layer) + " out of range");
  if (y.shape().rank() != 2 || y.shape().cols() != c.emb_dim) {
    throw DimensionError("aan_parallel inputs must be [T, " + std::to_string(c.emb_dim) + "]");
  }
  const Key key{layer, y.shape()[0]};
  auto it = aan_.find(key);
  if (it == aan_.end()) {
    Builder b(*this);
    Subgraph sub;
    const NodeId in = graph_.input("sequence", y.shape());
    sub.in.push_back(in);
    sub.out.push_back(b.aan_block(layer, in, graph_.gemm(graph_.constant(cumulative_average_matrix(y.shape()[0])), in)));
    it = aan_.emplace(key, std::move(sub)).first;
  }
  return run(it->second, {&y}).front();
}

}  // namespace deskmt
