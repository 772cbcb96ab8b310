#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "deskmt/autotune.hpp"
#include "deskmt/graph.hpp"
#include "deskmt/tensor.hpp"

namespace deskmt {

using TokenId = std::uint32_t;

enum class DecoderVariant : std::uint8_t { kSelfAttention, kAan };
enum class Precision : std::uint8_t { kFloat32, kInt16, kInt8, kAutotune };

const char* variant_name(DecoderVariant v);
const char* precision_name(Precision p);
Precision parse_precision(std::string_view name);

struct ModelConfig {
  std::size_t emb_dim = 512;
  std::size_t ffn_dim = 2048;
  std::size_t enc_layers = 6;
  std::size_t dec_layers = 6;
  std::size_t heads = 8;
  std::size_t vocab_size = 36000;
  DecoderVariant decoder_variant = DecoderVariant::kSelfAttention;
  bool aan_ffn_enabled = true;
  bool aan_gate_enabled = true;
  std::size_t aan_ffn_dim = 0;  // 0 means emb_dim
  bool positional_encoding = true;

  std::size_t aan_hidden() const { return aan_ffn_dim == 0 ? emb_dim : aan_ffn_dim; }
  bool is_aan() const { return decoder_variant == DecoderVariant::kAan; }
  void validate() const;

  // big, base, small, tiny-256, tiny-192; an "-aan" suffix selects the AAN decoder.
  static ModelConfig preset(std::string_view name);

  // key=value lines. `layers` sets both stacks; '#' starts a comment.
  static ModelConfig parse(std::istream& in);
  static ModelConfig load(const std::string& path);
  void write(std::ostream& out) const;
};

struct ParamCount {
  std::uint64_t count = 0;
  double size_mib = 0;
};

// Closed form over the parameter layout used by ModelParams::random.
ParamCount param_count(const ModelConfig& config);

// Named float parameters. Buffers are shared and immutable once inserted, so
// copies are cheap and a model can back any number of graphs.
class ModelParams {
 public:
  static ModelParams random(const ModelConfig& config, std::uint32_t seed);

  void set(const std::string& name, Tensor value);
  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  const Tensor& get(const std::string& name) const;
  std::shared_ptr<const Value> shared(const std::string& name) const;
  const std::map<std::string, std::shared_ptr<const Value>>& entries() const { return entries_; }
  std::uint64_t count() const;

  // Every parameter the config needs is present with the right shape.
  void check(const ModelConfig& config) const;

  // Binary container: "DMTP", version, entry count, then per entry the name,
  // rank, extents and little-endian float32 data.
  void save(const std::string& path) const;
  void write(std::ostream& out) const;
  static ModelParams load(const std::string& path);
  static ModelParams read(std::istream& in);

  friend bool operator==(const ModelParams& a, const ModelParams& b);

 private:
  std::map<std::string, std::shared_ptr<const Value>> entries_;
};

struct Model {
  ModelConfig config;
  ModelParams params;

  static Model random(const ModelConfig& config, std::uint32_t seed);
};

// Parameter names shared by the executor and the size arithmetic.
namespace pname {
std::string enc(std::size_t layer, std::string_view leaf);
std::string dec(std::size_t layer, std::string_view leaf);
}  // namespace pname

Tensor positional_encoding(std::size_t positions, std::size_t dim, std::size_t first = 0);

// [T, T] lower-triangular cumulative-average matrix; row t holds 1/(t+1).
Tensor cumulative_average_matrix(std::size_t steps);
Tensor cumulative_average(const Tensor& y);

// logit[j] = dot(h, embedding row shortlist[j]); all rows without a shortlist.
Tensor output_logits(const Tensor& h, const Tensor& embedding,
                     std::optional<std::span<const TokenId>> shortlist = std::nullopt);

struct SelfAttnState {
  std::size_t t = 0;
  // Per layer [t, emb_dim]; empty before the first step.
  std::vector<Tensor> keys;
  std::vector<Tensor> values;
};

struct AanState {
  std::size_t t = 0;
  std::vector<Tensor> running_sum;  // per layer [1, emb_dim]
};

struct DecoderState {
  std::variant<SelfAttnState, AanState> v;

  std::size_t t() const;
  // Floats held across steps.
  std::size_t buffer_floats() const;
  bool is_aan() const { return std::holds_alternative<AanState>(v); }
};

// Cross-attention keys and values for one encoded sentence.
struct EncoderContext {
  Tensor enc_out;
  std::vector<Tensor> keys;
  std::vector<Tensor> values;
};

struct ExecOptions {
  Precision precision = Precision::kFloat32;
  bool memoize = true;
  TunerState* tuner = nullptr;  // autotune; an internal tuner is used if null
  Int8Scheme int8{};
};

// Runs a model through one graph. Parameter products go through the configured
// precision; attention products stay float. Subgraphs are built once per
// shape and reused, so constant parameter prep is shared by every call.
// One executor per thread.
class Executor {
 public:
  explicit Executor(const Model& model, ExecOptions options = {});
  ~Executor();
  Executor(const Executor&) = delete;
  Executor& operator=(const Executor&) = delete;

  const Model& model() const { return model_; }
  const ModelConfig& config() const { return model_.config; }
  const ExecOptions& options() const { return options_; }
  Graph& graph() { return graph_; }
  const Graph& graph() const { return graph_; }
  TunerState& tuner() { return *tuner_; }
  std::uint64_t encoder_runs() const { return encoder_runs_; }
  std::uint64_t decoder_steps() const { return decoder_steps_; }

  // Scaled embeddings plus positions; rows [n, emb_dim].
  Tensor embed_source(std::span<const TokenId> ids) const;
  // Step input: zero vector at t = 0, else the previous token's embedding.
  Tensor embed_target(std::optional<TokenId> prev, std::size_t t) const;

  Tensor encoder_forward(std::span<const TokenId> ids);
  EncoderContext encoder_context(const Tensor& enc_out);

  DecoderState initial_state() const;
  // One incremental step; returns the top-layer output [1, emb_dim].
  Tensor decoder_step(DecoderState& state, const Tensor& y, const EncoderContext& ctx);
  // All positions at once: causal mask or cumulative average.
  Tensor decoder_forward_full(const Tensor& y, const EncoderContext& ctx);
  // The AAN sublayer of one decoder layer over a whole sequence.
  Tensor aan_parallel(std::size_t layer, const Tensor& y);

 private:
  struct Builder;
  struct Subgraph {
    std::vector<NodeId> in;
    std::vector<NodeId> out;
  };
  using Key = std::pair<std::size_t, std::size_t>;

  std::vector<Tensor> run(const Subgraph& sub, const std::vector<const Tensor*>& feeds);
  const Subgraph& encoder_graph(std::size_t src_len);
  const Subgraph& context_graph(std::size_t src_len);
  const Subgraph& step_graph(std::size_t t, std::size_t src_len);
  const Subgraph& full_graph(std::size_t steps, std::size_t src_len);

  const Model& model_;
  ExecOptions options_;
  Graph graph_;
  std::unique_ptr<TunerState> own_tuner_;
  TunerState* tuner_;
  std::uint64_t encoder_runs_ = 0;
  std::uint64_t decoder_steps_ = 0;
  std::map<std::size_t, Subgraph> encoders_;
  std::map<std::size_t, Subgraph> contexts_;
  std::map<Key, Subgraph> steps_;
  std::map<Key, Subgraph> full_;
  std::map<Key, Subgraph> aan_;
};

}  // namespace deskmt
