#include "deskmt/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

namespace deskmt {

static_assert(std::endian::native == std::endian::little, "parameter files are little-endian");

const char* variant_name(DecoderVariant v) { return v == DecoderVariant::kAan ? "aan" : "self-attention"; }

const char* precision_name(Precision p) {
  switch (p) {
    case Precision::kFloat32: return "float32";
    case Precision::kInt16: return "int16";
    case Precision::kInt8: return "int8";
    case Precision::kAutotune: return "autotune";
  }
  return "?";
}

Precision parse_precision(std::string_view name) {
  for (auto p : {Precision::kFloat32, Precision::kInt16, Precision::kInt8, Precision::kAutotune}) {
    if (name == precision_name(p)) return p;
  }
  throw ParameterError("unknown precision '" + std::string(name) + "'");
}

void ModelConfig::validate() const {
  if (emb_dim == 0 || ffn_dim == 0 || enc_layers == 0 || dec_layers == 0 || heads == 0 || vocab_size == 0) {
    throw ParameterError("model widths and counts must be positive");
  }
  if (emb_dim % heads != 0) {
    throw ParameterError("emb_dim " + std::to_string(emb_dim) + " is not divisible by heads " + std::to_string(heads));
  }
}

ModelConfig ModelConfig::preset(std::string_view name) {
  ModelConfig c;
  std::string_view base = name;
  if (base.size() > 4 && base.substr(base.size() - 4) == "-aan") {
    c.decoder_variant = DecoderVariant::kAan;
    base.remove_suffix(4);
  }
  if (base == "big") {
    c.emb_dim = 1024, c.ffn_dim = 4096, c.heads = 16;
  } else if (base == "base") {
    c.emb_dim = 512, c.ffn_dim = 2048;
  } else if (base == "small") {
    c.emb_dim = 256, c.ffn_dim = 2048;
  } else if (base == "tiny-256") {
    c.emb_dim = 256, c.ffn_dim = 1536;
  } else if (base == "tiny-192") {
    c.emb_dim = 192, c.ffn_dim = 1536;
  } else {
    throw ParameterError("unknown preset '" + std::string(name) + "'");
  }
  return c;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  unsigned long long n = 0;
  try {
    n = std::stoull(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty() || v[0] == '-') throw FormatError("config: bad value for " + key + ": '" + v + "'");
  return static_cast<std::size_t>(n);
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw FormatError("config: bad boolean for " + key + ": '" + v + "'");
}

}  // namespace

ModelConfig ModelConfig::parse(std::istream& in) {
  ModelConfig c;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("config line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (key == "emb_dim") {
      c.emb_dim = parse_size(key, val);
    } else if (key == "ffn_dim") {
      c.ffn_dim = parse_size(key, val);
    } else if (key == "layers") {
      c.enc_layers = c.dec_layers = parse_size(key, val);
    } else if (key == "enc_layers") {
      c.enc_layers = parse_size(key, val);
    } else if (key == "dec_layers") {
      c.dec_layers = parse_size(key, val);
    } else if (key == "heads") {
      c.heads = parse_size(key, val);
    } else if (key == "vocab_size") {
      c.vocab_size = parse_size(key, val);
    } else if (key == "decoder_variant") {
      if (val == "aan") {
        c.decoder_variant = DecoderVariant::kAan;
      } else if (val == "self-attention") {
        c.decoder_variant = DecoderVariant::kSelfAttention;
      } else {
        throw FormatError("config: unknown decoder_variant '" + val + "'");
      }
    } else if (key == "aan_ffn") {
      c.aan_ffn_enabled = parse_bool(key, val);
    } else if (key == "aan_gate") {
      c.aan_gate_enabled = parse_bool(key, val);
    } else if (key == "aan_ffn_dim") {
      c.aan_ffn_dim = parse_size(key, val);
    } else if (key == "positional_encoding") {
      c.positional_encoding = parse_bool(key, val);
    } else {
      throw FormatError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
  }
  c.validate();
  return c;
}

ModelConfig ModelConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open config " + path);
  return parse(in);
}

void ModelConfig::write(std::ostream& out) const {
  out << "emb_dim=" << emb_dim << "\nffn_dim=" << ffn_dim << "\nenc_layers=" << enc_layers
      << "\ndec_layers=" << dec_layers << "\nheads=" << heads << "\nvocab_size=" << vocab_size
      << "\ndecoder_variant=" << variant_name(decoder_variant) << "\naan_ffn=" << (aan_ffn_enabled ? "true" : "false")
      << "\naan_gate=" << (aan_gate_enabled ? "true" : "false") << "\naan_ffn_dim=" << aan_ffn_dim
      << "\npositional_encoding=" << (positional_encoding ? "true" : "false") << '\n';
}

ParamCount param_count(const ModelConfig& c) {
  c.validate();
  const std::uint64_t e = c.emb_dim, f = c.ffn_dim, d = c.aan_hidden();
  const std::uint64_t attention = 4 * e * e + 4 * e;
  const std::uint64_t ffn = 2 * e * f + f + e;
  const std::uint64_t norm = 2 * e;

  std::uint64_t decoder_first = attention;
  if (c.is_aan()) {
    decoder_first = 0;
    if (c.aan_ffn_enabled) decoder_first += 2 * e * d + d + e;
    if (c.aan_gate_enabled) decoder_first += 4 * e * e + 2 * e;
  }
  const std::uint64_t enc_layer = attention + ffn + 2 * norm;
  const std::uint64_t dec_layer = decoder_first + attention + ffn + 3 * norm;

  ParamCount out;
  out.count = c.vocab_size * e + c.enc_layers * enc_layer + c.dec_layers * dec_layer;
  out.size_mib = static_cast<double>(out.count) * 4.0 / (1024.0 * 1024.0);
  return out;
}

namespace pname {
std::string enc(std::size_t layer, std::string_view leaf) { return "enc." + std::to_string(layer) + "." + std::string(leaf); }
std::string dec(std::size_t layer, std::string_view leaf) { return "dec." + std::to_string(layer) + "." + std::string(leaf); }
}  // namespace pname

namespace {

enum class Init { kWeight, kBias, kGain };

struct Spec {
  std::string name;
  Shape shape;
  Init init;
};

void attention_specs(std::vector<Spec>& out, const std::string& prefix, std::size_t e) {
  for (const char* m : {"q", "k", "v", "o"}) {
    out.push_back({prefix + "w" + m, Shape{e, e}, Init::kWeight});
    out.push_back({prefix + "b" + m, Shape{e}, Init::kBias});
  }
}

void ffn_specs(std::vector<Spec>& out, const std::string& prefix, std::size_t e, std::size_t hidden) {
  out.push_back({prefix + "w1", Shape{e, hidden}, Init::kWeight});
  out.push_back({prefix + "b1", Shape{hidden}, Init::kBias});
  out.push_back({prefix + "w2", Shape{hidden, e}, Init::kWeight});
  out.push_back({prefix + "b2", Shape{e}, Init::kBias});
}

void norm_specs(std::vector<Spec>& out, const std::string& prefix, std::size_t e) {
  out.push_back({prefix + "g", Shape{e}, Init::kGain});
  out.push_back({prefix + "b", Shape{e}, Init::kBias});
}

std::vector<Spec> layout(const ModelConfig& c) {
  c.validate();
  const std::size_t e = c.emb_dim;
  std::vector<Spec> out;
  out.push_back({"embedding", Shape{c.vocab_size, e}, Init::kWeight});
  for (std::size_t l = 0; l < c.enc_layers; ++l) {
    attention_specs(out, pname::enc(l, "self."), e);
    norm_specs(out, pname::enc(l, "ln1."), e);
    ffn_specs(out, pname::enc(l, "ffn."), e, c.ffn_dim);
    norm_specs(out, pname::enc(l, "ln2."), e);
  }
  for (std::size_t l = 0; l < c.dec_layers; ++l) {
    if (!c.is_aan()) {
      attention_specs(out, pname::dec(l, "self."), e);
    } else {
      if (c.aan_ffn_enabled) ffn_specs(out, pname::dec(l, "aan.ffn."), e, c.aan_hidden());
      if (c.aan_gate_enabled) {
        out.push_back({pname::dec(l, "aan.gate.w"), Shape{2 * e, 2 * e}, Init::kWeight});
        out.push_back({pname::dec(l, "aan.gate.b"), Shape{2 * e}, Init::kBias});
      }
    }
    norm_specs(out, pname::dec(l, "ln1."), e);
    attention_specs(out, pname::dec(l, "cross."), e);
    norm_specs(out, pname::dec(l, "ln2."), e);
    ffn_specs(out, pname::dec(l, "ffn."), e, c.ffn_dim);
    norm_specs(out, pname::dec(l, "ln3."), e);
  }
  return out;
}

}  // namespace

ModelParams ModelParams::random(const ModelConfig& config, std::uint32_t seed) {
  std::mt19937 rng(seed);
  ModelParams p;
  for (const auto& s : layout(config)) {
    std::vector<float> v(s.shape.elements());
    float lo = -0.1F, hi = 0.1F;
    if (s.init == Init::kWeight) {
      const double fan = static_cast<double>(s.shape[0] + s.shape.cols());
      hi = static_cast<float>(std::sqrt(6.0 / fan));
      lo = -hi;
    } else if (s.init == Init::kGain) {
      lo = 0.8F, hi = 1.2F;
    }
    std::uniform_real_distribution<float> dist(lo, hi);
    for (auto& x : v) x = dist(rng);
    p.set(s.name, Tensor(s.shape, std::move(v)));
  }
  return p;
}

void ModelParams::set(const std::string& name, Tensor value) {
  if (value.dtype() != DType::kFloat32) throw ParameterError("parameter " + name + " must be float32");
  entries_[name] = std::make_shared<const Value>(std::move(value));
}

std::shared_ptr<const Value> ModelParams::shared(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ParameterError("missing parameter " + name);
  return it->second;
}

const Tensor& ModelParams::get(const std::string& name) const { return std::get<Tensor>(*shared(name)); }

std::uint64_t ModelParams::count() const {
  std::uint64_t n = 0;
  for (const auto& [name, v] : entries_) n += std::get<Tensor>(*v).size();
  return n;
}

void ModelParams::check(const ModelConfig& config) const {
  for (const auto& s : layout(config)) {
    const Tensor& t = get(s.name);
    if (t.shape() != s.shape) {
      throw DimensionError("parameter " + s.name + " has shape " + t.shape().to_string() + ", expected " +
                           s.shape.to_string());
    }
  }
}

bool operator==(const ModelParams& a, const ModelParams& b) {
  if (a.entries_.size() != b.entries_.size()) return false;
  for (const auto& [name, v] : a.entries_) {
    auto it = b.entries_.find(name);
    if (it == b.entries_.end()) return false;
    const Tensor& x = std::get<Tensor>(*v);
    const Tensor& y = std::get<Tensor>(*it->second);
    if (x.shape() != y.shape()) return false;
    // Bitwise, so NaN payloads and signed zeros round-trip too.
    if (std::memcmp(x.f32().data(), y.f32().data(), x.size() * sizeof(float)) != 0) return false;
  }
  return true;
}

namespace {

constexpr char kMagic[4] = {'D', 'M', 'T', 'P'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T take(std::istream& in) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw FormatError("truncated parameter file");
  return v;
}

}  // namespace

void ModelParams::write(std::ostream& out) const {
  out.write(kMagic, 4);
  put<std::uint32_t>(out, kVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(entries_.size()));
  for (const auto& [name, v] : entries_) {
    const Tensor& t = std::get<Tensor>(*v);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape().rank()));
    for (auto d : t.shape().dims()) put<std::uint64_t>(out, d);
    out.write(reinterpret_cast<const char*>(t.f32().data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
  }
}

ModelParams ModelParams::read(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw FormatError("not a parameter file");
  if (take<std::uint32_t>(in) != kVersion) throw FormatError("unsupported parameter file version");
  const auto n = take<std::uint32_t>(in);
  ModelParams p;
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto len = take<std::uint32_t>(in);
    if (len > 4096) throw FormatError("parameter name too long");
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw FormatError("truncated parameter file");
    const auto rank = take<std::uint32_t>(in);
    if (rank == 0 || rank > 8) throw FormatError("bad rank for " + name);
    std::vector<std::size_t> dims(rank);
    std::uint64_t elements = 1;
    for (auto& d : dims) {
      d = static_cast<std::size_t>(take<std::uint64_t>(in));
      if (d == 0 || d > (1ULL << 32)) throw FormatError("bad extent for " + name);
      elements *= d;
      if (elements > (1ULL << 34)) throw FormatError("parameter " + name + " too large");
    }
    std::vector<float> data(elements);
    if (!in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(elements * sizeof(float)))) {
      throw FormatError("truncated data for " + name);
    }
    if (p.contains(name)) throw FormatError("duplicate parameter " + name);
    p.set(name, Tensor(Shape(std::move(dims)), std::move(data)));
  }
  return p;
}

void ModelParams::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path);
  write(out);
  if (!out) throw FormatError("write failed for " + path);
}

ModelParams ModelParams::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  return read(in);
}

Model Model::random(const ModelConfig& config, std::uint32_t seed) {
  return Model{config, ModelParams::random(config, seed)};
}

Tensor positional_encoding(std::size_t positions, std::size_t dim, std::size_t first) {
  Tensor pe(Shape{positions, dim}, DType::kFloat32);
  for (std::size_t p = 0; p < positions; ++p) {
    const double pos = static_cast<double>(first + p);
    for (std::size_t i = 0; i < dim; ++i) {
      const double rate = std::pow(10000.0, static_cast<double>(i - i % 2) / static_cast<double>(dim));
      pe.at(p, i) = static_cast<float>(i % 2 == 0 ? std::sin(pos / rate) : std::cos(pos / rate));
    }
  }
  return pe;
}

Tensor cumulative_average_matrix(std::size_t steps) {
  Tensor m(Shape{steps, steps}, DType::kFloat32);
  for (std::size_t t = 0; t < steps; ++t) {
    const float w = static_cast<float>(1.0 / static_cast<double>(t + 1));
    for (std::size_t j = 0; j <= t; ++j) m.at(t, j) = w;
  }
  return m;
}

Tensor cumulative_average(const Tensor& y) { return gemm_f32(cumulative_average_matrix(y.shape()[0]), y); }

Tensor output_logits(const Tensor& h, const Tensor& embedding, std::optional<std::span<const TokenId>> shortlist) {
  const std::size_t e = embedding.shape().cols();
  const std::size_t vocab = embedding.shape().rows();
  if (h.size() != e) throw DimensionError("output_logits: hidden size " + std::to_string(h.size()) + " vs " + std::to_string(e));
  std::vector<TokenId> all;
  if (!shortlist) {
    all.resize(vocab);
    for (std::size_t i = 0; i < vocab; ++i) all[i] = static_cast<TokenId>(i);
  }
  const std::span<const TokenId> ids = shortlist ? *shortlist : std::span<const TokenId>(all);
  if (ids.empty()) throw ParameterError("output_logits: empty shortlist");
  auto hv = h.f32();
  auto ev = embedding.f32();
  std::vector<float> out(ids.size());
  for (std::size_t j = 0; j < ids.size(); ++j) {
    if (ids[j] >= vocab) throw VocabError("shortlist id " + std::to_string(ids[j]) + " outside vocabulary");
    const float* row = ev.data() + static_cast<std::size_t>(ids[j]) * e;
    float acc = 0.0F;
    for (std::size_t k = 0; k < e; ++k) acc += hv[k] * row[k];
    out[j] = acc;
  }
  return Tensor(Shape{1, ids.size()}, std::move(out));
}

std::size_t DecoderState::t() const {
  return std::visit([](const auto& s) { return s.t; }, v);
}

std::size_t DecoderState::buffer_floats() const {
  if (const auto* s = std::get_if<SelfAttnState>(&v)) {
    std::size_t n = 0;
    for (const auto& k : s->keys) n += k.size();
    for (const auto& x : s->values) n += x.size();
    return n;
  }
  std::size_t n = 0;
  for (const auto& r : std::get<AanState>(v).running_sum) n += r.size();
  return n;
}

}  // namespace deskmt
