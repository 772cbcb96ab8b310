#include "deskmt/decode.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

namespace deskmt {

Vocab::Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  if (tokens_.size() < 3) throw FormatError("vocabulary needs at least the EOS, UNK and PAD entries");
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (tokens_[i].empty()) throw FormatError("empty token on vocabulary line " + std::to_string(i + 1));
    if (!ids_.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
      throw FormatError("duplicate token '" + tokens_[i] + "' in vocabulary");
    }
  }
}

Vocab Vocab::read(std::istream& in) {
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  return Vocab(std::move(tokens));
}

Vocab Vocab::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open vocabulary " + path);
  return read(in);
}

TokenId Vocab::lookup(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  return it == ids_.end() ? kUnk : it->second;
}

bool Vocab::contains(std::string_view token) const { return ids_.count(std::string(token)) != 0; }

const std::string& Vocab::token(TokenId id) const {
  if (id >= tokens_.size()) throw VocabError("token id " + std::to_string(id) + " outside vocabulary");
  return tokens_[id];
}

std::vector<std::string> split_tokens(std::string_view line) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    std::size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    if (j > i) out.emplace_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

std::vector<TokenId> Vocab::encode(std::string_view line) const {
  std::vector<TokenId> ids;
  for (const auto& t : split_tokens(line)) ids.push_back(lookup(t));
  return ids;
}

std::string Vocab::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += token(ids[i]);
  }
  return out;
}

void LexTable::add(TokenId source, TokenId target, float prob) {
  if (!(prob >= 0.0F && prob <= 1.0F)) throw ParameterError("translation probability outside [0, 1]");
  auto& list = table_[source];
  auto pos = std::find_if(list.begin(), list.end(), [&](const Translation& t) {
    return t.prob < prob || (t.prob == prob && t.target > target);
  });
  list.insert(pos, Translation{target, prob});
}

void LexTable::set_frequency(TokenId target, std::uint64_t count) { freq_[target] = count; }

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto tab = line.find('\t', start);
    out.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return out;
}

}  // namespace

LexTable LexTable::read(std::istream& lex, std::istream* freq, const Vocab& vocab) {
  LexTable t;
  std::string line;
  int lineno = 0;
  while (std::getline(lex, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto f = split_tabs(line);
    if (f.size() != 3) throw FormatError("lexical table line " + std::to_string(lineno) + ": expected 3 fields");
    float p = 0;
    try {
      std::size_t used = 0;
      p = std::stof(f[2], &used);
      if (used != f[2].size()) throw FormatError("");
    } catch (const std::exception&) {
      throw FormatError("lexical table line " + std::to_string(lineno) + ": bad probability '" + f[2] + "'");
    }
    if (!(p >= 0.0F && p <= 1.0F)) {
      throw FormatError("lexical table line " + std::to_string(lineno) + ": probability outside [0, 1]");
    }
    if (!vocab.contains(f[0]) || !vocab.contains(f[1])) continue;
    t.add(vocab.lookup(f[0]), vocab.lookup(f[1]), p);
  }
  if (freq != nullptr) {
    lineno = 0;
    while (std::getline(*freq, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      auto f = split_tabs(line);
      std::uint64_t count = 0;
      const auto* end = f.size() == 2 ? f[1].data() + f[1].size() : nullptr;
      if (f.size() != 2 || std::from_chars(f[1].data(), end, count).ptr != end || f[1].empty()) {
        throw FormatError("frequency file line " + std::to_string(lineno) + ": expected token<TAB>count");
      }
      if (vocab.contains(f[0])) t.set_frequency(vocab.lookup(f[0]), count);
    }
  }
  return t;
}

LexTable LexTable::load(const std::string& lex_path, const std::string& freq_path, const Vocab& vocab) {
  std::ifstream lex(lex_path);
  if (!lex) throw FormatError("cannot open lexical table " + lex_path);
  if (freq_path.empty()) return read(lex, nullptr, vocab);
  std::ifstream freq(freq_path);
  if (!freq) throw FormatError("cannot open frequency file " + freq_path);
  return read(lex, &freq, vocab);
}

std::span<const Translation> LexTable::translations(TokenId source) const {
  auto it = table_.find(source);
  if (it == table_.end()) return {};
  return it->second;
}

std::vector<TokenId> LexTable::most_frequent(std::size_t n, std::size_t vocab_size) const {
  std::vector<std::pair<TokenId, std::uint64_t>> all;
  all.reserve(vocab_size);
  for (std::size_t i = 0; i < vocab_size; ++i) {
    auto it = freq_.find(static_cast<TokenId>(i));
    all.emplace_back(static_cast<TokenId>(i), it == freq_.end() ? 0 : it->second);
  }
  const std::size_t k = std::min(n, all.size());
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  std::vector<TokenId> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(all[i].first);
  return out;
}

std::vector<Batch> make_batches(const std::vector<std::vector<TokenId>>& sentences, std::size_t word_budget) {
  if (word_budget < 1) throw ParameterError("batch word budget must be at least 1");
  std::vector<std::size_t> order(sentences.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return sentences[a].size() < sentences[b].size(); });

  std::vector<Batch> out;
  Batch cur;
  auto close = [&] {
    if (cur.indices.empty()) return;
    // Original order inside the batch.
    std::vector<std::size_t> idx = cur.indices;
    std::sort(idx.begin(), idx.end());
    Batch b;
    b.words = cur.words;
    for (auto i : idx) {
      b.indices.push_back(i);
      b.sentences.push_back(sentences[i]);
    }
    out.push_back(std::move(b));
    cur = Batch{};
  };
  for (auto i : order) {
    const std::size_t len = sentences[i].size();
    if (!cur.indices.empty() && cur.words + len > word_budget) close();
    cur.indices.push_back(i);
    cur.words += len;
  }
  close();
  return out;
}

Shortlist build_shortlist(const Batch& batch, const LexTable& lex, const Vocab& vocab, std::size_t top_frequent,
                          std::size_t top_translations) {
  std::set<TokenId> ids{kEos, kUnk};
  for (auto id : lex.most_frequent(top_frequent, vocab.size())) ids.insert(id);
  std::set<TokenId> sources;
  for (const auto& s : batch.sentences) sources.insert(s.begin(), s.end());
  for (auto src : sources) {
    auto list = lex.translations(src);
    for (std::size_t i = 0; i < list.size() && i < top_translations; ++i) ids.insert(list[i].target);
  }
  Shortlist out;
  for (auto id : ids) {
    if (id < vocab.size()) out.push_back(id);
  }
  return out;
}

namespace {

// Output candidates in ascending id order, PAD removed.
std::vector<TokenId> candidates(const Shortlist* shortlist, std::size_t vocab) {
  std::vector<TokenId> ids;
  if (shortlist != nullptr) {
    for (auto id : *shortlist) {
      if (id >= vocab) throw VocabError("shortlist id " + std::to_string(id) + " outside vocabulary");
      if (id != kPad) ids.push_back(id);
    }
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  } else {
    for (std::size_t i = 0; i < vocab; ++i) {
      if (i != kPad) ids.push_back(static_cast<TokenId>(i));
    }
  }
  if (ids.empty()) throw ParameterError("no output candidates");
  return ids;
}

Tensor step_logits(Executor& ex, DecoderState& state, std::optional<TokenId> prev, const EncoderContext& ctx,
                   const std::vector<TokenId>& ids) {
  const Tensor h = ex.decoder_step(state, ex.embed_target(prev, state.t()), ctx);
  return output_logits(h, ex.model().params.get("embedding"), ids);
}

}  // namespace

std::vector<TokenId> greedy_decode(Executor& ex, DecoderState state, const EncoderContext& ctx,
                                   const Shortlist* shortlist, std::size_t max_len) {
  if (max_len < 1) throw ParameterError("max_len must be at least 1");
  const auto ids = candidates(shortlist, ex.config().vocab_size);
  std::vector<TokenId> out;
  std::optional<TokenId> prev;
  for (std::size_t t = 0; t < max_len; ++t) {
    const Tensor logits = step_logits(ex, state, prev, ctx, ids);
    const TokenId best = ids[argmax(logits.f32())];
    if (best == kEos) break;
    out.push_back(best);
    prev = best;
  }
  return out;
}

std::vector<Hypothesis> beam_search(Executor& ex, const EncoderContext& ctx, std::size_t beam,
                                    const Shortlist* shortlist, std::size_t max_len, double length_norm) {
  if (beam < 1) throw ParameterError("beam size must be at least 1");
  if (max_len < 1) throw ParameterError("max_len must be at least 1");
  const auto ids = candidates(shortlist, ex.config().vocab_size);

  struct Live {
    Hypothesis hyp;
    DecoderState state;
  };
  struct Candidate {
    double score;
    std::size_t hyp;
    std::size_t rank;  // position in the hypothesis' own logit order
    TokenId token;
  };

  std::vector<Live> live{{Hypothesis{}, ex.initial_state()}};
  std::vector<Hypothesis> finished;
  for (std::size_t t = 0; t < max_len && !live.empty() && finished.size() < beam; ++t) {
    const std::size_t slots = beam - finished.size();
    std::vector<Candidate> pool;
    for (std::size_t h = 0; h < live.size(); ++h) {
      auto& l = live[h];
      std::optional<TokenId> prev;
      if (!l.hyp.tokens.empty()) prev = l.hyp.tokens.back();
      const Tensor logits = step_logits(ex, l.state, prev, ctx, ids);
      auto v = logits.f32();

      // log-softmax in double
      double top = v[argmax(v)];
      double z = 0;
      for (float x : v) z += std::exp(static_cast<double>(x) - top);
      const double log_z = top + std::log(z);

      std::vector<std::size_t> order(v.size());
      std::iota(order.begin(), order.end(), 0);
      const std::size_t keep = std::min(slots, order.size());
      std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(),
                        [&](std::size_t a, std::size_t b) { return v[a] != v[b] ? v[a] > v[b] : a < b; });
      for (std::size_t r = 0; r < keep; ++r) {
        pool.push_back({l.hyp.score + (static_cast<double>(v[order[r]]) - log_z), h, r, ids[order[r]]});
      }
    }
    std::sort(pool.begin(), pool.end(), [](const Candidate& a, const Candidate& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.hyp != b.hyp) return a.hyp < b.hyp;
      return a.rank < b.rank;
    });
    if (pool.size() > slots) pool.resize(slots);

    std::vector<Live> next;
    for (const auto& c : pool) {
      Hypothesis h = live[c.hyp].hyp;
      h.score = c.score;
      if (c.token == kEos) {
        h.finished = true;
        finished.push_back(std::move(h));
      } else {
        h.tokens.push_back(c.token);
        next.push_back({std::move(h), live[c.hyp].state});
      }
    }
    live = std::move(next);
  }
  // Out of steps: whatever is still live counts as finished.
  for (auto& l : live) {
    if (finished.size() >= beam) break;
    finished.push_back(std::move(l.hyp));
  }

  auto rank_score = [&](const Hypothesis& h) {
    if (length_norm == 0.0) return h.score;
    const double len = static_cast<double>(h.tokens.size() + (h.finished ? 1 : 0));
    return h.score / std::pow(std::max(len, 1.0), length_norm);
  };
  std::stable_sort(finished.begin(), finished.end(),
                   [&](const Hypothesis& a, const Hypothesis& b) { return rank_score(a) > rank_score(b); });
  return finished;
}

std::vector<TokenId> translate(Executor& ex, std::span<const TokenId> source, const Shortlist* shortlist,
                               std::size_t beam, std::size_t max_len) {
  std::vector<TokenId> src(source.begin(), source.end());
  src.push_back(kEos);
  const auto ctx = ex.encoder_context(ex.encoder_forward(src));
  if (beam <= 1) return greedy_decode(ex, ex.initial_state(), ctx, shortlist, max_len);
  auto nbest = beam_search(ex, ctx, beam, shortlist, max_len);
  return nbest.front().tokens;
}

namespace {

template <typename T>
double bleu(std::span<const T> hyp, std::span<const T> ref) {
  if (ref.empty()) throw ParameterError("sentence_bleu: empty reference");
  if (hyp.empty()) return 0.0;
  double log_sum = 0;
  for (std::size_t n = 1; n <= 4; ++n) {
    std::map<std::vector<T>, std::size_t> ref_counts, hyp_counts;
    for (std::size_t i = 0; i + n <= ref.size(); ++i) ++ref_counts[std::vector<T>(ref.begin() + i, ref.begin() + i + n)];
    for (std::size_t i = 0; i + n <= hyp.size(); ++i) ++hyp_counts[std::vector<T>(hyp.begin() + i, hyp.begin() + i + n)];
    double matches = 0;
    for (const auto& [gram, count] : hyp_counts) {
      auto it = ref_counts.find(gram);
      if (it != ref_counts.end()) matches += static_cast<double>(std::min(count, it->second));
    }
    const double total = hyp.size() >= n ? static_cast<double>(hyp.size() - n + 1) : 0.0;
    double p = 0;
    if (n == 1) {
      if (matches == 0) return 0.0;
      p = matches / total;
    } else {
      p = (matches + 1) / (total + 1);
    }
    log_sum += std::log(p);
  }
  const double c = static_cast<double>(hyp.size());
  const double r = static_cast<double>(ref.size());
  const double bp = c < r ? std::exp(1.0 - r / c) : 1.0;
  return bp * std::exp(log_sum / 4.0);
}

}  // namespace

double sentence_bleu(std::span<const TokenId> hypothesis, std::span<const TokenId> reference) {
  return bleu(hypothesis, reference);
}

double sentence_bleu(std::span<const std::string> hypothesis, std::span<const std::string> reference) {
  return bleu(hypothesis, reference);
}

template <typename T>
std::pair<std::size_t, std::vector<T>> select_distill(const std::vector<std::vector<T>>& nbest,
                                                      const std::vector<T>& reference) {
  if (nbest.empty()) throw ParameterError("select_distill: empty n-best list");
  std::size_t best = 0;
  double best_score = -1;
  for (std::size_t i = 0; i < nbest.size(); ++i) {
    const double s = sentence_bleu(std::span<const T>(nbest[i]), std::span<const T>(reference));
    if (s > best_score) {
      best = i;
      best_score = s;
    }
  }
  return {best, nbest[best]};
}

template std::pair<std::size_t, std::vector<TokenId>> select_distill(const std::vector<std::vector<TokenId>>&,
                                                                     const std::vector<TokenId>&);
template std::pair<std::size_t, std::vector<std::string>> select_distill(const std::vector<std::vector<std::string>>&,
                                                                         const std::vector<std::string>&);

}  // namespace deskmt
