#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "deskmt/model.hpp"

namespace deskmt {

inline constexpr TokenId kEos = 0;
inline constexpr TokenId kUnk = 1;
inline constexpr TokenId kPad = 2;

// One token per line; lines 0, 1 and 2 are EOS, UNK and PAD.
class Vocab {
 public:
  explicit Vocab(std::vector<std::string> tokens);
  static Vocab read(std::istream& in);
  static Vocab load(const std::string& path);

  std::size_t size() const { return tokens_.size(); }
  // Unknown tokens map to UNK.
  TokenId lookup(std::string_view token) const;
  bool contains(std::string_view token) const;
  const std::string& token(TokenId id) const;

  std::vector<TokenId> encode(std::string_view line) const;
  std::string decode(std::span<const TokenId> ids) const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
};

// Whitespace-separated tokens of one line.
std::vector<std::string> split_tokens(std::string_view line);

struct Translation {
  TokenId target;
  float prob;
};

class LexTable {
 public:
  void add(TokenId source, TokenId target, float prob);
  void set_frequency(TokenId target, std::uint64_t count);

  // "source<TAB>target<TAB>prob" lines and "token<TAB>count" lines. Tokens
  // outside the vocabulary are skipped.
  static LexTable read(std::istream& lex, std::istream* freq, const Vocab& vocab);
  static LexTable load(const std::string& lex_path, const std::string& freq_path, const Vocab& vocab);

  // Descending probability, ties by ascending id.
  std::span<const Translation> translations(TokenId source) const;
  // Top n of ids [0, vocab_size) by descending count, ties by ascending id.
  // Ids missing from the frequency list count as zero.
  std::vector<TokenId> most_frequent(std::size_t n, std::size_t vocab_size) const;

 private:
  std::unordered_map<TokenId, std::vector<Translation>> table_;
  std::unordered_map<TokenId, std::uint64_t> freq_;
};

using Shortlist = std::vector<TokenId>;

struct Batch {
  std::vector<std::size_t> indices;  // positions in the original input
  std::vector<std::vector<TokenId>> sentences;
  std::size_t words = 0;
};

// Stable sort by length, then greedy fill up to `word_budget` words. A sentence
// longer than the budget gets a batch of its own.
std::vector<Batch> make_batches(const std::vector<std::vector<TokenId>>& sentences, std::size_t word_budget);

// Union of the most frequent targets and the best translations of every
// distinct source token in the batch, plus EOS and UNK; sorted ascending.
Shortlist build_shortlist(const Batch& batch, const LexTable& lex, const Vocab& vocab, std::size_t top_frequent = 100,
                          std::size_t top_translations = 100);

struct Hypothesis {
  std::vector<TokenId> tokens;  // without the final EOS
  double score = 0;             // cumulative log-probability
  bool finished = false;        // ended with EOS rather than at max_len
};

// Argmax over raw logits each step, never computing softmax. Stops at EOS or
// after max_len tokens. PAD is never produced.
std::vector<TokenId> greedy_decode(Executor& ex, DecoderState state, const EncoderContext& ctx,
                                   const Shortlist* shortlist, std::size_t max_len);

// Hypotheses that reach EOS leave the beam, which then shrinks accordingly.
// Final ranking divides the score by length^length_norm, where length counts
// the EOS of finished hypotheses; 0 ranks by raw score.
std::vector<Hypothesis> beam_search(Executor& ex, const EncoderContext& ctx, std::size_t beam,
                                    const Shortlist* shortlist, std::size_t max_len, double length_norm = 0.0);

// Appends EOS to the source, encodes, and decodes with greedy or beam search.
std::vector<TokenId> translate(Executor& ex, std::span<const TokenId> source, const Shortlist* shortlist,
                               std::size_t beam, std::size_t max_len);

// Orders 1..4, add-one smoothing from bigrams up, brevity penalty.
double sentence_bleu(std::span<const TokenId> hypothesis, std::span<const TokenId> reference);
double sentence_bleu(std::span<const std::string> hypothesis, std::span<const std::string> reference);

// Highest sentence BLEU against the reference; lowest index on ties.
template <typename T>
std::pair<std::size_t, std::vector<T>> select_distill(const std::vector<std::vector<T>>& nbest,
                                                      const std::vector<T>& reference);

}  // namespace deskmt
