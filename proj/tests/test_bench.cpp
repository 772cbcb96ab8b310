#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "deskmt/bench.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace deskmt;

namespace {

bool dominated(const CostPoint& p, const std::vector<CostPoint>& all) {
  for (const auto& o : all) {
    bool better_cost = o.tokens_per_usd > p.tokens_per_usd;
    bool better_quality = o.quality.has_value() && (!p.quality || *o.quality > *p.quality);
    if (better_cost && better_quality) return true;
  }
  return false;
}

BenchRun run_of(std::string name, double seconds, std::optional<double> quality) {
  BenchRun r;
  r.system = std::move(name);
  r.size_mib = 101.4;
  r.seconds = seconds;
  r.tokens = 62954;
  r.usd_per_hour = 0.102;
  r.quality = quality;
  return r;
}

ModelConfig toy_config(std::size_t vocab, DecoderVariant v) {
  ModelConfig c;
  c.emb_dim = 16;
  c.ffn_dim = 32;
  c.enc_layers = c.dec_layers = 2;
  c.heads = 2;
  c.vocab_size = vocab;
  c.decoder_variant = v;
  return c;
}

Vocab toy_vocab() {
  std::vector<std::string> t{"</s>", "<unk>", "<pad>"};
  for (int i = 0; i < 27; ++i) t.push_back("w" + std::to_string(i));
  return Vocab(t);
}

std::vector<std::string> toy_lines(std::size_t n, std::uint32_t seed) {
  std::mt19937 rng(seed);
  std::vector<std::string> lines;
  for (std::size_t i = 0; i < n; ++i) {
    std::string l;
    const int len = 1 + static_cast<int>(rng() % 7);
    for (int k = 0; k < len; ++k) l += (k ? " " : "") + std::string("w") + std::to_string(rng() % 30);
    lines.push_back(l);
  }
  return lines;
}

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() / ("deskmt_bench_" + std::to_string(std::random_device{}()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace

TEST_CASE("cost_effectiveness examples") {
  const double cpu = cost_effectiveness(62954, 273.2, 0.102);
  const double gpu = cost_effectiveness(62954, 8.9, 3.259);
  CHECK(cpu >= 8.12e6);
  CHECK(cpu <= 8.14e6);
  CHECK(gpu >= 7.80e6);
  CHECK(gpu <= 7.83e6);
  CHECK(cost_effectiveness(0, 1.0, 1.0) == 0.0);
  CHECK(cost_effectiveness(3600, 1.0, 1.0) == doctest::Approx(3600.0 * 3600.0));

  CHECK_THROWS_AS(cost_effectiveness(10, 0.0, 1.0), ParameterError);
  CHECK_THROWS_AS(cost_effectiveness(10, -1.0, 1.0), ParameterError);
  CHECK_THROWS_AS(cost_effectiveness(10, 1.0, 0.0), ParameterError);
  CHECK_THROWS_AS(cost_effectiveness(10, 1.0, -0.5), ParameterError);
}

TEST_CASE("cost_effectiveness is linear in inverse time") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> secs(0.01, 1e4), price(0.01, 10.0);
  for (int i = 0; i < 1000; ++i) {
    const std::uint64_t tokens = rng() % 1000000;
    const double s = secs(rng), p = price(rng), s2 = secs(rng);
    CHECK(cost_effectiveness(tokens, 2 * s, p) == cost_effectiveness(tokens, s, p) / 2);
    if (tokens == 0) continue;
    const double ratio = cost_effectiveness(tokens, s, p) / cost_effectiveness(tokens, s2, p);
    CHECK(std::abs(ratio - s2 / s) <= 1e-9 * (s2 / s));
  }
}

TEST_CASE("pareto frontier examples") {
  std::vector<CostPoint> one{{5.0, 20.0}};
  CHECK(pareto_frontier(one) == std::vector<bool>{true});

  std::vector<CostPoint> two{{5.0, 20.0}, {6.0, 21.0}};
  CHECK(pareto_frontier(two) == std::vector<bool>{false, true});

  // Equal on one axis is not domination.
  std::vector<CostPoint> ties{{5.0, 20.0}, {6.0, 20.0}, {5.0, 22.0}};
  CHECK(pareto_frontier(ties) == std::vector<bool>{true, true, true});

  std::vector<CostPoint> missing{{5.0, std::nullopt}, {6.0, 1.0}, {7.0, std::nullopt}};
  CHECK(pareto_frontier(missing) == std::vector<bool>{false, true, true});
}

TEST_CASE("pareto frontier matches the pairwise dominance oracle") {
  std::mt19937 rng(17);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<CostPoint> pts(1 + rng() % 100);
    for (auto& p : pts) {
      // Small integer grids force plenty of ties.
      p.tokens_per_usd = 1 + rng() % (trial % 2 ? 10 : 1000);
      if (rng() % 10) p.quality = static_cast<double>(rng() % (trial % 2 ? 8 : 1000)) / 4;
    }
    const auto got = pareto_frontier(pts);
    REQUIRE(got.size() == pts.size());
    bool any = false;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      CHECK(got[i] == !dominated(pts[i], pts));
      any = any || got[i];
    }
    CHECK(any);
  }
}

TEST_CASE("report format") {
  std::vector<ReportRow> rows;
  rows.push_back(to_row(run_of("slow", 273.2, 26.5)));
  rows.push_back(to_row(run_of("fast", 27.3, 26.9)));
  rows.push_back(to_row(run_of("odd, name", 100.0, std::nullopt)));
  finalize_rows(rows);
  std::ostringstream out;
  write_report(out, rows);
  CHECK(out.str() ==
        "system,size_mib,time_s,tokens,beam,regime,tokens_per_usd_millions,quality,pareto\n"
        "fast,101,27.3,62954,1,float32,81.39,26.90,true\n"
        "\"odd, name\",101,100.0,62954,1,float32,22.22,,false\n"
        "slow,101,273.2,62954,1,float32,8.13,26.50,false\n");

  std::istringstream in(out.str());
  const auto back = read_report(in);
  REQUIRE(back.size() == 3);
  CHECK(back[1].system == "odd, name");
  CHECK(!back[1].quality);
  CHECK(back[0].pareto);
  CHECK(back[2].tokens == 62954);

  std::istringstream bad("system,time\n");
  CHECK_THROWS_AS(read_report(bad), FormatError);
  std::istringstream short_row("system,size_mib,time_s,tokens,beam,regime,tokens_per_usd_millions,quality,pareto\na,1\n");
  CHECK_THROWS_AS(read_report(short_row), FormatError);
}

TEST_CASE("emit_report writes, merges and rejects empty input") {
  TempDir dir;
  const std::string path = (dir.path / "report.csv").string();
  CHECK_THROWS_AS(emit_report({}, path), ParameterError);

  const BenchRun a = run_of("a", 50.0, 25.0);
  auto rows = emit_report(std::span(&a, 1), path);
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].pareto);

  // A second run that dominates the first, merged into the same file.
  const BenchRun b = run_of("b", 20.0, 26.0);
  rows = emit_report(std::span(&b, 1), path);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].system == "b");
  CHECK(rows[0].pareto);
  CHECK(!rows[1].pareto);

  std::ifstream in(path);
  const auto back = read_report(in);
  REQUIRE(back.size() == 2);
  CHECK(back[1].system == "a");
  CHECK(!back[1].pareto);

  rows = emit_report(std::span(&a, 1), path, false);
  CHECK(rows.size() == 1);
}

TEST_CASE("time_translation counts tokens and rejects empty input") {
  const auto vocab = toy_vocab();
  const auto model = Model::random(toy_config(vocab.size(), DecoderVariant::kAan), 5);
  BenchOptions opt;
  CHECK_THROWS_AS(time_translation(model, vocab, {}, opt), ParameterError);
  CHECK_THROWS_AS(time_translation(model, vocab, {"", "  "}, opt), ParameterError);

  const std::vector<std::string> lines{"w1 w2  w3", "", "unknown w4", "w5"};
  const auto r = time_translation(model, vocab, lines, opt);
  CHECK(r.run.tokens == 6);
  CHECK(r.run.seconds > 0);
  CHECK(r.translations.size() == lines.size());
  CHECK(r.counters.encoder_runs == lines.size());

  const auto wrong = Model::random(toy_config(vocab.size() + 1, DecoderVariant::kAan), 5);
  CHECK_THROWS_AS(time_translation(wrong, vocab, lines, opt), ParameterError);
}

TEST_CASE("time_translation is deterministic and independent of batching") {
  const auto vocab = toy_vocab();
  const auto lines = toy_lines(20, 8);
  for (auto v : {DecoderVariant::kAan, DecoderVariant::kSelfAttention}) {
    const auto model = Model::random(toy_config(vocab.size(), v), 11);
    BenchOptions opt;
    opt.beam = 3;
    const auto a = time_translation(model, vocab, lines, opt);
    const auto b = time_translation(model, vocab, lines, opt);
    CHECK(a.translations == b.translations);

    opt.batch_words = 1;
    CHECK(time_translation(model, vocab, lines, opt).translations == a.translations);

    // Each output is what a lone translation of that sentence produces.
    Executor ex(model);
    for (std::size_t i = 0; i < lines.size(); ++i) {
      const auto src = vocab.encode(lines[i]);
      CHECK(vocab.decode(translate(ex, src, nullptr, 3, 2 * src.size() + 10)) == a.translations[i]);
    }
  }
}

TEST_CASE("memoization leaves int16 translations unchanged and quantizes parameters once") {
  const auto vocab = toy_vocab();
  const auto lines = toy_lines(50, 21);
  for (auto v : {DecoderVariant::kAan, DecoderVariant::kSelfAttention}) {
    const auto model = Model::random(toy_config(vocab.size(), v), 2);
    BenchOptions opt;
    opt.precision = Precision::kInt16;
    const auto on = time_translation(model, vocab, lines, opt);
    opt.memoize = false;
    const auto off = time_translation(model, vocab, lines, opt);

    CHECK(on.translations == off.translations);
    CHECK(on.counters.decoder_steps == off.counters.decoder_steps);
    CHECK(on.counters.encoder_runs == 50);
    CHECK(on.counters.decoder_steps > 50);

    CHECK(on.counters.param_prep_nodes > 0);
    CHECK(on.counters.param_prep_runs == on.counters.param_prep_nodes);
    CHECK(on.counters.param_prep_max == 1);

    // Decoder parameters are quantized once per step, encoder ones once per
    // sentence.
    CHECK(off.counters.param_prep_nodes == on.counters.param_prep_nodes);
    CHECK(off.counters.param_prep_max == off.counters.decoder_steps);
    CHECK(off.counters.param_prep_runs >= off.counters.param_prep_nodes * off.counters.encoder_runs);
    CHECK(off.counters.param_prep_runs <= off.counters.param_prep_nodes * off.counters.decoder_steps);

    // Instrumentation does not change the products that are computed.
    CHECK(on.counters.kernels.macs(Op::kGemmI16) == off.counters.kernels.macs(Op::kGemmI16));
  }
}

TEST_CASE("shortlisted runs stay inside the shortlist") {
  const auto vocab = toy_vocab();
  const auto lines = toy_lines(12, 4);
  LexTable lex;
  for (TokenId s = 3; s < vocab.size(); ++s) lex.add(s, 3 + (s * 7) % 27, 0.9F);
  for (TokenId t = 3; t < 8; ++t) lex.set_frequency(t, 100 - t);
  const auto model = Model::random(toy_config(vocab.size(), DecoderVariant::kSelfAttention), 6);
  BenchOptions opt;
  opt.lex = &lex;
  const auto r = time_translation(model, vocab, lines, opt);
  CHECK(r.run.shortlist);

  std::vector<std::vector<TokenId>> sentences;
  for (const auto& l : lines) sentences.push_back(vocab.encode(l));
  for (const auto& batch : make_batches(sentences, opt.batch_words)) {
    const auto sl = build_shortlist(batch, lex, vocab);
    for (auto idx : batch.indices) {
      for (auto id : vocab.encode(r.translations[idx])) CHECK(std::binary_search(sl.begin(), sl.end(), id));
    }
  }
}

TEST_CASE("run_distill") {
  {
    std::istringstream nbest("0 ||| only one\n"), refs("something else\n");
    CHECK(run_distill(nbest, refs) == std::vector<std::string>{"only one"});
  }
  {
    std::istringstream nbest("0 ||| a b c\n0 ||| the cat sat\n0 ||| x\n1 ||| q r\n1 ||| p q r s\n"),
        refs("the cat sat\np q r s\n");
    CHECK(run_distill(nbest, refs) == std::vector<std::string>{"the cat sat", "p q r s"});
  }
  auto fails = [](const std::string& n, const std::string& r) {
    std::istringstream nbest(n), refs(r);
    CHECK_THROWS_AS(run_distill(nbest, refs), FormatError);
  };
  fails("0 ||| a\n2 ||| b\n", "a\nb\nc\n");
  fails("0 ||| a\n", "a\nb\n");
  fails("0 ||| a\n1 ||| b\n", "a\n");
  fails("0 ||| a\n1 ||| b\n0 ||| c\n", "a\nb\n");
  fails("zero ||| a\n", "a\n");
  fails("0 a\n", "a\n");
  fails("0 ||| a\n", "\n");

  std::mt19937 rng(31);
  const std::vector<std::string> words{"a", "b", "c", "d", "e", "f"};
  for (int trial = 0; trial < 20; ++trial) {
    std::ostringstream n, r;
    std::vector<std::string> want;
    for (int s = 0; s < 10; ++s) {
      std::vector<std::string> ref(2 + rng() % 8);
      for (auto& w : ref) w = words[rng() % 6];
      std::vector<std::vector<std::string>> hyps;
      for (int i = 0; i < 8; ++i) {
        auto h = ref;
        for (auto& w : h) {
          if (rng() % 3 == 0) w = words[rng() % 6];
        }
        if (rng() % 2) h.resize(rng() % (h.size() + 1));
        hyps.push_back(h);
      }
      std::size_t best = 0;
      for (std::size_t i = 1; i < hyps.size(); ++i) {
        if (oracle::sentence_bleu(hyps[i], ref) > oracle::sentence_bleu(hyps[best], ref)) best = i;
      }
      auto join = [](const std::vector<std::string>& v) {
        std::string out;
        for (std::size_t i = 0; i < v.size(); ++i) out += (i ? " " : "") + v[i];
        return out;
      };
      for (const auto& h : hyps) n << s << " ||| " << join(h) << '\n';
      r << join(ref) << '\n';
      want.push_back(join(hyps[best]));
    }
    std::istringstream nin(n.str()), rin(r.str());
    CHECK(run_distill(nin, rin) == want);
  }
}
