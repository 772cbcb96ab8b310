#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "deskmt/bench.hpp"

using namespace deskmt;

namespace {

struct BenchArgs {
  std::string model, config, vocab, input, output, shortlist, freq, force_alt, report, system = "deskmt";
  std::string precision = "float32", counters, tune_dump;
  std::size_t beam = 1, batch_words = 384;
  bool no_memoize = false;
  double price = 0.102;
  std::optional<double> quality;
  std::uint32_t seed = 1;
};

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read " + path);
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) {
    if (!l.empty() && l.back() == '\r') l.pop_back();
    lines.push_back(std::move(l));
  }
  return lines;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path);
  return out;
}

// A path to a config file, or the name of a preset. Presets take their
// vocabulary size from the vocabulary when one is given.
ModelConfig resolve_config(const std::string& source, std::optional<std::size_t> vocab_size) {
  if (std::filesystem::exists(source)) return ModelConfig::load(source);
  ModelConfig c;
  try {
    c = ModelConfig::preset(source);
  } catch (const Error&) {
    throw FormatError("config '" + source + "' is neither a readable file nor a preset");
  }
  if (vocab_size) c.vocab_size = *vocab_size;
  c.validate();
  return c;
}

int run_bench(const BenchArgs& a) {
  const Vocab vocab = Vocab::load(a.vocab);
  const ModelConfig config = resolve_config(a.config, vocab.size());
  Model model = a.model.empty() ? Model::random(config, a.seed) : Model{config, ModelParams::load(a.model)};
  model.params.check(config);

  std::optional<LexTable> lex;
  if (!a.shortlist.empty()) lex = LexTable::load(a.shortlist, a.freq, vocab);
  else if (!a.freq.empty()) throw ParameterError("--freq needs --shortlist");

  const auto lines = read_lines(a.input);

  BenchOptions opt;
  opt.system = a.system;
  opt.precision = parse_precision(a.precision);
  opt.memoize = !a.no_memoize;
  opt.beam = a.beam;
  opt.batch_words = a.batch_words;
  opt.lex = lex ? &*lex : nullptr;
  if (!a.force_alt.empty()) opt.force_alt = a.force_alt;
  opt.usd_per_hour = a.price;
  opt.quality = a.quality;

  const BenchResult r = time_translation(model, vocab, lines, opt);

  if (a.output.empty()) {
    for (const auto& t : r.translations) std::cout << t << '\n';
  } else {
    auto out = open_out(a.output);
    for (const auto& t : r.translations) out << t << '\n';
  }
  if (!a.report.empty()) emit_report(std::span(&r.run, 1), a.report);
  if (!a.counters.empty()) {
    auto out = open_out(a.counters);
    write_counters(out, r.counters);
  }
  if (!a.tune_dump.empty()) open_out(a.tune_dump) << r.tune_dump;

  const double cost = cost_effectiveness(r.run.tokens, r.run.seconds, r.run.usd_per_hour);
  std::fprintf(stderr, "%s: %llu tokens in %.3f s, %.2fM tokens/USD at %.3f USD/h\n", r.run.system.c_str(),
               static_cast<unsigned long long>(r.run.tokens), r.run.seconds, cost / 1e6, r.run.usd_per_hour);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale NMT inference benchmark"};
  app.require_subcommand(0, 1);

  BenchArgs b;
  app.add_option("--model", b.model, "Parameter file; a seeded random model if omitted");
  app.add_option("--config", b.config, "Model config file or preset name");
  app.add_option("--vocab", b.vocab, "Vocabulary, one token per line");
  app.add_option("--input", b.input, "Source sentences, one per line");
  app.add_option("--output", b.output, "Translations; stdout if omitted");
  app.add_option("--beam", b.beam, "Beam size")->capture_default_str()->check(CLI::PositiveNumber);
  app.add_option("--batch-words", b.batch_words, "Batch word budget")->capture_default_str()->check(CLI::PositiveNumber);
  app.add_option("--precision", b.precision, "float32, int16, int8 or autotune")
      ->capture_default_str()
      ->check(CLI::IsMember({"float32", "int16", "int8", "autotune"}));
  app.add_option("--shortlist", b.shortlist, "Lexical translation table");
  app.add_option("--freq", b.freq, "Target frequency list for the shortlist");
  app.add_flag("--no-memoize", b.no_memoize, "Recompute constant nodes on every forward");
  app.add_option("--force-alt", b.force_alt, "Bypass the tuner with this alternative");
  app.add_option("--price-per-hour", b.price, "Instance price in USD/h")->capture_default_str();
  app.add_option("--report", b.report, "CSV report, merged if it exists");
  app.add_option("--seed", b.seed, "Seed for the random model")->capture_default_str();
  app.add_option("--system", b.system, "System name in the report")->capture_default_str();
  app.add_option("--quality", b.quality, "Quality score for the report");
  app.add_option("--counters", b.counters, "Write kernel and memo counters as CSV");
  app.add_option("--tune-dump", b.tune_dump, "Write the tuner state");

  auto* distill = app.add_subcommand("distill", "Pick the best n-best hypothesis per sentence by sentence BLEU");
  std::string nbest, refs, distill_out;
  distill->add_option("--nbest", nbest, "Lines of 'index ||| hypothesis'")->required();
  distill->add_option("--references", refs, "One reference per sentence")->required();
  distill->add_option("--output", distill_out, "Selected hypotheses; stdout if omitted");

  auto* init = app.add_subcommand("init-model", "Write a seeded random parameter file");
  std::string init_config, init_vocab, init_out;
  std::uint32_t init_seed = 1;
  init->add_option("--config", init_config, "Model config file or preset name")->required();
  init->add_option("--vocab", init_vocab, "Vocabulary that sets the size for presets");
  init->add_option("--seed", init_seed)->capture_default_str();
  init->add_option("--out", init_out, "Parameter file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "deskmt: " << e.what() << '\n';
    return 2;
  }

  try {
    if (*distill) {
      std::ifstream n(nbest), r(refs);
      if (!n) throw FormatError("cannot read " + nbest);
      if (!r) throw FormatError("cannot read " + refs);
      const auto picked = run_distill(n, r);
      if (distill_out.empty()) {
        for (const auto& s : picked) std::cout << s << '\n';
      } else {
        auto out = open_out(distill_out);
        for (const auto& s : picked) out << s << '\n';
      }
      return 0;
    }
    if (*init) {
      std::optional<std::size_t> vs;
      if (!init_vocab.empty()) vs = Vocab::load(init_vocab).size();
      const auto config = resolve_config(init_config, vs);
      ModelParams::random(config, init_seed).save(init_out);
      const auto pc = param_count(config);
      std::fprintf(stderr, "%zu parameters, %.1f MiB\n", static_cast<std::size_t>(pc.count), pc.size_mib);
      return 0;
    }
    for (const auto& [flag, value] : {std::pair{"--config", &b.config}, {"--vocab", &b.vocab}, {"--input", &b.input}}) {
      if (value->empty()) throw ParameterError(std::string(flag) + " is required");
    }
    return run_bench(b);
  } catch (const std::exception& e) {
    std::cerr << "deskmt: error: " << e.what() << '\n';
    return 1;
  }
}
