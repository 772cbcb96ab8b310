#include "deskmt/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

namespace deskmt {

double cost_effectiveness(std::uint64_t tokens, double seconds, double usd_per_hour) {
  if (!(seconds > 0)) throw ParameterError("elapsed seconds must be positive");
  if (!(usd_per_hour > 0)) throw ParameterError("instance price must be positive");
  return static_cast<double>(tokens) / seconds * 3600.0 / usd_per_hour;
}

std::vector<bool> pareto_frontier(std::span<const CostPoint> points) {
  constexpr double kMissing = -std::numeric_limits<double>::infinity();
  std::vector<bool> out(points.size(), true);
  for (std::size_t i = 0; i < points.size(); ++i) {
    const double qi = points[i].quality.value_or(kMissing);
    for (std::size_t j = 0; j < points.size() && out[i]; ++j) {
      if (points[j].tokens_per_usd > points[i].tokens_per_usd && points[j].quality.value_or(kMissing) > qi) out[i] = false;
    }
  }
  return out;
}

ReportRow to_row(const BenchRun& run) {
  ReportRow r;
  r.system = run.system;
  r.size_mib = run.size_mib;
  r.time_s = run.seconds;
  r.tokens = run.tokens;
  r.beam = run.beam;
  r.regime = precision_name(run.regime);
  r.tokens_per_usd_millions = cost_effectiveness(run.tokens, run.seconds, run.usd_per_hour) / 1e6;
  r.quality = run.quality;
  return r;
}

void finalize_rows(std::vector<ReportRow>& rows) {
  std::vector<CostPoint> points;
  for (const auto& r : rows) points.push_back({r.tokens_per_usd_millions, r.quality});
  const auto frontier = pareto_frontier(points);
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i].pareto = frontier[i];
  std::stable_sort(rows.begin(), rows.end(), [](const ReportRow& a, const ReportRow& b) {
    return a.tokens_per_usd_millions > b.tokens_per_usd_millions;
  });
}

namespace {

constexpr const char* kHeader = "system,size_mib,time_s,tokens,beam,regime,tokens_per_usd_millions,quality,pareto";

std::string fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        out.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        out.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.emplace_back();
    } else {
      out.back() += c;
    }
  }
  return out;
}

std::string quote(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

double to_double(const std::string& s, int lineno) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw FormatError("report line " + std::to_string(lineno) + ": bad number '" + s + "'");
}

}  // namespace

void write_report(std::ostream& out, const std::vector<ReportRow>& rows) {
  out << kHeader << '\n';
  for (const auto& r : rows) {
    out << quote(r.system) << ',' << fixed(r.size_mib, 0) << ',' << fixed(r.time_s, 1) << ',' << r.tokens << ','
        << r.beam << ',' << r.regime << ',' << fixed(r.tokens_per_usd_millions, 2) << ','
        << (r.quality ? fixed(*r.quality, 2) : std::string()) << ',' << (r.pareto ? "true" : "false") << '\n';
  }
}

std::vector<ReportRow> read_report(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) return {};
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kHeader) throw FormatError("report header does not match");
  std::vector<ReportRow> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto f = split_csv(line);
    if (f.size() != 9) throw FormatError("report line " + std::to_string(lineno) + ": expected 9 fields");
    ReportRow r;
    r.system = f[0];
    r.size_mib = to_double(f[1], lineno);
    r.time_s = to_double(f[2], lineno);
    r.tokens = static_cast<std::uint64_t>(to_double(f[3], lineno));
    r.beam = static_cast<std::size_t>(to_double(f[4], lineno));
    r.regime = f[5];
    r.tokens_per_usd_millions = to_double(f[6], lineno);
    if (!f[7].empty()) r.quality = to_double(f[7], lineno);
    r.pareto = f[8] == "true";
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<ReportRow> emit_report(std::span<const BenchRun> runs, const std::string& path, bool merge) {
  if (runs.empty()) throw ParameterError("report needs at least one run");
  std::vector<ReportRow> rows;
  if (merge && std::filesystem::exists(path)) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot read report " + path);
    rows = read_report(in);
  }
  for (const auto& r : runs) rows.push_back(to_row(r));
  finalize_rows(rows);
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write report " + path);
  write_report(out, rows);
  return rows;
}

namespace {

BenchCounters collect(const Executor& ex) {
  BenchCounters c;
  c.encoder_runs = ex.encoder_runs();
  c.decoder_steps = ex.decoder_steps();
  c.kernels = ex.graph().counters();
  const Graph& g = ex.graph();
  for (NodeId id = 0; id < g.size(); ++id) {
    const Node& n = g.node(id);
    if (!n.is_constant || (n.op != Op::kQuantizeI16 && n.op != Op::kQuantizeI8)) continue;
    if (n.invocations == 0) continue;
    ++c.param_prep_nodes;
    c.param_prep_runs += n.invocations;
    c.param_prep_max = std::max(c.param_prep_max, n.invocations);
  }
  return c;
}

}  // namespace

BenchResult time_translation(const Model& model, const Vocab& vocab, const std::vector<std::string>& lines,
                             const BenchOptions& options) {
  if (vocab.size() != model.config.vocab_size) {
    throw ParameterError("vocabulary has " + std::to_string(vocab.size()) + " entries but the model expects " +
                         std::to_string(model.config.vocab_size));
  }
  std::vector<std::vector<TokenId>> sentences;
  std::uint64_t tokens = 0;
  for (const auto& l : lines) {
    sentences.push_back(vocab.encode(l));
    tokens += sentences.back().size();
  }
  if (tokens == 0) throw ParameterError("input has no tokens");

  TunerState tuner;
  if (options.force_alt) tuner.force(*options.force_alt);
  Executor ex(model, ExecOptions{options.precision, options.memoize, &tuner, {}});

  BenchResult result;
  result.translations.resize(sentences.size());
  const auto start = std::chrono::steady_clock::now();
  for (const auto& batch : make_batches(sentences, options.batch_words)) {
    Shortlist sl;
    if (options.lex != nullptr) sl = build_shortlist(batch, *options.lex, vocab);
    for (std::size_t i = 0; i < batch.sentences.size(); ++i) {
      const auto& src = batch.sentences[i];
      const auto out = translate(ex, src, options.lex ? &sl : nullptr, options.beam, 2 * src.size() + 10);
      result.translations[batch.indices[i]] = vocab.decode(out);
    }
  }
  const std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - start;

  BenchRun& run = result.run;
  run.system = options.system;
  run.size_mib = param_count(model.config).size_mib;
  run.regime = options.precision;
  run.beam = options.beam;
  run.batch_words = options.batch_words;
  run.shortlist = options.lex != nullptr;
  run.seconds = std::max(elapsed.count(), 1e-9);
  run.tokens = tokens;
  run.usd_per_hour = options.usd_per_hour;
  run.quality = options.quality;
  result.counters = collect(ex);
  std::ostringstream dump;
  tuner.dump(dump);
  result.tune_dump = dump.str();
  return result;
}

void write_counters(std::ostream& out, const BenchCounters& c) {
  out << "counter,value\n";
  out << "encoder_runs," << c.encoder_runs << '\n';
  out << "decoder_steps," << c.decoder_steps << '\n';
  out << "param_prep_nodes," << c.param_prep_nodes << '\n';
  out << "param_prep_runs," << c.param_prep_runs << '\n';
  out << "param_prep_max," << c.param_prep_max << '\n';
  for (std::size_t i = 0; i < kOpCount; ++i) {
    const auto op = static_cast<Op>(i);
    if (c.kernels.calls(op) == 0) continue;
    out << "calls." << op_name(op) << ',' << c.kernels.calls(op) << '\n';
    out << "work." << op_name(op) << ',' << c.kernels.macs(op) << '\n';
  }
}

std::vector<std::string> run_distill(std::istream& nbest, std::istream& references) {
  std::vector<std::vector<std::string>> refs;
  std::string line;
  while (std::getline(references, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    refs.push_back(split_tokens(line));
  }

  std::vector<std::vector<std::vector<std::string>>> groups(refs.size());
  std::vector<std::vector<std::string>> texts(refs.size());
  long current = -1;
  int lineno = 0;
  while (std::getline(nbest, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto sep = line.find("|||");
    if (sep == std::string::npos) throw FormatError("n-best line " + std::to_string(lineno) + ": missing '|||'");
    long index = -1;
    try {
      std::size_t used = 0;
      const std::string head = line.substr(0, sep);
      index = std::stol(head, &used);
      if (head.find_first_not_of(" \t", used) != std::string::npos) index = -1;
    } catch (const std::exception&) {
      index = -1;
    }
    if (index < 0) throw FormatError("n-best line " + std::to_string(lineno) + ": bad sentence index");
    if (index != current && index != current + 1) {
      throw FormatError("n-best line " + std::to_string(lineno) + ": sentence index " + std::to_string(index) +
                        " out of sequence");
    }
    if (static_cast<std::size_t>(index) >= refs.size()) {
      throw FormatError("n-best index " + std::to_string(index) + " has no reference line");
    }
    current = index;
    std::string text = line.substr(sep + 3);
    auto toks = split_tokens(text);
    std::string joined;
    for (std::size_t i = 0; i < toks.size(); ++i) joined += (i ? " " : "") + toks[i];
    groups[static_cast<std::size_t>(index)].push_back(std::move(toks));
    texts[static_cast<std::size_t>(index)].push_back(std::move(joined));
  }
  if (static_cast<std::size_t>(current + 1) != refs.size()) {
    throw FormatError("n-best covers " + std::to_string(current + 1) + " sentences but there are " +
                      std::to_string(refs.size()) + " references");
  }

  std::vector<std::string> out;
  for (std::size_t s = 0; s < refs.size(); ++s) {
    if (refs[s].empty()) throw FormatError("empty reference for sentence " + std::to_string(s));
    out.push_back(texts[s][select_distill(groups[s], refs[s]).first]);
  }
  return out;
}

}  // namespace deskmt
