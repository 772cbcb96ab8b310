#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "deskmt/decode.hpp"
#include "deskmt/model.hpp"

namespace deskmt {

struct BenchRun {
  std::string system;
  double size_mib = 0;
  Precision regime = Precision::kFloat32;
  std::size_t beam = 1;
  std::size_t batch_words = 384;
  bool shortlist = false;
  double seconds = 0;  // decoding only
  std::uint64_t tokens = 0;
  double usd_per_hour = 1.0;
  std::optional<double> quality;
};

// Source tokens translated per US dollar of instance time.
double cost_effectiveness(std::uint64_t tokens, double seconds, double usd_per_hour);

// A point is on the frontier unless some other point is strictly better on
// both axes. Missing quality ranks below every present value.
struct CostPoint {
  double tokens_per_usd = 0;
  std::optional<double> quality;
};
std::vector<bool> pareto_frontier(std::span<const CostPoint> points);

struct ReportRow {
  std::string system;
  double size_mib = 0;
  double time_s = 0;
  std::uint64_t tokens = 0;
  std::size_t beam = 1;
  std::string regime;
  double tokens_per_usd_millions = 0;
  std::optional<double> quality;
  bool pareto = false;
};

ReportRow to_row(const BenchRun& run);
// Recomputes the frontier and sorts by descending cost-effectiveness.
void finalize_rows(std::vector<ReportRow>& rows);
void write_report(std::ostream& out, const std::vector<ReportRow>& rows);
std::vector<ReportRow> read_report(std::istream& in);

// Writes the CSV report for `runs`, merged with the rows already in `path`
// when `merge` is set and the file exists.
std::vector<ReportRow> emit_report(std::span<const BenchRun> runs, const std::string& path, bool merge = true);

struct BenchOptions {
  std::string system = "deskmt";
  Precision precision = Precision::kFloat32;
  bool memoize = true;
  std::size_t beam = 1;
  std::size_t batch_words = 384;
  const LexTable* lex = nullptr;  // shortlist source; full vocabulary if null
  std::optional<std::string> force_alt;
  double usd_per_hour = 1.0;
  std::optional<double> quality;
};

struct BenchCounters {
  std::uint64_t encoder_runs = 0;
  std::uint64_t decoder_steps = 0;
  std::uint64_t param_prep_nodes = 0;  // memoizable parameter quantizations
  std::uint64_t param_prep_runs = 0;   // times those nodes were evaluated
  std::uint64_t param_prep_max = 0;    // largest count for a single node
  KernelCounters kernels;
};

struct BenchResult {
  BenchRun run;
  std::vector<std::string> translations;  // original input order
  BenchCounters counters;
  std::string tune_dump;
};

// Decodes every line of `lines`; the clock starts after inputs are tokenized
// and stops when the last batch is done.
BenchResult time_translation(const Model& model, const Vocab& vocab, const std::vector<std::string>& lines,
                             const BenchOptions& options);

void write_counters(std::ostream& out, const BenchCounters& counters);

// "index ||| hypothesis" lines grouped by sentence, one reference line per
// sentence. Returns the winning hypothesis text per sentence.
std::vector<std::string> run_distill(std::istream& nbest, std::istream& references);

}  // namespace deskmt
