#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "deskmt/tensor.hpp"

namespace deskmt {

// Digest of operand shapes and the ordered list of alternative ids.
class TuneKey {
 public:
  TuneKey() = default;
  explicit TuneKey(std::uint64_t digest) : digest_(digest) {}

  std::uint64_t digest() const { return digest_; }
  std::string to_string() const;

  friend bool operator==(const TuneKey&, const TuneKey&) = default;

 private:
  std::uint64_t digest_ = 0;
};

struct TuneKeyHash {
  std::size_t operator()(const TuneKey& k) const { return static_cast<std::size_t>(k.digest()); }
};

// FNV-1a over extents and ids, so keys are stable across processes.
TuneKey tune_key(std::span<const Shape> shapes, std::span<const std::string> alt_ids);

using Nanos = std::chrono::nanoseconds;

class Clock {
 public:
  virtual ~Clock() = default;
  virtual Nanos now() = 0;
};

class SteadyClock final : public Clock {
 public:
  Nanos now() override;
};

struct Measurement {
  std::string alt_id;
  Nanos total{0};
  std::size_t count = 0;
};

// Timing ledger and committed choices, shared by any number of graphs.
//
// While a key is measuring, each call runs the alternative with the fewest
// measured traversals (round robin, lowest index first). When every
// alternative has `budget` traversals the one with the smallest total time is
// committed (ties go to the earlier alternative) and never changes again.
class TunerState {
 public:
  static constexpr std::size_t kDefaultBudget = 100;

  explicit TunerState(std::shared_ptr<Clock> clock = std::make_shared<SteadyClock>(),
                      std::size_t budget = kDefaultBudget);

  // Bypass tuning: every key runs this alternative. Throws ParameterError at
  // execution time for keys that do not offer it.
  void force(std::string alt_id);
  void clear_force();
  const std::optional<std::string>& forced() const { return forced_; }

  std::size_t budget() const { return budget_; }
  Clock& clock() { return *clock_; }

  struct Ticket {
    std::size_t index;
    bool measure;
  };
  // Picks the alternative to run for this call; registers the key on first use.
  Ticket begin(const TuneKey& key, std::span<const std::string> alt_ids);
  // Adds one timed traversal. Traversals beyond the budget are discarded.
  void record(const TuneKey& key, std::size_t index, Nanos elapsed);

  std::optional<std::string> chosen(const TuneKey& key) const;
  std::vector<Measurement> measurements(const TuneKey& key) const;
  std::size_t key_count() const;

  // One line per (key, alternative): "key alt_id total_ms count chosen".
  void dump(std::ostream& os) const;

 private:
  struct Entry {
    std::vector<std::string> ids;
    mutable std::mutex mu;
    std::vector<Measurement> table;
    std::atomic<int> chosen{-1};
  };

  Entry& entry_for(const TuneKey& key, std::span<const std::string> alt_ids);
  Entry* find(const TuneKey& key) const;

  std::shared_ptr<Clock> clock_;
  std::size_t budget_;
  std::optional<std::string> forced_;
  mutable std::shared_mutex map_mu_;
  std::unordered_map<TuneKey, std::unique_ptr<Entry>, TuneKeyHash> entries_;
};

template <typename R>
struct Alternative {
  std::string id;
  std::function<R()> run;
};

// Runs one of `alternatives` according to the tuner and returns its result.
// If the alternative throws, the exception propagates and the traversal is
// not recorded.
template <typename R>
R tuned_execute(TunerState& state, const TuneKey& key, std::span<const Alternative<R>> alternatives) {
  std::vector<std::string> ids;
  ids.reserve(alternatives.size());
  for (const auto& a : alternatives) ids.push_back(a.id);
  const auto ticket = state.begin(key, ids);
  const auto& alt = alternatives[ticket.index];
  if (!ticket.measure) return alt.run();
  const Nanos start = state.clock().now();
  R result = alt.run();
  state.record(key, ticket.index, state.clock().now() - start);
  return result;
}

}  // namespace deskmt
