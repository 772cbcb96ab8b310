#include "deskmt/autotune.hpp"

#include <algorithm>
#include <cstdio>
#include <ostream>

namespace deskmt {

namespace {

constexpr std::uint64_t kFnvOffset = 1469598103934665603ULL;
constexpr std::uint64_t kFnvPrime = 1099511628211ULL;

void fnv_bytes(std::uint64_t& h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= kFnvPrime;
  }
}

void fnv_u64(std::uint64_t& h, std::uint64_t v) {
  unsigned char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>(v >> (8 * i));
  fnv_bytes(h, bytes, 8);
}

}  // namespace

std::string TuneKey::to_string() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(digest_));
  return buf;
}

TuneKey tune_key(std::span<const Shape> shapes, std::span<const std::string> alt_ids) {
  if (alt_ids.empty()) throw ParameterError("tune_key: at least one alternative is required");
  std::uint64_t h = kFnvOffset;
  // Counts are hashed first so ([a],[b,c]) and ([a,b],[c]) cannot collide trivially.
  fnv_u64(h, shapes.size());
  for (const auto& s : shapes) {
    fnv_u64(h, s.rank());
    for (auto d : s.dims()) fnv_u64(h, d);
  }
  fnv_u64(h, alt_ids.size());
  for (const auto& id : alt_ids) {
    fnv_u64(h, id.size());
    fnv_bytes(h, id.data(), id.size());
  }
  return TuneKey(h);
}

Nanos SteadyClock::now() {
  return std::chrono::duration_cast<Nanos>(std::chrono::steady_clock::now().time_since_epoch());
}

TunerState::TunerState(std::shared_ptr<Clock> clock, std::size_t budget)
    : clock_(std::move(clock)), budget_(budget) {
  if (!clock_) throw ParameterError("TunerState needs a clock");
  if (budget_ == 0) throw ParameterError("measurement budget must be positive");
}

void TunerState::force(std::string alt_id) { forced_ = std::move(alt_id); }
void TunerState::clear_force() { forced_.reset(); }

TunerState::Entry& TunerState::entry_for(const TuneKey& key, std::span<const std::string> alt_ids) {
  {
    std::shared_lock lock(map_mu_);
    auto it = entries_.find(key);
    if (it != entries_.end()) return *it->second;
  }
  std::unique_lock lock(map_mu_);
  auto& slot = entries_[key];
  if (!slot) {
    slot = std::make_unique<Entry>();
    slot->ids.assign(alt_ids.begin(), alt_ids.end());
    for (const auto& id : alt_ids) slot->table.push_back(Measurement{id, Nanos{0}, 0});
  }
  return *slot;
}

TunerState::Entry* TunerState::find(const TuneKey& key) const {
  std::shared_lock lock(map_mu_);
  auto it = entries_.find(key);
  return it == entries_.end() ? nullptr : it->second.get();
}

TunerState::Ticket TunerState::begin(const TuneKey& key, std::span<const std::string> alt_ids) {
  if (alt_ids.empty()) throw ParameterError("tuned_execute: no alternatives");
  if (forced_) {
    auto it = std::find(alt_ids.begin(), alt_ids.end(), *forced_);
    if (it == alt_ids.end()) throw ParameterError("forced alternative '" + *forced_ + "' is not offered");
    return {static_cast<std::size_t>(it - alt_ids.begin()), false};
  }
  Entry& e = entry_for(key, alt_ids);
  if (e.ids.size() != alt_ids.size() || !std::equal(e.ids.begin(), e.ids.end(), alt_ids.begin())) {
    throw ParameterError("tuned_execute: alternatives do not match key " + key.to_string());
  }
  const int chosen = e.chosen.load(std::memory_order_acquire);
  if (chosen >= 0) return {static_cast<std::size_t>(chosen), false};

  std::lock_guard lock(e.mu);
  std::size_t next = 0;
  for (std::size_t i = 1; i < e.table.size(); ++i) {
    if (e.table[i].count < e.table[next].count) next = i;
  }
  return {next, true};
}

void TunerState::record(const TuneKey& key, std::size_t index, Nanos elapsed) {
  Entry* e = find(key);
  if (e == nullptr) throw ParameterError("record: unknown key " + key.to_string());
  std::lock_guard lock(e->mu);
  if (e->chosen.load(std::memory_order_relaxed) >= 0) return;
  auto& m = e->table.at(index);
  if (m.count >= budget_) return;
  m.total += std::max(elapsed, Nanos{0});
  ++m.count;
  const bool done = std::all_of(e->table.begin(), e->table.end(),
                                [this](const Measurement& x) { return x.count >= budget_; });
  if (!done) return;
  std::size_t best = 0;
  for (std::size_t i = 1; i < e->table.size(); ++i) {
    if (e->table[i].total < e->table[best].total) best = i;
  }
  e->chosen.store(static_cast<int>(best), std::memory_order_release);
}

std::optional<std::string> TunerState::chosen(const TuneKey& key) const {
  const Entry* e = find(key);
  if (e == nullptr) return std::nullopt;
  const int c = e->chosen.load(std::memory_order_acquire);
  if (c < 0) return std::nullopt;
  return e->ids[static_cast<std::size_t>(c)];
}

std::vector<Measurement> TunerState::measurements(const TuneKey& key) const {
  const Entry* e = find(key);
  if (e == nullptr) return {};
  std::lock_guard lock(e->mu);
  return e->table;
}

std::size_t TunerState::key_count() const {
  std::shared_lock lock(map_mu_);
  return entries_.size();
}

void TunerState::dump(std::ostream& os) const {
  std::vector<std::pair<TuneKey, const Entry*>> rows;
  {
    std::shared_lock lock(map_mu_);
    for (const auto& [k, e] : entries_) rows.emplace_back(k, e.get());
  }
  std::sort(rows.begin(), rows.end(),
            [](const auto& a, const auto& b) { return a.first.digest() < b.first.digest(); });
  for (const auto& [key, e] : rows) {
    std::lock_guard lock(e->mu);
    const int c = e->chosen.load(std::memory_order_acquire);
    for (std::size_t i = 0; i < e->table.size(); ++i) {
      const auto& m = e->table[i];
      char ms[32];
      std::snprintf(ms, sizeof ms, "%.3f", std::chrono::duration<double, std::milli>(m.total).count());
      os << key.to_string() << ' ' << m.alt_id << ' ' << ms << ' ' << m.count << ' '
         << (c == static_cast<int>(i) ? "chosen" : "-") << '\n';
    }
  }
}

}  // namespace deskmt
