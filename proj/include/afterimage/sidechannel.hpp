#pragma once

// Observation channels: Prime+Probe over minimal eviction sets, Flush+Reload over a
// shared page, and the prefetcher-status probe that re-runs trained IPs.

#include <afterimage/cache.hpp>
#include <afterimage/core.hpp>

#include <algorithm>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

namespace afterimage {

enum class Phase { prime, probe, reload };

inline const char* to_string(Phase p) {
  switch (p) {
    case Phase::prime: return "prime";
    case Phase::probe: return "probe";
    case Phase::reload: return "reload";
  }
  return "?";
}

struct TimingVector {
  Phase phase = Phase::prime;
  std::vector<std::uint32_t> latency;  // one per observed target
};

// An eviction set traversed as a linked list: `next[i]` is the member visited after
// member i. The links form one random cycle so the walk has no constant stride.
struct ChasedEvictionSet {
  MinimalEvictionSet mes;
  std::vector<std::size_t> next;
  std::size_t head = 0;

  static ChasedEvictionSet link(MinimalEvictionSet mes, std::mt19937_64& rng) {
    std::vector<std::size_t> order(mes.members.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    ChasedEvictionSet c{std::move(mes), std::vector<std::size_t>(order.size()), order.empty() ? 0 : order.front()};
    for (std::size_t i = 0; i < order.size(); ++i) c.next[order[i]] = order[(i + 1) % order.size()];
    return c;
  }

  // Slowest member access over one full walk.
  std::uint32_t walk(Cache& cache) const {
    std::uint32_t worst = 0;
    std::size_t at = head;
    for (std::size_t n = 0; n < mes.members.size(); ++n) {
      worst = std::max(worst, cache.access(mes.members[at]));
      at = next[at];
    }
    return worst;
  }
};

// Fills every set with the attacker's lines and records the settled walk time.
inline TimingVector prime(Cache& cache, std::span<const ChasedEvictionSet> sets) {
  TimingVector tv{Phase::prime, {}};
  tv.latency.reserve(sets.size());
  for (const auto& s : sets) {
    s.walk(cache);
    tv.latency.push_back(s.walk(cache));
  }
  return tv;
}

struct EvictionMap {
  TimingVector timings{Phase::probe, {}};
  std::vector<std::int64_t> delta;  // prime_time - probe_time, negative when the probe slowed down
  std::vector<bool> evicted;

  std::vector<unsigned> evicted_indices() const {
    std::vector<unsigned> out;
    for (std::size_t i = 0; i < evicted.size(); ++i) {
      if (evicted[i]) out.push_back(static_cast<unsigned>(i));
    }
    return out;
  }
};

inline EvictionMap probe(Cache& cache, std::span<const ChasedEvictionSet> sets, const TimingVector& baseline) {
  if (baseline.latency.size() != sets.size()) throw std::invalid_argument("baseline does not match the eviction sets");
  EvictionMap map;
  const auto threshold = static_cast<std::int64_t>(cache.config().threshold);
  for (std::size_t i = 0; i < sets.size(); ++i) {
    const std::uint32_t t = sets[i].walk(cache);
    const std::int64_t d = static_cast<std::int64_t>(baseline.latency[i]) - static_cast<std::int64_t>(t);
    map.timings.latency.push_back(t);
    map.delta.push_back(d);
    map.evicted.push_back(d > threshold || -d > threshold);
  }
  return map;
}

// One eviction set per line of the page at `page`, drawn from attacker memory
// starting at `pool_frame`.
inline std::vector<ChasedEvictionSet> eviction_sets_for_page(const CacheConfig& config, Address page,
                                                             std::uint64_t pool_frame, std::mt19937_64& rng) {
  std::vector<ChasedEvictionSet> out;
  const std::size_t pool_size = std::size_t{config.associativity} * config.slices * 8;
  for (std::uint64_t l = 0; l < kLinesPerPage; ++l) {
    const Address line = page.page_base() + static_cast<std::int64_t>(l * kLineSize);
    const auto set = set_of(line, config);
    const auto pool = eviction_candidates(config, set, pool_frame, pool_size);
    out.push_back(ChasedEvictionSet::link(build_eviction_set(config, set, slice_of(line, config), pool), rng));
  }
  return out;
}

struct ReloadOptions {
  bool shuffle = true;
  // When set, reload loads retire through the prefetcher with this IP instead of
  // being timed on the side. Only useful to show why the shuffle matters.
  std::optional<Address> training_ip;
};

struct ReloadResult {
  TimingVector timings{Phase::reload, {}};  // indexed by line in page
  std::vector<unsigned> order;
  std::vector<unsigned> cached_lines;  // sorted
};

// Reloads all 64 lines of the page in a seeded Fisher-Yates order and reports the ones
// that came back faster than the threshold. All 64 lines are resident afterwards.
inline ReloadResult flush_reload(Core& core, Address page, std::mt19937_64& rng, ReloadOptions options = {}) {
  ReloadResult r;
  r.order.resize(kLinesPerPage);
  std::iota(r.order.begin(), r.order.end(), 0u);
  if (options.shuffle) std::shuffle(r.order.begin(), r.order.end(), rng);
  r.timings.latency.assign(kLinesPerPage, 0);
  for (const unsigned l : r.order) {
    const Address a = page.page_base() + static_cast<std::int64_t>(l * kLineSize);
    r.timings.latency[l] = options.training_ip ? core.load(*options.training_ip, a).latency : core.probe(a);
  }
  for (unsigned l = 0; l < kLinesPerPage; ++l) {
    if (core.cache().config().is_hit(r.timings.latency[l])) r.cached_lines.push_back(l);
  }
  return r;
}

struct StrideDetection {
  std::vector<int> candidates;           // lines
  std::vector<std::size_t> support;      // supporting pair count per candidate
  std::optional<int> detected;           // best candidate by support, then smallest stride
  bool ambiguous = false;                // more than one candidate had support
  std::vector<std::pair<unsigned, unsigned>> supporting_pairs;  // for the detected stride
};

inline void check_candidates(std::span<const int> candidates) {
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (candidates[i] <= 4) {
      throw std::invalid_argument("candidate stride " + std::to_string(candidates[i]) +
                                  " is not greater than four lines");
    }
    for (std::size_t j = 0; j < i; ++j) {
      if (candidates[i] == candidates[j]) throw std::invalid_argument("candidate strides must be distinct");
    }
  }
}

// `observed` holds line indices (line / 64 is the page). A candidate is supported by
// every observed pair (a, a + stride) inside one page.
inline StrideDetection detect_stride(std::span<const unsigned> observed, std::span<const int> candidates) {
  check_candidates(candidates);
  const std::set<unsigned> seen(observed.begin(), observed.end());
  StrideDetection d;
  d.candidates.assign(candidates.begin(), candidates.end());
  std::size_t with_support = 0;
  for (const int c : candidates) {
    std::size_t n = 0;
    for (const unsigned a : seen) {
      const unsigned b = a + static_cast<unsigned>(c);
      if (b / kLinesPerPage == a / kLinesPerPage && seen.count(b)) ++n;
    }
    d.support.push_back(n);
    if (n == 0) continue;
    ++with_support;
    if (!d.detected) {
      d.detected = c;
      continue;
    }
    const std::size_t best = d.support[static_cast<std::size_t>(
        std::find(candidates.begin(), candidates.end(), *d.detected) - candidates.begin())];
    if (n > best || (n == best && c < *d.detected)) d.detected = c;
  }
  d.ambiguous = with_support > 1;
  if (d.detected) {
    for (const unsigned a : seen) {
      const unsigned b = a + static_cast<unsigned>(*d.detected);
      if (b / kLinesPerPage == a / kLinesPerPage && seen.count(b)) d.supporting_pairs.emplace_back(a, b);
    }
  }
  return d;
}

struct TrainedProbe {
  Address ip{};
  Address next{};  // physical address the trained stream expects next
  std::int32_t stride = 0;
};

// Re-executes each trained IP once at its expected next address and times the single
// line next + stride. true = the entry still triggers.
inline std::vector<bool> prefetcher_status_probe(Core& core, std::span<const TrainedProbe> probes,
                                                 const std::function<void(Address)>& before_timing = {}) {
  std::vector<bool> triggers;
  for (const auto& p : probes) {
    const Address target = p.next + p.stride;
    core.flush(target);
    core.load(p.ip, p.next);
    if (before_timing) before_timing(target);
    triggers.push_back(core.cache().config().is_hit(core.probe(target)));
  }
  return triggers;
}

}  // namespace afterimage
