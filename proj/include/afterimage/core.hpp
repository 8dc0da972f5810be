#pragma once

// One simulated physical core: the IP-stride prefetcher, its TLB gate and the cache,
// plus a cycle clock and the context-switch flush policy. Everything is a value, so a
// Core can be copied to fork an experiment.

#include <afterimage/cache.hpp>
#include <afterimage/prefetcher.hpp>

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <unordered_set>

namespace afterimage {

struct FlushPolicy {
  enum class Kind { none, on_switch, periodic };

  Kind kind = Kind::none;
  std::uint64_t period_cycles = 0;
  std::uint64_t write_ports = 1;

  static FlushPolicy none() { return {}; }
  static FlushPolicy on_switch(std::uint64_t ports = 1) { return {Kind::on_switch, 0, ports}; }
  static FlushPolicy periodic(std::uint64_t cycles, std::uint64_t ports = 1) {
    if (cycles == 0) throw std::invalid_argument("flush period must be positive");
    return {Kind::periodic, cycles, ports};
  }
};

struct CoreStats {
  std::uint64_t demand_loads = 0;
  std::uint64_t demand_misses = 0;
  std::uint64_t prefetches_issued = 0;
  std::uint64_t useful_prefetches = 0;
  std::uint64_t cross_domain_triggers = 0;
  std::uint64_t domain_switches = 0;
  std::uint64_t resets = 0;
  std::uint64_t reset_cycles = 0;
};

struct LoadOutcome {
  std::uint32_t latency = 0;
  std::optional<PrefetchRequest> prefetch;
};

inline constexpr int kNoDomain = -1;

class Core {
 public:
  explicit Core(CacheConfig cache = {}, std::size_t tlb_capacity = 64)
      : tlb_(tlb_capacity), cache_(cache) {
    tag_owner_.fill(kNoDomain);
  }

  PrefetchTable& prefetcher() { return table_; }
  const PrefetchTable& prefetcher() const { return table_; }
  Tlb& tlb() { return tlb_; }
  Cache& cache() { return cache_; }
  const Cache& cache() const { return cache_; }
  const CoreStats& stats() const { return stats_; }
  std::uint64_t now() const { return clock_; }
  int domain() const { return domain_; }
  const FlushPolicy& flush_policy() const { return policy_; }

  void set_flush_policy(FlushPolicy policy) {
    if (policy.write_ports == 0) throw std::invalid_argument("write_ports must be at least 1");
    const bool same_period = policy.kind == policy_.kind && policy.period_cycles == policy_.period_cycles;
    policy_ = policy;
    if (!same_period) next_periodic_flush_ = clock_ + policy.period_cycles;
  }
  void set_prefetcher_enabled(bool on) { prefetcher_enabled_ = on; }
  // Emulates the adjacent-line prefetchers: every demand load also pulls in its
  // neighbours within the same page.
  void set_next_line_noise(bool on) { next_line_noise_ = on; }

  // A retired demand load: trains the IP-stride prefetcher, then accesses the cache and
  // installs whatever the prefetcher asked for.
  LoadOutcome load(Address ip, Address paddr) {
    LoadOutcome out;
    if (prefetcher_enabled_) {
      const int previous_owner = tag_owner_[ip.ip_tag()];
      out.prefetch = observe_load(table_, tlb_, ip, paddr, clock_);
      tag_owner_[ip.ip_tag()] = domain_;
      if (out.prefetch && previous_owner != kNoDomain && previous_owner != domain_) {
        ++stats_.cross_domain_triggers;
      }
    }

    out.latency = cache_.access(paddr);
    const std::uint64_t line = paddr.line_index();
    ++stats_.demand_loads;
    if (!cache_.config().is_hit(out.latency)) {
      ++stats_.demand_misses;
      pending_prefetches_.erase(line);
    } else if (pending_prefetches_.erase(line) != 0) {
      ++stats_.useful_prefetches;
    }

    if (next_line_noise_) {
      if (paddr.line_in_page() > 0) cache_.install(paddr + -static_cast<std::int64_t>(kLineSize));
      if (paddr.line_in_page() + 1 < kLinesPerPage) cache_.install(paddr + static_cast<std::int64_t>(kLineSize));
    }

    if (out.prefetch) {
      ++stats_.prefetches_issued;
      if (!cache_.contains(out.prefetch->target)) pending_prefetches_.insert(out.prefetch->target.line_index());
      cache_.install_prefetch(*out.prefetch);
    }
    return out;
  }

  // Timed access by measurement code. Never trains the prefetcher.
  std::uint32_t probe(Address paddr) { return cache_.access(paddr); }

  void flush(Address paddr) { cache_.flush_line(paddr); }

  void switch_domain(int domain) {
    if (domain == domain_) return;
    const bool had_domain = domain_ != kNoDomain;
    domain_ = domain;
    if (!had_domain) return;
    ++stats_.domain_switches;
    if (policy_.kind == FlushPolicy::Kind::on_switch) clear_prefetcher();
  }

  void advance(std::uint64_t cycles) {
    clock_ += cycles;
    if (policy_.kind != FlushPolicy::Kind::periodic) return;
    while (clock_ >= next_periodic_flush_) {
      next_periodic_flush_ += policy_.period_cycles;
      clear_prefetcher();
    }
  }

  // clear-ip-prefetcher. The reset stalls the core for its cycle cost.
  std::uint64_t clear_prefetcher() {
    const std::uint64_t cycles = table_.reset(policy_.write_ports);
    tag_owner_.fill(kNoDomain);
    ++stats_.resets;
    stats_.reset_cycles += cycles;
    clock_ += cycles;
    return cycles;
  }

 private:
  PrefetchTable table_;
  Tlb tlb_;
  Cache cache_;
  FlushPolicy policy_;
  CoreStats stats_;
  std::uint64_t clock_ = 0;
  std::uint64_t next_periodic_flush_ = 0;
  int domain_ = kNoDomain;
  bool prefetcher_enabled_ = true;
  bool next_line_noise_ = false;
  std::array<int, 256> tag_owner_{};
  std::unordered_set<std::uint64_t> pending_prefetches_;
};

}  // namespace afterimage
