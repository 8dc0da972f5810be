#pragma once

// A single sliced, set-associative cache level with true LRU per set. It stands in
// for the whole hierarchy: a line is either resident (hit latency) or not.

#include <afterimage/address.hpp>
#include <afterimage/prefetcher.hpp>

#include <algorithm>
#include <bit>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace afterimage {

struct CacheConfig {
  std::uint32_t slices = 4;
  std::uint32_t sets_per_slice = 2048;
  std::uint32_t associativity = 16;
  std::uint32_t hit_latency = 40;
  std::uint32_t miss_latency = 200;
  std::uint32_t threshold = 120;

  void validate() const {
    auto pow2 = [](std::uint32_t v) { return v != 0 && std::has_single_bit(v); };
    if (!pow2(slices) || !pow2(sets_per_slice) || !pow2(associativity)) {
      throw std::invalid_argument("cache slices, sets and associativity must be powers of two");
    }
    if (!(hit_latency < threshold && threshold < miss_latency)) {
      throw std::invalid_argument("cache threshold must lie strictly between hit and miss latency");
    }
  }

  bool is_hit(std::uint32_t latency) const { return latency < threshold; }

  friend bool operator==(const CacheConfig&, const CacheConfig&) = default;
};

// XOR-fold of the page-frame bits down to log2(slices) bits.
inline std::uint32_t slice_of(Address paddr, const CacheConfig& config) {
  const int bits = std::countr_zero(config.slices);
  if (bits == 0) return 0;
  const std::uint64_t mask = config.slices - 1;
  std::uint64_t frame = paddr.page_frame();
  std::uint64_t folded = 0;
  while (frame != 0) {
    folded ^= frame & mask;
    frame >>= bits;
  }
  return static_cast<std::uint32_t>(folded);
}

inline std::uint32_t set_of(Address paddr, const CacheConfig& config) {
  return static_cast<std::uint32_t>(paddr.line_index() & (config.sets_per_slice - 1));
}

class Cache {
 public:
  explicit Cache(CacheConfig config = {}) : config_(config) {
    config_.validate();
    const std::size_t sets = std::size_t{config_.slices} * config_.sets_per_slice;
    lines_.assign(sets * config_.associativity, 0);
    fill_.assign(sets, 0);
  }

  const CacheConfig& config() const { return config_; }

  // Demand access: returns the latency and leaves the line at MRU.
  std::uint32_t access(Address paddr) {
    const bool hit = promote(paddr.line_index(), index_of(paddr));
    return hit ? config_.hit_latency : config_.miss_latency;
  }

  // Same placement as a demand access, without latency accounting.
  void install(Address paddr) { promote(paddr.line_index(), index_of(paddr)); }
  void install_prefetch(const PrefetchRequest& request) { install(request.target); }

  bool contains(Address paddr) const {
    const std::size_t set = index_of(paddr);
    const auto begin = lines_.begin() + static_cast<std::ptrdiff_t>(set * config_.associativity);
    return std::find(begin, begin + fill_[set], paddr.line_index()) != begin + fill_[set];
  }

  // clflush: the line is gone from the cache afterwards. Idempotent.
  void flush_line(Address paddr) {
    const std::size_t set = index_of(paddr);
    auto* begin = &lines_[set * config_.associativity];
    auto* end = begin + fill_[set];
    auto* it = std::find(begin, end, paddr.line_index());
    if (it == end) return;
    std::copy(it + 1, end, it);
    --fill_[set];
  }

  void flush_page(Address any_in_page) {
    const Address base = any_in_page.page_base();
    for (std::uint64_t l = 0; l < kLinesPerPage; ++l) flush_line(base + static_cast<std::int64_t>(l * kLineSize));
  }

  void clear() { std::fill(fill_.begin(), fill_.end(), 0); }

  // Resident line indices of one (set, slice), MRU first.
  std::vector<std::uint64_t> resident(std::uint32_t set, std::uint32_t slice) const {
    const std::size_t idx = std::size_t{slice} * config_.sets_per_slice + set;
    const auto begin = lines_.begin() + static_cast<std::ptrdiff_t>(idx * config_.associativity);
    return {begin, begin + fill_[idx]};
  }

  // Same geometry and the same resident lines in the same recency order.
  friend bool operator==(const Cache& a, const Cache& b) {
    if (!(a.config_ == b.config_) || a.fill_ != b.fill_) return false;
    for (std::size_t set = 0; set < a.fill_.size(); ++set) {
      const std::size_t base = set * a.config_.associativity;
      if (!std::equal(a.lines_.begin() + static_cast<std::ptrdiff_t>(base),
                      a.lines_.begin() + static_cast<std::ptrdiff_t>(base + a.fill_[set]),
                      b.lines_.begin() + static_cast<std::ptrdiff_t>(base))) {
        return false;
      }
    }
    return true;
  }

 private:
  std::size_t index_of(Address paddr) const {
    return std::size_t{slice_of(paddr, config_)} * config_.sets_per_slice + set_of(paddr, config_);
  }

  bool promote(std::uint64_t line, std::size_t set) {
    auto* begin = &lines_[set * config_.associativity];
    auto* end = begin + fill_[set];
    auto* it = std::find(begin, end, line);
    const bool hit = it != end;
    if (!hit) {
      if (fill_[set] < config_.associativity) {
        ++fill_[set];
        ++end;
      }
      it = end - 1;  // LRU slot (or the freshly opened one)
    }
    std::copy_backward(begin, it, it + 1);
    *begin = line;
    return hit;
  }

  CacheConfig config_;
  std::vector<std::uint64_t> lines_;  // per set: fill_ entries, MRU first
  std::vector<std::uint32_t> fill_;
};

struct MinimalEvictionSet {
  std::uint32_t set = 0;
  std::uint32_t slice = 0;
  std::vector<Address> members;
};

// Picks the first `associativity` distinct lines of the pool that map to (set, slice).
inline MinimalEvictionSet build_eviction_set(const CacheConfig& config, std::uint32_t set,
                                             std::uint32_t slice, std::span<const Address> pool) {
  MinimalEvictionSet mes{set, slice, {}};
  mes.members.reserve(config.associativity);
  for (const Address a : pool) {
    if (set_of(a, config) != set || slice_of(a, config) != slice) continue;
    const Address line = a.line_base();
    if (std::find(mes.members.begin(), mes.members.end(), line) != mes.members.end()) continue;
    mes.members.push_back(line);
    if (mes.members.size() == config.associativity) return mes;
  }
  throw std::runtime_error("candidate pool exhausted after " + std::to_string(mes.members.size()) +
                           " of " + std::to_string(config.associativity) +
                           " eviction set members for set " + std::to_string(set) + " slice " +
                           std::to_string(slice));
}

inline MinimalEvictionSet build_eviction_set(const Cache& cache, std::uint32_t set, std::uint32_t slice,
                                             std::span<const Address> pool) {
  return build_eviction_set(cache.config(), set, slice, pool);
}

// Lines that share `set`, one per cache-way-sized stride, starting at `first_frame`.
inline std::vector<Address> eviction_candidates(const CacheConfig& config, std::uint32_t set,
                                                std::uint64_t first_frame, std::size_t count) {
  const std::uint64_t span = std::uint64_t{config.sets_per_slice} * kLineSize;
  const std::uint64_t start = (first_frame * kPageSize + span - 1) / span * span;
  std::vector<Address> pool;
  pool.reserve(count);
  for (std::size_t k = 0; k < count; ++k) pool.emplace_back(start + k * span + std::uint64_t{set} * kLineSize);
  return pool;
}

}  // namespace afterimage
