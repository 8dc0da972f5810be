#pragma once

// Model of the IP-stride prefetcher: a 24-entry fully associative history table
// indexed by the low 8 bits of the load IP, trained on physical addresses, with a
// Bit-PLRU replacement policy and a page-frame/TLB gate on issued requests.

#include <afterimage/address.hpp>

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace afterimage {

// Thrown when a caller breaks an operation's precondition.
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline constexpr std::size_t kPrefetcherEntries = 24;
inline constexpr std::int32_t kMaxStride = 2047;  // sign + 12 magnitude bits
inline constexpr std::uint8_t kMaxConfidence = 3;
inline constexpr std::uint8_t kTriggerConfidence = 2;

// Recently used page frames. Every load passes through it; a miss installs the frame.
class Tlb {
 public:
  explicit Tlb(std::size_t capacity = 64) : capacity_(capacity) {
    if (capacity_ == 0) throw std::invalid_argument("TLB capacity must be positive");
  }

  // Returns true on hit. Either way the frame ends up most recently used.
  bool access(std::uint64_t frame) {
    auto it = std::find(frames_.begin(), frames_.end(), frame);
    const bool hit = it != frames_.end();
    if (hit) {
      frames_.erase(it);
    } else if (frames_.size() == capacity_) {
      frames_.pop_back();
    }
    frames_.insert(frames_.begin(), frame);
    return hit;
  }

  bool contains(std::uint64_t frame) const {
    return std::find(frames_.begin(), frames_.end(), frame) != frames_.end();
  }

  void clear() { frames_.clear(); }
  std::size_t size() const { return frames_.size(); }
  std::size_t capacity() const { return capacity_; }

  friend bool operator==(const Tlb&, const Tlb&) = default;

 private:
  std::size_t capacity_;
  std::vector<std::uint64_t> frames_;  // MRU first
};

struct PrefetcherEntry {
  std::uint8_t ip_tag = 0;
  Address last_addr{};
  std::int32_t stride = 0;  // bytes
  std::uint8_t confidence = 0;
  bool valid = false;
  bool mru = false;

  friend bool operator==(const PrefetcherEntry&, const PrefetcherEntry&) = default;
};

struct PrefetchRequest {
  Address target{};
  std::uint8_t origin_ip_tag = 0;
  std::uint64_t issued_at = 0;

  friend bool operator==(const PrefetchRequest&, const PrefetchRequest&) = default;
};

class PrefetchTable {
 public:
  using Slot = std::size_t;

  std::optional<Slot> lookup(std::uint8_t ip_tag) const {
    for (Slot s = 0; s < entries_.size(); ++s) {
      if (entries_[s].valid && entries_[s].ip_tag == ip_tag) return s;
    }
    return std::nullopt;
  }

  const PrefetcherEntry& entry(Slot slot) const { return entries_.at(slot); }
  PrefetcherEntry& entry(Slot slot) { return entries_.at(slot); }
  const std::array<PrefetcherEntry, kPrefetcherEntries>& entries() const { return entries_; }

  std::size_t occupancy() const {
    return static_cast<std::size_t>(
        std::count_if(entries_.begin(), entries_.end(), [](const auto& e) { return e.valid; }));
  }

  // Bit-PLRU: set the slot's MRU bit; if that would leave every bit set, the
  // others are cleared first.
  void touch(Slot slot) {
    auto& target = entries_.at(slot);
    if (target.mru) return;
    const bool saturates = std::all_of(entries_.begin(), entries_.end(), [&](const auto& e) {
      return &e == &target || e.mru;
    });
    if (saturates) {
      for (auto& e : entries_) e.mru = false;
    }
    target.mru = true;
  }

  // Lowest-index slot with a clear MRU bit. Only meaningful on a full table.
  Slot select_victim() const {
    if (occupancy() != entries_.size()) {
      throw ContractViolation("victim selection requires all " +
                              std::to_string(entries_.size()) + " slots to be valid");
    }
    for (Slot s = 0; s < entries_.size(); ++s) {
      if (!entries_[s].mru) return s;
    }
    // touch() never lets every bit be set.
    throw ContractViolation("Bit-PLRU state has every MRU bit set");
  }

  // Installs a fresh entry (confidence 0, stride 0) for the tag and returns its slot.
  // Uses the lowest free slot, else evicts the Bit-PLRU victim.
  Slot allocate(std::uint8_t ip_tag, Address paddr) {
    Slot slot = 0;
    auto free = std::find_if(entries_.begin(), entries_.end(), [](const auto& e) { return !e.valid; });
    if (free != entries_.end()) {
      slot = static_cast<Slot>(free - entries_.begin());
    } else {
      slot = select_victim();
      ++evictions_;
    }
    entries_[slot] = PrefetcherEntry{ip_tag, paddr, 0, 0, true, entries_[slot].mru};
    touch(slot);
    return slot;
  }

  // Invalidates every entry, as a clear-ip-prefetcher instruction would. Returns the
  // number of cycles spent with `write_ports` entries cleared per cycle.
  std::uint64_t reset(std::uint64_t write_ports) {
    if (write_ports == 0) throw std::invalid_argument("write_ports must be at least 1");
    entries_.fill(PrefetcherEntry{});
    return (entries_.size() + write_ports - 1) / write_ports;
  }

  std::uint64_t evictions() const { return evictions_; }

  friend bool operator==(const PrefetchTable& a, const PrefetchTable& b) {
    return a.entries_ == b.entries_;
  }

 private:
  std::array<PrefetcherEntry, kPrefetcherEntries> entries_{};
  std::uint64_t evictions_ = 0;
};

inline std::uint64_t reset_prefetcher(PrefetchTable& table, std::uint64_t write_ports) {
  return table.reset(write_ports);
}

// A request may land in the triggering load's frame or the next one, and never
// more than one frame past the frame the entry was trained on.
inline bool within_prefetch_reach(Address trigger, std::uint64_t trained_frame, Address target) {
  const auto from_trigger = static_cast<std::int64_t>(target.page_frame() - trigger.page_frame());
  const auto from_trained = static_cast<std::int64_t>(target.page_frame() - trained_frame);
  return (from_trigger == 0 || from_trigger == 1) && (from_trained == 0 || from_trained == 1);
}

// Feeds one retired load into the prefetcher and returns the request it issues, if any.
//
// On a tag hit the entry follows the confidence/stride policy: with confidence >= 2 a
// request for paddr + stride goes out before the entry is checked against the new
// distance; below that the request goes out only when the confidence climbs to 2. A
// distance that does not fit the 13-bit stride field makes the entry re-learn from
// scratch (stride 0, confidence 0).
//
// A load that leaves the entry's trained frame and misses the TLB only installs the
// frame; the entry is not touched.
inline std::optional<PrefetchRequest> observe_load(PrefetchTable& table, Tlb& tlb, Address full_ip,
                                                   Address paddr, std::uint64_t now = 0) {
  const std::uint8_t tag = full_ip.ip_tag();
  const bool tlb_hit = tlb.access(paddr.page_frame());

  const auto slot = table.lookup(tag);
  if (!slot) {
    table.allocate(tag, paddr);
    return std::nullopt;
  }

  PrefetcherEntry& e = table.entry(*slot);
  const std::uint64_t trained_frame = e.last_addr.page_frame();
  if (paddr.page_frame() != trained_frame && !tlb_hit) return std::nullopt;

  table.touch(*slot);
  const std::int64_t distance = paddr - e.last_addr;
  const bool matches = distance == e.stride;
  auto relearn = [&] {
    if (distance >= -kMaxStride && distance <= kMaxStride) {
      e.stride = static_cast<std::int32_t>(distance);
      e.confidence = 1;
    } else {
      e.stride = 0;
      e.confidence = 0;
    }
  };

  std::optional<PrefetchRequest> request;
  auto issue = [&] { request = PrefetchRequest{paddr + e.stride, tag, now}; };

  if (e.confidence >= kTriggerConfidence) {
    issue();
    if (!matches) {
      relearn();
    } else if (e.confidence != kMaxConfidence) {
      ++e.confidence;
    }
  } else if (!matches) {
    relearn();
  } else {
    ++e.confidence;
    if (e.confidence == kTriggerConfidence) issue();
  }
  e.last_addr = paddr;

  if (request && !within_prefetch_reach(paddr, trained_frame, request->target)) {
    request.reset();
  }
  return request;
}

// FNV-1a over every architecturally visible field of the table.
inline std::uint64_t state_hash(const PrefetchTable& table) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&h](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xFF;
      h *= 0x100000001b3ull;
    }
  };
  for (const auto& e : table.entries()) {
    mix(e.ip_tag);
    mix(e.last_addr.value);
    mix(static_cast<std::uint64_t>(static_cast<std::int64_t>(e.stride)));
    mix(e.confidence);
    mix((e.valid ? 1u : 0u) | (e.mru ? 2u : 0u));
  }
  return h;
}

}  // namespace afterimage
