#pragma once

// Straight-line transcription of the confidence/stride policy, written without
// reusing anything from prefetcher.hpp except the Address type. It exists to be
// compared against PrefetchTable + observe_load, so keep it dumb and literal.

#include <afterimage/address.hpp>

#include <array>
#include <bitset>
#include <cstdint>
#include <deque>
#include <optional>

namespace afterimage::reference {

struct Snapshot {
  std::array<bool, 24> valid{};
  std::array<std::uint8_t, 24> tag{};
  std::array<std::uint64_t, 24> last_address{};
  std::array<std::int64_t, 24> stride{};
  std::array<int, 24> confidence{};
  std::bitset<24> mru;
};

class ReferencePrefetcher {
 public:
  explicit ReferencePrefetcher(std::size_t tlb_capacity = 64) : tlb_capacity_(tlb_capacity) {}

  // Returns the prefetch target (byte address) issued for this load, if any.
  std::optional<std::uint64_t> load(std::uint64_t ip, std::uint64_t current_address) {
    const std::uint8_t tag = ip & 0xFF;
    const std::uint64_t page = current_address / 4096;

    bool tlb_hit = false;
    for (auto it = tlb_.begin(); it != tlb_.end(); ++it) {
      if (*it == page) {
        tlb_hit = true;
        tlb_.erase(it);
        break;
      }
    }
    tlb_.push_front(page);
    if (tlb_.size() > tlb_capacity_) tlb_.pop_back();

    int i = find(tag);
    if (i < 0) {
      create_new_entry(tag, current_address);
      return std::nullopt;
    }

    const std::uint64_t last_page = s_.last_address[i] / 4096;
    if (page != last_page && !tlb_hit) return std::nullopt;

    mark_used(i);
    std::optional<std::uint64_t> prefetch;
    const std::int64_t distance =
        static_cast<std::int64_t>(current_address) - static_cast<std::int64_t>(s_.last_address[i]);

    if (s_.confidence[i] >= 2) {
      prefetch = current_address + s_.stride[i];
      if (distance != s_.stride[i]) {
        set_stride(i, distance);
      } else {
        if (s_.confidence[i] != 3) s_.confidence[i] += 1;
      }
    } else {
      if (distance != s_.stride[i]) {
        set_stride(i, distance);
      } else {
        s_.confidence[i] += 1;
        if (s_.confidence[i] == 2) prefetch = current_address + s_.stride[i];
      }
    }
    s_.last_address[i] = current_address;

    if (prefetch) {
      const std::int64_t target_page = static_cast<std::int64_t>(*prefetch / 4096);
      const std::int64_t ahead_of_load = target_page - static_cast<std::int64_t>(page);
      const std::int64_t ahead_of_training = target_page - static_cast<std::int64_t>(last_page);
      if (ahead_of_load < 0 || ahead_of_load > 1 || ahead_of_training < 0 || ahead_of_training > 1) {
        prefetch.reset();
      }
    }
    return prefetch;
  }

  const Snapshot& snapshot() const { return s_; }

 private:
  int find(std::uint8_t tag) const {
    for (int i = 0; i < 24; ++i) {
      if (s_.valid[i] && s_.tag[i] == tag) return i;
    }
    return -1;
  }

  void set_stride(int i, std::int64_t distance) {
    if (distance > 2047 || distance < -2047) {
      s_.stride[i] = 0;
      s_.confidence[i] = 0;
    } else {
      s_.stride[i] = distance;
      s_.confidence[i] = 1;
    }
  }

  void mark_used(int i) {
    std::bitset<24> after = s_.mru;
    after.set(i);
    if (after.all()) s_.mru.reset();
    s_.mru.set(i);
  }

  void create_new_entry(std::uint8_t tag, std::uint64_t address) {
    int slot = -1;
    for (int i = 0; i < 24; ++i) {
      if (!s_.valid[i]) {
        slot = i;
        break;
      }
    }
    if (slot < 0) {
      for (int i = 0; i < 24; ++i) {
        if (!s_.mru[i]) {
          slot = i;
          break;
        }
      }
    }
    s_.valid[slot] = true;
    s_.tag[slot] = tag;
    s_.last_address[slot] = address;
    s_.stride[slot] = 0;
    s_.confidence[slot] = 0;
    mark_used(slot);
  }

  Snapshot s_;
  std::size_t tlb_capacity_;
  std::deque<std::uint64_t> tlb_;
};

}  // namespace afterimage::reference
