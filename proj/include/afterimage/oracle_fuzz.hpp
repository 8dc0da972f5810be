#pragma once

// Differential fuzzing of observe_load against the reference transcription.

#include <afterimage/prefetcher.hpp>
#include <afterimage/reference_prefetcher.hpp>

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace afterimage {

struct OracleReport {
  std::uint64_t sequences = 0;
  std::uint64_t loads = 0;
  std::uint64_t prefetches = 0;
  std::uint64_t mismatches = 0;
  std::string first_mismatch;
};

namespace detail {

inline bool same_entry(const PrefetcherEntry& e, const reference::Snapshot& s, std::size_t i) {
  return e.valid == s.valid[i] && (!e.valid || (e.ip_tag == s.tag[i] &&
                                                e.last_addr.value == s.last_address[i] &&
                                                e.stride == s.stride[i] &&
                                                e.confidence == s.confidence[i])) &&
         e.mru == s.mru[i];
}

inline std::uint32_t mru_mask(const PrefetchTable& t) {
  std::uint32_t m = 0;
  for (std::size_t i = 0; i < kPrefetcherEntries; ++i) {
    if (t.entries()[i].mru) m |= 1u << i;
  }
  return m;
}

}  // namespace detail

// Runs `sequences` random load sequences, each against a fresh table/TLB and a fresh
// reference model, comparing the issued request and the touched entry after every
// load and the whole table at the end of every sequence.
inline OracleReport run_oracle_equivalence(std::uint64_t sequences, std::uint64_t seed) {
  static constexpr std::array<std::int64_t, 10> kStrides = {64, 448, 320, 832, -448, -64, 0, 1, 2047, 4096};
  std::mt19937_64 rng(seed);
  OracleReport report;
  report.sequences = sequences;

  for (std::uint64_t seq = 0; seq < sequences; ++seq) {
    const std::size_t tlb_capacity = 1 + rng() % 6;
    PrefetchTable table;
    Tlb tlb(tlb_capacity);
    reference::ReferencePrefetcher ref(tlb_capacity);

    const std::size_t length = 1 + rng() % 32;
    const std::size_t pool = 1 + rng() % 32;
    std::array<std::uint64_t, 32> ips{};
    std::array<std::uint64_t, 32> cursor{};
    const std::uint64_t base_frame = 0x100 + (rng() % 64) * 8;
    for (std::size_t k = 0; k < pool; ++k) {
      ips[k] = 0x400000 + ((rng() % 16) << 8) + (rng() & 0xFF);
      cursor[k] = (base_frame + rng() % 4) * kPageSize + (rng() % 64) * kLineSize;
    }

    for (std::size_t n = 0; n < length; ++n) {
      // One draw per load: pool index, kind, stride choice and random address fields.
      const std::uint64_t r = rng();
      const std::size_t k = (r & 0xFF) % pool;
      std::uint64_t addr = 0;
      if (((r >> 8) & 3) == 0) {
        addr = (base_frame + ((r >> 10) & 3)) * kPageSize + ((r >> 12) & (kPageSize - 1));
      } else {
        addr = cursor[k] + static_cast<std::uint64_t>(kStrides[((r >> 24) & 0xFFFF) % kStrides.size()]);
      }
      cursor[k] = addr;

      const auto got = observe_load(table, tlb, Address{ips[k]}, Address{addr});
      const auto want = ref.load(ips[k], addr);
      ++report.loads;
      if (got) ++report.prefetches;

      bool ok = got.has_value() == want.has_value() && (!got || got->target.value == *want);
      const auto& snap = ref.snapshot();
      if (ok) {
        if (auto slot = table.lookup(Address{ips[k]}.ip_tag())) {
          ok = detail::same_entry(table.entry(*slot), snap, *slot);
        }
        ok = ok && detail::mru_mask(table) == snap.mru.to_ulong();
      }
      if (ok && n + 1 == length) {
        for (std::size_t i = 0; i < kPrefetcherEntries && ok; ++i) {
          ok = detail::same_entry(table.entries()[i], snap, i);
        }
      }
      if (!ok) {
        if (report.mismatches == 0) {
          report.first_mismatch = "seed " + std::to_string(seed) + " sequence " +
                                  std::to_string(seq) + " load " + std::to_string(n);
        }
        ++report.mismatches;
        break;
      }
    }
  }
  return report;
}

}  // namespace afterimage
