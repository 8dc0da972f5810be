#pragma once

#include <compare>
#include <cstdint>

namespace afterimage {

inline constexpr std::uint64_t kLineSize = 64;
inline constexpr std::uint64_t kPageSize = 4096;
inline constexpr std::uint64_t kLinesPerPage = kPageSize / kLineSize;

// A byte address. Whether it is virtual or physical depends on where it came from;
// the prefetcher and the cache only ever see physical ones.
struct Address {
  std::uint64_t value = 0;

  constexpr Address() = default;
  constexpr explicit Address(std::uint64_t v) : value(v) {}

  constexpr std::uint64_t line_index() const { return value >> 6; }
  constexpr std::uint64_t page_frame() const { return value >> 12; }
  constexpr std::uint64_t page_offset() const { return value & 0xFFF; }
  // Line number inside the page, 0..63.
  constexpr unsigned line_in_page() const { return static_cast<unsigned>(page_offset() >> 6); }
  constexpr std::uint8_t ip_tag() const { return static_cast<std::uint8_t>(value & 0xFF); }

  constexpr Address line_base() const { return Address{value & ~(kLineSize - 1)}; }
  constexpr Address page_base() const { return Address{value & ~(kPageSize - 1)}; }

  constexpr Address operator+(std::int64_t delta) const {
    return Address{value + static_cast<std::uint64_t>(delta)};
  }
  constexpr std::int64_t operator-(Address other) const {
    return static_cast<std::int64_t>(value - other.value);
  }

  friend constexpr auto operator<=>(Address, Address) = default;
};

constexpr Address page_address(std::uint64_t frame, std::uint64_t offset = 0) {
  return Address{frame * kPageSize + offset};
}

}  // namespace afterimage
