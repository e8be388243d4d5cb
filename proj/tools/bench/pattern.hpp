#pragma once

#include <cstddef>
#include <cstdint>
#include <cstring>
#include <span>

namespace tcbench {

inline std::uint64_t splitmix(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t mix(std::uint64_t a, std::uint64_t b) noexcept { return splitmix(a ^ splitmix(b)); }

// Deterministic payload keyed by `key`; byte i depends on key and i.
inline void fill_pattern(std::span<std::byte> buf, std::uint64_t key) noexcept {
  std::uint64_t x = splitmix(key);
  std::size_t i = 0;
  for (; i + 8 <= buf.size(); i += 8) {
    x = x * 6364136223846793005ull + 1442695040888963407ull;
    std::memcpy(buf.data() + i, &x, 8);
  }
  x = x * 6364136223846793005ull + 1442695040888963407ull;
  for (std::size_t k = 0; i < buf.size(); ++i, ++k) buf[i] = static_cast<std::byte>(x >> (8 * k));
}

inline bool check_pattern(std::span<const std::byte> buf, std::uint64_t key) noexcept {
  std::uint64_t x = splitmix(key);
  std::size_t i = 0;
  for (; i + 8 <= buf.size(); i += 8) {
    x = x * 6364136223846793005ull + 1442695040888963407ull;
    if (std::memcmp(buf.data() + i, &x, 8) != 0) return false;
  }
  x = x * 6364136223846793005ull + 1442695040888963407ull;
  for (std::size_t k = 0; i < buf.size(); ++i, ++k) {
    if (buf[i] != static_cast<std::byte>(x >> (8 * k))) return false;
  }
  return true;
}

}  // namespace tcbench
