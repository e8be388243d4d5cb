#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <span>

#include "threadcomm/mpsc_queue.hpp"

namespace threadcomm {

inline constexpr int kAnySource = -1;
inline constexpr int kAnyTag = -1;
/// User tags live in [0, kTagUpperBound). Tags at or above it are reserved
/// for collectives and never match kAnyTag.
inline constexpr int kTagUpperBound = 1 << 30;

struct Envelope {
  int src_rank = 0;
  int tag = 0;
  std::uint64_t msg_len = 0;
  std::uint32_t seq = 0;  // per (src, dst) message counter

  friend bool operator==(const Envelope&, const Envelope&) = default;
};

enum class CellKind : std::uint8_t { Eager, OneCopyHeader, PipelineChunk, Ack };

/// Fixed-capacity message carrier. The inline payload area of
/// `capacity` bytes follows the header in the same pool slot.
struct alignas(64) Cell : MpscNode {
  int owner_rank = 0;  // local thread id whose sub-pool owns this cell
  CellKind kind = CellKind::Eager;
  bool in_pool = false;
  Envelope envelope;
  std::uint32_t payload_len = 0;
  std::uint32_t capacity = 0;
  std::uint32_t chunk_index = 0;
  std::uint32_t chunk_total = 0;

  // OneCopyHeader only: the sender's buffer and its completion flag.
  const std::byte* buf_ref = nullptr;
  std::atomic<std::uint32_t>* done_flag_ref = nullptr;

  // Free-list link, used only while the cell is in its pool.
  std::atomic<std::uint32_t> free_next{0};

  std::byte* payload() noexcept { return reinterpret_cast<std::byte*>(this + 1); }
  const std::byte* payload() const noexcept {
    return reinterpret_cast<const std::byte*>(this + 1);
  }
  std::span<std::byte> payload_area() noexcept { return {payload(), capacity}; }
  std::span<const std::byte> data() const noexcept { return {payload(), payload_len}; }
};

}  // namespace threadcomm
