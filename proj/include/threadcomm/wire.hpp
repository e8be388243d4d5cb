#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>

namespace threadcomm::wire {

inline constexpr std::size_t kHeaderSize = 40;
inline constexpr std::array<char, 4> kFrameMagic{'T', 'C', 'B', '1'};
inline constexpr std::size_t kHelloSize = 12;
inline constexpr std::array<char, 4> kHelloMagic{'T', 'C', 'H', '1'};

enum class FrameKind : std::uint8_t { Eager = 0, PipelineChunk = 1, Ack = 2, Ctrl = 3 };

/// Fixed 40-byte little-endian frame header.
///
///   offset  size  field
///        0     4  magic "TCB1"
///        4     1  kind
///        5     1  flags (reserved, 0)
///        6     2  comm_id
///        8     4  src_rank
///       12     4  dst_rank
///       16     4  tag (signed)
///       20     4  seq
///       24     8  msg_len
///       32     4  chunk_index
///       36     4  chunk_total
struct WireHeader {
  FrameKind kind = FrameKind::Eager;
  std::uint8_t flags = 0;
  std::uint16_t comm_id = 0;
  std::uint32_t src_rank = 0;
  std::uint32_t dst_rank = 0;
  std::int32_t tag = 0;
  std::uint32_t seq = 0;
  std::uint64_t msg_len = 0;
  std::uint32_t chunk_index = 0;
  std::uint32_t chunk_total = 0;

  friend bool operator==(const WireHeader&, const WireHeader&) = default;
};

using HeaderBytes = std::array<std::byte, kHeaderSize>;

HeaderBytes encode(const WireHeader& h) noexcept;
/// Throws Error(Protocol) on a bad magic or an unknown kind.
WireHeader decode(std::span<const std::byte, kHeaderSize> bytes);

/// Bytes carried after the header: msg_len for Eager and Ctrl frames, the
/// chunk's share of msg_len for PipelineChunk frames, 0 for Ack.
std::uint64_t payload_length(const WireHeader& h) noexcept;

/// Balanced split of `msg_len` bytes into `total` chunks: chunk i covers
/// [i*len/total, (i+1)*len/total). Both sides derive chunk bounds from the
/// header alone.
std::uint64_t chunk_offset(std::uint64_t msg_len, std::uint32_t total, std::uint32_t index) noexcept;
std::uint64_t chunk_length(std::uint64_t msg_len, std::uint32_t total, std::uint32_t index) noexcept;
/// Number of chunks needed so that no chunk exceeds `capacity` bytes.
std::uint32_t chunk_count(std::uint64_t msg_len, std::uint64_t capacity) noexcept;

struct Hello {
  std::uint32_t proc_rank = 0;
  std::uint32_t proc_count = 0;
};
std::array<std::byte, kHelloSize> encode_hello(const Hello& h) noexcept;
/// Throws Error(Protocol) on a bad magic.
Hello decode_hello(std::span<const std::byte, kHelloSize> bytes);

/// Packed thread addressing kept for parity with tag-bit based transports:
/// bits 46..61 source thread id, bits 30..45 destination thread id, bits
/// 0..29 user tag.
struct TagFields {
  std::uint32_t src_tid = 0;
  std::uint32_t dst_tid = 0;
  std::uint32_t user_tag = 0;
  friend bool operator==(const TagFields&, const TagFields&) = default;
};
/// Throws Error(InvalidArgument) if a field exceeds its width.
std::uint64_t encode_tag(const TagFields& f);
TagFields decode_tag(std::uint64_t packed) noexcept;

}  // namespace threadcomm::wire
