#include "threadcomm/wire.hpp"

#include <cstring>

#include "threadcomm/error.hpp"

namespace threadcomm::wire {

namespace {

template <class T>
void put_le(std::byte* out, T v) noexcept {
  auto u = static_cast<std::make_unsigned_t<T>>(v);
  for (std::size_t i = 0; i < sizeof(T); ++i) out[i] = static_cast<std::byte>((u >> (8 * i)) & 0xff);
}

template <class T>
T get_le(const std::byte* in) noexcept {
  std::make_unsigned_t<T> u = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    u |= static_cast<std::make_unsigned_t<T>>(std::to_integer<unsigned>(in[i])) << (8 * i);
  }
  return static_cast<T>(u);
}

}  // namespace

HeaderBytes encode(const WireHeader& h) noexcept {
  HeaderBytes b{};
  std::memcpy(b.data(), kFrameMagic.data(), 4);
  b[4] = static_cast<std::byte>(h.kind);
  b[5] = static_cast<std::byte>(h.flags);
  put_le(b.data() + 6, h.comm_id);
  put_le(b.data() + 8, h.src_rank);
  put_le(b.data() + 12, h.dst_rank);
  put_le(b.data() + 16, h.tag);
  put_le(b.data() + 20, h.seq);
  put_le(b.data() + 24, h.msg_len);
  put_le(b.data() + 32, h.chunk_index);
  put_le(b.data() + 36, h.chunk_total);
  return b;
}

WireHeader decode(std::span<const std::byte, kHeaderSize> b) {
  if (std::memcmp(b.data(), kFrameMagic.data(), 4) != 0) {
    throw Error(ErrorCode::Protocol, "bad frame magic");
  }
  const auto kind = std::to_integer<std::uint8_t>(b[4]);
  if (kind > static_cast<std::uint8_t>(FrameKind::Ctrl)) {
    throw Error(ErrorCode::Protocol, "unknown frame kind " + std::to_string(kind));
  }
  WireHeader h;
  h.kind = static_cast<FrameKind>(kind);
  h.flags = std::to_integer<std::uint8_t>(b[5]);
  h.comm_id = get_le<std::uint16_t>(b.data() + 6);
  h.src_rank = get_le<std::uint32_t>(b.data() + 8);
  h.dst_rank = get_le<std::uint32_t>(b.data() + 12);
  h.tag = get_le<std::int32_t>(b.data() + 16);
  h.seq = get_le<std::uint32_t>(b.data() + 20);
  h.msg_len = get_le<std::uint64_t>(b.data() + 24);
  h.chunk_index = get_le<std::uint32_t>(b.data() + 32);
  h.chunk_total = get_le<std::uint32_t>(b.data() + 36);
  return h;
}

std::uint64_t chunk_offset(std::uint64_t msg_len, std::uint32_t total, std::uint32_t index) noexcept {
  if (total == 0) return 0;
  return static_cast<std::uint64_t>(static_cast<unsigned __int128>(msg_len) * index / total);
}

std::uint64_t chunk_length(std::uint64_t msg_len, std::uint32_t total, std::uint32_t index) noexcept {
  return chunk_offset(msg_len, total, index + 1) - chunk_offset(msg_len, total, index);
}

std::uint32_t chunk_count(std::uint64_t msg_len, std::uint64_t capacity) noexcept {
  if (msg_len == 0) return 1;
  return static_cast<std::uint32_t>((msg_len + capacity - 1) / capacity);
}

std::uint64_t payload_length(const WireHeader& h) noexcept {
  switch (h.kind) {
    case FrameKind::PipelineChunk:
      return chunk_length(h.msg_len, h.chunk_total, h.chunk_index);
    case FrameKind::Ack:
      return 0;
    default:
      return h.msg_len;
  }
}

std::array<std::byte, kHelloSize> encode_hello(const Hello& h) noexcept {
  std::array<std::byte, kHelloSize> b{};
  std::memcpy(b.data(), kHelloMagic.data(), 4);
  put_le(b.data() + 4, h.proc_rank);
  put_le(b.data() + 8, h.proc_count);
  return b;
}

Hello decode_hello(std::span<const std::byte, kHelloSize> b) {
  if (std::memcmp(b.data(), kHelloMagic.data(), 4) != 0) {
    throw Error(ErrorCode::Protocol, "bad hello magic");
  }
  return {get_le<std::uint32_t>(b.data() + 4), get_le<std::uint32_t>(b.data() + 8)};
}

std::uint64_t encode_tag(const TagFields& f) {
  if (f.src_tid > 0xffff || f.dst_tid > 0xffff || f.user_tag >= (1u << 30)) {
    throw Error(ErrorCode::InvalidArgument, "tag field out of range");
  }
  return (static_cast<std::uint64_t>(f.src_tid) << 46) | (static_cast<std::uint64_t>(f.dst_tid) << 30) |
         f.user_tag;
}

TagFields decode_tag(std::uint64_t packed) noexcept {
  return {static_cast<std::uint32_t>((packed >> 46) & 0xffff), static_cast<std::uint32_t>((packed >> 30) & 0xffff),
          static_cast<std::uint32_t>(packed & ((1u << 30) - 1))};
}

}  // namespace threadcomm::wire
