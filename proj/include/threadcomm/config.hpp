#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string_view>

namespace threadcomm {

/// Message transfer protocol selection.
///
/// `Auto` follows the normal rules: messages up to the eager threshold are
/// copied through cells, larger interthread messages use the 1-copy path and
/// larger interprocess messages are chunked. The other values force one path
/// for comparison runs.
enum class Protocol { Auto, Eager, OneCopy, Pipeline };

std::string_view to_string(Protocol p) noexcept;
std::optional<Protocol> parse_protocol(std::string_view s) noexcept;

struct Config {
  Protocol protocol = Protocol::Auto;
  std::size_t eager_threshold = 4096;
  std::size_t cell_size = 8192;       // inline payload capacity per cell
  std::size_t cells_per_rank = 64;
  // Empty polls before a blocking call yields the CPU. 0 selects 1000, or 1
  // when the comm has more local threads than hardware threads.
  std::uint32_t poll_yield_every = 0;

  /// Defaults overridden by TC_EAGER_THRESHOLD, TC_POOL_CELLS and TC_CELL_SIZE.
  static Config from_environment();
  /// Applies the environment overrides on top of `base`.
  static Config with_environment(Config base);
};

}  // namespace threadcomm
