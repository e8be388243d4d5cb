#include "threadcomm/config.hpp"

#include <charconv>
#include <cstdlib>
#include <string>

#include "threadcomm/error.hpp"

namespace threadcomm {

namespace {

std::optional<std::size_t> env_size(const char* name) {
  const char* v = std::getenv(name);
  if (v == nullptr || *v == '\0') return std::nullopt;
  std::size_t out = 0;
  const char* end = v + std::char_traits<char>::length(v);
  auto [p, ec] = std::from_chars(v, end, out);
  if (ec != std::errc{} || p != end) {
    throw Error(ErrorCode::InvalidArgument, std::string("bad value for ") + name + ": " + v);
  }
  return out;
}

}  // namespace

std::string_view to_string(Protocol p) noexcept {
  switch (p) {
    case Protocol::Auto: return "auto";
    case Protocol::Eager: return "eager";
    case Protocol::OneCopy: return "onecopy";
    case Protocol::Pipeline: return "pipeline";
  }
  return "auto";
}

std::optional<Protocol> parse_protocol(std::string_view s) noexcept {
  for (Protocol p : {Protocol::Auto, Protocol::Eager, Protocol::OneCopy, Protocol::Pipeline}) {
    if (s == to_string(p)) return p;
  }
  return std::nullopt;
}

Config Config::with_environment(Config base) {
  if (auto v = env_size("TC_EAGER_THRESHOLD")) base.eager_threshold = *v;
  if (auto v = env_size("TC_POOL_CELLS")) base.cells_per_rank = *v;
  if (auto v = env_size("TC_CELL_SIZE")) base.cell_size = *v;
  return base;
}

Config Config::from_environment() { return with_environment(Config{}); }

}  // namespace threadcomm
