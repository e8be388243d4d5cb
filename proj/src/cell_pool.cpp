#include "threadcomm/cell_pool.hpp"

#include <cassert>
#include <limits>
#include <new>

#include "threadcomm/error.hpp"

namespace threadcomm {

namespace {

constexpr std::size_t kAlign = 64;

constexpr std::uint64_t pack(std::uint32_t version, std::uint32_t top) noexcept {
  return (static_cast<std::uint64_t>(version) << 32) | top;
}
constexpr std::uint32_t version_of(std::uint64_t h) noexcept { return static_cast<std::uint32_t>(h >> 32); }
constexpr std::uint32_t top_of(std::uint64_t h) noexcept { return static_cast<std::uint32_t>(h); }

}  // namespace

CellPool::CellPool(int ranks, std::size_t cells_per_rank, std::size_t cell_size)
    : ranks_(ranks), cells_per_rank_(cells_per_rank), cell_size_(cell_size) {
  if (ranks < 1 || cells_per_rank < 1) {
    throw Error(ErrorCode::InvalidArgument, "cell pool needs at least one rank and one cell");
  }
  if (cell_size > std::numeric_limits<std::uint32_t>::max() ||
      cells_per_rank * static_cast<std::size_t>(ranks) >= std::numeric_limits<std::uint32_t>::max()) {
    throw Error(ErrorCode::InvalidArgument, "cell pool too large");
  }
  stride_ = (sizeof(Cell) + cell_size + kAlign - 1) / kAlign * kAlign;
  const std::size_t total = total_cells();
  slab_ = static_cast<std::byte*>(::operator new(stride_ * total, std::align_val_t{kAlign}));
  pools_ = std::make_unique<SubPool[]>(ranks);

  for (int r = 0; r < ranks; ++r) {
    const auto first = static_cast<std::uint32_t>(r * cells_per_rank);
    for (std::size_t i = 0; i < cells_per_rank; ++i) {
      const auto idx = static_cast<std::uint32_t>(first + i);
      Cell* c = new (slab_ + stride_ * idx) Cell();
      c->owner_rank = r;
      c->capacity = static_cast<std::uint32_t>(cell_size);
      c->in_pool = true;
      // Chain i -> i+1; the last cell terminates the list.
      c->free_next.store(i + 1 < cells_per_rank ? idx + 2 : 0, std::memory_order_relaxed);
    }
    pools_[r].head.store(pack(0, first + 1), std::memory_order_relaxed);
  }
}

CellPool::~CellPool() {
  for (std::size_t i = 0; i < total_cells(); ++i) cell_at(static_cast<std::uint32_t>(i))->~Cell();
  ::operator delete(slab_, std::align_val_t{kAlign});
}

Cell* CellPool::cell_at(std::uint32_t index) const noexcept {
  return reinterpret_cast<Cell*>(slab_ + stride_ * index);
}

std::uint32_t CellPool::index_of(const Cell* cell) const noexcept {
  return static_cast<std::uint32_t>((reinterpret_cast<const std::byte*>(cell) - slab_) / stride_);
}

bool CellPool::owns(const Cell* cell) const noexcept {
  const auto* p = reinterpret_cast<const std::byte*>(cell);
  return p >= slab_ && p < slab_ + stride_ * total_cells() && (p - slab_) % stride_ == 0;
}

Cell* CellPool::acquire(int rank) noexcept {
  auto& head = pools_[rank].head;
  std::uint64_t h = head.load(std::memory_order_acquire);
  for (;;) {
    const std::uint32_t top = top_of(h);
    if (top == 0) return nullptr;
    Cell* c = cell_at(top - 1);
    // May read a stale link if another thread pops c first; the version bump
    // makes the CAS below fail in that case.
    const std::uint32_t next = c->free_next.load(std::memory_order_relaxed);
    if (head.compare_exchange_weak(h, pack(version_of(h) + 1, next), std::memory_order_acq_rel,
                                   std::memory_order_acquire)) {
      assert(c->in_pool);
      c->in_pool = false;
      return c;
    }
  }
}

void CellPool::release(Cell* cell) noexcept {
  assert(owns(cell));
  assert(!cell->in_pool && "double release");
  cell->in_pool = true;
  cell->buf_ref = nullptr;
  cell->done_flag_ref = nullptr;
  auto& head = pools_[cell->owner_rank].head;
  const std::uint32_t idx = index_of(cell);
  std::uint64_t h = head.load(std::memory_order_relaxed);
  for (;;) {
    cell->free_next.store(top_of(h), std::memory_order_relaxed);
    if (head.compare_exchange_weak(h, pack(version_of(h) + 1, idx + 1), std::memory_order_release,
                                   std::memory_order_relaxed)) {
      return;
    }
  }
}

std::size_t CellPool::free_count(int rank) const noexcept {
  std::size_t n = 0;
  std::uint32_t top = top_of(pools_[rank].head.load(std::memory_order_acquire));
  while (top != 0 && n <= cells_per_rank_) {
    ++n;
    top = cell_at(top - 1)->free_next.load(std::memory_order_relaxed);
  }
  return n;
}

std::size_t CellPool::free_count() const noexcept {
  std::size_t n = 0;
  for (int r = 0; r < ranks_; ++r) n += free_count(r);
  return n;
}

}  // namespace threadcomm
