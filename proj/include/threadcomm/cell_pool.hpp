#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <vector>

#include "threadcomm/cell.hpp"

namespace threadcomm {

/// Preallocated cells divided into one sub-pool per receiving rank.
///
/// Each sub-pool is a lock-free stack indexed into a single cache-line
/// aligned slab. The stack head packs a version counter with the top index so
/// concurrent acquirers cannot suffer ABA. acquire() never blocks; it returns
/// nullptr when the sub-pool is empty.
class CellPool {
 public:
  CellPool(int ranks, std::size_t cells_per_rank, std::size_t cell_size);
  ~CellPool();
  CellPool(const CellPool&) = delete;
  CellPool& operator=(const CellPool&) = delete;

  /// Any thread. Takes a cell from `rank`'s sub-pool.
  Cell* acquire(int rank) noexcept;
  /// Returns `cell` to the sub-pool it came from.
  void release(Cell* cell) noexcept;

  /// Exact only when no acquire/release is in flight.
  std::size_t free_count(int rank) const noexcept;
  std::size_t free_count() const noexcept;

  int ranks() const noexcept { return ranks_; }
  std::size_t cells_per_rank() const noexcept { return cells_per_rank_; }
  std::size_t cell_capacity() const noexcept { return cell_size_; }
  std::size_t total_cells() const noexcept { return cells_per_rank_ * ranks_; }
  bool owns(const Cell* cell) const noexcept;

 private:
  struct alignas(64) SubPool {
    // high 32 bits: version; low 32 bits: top index + 1 (0 = empty)
    std::atomic<std::uint64_t> head{0};
  };

  Cell* cell_at(std::uint32_t index) const noexcept;
  std::uint32_t index_of(const Cell* cell) const noexcept;

  int ranks_;
  std::size_t cells_per_rank_;
  std::size_t cell_size_;
  std::size_t stride_;
  std::byte* slab_ = nullptr;
  std::unique_ptr<SubPool[]> pools_;
};

}  // namespace threadcomm
