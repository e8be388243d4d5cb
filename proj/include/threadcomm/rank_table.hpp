#pragma once

#include <span>
#include <vector>

namespace threadcomm {

/// Maps global ranks to (process, local thread id) through exclusive prefix
/// sums of the per-process thread counts.
class RankTable {
 public:
  struct Location {
    int proc = 0;
    int tid = 0;
    friend bool operator==(const Location&, const Location&) = default;
  };

  RankTable() = default;
  /// Throws InvalidArgument if `thread_counts` is empty or has a count < 1.
  explicit RankTable(std::vector<int> thread_counts);

  int total() const noexcept { return prefix_.empty() ? 0 : prefix_.back(); }
  int proc_count() const noexcept { return static_cast<int>(counts_.size()); }
  int thread_count(int proc) const { return counts_.at(proc); }
  int first_rank(int proc) const { return prefix_.at(proc); }
  int global_rank(int proc, int tid) const { return prefix_.at(proc) + tid; }

  /// Exclusive prefix sums; has proc_count() + 1 entries, the last is total().
  std::span<const int> prefix() const noexcept { return prefix_; }
  std::span<const int> thread_counts() const noexcept { return counts_; }

  /// Throws InvalidArgument for ranks outside [0, total()).
  Location route(int global_rank) const;

 private:
  std::vector<int> counts_;
  std::vector<int> prefix_;
};

}  // namespace threadcomm
