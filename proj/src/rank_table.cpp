#include "threadcomm/rank_table.hpp"

#include <algorithm>
#include <string>

#include "threadcomm/error.hpp"

namespace threadcomm {

RankTable::RankTable(std::vector<int> thread_counts) : counts_(std::move(thread_counts)) {
  if (counts_.empty()) throw Error(ErrorCode::InvalidArgument, "rank table needs at least one process");
  prefix_.reserve(counts_.size() + 1);
  prefix_.push_back(0);
  for (int c : counts_) {
    if (c < 1) throw Error(ErrorCode::InvalidArgument, "thread count must be >= 1, got " + std::to_string(c));
    prefix_.push_back(prefix_.back() + c);
  }
}

RankTable::Location RankTable::route(int global_rank) const {
  if (global_rank < 0 || global_rank >= total()) {
    throw Error(ErrorCode::InvalidArgument, "rank " + std::to_string(global_rank) + " out of range");
  }
  // First prefix entry greater than the rank marks the end of its block.
  auto it = std::upper_bound(prefix_.begin(), prefix_.end(), global_rank);
  const int proc = static_cast<int>(it - prefix_.begin()) - 1;
  return {proc, global_rank - prefix_[proc]};
}

}  // namespace threadcomm
