#include "threadcomm/collectives.hpp"

#include <algorithm>
#include <cstring>
#include <string>
#include <vector>

#include "comm_state.hpp"

namespace threadcomm {

namespace {

using detail::CommState;
using detail::ThreadSlot;

enum class CollKind : int { Barrier = 1, Bcast = 2, Reduce = 3, LeaderBarrier = 4 };

// Reserved tag space above the user range; the per-rank collective counter
// keeps consecutive collectives apart.
int collective_tag(ThreadSlot& self, CollKind kind) {
  const std::uint32_t seq = self.coll_seq++ & 0xffffff;
  return kTagUpperBound | (static_cast<int>(kind) << 24) | static_cast<int>(seq);
}

template <class T>
void combine_typed(std::span<std::byte> acc, std::span<const std::byte> in, std::size_t count, ReduceKind kind) {
  for (std::size_t i = 0; i < count; ++i) {
    T a, b;
    std::memcpy(&a, acc.data() + i * sizeof(T), sizeof(T));
    std::memcpy(&b, in.data() + i * sizeof(T), sizeof(T));
    switch (kind) {
      case ReduceKind::Sum: a = a + b; break;
      case ReduceKind::Min: a = std::min(a, b); break;
      case ReduceKind::Max: a = std::max(a, b); break;
    }
    std::memcpy(acc.data() + i * sizeof(T), &a, sizeof(T));
  }
}

void message_dissemination(ThreadSlot& self, std::span<const int> members, int me, int tag) {
  const int n = static_cast<int>(members.size());
  for (int dist = 1; dist < n; dist <<= 1) {
    detail::sendrecv_internal(self, {}, members[(me + dist) % n], tag, {}, {members[(me - dist + n) % n], tag});
  }
}

void atomic_dissemination(CommState& c, ThreadSlot& self) {
  const int n = c.local_count;
  if (n == 1) return;
  const std::uint64_t stamp = (c.phase.load(std::memory_order_relaxed) << 32) | ++self.barrier_count;
  const int rounds = c.barrier_rounds;
  detail::Backoff backoff(c.yield_every);
  for (int k = 0, dist = 1; dist < n; ++k, dist <<= 1) {
    const int to = (self.local_tid + dist) % n;
    c.barrier_flags[to * rounds + k].v.store(stamp, std::memory_order_release);
    const auto& mine = c.barrier_flags[self.local_tid * rounds + k].v;
    while (mine.load(std::memory_order_acquire) < stamp) backoff.idle();
  }
}

void check_root(const CommState& c, int root) {
  if (root < 0 || root >= c.table.total()) {
    throw Error(ErrorCode::InvalidArgument, "root " + std::to_string(root) + " out of range");
  }
}

}  // namespace

std::size_t element_size(ElemType t) noexcept {
  switch (t) {
    case ElemType::Int32: return 4;
    case ElemType::Int64: return 8;
    case ElemType::Float64: return 8;
  }
  return 0;
}

void combine(std::span<std::byte> acc, std::span<const std::byte> in, std::size_t count, ReduceOp op) {
  switch (op.elem) {
    case ElemType::Int32: combine_typed<std::int32_t>(acc, in, count, op.kind); break;
    case ElemType::Int64: combine_typed<std::int64_t>(acc, in, count, op.kind); break;
    case ElemType::Float64: combine_typed<double>(acc, in, count, op.kind); break;
  }
}

void barrier(Threadcomm& comm, BarrierVariant variant) {
  CommState& c = *comm.state();
  if (!comm.valid()) throw Error(ErrorCode::InvalidHandle, "threadcomm handle is null or freed");
  ThreadSlot& self = detail::bound_slot(c);
  const int n = c.table.total();

  if (variant == BarrierVariant::Message) {
    const int tag = collective_tag(self, CollKind::Barrier);
    std::vector<int> members(n);
    for (int i = 0; i < n; ++i) members[i] = i;
    message_dissemination(self, members, self.global_rank, tag);
    return;
  }

  atomic_dissemination(c, self);
  if (c.table.proc_count() == 1) return;
  // Every rank advances the counter so tags stay aligned across ranks.
  const int tag = collective_tag(self, CollKind::LeaderBarrier);
  if (self.local_tid == 0) {
    const auto prefix = c.table.prefix();
    std::vector<int> leaders(prefix.begin(), prefix.end() - 1);
    message_dissemination(self, leaders, c.proc_rank, tag);
  }
  atomic_dissemination(c, self);
}

void bcast(Threadcomm& comm, std::span<std::byte> buf, int root) {
  if (!comm.valid()) throw Error(ErrorCode::InvalidHandle, "threadcomm handle is null or freed");
  CommState& c = *comm.state();
  ThreadSlot& self = detail::bound_slot(c);
  check_root(c, root);
  const int n = c.table.total();
  const int tag = collective_tag(self, CollKind::Bcast);
  const int vr = (self.global_rank - root + n) % n;

  int mask = 1;
  while (mask < n) {
    if ((vr & mask) != 0) {
      const int src = (vr - mask + root) % n;
      const Envelope env = detail::recv_internal(self, buf, {src, tag});
      if (env.msg_len != buf.size()) throw Error(ErrorCode::InvalidArgument, "bcast buffer length differs from root");
      break;
    }
    mask <<= 1;
  }
  mask >>= 1;
  while (mask > 0) {
    if (vr + mask < n) detail::send_internal(self, buf, (vr + mask + root) % n, tag);
    mask >>= 1;
  }
}

void reduce(Threadcomm& comm, std::span<const std::byte> sendbuf, std::span<std::byte> recvbuf, std::size_t count,
            ReduceOp op, int root) {
  if (!comm.valid()) throw Error(ErrorCode::InvalidHandle, "threadcomm handle is null or freed");
  CommState& c = *comm.state();
  ThreadSlot& self = detail::bound_slot(c);
  check_root(c, root);
  const std::size_t bytes = count * element_size(op.elem);
  if (sendbuf.size() < bytes || (self.global_rank == root && recvbuf.size() < bytes)) {
    throw Error(ErrorCode::InvalidArgument, "reduce buffer smaller than count elements");
  }
  const int n = c.table.total();
  const int tag = collective_tag(self, CollKind::Reduce);
  const int vr = (self.global_rank - root + n) % n;

  std::vector<std::byte> acc(sendbuf.begin(), sendbuf.begin() + static_cast<std::ptrdiff_t>(bytes));
  std::vector<std::byte> tmp;
  int mask = 1;
  while (mask < n) {
    if ((vr & mask) == 0) {
      const int child = vr | mask;
      if (child < n) {
        tmp.resize(bytes);
        const Envelope env = detail::recv_internal(self, tmp, {(child + root) % n, tag});
        if (env.msg_len != bytes) throw Error(ErrorCode::InvalidArgument, "reduce count differs across ranks");
        combine(acc, tmp, count, op);
      }
    } else {
      detail::send_internal(self, acc, ((vr & ~mask) + root) % n, tag);
      break;
    }
    mask <<= 1;
  }
  if (self.global_rank == root && bytes != 0) std::memcpy(recvbuf.data(), acc.data(), bytes);
}

void allreduce(Threadcomm& comm, std::span<const std::byte> sendbuf, std::span<std::byte> recvbuf,
               std::size_t count, ReduceOp op) {
  const std::size_t bytes = count * element_size(op.elem);
  if (recvbuf.size() < bytes) throw Error(ErrorCode::InvalidArgument, "allreduce buffer smaller than count elements");
  reduce(comm, sendbuf, recvbuf, count, op, 0);
  bcast(comm, recvbuf.first(bytes), 0);
}

}  // namespace threadcomm
