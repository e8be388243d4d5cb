#pragma once

#include <atomic>
#include <cstdint>
#include <deque>
#include <list>
#include <memory>
#include <thread>
#include <unordered_map>
#include <vector>

#include "threadcomm/cell_pool.hpp"
#include "threadcomm/mpsc_queue.hpp"
#include "threadcomm/proc_group.hpp"
#include "threadcomm/threadcomm.hpp"

namespace threadcomm::detail {

enum class SendPath : std::uint8_t { Eager, OneCopy, Pipeline, Remote };

struct RequestState {
  enum class Kind : std::uint8_t { Send, Recv };
  enum class Phase : std::uint8_t { Queued, AwaitingAck, Active, Complete };

  Kind kind = Kind::Send;
  Phase phase = Phase::Queued;
  bool failed = false;
  bool counted = false;  // included in ThreadSlot::pending
  ErrorCode error = ErrorCode::Truncation;
  std::atomic<std::uint32_t> done_flag{0};  // set by the receiver of a 1-copy send
  Envelope env;
  ThreadSlot* owner = nullptr;

  // Send side.
  std::span<const std::byte> sbuf;
  int dst = 0;
  int tag = 0;
  int dst_slot = 0;
  SendPath path = SendPath::Eager;
  std::uint32_t next_chunk = 0;
  std::uint32_t chunk_total = 0;

  // Receive side.
  std::span<std::byte> rbuf;
  MatchSpec spec;
};

/// An arrival that matched no posted receive. Cell contents are copied out
/// (or, for 1-copy headers, the sender references kept) and the cell goes
/// straight back to the pool, so unmatched traffic never pins pool cells.
struct Unexpected {
  Envelope env;
  CellKind kind = CellKind::Eager;
  std::vector<std::byte> data;  // Eager payload or staged pipeline bytes
  std::uint32_t chunks_seen = 0;
  std::uint32_t chunk_total = 0;
  const std::byte* buf_ref = nullptr;
  std::atomic<std::uint32_t>* done_flag_ref = nullptr;

  bool complete() const noexcept { return kind != CellKind::PipelineChunk || chunks_seen == chunk_total; }
};

/// Reassembly state of one pipelined message, keyed by (src, seq).
struct Assembly {
  RequestState* req = nullptr;  // null while the message is unexpected
  std::list<Unexpected>::iterator unexp;
  std::uint32_t chunks_seen = 0;
  std::uint32_t chunk_total = 0;
  bool discard = false;  // truncated: drop remaining chunks
};

struct alignas(64) ThreadSlot {
  CommState* comm = nullptr;
  int local_tid = 0;
  int global_rank = 0;
  MpscQueue<Cell> inbox;

  std::deque<RequestState*> posted;
  std::list<Unexpected> unexpected;
  std::unordered_map<std::uint64_t, Assembly> assembling;
  std::deque<RequestState*> send_backlog;  // local sends waiting for cells, in order
  std::vector<std::uint32_t> next_seq;     // per destination rank
  std::vector<std::unique_ptr<RequestState>> detached;

  std::uint32_t coll_seq = 0;
  std::uint64_t barrier_count = 0;
  int pending = 0;
  std::unordered_map<int, std::int64_t> attrs;
  SlotStats stats;
};

struct alignas(64) PaddedFlag {
  std::atomic<std::uint64_t> v{0};
};

struct CommState final : FrameSink {
  CommState(std::shared_ptr<ProcGroup> parent, std::uint16_t comm_id, Config cfg, RankTable table);
  ~CommState() override;

  int local_slot(std::uint32_t dst_rank) const noexcept override {
    const int t = static_cast<int>(dst_rank) - first_rank;
    return (t >= 0 && t < local_count) ? t : -1;
  }
  std::size_t cell_capacity() const noexcept override { return pool.cell_capacity(); }
  Cell* try_acquire(int slot) noexcept override { return pool.acquire(slot); }
  void deliver(int slot, Cell* cell) noexcept override { slots[slot].inbox.push(cell); }

  bool is_local(int rank) const noexcept { return rank >= first_rank && rank < first_rank + local_count; }

  std::shared_ptr<ProcGroup> parent;
  std::uint16_t comm_id;
  Config cfg;
  std::uint32_t yield_every;
  RankTable table;
  int proc_rank;
  int local_count;
  int first_rank;
  CellPool pool;
  std::unique_ptr<ThreadSlot[]> slots;

  // Lifecycle: phase is even while inactive, odd while active.
  alignas(64) std::atomic<std::uint64_t> phase{0};
  alignas(64) std::atomic<int> start_arrivals{0};
  alignas(64) std::atomic<int> finish_arrivals{0};
  alignas(64) std::atomic<int> finish_departures{0};
  alignas(64) std::atomic<std::uint64_t> finish_gate{~0ull};

  // Shared-atomic dissemination barrier: local_count x barrier_rounds flags.
  int barrier_rounds;
  std::unique_ptr<PaddedFlag[]> barrier_flags;
};

/// Spin-then-yield policy for blocking loops.
class Backoff {
 public:
  explicit Backoff(std::uint32_t yield_every) noexcept : every_(yield_every ? yield_every : 1) {}
  void idle() noexcept {
    if (++n_ >= every_) {
      n_ = 0;
      std::this_thread::yield();
    }
  }
  void reset() noexcept { n_ = 0; }

 private:
  std::uint32_t every_;
  std::uint32_t n_ = 0;
};

/// The calling thread's slot in `comm`, or Error(InvalidState).
ThreadSlot& bound_slot(const CommState& comm);
ThreadSlot* find_binding(const CommState& comm) noexcept;

// Point-to-point engine, always on the calling thread's own slot.
void post_send(ThreadSlot& self, RequestState& req);
void post_recv(ThreadSlot& self, RequestState& req);
bool poll_complete(ThreadSlot& self, RequestState& req);
Envelope wait(ThreadSlot& self, RequestState& req);
std::size_t progress(ThreadSlot& self);
/// Blocking send/recv without tag validation; used by collectives with
/// reserved tags.
void send_internal(ThreadSlot& self, std::span<const std::byte> buf, int dst, int tag);
Envelope recv_internal(ThreadSlot& self, std::span<std::byte> buf, MatchSpec spec);
// Posts the receive and the send together so paired ranks cannot block on
// each other's synchronous sends.
Envelope sendrecv_internal(ThreadSlot& self, std::span<const std::byte> sbuf, int dst, int tag,
                           std::span<std::byte> rbuf, MatchSpec spec);
/// Drops whatever is still queued for the slot; returns the number of
/// messages discarded.
std::size_t drain(ThreadSlot& self);

}  // namespace threadcomm::detail
