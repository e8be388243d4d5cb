#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>

#include "threadcomm/cell.hpp"
#include "threadcomm/config.hpp"
#include "threadcomm/error.hpp"
#include "threadcomm/proc_group.hpp"
#include "threadcomm/rank_table.hpp"

namespace threadcomm {

namespace detail {
struct CommState;
struct RequestState;
struct ThreadSlot;
}  // namespace detail

struct MatchSpec {
  int src = kAnySource;
  int tag = kAnyTag;
};

/// Per-rank traffic counters, reset at every start().
struct SlotStats {
  std::uint64_t eager_sends = 0;
  std::uint64_t onecopy_sends = 0;
  std::uint64_t pipeline_sends = 0;
  std::uint64_t remote_sends = 0;  // to a thread in another process
  std::uint64_t self_sends = 0;
  std::uint64_t recvs = 0;
  std::uint64_t unexpected = 0;
  std::uint64_t requests_allocated = 0;
  std::uint64_t discarded_at_finish = 0;
};

/// Completion handle for isend/irecv. Move-only; owned by the thread that
/// created it. A default-constructed or already-complete request holds no
/// heap state.
///
/// Dropping a pending request detaches it: the runtime still completes the
/// operation and the buffer must stay valid until then.
class Request {
 public:
  Request() noexcept;
  Request(Request&&) noexcept;
  Request& operator=(Request&&) noexcept;
  ~Request();

  /// Blocks, driving progress on the owning rank, until complete. Throws
  /// Error(Truncation) if the matched message did not fit.
  Envelope wait();
  /// One progress pass; the envelope once complete.
  std::optional<Envelope> test();
  bool pending() const noexcept;

 private:
  friend class Threadcomm;
  explicit Request(std::unique_ptr<detail::RequestState> s) noexcept;
  explicit Request(const Envelope& done) noexcept;
  void release() noexcept;

  std::unique_ptr<detail::RequestState> state_;
  Envelope env_;
};

/// A communicator whose ranks are threads.
///
/// Lifecycle: init() and free() are called outside the parallel region by one
/// thread per process; inside it, every participating thread calls start(),
/// communicates, then calls finish(). Ranks are assigned by arrival order in
/// start() and are ordered by process. Nothing except free() works on an
/// inactive communicator.
class Threadcomm {
 public:
  Threadcomm() noexcept;
  Threadcomm(Threadcomm&&) noexcept;
  Threadcomm& operator=(Threadcomm&&) noexcept;
  ~Threadcomm();

  /// Collective over `parent`: builds the rank table from every process's
  /// `num_threads` and preallocates the cell pool.
  static Threadcomm init(std::shared_ptr<ProcGroup> parent, int num_threads, Config config = Config::from_environment());
  void free();

  /// Binds the calling thread and returns its rank once every local thread
  /// (and, with several processes, every process) has arrived.
  int start();
  /// Collective deactivation; drops the caller's attributes and binding.
  void finish();

  int rank() const;
  int size() const;
  bool valid() const noexcept { return state_ != nullptr; }
  bool active() const;

  void attr_set(int key, std::int64_t value);
  std::optional<std::int64_t> attr_get(int key) const;

  void send(std::span<const std::byte> buf, int dst, int tag);
  Envelope recv(std::span<std::byte> buf, MatchSpec spec = {});
  Request isend(std::span<const std::byte> buf, int dst, int tag);
  Request irecv(std::span<std::byte> buf, MatchSpec spec = {});
  /// Drains the caller's inbox and advances queued sends; returns the number
  /// of events handled.
  std::size_t progress();

  template <class T>
  void send(std::span<const T> buf, int dst, int tag) {
    send(std::as_bytes(buf), dst, tag);
  }
  template <class T>
  Envelope recv(std::span<T> buf, MatchSpec spec = {}) {
    return recv(std::as_writable_bytes(buf), spec);
  }
  template <class T>
  Request isend(std::span<const T> buf, int dst, int tag) {
    return isend(std::as_bytes(buf), dst, tag);
  }
  template <class T>
  Request irecv(std::span<T> buf, MatchSpec spec = {}) {
    return irecv(std::as_writable_bytes(buf), spec);
  }

  const RankTable& rank_table() const;
  const Config& config() const;
  ProcGroup& parent() const;
  int local_threads() const;
  /// Arrived messages still waiting for a matching receive on the caller.
  std::size_t unexpected_count() const;
  /// The calling rank's counters.
  SlotStats stats() const;
  /// Free cells over all local sub-pools; exact only when quiescent.
  std::size_t free_cells() const;
  std::size_t total_cells() const;

  detail::CommState* state() const noexcept { return state_.get(); }

 private:
  explicit Threadcomm(std::unique_ptr<detail::CommState> s) noexcept;
  detail::CommState& checked() const;

  std::unique_ptr<detail::CommState> state_;
};

}  // namespace threadcomm
