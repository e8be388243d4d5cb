#pragma once

#include <chrono>
#include <condition_variable>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <thread>
#include <atomic>
#include <tuple>
#include <vector>

#include "threadcomm/cell.hpp"
#include "threadcomm/wire.hpp"

namespace threadcomm {

/// Destination of inbound data frames for one communicator. Called only
/// from the progress agent thread.
class FrameSink {
 public:
  virtual ~FrameSink() = default;
  /// Local slot index of global rank `dst_rank`, or -1 if it is not local.
  virtual int local_slot(std::uint32_t dst_rank) const noexcept = 0;
  virtual std::size_t cell_capacity() const noexcept = 0;
  virtual Cell* try_acquire(int slot) noexcept = 0;
  virtual void deliver(int slot, Cell* cell) noexcept = 0;
};

enum class CtrlOp : std::int32_t { Init = 1, Start, Finish, Free, User };

/// One connected byte stream to a peer process.
struct Endpoint {
  int peer_proc = -1;
  int fd = -1;
  std::mutex send_lock;  // keeps header + payload contiguous on the stream
};

/// The parent group of processes a threadcomm is built on.
///
/// A single-process group has no endpoints and no agent. A multi-process
/// group holds one stream per peer (full mesh) and runs one agent thread that
/// is the sole reader of every stream: data frames become cells in the
/// destination thread's inbox, control frames land in a mailbox consumed by
/// allgather().
class ProcGroup {
 public:
  static std::shared_ptr<ProcGroup> single();
  /// Full-mesh bootstrap: binds `<rendezvous>/p<rank>.sock`, connects to every
  /// lower rank, then accepts every higher rank. Throws Error(Transport) on
  /// timeout and Error(Protocol) on a bad hello.
  static std::shared_ptr<ProcGroup> connect(int proc_rank, int proc_count, const std::string& rendezvous,
                                            std::chrono::milliseconds timeout);
  /// Uses TC_PROC_RANK / TC_PROC_COUNT / TC_RENDEZVOUS when set by tcrun,
  /// otherwise single(). TC_RENDEZVOUS_TIMEOUT (seconds) overrides the 10 s
  /// default.
  static std::shared_ptr<ProcGroup> from_environment();

  ProcGroup(const ProcGroup&) = delete;
  ProcGroup& operator=(const ProcGroup&) = delete;
  ~ProcGroup();

  int proc_rank() const noexcept { return proc_rank_; }
  int proc_count() const noexcept { return proc_count_; }
  bool multi() const noexcept { return proc_count_ > 1; }
  std::size_t endpoint_count() const noexcept { return endpoints_.size(); }
  int endpoint_fd(int peer) const { return endpoint(peer).fd; }

  /// Writes header and payload as one frame; safe from any thread.
  void send_frame(int peer, const wire::WireHeader& h, std::span<const std::byte> payload);

  /// Collective over all processes: returns `value` from each process,
  /// indexed by process rank. `(comm_id, op, seq)` must be unique per call.
  std::vector<std::uint32_t> allgather(std::uint16_t comm_id, CtrlOp op, std::uint32_t seq, std::uint32_t value);
  void handshake(std::uint16_t comm_id, CtrlOp op, std::uint32_t seq) { allgather(comm_id, op, seq, 0); }

  /// Every process must allocate ids in the same order.
  std::uint16_t allocate_comm_id();
  void register_sink(std::uint16_t comm_id, FrameSink* sink);
  void unregister_sink(std::uint16_t comm_id);

  std::uint64_t frames_sent() const noexcept;
  std::uint64_t frames_received() const noexcept;

 private:
  ProcGroup(int proc_rank, int proc_count);

  struct PendingFrame {
    wire::WireHeader header;
    std::vector<std::byte> payload;
  };
  using CtrlKey = std::tuple<std::uint16_t, std::int32_t, std::uint32_t, int>;

  Endpoint& endpoint(int peer) const;
  void start_agent();
  void stop_agent() noexcept;
  void agent_loop();
  bool read_frame(Endpoint& ep);
  void handle_data(const wire::WireHeader& h, Endpoint& ep);
  bool flush_backlogs();
  [[noreturn]] void agent_fail(const std::string& what) const;

  int proc_rank_;
  int proc_count_;
  std::vector<std::unique_ptr<Endpoint>> endpoints_;  // proc_count - 1 entries
  std::vector<Endpoint*> by_peer_;                    // indexed by process rank

  std::thread agent_;
  int wake_pipe_[2] = {-1, -1};
  bool stopping_ = false;

  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::map<CtrlKey, std::uint32_t> mailbox_;
  std::vector<bool> peer_closed_;
  std::map<std::uint16_t, FrameSink*> sinks_;  // guarded by sink_mu_
  std::mutex sink_mu_;
  std::uint16_t next_comm_id_ = 1;

  // Frames waiting for a free cell, per (comm, slot). Guarded by sink_mu_.
  std::map<std::pair<std::uint16_t, int>, std::deque<PendingFrame>> backlog_;
  std::size_t backlog_frames_ = 0;

  std::atomic<std::uint64_t> frames_sent_{0};
  std::atomic<std::uint64_t> frames_received_{0};
};

namespace bridge {

/// Reads and validates a hello record from a freshly accepted stream.
/// Returns the peer's process rank. Throws Error(Protocol) on a bad magic,
/// a process-count mismatch or an out-of-range rank, Error(Transport) on
/// EOF or timeout.
int read_hello(int fd, int proc_count, std::chrono::steady_clock::time_point deadline);

}  // namespace bridge

}  // namespace threadcomm
