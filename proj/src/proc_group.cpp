#include "threadcomm/proc_group.hpp"

#include <fcntl.h>
#include <poll.h>
#include <sys/socket.h>
#include <sys/uio.h>
#include <sys/un.h>
#include <unistd.h>

#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <cstring>

#include "threadcomm/error.hpp"

namespace threadcomm {

namespace {

using Clock = std::chrono::steady_clock;

[[noreturn]] void throw_errno(const std::string& what) {
  throw Error(ErrorCode::Transport, what + ": " + std::strerror(errno));
}

int remaining_ms(Clock::time_point deadline) {
  const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now()).count();
  return left < 0 ? 0 : static_cast<int>(left);
}

bool wait_readable(int fd, Clock::time_point deadline) {
  for (;;) {
    pollfd p{fd, POLLIN, 0};
    const int rc = ::poll(&p, 1, remaining_ms(deadline));
    if (rc > 0) return true;
    if (rc == 0) return false;
    if (errno != EINTR) throw_errno("poll");
  }
}

// Returns false on EOF before the first byte; throws on EOF mid-record.
bool read_exact(int fd, std::byte* out, std::size_t n) {
  std::size_t got = 0;
  while (got < n) {
    const ssize_t rc = ::read(fd, out + got, n - got);
    if (rc > 0) {
      got += static_cast<std::size_t>(rc);
    } else if (rc == 0) {
      if (got == 0) return false;
      throw Error(ErrorCode::Transport, "stream closed mid-frame");
    } else if (errno != EINTR) {
      throw_errno("read");
    }
  }
  return true;
}

void write_all(int fd, iovec* iov, int iovcnt) {
  while (iovcnt > 0) {
    msghdr msg{};
    msg.msg_iov = iov;
    msg.msg_iovlen = static_cast<std::size_t>(iovcnt);
    const ssize_t rc = ::sendmsg(fd, &msg, MSG_NOSIGNAL);
    if (rc < 0) {
      if (errno == EINTR) continue;
      throw_errno("sendmsg");
    }
    auto left = static_cast<std::size_t>(rc);
    while (iovcnt > 0 && left >= iov->iov_len) {
      left -= iov->iov_len;
      ++iov;
      --iovcnt;
    }
    if (iovcnt > 0) {
      iov->iov_base = static_cast<char*>(iov->iov_base) + left;
      iov->iov_len -= left;
    }
  }
}

sockaddr_un socket_address(const std::string& dir, int proc) {
  sockaddr_un addr{};
  addr.sun_family = AF_UNIX;
  const std::string path = dir + "/p" + std::to_string(proc) + ".sock";
  if (path.size() >= sizeof(addr.sun_path)) {
    throw Error(ErrorCode::InvalidArgument, "rendezvous path too long: " + path);
  }
  std::memcpy(addr.sun_path, path.c_str(), path.size() + 1);
  return addr;
}

int env_int(const char* name, int fallback) {
  const char* v = std::getenv(name);
  if (v == nullptr || *v == '\0') return fallback;
  char* end = nullptr;
  const long x = std::strtol(v, &end, 10);
  if (*end != '\0') throw Error(ErrorCode::InvalidArgument, std::string("bad integer in ") + name);
  return static_cast<int>(x);
}

}  // namespace

namespace bridge {

int read_hello(int fd, int proc_count, Clock::time_point deadline) {
  std::array<std::byte, wire::kHelloSize> buf{};
  std::size_t got = 0;
  while (got < buf.size()) {
    if (!wait_readable(fd, deadline)) throw Error(ErrorCode::Transport, "timed out waiting for hello");
    const ssize_t rc = ::read(fd, buf.data() + got, buf.size() - got);
    if (rc == 0) throw Error(ErrorCode::Transport, "stream closed before hello");
    if (rc < 0) {
      if (errno == EINTR) continue;
      throw_errno("read hello");
    }
    got += static_cast<std::size_t>(rc);
  }
  const wire::Hello h = wire::decode_hello(buf);
  if (static_cast<int>(h.proc_count) != proc_count) {
    throw Error(ErrorCode::Protocol, "hello from a group of " + std::to_string(h.proc_count) + " processes, expected " +
                                         std::to_string(proc_count));
  }
  if (static_cast<int>(h.proc_rank) >= proc_count) {
    throw Error(ErrorCode::Protocol, "hello with out-of-range rank " + std::to_string(h.proc_rank));
  }
  return static_cast<int>(h.proc_rank);
}

}  // namespace bridge

ProcGroup::ProcGroup(int proc_rank, int proc_count)
    : proc_rank_(proc_rank), proc_count_(proc_count), by_peer_(proc_count, nullptr), peer_closed_(proc_count, false) {}

std::shared_ptr<ProcGroup> ProcGroup::single() { return std::shared_ptr<ProcGroup>(new ProcGroup(0, 1)); }

std::shared_ptr<ProcGroup> ProcGroup::from_environment() {
  const int count = env_int("TC_PROC_COUNT", 1);
  if (count <= 1) return single();
  const int rank = env_int("TC_PROC_RANK", -1);
  const char* rdv = std::getenv("TC_RENDEZVOUS");
  if (rdv == nullptr) throw Error(ErrorCode::InvalidArgument, "TC_RENDEZVOUS is not set");
  const int timeout_s = env_int("TC_RENDEZVOUS_TIMEOUT", 10);
  return connect(rank, count, rdv, std::chrono::seconds(timeout_s));
}

std::shared_ptr<ProcGroup> ProcGroup::connect(int proc_rank, int proc_count, const std::string& rendezvous,
                                              std::chrono::milliseconds timeout) {
  if (proc_count < 1 || proc_rank < 0 || proc_rank >= proc_count) {
    throw Error(ErrorCode::InvalidArgument, "bad process rank/count");
  }
  if (proc_count == 1) return single();

  std::shared_ptr<ProcGroup> pg(new ProcGroup(proc_rank, proc_count));
  const auto deadline = Clock::now() + timeout;

  const int listener = ::socket(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0);
  if (listener < 0) throw_errno("socket");
  struct Closer {
    int fd;
    std::string path;
    ~Closer() {
      ::close(fd);
      if (!path.empty()) ::unlink(path.c_str());
    }
  } listener_guard{listener, {}};

  const sockaddr_un self = socket_address(rendezvous, proc_rank);
  ::unlink(self.sun_path);
  if (::bind(listener, reinterpret_cast<const sockaddr*>(&self), sizeof(self)) < 0) throw_errno("bind");
  listener_guard.path = self.sun_path;
  if (::listen(listener, proc_count) < 0) throw_errno("listen");

  auto add_endpoint = [&](int peer, int fd) {
    if (pg->by_peer_[peer] != nullptr) {
      ::close(fd);
      throw Error(ErrorCode::Protocol, "duplicate connection from process " + std::to_string(peer));
    }
    auto ep = std::make_unique<Endpoint>();
    ep->peer_proc = peer;
    ep->fd = fd;
    pg->by_peer_[peer] = ep.get();
    pg->endpoints_.push_back(std::move(ep));
  };

  for (int peer = 0; peer < proc_rank; ++peer) {
    const sockaddr_un addr = socket_address(rendezvous, peer);
    int fd = -1;
    for (;;) {
      fd = ::socket(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0);
      if (fd < 0) throw_errno("socket");
      if (::connect(fd, reinterpret_cast<const sockaddr*>(&addr), sizeof(addr)) == 0) break;
      const int err = errno;
      ::close(fd);
      if (err != ENOENT && err != ECONNREFUSED && err != EAGAIN && err != EINTR) {
        errno = err;
        throw_errno("connect to process " + std::to_string(peer));
      }
      if (Clock::now() >= deadline) {
        throw Error(ErrorCode::Transport, "rendezvous timeout connecting to process " + std::to_string(peer));
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
    auto hello = wire::encode_hello({static_cast<std::uint32_t>(proc_rank), static_cast<std::uint32_t>(proc_count)});
    iovec iov{hello.data(), hello.size()};
    write_all(fd, &iov, 1);
    add_endpoint(peer, fd);
  }

  for (int n = proc_rank + 1; n < proc_count; ++n) {
    if (!wait_readable(listener, deadline)) throw Error(ErrorCode::Transport, "rendezvous timeout in accept");
    const int fd = ::accept4(listener, nullptr, nullptr, SOCK_CLOEXEC);
    if (fd < 0) throw_errno("accept");
    int peer = -1;
    try {
      peer = bridge::read_hello(fd, proc_count, deadline);
      if (peer <= proc_rank) throw Error(ErrorCode::Protocol, "unexpected connection from lower rank");
    } catch (...) {
      ::close(fd);
      throw;
    }
    add_endpoint(peer, fd);
  }

  pg->start_agent();
  return pg;
}

// No closing handshake: every comm's free() already synchronizes with the
// peers, so nothing but control frames can still be in flight here, and
// frames written before a close are still readable by the peer.
ProcGroup::~ProcGroup() {
  stop_agent();
  for (auto& ep : endpoints_) ::close(ep->fd);
}

Endpoint& ProcGroup::endpoint(int peer) const {
  if (peer < 0 || peer >= proc_count_ || by_peer_[peer] == nullptr) {
    throw Error(ErrorCode::InvalidArgument, "no endpoint for process " + std::to_string(peer));
  }
  return *by_peer_[peer];
}

void ProcGroup::send_frame(int peer, const wire::WireHeader& h, std::span<const std::byte> payload) {
  Endpoint& ep = endpoint(peer);
  auto header = wire::encode(h);
  iovec iov[2] = {{header.data(), header.size()},
                  {const_cast<std::byte*>(payload.data()), payload.size()}};
  {
    std::lock_guard lock(ep.send_lock);
    write_all(ep.fd, iov, payload.empty() ? 1 : 2);
  }
  frames_sent_.fetch_add(1, std::memory_order_relaxed);
}

std::vector<std::uint32_t> ProcGroup::allgather(std::uint16_t comm_id, CtrlOp op, std::uint32_t seq,
                                                std::uint32_t value) {
  std::vector<std::uint32_t> out(proc_count_, 0);
  out[proc_rank_] = value;
  if (!multi()) return out;

  wire::WireHeader h;
  h.kind = wire::FrameKind::Ctrl;
  h.comm_id = comm_id;
  h.src_rank = static_cast<std::uint32_t>(proc_rank_);
  h.tag = static_cast<std::int32_t>(op);
  h.seq = seq;
  h.msg_len = 4;
  std::array<std::byte, 4> payload{};
  for (int i = 0; i < 4; ++i) payload[i] = static_cast<std::byte>((value >> (8 * i)) & 0xff);
  for (int peer = 0; peer < proc_count_; ++peer) {
    if (peer == proc_rank_) continue;
    h.dst_rank = static_cast<std::uint32_t>(peer);
    send_frame(peer, h, payload);
  }

  std::unique_lock lock(mu_);
  for (int peer = 0; peer < proc_count_; ++peer) {
    if (peer == proc_rank_) continue;
    const CtrlKey key{comm_id, static_cast<std::int32_t>(op), seq, peer};
    cv_.wait(lock, [&] { return mailbox_.count(key) != 0 || peer_closed_[peer]; });
    auto it = mailbox_.find(key);
    if (it == mailbox_.end()) {
      throw Error(ErrorCode::Transport, "process " + std::to_string(peer) + " closed its stream");
    }
    out[peer] = it->second;
    mailbox_.erase(it);
  }
  return out;
}

std::uint16_t ProcGroup::allocate_comm_id() {
  std::lock_guard lock(mu_);
  return next_comm_id_++;
}

void ProcGroup::register_sink(std::uint16_t comm_id, FrameSink* sink) {
  std::lock_guard lock(sink_mu_);
  sinks_[comm_id] = sink;
}

void ProcGroup::unregister_sink(std::uint16_t comm_id) {
  std::lock_guard lock(sink_mu_);
  sinks_.erase(comm_id);
  for (auto it = backlog_.begin(); it != backlog_.end();) {
    if (it->first.first == comm_id) {
      backlog_frames_ -= it->second.size();
      it = backlog_.erase(it);
    } else {
      ++it;
    }
  }
}

std::uint64_t ProcGroup::frames_sent() const noexcept { return frames_sent_.load(std::memory_order_relaxed); }
std::uint64_t ProcGroup::frames_received() const noexcept {
  return frames_received_.load(std::memory_order_relaxed);
}

void ProcGroup::start_agent() {
  if (::pipe2(wake_pipe_, O_CLOEXEC) < 0) throw_errno("pipe");
  agent_ = std::thread([this] { agent_loop(); });
}

void ProcGroup::stop_agent() noexcept {
  if (!agent_.joinable()) return;
  const char b = 1;
  while (::write(wake_pipe_[1], &b, 1) < 0 && errno == EINTR) {
  }
  agent_.join();
  ::close(wake_pipe_[0]);
  ::close(wake_pipe_[1]);
}

void ProcGroup::agent_fail(const std::string& what) const {
  std::fprintf(stderr, "threadcomm: progress agent on process %d: %s\n", proc_rank_, what.c_str());
  std::abort();
}

void ProcGroup::agent_loop() {
  std::vector<pollfd> fds;
  std::vector<Endpoint*> owners;
  for (auto& ep : endpoints_) {
    fds.push_back({ep->fd, POLLIN, 0});
    owners.push_back(ep.get());
  }
  fds.push_back({wake_pipe_[0], POLLIN, 0});

  for (;;) {
    bool pending;
    {
      std::lock_guard lock(sink_mu_);
      pending = flush_backlogs();
    }
    // With frames parked for a full pool, wake up periodically to retry.
    const int rc = ::poll(fds.data(), fds.size(), pending ? 1 : -1);
    if (rc < 0) {
      if (errno == EINTR) continue;
      agent_fail(std::string("poll: ") + std::strerror(errno));
    }
    if (fds.back().revents != 0) return;
    for (std::size_t i = 0; i + 1 < fds.size(); ++i) {
      if (fds[i].fd < 0 || fds[i].revents == 0) continue;
      bool open = true;
      try {
        open = read_frame(*owners[i]);
      } catch (const Error& e) {
        agent_fail(e.what());
      }
      if (!open) {
        std::lock_guard lock(mu_);
        peer_closed_[owners[i]->peer_proc] = true;
        fds[i].fd = -1;
        cv_.notify_all();
      }
    }
  }
}

bool ProcGroup::read_frame(Endpoint& ep) {
  wire::HeaderBytes raw{};
  if (!read_exact(ep.fd, raw.data(), raw.size())) return false;
  const wire::WireHeader h = wire::decode(raw);
  frames_received_.fetch_add(1, std::memory_order_relaxed);

  switch (h.kind) {
    case wire::FrameKind::Ctrl: {
      if (h.msg_len != 4) agent_fail("control frame with payload length " + std::to_string(h.msg_len));
      std::array<std::byte, 4> p{};
      if (!read_exact(ep.fd, p.data(), p.size())) throw Error(ErrorCode::Transport, "stream closed mid-frame");
      std::uint32_t v = 0;
      for (int i = 0; i < 4; ++i) v |= std::to_integer<std::uint32_t>(p[i]) << (8 * i);
      std::lock_guard lock(mu_);
      mailbox_[CtrlKey{h.comm_id, h.tag, h.seq, ep.peer_proc}] = v;
      cv_.notify_all();
      return true;
    }
    case wire::FrameKind::Eager:
    case wire::FrameKind::PipelineChunk: {
      std::lock_guard lock(sink_mu_);
      handle_data(h, ep);
      return true;
    }
    case wire::FrameKind::Ack:
      agent_fail("unexpected ack frame");
  }
  return true;
}

void ProcGroup::handle_data(const wire::WireHeader& h, Endpoint& ep) {
  auto sit = sinks_.find(h.comm_id);
  if (sit == sinks_.end()) agent_fail("frame for unknown communicator " + std::to_string(h.comm_id));
  FrameSink* sink = sit->second;
  const int slot = sink->local_slot(h.dst_rank);
  if (slot < 0) agent_fail("frame for rank " + std::to_string(h.dst_rank) + " which is not local");
  if (h.kind == wire::FrameKind::PipelineChunk &&
      (h.chunk_total == 0 || h.chunk_index >= h.chunk_total || h.chunk_total > h.msg_len)) {
    agent_fail("malformed chunk header");
  }
  const std::uint64_t len = wire::payload_length(h);
  if (len > sink->cell_capacity()) {
    agent_fail("frame payload of " + std::to_string(len) + " bytes exceeds cell capacity");
  }

  const auto key = std::make_pair(h.comm_id, slot);
  auto bit = backlog_.find(key);
  Cell* cell = (bit == backlog_.end() || bit->second.empty()) ? sink->try_acquire(slot) : nullptr;
  if (cell == nullptr) {
    PendingFrame f{h, std::vector<std::byte>(len)};
    if (!read_exact(ep.fd, f.payload.data(), len) && len != 0) {
      throw Error(ErrorCode::Transport, "stream closed mid-frame");
    }
    backlog_[key].push_back(std::move(f));
    ++backlog_frames_;
    return;
  }
  if (len != 0 && !read_exact(ep.fd, cell->payload(), len)) {
    throw Error(ErrorCode::Transport, "stream closed mid-frame");
  }
  cell->kind = h.kind == wire::FrameKind::Eager ? CellKind::Eager : CellKind::PipelineChunk;
  cell->envelope = {static_cast<int>(h.src_rank), h.tag, h.msg_len, h.seq};
  cell->payload_len = static_cast<std::uint32_t>(len);
  cell->chunk_index = h.chunk_index;
  cell->chunk_total = h.chunk_total;
  sink->deliver(slot, cell);
}

bool ProcGroup::flush_backlogs() {
  if (backlog_frames_ == 0) return false;
  for (auto& [key, frames] : backlog_) {
    auto sit = sinks_.find(key.first);
    if (sit == sinks_.end()) continue;
    FrameSink* sink = sit->second;
    while (!frames.empty()) {
      Cell* cell = sink->try_acquire(key.second);
      if (cell == nullptr) break;
      PendingFrame& f = frames.front();
      std::memcpy(cell->payload(), f.payload.data(), f.payload.size());
      cell->kind = f.header.kind == wire::FrameKind::Eager ? CellKind::Eager : CellKind::PipelineChunk;
      cell->envelope = {static_cast<int>(f.header.src_rank), f.header.tag, f.header.msg_len, f.header.seq};
      cell->payload_len = static_cast<std::uint32_t>(f.payload.size());
      cell->chunk_index = f.header.chunk_index;
      cell->chunk_total = f.header.chunk_total;
      sink->deliver(key.second, cell);
      frames.pop_front();
      --backlog_frames_;
    }
  }
  return backlog_frames_ != 0;
}

}  // namespace threadcomm
