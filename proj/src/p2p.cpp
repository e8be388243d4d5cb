#include <algorithm>
#include <cassert>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <string>

#include "comm_state.hpp"
#include "threadcomm/wire.hpp"

namespace threadcomm {

namespace detail {

namespace {

void complete(RequestState& r) noexcept {
  r.phase = RequestState::Phase::Complete;
  if (r.counted) {
    --r.owner->pending;
    r.counted = false;
  }
}

void fail(RequestState& r, ErrorCode e) noexcept {
  r.failed = true;
  r.error = e;
}

bool matches(const MatchSpec& s, const Envelope& e) noexcept {
  if (s.src != kAnySource && s.src != e.src_rank) return false;
  if (s.tag == kAnyTag) return e.tag >= 0 && e.tag < kTagUpperBound;
  return s.tag == e.tag;
}

std::uint64_t assembly_key(int src, std::uint32_t seq) noexcept {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(src)) << 32) | seq;
}

RequestState* take_posted(ThreadSlot& self, const Envelope& env) {
  for (auto it = self.posted.begin(); it != self.posted.end(); ++it) {
    if (matches((*it)->spec, env)) {
      RequestState* r = *it;
      self.posted.erase(it);
      return r;
    }
  }
  return nullptr;
}

std::size_t eager_limit(const CommState& c) noexcept {
  return std::min(c.cfg.eager_threshold, c.pool.cell_capacity());
}

SendPath choose_local_path(const CommState& c, bool self_send, std::size_t len) noexcept {
  const std::size_t cap = c.pool.cell_capacity();
  // A blocking 1-copy send to oneself could never complete; buffer it instead.
  if (self_send) return len <= cap ? SendPath::Eager : SendPath::Pipeline;
  switch (c.cfg.protocol) {
    case Protocol::Eager:
      return len <= cap ? SendPath::Eager : SendPath::Pipeline;
    case Protocol::OneCopy:
      return SendPath::OneCopy;
    case Protocol::Pipeline:
      return len <= eager_limit(c) ? SendPath::Eager : SendPath::Pipeline;
    case Protocol::Auto:
      break;
  }
  if (len <= eager_limit(c)) return SendPath::Eager;
  return len <= c.cfg.eager_threshold ? SendPath::Pipeline : SendPath::OneCopy;
}

void count_send(ThreadSlot& self, SendPath path, bool self_send) noexcept {
  switch (path) {
    case SendPath::Eager: ++self.stats.eager_sends; break;
    case SendPath::OneCopy: ++self.stats.onecopy_sends; break;
    case SendPath::Pipeline: ++self.stats.pipeline_sends; break;
    case SendPath::Remote: ++self.stats.remote_sends; break;
  }
  if (self_send) ++self.stats.self_sends;
}

void fill_eager(Cell* cell, const Envelope& env, std::span<const std::byte> data) noexcept {
  cell->kind = CellKind::Eager;
  cell->envelope = env;
  cell->payload_len = static_cast<std::uint32_t>(data.size());
  if (!data.empty()) std::memcpy(cell->payload(), data.data(), data.size());
}

// Enqueues as much of a local send as the destination pool allows. Returns
// true once nothing is left to enqueue.
bool advance_send(ThreadSlot& self, RequestState& r) {
  CommState& c = *self.comm;
  MpscQueue<Cell>& inbox = c.slots[r.dst_slot].inbox;
  switch (r.path) {
    case SendPath::Eager: {
      Cell* cell = c.pool.acquire(r.dst_slot);
      if (cell == nullptr) return false;
      fill_eager(cell, r.env, r.sbuf);
      inbox.push(cell);
      complete(r);
      return true;
    }
    case SendPath::OneCopy: {
      Cell* cell = c.pool.acquire(r.dst_slot);
      if (cell == nullptr) return false;
      cell->kind = CellKind::OneCopyHeader;
      cell->envelope = r.env;
      cell->payload_len = 0;
      cell->buf_ref = r.sbuf.data();
      cell->done_flag_ref = &r.done_flag;
      r.phase = RequestState::Phase::AwaitingAck;
      inbox.push(cell);
      return true;
    }
    case SendPath::Pipeline: {
      const std::uint64_t len = r.sbuf.size();
      while (r.next_chunk < r.chunk_total) {
        Cell* cell = c.pool.acquire(r.dst_slot);
        if (cell == nullptr) return false;
        const std::uint64_t off = wire::chunk_offset(len, r.chunk_total, r.next_chunk);
        const std::uint64_t n = wire::chunk_length(len, r.chunk_total, r.next_chunk);
        cell->kind = CellKind::PipelineChunk;
        cell->envelope = r.env;
        cell->payload_len = static_cast<std::uint32_t>(n);
        cell->chunk_index = r.next_chunk;
        cell->chunk_total = r.chunk_total;
        std::memcpy(cell->payload(), r.sbuf.data() + off, n);
        inbox.push(cell);
        ++r.next_chunk;
      }
      complete(r);
      return true;
    }
    case SendPath::Remote:
      break;
  }
  return true;
}

void send_remote(ThreadSlot& self, RequestState& r) {
  CommState& c = *self.comm;
  const int proc = c.table.route(r.dst).proc;
  wire::WireHeader h;
  h.comm_id = c.comm_id;
  h.src_rank = static_cast<std::uint32_t>(self.global_rank);
  h.dst_rank = static_cast<std::uint32_t>(r.dst);
  h.tag = r.env.tag;
  h.seq = r.env.seq;
  h.msg_len = r.sbuf.size();

  // No address sharing across processes: large messages are always chunked.
  std::size_t limit = eager_limit(c);
  if (c.cfg.protocol == Protocol::Eager) limit = c.pool.cell_capacity();
  if (c.cfg.protocol == Protocol::OneCopy) limit = 0;

  if (r.sbuf.size() <= limit) {
    h.kind = wire::FrameKind::Eager;
    c.parent->send_frame(proc, h, r.sbuf);
    return;
  }
  h.kind = wire::FrameKind::PipelineChunk;
  h.chunk_total = wire::chunk_count(h.msg_len, c.pool.cell_capacity());
  for (std::uint32_t i = 0; i < h.chunk_total; ++i) {
    h.chunk_index = i;
    const auto off = wire::chunk_offset(h.msg_len, h.chunk_total, i);
    const auto n = wire::chunk_length(h.msg_len, h.chunk_total, i);
    c.parent->send_frame(proc, h, r.sbuf.subspan(off, n));
  }
}

void deliver_copy(RequestState& r, const Envelope& env, const std::byte* src) noexcept {
  r.env = env;
  if (env.msg_len > r.rbuf.size()) {
    fail(r, ErrorCode::Truncation);
  } else if (env.msg_len != 0) {
    std::memcpy(r.rbuf.data(), src, env.msg_len);
  }
}

void deliver_onecopy(RequestState& r, const Envelope& env, const std::byte* src,
                     std::atomic<std::uint32_t>* done) noexcept {
  deliver_copy(r, env, src);
  // The sender may reuse or free its request as soon as it sees this.
  done->store(1, std::memory_order_release);
  complete(r);
}

[[noreturn]] void engine_fault(const char* what) {
  std::fprintf(stderr, "threadcomm: %s\n", what);
  std::abort();
}

void handle_chunk(ThreadSlot& self, const Cell& cell) {
  const Envelope& env = cell.envelope;
  const std::uint64_t key = assembly_key(env.src_rank, env.seq);
  auto it = self.assembling.end();
  if (cell.chunk_index == 0) {
    Assembly a;
    a.chunk_total = cell.chunk_total;
    if (RequestState* r = take_posted(self, env)) {
      r->env = env;
      if (env.msg_len > r->rbuf.size()) {
        fail(*r, ErrorCode::Truncation);
        a.discard = true;
      }
      a.req = r;
    } else {
      Unexpected u;
      u.env = env;
      u.kind = CellKind::PipelineChunk;
      u.data.resize(env.msg_len);
      u.chunk_total = cell.chunk_total;
      self.unexpected.push_back(std::move(u));
      a.unexp = std::prev(self.unexpected.end());
      ++self.stats.unexpected;
    }
    it = self.assembling.emplace(key, a).first;
  } else {
    it = self.assembling.find(key);
    if (it == self.assembling.end()) engine_fault("pipeline chunk without a leading chunk");
  }

  Assembly& a = it->second;
  const std::uint64_t off = wire::chunk_offset(env.msg_len, a.chunk_total, cell.chunk_index);
  if (a.req != nullptr) {
    if (!a.discard && cell.payload_len != 0) std::memcpy(a.req->rbuf.data() + off, cell.payload(), cell.payload_len);
  } else {
    if (cell.payload_len != 0) std::memcpy(a.unexp->data.data() + off, cell.payload(), cell.payload_len);
    ++a.unexp->chunks_seen;
  }
  if (++a.chunks_seen == a.chunk_total) {
    if (a.req != nullptr) complete(*a.req);
    self.assembling.erase(it);
  }
}

void handle_cell(ThreadSlot& self, Cell* cell) {
  const Envelope env = cell->envelope;
  switch (cell->kind) {
    case CellKind::Eager:
      if (RequestState* r = take_posted(self, env)) {
        deliver_copy(*r, env, cell->payload());
        complete(*r);
      } else {
        Unexpected u;
        u.env = env;
        u.kind = CellKind::Eager;
        u.data.assign(cell->payload(), cell->payload() + cell->payload_len);
        self.unexpected.push_back(std::move(u));
        ++self.stats.unexpected;
      }
      break;
    case CellKind::OneCopyHeader:
      if (RequestState* r = take_posted(self, env)) {
        deliver_onecopy(*r, env, cell->buf_ref, cell->done_flag_ref);
      } else {
        Unexpected u;
        u.env = env;
        u.kind = CellKind::OneCopyHeader;
        u.buf_ref = cell->buf_ref;
        u.done_flag_ref = cell->done_flag_ref;
        self.unexpected.push_back(std::move(u));
        ++self.stats.unexpected;
      }
      break;
    case CellKind::PipelineChunk:
      handle_chunk(self, *cell);
      break;
    case CellKind::Ack:
      break;
  }
  self.comm->pool.release(cell);
}

void validate_dst(const CommState& c, int dst) {
  if (dst < 0 || dst >= c.table.total()) {
    throw Error(ErrorCode::InvalidArgument, "destination rank " + std::to_string(dst) + " out of range");
  }
}

// Eager send straight into a cell, no request object. Returns false if the
// send has to go through the general path.
bool try_fast_send(ThreadSlot& self, std::span<const std::byte> buf, int dst, int tag) {
  CommState& c = *self.comm;
  if (!c.is_local(dst) || !self.send_backlog.empty()) return false;
  const bool self_send = dst == self.global_rank;
  if (choose_local_path(c, self_send, buf.size()) != SendPath::Eager) return false;
  const int dst_slot = dst - c.first_rank;
  Cell* cell = c.pool.acquire(dst_slot);
  if (cell == nullptr) return false;
  fill_eager(cell, {self.global_rank, tag, buf.size(), self.next_seq[dst]++}, buf);
  c.slots[dst_slot].inbox.push(cell);
  count_send(self, SendPath::Eager, self_send);
  return true;
}

}  // namespace

void post_send(ThreadSlot& self, RequestState& r) {
  CommState& c = *self.comm;
  r.owner = &self;
  r.kind = RequestState::Kind::Send;
  r.env = {self.global_rank, r.tag, r.sbuf.size(), self.next_seq[r.dst]++};
  if (!c.is_local(r.dst)) {
    r.path = SendPath::Remote;
    count_send(self, r.path, false);
    send_remote(self, r);
    complete(r);
    return;
  }
  const bool self_send = r.dst == self.global_rank;
  r.dst_slot = r.dst - c.first_rank;
  r.path = choose_local_path(c, self_send, r.sbuf.size());
  if (r.path == SendPath::Pipeline) r.chunk_total = wire::chunk_count(r.sbuf.size(), c.pool.cell_capacity());
  count_send(self, r.path, self_send);
  r.phase = RequestState::Phase::Queued;
  // Later sends queue behind earlier ones to keep per-destination order.
  if (!self.send_backlog.empty() || !advance_send(self, r)) self.send_backlog.push_back(&r);
}

void post_recv(ThreadSlot& self, RequestState& r) {
  r.owner = &self;
  r.kind = RequestState::Kind::Recv;
  ++self.stats.recvs;
  for (auto it = self.unexpected.begin(); it != self.unexpected.end(); ++it) {
    if (!matches(r.spec, it->env)) continue;
    const Envelope env = it->env;
    switch (it->kind) {
      case CellKind::Eager:
        deliver_copy(r, env, it->data.data());
        complete(r);
        break;
      case CellKind::OneCopyHeader:
        deliver_onecopy(r, env, it->buf_ref, it->done_flag_ref);
        break;
      case CellKind::PipelineChunk:
        if (it->complete()) {
          deliver_copy(r, env, it->data.data());
          complete(r);
        } else {
          // Still arriving: hand what is staged to the request and let later
          // chunks land in the user buffer directly.
          auto a = self.assembling.find(assembly_key(env.src_rank, env.seq));
          if (a == self.assembling.end()) engine_fault("partial message without reassembly state");
          r.env = env;
          if (env.msg_len > r.rbuf.size()) {
            fail(r, ErrorCode::Truncation);
            a->second.discard = true;
          } else {
            const auto staged = wire::chunk_offset(env.msg_len, it->chunk_total, it->chunks_seen);
            if (staged != 0) std::memcpy(r.rbuf.data(), it->data.data(), staged);
          }
          a->second.req = &r;
          r.phase = RequestState::Phase::Active;
        }
        break;
      case CellKind::Ack:
        break;
    }
    self.unexpected.erase(it);
    return;
  }
  r.phase = RequestState::Phase::Active;
  self.posted.push_back(&r);
}

bool poll_complete(ThreadSlot&, RequestState& r) {
  if (r.phase == RequestState::Phase::Complete) return true;
  if (r.phase == RequestState::Phase::AwaitingAck && r.done_flag.load(std::memory_order_acquire) != 0) {
    complete(r);
    return true;
  }
  return false;
}

std::size_t progress(ThreadSlot& self) {
  std::size_t events = 0;
  while (Cell* cell = self.inbox.pop()) {
    handle_cell(self, cell);
    ++events;
  }
  while (!self.send_backlog.empty()) {
    if (!advance_send(self, *self.send_backlog.front())) break;
    self.send_backlog.pop_front();
    ++events;
  }
  if (!self.detached.empty()) {
    std::erase_if(self.detached, [&](const std::unique_ptr<RequestState>& r) { return poll_complete(self, *r); });
  }
  return events;
}

Envelope wait(ThreadSlot& self, RequestState& r) {
  Backoff backoff(self.comm->yield_every);
  while (!poll_complete(self, r)) {
    if (progress(self) != 0) {
      backoff.reset();
    } else {
      backoff.idle();
    }
  }
  if (r.failed) {
    throw Error(r.error, "message of " + std::to_string(r.env.msg_len) + " bytes from rank " +
                             std::to_string(r.env.src_rank) + " into a buffer of " + std::to_string(r.rbuf.size()));
  }
  return r.env;
}

void send_internal(ThreadSlot& self, std::span<const std::byte> buf, int dst, int tag) {
  validate_dst(*self.comm, dst);
  if (try_fast_send(self, buf, dst, tag)) return;
  RequestState r;
  r.sbuf = buf;
  r.dst = dst;
  r.tag = tag;
  post_send(self, r);
  wait(self, r);
}

Envelope recv_internal(ThreadSlot& self, std::span<std::byte> buf, MatchSpec spec) {
  RequestState r;
  r.rbuf = buf;
  r.spec = spec;
  post_recv(self, r);
  return wait(self, r);
}

Envelope sendrecv_internal(ThreadSlot& self, std::span<const std::byte> sbuf, int dst, int tag,
                           std::span<std::byte> rbuf, MatchSpec spec) {
  validate_dst(*self.comm, dst);
  RequestState in;
  in.rbuf = rbuf;
  in.spec = spec;
  post_recv(self, in);
  if (!try_fast_send(self, sbuf, dst, tag)) {
    RequestState out;
    out.sbuf = sbuf;
    out.dst = dst;
    out.tag = tag;
    post_send(self, out);
    wait(self, out);
  }
  return wait(self, in);
}

std::size_t drain(ThreadSlot& self) {
  std::size_t n = 0;
  while (Cell* cell = self.inbox.pop()) {
    self.comm->pool.release(cell);
    ++n;
  }
  n += self.unexpected.size();
  self.unexpected.clear();
  self.assembling.clear();
  self.posted.clear();
  return n;
}

}  // namespace detail

using detail::RequestState;
using detail::ThreadSlot;

namespace {

void validate_tag(int tag) {
  if (tag < 0 || tag >= kTagUpperBound) {
    throw Error(ErrorCode::InvalidArgument, "tag " + std::to_string(tag) + " outside [0, 2^30)");
  }
}

void validate_spec(const detail::CommState& c, const MatchSpec& spec) {
  if (spec.src != kAnySource && (spec.src < 0 || spec.src >= c.table.total())) {
    throw Error(ErrorCode::InvalidArgument, "source rank " + std::to_string(spec.src) + " out of range");
  }
  if (spec.tag != kAnyTag) validate_tag(spec.tag);
}

}  // namespace

void Threadcomm::send(std::span<const std::byte> buf, int dst, int tag) {
  ThreadSlot& s = detail::bound_slot(checked());
  validate_tag(tag);
  detail::send_internal(s, buf, dst, tag);
}

Envelope Threadcomm::recv(std::span<std::byte> buf, MatchSpec spec) {
  ThreadSlot& s = detail::bound_slot(checked());
  validate_spec(*s.comm, spec);
  return detail::recv_internal(s, buf, spec);
}

Request Threadcomm::isend(std::span<const std::byte> buf, int dst, int tag) {
  ThreadSlot& s = detail::bound_slot(checked());
  validate_tag(tag);
  detail::validate_dst(*s.comm, dst);
  if (detail::try_fast_send(s, buf, dst, tag)) {
    return Request(Envelope{s.global_rank, tag, buf.size(), s.next_seq[dst] - 1});
  }
  auto r = std::make_unique<RequestState>();
  ++s.stats.requests_allocated;
  r->sbuf = buf;
  r->dst = dst;
  r->tag = tag;
  detail::post_send(s, *r);
  if (r->phase == RequestState::Phase::Complete) return Request(r->env);
  r->counted = true;
  ++s.pending;
  return Request(std::move(r));
}

Request Threadcomm::irecv(std::span<std::byte> buf, MatchSpec spec) {
  ThreadSlot& s = detail::bound_slot(checked());
  validate_spec(*s.comm, spec);
  auto r = std::make_unique<RequestState>();
  ++s.stats.requests_allocated;
  r->rbuf = buf;
  r->spec = spec;
  detail::post_recv(s, *r);
  if (r->phase == RequestState::Phase::Complete && !r->failed) return Request(r->env);
  if (r->phase != RequestState::Phase::Complete) {
    r->counted = true;
    ++s.pending;
  }
  return Request(std::move(r));
}

std::size_t Threadcomm::progress() { return detail::progress(detail::bound_slot(checked())); }

std::size_t Threadcomm::unexpected_count() const { return detail::bound_slot(checked()).unexpected.size(); }

Request::Request() noexcept = default;
Request::Request(const Envelope& done) noexcept : env_(done) {}
Request::Request(std::unique_ptr<RequestState> s) noexcept : state_(std::move(s)) {}
Request::Request(Request&& o) noexcept : state_(std::move(o.state_)), env_(o.env_) {}

Request& Request::operator=(Request&& o) noexcept {
  if (this != &o) {
    release();
    state_ = std::move(o.state_);
    env_ = o.env_;
  }
  return *this;
}

Request::~Request() { release(); }

void Request::release() noexcept {
  if (!state_) return;
  ThreadSlot* owner = state_->owner;
  if (!detail::poll_complete(*owner, *state_)) {
    // Runtime still references the state; keep it alive until it completes.
    if (state_->counted) {
      state_->counted = false;
      --owner->pending;
    }
    owner->detached.push_back(std::move(state_));
  }
  state_.reset();
}

bool Request::pending() const noexcept {
  if (!state_) return false;
  return !detail::poll_complete(*state_->owner, *state_);
}

Envelope Request::wait() {
  if (!state_) return env_;
  ThreadSlot& owner = *state_->owner;
  if (detail::find_binding(*owner.comm) != &owner) {
    throw Error(ErrorCode::InvalidState, "request waited on by a thread that does not own it");
  }
  std::unique_ptr<RequestState> s = std::move(state_);
  env_ = detail::wait(owner, *s);
  return env_;
}

std::optional<Envelope> Request::test() {
  if (!state_) return env_;
  ThreadSlot& owner = *state_->owner;
  if (detail::find_binding(*owner.comm) != &owner) {
    throw Error(ErrorCode::InvalidState, "request tested by a thread that does not own it");
  }
  detail::progress(owner);
  if (!detail::poll_complete(owner, *state_)) return std::nullopt;
  std::unique_ptr<RequestState> s = std::move(state_);
  if (s->failed) {
    throw Error(s->error, "message of " + std::to_string(s->env.msg_len) + " bytes into a buffer of " +
                              std::to_string(s->rbuf.size()));
  }
  env_ = s->env;
  return env_;
}

}  // namespace threadcomm
