#include "threadcomm/threadcomm.hpp"

#include <algorithm>
#include <string>
#include <thread>
#include <utility>

#include "comm_state.hpp"

namespace threadcomm {

namespace detail {

namespace {

thread_local std::vector<std::pair<const CommState*, ThreadSlot*>> t_bindings;

void bind(const CommState& comm, ThreadSlot& slot) { t_bindings.emplace_back(&comm, &slot); }

void unbind(const CommState& comm) {
  std::erase_if(t_bindings, [&](const auto& b) { return b.first == &comm; });
}

int ceil_log2(int n) {
  int r = 0;
  while ((1 << r) < n) ++r;
  return r;
}

std::uint32_t default_yield_every(int total_ranks) {
  const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  // Oversubscribed: spinning only delays the thread we are waiting for.
  return static_cast<unsigned>(total_ranks) > hw ? 1 : 1000;
}

}  // namespace

ThreadSlot* find_binding(const CommState& comm) noexcept {
  for (const auto& [c, s] : t_bindings) {
    if (c == &comm) return s;
  }
  return nullptr;
}

ThreadSlot& bound_slot(const CommState& comm) {
  ThreadSlot* s = find_binding(comm);
  if (s == nullptr) throw Error(ErrorCode::InvalidState, "calling thread is not bound to an active threadcomm");
  return *s;
}

CommState::CommState(std::shared_ptr<ProcGroup> parent_, std::uint16_t id, Config config, RankTable rank_table)
    : parent(std::move(parent_)),
      comm_id(id),
      cfg(config),
      yield_every(config.poll_yield_every ? config.poll_yield_every : default_yield_every(rank_table.total())),
      table(std::move(rank_table)),
      proc_rank(parent->proc_rank()),
      local_count(table.thread_count(proc_rank)),
      first_rank(table.first_rank(proc_rank)),
      pool(local_count, config.cells_per_rank, config.cell_size),
      slots(std::make_unique<ThreadSlot[]>(local_count)),
      barrier_rounds(ceil_log2(local_count)),
      barrier_flags(std::make_unique<PaddedFlag[]>(static_cast<std::size_t>(local_count) *
                                                   std::max(1, ceil_log2(local_count)))) {
  for (int i = 0; i < local_count; ++i) {
    slots[i].comm = this;
    slots[i].local_tid = i;
    slots[i].global_rank = first_rank + i;
    slots[i].next_seq.assign(table.total(), 0);
  }
  if (parent->multi()) parent->register_sink(comm_id, this);
}

CommState::~CommState() {
  if (parent->multi()) parent->unregister_sink(comm_id);
}

}  // namespace detail

using detail::Backoff;
using detail::CommState;
using detail::ThreadSlot;

Threadcomm::Threadcomm() noexcept = default;
Threadcomm::Threadcomm(std::unique_ptr<CommState> s) noexcept : state_(std::move(s)) {}
Threadcomm::Threadcomm(Threadcomm&&) noexcept = default;
Threadcomm& Threadcomm::operator=(Threadcomm&&) noexcept = default;
Threadcomm::~Threadcomm() = default;

CommState& Threadcomm::checked() const {
  if (!state_) throw Error(ErrorCode::InvalidHandle, "threadcomm handle is null or freed");
  return *state_;
}

Threadcomm Threadcomm::init(std::shared_ptr<ProcGroup> parent, int num_threads, Config config) {
  if (!parent) throw Error(ErrorCode::InvalidArgument, "null parent group");
  if (num_threads < 1) throw Error(ErrorCode::InvalidArgument, "num_threads must be >= 1");
  if (config.cell_size < 1 || config.cells_per_rank < 1) {
    throw Error(ErrorCode::InvalidArgument, "cell size and pool size must be >= 1");
  }
  const std::uint16_t id = parent->allocate_comm_id();
  const auto counts = parent->allgather(id, CtrlOp::Init, 0, static_cast<std::uint32_t>(num_threads));
  RankTable table(std::vector<int>(counts.begin(), counts.end()));
  return Threadcomm(std::make_unique<CommState>(std::move(parent), id, config, std::move(table)));
}

void Threadcomm::free() {
  CommState& c = checked();
  if ((c.phase.load(std::memory_order_acquire) & 1) != 0 || c.start_arrivals.load(std::memory_order_acquire) != 0) {
    throw Error(ErrorCode::InvalidState, "cannot free an active threadcomm");
  }
  if (c.parent->multi()) c.parent->handshake(c.comm_id, CtrlOp::Free, 0);
  state_.reset();
}

int Threadcomm::start() {
  CommState& c = checked();
  if (detail::find_binding(c) != nullptr) {
    throw Error(ErrorCode::InvalidState, "thread already bound to this threadcomm");
  }
  Backoff backoff(c.yield_every);
  std::uint64_t phase = c.phase.load(std::memory_order_acquire);
  while ((phase & 1) != 0) {
    // Active with every slot taken, unless the previous activation is still
    // winding down after all threads arrived in finish.
    if (c.finish_arrivals.load(std::memory_order_acquire) < c.local_count) {
      throw Error(ErrorCode::TooManyThreads, "more than " + std::to_string(c.local_count) + " threads called start");
    }
    backoff.idle();
    phase = c.phase.load(std::memory_order_acquire);
  }
  // Stable until the last local thread arrives.
  const int ticket = c.start_arrivals.fetch_add(1, std::memory_order_acq_rel);
  if (ticket >= c.local_count) {
    c.start_arrivals.fetch_sub(1, std::memory_order_acq_rel);
    throw Error(ErrorCode::TooManyThreads,
                "more than " + std::to_string(c.local_count) + " threads called start");
  }

  ThreadSlot& s = c.slots[ticket];
  s.attrs.clear();
  s.stats = {};
  s.coll_seq = 0;
  s.barrier_count = 0;
  s.pending = 0;
  detail::bind(c, s);

  if (ticket == c.local_count - 1) {
    if (c.parent->multi()) c.parent->handshake(c.comm_id, CtrlOp::Start, static_cast<std::uint32_t>(phase));
    c.finish_arrivals.store(0, std::memory_order_relaxed);
    c.finish_departures.store(0, std::memory_order_relaxed);
    c.phase.store(phase + 1, std::memory_order_release);
  } else {
    while (c.phase.load(std::memory_order_acquire) == phase) backoff.idle();
  }
  return s.global_rank;
}

void Threadcomm::finish() {
  CommState& c = checked();
  ThreadSlot* s = detail::find_binding(c);
  if (s == nullptr) throw Error(ErrorCode::InvalidState, "calling thread is not bound to this threadcomm");
  detail::progress(*s);
  if (s->pending > 0 || !s->detached.empty()) {
    throw Error(ErrorCode::PendingOperations,
                std::to_string(s->pending + s->detached.size()) + " incomplete request(s) at finish");
  }

  const std::uint64_t phase = c.phase.load(std::memory_order_acquire);
  const int ticket = c.finish_arrivals.fetch_add(1, std::memory_order_acq_rel);
  Backoff backoff(c.yield_every);
  if (ticket == c.local_count - 1) {
    if (c.parent->multi()) c.parent->handshake(c.comm_id, CtrlOp::Finish, static_cast<std::uint32_t>(phase));
    c.start_arrivals.store(0, std::memory_order_relaxed);
    c.finish_gate.store(phase, std::memory_order_release);
  } else {
    while (c.finish_gate.load(std::memory_order_acquire) != phase) backoff.idle();
  }

  // Everyone has arrived, so nothing more is addressed to this slot.
  s->stats.discarded_at_finish += detail::drain(*s);
  s->attrs.clear();
  detail::unbind(c);

  if (c.finish_departures.fetch_add(1, std::memory_order_acq_rel) == c.local_count - 1) {
    c.phase.store(phase + 1, std::memory_order_release);
  } else {
    while (c.phase.load(std::memory_order_acquire) == phase) backoff.idle();
  }
}

int Threadcomm::rank() const { return detail::bound_slot(checked()).global_rank; }

int Threadcomm::size() const {
  const CommState& c = checked();
  detail::bound_slot(c);
  return c.table.total();
}

bool Threadcomm::active() const { return (checked().phase.load(std::memory_order_acquire) & 1) != 0; }

void Threadcomm::attr_set(int key, std::int64_t value) { detail::bound_slot(checked()).attrs[key] = value; }

std::optional<std::int64_t> Threadcomm::attr_get(int key) const {
  const ThreadSlot& s = detail::bound_slot(checked());
  auto it = s.attrs.find(key);
  if (it == s.attrs.end()) return std::nullopt;
  return it->second;
}

const RankTable& Threadcomm::rank_table() const { return checked().table; }
const Config& Threadcomm::config() const { return checked().cfg; }
ProcGroup& Threadcomm::parent() const { return *checked().parent; }
int Threadcomm::local_threads() const { return checked().local_count; }
SlotStats Threadcomm::stats() const { return detail::bound_slot(checked()).stats; }
std::size_t Threadcomm::free_cells() const { return checked().pool.free_count(); }
std::size_t Threadcomm::total_cells() const { return checked().pool.total_cells(); }

}  // namespace threadcomm
