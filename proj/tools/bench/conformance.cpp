#include "conformance.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstring>
#include <deque>
#include <random>
#include <thread>

#include "pattern.hpp"
#include "team.hpp"
#include "threadcomm/cell_pool.hpp"
#include "threadcomm/collectives.hpp"
#include "threadcomm/error.hpp"
#include "threadcomm/mpsc_queue.hpp"
#include "threadcomm/threadcomm.hpp"

namespace tcbench {

namespace {

using namespace threadcomm;
using Clock = std::chrono::steady_clock;

struct Env {
  std::shared_ptr<ProcGroup> group;
  int threads;
  std::uint64_t seed;
};

using CaseFn = void (*)(const Env&, Checker&);

struct Case {
  const char* suite;
  const char* name;
  CaseFn run;
};

std::string str(const char* a, long long v) { return a + std::to_string(v); }

int ceil_log2(int n) {
  int r = 0;
  while ((1 << r) < n) ++r;
  return r;
}

Config with_protocol(Protocol p) {
  Config c = Config::from_environment();
  c.protocol = p;
  return c;
}

template <class Fn>
void expect_error(Checker& chk, ErrorCode want, const std::string& what, Fn fn) {
  try {
    fn();
    chk.fail(what + ": no error");
  } catch (const Error& e) {
    if (e.code() != want) chk.fail(what + ": got " + e.what());
  }
}

// ---------------------------------------------------------------- queue

void queue_stress(const Env& env, Checker& chk) {
  constexpr int producers = 8;
  constexpr std::uint32_t per = 100000;
  constexpr std::size_t cells = 512;
  constexpr std::size_t cell_bytes = 64;

  for (int round = 0; round < 20; ++round) {
    const std::uint64_t key = mix(env.seed, static_cast<std::uint64_t>(round));
    CellPool pool(1, cells, cell_bytes);
    MpscQueue<Cell> q;
    std::vector<std::uint32_t> next(producers, 0);
    std::uint64_t received = 0, corrupt = 0, misordered = 0;

    std::thread consumer([&] {
      while (received < std::uint64_t{producers} * per) {
        Cell* c = q.pop();
        if (c == nullptr) {
          std::this_thread::yield();
          continue;
        }
        std::uint32_t p = 0, s = 0;
        std::memcpy(&p, c->payload(), 4);
        std::memcpy(&s, c->payload() + 4, 4);
        if (p >= producers || c->payload_len != cell_bytes) {
          ++corrupt;
        } else {
          if (s != next[p]) ++misordered;
          next[p] = s + 1;
          if (!check_pattern({c->payload() + 8, cell_bytes - 8}, mix(key, (std::uint64_t{p} << 32) | s))) ++corrupt;
        }
        ++received;
        pool.release(c);
      }
    });
    spawn(producers, [&](int p) {
      std::mt19937 rng(static_cast<std::uint32_t>(key) + static_cast<std::uint32_t>(p));
      for (std::uint32_t s = 0; s < per; ++s) {
        Cell* c = nullptr;
        while ((c = pool.acquire(0)) == nullptr) std::this_thread::yield();
        const auto up = static_cast<std::uint32_t>(p);
        std::memcpy(c->payload(), &up, 4);
        std::memcpy(c->payload() + 4, &s, 4);
        fill_pattern({c->payload() + 8, cell_bytes - 8}, mix(key, (std::uint64_t{up} << 32) | s));
        c->payload_len = cell_bytes;
        q.push(c);
        // Seed-dependent interleaving.
        if (rng() % 512 == 0) std::this_thread::yield();
      }
    });
    consumer.join();

    const std::string at = " (round " + std::to_string(round) + ")";
    chk.expect(received == std::uint64_t{producers} * per, str("received ", static_cast<long long>(received)) + at);
    chk.expect(corrupt == 0, str("corrupt cells: ", static_cast<long long>(corrupt)) + at);
    chk.expect(misordered == 0, str("per-producer order violations: ", static_cast<long long>(misordered)) + at);
    for (int p = 0; p < producers; ++p) chk.expect(next[p] == per, "producer stream incomplete" + at);
    chk.expect(q.pop() == nullptr, "queue not empty after drain" + at);
    chk.expect(pool.free_count() == cells, "pool not conserved" + at);
  }
}

void pool_exhaustion(const Env&, Checker& chk) {
  CellPool pool(2, 64, 8192);
  std::vector<Cell*> got;
  for (int i = 0; i < 64; ++i) got.push_back(pool.acquire(1));
  chk.expect(std::find(got.begin(), got.end(), nullptr) == got.end(), "fewer than 64 cells");
  std::sort(got.begin(), got.end());
  chk.expect(std::adjacent_find(got.begin(), got.end()) == got.end(), "duplicate cells");
  chk.expect(pool.acquire(1) == nullptr, "65th acquire succeeded");
  pool.release(got.back());
  got.pop_back();
  Cell* again = pool.acquire(1);
  chk.expect(again != nullptr, "release did not restore the pool");
  if (again) got.push_back(again);
  for (Cell* c : got) pool.release(c);
  chk.expect(pool.free_count() == pool.total_cells(), "pool not conserved");
}

// ---------------------------------------------------------------- p2p

std::size_t sample_size(std::mt19937_64& rng, std::size_t thr, std::size_t cap) {
  const auto r = rng() % 1000;
  if (r < 10) return 16384 + rng() % ((4u << 20) - 16384 + 1);
  if (r < 150) {
    const std::size_t edges[] = {0, 1, thr - 1, thr, thr + 1, cap - 1, cap, cap + 1};
    return edges[rng() % 8];
  }
  if (r < 350) return 256 + rng() % (16384 - 256);
  return rng() % 256;
}

struct Msg {
  int src, dst, tag;
  std::size_t len;
};

void p2p_graph(const Env& env, Checker& chk, Protocol protocol) {
  Threadcomm comm = Threadcomm::init(env.group, env.threads, with_protocol(protocol));
  const int n = comm.rank_table().total();
  const Config& cfg = comm.config();
  constexpr int messages = 10000;
  constexpr int rounds = 10;
  const std::uint64_t key = mix(env.seed, 0x5050 + static_cast<std::uint64_t>(protocol));

  std::mt19937_64 rng(key);
  std::vector<Msg> graph(messages);
  for (auto& m : graph) {
    m.src = static_cast<int>(rng() % n);
    m.dst = static_cast<int>(rng() % n);
    m.tag = static_cast<int>(rng() % 3);
    m.len = sample_size(rng, cfg.eager_threshold, cfg.cell_size);
  }

  team(comm, env.threads, chk, [&](int rank) {
    for (int r = 0; r < rounds; ++r) {
      const int lo = r * messages / rounds;
      const int hi = (r + 1) * messages / rounds;
      std::deque<std::vector<std::byte>> bufs;
      std::vector<std::pair<int, std::size_t>> recvs;  // message id, request index
      std::vector<Request> reqs;
      for (int m = lo; m < hi; ++m) {
        const Msg& g = graph[m];
        if (g.src == rank) {
          auto& b = bufs.emplace_back(g.len);
          fill_pattern(b, mix(key, static_cast<std::uint64_t>(m)));
          reqs.push_back(comm.isend(std::span<const std::byte>(b), g.dst, g.tag));
        }
        if (g.dst == rank) {
          auto& b = bufs.emplace_back(g.len);
          recvs.emplace_back(m, reqs.size());
          reqs.push_back(comm.irecv(std::span<std::byte>(b), {g.src, g.tag}));
        }
      }
      std::vector<Envelope> envs(reqs.size());
      for (std::size_t i = 0; i < reqs.size(); ++i) envs[i] = reqs[i].wait();
      // bufs and reqs were filled in the same order; find each recv buffer again.
      std::size_t bi = 0, ri = 0;
      for (int m = lo; m < hi; ++m) {
        const Msg& g = graph[m];
        if (g.src == rank) ++bi;
        if (g.dst == rank) {
          const Envelope& e = envs[recvs[ri].second];
          const bool ok = e.src_rank == g.src && e.tag == g.tag && e.msg_len == g.len &&
                          check_pattern(bufs[bi], mix(key, static_cast<std::uint64_t>(m)));
          if (!ok) {
            chk.fail("message " + std::to_string(m) + " (" + std::to_string(g.src) + "->" + std::to_string(g.dst) +
                     ", " + std::to_string(g.len) + " B) corrupt or out of order");
          }
          ++bi;
          ++ri;
        }
      }
    }
    barrier(comm);
    comm.progress();
    chk.expect(comm.unexpected_count() == 0, "rank " + std::to_string(rank) + " has leftover arrivals");
  });
  chk.expect(comm.free_cells() == comm.total_cells(), "pool cells leaked");
  comm.free();
}

void p2p_eager(const Env& env, Checker& chk) { p2p_graph(env, chk, Protocol::Eager); }
void p2p_onecopy(const Env& env, Checker& chk) { p2p_graph(env, chk, Protocol::OneCopy); }
void p2p_pipeline(const Env& env, Checker& chk) { p2p_graph(env, chk, Protocol::Pipeline); }
void p2p_auto(const Env& env, Checker& chk) { p2p_graph(env, chk, Protocol::Auto); }

// Wildcard receives: each sender's stream per tag must still arrive in order.
void p2p_wildcard(const Env& env, Checker& chk) {
  Threadcomm comm = Threadcomm::init(env.group, env.threads, with_protocol(Protocol::Auto));
  const int n = comm.rank_table().total();
  constexpr int per_rank = 200;
  constexpr std::size_t max_len = 20000;
  const std::uint64_t key = mix(env.seed, 0x3C3C);

  std::mt19937_64 rng(key);
  std::vector<Msg> graph;
  std::vector<int> incoming(n, 0);
  for (int s = 0; s < n; ++s) {
    for (int i = 0; i < per_rank; ++i) {
      Msg m{s, static_cast<int>(rng() % n), static_cast<int>(rng() % 4), 12 + rng() % (max_len - 12)};
      ++incoming[m.dst];
      graph.push_back(m);
    }
  }

  team(comm, env.threads, chk, [&](int rank) {
    std::deque<std::vector<std::byte>> bufs;
    std::vector<Request> sends;
    std::vector<std::uint32_t> sent_idx(static_cast<std::size_t>(n) * 4, 0);
    for (const Msg& m : graph) {
      if (m.src != rank) continue;
      auto& b = bufs.emplace_back(m.len);
      const std::uint32_t hdr[3] = {static_cast<std::uint32_t>(m.src), static_cast<std::uint32_t>(m.tag),
                                    sent_idx[static_cast<std::size_t>(m.dst) * 4 + m.tag]++};
      std::memcpy(b.data(), hdr, 12);
      fill_pattern(std::span(b).subspan(12), mix(key, (std::uint64_t{hdr[0]} << 40) | (std::uint64_t{hdr[1]} << 32) | hdr[2]));
      sends.push_back(comm.isend(std::span<const std::byte>(b), m.dst, m.tag));
    }
    std::vector<std::uint32_t> expect_idx(static_cast<std::size_t>(n) * 4, 0);
    std::vector<std::byte> in(max_len);
    for (int i = 0; i < incoming[rank]; ++i) {
      const Envelope e = comm.recv(std::span<std::byte>(in), {kAnySource, kAnyTag});
      std::uint32_t hdr[3];
      std::memcpy(hdr, in.data(), 12);
      const bool ok = hdr[0] == static_cast<std::uint32_t>(e.src_rank) && hdr[1] == static_cast<std::uint32_t>(e.tag) &&
                      hdr[2] == expect_idx[static_cast<std::size_t>(e.src_rank) * 4 + e.tag]++ &&
                      check_pattern(std::span<const std::byte>(in).subspan(12, e.msg_len - 12),
                                    mix(key, (std::uint64_t{hdr[0]} << 40) | (std::uint64_t{hdr[1]} << 32) | hdr[2]));
      if (!ok) chk.fail("wildcard receive out of order or corrupt at rank " + std::to_string(rank));
    }
    for (auto& r : sends) r.wait();
  });
  comm.free();
}

void p2p_tiny_pool(const Env& env, Checker& chk) {
  Config cfg = with_protocol(Protocol::Pipeline);
  cfg.cells_per_rank = 4;
  cfg.cell_size = 1024;
  cfg.eager_threshold = 512;
  Threadcomm comm = Threadcomm::init(env.group, env.threads, cfg);
  const int n = comm.rank_table().total();
  constexpr std::size_t len = 20000;
  team(comm, env.threads, chk, [&](int rank) {
    std::vector<std::vector<std::byte>> out(n, std::vector<std::byte>(len)), in(n, std::vector<std::byte>(len));
    std::vector<Request> reqs;
    for (int d = 0; d < n; ++d) {
      fill_pattern(out[d], mix(env.seed, static_cast<std::uint64_t>(rank * n + d)));
      reqs.push_back(comm.isend(std::span<const std::byte>(out[d]), d, 1));
    }
    for (int s = 0; s < n; ++s) reqs.push_back(comm.irecv(std::span<std::byte>(in[s]), {s, 1}));
    for (auto& r : reqs) r.wait();
    for (int s = 0; s < n; ++s) {
      chk.expect(check_pattern(in[s], mix(env.seed, static_cast<std::uint64_t>(s * n + rank))),
                 "tiny-pool payload corrupt");
    }
  });
  chk.expect(comm.free_cells() == comm.total_cells(), "pool cells leaked");
  comm.free();
}

void p2p_edges(const Env& env, Checker& chk) {
  Threadcomm comm = Threadcomm::init(env.group, env.threads, Config::from_environment());
  team(comm, env.threads, chk, [&](int rank) {
    // Self-sends of every size are buffered.
    for (std::size_t len : {std::size_t{0}, std::size_t{8}, std::size_t{4097}, std::size_t{1} << 20}) {
      std::vector<std::byte> out(len), in(len);
      fill_pattern(out, len);
      comm.send(std::span<const std::byte>(out), rank, 11);
      const Envelope e = comm.recv(std::span<std::byte>(in), {rank, 11});
      chk.expect(e.msg_len == len && in == out, "self-send of " + std::to_string(len) + " B");
    }
    // Truncation.
    std::array<std::byte, 32> big{};
    std::array<std::byte, 8> small{};
    comm.send(std::span<const std::byte>(big), rank, 12);
    expect_error(chk, ErrorCode::Truncation, "truncated receive",
                 [&] { comm.recv(std::span<std::byte>(small), {rank, 12}); });
    // Eager isend is complete on return.
    Request r = comm.isend(std::span<const std::byte>(small), rank, 13);
    chk.expect(!r.pending(), "eager isend still pending");
    comm.recv(std::span<std::byte>(small), {rank, 13});
  });
  comm.free();
}

// ---------------------------------------------------------------- collectives

template <class T>
T element(std::uint64_t key, int rank, std::size_t i) {
  const std::uint64_t h = mix(key, (static_cast<std::uint64_t>(rank) << 32) ^ i);
  if constexpr (std::is_same_v<T, double>) {
    return static_cast<double>(h >> 11) * 0x1.0p-53;
  } else if constexpr (std::is_same_v<T, std::int32_t>) {
    return static_cast<std::int32_t>(h % 2000001) - 1000000;
  } else {
    return static_cast<std::int64_t>(h % (std::uint64_t{1} << 41)) - (std::int64_t{1} << 40);
  }
}

template <class T>
T fold(ReduceKind kind, T a, T b) {
  switch (kind) {
    case ReduceKind::Sum: return a + b;
    case ReduceKind::Min: return std::min(a, b);
    case ReduceKind::Max: return std::max(a, b);
  }
  return a;
}

template <class T>
bool close_enough(T got, T want) {
  if constexpr (std::is_same_v<T, double>) {
    return std::abs(got - want) <= 1e-9 * std::abs(want);
  } else {
    return got == want;
  }
}

const char* kind_name(ReduceKind k) {
  switch (k) {
    case ReduceKind::Sum: return "SUM";
    case ReduceKind::Min: return "MIN";
    case ReduceKind::Max: return "MAX";
  }
  return "?";
}

template <class T>
void reduce_round(Threadcomm& comm, int rank, int n, Checker& chk, std::uint64_t key, ReduceKind kind,
                  std::size_t count, int root, const char* type) {
  std::vector<T> mine(count);
  for (std::size_t i = 0; i < count; ++i) mine[i] = element<T>(key, rank, i);
  std::vector<T> expected(count);
  for (std::size_t i = 0; i < count; ++i) {
    T acc = element<T>(key, 0, i);
    for (int r = 1; r < n; ++r) acc = fold(kind, acc, element<T>(key, r, i));
    expected[i] = acc;
  }
  const std::string what = std::string(type) + " " + kind_name(kind) + " count " + std::to_string(count);

  std::vector<T> out(rank == root ? count : 0);
  reduce<T>(comm, mine, out, kind, root);
  if (rank == root) {
    for (std::size_t i = 0; i < count; ++i) {
      if (!close_enough(out[i], expected[i])) {
        chk.fail("reduce " + what + " differs at " + std::to_string(i));
        break;
      }
    }
  }

  std::vector<T> all(count);
  allreduce<T>(comm, mine, all, kind);
  for (std::size_t i = 0; i < count; ++i) {
    if (!close_enough(all[i], expected[i])) {
      chk.fail("allreduce " + what + " differs at " + std::to_string(i) + " on rank " + std::to_string(rank));
      break;
    }
  }

  if constexpr (!std::is_same_v<T, double>) {
    // Composition oracle: reduce to 0 then broadcast, bit for bit.
    std::vector<T> composed(count);
    reduce<T>(comm, mine, composed, kind, 0);
    bcast(comm, std::as_writable_bytes(std::span(composed)), 0);
    chk.expect(std::memcmp(composed.data(), all.data(), count * sizeof(T)) == 0,
               "allreduce differs from reduce+bcast for " + what);
  }
}

void coll_reduce(const Env& env, Checker& chk) {
  Threadcomm comm = Threadcomm::init(env.group, env.threads, Config::from_environment());
  const int n = comm.rank_table().total();
  team(comm, env.threads, chk, [&](int rank) {
    int combo = 0;
    for (std::size_t count : {std::size_t{1}, std::size_t{1000}, std::size_t{65536}}) {
      for (ReduceKind kind : {ReduceKind::Sum, ReduceKind::Min, ReduceKind::Max}) {
        const int root = combo % n;
        const std::uint64_t key = mix(env.seed, static_cast<std::uint64_t>(++combo));
        reduce_round<std::int32_t>(comm, rank, n, chk, key, kind, count, root, "INT32");
        reduce_round<std::int64_t>(comm, rank, n, chk, key + 1, kind, count, root, "INT64");
        reduce_round<double>(comm, rank, n, chk, key + 2, kind, count, root, "FLOAT64");
      }
    }
    // Each rank contributes its rank: SUM is N(N-1)/2.
    const std::int64_t me = rank;
    std::int64_t sum = -1;
    allreduce<std::int64_t>(comm, std::span(&me, 1), std::span(&sum, 1), ReduceKind::Sum);
    chk.expect(sum == std::int64_t{n} * (n - 1) / 2, "rank sum");
  });
  comm.free();
}

void coll_bcast(const Env& env, Checker& chk) {
  Threadcomm comm = Threadcomm::init(env.group, env.threads, Config::from_environment());
  const int n = comm.rank_table().total();
  team(comm, env.threads, chk, [&](int rank) {
    std::string abc = rank == 0 ? "abc" : "xyz";
    bcast(comm, std::as_writable_bytes(std::span(abc.data(), 3)), 0);
    chk.expect(abc == "abc", "bcast of \"abc\" on rank " + std::to_string(rank));
    for (int root : {0, 3 % n, n - 1}) {
      for (std::size_t len : {std::size_t{1}, std::size_t{1000}, std::size_t{5000}, std::size_t{1} << 20}) {
        const std::uint64_t key = mix(env.seed, (static_cast<std::uint64_t>(root) << 32) | len);
        std::vector<std::byte> buf(len);
        if (rank == root) fill_pattern(buf, key);
        bcast(comm, buf, root);
        chk.expect(check_pattern(buf, key), "bcast root " + std::to_string(root) + " len " + std::to_string(len) +
                                                " on rank " + std::to_string(rank));
      }
    }
  });
  comm.free();
}

void barrier_safety(const Env& env, Checker& chk, BarrierVariant variant) {
  Threadcomm comm = Threadcomm::init(env.group, env.threads, Config::from_environment());
  const int n = comm.rank_table().total();
  const int local = comm.local_threads();
  constexpr int iters = 10000;
  std::atomic<long> entered{0};
  team(comm, env.threads, chk, [&](int rank) {
    std::vector<std::int64_t> times(2 * iters);
    long early = 0;
    for (int k = 0; k < iters; ++k) {
      entered.fetch_add(1, std::memory_order_relaxed);
      times[2 * k] = Clock::now().time_since_epoch().count();
      barrier(comm, variant);
      times[2 * k + 1] = Clock::now().time_since_epoch().count();
      if (entered.load(std::memory_order_relaxed) < static_cast<long>(local) * (k + 1)) ++early;
    }
    chk.expect(early == 0, "rank " + std::to_string(rank) + " left " + std::to_string(early) + " barriers early");
    // Cross-rank check on the shared monotonic clock: nobody leaves barrier k
    // before the last rank entered it.
    if (rank != 0) {
      comm.send(std::span<const std::int64_t>(times), 0, 77);
      return;
    }
    std::vector<std::int64_t> last_in(iters), first_out(iters);
    for (int k = 0; k < iters; ++k) {
      last_in[k] = times[2 * k];
      first_out[k] = times[2 * k + 1];
    }
    std::vector<std::int64_t> other(2 * iters);
    for (int r = 1; r < n; ++r) {
      comm.recv(std::span<std::int64_t>(other), {r, 77});
      for (int k = 0; k < iters; ++k) {
        last_in[k] = std::max(last_in[k], other[2 * k]);
        first_out[k] = std::min(first_out[k], other[2 * k + 1]);
      }
    }
    int violations = 0;
    for (int k = 0; k < iters; ++k) violations += first_out[k] < last_in[k];
    chk.expect(violations == 0, std::to_string(violations) + " barriers with an exit before the last entry");
  });
  comm.free();
}

void coll_barrier_message(const Env& env, Checker& chk) { barrier_safety(env, chk, BarrierVariant::Message); }
void coll_barrier_atomic(const Env& env, Checker& chk) { barrier_safety(env, chk, BarrierVariant::Atomic); }

void coll_barrier_rounds(const Env& env, Checker& chk) {
  Threadcomm comm = Threadcomm::init(env.group, env.threads, Config::from_environment());
  const int n = comm.rank_table().total();
  team(comm, env.threads, chk, [&](int rank) {
    for (int k = 0; k < 3; ++k) {
      const SlotStats before = comm.stats();
      barrier(comm, BarrierVariant::Message);
      const SlotStats after = comm.stats();
      const auto sends = (after.eager_sends + after.onecopy_sends + after.pipeline_sends + after.remote_sends) -
                         (before.eager_sends + before.onecopy_sends + before.pipeline_sends + before.remote_sends);
      const auto recvs = after.recvs - before.recvs;
      chk.expect(sends == static_cast<std::uint64_t>(ceil_log2(n)) && recvs == sends,
                 "rank " + std::to_string(rank) + ": " + std::to_string(sends) + " sends, " + std::to_string(recvs) +
                     " receives per barrier, expected " + std::to_string(ceil_log2(n)));
    }
  });
  comm.free();
}

// ---------------------------------------------------------------- ranks

void ranks_bijection(const Env& env, Checker& chk) {
  Threadcomm comm = Threadcomm::init(env.group, env.threads, Config::from_environment());
  const int procs = env.group->proc_count();
  const int n = procs * env.threads;
  const int first = env.group->proc_rank() * env.threads;
  chk.expect(comm.rank_table().total() == n, "rank table total");
  for (int act = 0; act < 100; ++act) {
    std::vector<std::atomic<int>> seen(env.threads);
    for (auto& s : seen) s = 0;
    team(comm, env.threads, chk, [&](int rank) {
      chk.expect(comm.size() == n, "size " + std::to_string(comm.size()) + ", expected " + std::to_string(n));
      chk.expect(comm.rank() == rank, "rank() differs from start()");
      if (!chk.expect(rank >= first && rank < first + env.threads,
                      "rank " + std::to_string(rank) + " outside the process block")) {
        return;
      }
      seen[rank - first].fetch_add(1);
      const std::int64_t me = rank;
      std::int64_t sum = 0, lo = 0, hi = 0;
      allreduce<std::int64_t>(comm, std::span(&me, 1), std::span(&sum, 1), ReduceKind::Sum);
      allreduce<std::int64_t>(comm, std::span(&me, 1), std::span(&lo, 1), ReduceKind::Min);
      allreduce<std::int64_t>(comm, std::span(&me, 1), std::span(&hi, 1), ReduceKind::Max);
      chk.expect(sum == std::int64_t{n} * (n - 1) / 2 && lo == 0 && hi == n - 1, "global rank set is not 0..N-1");
    });
    for (auto& s : seen) chk.expect(s.load() == 1, "local ranks are not a bijection");
  }
  comm.free();
}

// Process p runs threads + p threads.
void ranks_nonuniform(const Env& env, Checker& chk) {
  const int mine = env.threads + env.group->proc_rank();
  Threadcomm comm = Threadcomm::init(env.group, mine, Config::from_environment());
  int total = 0, first = 0;
  for (int p = 0; p < env.group->proc_count(); ++p) {
    if (p == env.group->proc_rank()) first = total;
    total += env.threads + p;
  }
  chk.expect(comm.rank_table().total() == total, "nonuniform total");
  chk.expect(comm.rank_table().first_rank(env.group->proc_rank()) == first, "nonuniform prefix");
  team(comm, mine, chk, [&](int rank) {
    chk.expect(comm.size() == total, "nonuniform size");
    chk.expect(rank >= first && rank < first + mine, "nonuniform block");
  });
  comm.free();
}

// ---------------------------------------------------------------- lifecycle

void lc_free_while_active(const Env& env, Checker& chk) {
  Threadcomm comm = Threadcomm::init(env.group, env.threads, Config::from_environment());
  const int first = comm.rank_table().first_rank(env.group->proc_rank());
  team(comm, env.threads, chk, [&](int rank) {
    if (rank == first) expect_error(chk, ErrorCode::InvalidState, "free while active", [&] { comm.free(); });
  });
  comm.free();
}

void lc_double_free(const Env& env, Checker& chk) {
  Threadcomm comm = Threadcomm::init(env.group, env.threads, Config::from_environment());
  comm.free();
  expect_error(chk, ErrorCode::InvalidHandle, "second free", [&] { comm.free(); });
  expect_error(chk, ErrorCode::InvalidHandle, "start after free", [&] { comm.start(); });
}

void lc_send_inactive(const Env& env, Checker& chk) {
  Threadcomm comm = Threadcomm::init(env.group, env.threads, Config::from_environment());
  std::array<std::byte, 4> b{};
  expect_error(chk, ErrorCode::InvalidState, "send on inactive",
               [&] { comm.send(std::span<const std::byte>(b), 0, 0); });
  expect_error(chk, ErrorCode::InvalidState, "isend on inactive",
               [&] { comm.isend(std::span<const std::byte>(b), 0, 0); });
  comm.free();
}

void lc_recv_inactive(const Env& env, Checker& chk) {
  Threadcomm comm = Threadcomm::init(env.group, env.threads, Config::from_environment());
  std::array<std::byte, 4> b{};
  expect_error(chk, ErrorCode::InvalidState, "recv on inactive", [&] { comm.recv(std::span<std::byte>(b)); });
  expect_error(chk, ErrorCode::InvalidState, "irecv on inactive", [&] { comm.irecv(std::span<std::byte>(b)); });
  expect_error(chk, ErrorCode::InvalidState, "progress on inactive", [&] { comm.progress(); });
  comm.free();
}

void lc_collective_inactive(const Env& env, Checker& chk) {
  Threadcomm comm = Threadcomm::init(env.group, env.threads, Config::from_environment());
  std::array<std::byte, 4> b{};
  expect_error(chk, ErrorCode::InvalidState, "barrier on inactive", [&] { barrier(comm); });
  expect_error(chk, ErrorCode::InvalidState, "atomic barrier on inactive",
               [&] { barrier(comm, BarrierVariant::Atomic); });
  expect_error(chk, ErrorCode::InvalidState, "bcast on inactive", [&] { bcast(comm, b, 0); });
  comm.free();
}

void lc_double_start(const Env& env, Checker& chk) {
  Threadcomm comm = Threadcomm::init(env.group, env.threads, Config::from_environment());
  team(comm, env.threads, chk, [&](int) {
    expect_error(chk, ErrorCode::InvalidState, "second start", [&] { comm.start(); });
  });
  comm.free();
}

void lc_too_many_threads(const Env& env, Checker& chk) {
  Threadcomm comm = Threadcomm::init(env.group, env.threads, Config::from_environment());
  std::atomic<int> rejected{0};
  spawn(env.threads + 1, [&](int) {
    try {
      comm.start();
    } catch (const Error& e) {
      chk.expect(e.code() == ErrorCode::TooManyThreads, std::string("extra start: ") + e.what());
      rejected.fetch_add(1);
      return;
    }
    // Hold the activation open until the extra thread has been turned away.
    while (rejected.load() == 0) std::this_thread::yield();
    comm.finish();
  });
  chk.expect(rejected.load() == 1, "expected exactly one rejected thread");
  comm.free();
}

void lc_finish_pending(const Env& env, Checker& chk) {
  Threadcomm comm = Threadcomm::init(env.group, env.threads, Config::from_environment());
  spawn(env.threads, [&](int) {
    const int rank = comm.start();
    int v = 0;
    Request r = comm.irecv(std::span<int>(&v, 1), {rank, 5});
    expect_error(chk, ErrorCode::PendingOperations, "finish with pending irecv", [&] { comm.finish(); });
    chk.expect(comm.active(), "comm left the active state after a failed finish");
    const int w = 9;
    comm.send(std::span<const int>(&w, 1), rank, 5);
    r.wait();
    chk.expect(v == 9, "irecv after failed finish");
    comm.finish();
  });
  comm.free();
}

void lc_finish_unbound(const Env& env, Checker& chk) {
  Threadcomm comm = Threadcomm::init(env.group, env.threads, Config::from_environment());
  expect_error(chk, ErrorCode::InvalidState, "finish without start", [&] { comm.finish(); });
  comm.free();
}

void lc_query_unbound(const Env& env, Checker& chk) {
  Threadcomm comm = Threadcomm::init(env.group, env.threads, Config::from_environment());
  expect_error(chk, ErrorCode::InvalidState, "rank unbound", [&] { (void)comm.rank(); });
  expect_error(chk, ErrorCode::InvalidState, "size unbound", [&] { (void)comm.size(); });
  expect_error(chk, ErrorCode::InvalidState, "attr_get unbound", [&] { (void)comm.attr_get(1); });
  expect_error(chk, ErrorCode::InvalidState, "attr_set unbound", [&] { comm.attr_set(1, 1); });
  comm.free();
}

void lc_attribute_lifetime(const Env& env, Checker& chk) {
  Threadcomm comm = Threadcomm::init(env.group, env.threads, Config::from_environment());
  team(comm, env.threads, chk, [&](int rank) {
    chk.expect(!comm.attr_get(7).has_value(), "unset key present");
    comm.attr_set(7, 1000 + rank);
    barrier(comm);
    const auto v = comm.attr_get(7);
    chk.expect(v.has_value() && *v == 1000 + rank, "attribute not isolated per rank");
  });
  team(comm, env.threads, chk, [&](int) { chk.expect(!comm.attr_get(7).has_value(), "attribute survived finish"); });
  comm.free();
}

void lc_invalid_arguments(const Env& env, Checker& chk) {
  expect_error(chk, ErrorCode::InvalidArgument, "init with 0 threads", [&] { Threadcomm::init(env.group, 0); });
  Threadcomm comm = Threadcomm::init(env.group, env.threads, Config::from_environment());
  const int n = comm.rank_table().total();
  team(comm, env.threads, chk, [&](int) {
    std::array<std::byte, 4> b{};
    const std::span<const std::byte> s(b);
    expect_error(chk, ErrorCode::InvalidArgument, "send to rank N", [&] { comm.send(s, n, 0); });
    expect_error(chk, ErrorCode::InvalidArgument, "send to rank -1", [&] { comm.send(s, -1, 0); });
    expect_error(chk, ErrorCode::InvalidArgument, "negative tag", [&] { comm.send(s, 0, -3); });
    expect_error(chk, ErrorCode::InvalidArgument, "reserved tag", [&] { comm.send(s, 0, kTagUpperBound); });
    expect_error(chk, ErrorCode::InvalidArgument, "recv from rank N",
                 [&] { comm.irecv(std::span<std::byte>(b), {n, 0}); });
    expect_error(chk, ErrorCode::InvalidArgument, "bcast root N", [&] { bcast(comm, b, n); });
  });
  comm.free();
}

// ---------------------------------------------------------------- bridge

void bridge_pingpong(const Env& env, Checker& chk) {
  Threadcomm comm = Threadcomm::init(env.group, env.threads, Config::from_environment());
  const int n = comm.rank_table().total();
  const int far = n - 1;
  constexpr std::uint32_t iters = 10000;
  team(comm, env.threads, chk, [&](int rank) {
    if (rank != 0 && rank != far) return;
    std::uint32_t seq = 0;
    for (std::uint32_t i = 0; i < iters; ++i) {
      if (rank == 0) {
        comm.send(std::span<const std::uint32_t>(&i, 1), far, 3);
        comm.recv(std::span<std::uint32_t>(&seq, 1), {far, 3});
      } else {
        comm.recv(std::span<std::uint32_t>(&seq, 1), {0, 3});
        comm.send(std::span<const std::uint32_t>(&seq, 1), 0, 3);
      }
      if (seq != i) {
        chk.fail("ping-pong lost or reordered at " + std::to_string(i));
        break;
      }
    }
  });
  comm.free();
}

void bridge_large(const Env& env, Checker& chk) {
  Threadcomm comm = Threadcomm::init(env.group, env.threads, Config::from_environment());
  const int n = comm.rank_table().total();
  const int far = n - 1;
  team(comm, env.threads, chk, [&](int rank) {
    for (std::size_t len : {std::size_t{1} << 20, std::size_t{4} << 20, std::size_t{3} * 8192 + 17}) {
      std::vector<std::byte> buf(len);
      const std::uint64_t key = mix(env.seed, len);
      if (rank == 0) {
        fill_pattern(buf, key);
        comm.send(std::span<const std::byte>(buf), far, 4);
        std::fill(buf.begin(), buf.end(), std::byte{0});
        comm.recv(std::span<std::byte>(buf), {far, 4});
        chk.expect(check_pattern(buf, key), "large message echo corrupt, " + std::to_string(len) + " B");
      } else if (rank == far) {
        const Envelope e = comm.recv(std::span<std::byte>(buf), {0, 4});
        chk.expect(e.msg_len == len && check_pattern(buf, key), "large message corrupt, " + std::to_string(len) + " B");
        comm.send(std::span<const std::byte>(buf), 0, 4);
      }
    }
  });
  comm.free();
}

void bridge_routing(const Env& env, Checker& chk) {
  Threadcomm comm = Threadcomm::init(env.group, env.threads, Config::from_environment());
  const int n = comm.rank_table().total();
  team(comm, env.threads, chk, [&](int rank) {
    const int where[2] = {comm.parent().proc_rank(), rank - comm.rank_table().first_rank(comm.parent().proc_rank())};
    std::vector<Request> reqs;
    reqs.push_back(comm.isend(std::span<const int>(where), 0, 6));
    if (rank == 0) {
      for (int i = 0; i < n; ++i) {
        int got[2];
        const Envelope e = comm.recv(std::span<int>(got), {kAnySource, 6});
        const auto loc = comm.rank_table().route(e.src_rank);
        chk.expect(loc.proc == got[0] && loc.tid == got[1],
                   "rank " + std::to_string(e.src_rank) + " routed to the wrong thread");
      }
    }
    for (auto& r : reqs) r.wait();
  });
  comm.free();
}

const Case kCases[] = {
    {"queue", "mpsc-stress", queue_stress},
    {"queue", "pool-exhaustion", pool_exhaustion},
    {"p2p", "graph-eager", p2p_eager},
    {"p2p", "graph-onecopy", p2p_onecopy},
    {"p2p", "graph-pipeline", p2p_pipeline},
    {"p2p", "graph-auto", p2p_auto},
    {"p2p", "wildcard-order", p2p_wildcard},
    {"p2p", "tiny-pool", p2p_tiny_pool},
    {"p2p", "edge-cases", p2p_edges},
    {"collectives", "reduce-oracle", coll_reduce},
    {"collectives", "bcast-oracle", coll_bcast},
    {"collectives", "barrier-message-safety", coll_barrier_message},
    {"collectives", "barrier-atomic-safety", coll_barrier_atomic},
    {"collectives", "barrier-round-count", coll_barrier_rounds},
    {"ranks", "bijection", ranks_bijection},
    {"ranks", "nonuniform", ranks_nonuniform},
    {"lifecycle", "free-while-active", lc_free_while_active},
    {"lifecycle", "double-free", lc_double_free},
    {"lifecycle", "send-on-inactive", lc_send_inactive},
    {"lifecycle", "recv-on-inactive", lc_recv_inactive},
    {"lifecycle", "collective-on-inactive", lc_collective_inactive},
    {"lifecycle", "double-start", lc_double_start},
    {"lifecycle", "too-many-threads", lc_too_many_threads},
    {"lifecycle", "finish-with-pending-request", lc_finish_pending},
    {"lifecycle", "finish-unbound", lc_finish_unbound},
    {"lifecycle", "query-unbound", lc_query_unbound},
    {"lifecycle", "attribute-lifetime", lc_attribute_lifetime},
    {"lifecycle", "invalid-arguments", lc_invalid_arguments},
    {"bridge", "pingpong-far", bridge_pingpong},
    {"bridge", "large-chunked", bridge_large},
    {"bridge", "routing", bridge_routing},
};

}  // namespace

std::vector<std::string> suite_names() {
  std::vector<std::string> out;
  for (const Case& c : kCases) {
    if (std::find(out.begin(), out.end(), c.suite) == out.end()) out.emplace_back(c.suite);
  }
  return out;
}

std::vector<CaseResult> run_conformance(const std::shared_ptr<ProcGroup>& group, const ConformanceOptions& opts) {
  const Env env{group, opts.threads, opts.seed};
  std::vector<CaseResult> results;
  std::uint32_t seq = 0;
  for (const Case& c : kCases) {
    if (!opts.suites.empty() && std::find(opts.suites.begin(), opts.suites.end(), c.suite) == opts.suites.end()) {
      continue;
    }
    Checker chk;
    const auto t0 = Clock::now();
    try {
      c.run(env, chk);
    } catch (const std::exception& e) {
      chk.fail(std::string("exception: ") + e.what());
    }
    CaseResult r;
    r.suite = c.suite;
    r.name = c.name;
    r.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    r.detail = chk.messages();
    const auto votes = group->allgather(0, CtrlOp::User, ++seq, chk.ok() ? 1 : 0);
    r.passed = std::all_of(votes.begin(), votes.end(), [](std::uint32_t v) { return v == 1; });
    results.push_back(std::move(r));
  }
  return results;
}

}  // namespace tcbench
