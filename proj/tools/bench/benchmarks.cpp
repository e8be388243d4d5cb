#include "benchmarks.hpp"

#include <algorithm>
#include <barrier>
#include <chrono>
#include <cstring>
#include <functional>
#include <iomanip>
#include <mutex>
#include <numeric>

#include "pattern.hpp"
#include "team.hpp"
#include "threadcomm/collectives.hpp"
#include "threadcomm/error.hpp"
#include "threadcomm/threadcomm.hpp"

namespace tcbench {

namespace {

using namespace threadcomm;
using Clock = std::chrono::steady_clock;

double us_since(Clock::time_point t0) { return std::chrono::duration<double, std::micro>(Clock::now() - t0).count(); }

// Big messages get fewer iterations so a full 1 B..4 MiB sweep stays short.
std::size_t scaled(std::size_t iters, std::size_t msg_size, std::size_t floor) {
  constexpr std::size_t knee = 64 * 1024;
  if (msg_size <= knee) return iters;
  return std::max(floor, iters * knee / msg_size);
}

void run_team(Threadcomm& comm, int threads, bool bind, const std::function<void(int)>& body) {
  Checker chk;
  team(comm, threads, chk, body, bind);
  if (!chk.ok()) throw Error(ErrorCode::InvalidState, chk.messages().front());
}

[[noreturn]] void verify_failed(const std::string& what) { throw Error(ErrorCode::Protocol, "verification failed: " + what); }

// The path a local, non-self message of `len` bytes is expected to take.
enum class Path { Eager, OneCopy, Pipeline, Remote };

Path expected_path(const Config& cfg, std::size_t len, bool remote) {
  if (remote) return Path::Remote;
  const std::size_t small = std::min(cfg.eager_threshold, cfg.cell_size);
  switch (cfg.protocol) {
    case Protocol::Eager: return len <= cfg.cell_size ? Path::Eager : Path::Pipeline;
    case Protocol::OneCopy: return Path::OneCopy;
    case Protocol::Pipeline: return len <= small ? Path::Eager : Path::Pipeline;
    case Protocol::Auto:
      if (len <= small) return Path::Eager;
      return len <= cfg.eager_threshold ? Path::Pipeline : Path::OneCopy;
  }
  return Path::Eager;
}

std::uint64_t sends_on(const SlotStats& s, Path p) {
  switch (p) {
    case Path::Eager: return s.eager_sends;
    case Path::OneCopy: return s.onecopy_sends;
    case Path::Pipeline: return s.pipeline_sends;
    case Path::Remote: return s.remote_sends;
  }
  return 0;
}

const char* path_name(Path p) {
  switch (p) {
    case Path::Eager: return "eager";
    case Path::OneCopy: return "onecopy";
    case Path::Pipeline: return "pipeline";
    case Path::Remote: return "remote";
  }
  return "?";
}

Config bench_config(Protocol p) {
  Config c = Config::from_environment();
  c.protocol = p;
  return c;
}

void require_two_ranks(const Threadcomm& comm, const char* what) {
  if (comm.rank_table().total() != 2) {
    throw Error(ErrorCode::InvalidArgument, std::string(what) + " needs exactly 2 ranks, got " +
                                                std::to_string(comm.rank_table().total()));
  }
}

void check_path(const Threadcomm& comm, const SlotStats& before, const SlotStats& after, std::size_t len,
                std::uint64_t sends) {
  const bool remote = comm.rank_table().route(0).proc != comm.rank_table().route(1).proc;
  const Path want = expected_path(comm.config(), len, remote);
  const std::uint64_t got = sends_on(after, want) - sends_on(before, want);
  if (got != sends) {
    verify_failed(std::to_string(len) + " B messages under " + std::string(to_string(comm.config().protocol)) +
                  " took another path than " + path_name(want));
  }
}

}  // namespace

void write_csv_row(std::ostream& os, const BenchResult& r) {
  os << r.benchmark << ',' << r.nprocs << ',' << r.nthreads << ',' << r.msg_size << ',' << r.variant << ','
     << r.iterations << ',' << std::fixed << std::setprecision(3) << r.latency_us << ',' << r.bandwidth_MBps << '\n';
  os.unsetf(std::ios::fixed);
}

double median(std::vector<double>& samples) {
  if (samples.empty()) return 0;
  const std::size_t mid = samples.size() / 2;
  std::nth_element(samples.begin(), samples.begin() + static_cast<std::ptrdiff_t>(mid), samples.end());
  double m = samples[mid];
  if (samples.size() % 2 == 0) {
    const double below = *std::max_element(samples.begin(), samples.begin() + static_cast<std::ptrdiff_t>(mid));
    m = (m + below) / 2;
  }
  // Cross-check against a plain sort.
  std::vector<double> sorted(samples);
  std::sort(sorted.begin(), sorted.end());
  const double ref = sorted.size() % 2 ? sorted[mid] : (sorted[mid - 1] + sorted[mid]) / 2;
  if (ref != m) throw Error(ErrorCode::InvalidState, "median cross-check failed");
  return m;
}

std::vector<BenchResult> bench_latency(const std::shared_ptr<ProcGroup>& group, const BenchOptions& opts) {
  std::vector<BenchResult> out;
  for (Protocol protocol : opts.protocols) {
    Threadcomm comm = Threadcomm::init(group, opts.threads, bench_config(protocol));
    require_two_ranks(comm, "latency");
    for (std::size_t size : opts.sizes) {
      const std::size_t warm = scaled(opts.warmup, size, 10);
      const std::size_t iters = scaled(opts.iters, size, 50);
      std::vector<double> samples;
      run_team(comm, opts.threads, opts.bind, [&](int rank) {
        std::vector<std::byte> sbuf(size), rbuf(size);
        const int peer = 1 - rank;
        const SlotStats before = comm.stats();
        for (std::size_t i = 0; i < warm + iters; ++i) {
          if (opts.verify) fill_pattern(sbuf, mix(opts.seed, i * 2 + static_cast<std::size_t>(rank)));
          if (rank == 0) {
            const auto t0 = Clock::now();
            comm.send(std::span<const std::byte>(sbuf), peer, 1);
            comm.recv(std::span<std::byte>(rbuf), {peer, 1});
            if (i >= warm) samples.push_back(us_since(t0) / 2);
          } else {
            comm.recv(std::span<std::byte>(rbuf), {peer, 1});
            comm.send(std::span<const std::byte>(sbuf), peer, 1);
          }
          if (opts.verify && !check_pattern(rbuf, mix(opts.seed, i * 2 + static_cast<std::size_t>(peer)))) {
            verify_failed("latency payload at iteration " + std::to_string(i));
          }
        }
        if (opts.verify_protocol) check_path(comm, before, comm.stats(), size, warm + iters);
      });
      if (comm.rank_table().first_rank(group->proc_rank()) == 0) {
        const double lat = median(samples);
        out.push_back({"latency", group->proc_count(), opts.threads, size, std::string(to_string(protocol)),
                       iters, lat, 0});
      }
    }
    comm.free();
  }
  return out;
}

std::vector<BenchResult> bench_bandwidth(const std::shared_ptr<ProcGroup>& group, const BenchOptions& opts) {
  constexpr std::size_t window = 64;
  std::vector<BenchResult> out;
  for (Protocol protocol : opts.protocols) {
    Threadcomm comm = Threadcomm::init(group, opts.threads, bench_config(protocol));
    require_two_ranks(comm, "bandwidth");
    for (std::size_t size : opts.sizes) {
      const std::size_t warm = std::max<std::size_t>(1, scaled(opts.warmup, size, 64) / window);
      const std::size_t loops = std::max<std::size_t>(5, scaled(opts.iters, size, 320) / window);
      double elapsed_us = 0;
      run_team(comm, opts.threads, opts.bind, [&](int rank) {
        std::vector<std::byte> buf(size);
        if (rank == 0 && opts.verify) fill_pattern(buf, mix(opts.seed, size));
        std::vector<Request> reqs(window);
        Clock::time_point t0;
        for (std::size_t l = 0; l < warm + loops; ++l) {
          if (l == warm) t0 = Clock::now();
          if (rank == 0) {
            for (auto& r : reqs) r = comm.isend(std::span<const std::byte>(buf), 1, 2);
            for (auto& r : reqs) r.wait();
            comm.recv(std::span<std::byte>{}, {1, 3});
          } else {
            for (auto& r : reqs) r = comm.irecv(std::span<std::byte>(buf), {0, 2});
            for (auto& r : reqs) r.wait();
            if (opts.verify && !check_pattern(buf, mix(opts.seed, size))) verify_failed("bandwidth payload");
            comm.send(std::span<const std::byte>{}, 0, 3);
          }
        }
        if (rank == 0) elapsed_us = us_since(t0);
      });
      if (comm.rank_table().first_rank(group->proc_rank()) == 0) {
        const double msgs = static_cast<double>(loops * window);
        out.push_back({"bandwidth", group->proc_count(), opts.threads, size, std::string(to_string(protocol)),
                       loops * window, elapsed_us / msgs, static_cast<double>(size) * msgs / elapsed_us});
      }
    }
    comm.free();
  }
  return out;
}

std::vector<BenchResult> bench_barrier(const std::shared_ptr<ProcGroup>& group, const BenchOptions& opts) {
  std::vector<BenchResult> out;
  const int procs = group->proc_count();
  Threadcomm comm = Threadcomm::init(group, opts.threads, Config::from_environment());
  const bool leader = comm.rank_table().first_rank(group->proc_rank()) == 0;
  const std::size_t total = opts.warmup + opts.iters;

  for (const std::string& variant : opts.variants) {
    std::vector<double> samples;
    samples.reserve(opts.iters);
    if (variant == "native") {
      if (procs > 1) continue;  // process-local only
      std::barrier sync(opts.threads);
      spawn(
          opts.threads,
          [&](int t) {
            for (std::size_t i = 0; i < total; ++i) {
              const auto t0 = Clock::now();
              sync.arrive_and_wait();
              if (t == 0 && i >= opts.warmup) samples.push_back(us_since(t0));
            }
          },
          opts.bind);
    } else {
      const BarrierVariant v = variant == "atomic" ? BarrierVariant::Atomic : BarrierVariant::Message;
      run_team(comm, opts.threads, opts.bind, [&](int rank) {
        for (std::size_t i = 0; i < total; ++i) {
          const auto t0 = Clock::now();
          barrier(comm, v);
          if (rank == 0 && i >= opts.warmup) samples.push_back(us_since(t0));
        }
      });
    }
    if (leader) out.push_back({"barrier", procs, opts.threads, 0, variant, opts.iters, median(samples), 0});
  }
  comm.free();
  return out;
}

std::vector<BenchResult> bench_reduce(const std::shared_ptr<ProcGroup>& group, const BenchOptions& opts) {
  std::vector<BenchResult> out;
  const int procs = group->proc_count();
  Threadcomm comm = Threadcomm::init(group, opts.threads, Config::from_environment());
  const int n = comm.rank_table().total();
  const bool leader = comm.rank_table().first_rank(group->proc_rank()) == 0;
  const std::int32_t want = n * (n - 1) / 2;

  for (std::size_t count : opts.sizes) {
    const std::size_t warm = scaled(opts.warmup, count * 4, 10);
    const std::size_t iters = scaled(opts.iters, count * 4, 50);
    for (const std::string& variant : opts.variants) {
      std::vector<double> samples;
      if (variant == "native") {
        if (procs > 1) continue;
        // Private arrays folded into a shared one under a lock, then a
        // barrier: what a threaded array reduction does by hand.
        std::vector<std::int32_t> shared(count);
        std::mutex mu;
        std::barrier sync(opts.threads);
        spawn(
            opts.threads,
            [&](int t) {
              std::vector<std::int32_t> mine(count);
              for (std::size_t i = 0; i < warm + iters; ++i) {
                const auto t0 = Clock::now();
                if (t == 0) std::fill(shared.begin(), shared.end(), 0);
                sync.arrive_and_wait();
                std::fill(mine.begin(), mine.end(), t);
                {
                  std::lock_guard lock(mu);
                  for (std::size_t k = 0; k < count; ++k) shared[k] += mine[k];
                }
                sync.arrive_and_wait();
                if (t == 0) {
                  if (i >= warm) samples.push_back(us_since(t0));
                  if (opts.verify && std::any_of(shared.begin(), shared.end(), [&](std::int32_t v) { return v != want; })) {
                    verify_failed("native reduction result");
                  }
                }
              }
            },
            opts.bind);
      } else {
        run_team(comm, opts.threads, opts.bind, [&](int rank) {
          std::vector<std::int32_t> mine(count), sum(rank == 0 ? count : 0);
          for (std::size_t i = 0; i < warm + iters; ++i) {
            const auto t0 = Clock::now();
            std::fill(mine.begin(), mine.end(), rank);
            reduce<std::int32_t>(comm, mine, sum, ReduceKind::Sum, 0);
            if (rank == 0) {
              if (i >= warm) samples.push_back(us_since(t0));
              if (opts.verify && std::any_of(sum.begin(), sum.end(), [&](std::int32_t v) { return v != want; })) {
                verify_failed("threadcomm reduce result");
              }
            }
          }
        });
      }
      if (leader) {
        out.push_back({"reduce", procs, opts.threads, count * sizeof(std::int32_t), variant, iters,
                       median(samples), 0});
      }
    }
  }
  comm.free();
  return out;
}

}  // namespace tcbench
