#include <doctest.h>

#include <atomic>
#include <cstring>

#include "mesh.hpp"
#include "parallel.hpp"
#include "threadcomm/collectives.hpp"
#include "threadcomm/error.hpp"

using namespace threadcomm;
using tctest::parallel;

namespace {

Config with_protocol(Protocol p) {
  Config c;
  c.protocol = p;
  return c;
}

// Runs body(comm, rank) on every process of an in-process mesh, threads[p] each.
template <class Body>
void across(std::vector<Threadcomm>& comms, const std::vector<int>& threads, Body body) {
  std::vector<std::thread> procs;
  for (std::size_t p = 0; p < comms.size(); ++p) {
    procs.emplace_back([&, p] { parallel(comms[p], threads[p], [&](int rank) { body(comms[p], rank); }); });
  }
  for (auto& t : procs) t.join();
}

}  // namespace

TEST_CASE("message barrier completes with synchronous sends forced") {
  // Every round pairs a send with a receive; a blocking 1-copy send there
  // would wait on a peer that is itself sending.
  for (Protocol p : {Protocol::OneCopy, Protocol::Pipeline, Protocol::Eager}) {
    auto comm = Threadcomm::init(ProcGroup::single(), 5, with_protocol(p));
    parallel(comm, 5, [&](int) {
      for (int i = 0; i < 50; ++i) barrier(comm, BarrierVariant::Message);
    });
    comm.free();
  }
}

TEST_CASE("no rank leaves a barrier before all have entered") {
  for (BarrierVariant v : {BarrierVariant::Message, BarrierVariant::Atomic}) {
    constexpr int n = 6;
    auto comm = Threadcomm::init(ProcGroup::single(), n, Config{});
    std::atomic<int> entered{0};
    std::atomic<int> early{0};
    parallel(comm, n, [&](int) {
      for (int i = 1; i <= 300; ++i) {
        entered.fetch_add(1);
        barrier(comm, v);
        if (entered.load() < i * n) early.fetch_add(1);
        barrier(comm, v);
      }
    });
    CHECK(early.load() == 0);
    comm.free();
  }
}

TEST_CASE("typed reduce and allreduce agree with a sequential fold") {
  constexpr int n = 5;
  constexpr std::size_t count = 1000;
  auto comm = Threadcomm::init(ProcGroup::single(), n, Config{});
  parallel(comm, n, [&](int rank) {
    std::vector<std::int64_t> mine(count), out(count);
    for (std::size_t i = 0; i < count; ++i) mine[i] = static_cast<std::int64_t>(i) * (rank + 1) - 7 * rank;
    auto expect = [&](ReduceKind k, std::size_t i) {
      std::int64_t acc = static_cast<std::int64_t>(i);
      for (int r = 1; r < n; ++r) {
        const std::int64_t x = static_cast<std::int64_t>(i) * (r + 1) - 7 * r;
        acc = k == ReduceKind::Sum ? acc + x : k == ReduceKind::Min ? std::min(acc, x) : std::max(acc, x);
      }
      return acc;
    };
    for (ReduceKind k : {ReduceKind::Sum, ReduceKind::Min, ReduceKind::Max}) {
      reduce<std::int64_t>(comm, mine, out, k, 2);
      if (rank == 2) {
        for (std::size_t i = 0; i < count; ++i) REQUIRE(out[i] == expect(k, i));
      }
      std::fill(out.begin(), out.end(), 0);
      allreduce<std::int64_t>(comm, mine, out, k);
      for (std::size_t i = 0; i < count; ++i) REQUIRE(out[i] == expect(k, i));
    }
  });
  comm.free();
}

TEST_CASE("bcast from every root") {
  constexpr int n = 4;
  auto comm = Threadcomm::init(ProcGroup::single(), n, Config{});
  parallel(comm, n, [&](int rank) {
    for (int root = 0; root < n; ++root) {
      for (std::size_t len : {std::size_t{1}, std::size_t{5000}, std::size_t{1} << 20}) {
        const auto want = tctest::pattern(len, static_cast<std::uint32_t>(root * 31 + len));
        std::vector<std::byte> buf = rank == root ? want : std::vector<std::byte>(len);
        bcast(comm, buf, root);
        REQUIRE(buf == want);
      }
    }
  });
  comm.free();
}

TEST_CASE("collective argument errors") {
  auto comm = Threadcomm::init(ProcGroup::single(), 2, Config{});
  parallel(comm, 2, [&](int rank) {
    std::array<std::byte, 8> buf{};
    CHECK_THROWS_AS(bcast(comm, buf, 2), Error);
    CHECK_THROWS_AS(bcast(comm, buf, -1), Error);
    // Only the root's receive buffer matters; it is checked before any traffic.
    if (rank == 0) {
      std::array<std::int32_t, 4> a{}, b{};
      CHECK_THROWS_AS(reduce<std::int32_t>(comm, a, std::span<std::int32_t>(b).first(2), ReduceKind::Sum, 0), Error);
    }
  });
  comm.free();
}

TEST_CASE("collectives on an inactive communicator fail") {
  auto comm = Threadcomm::init(ProcGroup::single(), 1, Config{});
  try {
    barrier(comm);
    FAIL("barrier outside an activation succeeded");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::InvalidState);
  }
  comm.free();
}

TEST_CASE("two in-process groups behave as one communicator") {
  tctest::TempDir dir;
  auto groups = tctest::mesh(2, dir.path());
  const std::vector<int> threads{3, 2};
  auto comms = tctest::init_all(groups, threads);
  across(comms, threads, [&](Threadcomm& comm, int rank) {
    const int n = comm.size();
    REQUIRE(n == 5);
    const int next = (rank + 1) % n, prev = (rank + n - 1) % n;
    // Ring exchange; 1 MiB crosses the socket as chunked frames.
    for (std::size_t len : {std::size_t{0}, std::size_t{8}, std::size_t{4097}, std::size_t{1} << 20}) {
      const auto out = tctest::pattern(len, static_cast<std::uint32_t>(rank * 7 + len));
      std::vector<std::byte> in(len);
      Request r = comm.isend(std::span<const std::byte>(out), next, 3);
      const Envelope e = comm.recv(std::span<std::byte>(in), {prev, 3});
      r.wait();
      CHECK(e.src_rank == prev);
      CHECK(e.msg_len == len);
      CHECK(in == tctest::pattern(len, static_cast<std::uint32_t>(prev * 7 + len)));
    }
    for (BarrierVariant v : {BarrierVariant::Message, BarrierVariant::Atomic}) {
      for (int i = 0; i < 20; ++i) barrier(comm, v);
    }
    std::array<std::int32_t, 1> mine{rank}, sum{};
    allreduce<std::int32_t>(comm, mine, sum, ReduceKind::Sum);
    CHECK(sum[0] == 10);
    std::array<std::byte, 3> word{};
    if (rank == 4) std::memcpy(word.data(), "abc", 3);
    bcast(comm, word, 4);
    CHECK(std::memcmp(word.data(), "abc", 3) == 0);
  });
  tctest::free_all(comms);
}
