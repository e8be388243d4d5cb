#include <doctest.h>

#include <atomic>
#include <mutex>
#include <set>

#include "mesh.hpp"
#include "parallel.hpp"
#include "threadcomm/error.hpp"

using namespace threadcomm;
using tctest::parallel;

namespace {

template <class Fn>
ErrorCode code_of(Fn fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected threadcomm::Error");
  return ErrorCode::Protocol;
}

}  // namespace

TEST_CASE("init then free without activation") {
  auto comm = Threadcomm::init(ProcGroup::single(), 3, Config{});
  CHECK(comm.valid());
  CHECK_FALSE(comm.active());
  CHECK(comm.rank_table().total() == 3);
  comm.free();
  CHECK_FALSE(comm.valid());
  CHECK(code_of([&] { comm.free(); }) == ErrorCode::InvalidHandle);
}

TEST_CASE("init rejects a non-positive thread count") {
  CHECK(code_of([] { Threadcomm::init(ProcGroup::single(), 0, Config{}); }) == ErrorCode::InvalidArgument);
  CHECK(code_of([] { Threadcomm::init(ProcGroup::single(), -2, Config{}); }) == ErrorCode::InvalidArgument);
}

TEST_CASE("single rank starts at once") {
  auto comm = Threadcomm::init(ProcGroup::single(), 1, Config{});
  CHECK(comm.start() == 0);
  CHECK(comm.rank() == 0);
  CHECK(comm.size() == 1);
  comm.finish();
  comm.free();
}

TEST_CASE("every activation is a bijection onto 0..n-1") {
  constexpr int n = 6;
  auto comm = Threadcomm::init(ProcGroup::single(), n, Config{});
  for (int round = 0; round < 50; ++round) {
    std::mutex mu;
    std::multiset<int> ranks;
    parallel(comm, n, [&](int rank) {
      CHECK(comm.rank() == rank);
      CHECK(comm.size() == n);
      std::lock_guard lock(mu);
      ranks.insert(rank);
    });
    std::multiset<int> want;
    for (int r = 0; r < n; ++r) want.insert(r);
    REQUIRE(ranks == want);
    CHECK_FALSE(comm.active());
  }
  comm.free();
}

TEST_CASE("unequal thread counts give process-ordered blocks") {
  tctest::TempDir dir;
  auto groups = tctest::mesh(2, dir.path());
  const std::vector<int> threads{2, 3};
  auto comms = tctest::init_all(groups, threads);
  CHECK(comms[1].rank_table().first_rank(1) == 2);
  CHECK(comms[0].rank_table().total() == 5);

  std::vector<std::set<int>> seen(2);
  std::mutex mu;
  std::vector<std::thread> procs;
  for (int p = 0; p < 2; ++p) {
    procs.emplace_back([&, p] {
      parallel(comms[p], threads[p], [&](int rank) {
        CHECK(comms[p].size() == 5);
        std::lock_guard lock(mu);
        seen[p].insert(rank);
      });
    });
  }
  for (auto& t : procs) t.join();
  CHECK(seen[0] == std::set<int>{0, 1});
  CHECK(seen[1] == std::set<int>{2, 3, 4});
  tctest::free_all(comms);
}

TEST_CASE("a thread may be bound to two communicators at once") {
  auto a = Threadcomm::init(ProcGroup::single(), 2, Config{});
  auto b = Threadcomm::init(ProcGroup::single(), 2, Config{});
  parallel(a, 2, [&](int ra) {
    const int rb = b.start();
    CHECK(a.rank() == ra);
    CHECK(b.rank() == rb);
    a.attr_set(1, 10 + ra);
    b.attr_set(1, 20 + rb);
    CHECK(a.attr_get(1) == 10 + ra);
    CHECK(b.attr_get(1) == 20 + rb);
    b.finish();
    CHECK(a.attr_get(1) == 10 + ra);
  });
  a.free();
  b.free();
}

TEST_CASE("misuse inside an activation") {
  auto comm = Threadcomm::init(ProcGroup::single(), 2, Config{});
  std::atomic<int> pending_errors{0};
  parallel(comm, 2, [&](int rank) {
    CHECK(code_of([&] { comm.start(); }) == ErrorCode::InvalidState);
    if (rank == 0) CHECK(code_of([&] { comm.free(); }) == ErrorCode::InvalidState);

    int v = 0;
    Request r = comm.irecv(std::span<int>(&v, 1), {rank, 4});
    if (code_of([&] { comm.finish(); }) == ErrorCode::PendingOperations) pending_errors.fetch_add(1);
    const int w = 40 + rank;
    comm.send(std::span<const int>(&w, 1), rank, 4);
    r.wait();
    CHECK(v == w);

    // Attributes vanish at finish; this is the last use of this activation.
    comm.attr_set(3, rank);
  });
  CHECK(pending_errors.load() == 2);
  parallel(comm, 2, [&](int) { CHECK_FALSE(comm.attr_get(3).has_value()); });
  comm.free();
}

TEST_CASE("queries need a bound thread") {
  auto comm = Threadcomm::init(ProcGroup::single(), 2, Config{});
  CHECK(code_of([&] { (void)comm.rank(); }) == ErrorCode::InvalidState);
  CHECK(code_of([&] { comm.finish(); }) == ErrorCode::InvalidState);
  std::array<std::byte, 2> b{};
  CHECK(code_of([&] { comm.send(std::span<const std::byte>(b), 0, 0); }) == ErrorCode::InvalidState);
  comm.free();
}
