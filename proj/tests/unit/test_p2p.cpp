#include <doctest.h>

#include <atomic>
#include <cstring>
#include <random>
#include <string>

#include "parallel.hpp"
#include "threadcomm/error.hpp"

using namespace threadcomm;
using tctest::parallel;
using tctest::pattern;

namespace {

Config with_protocol(Protocol p) {
  Config c;
  c.protocol = p;
  return c;
}

}  // namespace

TEST_CASE("eager send completes without a request") {
  auto comm = Threadcomm::init(ProcGroup::single(), 2, Config{});
  parallel(comm, 2, [&](int rank) {
    std::array<std::byte, 8> buf{};
    if (rank == 0) {
      std::memcpy(buf.data(), "abcdefgh", 8);
      comm.send(std::span<const std::byte>(buf), 1, 7);
      const auto st = comm.stats();
      CHECK(st.eager_sends == 1);
      CHECK(st.requests_allocated == 0);
    } else {
      const Envelope env = comm.recv(std::span<std::byte>(buf), {0, 7});
      CHECK(env.src_rank == 0);
      CHECK(env.tag == 7);
      CHECK(env.msg_len == 8);
      CHECK(std::memcmp(buf.data(), "abcdefgh", 8) == 0);
    }
  });
  comm.free();
}

TEST_CASE("zero-byte message") {
  auto comm = Threadcomm::init(ProcGroup::single(), 2, Config{});
  parallel(comm, 2, [&](int rank) {
    if (rank == 0) {
      comm.send(std::span<const std::byte>{}, 1, 0);
    } else {
      const Envelope env = comm.recv(std::span<std::byte>{}, {0, 0});
      CHECK(env.msg_len == 0);
    }
  });
  comm.free();
}

TEST_CASE("large message takes the 1-copy path") {
  auto comm = Threadcomm::init(ProcGroup::single(), 2, Config{});
  const auto data = pattern(1 << 20, 3);
  parallel(comm, 2, [&](int rank) {
    if (rank == 0) {
      comm.send(std::span<const std::byte>(data), 1, 1);
      CHECK(comm.stats().onecopy_sends == 1);
    } else {
      std::vector<std::byte> out(data.size());
      const Envelope env = comm.recv(std::span<std::byte>(out), {0, 1});
      CHECK(env.msg_len == data.size());
      CHECK(out == data);
    }
  });
  comm.free();
}

TEST_CASE("eager threshold boundary") {
  auto comm = Threadcomm::init(ProcGroup::single(), 2, Config{});
  parallel(comm, 2, [&](int rank) {
    for (std::size_t len : {4095u, 4096u, 4097u, 8192u}) {
      const auto data = pattern(len, static_cast<std::uint32_t>(len));
      if (rank == 0) {
        comm.send(std::span<const std::byte>(data), 1, 2);
      } else {
        std::vector<std::byte> out(len);
        comm.recv(std::span<std::byte>(out), {0, 2});
        CHECK(out == data);
      }
    }
    if (rank == 0) {
      CHECK(comm.stats().eager_sends == 2);
      CHECK(comm.stats().onecopy_sends == 2);
    }
  });
  comm.free();
}

TEST_CASE("per-pair FIFO for equal tags") {
  auto comm = Threadcomm::init(ProcGroup::single(), 2, Config{});
  parallel(comm, 2, [&](int rank) {
    std::array<char, 1> b{};
    if (rank == 0) {
      b[0] = 'A';
      comm.send(std::span<const char>(b), 1, 5);
      b[0] = 'B';
      comm.send(std::span<const char>(b), 1, 5);
    } else {
      comm.recv(std::span<char>(b), {0, 5});
      CHECK(b[0] == 'A');
      comm.recv(std::span<char>(b), {0, 5});
      CHECK(b[0] == 'B');
    }
  });
  comm.free();
}

TEST_CASE("any-source receive keeps each sender's order") {
  auto comm = Threadcomm::init(ProcGroup::single(), 5, Config{});
  parallel(comm, 5, [&](int rank) {
    if (rank != 0) {
      for (int i = 0; i < 100; ++i) {
        const std::array<int, 2> msg{rank, i};
        comm.send(std::span<const int>(msg), 0, 3);
      }
    } else {
      std::array<int, 5> next{};
      for (int n = 0; n < 400; ++n) {
        std::array<int, 2> msg{};
        const Envelope env = comm.recv(std::span<int>(msg), {kAnySource, 3});
        REQUIRE(env.src_rank == msg[0]);
        CHECK(msg[1] == next[msg[0]]++);
      }
      for (int s = 1; s < 5; ++s) CHECK(next[s] == 100);
    }
  });
  comm.free();
}

TEST_CASE("tag matching skips earlier non-matching arrivals") {
  auto comm = Threadcomm::init(ProcGroup::single(), 2, Config{});
  parallel(comm, 2, [&](int rank) {
    int v = 0;
    if (rank == 0) {
      for (int t = 1; t <= 3; ++t) {
        v = t * 10;
        comm.send(std::span<const int>(&v, 1), 1, t);
      }
    } else {
      comm.recv(std::span<int>(&v, 1), {0, 3});
      CHECK(v == 30);
      comm.recv(std::span<int>(&v, 1), {kAnySource, kAnyTag});
      CHECK(v == 10);
      comm.recv(std::span<int>(&v, 1), {0, 2});
      CHECK(v == 20);
      CHECK(comm.stats().unexpected >= 2);
    }
  });
  comm.free();
}

TEST_CASE("truncation is an error") {
  auto comm = Threadcomm::init(ProcGroup::single(), 2, Config{});
  parallel(comm, 2, [&](int rank) {
    std::array<std::byte, 16> big{};
    std::array<std::byte, 4> small{};
    if (rank == 0) {
      comm.send(std::span<const std::byte>(big), 1, 0);
    } else {
      try {
        comm.recv(std::span<std::byte>(small), {0, 0});
        FAIL("no truncation error");
      } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::Truncation);
      }
    }
  });
  comm.free();
}

TEST_CASE("self send of any size") {
  auto comm = Threadcomm::init(ProcGroup::single(), 1, Config{});
  parallel(comm, 1, [&](int rank) {
    for (std::size_t len : {0u, 8u, 5000u, 100000u}) {
      const auto data = pattern(len, 11);
      comm.send(std::span<const std::byte>(data), rank, 4);
      std::vector<std::byte> out(len);
      comm.recv(std::span<std::byte>(out), {rank, 4});
      CHECK(out == data);
    }
  });
  comm.free();
}

TEST_CASE("nonblocking completion") {
  auto comm = Threadcomm::init(ProcGroup::single(), 2, Config{});
  std::atomic<int> step{0};
  parallel(comm, 2, [&](int rank) {
    if (rank == 0) {
      std::array<std::byte, 8> small{};
      Request r = comm.isend(std::span<const std::byte>(small), 1, 0);
      CHECK_FALSE(r.pending());
      CHECK(r.test().has_value());

      const auto big = pattern(100000, 1);
      Request rb = comm.isend(std::span<const std::byte>(big), 1, 1);
      CHECK(rb.pending());
      CHECK_FALSE(rb.test().has_value());
      step = 1;
      const Envelope env = rb.wait();
      CHECK(env.msg_len == big.size());
    } else {
      std::array<std::byte, 8> small{};
      Request r = comm.irecv(std::span<std::byte>(small), {0, 0});
      r.wait();
      while (step.load() == 0) std::this_thread::yield();
      std::vector<std::byte> out(100000);
      Request rr = comm.irecv(std::span<std::byte>(out), {0, 1});
      const Envelope env = rr.wait();
      CHECK(env.msg_len == out.size());
      CHECK(out == pattern(100000, 1));
      CHECK(rr.wait().msg_len == out.size());
    }
  });
  comm.free();
}

TEST_CASE("empty progress returns zero") {
  auto comm = Threadcomm::init(ProcGroup::single(), 1, Config{});
  parallel(comm, 1, [&](int) { CHECK(comm.progress() == 0); });
  comm.free();
}

TEST_CASE("progress completes a posted receive") {
  auto comm = Threadcomm::init(ProcGroup::single(), 2, Config{});
  std::atomic<bool> sent{false};
  parallel(comm, 2, [&](int rank) {
    int v = 0;
    if (rank == 1) {
      Request r = comm.irecv(std::span<int>(&v, 1), {0, 0});
      CHECK(r.pending());
      while (!sent.load()) std::this_thread::yield();
      CHECK(comm.progress() >= 1);
      CHECK_FALSE(r.pending());
      CHECK(v == 42);
    } else {
      v = 42;
      comm.send(std::span<const int>(&v, 1), 1, 0);
      sent = true;
    }
  });
  comm.free();
}

TEST_CASE("pipeline reassembles interleaved senders") {
  auto comm = Threadcomm::init(ProcGroup::single(), 3, with_protocol(Protocol::Pipeline));
  parallel(comm, 3, [&](int rank) {
    if (rank != 0) {
      const auto data = pattern(64 * 1024, static_cast<std::uint32_t>(rank));
      comm.send(std::span<const std::byte>(data), 0, 9);
      CHECK(comm.stats().pipeline_sends == 1);
    } else {
      std::vector<std::byte> a(64 * 1024), b(64 * 1024);
      Request ra = comm.irecv(std::span<std::byte>(a), {1, 9});
      Request rb = comm.irecv(std::span<std::byte>(b), {2, 9});
      ra.wait();
      rb.wait();
      CHECK(a == pattern(64 * 1024, 1));
      CHECK(b == pattern(64 * 1024, 2));
    }
  });
  comm.free();
}

TEST_CASE("pipeline with a tiny pool does not deadlock") {
  Config cfg = with_protocol(Protocol::Pipeline);
  cfg.cells_per_rank = 4;
  cfg.cell_size = 1024;
  cfg.eager_threshold = 512;
  auto comm = Threadcomm::init(ProcGroup::single(), 4, cfg);
  parallel(comm, 4, [&](int rank) {
    // Everyone sends to everyone at once, then receives.
    std::vector<Request> reqs;
    std::vector<std::vector<std::byte>> in(4, std::vector<std::byte>(20000));
    std::vector<std::vector<std::byte>> out;
    for (int d = 0; d < 4; ++d) out.push_back(pattern(20000, static_cast<std::uint32_t>(rank * 4 + d)));
    for (int d = 0; d < 4; ++d) reqs.push_back(comm.isend(std::span<const std::byte>(out[d]), d, 0));
    for (int s = 0; s < 4; ++s) reqs.push_back(comm.irecv(std::span<std::byte>(in[s]), {s, 0}));
    for (auto& r : reqs) r.wait();
    for (int s = 0; s < 4; ++s) CHECK(in[s] == pattern(20000, static_cast<std::uint32_t>(s * 4 + rank)));
  });
  CHECK(comm.free_cells() == comm.total_cells());
  comm.free();
}

TEST_CASE("protocols deliver identical payloads") {
  std::mt19937 rng(17);
  std::vector<std::size_t> sizes;
  for (int i = 0; i < 30; ++i) sizes.push_back(1 + rng() % (4u << 20));
  sizes.push_back(1);
  sizes.push_back(4u << 20);
  for (Protocol p : {Protocol::Eager, Protocol::OneCopy, Protocol::Pipeline, Protocol::Auto}) {
    CAPTURE(to_string(p));
    auto comm = Threadcomm::init(ProcGroup::single(), 2, with_protocol(p));
    parallel(comm, 2, [&](int rank) {
      for (std::size_t i = 0; i < sizes.size(); ++i) {
        const auto data = pattern(sizes[i], static_cast<std::uint32_t>(i));
        if (rank == 0) {
          comm.send(std::span<const std::byte>(data), 1, 0);
        } else {
          std::vector<std::byte> out(sizes[i]);
          comm.recv(std::span<std::byte>(out), {0, 0});
          REQUIRE(out == data);
        }
      }
    });
    CHECK(comm.free_cells() == comm.total_cells());
    comm.free();
  }
}

TEST_CASE("random isend/irecv graph with wait-all") {
  constexpr int n = 8;
  constexpr int edges = 10000;
  std::mt19937 rng(2024);
  struct Edge {
    int src, dst, tag;
    std::size_t len;
  };
  std::vector<Edge> graph;
  for (int e = 0; e < edges; ++e) {
    const std::size_t len = (rng() % 100 == 0) ? rng() % 200000 : rng() % 6000;
    graph.push_back({static_cast<int>(rng() % n), static_cast<int>(rng() % n), static_cast<int>(rng() % 4), len});
  }
  auto comm = Threadcomm::init(ProcGroup::single(), n, Config{});
  parallel(comm, n, [&](int rank) {
    std::vector<std::vector<std::byte>> send_bufs, recv_bufs;
    std::vector<int> recv_edge;
    std::vector<Request> reqs;
    for (int e = 0; e < edges; ++e) {
      if (graph[e].dst == rank) {
        recv_bufs.emplace_back(graph[e].len);
        recv_edge.push_back(e);
      }
    }
    std::size_t ri = 0;
    for (int e = 0; e < edges; ++e) {
      if (graph[e].src == rank) {
        send_bufs.push_back(pattern(graph[e].len, static_cast<std::uint32_t>(e)));
        reqs.push_back(comm.isend(std::span<const std::byte>(send_bufs.back()), graph[e].dst, graph[e].tag));
      }
      if (graph[e].dst == rank) {
        reqs.push_back(comm.irecv(std::span<std::byte>(recv_bufs[ri]), {graph[e].src, graph[e].tag}));
        ++ri;
      }
    }
    for (auto& r : reqs) r.wait();
    for (std::size_t i = 0; i < recv_edge.size(); ++i) {
      REQUIRE(recv_bufs[i] == pattern(graph[recv_edge[i]].len, static_cast<std::uint32_t>(recv_edge[i])));
    }
  });
  CHECK(comm.free_cells() == comm.total_cells());
  comm.free();
}
