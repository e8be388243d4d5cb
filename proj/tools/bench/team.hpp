#pragma once

#include <pthread.h>

#include <cstdio>
#include <exception>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "threadcomm/threadcomm.hpp"

namespace tcbench {

// Thread-safe failure log for one conformance case.
class Checker {
 public:
  void fail(const std::string& what) {
    std::lock_guard lock(mu_);
    if (messages_.size() < 8) messages_.push_back(what);
    ++failures_;
  }
  bool expect(bool cond, const std::string& what) {
    if (!cond) fail(what);
    return cond;
  }
  bool ok() const {
    std::lock_guard lock(mu_);
    return failures_ == 0;
  }
  std::vector<std::string> messages() const {
    std::lock_guard lock(mu_);
    return messages_;
  }
  std::size_t failures() const {
    std::lock_guard lock(mu_);
    return failures_;
  }

 private:
  mutable std::mutex mu_;
  std::vector<std::string> messages_;
  std::size_t failures_ = 0;
};

inline void bind_to_core(int index) {
  const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  cpu_set_t set;
  CPU_ZERO(&set);
  CPU_SET(static_cast<unsigned>(index) % hw, &set);
  pthread_setaffinity_np(pthread_self(), sizeof(set), &set);
}

// Spawns n threads that each call body(i) and joins them.
template <class Body>
void spawn(int n, Body body, bool bind = false) {
  std::vector<std::thread> ts;
  ts.reserve(n);
  for (int i = 0; i < n; ++i) {
    ts.emplace_back([&, i] {
      if (bind) bind_to_core(i);
      body(i);
    });
  }
  for (auto& t : ts) t.join();
}

// The parallel region: every thread binds to `comm`, runs body(rank) and
// unbinds. An exception inside body is logged to `chk`; the thread still
// tries to finish so that its peers are not left waiting.
template <class Body>
void team(threadcomm::Threadcomm& comm, int n, Checker& chk, Body body, bool bind = false) {
  spawn(
      n,
      [&](int) {
        int rank = -1;
        try {
          rank = comm.start();
        } catch (const std::exception& e) {
          chk.fail(std::string("start: ") + e.what());
          return;
        }
        try {
          body(rank);
        } catch (const std::exception& e) {
          std::fprintf(stderr, "rank %d: %s\n", rank, e.what());
          chk.fail("rank " + std::to_string(rank) + ": " + e.what());
        }
        try {
          comm.finish();
        } catch (const std::exception& e) {
          chk.fail("rank " + std::to_string(rank) + " finish: " + e.what());
        }
      },
      bind);
}

}  // namespace tcbench
