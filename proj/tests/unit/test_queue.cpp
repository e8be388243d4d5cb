#include <doctest.h>

#include <algorithm>
#include <memory>
#include <atomic>
#include <random>
#include <set>
#include <vector>

#include "parallel.hpp"
#include "threadcomm/cell_pool.hpp"
#include "threadcomm/mpsc_queue.hpp"

using namespace threadcomm;

namespace {

struct Item : MpscNode {
  int producer = 0;
  int seq = 0;
};

}  // namespace

TEST_CASE("queue pops in push order for one producer") {
  MpscQueue<Item> q;
  std::vector<Item> items(3);
  for (int i = 0; i < 3; ++i) {
    items[i].seq = i + 1;
    q.push(&items[i]);
  }
  for (int i = 1; i <= 3; ++i) {
    Item* it = q.pop();
    REQUIRE(it != nullptr);
    CHECK(it->seq == i);
  }
  CHECK(q.pop() == nullptr);
  CHECK(q.empty());
}

TEST_CASE("empty queue pops nothing") {
  MpscQueue<Item> q;
  CHECK(q.empty());
  CHECK(q.pop() == nullptr);
  CHECK(q.pop() == nullptr);
}

TEST_CASE("queue can be refilled after draining") {
  MpscQueue<Item> q;
  Item a, b;
  for (int round = 0; round < 5; ++round) {
    a.seq = round;
    q.push(&a);
    CHECK(q.pop() == &a);
    CHECK(q.pop() == nullptr);
    q.push(&a);
    q.push(&b);
    CHECK(q.pop() == &a);
    CHECK(q.pop() == &b);
    CHECK(q.pop() == nullptr);
  }
}

TEST_CASE("queue stress keeps per-producer order without loss") {
  constexpr int producers = 8;
  constexpr int per = 20000;
  std::vector<std::unique_ptr<Item[]>> items;
  for (int p = 0; p < producers; ++p) items.push_back(std::make_unique<Item[]>(per));
  MpscQueue<Item> q;
  std::vector<int> next(producers, 0);
  int received = 0;

  std::thread consumer([&] {
    while (received < producers * per) {
      Item* it = q.pop();
      if (it == nullptr) {
        std::this_thread::yield();
        continue;
      }
      CHECK(it->seq == next[it->producer]);
      next[it->producer] = it->seq + 1;
      ++received;
    }
  });
  tctest::threads(producers, [&](int p) {
    for (int i = 0; i < per; ++i) {
      items[p][i].producer = p;
      items[p][i].seq = i;
      q.push(&items[p][i]);
      if (i % 256 == 0) std::this_thread::yield();
    }
  });
  consumer.join();
  CHECK(received == producers * per);
  CHECK(q.pop() == nullptr);
  for (int p = 0; p < producers; ++p) CHECK(next[p] == per);
}

TEST_CASE("pool hands out distinct cells until exhausted") {
  CellPool pool(2, 64, 8192);
  std::set<Cell*> seen;
  for (int i = 0; i < 64; ++i) {
    Cell* c = pool.acquire(1);
    REQUIRE(c != nullptr);
    CHECK(c->owner_rank == 1);
    CHECK(c->capacity == 8192);
    CHECK(reinterpret_cast<std::uintptr_t>(c) % 64 == 0);
    CHECK(seen.insert(c).second);
  }
  CHECK(pool.acquire(1) == nullptr);
  CHECK(pool.free_count(0) == 64);

  Cell* back = *seen.begin();
  pool.release(back);
  Cell* again = pool.acquire(1);
  CHECK(again != nullptr);
  CHECK(pool.acquire(1) == nullptr);
  pool.release(again);
  seen.erase(back);
  for (Cell* c : seen) pool.release(c);
  CHECK(pool.free_count() == pool.total_cells());
}

TEST_CASE("pool payloads do not overlap") {
  CellPool pool(1, 8, 100);
  std::vector<Cell*> cells;
  for (int i = 0; i < 8; ++i) cells.push_back(pool.acquire(0));
  for (int i = 0; i < 8; ++i) std::fill_n(cells[i]->payload(), 100, static_cast<std::byte>(i));
  for (int i = 0; i < 8; ++i) {
    CHECK(std::all_of(cells[i]->payload(), cells[i]->payload() + 100,
                      [i](std::byte b) { return b == static_cast<std::byte>(i); }));
    pool.release(cells[i]);
  }
}

TEST_CASE("random acquire and release conserve the pool") {
  CellPool pool(3, 16, 64);
  std::mt19937 rng(7);
  std::vector<Cell*> held;
  for (int step = 0; step < 10000; ++step) {
    if (held.empty() || rng() % 2 == 0) {
      const int r = static_cast<int>(rng() % 3);
      if (Cell* c = pool.acquire(r)) held.push_back(c);
    } else {
      const std::size_t i = rng() % held.size();
      pool.release(held[i]);
      held.erase(held.begin() + static_cast<std::ptrdiff_t>(i));
    }
    if (step % 97 == 0) CHECK(pool.free_count() + held.size() == pool.total_cells());
  }
  for (Cell* c : held) pool.release(c);
  CHECK(pool.free_count() == pool.total_cells());
}

TEST_CASE("concurrent acquire and release never double-grant") {
  constexpr int cells = 32;
  CellPool pool(1, cells, 16);
  std::vector<Cell*> all;
  for (int i = 0; i < cells; ++i) all.push_back(pool.acquire(0));
  std::sort(all.begin(), all.end());
  for (Cell* c : all) pool.release(c);

  std::vector<std::atomic<int>> owner(cells);
  for (auto& o : owner) o = -1;
  std::atomic<int> violations{0};
  tctest::threads(8, [&](int t) {
    std::vector<Cell*> mine;
    for (int i = 0; i < 20000; ++i) {
      if (mine.size() < 6) {
        if (Cell* c = pool.acquire(0)) {
          const auto it = std::lower_bound(all.begin(), all.end(), c);
          if (it == all.end() || *it != c) {
            ++violations;
            continue;
          }
          int expected = -1;
          if (!owner[it - all.begin()].compare_exchange_strong(expected, t)) ++violations;
          mine.push_back(c);
        }
      }
      if (!mine.empty() && (i % 3 == 0 || mine.size() == 6)) {
        Cell* c = mine.back();
        mine.pop_back();
        owner[std::lower_bound(all.begin(), all.end(), c) - all.begin()] = -1;
        pool.release(c);
      }
    }
    for (Cell* c : mine) {
      owner[std::lower_bound(all.begin(), all.end(), c) - all.begin()] = -1;
      pool.release(c);
    }
  });
  CHECK(violations == 0);
  CHECK(pool.free_count() == cells);
}
