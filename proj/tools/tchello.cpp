// Smallest threadcomm program: every thread prints its rank.
//   tcrun -n 2 -- tchello 4   prints "Rank 0 / 8" .. "Rank 7 / 8"

#include <cstdio>
#include <cstdlib>
#include <thread>
#include <vector>

#include "threadcomm/proc_group.hpp"
#include "threadcomm/threadcomm.hpp"

int main(int argc, char** argv) {
  const int threads = argc > 1 ? std::atoi(argv[1]) : 4;
  auto comm = threadcomm::Threadcomm::init(threadcomm::ProcGroup::from_environment(), threads);
  std::vector<std::jthread> team;
  for (int i = 0; i < threads; ++i) {
    team.emplace_back([&] {
      comm.start();
      std::printf("Rank %d / %d\n", comm.rank(), comm.size());
      comm.finish();
    });
  }
  team.clear();
  comm.free();
}
