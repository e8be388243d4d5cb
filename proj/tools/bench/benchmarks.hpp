#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "threadcomm/config.hpp"
#include "threadcomm/proc_group.hpp"

namespace tcbench {

inline constexpr const char* kCsvHeader =
    "benchmark,nprocs,nthreads,msg_size,variant,iterations,latency_us,bandwidth_MBps";

struct BenchResult {
  std::string benchmark;
  int nprocs = 1;
  int nthreads = 1;
  std::size_t msg_size = 0;
  std::string variant;
  std::size_t iterations = 0;
  double latency_us = 0;
  double bandwidth_MBps = 0;
};

void write_csv_row(std::ostream& os, const BenchResult& r);

struct BenchOptions {
  int threads = 2;  // per process
  std::vector<std::size_t> sizes;
  std::vector<threadcomm::Protocol> protocols{threadcomm::Protocol::Auto};
  std::vector<std::string> variants;
  std::size_t iters = 10000;
  std::size_t warmup = 1000;
  std::uint64_t seed = 42;
  bool verify = false;
  bool verify_protocol = false;
  bool bind = false;
};

/// Median of `samples`; reorders them.
double median(std::vector<double>& samples);

// Every process of the group must call the same function with the same
// options. Results are complete on the process holding global rank 0 and
// empty elsewhere. Verification failures throw threadcomm::Error.
std::vector<BenchResult> bench_latency(const std::shared_ptr<threadcomm::ProcGroup>& group, const BenchOptions& opts);
std::vector<BenchResult> bench_bandwidth(const std::shared_ptr<threadcomm::ProcGroup>& group,
                                         const BenchOptions& opts);
std::vector<BenchResult> bench_barrier(const std::shared_ptr<threadcomm::ProcGroup>& group, const BenchOptions& opts);
std::vector<BenchResult> bench_reduce(const std::shared_ptr<threadcomm::ProcGroup>& group, const BenchOptions& opts);

}  // namespace tcbench
