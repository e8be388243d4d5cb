#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "threadcomm/proc_group.hpp"

namespace tcbench {

struct ConformanceOptions {
  int threads = 4;  // per process
  std::uint64_t seed = 42;
  std::vector<std::string> suites;  // empty: all
  bool verbose = false;
};

struct CaseResult {
  std::string suite;
  std::string name;
  bool passed = false;          // agreed across processes
  std::vector<std::string> detail;  // local failures only
  double seconds = 0;
};

std::vector<std::string> suite_names();

/// Runs the selected suites on every process of `group`; each process gets
/// the same list of results.
std::vector<CaseResult> run_conformance(const std::shared_ptr<threadcomm::ProcGroup>& group,
                                        const ConformanceOptions& opts);

}  // namespace tcbench
