// End-to-end acceptance checks. Each criterion drives the real tcbench and
// tcrun binaries and prints exactly one "PASS|FAIL <criterion>" line.
//
//   acceptance            run every criterion
//   acceptance <name>...  run the named ones (see --list)

#include <algorithm>
#include <array>
#include <chrono>
#include <cstdio>
#include <cstring>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>

#include "threadcomm/wire.hpp"

#ifndef TCBENCH_PATH
#error "TCBENCH_PATH must name the tcbench binary"
#endif
#ifndef TCRUN_PATH
#error "TCRUN_PATH must name the tcrun binary"
#endif
#ifndef TCHELLO_PATH
#error "TCHELLO_PATH must name the tchello binary"
#endif

namespace {

struct RunResult {
  int status = -1;
  std::string out;
};

RunResult run(const std::string& cmd) {
  RunResult r;
  FILE* pipe = ::popen((cmd + " 2>&1").c_str(), "r");
  if (pipe == nullptr) return r;
  std::array<char, 4096> chunk{};
  std::size_t got = 0;
  while ((got = std::fread(chunk.data(), 1, chunk.size(), pipe)) > 0) r.out.append(chunk.data(), got);
  const int raw = ::pclose(pipe);
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : 128 + (WIFSIGNALED(raw) ? WTERMSIG(raw) : 0);
  return r;
}

std::string launch(int procs, int threads, const std::string& args) {
  return std::string("'") + TCRUN_PATH + "' -n " + std::to_string(procs) + " -- '" + TCBENCH_PATH + "' " + args +
         " --threads " + std::to_string(threads);
}

std::string tcbench(const std::string& args) { return std::string("'") + TCBENCH_PATH + "' " + args; }

std::size_t count_lines(const std::string& text, const std::string& prefix) {
  std::size_t n = 0;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) n += line.rfind(prefix, 0) == 0;
  return n;
}

std::string tail(const std::string& text, std::size_t lines = 15) {
  std::vector<std::string> all;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) all.push_back(line);
  std::string out;
  for (std::size_t i = all.size() > lines ? all.size() - lines : 0; i < all.size(); ++i) out += "    " + all[i] + '\n';
  return out;
}

// Collects failures for one criterion.
struct Verdict {
  std::vector<std::string> problems;
  std::vector<std::string> notes;

  void require(bool cond, const std::string& what) {
    if (!cond) problems.push_back(what);
  }

  // A conformance run passes when it exits 0, reports ALL PASS and ran the
  // expected number of cases.
  void conformance(const std::string& label, const RunResult& r, std::size_t cases) {
    const std::size_t passed = count_lines(r.out, "PASS ");
    const bool ok = r.status == 0 && r.out.find("ALL PASS") != std::string::npos && passed == cases;
    if (!ok) {
      problems.push_back(label + ": exit " + std::to_string(r.status) + ", " + std::to_string(passed) + "/" +
                         std::to_string(cases) + " cases passed\n" + tail(r.out));
    }
  }
};

using Clock = std::chrono::steady_clock;

struct Criterion {
  std::string name;
  double budget_s;
  std::function<void(Verdict&)> body;
};

// ------------------------------------------------------------------ criteria

void rank_semantics(Verdict& v) {
  for (int procs : {1, 2, 4}) {
    for (int threads : {1, 2, 4, 8}) {
      if (procs * threads > 16) continue;
      const auto label = std::to_string(procs) + "x" + std::to_string(threads);
      v.conformance(label, run(launch(procs, threads, "conformance --suite ranks --seed 2024")), 2);
    }
  }
}

void p2p_conformance(Verdict& v) {
  v.conformance("1x16", run(launch(1, 16, "conformance --suite p2p --seed 11")), 7);
  v.conformance("2x8", run(launch(2, 8, "conformance --suite p2p --seed 12")), 7);
}

void mpsc_stress(Verdict& v) { v.conformance("1x1", run(tcbench("conformance --suite queue --seed 3")), 2); }

void collectives(Verdict& v) {
  for (int n : {2, 3, 5, 8, 16}) {
    v.conformance("N=" + std::to_string(n),
                  run(tcbench("conformance --suite collectives --seed 5 --threads " + std::to_string(n))), 5);
  }
}

// Runs a benchmark and returns latency_us per variant from its CSV.
std::map<std::string, double> bench_rows(Verdict& v, const std::string& args, bool use_bandwidth) {
  const RunResult r = run(tcbench(args));
  std::map<std::string, double> rows;
  if (r.status != 0) {
    v.problems.push_back("tcbench " + args + " exited " + std::to_string(r.status) + '\n' + tail(r.out));
    return rows;
  }
  std::istringstream in(r.out);
  for (std::string line; std::getline(in, line);) {
    std::vector<std::string> f;
    std::istringstream fields(line);
    for (std::string x; std::getline(fields, x, ',');) f.push_back(x);
    if (f.size() != 8 || f[0] == "benchmark") continue;
    rows[f[4]] = std::stod(use_bandwidth ? f[7] : f[6]);
  }
  return rows;
}

double median_of(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  return xs.empty() ? 0 : xs[xs.size() / 2];
}

void performance(Verdict& v) {
  constexpr int runs = 5;
  std::map<std::string, std::vector<double>> lat, bw, bar;
  for (int i = 0; i < runs; ++i) {
    for (auto& [k, x] : bench_rows(v, "latency --sizes 8 --protocol eager,onecopy", false)) lat[k].push_back(x);
    for (auto& [k, x] : bench_rows(v, "bandwidth --sizes 1M --protocol onecopy,pipeline --iters 640", true)) {
      bw[k].push_back(x);
    }
    for (auto& [k, x] : bench_rows(v, "barrier --threads 16 --iters 2000 --warmup 200", false)) bar[k].push_back(x);
  }
  if (!v.problems.empty()) return;

  char line[256];
  const double eager = median_of(lat["eager"]), onecopy = median_of(lat["onecopy"]);
  std::snprintf(line, sizeof line, "(a) 8 B latency: eager %.3f us, onecopy %.3f us (need eager <= 0.9 x onecopy)",
                eager, onecopy);
  v.notes.emplace_back(line);
  v.require(eager <= 0.9 * onecopy, line);

  const double bw_one = median_of(bw["onecopy"]), bw_pipe = median_of(bw["pipeline"]);
  std::snprintf(line, sizeof line, "(b) 1 MiB bandwidth: onecopy %.0f MB/s, pipeline %.0f MB/s (need onecopy >= 1.1 x pipeline)",
                bw_one, bw_pipe);
  v.notes.emplace_back(line);
  v.require(bw_one >= 1.1 * bw_pipe, line);

  const double atomic = median_of(bar["atomic"]), message = median_of(bar["message"]), native = median_of(bar["native"]);
  std::snprintf(line, sizeof line,
                "(c) 16-thread barrier: atomic %.3f us, message %.3f us, native %.3f us "
                "(need atomic <= 0.9 x message and atomic <= 3 x native)",
                atomic, message, native);
  v.notes.emplace_back(line);
  v.require(atomic <= 0.9 * message && atomic <= 3 * native, line);
}

void bridge(Verdict& v) {
  // All 31 conformance cases, unmodified, split across two processes.
  v.conformance("tcrun -n 2, 8 threads each", run(launch(2, 8, "conformance --seed 17")), 31);

  // A fixed header and its recorded little-endian encoding.
  using namespace threadcomm::wire;
  WireHeader h;
  h.kind = FrameKind::PipelineChunk;
  h.flags = 0x5A;
  h.comm_id = 0x1234;
  h.src_rank = 0x01020304;
  h.dst_rank = 0x0A0B0C0D;
  h.tag = -2;
  h.seq = 0xCAFEBABE;
  h.msg_len = 0x0102030405060708ULL;
  h.chunk_index = 7;
  h.chunk_total = 128;
  const std::array<unsigned char, kHeaderSize> golden = {
      'T',  'C',  'B',  '1',  0x01, 0x5A, 0x34, 0x12, 0x04, 0x03, 0x02, 0x01, 0x0D, 0x0C,
      0x0B, 0x0A, 0xFE, 0xFF, 0xFF, 0xFF, 0xBE, 0xBA, 0xFE, 0xCA, 0x08, 0x07, 0x06, 0x05,
      0x04, 0x03, 0x02, 0x01, 0x07, 0x00, 0x00, 0x00, 0x80, 0x00, 0x00, 0x00};
  const HeaderBytes bytes = encode(h);
  v.require(std::memcmp(bytes.data(), golden.data(), kHeaderSize) == 0, "wire encoding differs from recorded bytes");
  HeaderBytes recorded{};
  std::memcpy(recorded.data(), golden.data(), kHeaderSize);
  v.require(decode(recorded) == h, "recorded bytes decode to different fields");
}

void lifecycle(Verdict& v) {
  v.conformance("1x4", run(tcbench("conformance --suite lifecycle --threads 4")), 12);
  v.conformance("2x2", run(launch(2, 2, "conformance --suite lifecycle")), 12);
}

void launcher(Verdict& v) {
  const std::string tcrun = std::string("'") + TCRUN_PATH + "'";
  v.require(run(tcrun + " -n 1 -- sh -c 'test \"$TC_PROC_COUNT\" = 1 && test -z \"$TC_RENDEZVOUS\"'").status == 0,
            "tcrun -n 1 should run one copy without a rendezvous directory");
  v.require(run(tcrun + " -n 3 -- sh -c 'test \"$TC_PROC_RANK\" != 1'").status != 0,
            "a failing copy must make tcrun exit nonzero");
  const RunResult hello = run(tcrun + " -n 2 -- '" + TCHELLO_PATH + "' 4");
  bool all_ranks = hello.status == 0 && count_lines(hello.out, "Rank ") == 8;
  for (int r = 0; r < 8; ++r) all_ranks = all_ranks && count_lines(hello.out, "Rank " + std::to_string(r) + " / 8") == 1;
  v.require(all_ranks, "tcrun -n 2 -- tchello 4 should print each of Rank 0..7 / 8 once\n" + tail(hello.out));
  const auto t0 = Clock::now();
  run(tcrun + " -n 2 -- sh -c 'if [ \"$TC_PROC_RANK\" = 1 ]; then exit 1; fi; exec sleep 60'");
  v.require(Clock::now() - t0 < std::chrono::seconds(20), "surviving copies must be stopped after a failure");
}

const std::vector<Criterion>& criteria() {
  static const std::vector<Criterion> all = {
      {"rank-semantics", 30, rank_semantics},
      {"p2p-conformance", 120, p2p_conformance},
      {"mpsc-stress", 60, mpsc_stress},
      {"collectives", 120, collectives},
      {"performance-directions", 180, performance},
      {"bridge-transparency", 120, bridge},
      {"lifecycle", 60, lifecycle},
      {"launcher", 60, launcher},
  };
  return all;
}

bool run_criterion(const Criterion& c) {
  Verdict v;
  const auto t0 = Clock::now();
  try {
    c.body(v);
  } catch (const std::exception& e) {
    v.problems.push_back(std::string("exception: ") + e.what());
  }
  const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  char budget[96];
  std::snprintf(budget, sizeof budget, "took %.1f s, budget %.0f s", secs, c.budget_s);
  v.require(secs < c.budget_s, budget);
  const bool ok = v.problems.empty();
  std::printf("%s %s (%.1f s)\n", ok ? "PASS" : "FAIL", c.name.c_str(), secs);
  for (const auto& n : v.notes) std::printf("    %s\n", n.c_str());
  for (const auto& p : v.problems) std::printf("    problem: %s\n", p.c_str());
  std::fflush(stdout);
  return ok;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> wanted(argv + 1, argv + argc);
  if (wanted.size() == 1 && wanted[0] == "--list") {
    for (const auto& c : criteria()) std::cout << c.name << '\n';
    return 0;
  }
  bool all_ok = true;
  std::size_t ran = 0;
  for (const auto& c : criteria()) {
    if (!wanted.empty() && std::find(wanted.begin(), wanted.end(), c.name) == wanted.end()) continue;
    ++ran;
    all_ok = run_criterion(c) && all_ok;
  }
  if (ran == 0 || (!wanted.empty() && ran != wanted.size())) {
    std::cerr << "unknown criterion; try --list\n";
    return 2;
  }
  return all_ok ? 0 : 1;
}
