// Benchmark and conformance driver. Composes with tcrun for multi-process
// runs; rows and reports are printed by the process holding rank 0.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "bench/benchmarks.hpp"
#include "bench/conformance.hpp"
#include "threadcomm/error.hpp"

namespace {

using tcbench::BenchOptions;

std::vector<std::size_t> parse_sizes(const std::string& list) {
  std::vector<std::size_t> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t pos = 0;
    const unsigned long long v = std::stoull(item, &pos);
    std::size_t mult = 1;
    const std::string suffix = item.substr(pos);
    if (suffix == "K" || suffix == "k") mult = 1024;
    else if (suffix == "M" || suffix == "m") mult = 1024 * 1024;
    else if (!suffix.empty()) throw CLI::ValidationError("--sizes", "bad size '" + item + "'");
    out.push_back(static_cast<std::size_t>(v) * mult);
  }
  return out;
}

std::vector<std::size_t> powers_of_two(std::size_t lo, std::size_t hi) {
  std::vector<std::size_t> out;
  for (std::size_t s = lo; s <= hi; s *= 2) out.push_back(s);
  return out;
}

struct Cli {
  BenchOptions bench;
  std::string sizes;
  std::string protocols = "auto";
  std::string variants;
  std::string csv;
  std::vector<std::string> suites;
};

int emit(const std::vector<tcbench::BenchResult>& rows, const Cli& cli, bool leader) {
  if (!leader) return 0;
  std::ofstream file;
  std::ostream* os = &std::cout;
  if (!cli.csv.empty()) {
    file.open(cli.csv);
    if (!file) {
      std::cerr << "tcbench: cannot write " << cli.csv << '\n';
      return 1;
    }
    os = &file;
  }
  *os << tcbench::kCsvHeader << '\n';
  for (const auto& r : rows) tcbench::write_csv_row(*os, r);
  return 0;
}

void add_common(CLI::App* sub, Cli& cli) {
  sub->add_option("--threads", cli.bench.threads, "Threads per process")->check(CLI::PositiveNumber);
  sub->add_option("--iters", cli.bench.iters, "Measured iterations (scaled down above 64 KiB)");
  sub->add_option("--warmup", cli.bench.warmup, "Warmup iterations");
  sub->add_option("--csv", cli.csv, "Write CSV here instead of stdout");
  sub->add_option("--seed", cli.bench.seed, "Seed for payloads");
  sub->add_flag("--verify", cli.bench.verify, "Check payloads or results every iteration");
  sub->add_flag("--bind", cli.bench.bind, "Pin thread i to core i mod hardware threads");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "threadcomm benchmarks and conformance suites.\n"
      "The native baselines stand in for an OpenMP runtime: std::barrier for the barrier\n"
      "and per-thread private arrays folded under a lock for the reduction."};
  app.require_subcommand(1);
  Cli cli;

  auto* latency = app.add_subcommand("latency", "Ping-pong between 2 ranks; median half round trip");
  auto* bandwidth = app.add_subcommand("bandwidth", "Windowed stream of 64 messages per ack between 2 ranks");
  auto* barrier = app.add_subcommand("barrier", "Barrier latency: message, atomic, native");
  auto* reduce = app.add_subcommand("reduce", "Int32 SUM reduce latency over array counts: threadcomm, native");
  auto* conformance = app.add_subcommand("conformance", "Run the property suites; exit 0 iff all pass");

  for (auto* sub : {latency, bandwidth, barrier, reduce}) add_common(sub, cli);
  for (auto* sub : {latency, bandwidth}) {
    sub->add_option("--sizes", cli.sizes, "Message sizes, e.g. 8,4K,1M (default 1..4M powers of two)");
    sub->add_option("--protocol", cli.protocols, "auto|eager|onecopy|pipeline, comma separated");
  }
  latency->add_flag("--verify-protocol", cli.bench.verify_protocol, "Assert every send took the expected path");
  barrier->add_option("--variant", cli.variants, "message|atomic|native, comma separated (default all)");
  reduce->add_option("--variant", cli.variants, "threadcomm|native, comma separated (default both)");
  reduce->add_option("--sizes", cli.sizes, "Element counts (default 1..1M powers of four)");

  int conf_threads = 4;
  conformance->add_option("--threads", conf_threads, "Threads per process")->check(CLI::PositiveNumber);
  conformance->add_option("--seed", cli.bench.seed, "Seed for generated traffic");
  conformance->add_option("--suite", cli.suites, "Suite to run; repeatable (default all)")
      ->check(CLI::IsMember(tcbench::suite_names()));
  bool list = false;
  conformance->add_flag("--list", list, "List suites and exit");

  CLI11_PARSE(app, argc, argv);

  try {
    if (conformance->parsed() && list) {
      for (const auto& s : tcbench::suite_names()) std::cout << s << '\n';
      return 0;
    }
    auto group = threadcomm::ProcGroup::from_environment();
    const bool leader = group->proc_rank() == 0;

    if (conformance->parsed()) {
      tcbench::ConformanceOptions opts;
      opts.threads = conf_threads;
      opts.seed = cli.bench.seed;
      opts.suites = cli.suites;
      const auto results = tcbench::run_conformance(group, opts);
      bool all = true;
      for (const auto& r : results) {
        all = all && r.passed;
        // Local failure details go to stderr on every process.
        for (const auto& d : r.detail) {
          std::cerr << "  [proc " << group->proc_rank() << "] " << r.suite << '/' << r.name << ": " << d << '\n';
        }
        if (leader) {
          std::printf("%s %s/%s (%.2f s)\n", r.passed ? "PASS" : "FAIL", r.suite.c_str(), r.name.c_str(), r.seconds);
        }
      }
      if (leader) std::printf("%s: %zu cases, seed %llu\n", all ? "ALL PASS" : "FAILURES", results.size(),
                              static_cast<unsigned long long>(cli.bench.seed));
      return all ? 0 : 1;
    }

    cli.bench.protocols.clear();
    for (const auto& p : CLI::detail::split(cli.protocols, ',')) {
      const auto parsed = threadcomm::parse_protocol(p);
      if (!parsed) throw CLI::ValidationError("--protocol", "unknown protocol '" + p + "'");
      cli.bench.protocols.push_back(*parsed);
    }

    std::vector<tcbench::BenchResult> rows;
    if (latency->parsed() || bandwidth->parsed()) {
      cli.bench.sizes = cli.sizes.empty() ? powers_of_two(1, 4u << 20) : parse_sizes(cli.sizes);
      rows = latency->parsed() ? tcbench::bench_latency(group, cli.bench) : tcbench::bench_bandwidth(group, cli.bench);
    } else if (barrier->parsed()) {
      cli.bench.variants = cli.variants.empty() ? std::vector<std::string>{"message", "atomic", "native"}
                                                : CLI::detail::split(cli.variants, ',');
      for (const auto& v : cli.bench.variants) {
        if (v != "message" && v != "atomic" && v != "native") throw CLI::ValidationError("--variant", v);
      }
      rows = tcbench::bench_barrier(group, cli.bench);
    } else if (reduce->parsed()) {
      if (reduce->count("--threads") == 0) cli.bench.threads = 16;
      cli.bench.sizes = cli.sizes.empty() ? std::vector<std::size_t>{1, 4, 16, 64, 256, 1024, 4096, 16384, 65536,
                                                                     262144, 1048576}
                                          : parse_sizes(cli.sizes);
      cli.bench.variants = cli.variants.empty() ? std::vector<std::string>{"threadcomm", "native"}
                                                : CLI::detail::split(cli.variants, ',');
      for (const auto& v : cli.bench.variants) {
        if (v != "threadcomm" && v != "native") throw CLI::ValidationError("--variant", v);
      }
      rows = tcbench::bench_reduce(group, cli.bench);
    }
    return emit(rows, cli, leader);
  } catch (const CLI::Error& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "tcbench: " << e.what() << '\n';
    return 2;
  }
}
