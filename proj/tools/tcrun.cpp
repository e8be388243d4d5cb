// tcrun -n <P> [--timeout s] -- <prog> [args...]
//
// Starts P copies of prog with TC_PROC_RANK, TC_PROC_COUNT, TC_RENDEZVOUS
// and TC_RENDEZVOUS_TIMEOUT set, waits for all of them and exits nonzero if
// any copy fails. The first failure terminates the remaining copies.

#include <CLI11.hpp>

#include <signal.h>
#include <spawn.h>
#include <stdlib.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cstring>
#include <filesystem>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

extern char** environ;

namespace {

std::vector<pid_t> g_children;

void forward_signal(int sig) {
  for (pid_t pid : g_children) {
    if (pid > 0) ::kill(pid, sig);
  }
}

std::vector<std::string> child_environment(int rank, int count, const std::string& rendezvous, int timeout_s) {
  std::vector<std::string> env;
  for (char** e = environ; *e != nullptr; ++e) {
    const std::string_view kv(*e);
    if (kv.starts_with("TC_PROC_RANK=") || kv.starts_with("TC_PROC_COUNT=") || kv.starts_with("TC_RENDEZVOUS=") ||
        kv.starts_with("TC_RENDEZVOUS_TIMEOUT=")) {
      continue;
    }
    env.emplace_back(kv);
  }
  env.push_back("TC_PROC_RANK=" + std::to_string(rank));
  env.push_back("TC_PROC_COUNT=" + std::to_string(count));
  env.push_back("TC_RENDEZVOUS_TIMEOUT=" + std::to_string(timeout_s));
  if (!rendezvous.empty()) env.push_back("TC_RENDEZVOUS=" + rendezvous);
  return env;
}

std::vector<char*> pointers(std::vector<std::string>& strings) {
  std::vector<char*> out;
  for (auto& s : strings) out.push_back(s.data());
  out.push_back(nullptr);
  return out;
}

int exit_code(int status) {
  if (WIFEXITED(status)) return WEXITSTATUS(status);
  if (WIFSIGNALED(status)) return 128 + WTERMSIG(status);
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Launch P cooperating copies of a threadcomm program"};
  int nprocs = 1;
  int timeout_s = 10;
  std::vector<std::string> command;
  app.add_option("-n,--nprocs", nprocs, "Number of processes")->required()->check(CLI::PositiveNumber);
  app.add_option("--timeout", timeout_s, "Rendezvous timeout in seconds")->check(CLI::PositiveNumber);
  app.add_option("command", command, "Program and its arguments (after --)")->required();
  CLI11_PARSE(app, argc, argv);

  std::string rendezvous;
  if (nprocs > 1) {
    std::string tmpl = (std::filesystem::temp_directory_path() / "tcrun-XXXXXX").string();
    if (::mkdtemp(tmpl.data()) == nullptr) {
      std::cerr << "tcrun: mkdtemp: " << std::strerror(errno) << '\n';
      return 1;
    }
    rendezvous = tmpl;
  }

  struct sigaction sa{};
  sa.sa_handler = forward_signal;
  ::sigaction(SIGINT, &sa, nullptr);
  ::sigaction(SIGTERM, &sa, nullptr);

  int status_out = 0;
  g_children.assign(nprocs, -1);
  for (int rank = 0; rank < nprocs; ++rank) {
    auto env = child_environment(rank, nprocs, rendezvous, timeout_s);
    auto args = command;
    auto envp = pointers(env);
    auto argp = pointers(args);
    pid_t pid = -1;
    const int rc = ::posix_spawnp(&pid, argp[0], nullptr, nullptr, argp.data(), envp.data());
    if (rc != 0) {
      std::cerr << "tcrun: cannot start " << command[0] << ": " << std::strerror(rc) << '\n';
      forward_signal(SIGTERM);
      status_out = 127;
      break;
    }
    g_children[rank] = pid;
  }

  int running = 0;
  for (pid_t pid : g_children) running += pid > 0;
  bool terminating = status_out != 0;
  while (running > 0) {
    int status = 0;
    const pid_t pid = ::waitpid(-1, &status, 0);
    if (pid < 0) {
      if (errno == EINTR) continue;
      break;
    }
    for (int rank = 0; rank < nprocs; ++rank) {
      if (g_children[rank] != pid) continue;
      g_children[rank] = -1;
      --running;
      const int code = exit_code(status);
      if (code != 0 && !terminating) {
        std::cerr << "tcrun: process " << rank << " exited with status " << code << "; stopping the others\n";
        status_out = code;
        terminating = true;
        forward_signal(SIGTERM);
        // Escalate if someone ignores SIGTERM.
        std::thread([] {
          std::this_thread::sleep_for(std::chrono::seconds(3));
          forward_signal(SIGKILL);
        }).detach();
      }
    }
  }

  if (!rendezvous.empty()) {
    std::error_code ec;
    std::filesystem::remove_all(rendezvous, ec);
  }
  return status_out;
}
