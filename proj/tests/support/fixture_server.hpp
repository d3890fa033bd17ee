#pragma once

#include <chrono>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>

namespace halo::testing {

// Local chat-completions endpoint that replays a fixed script of
// (status, body) replies and records every request it receives.
class FixtureServer {
 public:
  struct Reply {
    int status = 200;
    std::string body;
  };
  struct Received {
    std::string path;
    std::string body;
    std::string authorization;
    std::string content_type;
    std::chrono::steady_clock::time_point at;
  };

  explicit FixtureServer(std::vector<Reply> script);
  ~FixtureServer();
  FixtureServer(const FixtureServer&) = delete;
  FixtureServer& operator=(const FixtureServer&) = delete;

  // e.g. http://127.0.0.1:41234/v1
  std::string base_url() const;
  std::vector<Received> received() const;

  // A well-formed completion whose content is `text`.
  static std::string completion_body(const std::string& text);

 private:
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  std::vector<Reply> script_;
  mutable std::mutex mutex_;
  std::vector<Received> received_;
};

}  // namespace halo::testing
