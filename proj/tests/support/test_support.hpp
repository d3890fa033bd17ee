#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "halo/error.hpp"

namespace halo::testing {

namespace fs = std::filesystem;

fs::path fixture(const std::string& relative);
fs::path cli_path();

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir();
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const noexcept { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

struct CliResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

// Runs the built `halo` binary as a child process. extra_env entries are
// "KEY=VALUE" to set or a bare "KEY" to unset.
CliResult run_cli(const std::vector<std::string>& args, const std::vector<std::string>& extra_env = {});

// Code of the halo::Error thrown by fn, nullopt when nothing is thrown.
std::optional<ErrorCode> error_code_of(const std::function<void()>& fn);

std::string slurp(const fs::path& path);
void spit(const fs::path& path, const std::string& text);

}  // namespace halo::testing
