#pragma once

#include <cstdio>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace halo {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string read_file(const fs::path& path);

// Writes to a sibling temp file and renames it over `path`.
void write_file_atomic(const fs::path& path, std::string_view contents);

std::string sha256_hex(std::string_view bytes);

// One parsed line of a JSON-lines file; `line` is 1-based.
struct JsonLine {
  std::size_t line;
  json value;
};

// Blank lines are skipped. Throws MalformedRecord naming the offending line.
std::vector<JsonLine> read_jsonl(const fs::path& path);

std::string dump_jsonl(const std::vector<json>& rows);

// Appends one object per line and flushes after each, so an interrupted
// writer leaves at most one partial trailing line behind.
class JsonlAppender {
 public:
  JsonlAppender(const fs::path& path, bool truncate);
  ~JsonlAppender();
  JsonlAppender(const JsonlAppender&) = delete;
  JsonlAppender& operator=(const JsonlAppender&) = delete;

  void append(const json& row);

 private:
  fs::path path_;
  std::FILE* file_ = nullptr;
};

// UTC ISO-8601 timestamp. Honours SOURCE_DATE_EPOCH so reruns can be pinned.
std::string utc_timestamp();

// Advisory flock on `<dir>/.lock`; released when the holder exits or dies.
class DirectoryLock {
 public:
  explicit DirectoryLock(const fs::path& dir);
  ~DirectoryLock();
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  int fd_ = -1;
};

}  // namespace halo
