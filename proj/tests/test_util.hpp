#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "prefixprobe/core.hpp"

namespace prefixprobe::testing {

// Scratch directory removed at scope exit.
class TempDir {
 public:
  TempDir() {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("prefixprobe-test-" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::string file(const std::string& name) const { return (path_ / name).string(); }

  std::string write(const std::string& name, const std::string& content) const {
    const auto p = file(name);
    detail::write_file(p, content);
    return p;
  }

 private:
  std::filesystem::path path_;
};

}  // namespace prefixprobe::testing
