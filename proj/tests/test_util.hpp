#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "calseg/datastore.hpp"

namespace testutil {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "calseg") {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / (tag + "_" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline calseg::Block random_block(std::uint64_t id, std::size_t T, std::size_t H, std::size_t W, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.0f, 1.0f);
  std::vector<float> v(T * H * W);
  for (auto& x : v) x = n(rng);
  return calseg::Block(id, T, H, W, std::move(v));
}

inline std::vector<std::uint8_t> file_bytes(const std::filesystem::path& p) { return calseg::read_bytes(p); }

}  // namespace testutil
