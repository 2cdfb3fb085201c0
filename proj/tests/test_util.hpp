#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "fastadapt/tensor.hpp"

namespace testutil {

inline fastadapt::Tensor random_tensor(const fastadapt::Shape& shape, std::mt19937_64& rng, double lo = -2.0,
                                       double hi = 2.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(fastadapt::shape_size(shape));
  for (double& x : v) x = u(rng);
  return fastadapt::Tensor(shape, std::move(v));
}

// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("fastadapt_" + tag + "_" + std::to_string(rd()));
    std::filesystem::remove_all(path_);
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

}  // namespace testutil
