#pragma once
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "ecgadv/classifier.hpp"

namespace testing {

inline ecgadv::Array1D random_vector(std::size_t n, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, scale);
  ecgadv::Array1D v(n);
  for (double& x : v) x = dist(rng);
  return v;
}

// Single dense layer: z = W x + b.
inline ecgadv::ClassifierModel linear_model(std::size_t length, std::uint64_t seed) {
  return ecgadv::ClassifierModel("linear", {ecgadv::DenseLayer{ecgadv::kNumClasses}}, length,
                                 ecgadv::kNumClasses, seed);
}

// Fresh directory under the system temp dir, removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path = std::filesystem::temp_directory_path() /
           ("ecgadv_" + tag + "_" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

}  // namespace testing
