#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "mmgl/tensor.hpp"
#include "oracles.hpp"

namespace support {

using mmgl::Grid;
using mmgl::Index;

inline std::vector<oracle::Vec> random_vectors(std::mt19937_64& rng, int n, int dim, bool unit) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<oracle::Vec> out(static_cast<std::size_t>(n), oracle::Vec(static_cast<std::size_t>(dim)));
  for (auto& v : out) {
    for (auto& x : v) x = g(rng);
    if (unit) {
      const double s = std::sqrt(oracle::dot(v, v));
      for (auto& x : v) x /= s;
    }
  }
  return out;
}

// One vector per row.
template <typename Scalar>
Grid<Scalar> rows_of(const std::vector<oracle::Vec>& v) {
  Grid<Scalar> g(static_cast<Index>(v.size()), static_cast<Index>(v.front().size()));
  for (Index i = 0; i < g.rows(); ++i)
    for (Index j = 0; j < g.cols(); ++j) g(i, j) = static_cast<Scalar>(v[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]);
  return g;
}

// One vector per column.
template <typename Scalar>
Grid<Scalar> cols_of(const std::vector<oracle::Vec>& v) {
  return rows_of<Scalar>(v).transpose();
}

// Oracle inputs rounded through Scalar, so both sides see identical numbers.
template <typename Scalar>
std::vector<oracle::Vec> rounded(const std::vector<oracle::Vec>& v) {
  auto out = v;
  for (auto& r : out)
    for (auto& x : r) x = static_cast<double>(static_cast<Scalar>(x));
  return out;
}

inline std::vector<int> random_labels(std::mt19937_64& rng, int n, int classes) {
  std::uniform_int_distribution<int> u(0, classes - 1);
  std::vector<int> out(static_cast<std::size_t>(n));
  for (auto& c : out) c = u(rng);
  return out;
}

// partner of 2m is 2m+1 and vice versa.
inline std::vector<int> adjacent_pairs(int n) {
  std::vector<int> p(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) p[static_cast<std::size_t>(i)] = i ^ 1;
  return p;
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("mmgl_" + tag + "_" + std::to_string(rd()));
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

}  // namespace support
