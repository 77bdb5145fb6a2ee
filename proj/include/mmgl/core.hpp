#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

#include <Eigen/Dense>

#if defined(__SSE2__)
#include <pmmintrin.h>
#include <xmmintrin.h>
#endif

namespace mmgl {

using Index = Eigen::Index;

enum class ErrorKind {
  invalid_input,
  missing_file,
  unreadable_format,
  shape_mismatch,
  invalid_config,
  stage_order,
  config_mismatch,
  corrupt_archive,
  version_mismatch,
  io,
};

constexpr std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::invalid_input: return "invalid input";
    case ErrorKind::missing_file: return "missing file";
    case ErrorKind::unreadable_format: return "unreadable format";
    case ErrorKind::shape_mismatch: return "shape mismatch";
    case ErrorKind::invalid_config: return "invalid config";
    case ErrorKind::stage_order: return "stage order violation";
    case ErrorKind::config_mismatch: return "config mismatch";
    case ErrorKind::corrupt_archive: return "corrupt archive";
    case ErrorKind::version_mismatch: return "version mismatch";
    case ErrorKind::io: return "i/o error";
  }
  return "error";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline void require(bool condition, ErrorKind kind, const std::string& what) {
  if (!condition) throw Error(kind, what);
}

/// splitmix64 finalizer; used to derive independent child seeds from a parent seed.
constexpr std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  return mix_seed(mix_seed(seed) ^ mix_seed(stream + 0x632be59bd9b4e019ULL));
}

template <typename... Streams>
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, Streams... rest) {
  return derive_seed(derive_seed(seed, stream), static_cast<std::uint64_t>(rest)...);
}

using Rng = std::mt19937_64;

/// Treats subnormal floats as zero in the calling thread. Tiny optimizer moments
/// otherwise fall into the slow subnormal path and stall training.
inline void flush_denormals() {
#if defined(__SSE2__)
  _MM_SET_FLUSH_ZERO_MODE(_MM_FLUSH_ZERO_ON);
  _MM_SET_DENORMALS_ZERO_MODE(_MM_DENORMALS_ZERO_ON);
#endif
}

}  // namespace mmgl
