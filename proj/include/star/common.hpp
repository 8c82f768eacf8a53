#pragma once

#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace star {

// Numeric failure inside a kernel, a loss, or a training step (NaN/Inf,
// empty attention row, degenerate feature vector, ...). CLI maps this to
// exit code 3.
class NumericsError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Artifact problem: corrupt checkpoint, config mismatch, bad file magic.
// CLI maps this to exit code 4.
class ArtifactError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration or usage. CLI maps this to exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// FNV-1a over raw bytes; used for parameter checksums in tests and the
// teacher-untouched invariant.
inline std::uint64_t fnv1a(const void* data, std::size_t bytes, std::uint64_t h = 1469598103934665603ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < bytes; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace star
