#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace umrm {

inline constexpr const char* kArtifactVersion = "umrm-0.1.0";

// Thrown when an operation produces or consumes non-finite values, or a
// training loop diverges. The CLI maps this to exit code 3.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid configuration, bad arguments, violated preconditions. Exit code 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Filesystem / serialization failures. Exit code 4.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// FNV-1a, 64-bit. Used for config hashes, output-file content hashes and
// checkpoint provenance ids; these are reproducibility checks, not security.
inline uint64_t fnv1a64(const void* bytes, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a64(std::string_view s, uint64_t h = 0xcbf29ce484222325ull) {
  return fnv1a64(s.data(), s.size(), h);
}

inline std::string hex64(uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

}  // namespace umrm
