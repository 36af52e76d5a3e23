#pragma once

// Shared plumbing: error type, deterministic RNG, fingerprinting and
// little-endian float32 blob I/O used by the dataset and checkpoint formats.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace had {

using Mat = Eigen::MatrixXd;
using RowVec = Eigen::RowVectorXd;

/// Error with a stable machine-parsable category ("io", "validation",
/// "corrupt-dataset", "config", "usage", "nan-loss", "internal").
class Error : public std::runtime_error {
public:
  Error(std::string category, const std::string& message)
      : std::runtime_error(message), category_(std::move(category)) {}
  const std::string& category() const { return category_; }

private:
  std::string category_;
};

[[noreturn]] inline void fail(const std::string& category, const std::string& message) {
  throw Error(category, message);
}

// ---------------------------------------------------------------------------
// Deterministic RNG.
//
// Wraps splitmix64 for stream derivation and xoshiro-style mixing through
// std::mt19937_64 for the bulk stream. Normal draws use the basic Box-Muller
// transform so the byte-for-byte sequence does not depend on the standard
// library's distribution internals.
// ---------------------------------------------------------------------------

inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline uint64_t fnv1a64(std::string_view bytes, uint64_t seed = 0xcbf29ce484222325ULL) {
  uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

class Rng {
public:
  explicit Rng(uint64_t seed) : seed_(seed) {
    uint64_t s = seed;
    gen_.seed(splitmix64(s));
  }

  uint64_t seed() const { return seed_; }

  uint64_t bits() { return gen_(); }

  /// Uniform double in [0, 1).
  double uniform() {
    return static_cast<double>(bits() >> 11) * 0x1.0p-53;
  }

  /// Standard normal via Box-Muller (two uniforms per draw).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  /// Uniform integer in [0, n). n must be > 0.
  uint64_t index(uint64_t n) {
    // rejection sampling to avoid modulo bias
    uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t v = bits();
    while (v >= limit) v = bits();
    return v % n;
  }

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[index(i)]);
    }
  }

  /// Derive an independent stream keyed by a tag.
  Rng fork(std::string_view tag) const {
    return Rng(splitmix_combine(seed_, fnv1a64(tag)));
  }
  Rng fork(std::string_view tag, uint64_t n) const {
    return Rng(splitmix_combine(splitmix_combine(seed_, fnv1a64(tag)), n));
  }

  Mat normal_matrix(Eigen::Index rows, Eigen::Index cols, double stddev = 1.0) {
    Mat m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = stddev * normal();
    return m;
  }

private:
  static uint64_t splitmix_combine(uint64_t a, uint64_t b) {
    uint64_t s = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
    return splitmix64(s);
  }

  uint64_t seed_;
  std::mt19937_64 gen_;
};

// ---------------------------------------------------------------------------
// Little-endian float32 blob I/O (dataset features and checkpoint blobs).
// ---------------------------------------------------------------------------

inline void append_f32_le(std::string& out, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  out.push_back(static_cast<char>(bits & 0xff));
  out.push_back(static_cast<char>((bits >> 8) & 0xff));
  out.push_back(static_cast<char>((bits >> 16) & 0xff));
  out.push_back(static_cast<char>((bits >> 24) & 0xff));
}

inline float read_f32_le(const char* p) {
  uint32_t bits = (static_cast<uint32_t>(static_cast<unsigned char>(p[0]))) |
                  (static_cast<uint32_t>(static_cast<unsigned char>(p[1])) << 8) |
                  (static_cast<uint32_t>(static_cast<unsigned char>(p[2])) << 16) |
                  (static_cast<uint32_t>(static_cast<unsigned char>(p[3])) << 24);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

/// Append a row-major f32 rendering of a double matrix.
inline void append_matrix_f32(std::string& out, const Mat& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      append_f32_le(out, static_cast<float>(m(r, c)));
}

/// Read rows*cols f32 values (row-major) starting at p into a double matrix.
inline Mat read_matrix_f32(const char* p, Eigen::Index rows, Eigen::Index cols) {
  Mat m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) {
      m(r, c) = static_cast<double>(read_f32_le(p));
      p += 4;
    }
  return m;
}

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("io", "cannot open file: " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

inline void write_file_bytes(const std::string& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail("io", "cannot write file: " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail("io", "short write: " + path);
}

/// Round a double matrix through float32 (used when persisting parameters so
/// that the in-memory model and its checkpoint agree exactly).
inline void quantize_f32(Mat& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      m(r, c) = static_cast<double>(static_cast<float>(m(r, c)));
}

inline bool all_finite(const Mat& m) { return m.allFinite(); }

/// Row-wise softmax of a plain matrix.
inline Mat softmax_rows(const Mat& x) {
  Mat out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    double mx = x.row(r).maxCoeff();
    Eigen::RowVectorXd e = (x.row(r).array() - mx).exp();
    out.row(r) = e / e.sum();
  }
  return out;
}

}  // namespace had
