#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace splatpose {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NonPositiveDepth : Error { using Error::Error; };
struct DegenerateCloud : Error { using Error::Error; };
struct NoCorrespondences : Error { using Error::Error; };
struct EmptyCloud : Error { using Error::Error; };
struct ScheduleDomain : Error { using Error::Error; };
struct DimensionMismatch : Error { using Error::Error; };
struct SingularSystem : Error { using Error::Error; };
struct DisconnectedGraph : Error { using Error::Error; };
struct InsufficientOverlap : Error { using Error::Error; };
struct NoCovisibility : Error { using Error::Error; };
struct MissingRuns : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };

// ---------------------------------------------------------------------------
// Deterministic RNG
//
// splitmix64 core with a polar Box-Muller normal. Self-contained so streams
// are reproducible bit-for-bit across compilers and standard libraries.
// ---------------------------------------------------------------------------

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // uniform in [0, 1)
  double uniform() {
    return double(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // integer in [0, n)
  int uniform_int(int n) {
    return int(next_u64() % std::uint64_t(n));
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double m = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * m;
    has_spare_ = true;
    return u * m;
  }

  // Derives an independent substream seed from (seed, stream id).
  static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// ---------------------------------------------------------------------------
// Dense row-major image containers
// ---------------------------------------------------------------------------

template <typename T>
struct Image {
  int width = 0;
  int height = 0;
  std::vector<T> data;

  Image() = default;
  Image(int w, int h, T fill = T{}) : width(w), height(h), data(std::size_t(w) * h, fill) {}

  T& at(int x, int y) { return data[std::size_t(y) * width + x]; }
  const T& at(int x, int y) const { return data[std::size_t(y) * width + x]; }
  std::size_t size() const { return data.size(); }
  bool same_shape(int w, int h) const { return width == w && height == h; }
};

// Interleaved 3-channel image (RGB or per-pixel 3-vectors).
struct Image3 {
  int width = 0;
  int height = 0;
  std::vector<double> data;

  Image3() = default;
  Image3(int w, int h, double fill = 0.0)
      : width(w), height(h), data(std::size_t(w) * h * 3, fill) {}

  double& at(int x, int y, int c) { return data[(std::size_t(y) * width + x) * 3 + c]; }
  const double& at(int x, int y, int c) const {
    return data[(std::size_t(y) * width + x) * 3 + c];
  }
  bool same_shape(int w, int h) const { return width == w && height == h; }
};

inline double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

constexpr double kPi = 3.14159265358979323846;

inline double deg2rad(double d) { return d * kPi / 180.0; }
inline double rad2deg(double r) { return r * 180.0 / kPi; }

}  // namespace splatpose
