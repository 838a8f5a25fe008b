#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace hiex {

/// Node index inside a hierarchy. Dense 0..N-1 within one tree.
using NodeId = int;

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Malformed or inconsistent configuration / input files.
struct ConfigError : Error {
  using Error::Error;
};

/// Shapes or identifiers that do not match between artifacts.
struct MismatchError : Error {
  using Error::Error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw Error(msg);
}

// ---------------------------------------------------------------------------
// Seed derivation. A global seed is split into independent streams by mixing
// in a label and indices, so any subset of a run replays identically.
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a,
                                 std::uint64_t b = 0, std::uint64_t c = 0) {
  std::uint64_t s = splitmix64(seed ^ 0x6a09e667f3bcc908ULL);
  s = splitmix64(s ^ splitmix64(a));
  s = splitmix64(s ^ splitmix64(b + 0x3c6ef372fe94f82bULL));
  s = splitmix64(s ^ splitmix64(c + 0xa54ff53a5f1d36f1ULL));
  return s;
}

inline std::uint64_t derive_seed(std::uint64_t seed, const std::string& label,
                                 std::uint64_t a = 0, std::uint64_t b = 0) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : label) h = (h ^ ch) * 1099511628211ULL;
  return derive_seed(seed, h, a, b);
}

using Rng = std::mt19937_64;

// ---------------------------------------------------------------------------
// Dense (node, variable, time) grid. The shared layout for panel slices,
// model contexts and importance scores.
// ---------------------------------------------------------------------------

struct Grid3 {
  int nodes = 0, vars = 0, len = 0;
  std::vector<double> v;

  Grid3() = default;
  Grid3(int n, int va, int t, double fill = 0.0)
      : nodes(n), vars(va), len(t), v(static_cast<size_t>(n) * va * t, fill) {}

  double& at(int n, int va, int t) {
    return v[(static_cast<size_t>(n) * vars + va) * len + t];
  }
  double at(int n, int va, int t) const {
    return v[(static_cast<size_t>(n) * vars + va) * len + t];
  }
  size_t size() const { return v.size(); }
  bool same_shape(const Grid3& o) const {
    return nodes == o.nodes && vars == o.vars && len == o.len;
  }
  bool all_finite() const {
    for (double x : v)
      if (!std::isfinite(x)) return false;
    return true;
  }
};

// ---------------------------------------------------------------------------
// Standard normal helpers. inverse_normal_cdf uses the Acklam rational
// approximation polished by one Halley step, accurate to ~1e-15.
// ---------------------------------------------------------------------------

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

inline double inverse_normal_cdf(double p) {
  require(p > 0.0 && p < 1.0, "inverse_normal_cdf: p must be in (0,1)");
  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                             -2.759285104469687e+02, 1.383577518672690e+02,
                             -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                             -1.556989798598866e+02, 6.680131188771972e+01,
                             -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                             -2.400758277161838e+00, -2.549732539343734e+00,
                             4.374664141464968e+00,  2.938163982698783e+00};
  static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                             2.445134137142996e+00, 3.754408661907416e+00};
  const double plow = 0.02425, phigh = 1 - plow;
  double q, r, x;
  if (p < plow) {
    q = std::sqrt(-2 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
  } else if (p <= phigh) {
    q = p - 0.5;
    r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1);
  } else {
    q = std::sqrt(-2 * std::log(1 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
  }
  double e = normal_cdf(x) - p;
  double u = e * std::sqrt(2 * M_PI) * std::exp(x * x / 2);
  return x - u / (1 + x * u / 2);
}

/// Empirical quantile with linear interpolation between order statistics.
/// `sorted` must be ascending and non-empty.
inline double interpolated_quantile(const std::vector<double>& sorted, double level) {
  require(!sorted.empty(), "quantile of empty sample");
  require(level > 0.0 && level < 1.0, "quantile level must be in (0,1)");
  const double pos = level * (static_cast<double>(sorted.size()) - 1.0);
  const size_t lo = static_cast<size_t>(std::floor(pos));
  if (lo + 1 >= sorted.size()) return sorted.back();
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac;
}

}  // namespace hiex
