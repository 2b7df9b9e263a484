#pragma once

// Plain-loop reference evaluations of the contrastive objectives, written
// directly from their definitions without the tape.

#include <cmath>
#include <cstdint>
#include <vector>

#include "support/gradcheck.hpp"

namespace macrec::testing {

inline DTensor drandom(std::size_t r, std::size_t c, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed, "drandom");
  return random_tensor({r, c}, rng, scale);
}

inline double ddot(const DTensor& a, std::size_t i, const DTensor& b, std::size_t j) {
  double s = 0;
  for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(j, k);
  return s;
}

// InfoNCE of each anchor against its positive over the whole batch, averaged
// over the anchors that have a positive.
inline double brute_positive_infonce(const DTensor& r, const std::vector<int>& pos, double tau) {
  double total = 0;
  std::size_t anchors = 0;
  for (std::size_t i = 0; i < r.rows(); ++i) {
    if (pos[i] < 0) continue;
    double denom = 0;
    for (std::size_t j = 0; j < r.rows(); ++j) denom += std::exp(ddot(r, i, r, j) / tau);
    total += -std::log(std::exp(ddot(r, i, r, static_cast<std::size_t>(pos[i])) / tau) / denom);
    ++anchors;
  }
  return anchors == 0 ? 0.0 : total / static_cast<double>(anchors);
}

// Row i of `a` paired with row i of `b`, both directions summed.
inline double brute_symmetric_infonce(const DTensor& a, const DTensor& b, double tau) {
  const std::size_t n = a.rows();
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double da = 0, db = 0;
    for (std::size_t j = 0; j < n; ++j) {
      da += std::exp(ddot(a, i, b, j) / tau);
      db += std::exp(ddot(b, i, a, j) / tau);
    }
    total += -std::log(std::exp(ddot(a, i, b, i) / tau) / da) - std::log(std::exp(ddot(b, i, a, i) / tau) / db);
  }
  return total / static_cast<double>(n);
}

inline std::vector<std::uint32_t> random_labels(std::size_t n, std::uint32_t k, std::uint64_t seed) {
  Rng rng(seed, "labels");
  std::vector<std::uint32_t> out(n);
  for (auto& l : out) l = static_cast<std::uint32_t>(rng.below(k));
  return out;
}

}  // namespace macrec::testing
