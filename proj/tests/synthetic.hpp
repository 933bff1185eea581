#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "qcm/common.hpp"

namespace qcm_test {

struct Contaminated {
  qcm::Matrix x;
  std::vector<bool> truth;  // true for injected rows
};

// Standard-normal blob with a fraction of rows replaced by points drawn
// uniformly in a box of half-width `reach`, rejected until at least `min_norm`
// from the origin.
inline Contaminated contaminated_blob(std::size_t n, std::size_t d, double fraction, std::uint64_t seed,
                                      double reach = 6.0, double min_norm = 5.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::uniform_real_distribution<double> ud(-reach, reach);
  Contaminated out{qcm::Matrix(n, d), std::vector<bool>(n, false)};
  const auto n_out = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  for (std::size_t i = 0; i < n; ++i) {
    const bool bad = i % (n / n_out) == 0 && i / (n / n_out) < n_out;
    out.truth[i] = bad;
    if (!bad) {
      for (std::size_t c = 0; c < d; ++c) out.x(i, c) = nd(rng);
      continue;
    }
    for (;;) {
      double ss = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        out.x(i, c) = ud(rng);
        ss += out.x(i, c) * out.x(i, c);
      }
      if (std::sqrt(ss) >= min_norm) break;
    }
  }
  return out;
}

}  // namespace qcm_test
