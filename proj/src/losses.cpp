#include "star/losses.hpp"

#include "star/common.hpp"

namespace star {

PositionDraw sample_positions(int k, int t, std::uint64_t seed) {
  if (k < 2) throw ConfigError("sample_positions: need K >= 2 for positive pairs");
  if (k > t) throw ConfigError("sample_positions: K exceeds sequence length");
  Rng rng(seed);
  PositionDraw d;
  d.k = k;
  d.indices = rng.sample_without_replacement(k, t);
  return d;
}

}  // namespace star
