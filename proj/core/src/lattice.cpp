#include "rwdre/lattice.hpp"

namespace rwdre {

Configuration shift(const Configuration& config, const Site& x) {
  Configuration out = config;
  const auto& lat = config.lattice;
  const std::int64_t n = lat.n_sites();
  for (std::int64_t idx = 0; idx < n; ++idx) {
    const Site y = lat.site_at(idx);
    Site src = kOrigin;
    for (int j = 0; j < lat.d; ++j) src[j] = lat.wrap1(std::int64_t{y[j]} - x[j]);
    out.at(idx) = config.at(lat.index_of(src));
  }
  return out;
}

}  // namespace rwdre
