#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "gnr/tensor.hpp"
#include "gnr/toy_unet.hpp"

namespace gnr::test {

inline Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Tensor t(shape);
  for (double& v : t.data()) v = n(rng);
  return t;
}

/// Directory holding the trained toy and adapter weights produced by the
/// ctest fixture. Empty when the fixture has not run.
inline std::filesystem::path fixture_dir() {
  if (const char* env = std::getenv("GNR_FIXTURE_DIR"); env && *env) return env;
#ifdef GNR_FIXTURE_DIR
  return GNR_FIXTURE_DIR;
#else
  return {};
#endif
}

inline bool have_toy_weights() { return std::filesystem::exists(fixture_dir() / "toy.bin"); }

/// A small randomly initialized network; no training involved.
inline const ToyUNet& untrained_net() {
  static const ToyUNet net(ToyConfig{}, 7);
  return net;
}

struct FdCheck {
  int checked = 0;
  int failed = 0;
  double worst = 0.0;
};

/// Central differences of `f` at `z` on `count` random coordinates, compared
/// against `grad`. Relative error uses max(|fd|, |grad|) with an absolute floor
/// so coordinates with a vanishing derivative are compared absolutely.
inline FdCheck finite_difference_check(const std::function<double(const Tensor&)>& f, const Tensor& z,
                                       const Tensor& grad, int count, std::uint64_t seed, double h = 1e-3,
                                       double tol = 1e-3) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, z.size() - 1);
  double gmax = 0.0;
  for (double g : grad.data()) gmax = std::max(gmax, std::abs(g));
  const double floor = std::max(1e-10, 1e-6 * gmax);
  FdCheck out;
  for (int k = 0; k < count; ++k) {
    const std::size_t i = pick(rng);
    Tensor zp = z, zm = z;
    zp[i] += h;
    zm[i] -= h;
    const double fd = (f(zp) - f(zm)) / (2.0 * h);
    const double rel = std::abs(fd - grad[i]) / std::max({std::abs(fd), std::abs(grad[i]), floor});
    out.worst = std::max(out.worst, rel);
    ++out.checked;
    if (rel > tol) ++out.failed;
  }
  return out;
}

}  // namespace gnr::test
