#pragma once

// Central finite-difference gradient checks shared by the unit and acceptance tests.

#include <cmath>
#include <algorithm>
#include <functional>
#include <numeric>
#include <vector>

#include "lddpm/autograd.hpp"

namespace lddpm::testing {

struct GradCheck {
  double rel_error = 0.0;  ///< ||analytic - numeric|| / max(||analytic||, ||numeric||)
  double analytic_norm = 0.0;
  double numeric_norm = 0.0;
};

enum class Probe {
  spread,   ///< evenly spaced coordinates
  largest,  ///< coordinates with the largest analytic gradient, where float round-off matters least
};

/// Compares d f / d param against central differences. `f` must rebuild its graph on
/// every call and return a scalar. At most `max_probes` coordinates are checked.
inline GradCheck check_gradient(const std::function<ag::Var()>& f, ag::Var param, float h = 1e-2f,
                                int max_probes = 24, Probe probe = Probe::spread) {
  param.zero_grad();
  ag::backward(f());
  const Tensor analytic = param.has_grad() ? param.grad() : Tensor(param.shape(), 0.0f);
  const std::int64_t n = param.value().size();
  std::vector<std::int64_t> coords;
  if (probe == Probe::largest) {
    coords.resize(static_cast<std::size_t>(n));
    std::iota(coords.begin(), coords.end(), 0);
    const auto keep = std::min<std::int64_t>(n, max_probes);
    std::partial_sort(coords.begin(), coords.begin() + keep, coords.end(),
                      [&](std::int64_t a, std::int64_t b) { return std::abs(analytic[a]) > std::abs(analytic[b]); });
    coords.resize(static_cast<std::size_t>(keep));
  } else {
    const std::int64_t stride = std::max<std::int64_t>(1, n / max_probes);
    for (std::int64_t k = 0; k < n; k += stride) coords.push_back(k);
  }
  double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
  for (std::int64_t k : coords) {
    const float orig = param.value()[k];
    auto at = [&](float offset) {
      param.mutable_value()[k] = orig + offset;
      return static_cast<double>(f().item());
    };
    // Fourth-order central stencil: admits a larger h before float round-off dominates.
    const double num = (8.0 * (at(h) - at(-h)) - (at(2.0f * h) - at(-2.0f * h))) / (12.0 * h);
    param.mutable_value()[k] = orig;
    const double an = analytic[k];
    diff2 += (an - num) * (an - num);
    a2 += an * an;
    n2 += num * num;
  }
  GradCheck r;
  r.analytic_norm = std::sqrt(a2);
  r.numeric_norm = std::sqrt(n2);
  const double denom = std::max({r.analytic_norm, r.numeric_norm, 1e-12});
  r.rel_error = std::sqrt(diff2) / denom;
  return r;
}

}  // namespace lddpm::testing
