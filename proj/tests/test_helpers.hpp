#pragma once

#include <random>
#include <vector>

#include "pnd/tensor.hpp"

namespace pnd::testing {

inline constexpr bool kDouble = sizeof(real) == 8;
// Central-difference step and per-operator bound for the active precision.
inline constexpr real kFdStep = kDouble ? real(1e-4) : real(1e-3);
inline constexpr double kOpTolerance = kDouble ? 1e-6 : 1e-3;

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, real lo = -1.0f, real hi = 1.0f,
                            bool requires_grad = true) {
  std::uniform_real_distribution<real> dist(lo, hi);
  std::vector<real> v(numel_of(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

// Values bounded away from zero so kinks (ReLU, clamp) sit outside the
// finite-difference stencil.
inline Tensor random_away_from_zero(Shape shape, std::mt19937_64& rng, real margin = 0.05f) {
  std::uniform_real_distribution<real> mag(margin, 1.0f);
  std::bernoulli_distribution sign(0.5);
  std::vector<real> v(numel_of(shape));
  for (auto& x : v) x = sign(rng) ? mag(rng) : -mag(rng);
  return Tensor::from(std::move(shape), std::move(v), true);
}

inline std::vector<real> to_vec(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace pnd::testing
