#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "pnd/tensor.hpp"

namespace pnd {

struct GradCheckResult {
  // Largest per-tensor error ||a - c|| / max(||a||, ||c||, 1e-8) over the
  // checked tensors (Euclidean norms over all coordinates of one tensor).
  double max_rel_error = 0.0;
  std::size_t tensor_index = 0;  // tensor attaining max_rel_error
  // Same measure over all checked tensors taken as one vector.
  double overall_rel_error = 0.0;
  // Coordinate with the largest absolute disagreement, for diagnostics.
  std::size_t coordinate = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates_checked = 0;
  // Coordinates whose +/- step crossed a relu, clamp or max-pool branch
  // point; a central difference is meaningless there.
  std::size_t coordinates_skipped = 0;
};

/// Compares tape gradients of the scalar `loss_fn()` with respect to every
/// coordinate of `inputs` against central differences.
///
/// The error is measured per tensor over the whole gradient rather than per
/// coordinate: at float32, the rounding noise of a central difference with a
/// 1e-3 step is around 1e-5 of the loss magnitude, which swamps coordinates
/// whose true derivative is tiny. Values passing through detach() are frozen
/// at the base point (see DetachFreeze), and coordinates whose perturbation
/// changes a piecewise branch (see KinkProbe) are skipped and counted. `inputs` are perturbed in place and
/// restored. Throws NumericError on a non-finite loss or gradient.
GradCheckResult finite_difference_check(const std::function<Tensor()>& loss_fn, const std::vector<Tensor>& inputs,
                                        real step);

/// Single-input form: `f` maps x to a scalar tensor.
double finite_difference_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, real step);

}  // namespace pnd
