#include "pnd/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "pnd/errors.hpp"
#include "pnd/ops.hpp"

namespace pnd {

namespace {

struct Evaluation {
  double loss;
  std::uint64_t branches;
};

Evaluation eval_loss(const std::function<Tensor()>& loss_fn, KinkProbe& probe, std::size_t tensor,
                     std::size_t coord) {
  NoGradScope no_grad;
  probe.reset();
  const Tensor loss = loss_fn();
  const double v = loss.value();
  if (!std::isfinite(v)) {
    throw NumericError("finite_difference_check: non-finite loss while perturbing tensor " + std::to_string(tensor) +
                       " coordinate " + std::to_string(coord));
  }
  return {v, probe.signature()};
}

}  // namespace

GradCheckResult finite_difference_check(const std::function<Tensor()>& loss_fn, const std::vector<Tensor>& inputs,
                                        real step) {
  if (!(step > 0.0f)) throw ContractError("finite_difference_check: step must be positive");
  std::vector<Tensor> xs = inputs;
  std::vector<bool> saved_flags;
  for (auto& x : xs) {
    saved_flags.push_back(x.requires_grad());
    x.set_requires_grad(true);
    x.zero_grad();
  }
  DetachFreeze freeze;
  KinkProbe probe;
  std::uint64_t base_branches = 0;
  {
    Tape tape;
    TapeScope scope(tape);
    const Tensor loss = loss_fn();
    base_branches = probe.signature();
    if (!std::isfinite(loss.value())) throw NumericError("finite_difference_check: non-finite loss at the base point");
    loss.backward();
  }

  GradCheckResult result;
  double worst_abs = -1.0;
  double all_diff2 = 0.0, all_a2 = 0.0, all_n2 = 0.0;
  for (std::size_t t = 0; t < xs.size(); ++t) {
    Tensor& x = xs[t];
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i) {
      const double analytic = x.has_grad() ? x.grad()[i] : 0.0;
      if (!std::isfinite(analytic)) {
        throw NumericError("finite_difference_check: non-finite gradient at tensor " + std::to_string(t) +
                           " coordinate " + std::to_string(i));
      }
      const real original = x.data()[i];
      const real plus = original + step;
      const real minus = original - step;
      x.data()[i] = plus;
      freeze.replay();
      const Evaluation f_plus = eval_loss(loss_fn, probe, t, i);
      x.data()[i] = minus;
      freeze.replay();
      const Evaluation f_minus = eval_loss(loss_fn, probe, t, i);
      x.data()[i] = original;
      if (f_plus.branches != base_branches || f_minus.branches != base_branches) {
        ++result.coordinates_skipped;
        continue;
      }
      const double numeric = (f_plus.loss - f_minus.loss) / (static_cast<double>(plus) - static_cast<double>(minus));
      diff2 += (analytic - numeric) * (analytic - numeric);
      a2 += analytic * analytic;
      n2 += numeric * numeric;
      ++result.coordinates_checked;
      if (std::abs(analytic - numeric) > worst_abs) {
        worst_abs = std::abs(analytic - numeric);
        result.coordinate = i;
        result.analytic = analytic;
        result.numeric = numeric;
      }
    }
    all_diff2 += diff2;
    all_a2 += a2;
    all_n2 += n2;
    const double rel = std::sqrt(diff2) / std::max({std::sqrt(a2), std::sqrt(n2), 1e-8});
    if (rel > result.max_rel_error) {
      result.max_rel_error = rel;
      result.tensor_index = t;
    }
  }
  result.overall_rel_error = std::sqrt(all_diff2) / std::max({std::sqrt(all_a2), std::sqrt(all_n2), 1e-8});
  for (std::size_t t = 0; t < xs.size(); ++t) {
    xs[t].set_requires_grad(saved_flags[t]);
  }
  return result;
}

double finite_difference_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, real step) {
  return finite_difference_check([&] { return f(x); }, {x}, step).max_rel_error;
}

}  // namespace pnd
