#include "pnd/optim.hpp"

#include <cmath>
#include <string>

#include "pnd/errors.hpp"

namespace pnd {

void adam_step(const std::vector<Tensor>& params, AdamState& state, real lr, real weight_decay, const AdamHyper& h) {
  for (std::size_t k = 0; k < params.size(); ++k)
    for (real g : params[k].grad())
      if (!std::isfinite(g)) throw NumericError("adam_step: non-finite gradient in parameter " + std::to_string(k));

  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), {});
    state.v.assign(params.size(), {});
    state.t = 0;
  }
  ++state.t;
  const double t = static_cast<double>(state.t);
  const real c1 = static_cast<real>(1.0 - std::pow(static_cast<double>(h.beta1), t));
  const real c2 = static_cast<real>(1.0 - std::pow(static_cast<double>(h.beta2), t));

  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor p = params[k];
    if (!p.has_grad()) continue;
    auto& m = state.m[k];
    auto& v = state.v[k];
    if (m.empty()) {
      m.assign(p.numel(), real(0));
      v.assign(p.numel(), real(0));
    }
    auto w = p.data();
    auto g = p.grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (weight_decay != real(0)) w[i] -= lr * weight_decay * w[i];
      m[i] = h.beta1 * m[i] + (1 - h.beta1) * g[i];
      v[i] = h.beta2 * v[i] + (1 - h.beta2) * g[i] * g[i];
      const real mhat = m[i] / c1;
      const real vhat = v[i] / c2;
      w[i] -= lr * mhat / (std::sqrt(vhat) + h.eps);
    }
  }
}

}  // namespace pnd
