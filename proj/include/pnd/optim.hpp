#pragma once

#include <cstdint>
#include <vector>

#include "pnd/tensor.hpp"

namespace pnd {

struct AdamState {
  std::vector<std::vector<real>> m, v;
  std::uint64_t t = 0;
};

struct AdamHyper {
  real beta1 = real(0.9);
  real beta2 = real(0.999);
  real eps = real(1e-8);
};

/// One Adam step with bias correction. Weight decay is decoupled: each
/// parameter first shrinks by lr * weight_decay * param. Parameters without a
/// gradient buffer are left alone. A non-finite gradient aborts the step
/// before anything is modified.
void adam_step(const std::vector<Tensor>& params, AdamState& state, real lr, real weight_decay,
               const AdamHyper& h = {});

class Adam {
 public:
  explicit Adam(std::vector<Tensor> params, AdamHyper h = {}) : params_(std::move(params)), h_(h) {}

  void step(real lr, real weight_decay) { adam_step(params_, state_, lr, weight_decay, h_); }
  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }
  void reset() { state_ = {}; }
  const AdamState& state() const { return state_; }

 private:
  std::vector<Tensor> params_;
  AdamState state_;
  AdamHyper h_;
};

}  // namespace pnd
