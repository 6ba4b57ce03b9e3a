#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "pnd/tensor.hpp"

// Differentiable operator catalog. Every operator computes its forward value
// eagerly and, when a tape is active and some input requires gradients,
// records a backward closure on that tape.
//
// Layout conventions: images are NCHW, class scores are (N, C).
namespace pnd {

// Elementwise, operands of identical shape.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, real factor);
Tensor add_scalar(const Tensor& a, real offset);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
// x^p; the derivative at x == 0 is taken as 0 when p < 1.
Tensor pow(const Tensor& a, real exponent);
Tensor clamp_min(const Tensor& a, real floor);
Tensor relu(const Tensor& a);

// Reductions to a scalar; accumulation is done in double.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// (N, C) -> (N,)
Tensor sum_rows(const Tensor& a);

Tensor reshape(const Tensor& a, Shape shape);
// Concatenates along `axis`; all other extents must agree.
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
// Leading-axis selection, repeated indices allowed.
Tensor index_rows(const Tensor& a, std::span<const std::size_t> rows);
// (N, C) -> (N,): picks a[n, labels[n]].
Tensor gather(const Tensor& a, std::span<const int> labels);
// (N, C) -> (N,): column j.
Tensor column(const Tensor& a, std::size_t j);
// k tensors of shape (N,) -> (N, k).
Tensor stack_columns(const std::vector<Tensor>& cols);
// (N, C) * (N,) broadcast along the class axis.
Tensor scale_rows(const Tensor& a, const Tensor& s);

Tensor softmax(const Tensor& logits);
Tensor log_softmax(const Tensor& logits);
// Per-sample cross-entropy of (N, C) logits, shape (N,).
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);
// Row-wise Euclidean distance between two (N, C) tensors, shape (N,).
// The derivative at zero distance is taken as 0.
Tensor row_distance(const Tensor& a, const Tensor& b);

Tensor detach(const Tensor& a);

/// While alive, accumulates a fingerprint of every piecewise branch taken by
/// relu, clamp_min and max_pool2d on this thread. Two evaluations with equal
/// fingerprints sit on the same smooth piece of the function.
class KinkProbe {
 public:
  KinkProbe();
  ~KinkProbe();
  KinkProbe(const KinkProbe&) = delete;
  KinkProbe& operator=(const KinkProbe&) = delete;

  void reset() { hash_ = 0xcbf29ce484222325ULL; }
  std::uint64_t signature() const { return hash_; }
  void mix(std::uint64_t v) { hash_ = (hash_ ^ v) * 0x100000001b3ULL; }

 private:
  KinkProbe* previous_;
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

/// While alive, detach() calls on this thread are recorded in call order;
/// after replay() they return the recorded values instead of their input.
/// Finite-difference checks use this to hold every stop-gradient point at
/// its base-point value, which is the function the tape differentiates.
class DetachFreeze {
 public:
  DetachFreeze();
  ~DetachFreeze();
  DetachFreeze(const DetachFreeze&) = delete;
  DetachFreeze& operator=(const DetachFreeze&) = delete;

  void replay() {
    replaying_ = true;
    cursor_ = 0;
  }
  std::size_t recorded() const { return saved_.size(); }
  Tensor next(const Tensor& a);

 private:
  DetachFreeze* previous_;
  std::vector<Tensor> saved_;
  bool replaying_ = false;
  std::size_t cursor_ = 0;
};

// (N, in) x (out, in)^T + (out,). `bias` may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
// weight (O, C, kh, kw); no bias term.
Tensor conv2d(const Tensor& x, const Tensor& weight, std::size_t stride, std::size_t padding);

struct BatchNormStats {
  Tensor running_mean;
  Tensor running_var;
};

// Training mode normalizes with batch statistics and updates `stats`
// (unbiased variance for the running estimate). Eval mode uses `stats` only.
Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormStats& stats, bool training,
                    real momentum = 0.1f, real eps = 1e-5f);
Tensor max_pool2d(const Tensor& x, std::size_t kernel, std::size_t stride, std::size_t padding);
// Adaptive average pooling to 1x1, flattened: (N, C, H, W) -> (N, C).
Tensor global_avg_pool(const Tensor& x);

// Row-wise argmax of an (N, C) tensor; ties resolve to the lowest index.
std::vector<int> argmax_rows(const Tensor& a);

}  // namespace pnd
