#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace pnd {

// Element type of every tensor. The default build is float32; defining
// PND_FLOAT64 switches the whole engine to double (used by the gradient
// test suite).
#ifdef PND_FLOAT64
using real = double;
inline constexpr const char* kRealName = "float64";
#else
using real = float;
inline constexpr const char* kRealName = "float32";
#endif

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::vector<real> data;
  std::vector<real> grad;  // empty until first accumulation
  bool requires_grad = false;
  // Rank-0 results of reductions, and scalar arithmetic on them, also keep
  // their value in double precision.
  std::optional<double> exact;
};

/// Dense row-major `real` array with shared ownership. Copies of a Tensor
/// alias the same storage; use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, real value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<real> values, bool requires_grad = false);
  static Tensor scalar(real value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<real> data() { return impl_->data; }
  std::span<const real> data() const { return impl_->data; }
  real item() const;
  // item() in double precision when available (see TensorImpl::exact).
  double value() const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool value) { impl_->requires_grad = value; }
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const real> grad() const { return impl_->grad; }
  std::span<real> grad_mut();
  void zero_grad() { impl_->grad.clear(); }

  Tensor clone() const;
  // Runs reverse-mode differentiation over the active tape.
  void backward() const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Ordered log of differentiable operations executed while the tape is
/// active. Entries are appended in execution order, so reverse iteration is
/// a reverse topological order of the recorded graph.
class Tape {
 public:
  struct Entry {
    std::string_view op;
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::shared_ptr<TensorImpl> output;
    std::function<void()> backward;
  };

  void record(std::string_view op, std::vector<std::shared_ptr<TensorImpl>> inputs,
              std::shared_ptr<TensorImpl> output, std::function<void()> backward);
  void backward(const Tensor& loss);
  void clear() { entries_.clear(); }
  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }
  // Op names in the order backward() visited them during the last pass.
  const std::vector<std::string_view>& last_visit_order() const { return visited_; }

 private:
  std::vector<Entry> entries_;
  std::vector<std::string_view> visited_;
};

/// Installs a tape as the thread's active recording target for its lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

/// Disables recording for its lifetime (evaluation passes).
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

// Adds `values` into the gradient buffer of `impl`, allocating it on demand.
void accumulate_grad(TensorImpl& impl, std::span<const real> values);
std::span<real> grad_buffer(TensorImpl& impl);

}  // namespace pnd
