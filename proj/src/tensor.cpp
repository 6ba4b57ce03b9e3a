#include "pnd/tensor.hpp"

#include <algorithm>
#include <sstream>

#include "pnd/errors.hpp"

namespace pnd {

namespace {
thread_local Tape* g_active_tape = nullptr;
}

std::size_t numel_of(const Shape& shape) {
  std::size_t n = 1;
  for (auto extent : shape) n *= extent;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  if (shape.size() == 1) os << ',';
  os << ')';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0f, requires_grad); }

Tensor Tensor::full(Shape shape, real value, bool requires_grad) {
  auto impl = std::make_shared<TensorImpl>();
  impl->data.assign(numel_of(shape), value);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<real> values, bool requires_grad) {
  if (numel_of(shape) != values.size()) {
    throw ShapeError("Tensor::from: shape " + shape_str(shape) + " needs " + std::to_string(numel_of(shape)) +
                     " values, got " + std::to_string(values.size()));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(real value, bool requires_grad) { return from({}, {value}, requires_grad); }

real Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

double Tensor::value() const {
  if (impl_->exact && numel() == 1) return *impl_->exact;
  return item();
}

std::span<real> Tensor::grad_mut() { return grad_buffer(*impl_); }

Tensor Tensor::clone() const {
  auto impl = std::make_shared<TensorImpl>(*impl_);
  return Tensor(std::move(impl));
}

void Tensor::backward() const {
  Tape* tape = active_tape();
  if (tape == nullptr) throw ContractError("backward() called without an active tape");
  tape->backward(*this);
}

void Tape::record(std::string_view op, std::vector<std::shared_ptr<TensorImpl>> inputs,
                  std::shared_ptr<TensorImpl> output, std::function<void()> backward) {
  output->requires_grad = true;
  entries_.push_back(Entry{op, std::move(inputs), std::move(output), std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  visited_.clear();
  if (!loss.requires_grad()) return;
  const real one = 1.0f;
  accumulate_grad(*loss.impl(), std::span<const real>(&one, 1));
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->output->grad.empty()) continue;
    visited_.push_back(it->op);
    it->backward();
  }
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = previous_; }

Tape* active_tape() { return g_active_tape; }

std::span<real> grad_buffer(TensorImpl& impl) {
  if (impl.grad.empty()) impl.grad.assign(impl.data.size(), 0.0f);
  return impl.grad;
}

void accumulate_grad(TensorImpl& impl, std::span<const real> values) {
  auto g = grad_buffer(impl);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += values[i];
}

}  // namespace pnd
