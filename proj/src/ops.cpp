#include "pnd/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "pnd/errors.hpp"

namespace pnd {

namespace {

using RowMat = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConstMat = Eigen::Map<const RowMat>;

using ImplPtr = std::shared_ptr<TensorImpl>;

bool wants_grad(std::initializer_list<const Tensor*> inputs) {
  if (active_tape() == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

Tensor make(Shape shape) { return Tensor::zeros(std::move(shape)); }

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_fail(op, a.shape(), b.shape());
}

void require_rank(const char* op, const Tensor& a, std::size_t rank) {
  if (a.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                     shape_str(a.shape()));
  }
}

// Accumulates into an input's gradient only when that input takes part in
// differentiation.
template <typename F>
void if_grad(const ImplPtr& p, F&& fn) {
  if (p->requires_grad) fn(grad_buffer(*p));
}

double precise(const Tensor& t) { return t.value(); }

// Carries the double-precision value through scalar arithmetic.
template <typename F>
void propagate_exact(Tensor& out, F&& fn) {
  if (out.rank() == 0) out.impl()->exact = fn();
}

template <typename Fwd, typename Bwd>
Tensor unary(const char* op, const Tensor& a, Fwd fwd, Bwd bwd) {
  Tensor out = make(a.shape());
  auto x = a.data();
  auto y = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = static_cast<real>(fwd(x[i]));
  propagate_exact(out, [&] { return static_cast<double>(fwd(precise(a))); });
  if (wants_grad({&a})) {
    ImplPtr pa = a.impl(), po = out.impl();
    active_tape()->record(op, {pa}, po, [pa, po, bwd] {
      if_grad(pa, [&](std::span<real> ga) {
        const auto& gy = po->grad;
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += bwd(pa->data[i], po->data[i], gy[i]);
      });
    });
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same("add", a, b);
  Tensor out = make(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
  propagate_exact(out, [&] { return precise(a) + precise(b); });
  if (wants_grad({&a, &b})) {
    ImplPtr pa = a.impl(), pb = b.impl(), po = out.impl();
    active_tape()->record("add", {pa, pb}, po, [pa, pb, po] {
      if_grad(pa, [&](std::span<real> g) { for (std::size_t i = 0; i < g.size(); ++i) g[i] += po->grad[i]; });
      if_grad(pb, [&](std::span<real> g) { for (std::size_t i = 0; i < g.size(); ++i) g[i] += po->grad[i]; });
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same("sub", a, b);
  Tensor out = make(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
  propagate_exact(out, [&] { return precise(a) - precise(b); });
  if (wants_grad({&a, &b})) {
    ImplPtr pa = a.impl(), pb = b.impl(), po = out.impl();
    active_tape()->record("sub", {pa, pb}, po, [pa, pb, po] {
      if_grad(pa, [&](std::span<real> g) { for (std::size_t i = 0; i < g.size(); ++i) g[i] += po->grad[i]; });
      if_grad(pb, [&](std::span<real> g) { for (std::size_t i = 0; i < g.size(); ++i) g[i] -= po->grad[i]; });
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same("mul", a, b);
  Tensor out = make(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
  propagate_exact(out, [&] { return precise(a) * precise(b); });
  if (wants_grad({&a, &b})) {
    ImplPtr pa = a.impl(), pb = b.impl(), po = out.impl();
    active_tape()->record("mul", {pa, pb}, po, [pa, pb, po] {
      if_grad(pa, [&](std::span<real> g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += po->grad[i] * pb->data[i];
      });
      if_grad(pb, [&](std::span<real> g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += po->grad[i] * pa->data[i];
      });
    });
  }
  return out;
}

Tensor scale(const Tensor& a, real factor) {
  return unary("scale", a, [factor](auto x) { return x * factor; },
               [factor](real, real, real gy) { return gy * factor; });
}

Tensor add_scalar(const Tensor& a, real offset) {
  return unary("add_scalar", a, [offset](auto x) { return x + offset; }, [](real, real, real gy) { return gy; });
}

Tensor exp(const Tensor& a) {
  return unary("exp", a, [](auto x) { return std::exp(x); }, [](real, real y, real gy) { return gy * y; });
}

Tensor log(const Tensor& a) {
  return unary("log", a, [](auto x) { return std::log(x); }, [](real x, real, real gy) { return gy / x; });
}

Tensor pow(const Tensor& a, real exponent) {
  return unary(
      "pow", a, [exponent](auto x) { return std::pow(x, static_cast<decltype(x)>(exponent)); },
      [exponent](real x, real, real gy) {
        if (x == 0.0f && exponent < 1.0f) return real(0);
        return gy * exponent * std::pow(x, exponent - real(1));
      });
}

namespace {
thread_local KinkProbe* g_probe = nullptr;

void probe_mask(const Tensor& a, real floor) {
  if (!g_probe) return;
  std::uint64_t word = 0;
  std::size_t bits = 0;
  for (real v : a.data()) {
    word = (word << 1) | (v > floor ? 1u : 0u);
    if (++bits == 64) {
      g_probe->mix(word);
      word = 0;
      bits = 0;
    }
  }
  g_probe->mix(word ^ (bits << 56));
}
}  // namespace

KinkProbe::KinkProbe() : previous_(g_probe) { g_probe = this; }
KinkProbe::~KinkProbe() { g_probe = previous_; }

Tensor clamp_min(const Tensor& a, real floor) {
  probe_mask(a, floor);
  return unary("clamp_min", a, [floor](auto x) { return x > floor ? x : static_cast<decltype(x)>(floor); },
               [floor](real x, real, real gy) { return x > floor ? gy : real(0); });
}

Tensor relu(const Tensor& a) {
  probe_mask(a, 0.0f);
  return unary("relu", a, [](auto x) { return x > 0 ? x : decltype(x){0}; },
               [](real x, real, real gy) { return x > 0 ? gy : real(0); });
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (real v : a.data()) acc += v;
  Tensor out = Tensor::scalar(static_cast<real>(acc));
  out.impl()->exact = acc;
  if (wants_grad({&a})) {
    ImplPtr pa = a.impl(), po = out.impl();
    active_tape()->record("sum", {pa}, po, [pa, po] {
      if_grad(pa, [&](std::span<real> g) {
        const real gy = po->grad[0];
        for (auto& v : g) v += gy;
      });
    });
  }
  return out;
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("mean: empty tensor");
  double acc = 0.0;
  for (real v : a.data()) acc += v;
  const double n = static_cast<double>(a.numel());
  Tensor out = Tensor::scalar(static_cast<real>(acc / n));
  out.impl()->exact = acc / n;
  if (wants_grad({&a})) {
    ImplPtr pa = a.impl(), po = out.impl();
    active_tape()->record("mean", {pa}, po, [pa, po, n] {
      if_grad(pa, [&](std::span<real> g) {
        const real gy = static_cast<real>(po->grad[0] / n);
        for (auto& v : g) v += gy;
      });
    });
  }
  return out;
}

Tensor sum_rows(const Tensor& a) {
  require_rank("sum_rows", a, 2);
  const std::size_t n = a.dim(0), c = a.dim(1);
  Tensor out = make({n});
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < c; ++j) acc += a.data()[i * c + j];
    out.data()[i] = static_cast<real>(acc);
  }
  if (wants_grad({&a})) {
    ImplPtr pa = a.impl(), po = out.impl();
    active_tape()->record("sum_rows", {pa}, po, [pa, po, n, c] {
      if_grad(pa, [&](std::span<real> g) {
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < c; ++j) g[i * c + j] += po->grad[i];
      });
    });
  }
  return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel_of(shape) != a.numel()) shape_fail("reshape", a.shape(), shape);
  Tensor out = Tensor::from(std::move(shape), std::vector<real>(a.data().begin(), a.data().end()));
  if (wants_grad({&a})) {
    ImplPtr pa = a.impl(), po = out.impl();
    active_tape()->record("reshape", {pa}, po, [pa, po] {
      if_grad(pa, [&](std::span<real> g) { for (std::size_t i = 0; i < g.size(); ++i) g[i] += po->grad[i]; });
    });
  }
  return out;
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no operands");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range for shape " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == first[d];
    if (!ok) shape_fail("concat", first, s);
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];
  Tensor out = make(out_shape);
  const std::size_t out_stride = out_shape[axis] * inner;
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t block = p.dim(axis) * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(p.data().data() + o * block, block, out.data().data() + o * out_stride + off);
    }
    off += block;
  }
  bool grad = false;
  for (const auto& p : parts) grad = grad || p.requires_grad();
  if (grad && active_tape() != nullptr) {
    std::vector<ImplPtr> ins;
    for (const auto& p : parts) ins.push_back(p.impl());
    ImplPtr po = out.impl();
    active_tape()->record("concat", ins, po, [ins, po, offsets, outer, inner, axis, out_stride] {
      for (std::size_t k = 0; k < ins.size(); ++k) {
        if_grad(ins[k], [&](std::span<real> g) {
          const std::size_t block = ins[k]->shape[axis] * inner;
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < block; ++i) g[o * block + i] += po->grad[o * out_stride + offsets[k] + i];
        });
      }
    });
  }
  return out;
}

Tensor index_rows(const Tensor& a, std::span<const std::size_t> rows) {
  if (a.rank() < 1) throw ShapeError("index_rows: scalar operand");
  const std::size_t n = a.dim(0);
  const std::size_t inner = n == 0 ? 0 : a.numel() / n;
  Shape shape = a.shape();
  shape[0] = rows.size();
  Tensor out = make(shape);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= n) throw ShapeError("index_rows: row " + std::to_string(rows[r]) + " out of range for shape " +
                                       shape_str(a.shape()));
    std::copy_n(a.data().data() + rows[r] * inner, inner, out.data().data() + r * inner);
  }
  if (wants_grad({&a})) {
    ImplPtr pa = a.impl(), po = out.impl();
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    active_tape()->record("index_rows", {pa}, po, [pa, po, idx, inner] {
      if_grad(pa, [&](std::span<real> g) {
        for (std::size_t r = 0; r < idx.size(); ++r)
          for (std::size_t i = 0; i < inner; ++i) g[idx[r] * inner + i] += po->grad[r * inner + i];
      });
    });
  }
  return out;
}

Tensor gather(const Tensor& a, std::span<const int> labels) {
  require_rank("gather", a, 2);
  const std::size_t n = a.dim(0), c = a.dim(1);
  if (labels.size() != n) shape_fail("gather", a.shape(), Shape{labels.size()});
  Tensor out = make({n});
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c)
      throw ShapeError("gather: label " + std::to_string(labels[i]) + " out of range for shape " + shape_str(a.shape()));
    out.data()[i] = a.data()[i * c + labels[i]];
  }
  if (wants_grad({&a})) {
    ImplPtr pa = a.impl(), po = out.impl();
    std::vector<int> lab(labels.begin(), labels.end());
    active_tape()->record("gather", {pa}, po, [pa, po, lab, c] {
      if_grad(pa, [&](std::span<real> g) {
        for (std::size_t i = 0; i < lab.size(); ++i) g[i * c + lab[i]] += po->grad[i];
      });
    });
  }
  return out;
}

Tensor column(const Tensor& a, std::size_t j) {
  require_rank("column", a, 2);
  const std::size_t n = a.dim(0), c = a.dim(1);
  if (j >= c) throw ShapeError("column: index " + std::to_string(j) + " out of range for shape " + shape_str(a.shape()));
  Tensor out = make({n});
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i * c + j];
  if (wants_grad({&a})) {
    ImplPtr pa = a.impl(), po = out.impl();
    active_tape()->record("column", {pa}, po, [pa, po, n, c, j] {
      if_grad(pa, [&](std::span<real> g) {
        for (std::size_t i = 0; i < n; ++i) g[i * c + j] += po->grad[i];
      });
    });
  }
  return out;
}

Tensor stack_columns(const std::vector<Tensor>& cols) {
  if (cols.empty()) throw ShapeError("stack_columns: no operands");
  const std::size_t n = cols.front().numel();
  for (const auto& c : cols) {
    if (c.rank() != 1 || c.numel() != n) shape_fail("stack_columns", cols.front().shape(), c.shape());
  }
  const std::size_t k = cols.size();
  Tensor out = make({n, k});
  for (std::size_t j = 0; j < k; ++j)
    for (std::size_t i = 0; i < n; ++i) out.data()[i * k + j] = cols[j].data()[i];
  bool grad = false;
  for (const auto& c : cols) grad = grad || c.requires_grad();
  if (grad && active_tape() != nullptr) {
    std::vector<ImplPtr> ins;
    for (const auto& c : cols) ins.push_back(c.impl());
    ImplPtr po = out.impl();
    active_tape()->record("stack_columns", ins, po, [ins, po, n, k] {
      for (std::size_t j = 0; j < k; ++j) {
        if_grad(ins[j], [&](std::span<real> g) {
          for (std::size_t i = 0; i < n; ++i) g[i] += po->grad[i * k + j];
        });
      }
    });
  }
  return out;
}

Tensor scale_rows(const Tensor& a, const Tensor& s) {
  require_rank("scale_rows", a, 2);
  const std::size_t n = a.dim(0), c = a.dim(1);
  if (s.rank() != 1 || s.dim(0) != n) shape_fail("scale_rows", a.shape(), s.shape());
  Tensor out = make(a.shape());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) out.data()[i * c + j] = a.data()[i * c + j] * s.data()[i];
  if (wants_grad({&a, &s})) {
    ImplPtr pa = a.impl(), ps = s.impl(), po = out.impl();
    active_tape()->record("scale_rows", {pa, ps}, po, [pa, ps, po, n, c] {
      if_grad(pa, [&](std::span<real> g) {
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < c; ++j) g[i * c + j] += po->grad[i * c + j] * ps->data[i];
      });
      if_grad(ps, [&](std::span<real> g) {
        for (std::size_t i = 0; i < n; ++i) {
          double acc = 0.0;
          for (std::size_t j = 0; j < c; ++j) acc += static_cast<double>(po->grad[i * c + j]) * pa->data[i * c + j];
          g[i] += static_cast<real>(acc);
        }
      });
    });
  }
  return out;
}

Tensor softmax(const Tensor& logits) {
  require_rank("softmax", logits, 2);
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  Tensor out = make(logits.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const real* z = logits.data().data() + i * c;
    real* p = out.data().data() + i * c;
    const real mx = *std::max_element(z, z + c);
    double total = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      p[j] = std::exp(z[j] - mx);
      total += p[j];
    }
    for (std::size_t j = 0; j < c; ++j) p[j] = static_cast<real>(p[j] / total);
  }
  if (wants_grad({&logits})) {
    ImplPtr pa = logits.impl(), po = out.impl();
    active_tape()->record("softmax", {pa}, po, [pa, po, n, c] {
      if_grad(pa, [&](std::span<real> g) {
        for (std::size_t i = 0; i < n; ++i) {
          const real* s = po->data.data() + i * c;
          const real* gy = po->grad.data() + i * c;
          double dot = 0.0;
          for (std::size_t j = 0; j < c; ++j) dot += static_cast<double>(gy[j]) * s[j];
          for (std::size_t j = 0; j < c; ++j) g[i * c + j] += s[j] * (gy[j] - static_cast<real>(dot));
        }
      });
    });
  }
  return out;
}

Tensor log_softmax(const Tensor& logits) {
  require_rank("log_softmax", logits, 2);
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  Tensor out = make(logits.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const real* z = logits.data().data() + i * c;
    real* y = out.data().data() + i * c;
    const real mx = *std::max_element(z, z + c);
    double total = 0.0;
    for (std::size_t j = 0; j < c; ++j) total += std::exp(static_cast<double>(z[j]) - mx);
    const double lse = mx + std::log(total);
    for (std::size_t j = 0; j < c; ++j) y[j] = static_cast<real>(z[j] - lse);
  }
  if (wants_grad({&logits})) {
    ImplPtr pa = logits.impl(), po = out.impl();
    active_tape()->record("log_softmax", {pa}, po, [pa, po, n, c] {
      if_grad(pa, [&](std::span<real> g) {
        for (std::size_t i = 0; i < n; ++i) {
          const real* y = po->data.data() + i * c;
          const real* gy = po->grad.data() + i * c;
          double total = 0.0;
          for (std::size_t j = 0; j < c; ++j) total += gy[j];
          for (std::size_t j = 0; j < c; ++j)
            g[i * c + j] += gy[j] - static_cast<real>(std::exp(static_cast<double>(y[j])) * total);
        }
      });
    });
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  return scale(gather(log_softmax(logits), labels), -1.0f);
}

Tensor row_distance(const Tensor& a, const Tensor& b) {
  require_rank("row_distance", a, 2);
  require_same("row_distance", a, b);
  const std::size_t n = a.dim(0), c = a.dim(1);
  Tensor out = make({n});
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double d = static_cast<double>(a.data()[i * c + j]) - b.data()[i * c + j];
      acc += d * d;
    }
    out.data()[i] = static_cast<real>(std::sqrt(acc));
  }
  if (wants_grad({&a, &b})) {
    ImplPtr pa = a.impl(), pb = b.impl(), po = out.impl();
    active_tape()->record("row_distance", {pa, pb}, po, [pa, pb, po, n, c] {
      for (int side = 0; side < 2; ++side) {
        const ImplPtr& target = side == 0 ? pa : pb;
        const real sign = side == 0 ? 1.0f : -1.0f;
        if_grad(target, [&](std::span<real> g) {
          for (std::size_t i = 0; i < n; ++i) {
            const real d = po->data[i];
            if (d <= 0.0f) continue;
            const real k = sign * po->grad[i] / d;
            for (std::size_t j = 0; j < c; ++j) g[i * c + j] += k * (pa->data[i * c + j] - pb->data[i * c + j]);
          }
        });
      }
    });
  }
  return out;
}

namespace {
thread_local DetachFreeze* g_freeze = nullptr;

Tensor copy_values(const Tensor& a) {
  return Tensor::from(a.shape(), std::vector<real>(a.data().begin(), a.data().end()), false);
}
}  // namespace

DetachFreeze::DetachFreeze() : previous_(g_freeze) { g_freeze = this; }
DetachFreeze::~DetachFreeze() { g_freeze = previous_; }

Tensor DetachFreeze::next(const Tensor& a) {
  if (!replaying_) {
    saved_.push_back(copy_values(a));
    return copy_values(a);
  }
  if (cursor_ >= saved_.size() || saved_[cursor_].shape() != a.shape()) {
    throw ContractError("DetachFreeze: detach sequence differs from the recorded one at call " +
                        std::to_string(cursor_));
  }
  return copy_values(saved_[cursor_++]);
}

Tensor detach(const Tensor& a) { return g_freeze ? g_freeze->next(a) : copy_values(a); }

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank("linear", x, 2);
  require_rank("linear", weight, 2);
  const std::size_t n = x.dim(0), in = x.dim(1), outf = weight.dim(0);
  if (weight.dim(1) != in) shape_fail("linear", x.shape(), weight.shape());
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != outf)) shape_fail("linear", weight.shape(), bias.shape());
  Tensor out = make({n, outf});
  MapConstMat X(x.data().data(), n, in);
  MapConstMat W(weight.data().data(), outf, in);
  MapMat Y(out.data().data(), n, outf);
  Y.noalias() = X * W.transpose();
  if (bias.defined()) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t o = 0; o < outf; ++o) Y(i, o) += bias.data()[o];
  }
  if (wants_grad({&x, &weight, &bias})) {
    ImplPtr px = x.impl(), pw = weight.impl(), po = out.impl();
    ImplPtr pb = bias.defined() ? bias.impl() : nullptr;
    std::vector<ImplPtr> ins{px, pw};
    if (pb) ins.push_back(pb);
    active_tape()->record("linear", ins, po, [px, pw, pb, po, n, in, outf] {
      MapConstMat dY(po->grad.data(), n, outf);
      if_grad(px, [&](std::span<real> g) {
        MapMat dX(g.data(), n, in);
        dX.noalias() += dY * MapConstMat(pw->data.data(), outf, in);
      });
      if_grad(pw, [&](std::span<real> g) {
        MapMat dW(g.data(), outf, in);
        dW.noalias() += dY.transpose() * MapConstMat(px->data.data(), n, in);
      });
      if (pb) {
        if_grad(pb, [&](std::span<real> g) {
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t o = 0; o < outf; ++o) g[o] += dY(i, o);
        });
      }
    });
  }
  return out;
}

namespace {

struct ConvGeom {
  std::size_t n, c, h, w, o, kh, kw, stride, pad, ho, wo;
  std::size_t k() const { return c * kh * kw; }
  std::size_t plane() const { return ho * wo; }
};

// Output columns [lo, hi) of a kernel tap whose input column is
// ow * stride + j - pad; outside that range the tap reads padding.
void valid_range(const ConvGeom& g, std::size_t j, std::size_t extent, std::size_t out, std::size_t& lo,
                 std::size_t& hi) {
  const long s = static_cast<long>(g.stride), off = static_cast<long>(j) - static_cast<long>(g.pad);
  long first = off >= 0 ? 0 : (-off + s - 1) / s;
  long last = (static_cast<long>(extent) - 1 - off);
  last = last < 0 ? -1 : last / s;
  first = std::min<long>(first, static_cast<long>(out));
  last = std::min<long>(last, static_cast<long>(out) - 1);
  lo = static_cast<std::size_t>(first);
  hi = last < first ? lo : static_cast<std::size_t>(last + 1);
}

// col is (C*kh*kw) x (nb*Ho*Wo) row-major, for samples [b0, b0 + nb).
void im2col(const real* x, const ConvGeom& g, std::size_t b0, std::size_t nb, real* col) {
  const std::size_t ncols = nb * g.plane();
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        real* row = col + ((c * g.kh + i) * g.kw + j) * ncols;
        std::size_t lo, hi;
        valid_range(g, j, g.w, g.wo, lo, hi);
        for (std::size_t b = 0; b < nb; ++b) {
          const real* xp = x + ((b0 + b) * g.c + c) * g.h * g.w;
          real* rp = row + b * g.plane();
          for (std::size_t oh = 0; oh < g.ho; ++oh) {
            const long ih = static_cast<long>(oh * g.stride + i) - static_cast<long>(g.pad);
            real* dst = rp + oh * g.wo;
            if (ih < 0 || ih >= static_cast<long>(g.h)) {
              std::fill_n(dst, g.wo, 0.0f);
              continue;
            }
            const long base = ih * static_cast<long>(g.w) + static_cast<long>(j) - static_cast<long>(g.pad);
            std::fill_n(dst, lo, 0.0f);
            if (g.stride == 1) {
              std::copy_n(xp + base + static_cast<long>(lo), hi - lo, dst + lo);
            } else {
              for (std::size_t ow = lo; ow < hi; ++ow) dst[ow] = xp[base + static_cast<long>(ow * g.stride)];
            }
            std::fill(dst + hi, dst + g.wo, 0.0f);
          }
        }
      }
    }
  }
}

void col2im(const real* col, const ConvGeom& g, std::size_t b0, std::size_t nb, real* dx) {
  const std::size_t ncols = nb * g.plane();
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const real* row = col + ((c * g.kh + i) * g.kw + j) * ncols;
        std::size_t lo, hi;
        valid_range(g, j, g.w, g.wo, lo, hi);
        for (std::size_t b = 0; b < nb; ++b) {
          real* xp = dx + ((b0 + b) * g.c + c) * g.h * g.w;
          const real* rp = row + b * g.plane();
          for (std::size_t oh = 0; oh < g.ho; ++oh) {
            const long ih = static_cast<long>(oh * g.stride + i) - static_cast<long>(g.pad);
            if (ih < 0 || ih >= static_cast<long>(g.h)) continue;
            const long base = ih * static_cast<long>(g.w) + static_cast<long>(j) - static_cast<long>(g.pad);
            const real* src = rp + oh * g.wo;
            for (std::size_t ow = lo; ow < hi; ++ow) xp[base + static_cast<long>(ow * g.stride)] += src[ow];
          }
        }
      }
    }
  }
}

// Samples per im2col chunk, keeping the column buffer near 1M floats.
std::size_t conv_chunk(const ConvGeom& g) {
  const std::size_t per_sample = g.k() * g.plane();
  return std::clamp<std::size_t>((std::size_t{1} << 20) / std::max<std::size_t>(per_sample, 1), 1, g.n);
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, std::size_t stride, std::size_t padding) {
  require_rank("conv2d", x, 4);
  require_rank("conv2d", weight, 4);
  if (weight.dim(1) != x.dim(1)) shape_fail("conv2d", x.shape(), weight.shape());
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(0), weight.dim(2), weight.dim(3), stride, padding, 0, 0};
  if (g.h + 2 * padding < g.kh || g.w + 2 * padding < g.kw) shape_fail("conv2d", x.shape(), weight.shape());
  g.ho = (g.h + 2 * padding - g.kh) / stride + 1;
  g.wo = (g.w + 2 * padding - g.kw) / stride + 1;

  Tensor out = make({g.n, g.o, g.ho, g.wo});
  const std::size_t plane = g.plane();
  const std::size_t chunk = conv_chunk(g);
  MapConstMat W(weight.data().data(), g.o, g.k());
  std::vector<real> col(g.k() * chunk * plane);
  RowMat y(g.o, chunk * plane);
  for (std::size_t b0 = 0; b0 < g.n; b0 += chunk) {
    const std::size_t nb = std::min(chunk, g.n - b0);
    const std::size_t ncols = nb * plane;
    im2col(x.data().data(), g, b0, nb, col.data());
    Eigen::Map<RowMat> yc(y.data(), g.o, ncols);
    yc.noalias() = W * MapConstMat(col.data(), g.k(), ncols);
    for (std::size_t b = 0; b < nb; ++b)
      for (std::size_t o = 0; o < g.o; ++o)
        std::copy_n(yc.data() + o * ncols + b * plane, plane, out.data().data() + ((b0 + b) * g.o + o) * plane);
  }

  if (wants_grad({&x, &weight})) {
    ImplPtr px = x.impl(), pw = weight.impl(), po = out.impl();
    active_tape()->record("conv2d", {px, pw}, po, [px, pw, po, g, chunk] {
      const std::size_t plane = g.plane();
      std::vector<real> col(g.k() * chunk * plane);
      RowMat dy(g.o, chunk * plane);
      RowMat dcol(g.k(), chunk * plane);
      MapConstMat W(pw->data.data(), g.o, g.k());
      for (std::size_t b0 = 0; b0 < g.n; b0 += chunk) {
        const std::size_t nb = std::min(chunk, g.n - b0);
        const std::size_t ncols = nb * plane;
        Eigen::Map<RowMat> dyc(dy.data(), g.o, ncols);
        for (std::size_t b = 0; b < nb; ++b)
          for (std::size_t o = 0; o < g.o; ++o)
            std::copy_n(po->grad.data() + ((b0 + b) * g.o + o) * plane, plane, dyc.data() + o * ncols + b * plane);
        if_grad(pw, [&](std::span<real> gw) {
          im2col(px->data.data(), g, b0, nb, col.data());
          MapMat dW(gw.data(), g.o, g.k());
          dW.noalias() += dyc * MapConstMat(col.data(), g.k(), ncols).transpose();
        });
        if_grad(px, [&](std::span<real> gx) {
          Eigen::Map<RowMat> dcolc(dcol.data(), g.k(), ncols);
          dcolc.noalias() = W.transpose() * dyc;
          col2im(dcolc.data(), g, b0, nb, gx.data());
        });
      }
    });
  }
  return out;
}

Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormStats& stats, bool training,
                    real momentum, real eps) {
  require_rank("batch_norm2d", x, 4);
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (gamma.numel() != c || beta.numel() != c || stats.running_mean.numel() != c || stats.running_var.numel() != c) {
    shape_fail("batch_norm2d", x.shape(), gamma.shape());
  }
  const std::size_t count = n * hw;
  Tensor out = make(x.shape());
  auto xhat = std::make_shared<std::vector<real>>(x.numel());
  std::vector<real> inv_std(c);
  const real* xd = x.data().data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    real mu, var;
    if (training) {
      if (count < 2) throw ShapeError("batch_norm2d: training mode needs more than one value per channel, got shape " +
                                      shape_str(x.shape()));
      double s = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const real* p = xd + (b * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) s += p[i];
      }
      const double m = s / count;
      double ss = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const real* p = xd + (b * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) ss += (p[i] - m) * (p[i] - m);
      }
      mu = static_cast<real>(m);
      var = static_cast<real>(ss / count);
      auto& rm = stats.running_mean.data()[ch];
      auto& rv = stats.running_var.data()[ch];
      rm = (1.0f - momentum) * rm + momentum * mu;
      rv = (1.0f - momentum) * rv + momentum * static_cast<real>(ss / (count - 1));
    } else {
      mu = stats.running_mean.data()[ch];
      var = stats.running_var.data()[ch];
    }
    inv_std[ch] = 1.0f / std::sqrt(var + eps);
    const real gm = gamma.data()[ch], bt = beta.data()[ch];
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t base = (b * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        const real h = (xd[base + i] - mu) * inv_std[ch];
        (*xhat)[base + i] = h;
        out.data()[base + i] = gm * h + bt;
      }
    }
  }
  if (wants_grad({&x, &gamma, &beta})) {
    ImplPtr px = x.impl(), pg = gamma.impl(), pb = beta.impl(), po = out.impl();
    active_tape()->record("batch_norm2d", {px, pg, pb}, po, [px, pg, pb, po, xhat, inv_std, n, c, hw, training] {
      const std::size_t count = n * hw;
      for (std::size_t ch = 0; ch < c; ++ch) {
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (std::size_t b = 0; b < n; ++b) {
          const std::size_t base = (b * c + ch) * hw;
          for (std::size_t i = 0; i < hw; ++i) {
            sum_dy += po->grad[base + i];
            sum_dy_xhat += static_cast<double>(po->grad[base + i]) * (*xhat)[base + i];
          }
        }
        if_grad(pg, [&](std::span<real> g) { g[ch] += static_cast<real>(sum_dy_xhat); });
        if_grad(pb, [&](std::span<real> g) { g[ch] += static_cast<real>(sum_dy); });
        if_grad(px, [&](std::span<real> g) {
          const real gm = pg->data[ch];
          const real k = gm * inv_std[ch];
          const real mean_dy = static_cast<real>(sum_dy / count);
          const real mean_dy_xhat = static_cast<real>(sum_dy_xhat / count);
          for (std::size_t b = 0; b < n; ++b) {
            const std::size_t base = (b * c + ch) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
              if (training) {
                g[base + i] += k * (po->grad[base + i] - mean_dy - (*xhat)[base + i] * mean_dy_xhat);
              } else {
                g[base + i] += k * po->grad[base + i];
              }
            }
          }
        });
      }
    });
  }
  return out;
}

Tensor max_pool2d(const Tensor& x, std::size_t kernel, std::size_t stride, std::size_t padding) {
  require_rank("max_pool2d", x, 4);
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h + 2 * padding < kernel || w + 2 * padding < kernel || stride == 0) {
    throw ShapeError("max_pool2d: window " + std::to_string(kernel) + " does not fit shape " + shape_str(x.shape()));
  }
  const std::size_t ho = (h + 2 * padding - kernel) / stride + 1, wo = (w + 2 * padding - kernel) / stride + 1;
  Tensor out = make({n, c, ho, wo});
  auto arg = std::make_shared<std::vector<std::size_t>>(out.numel());
  for (std::size_t p = 0; p < n * c; ++p) {
    const real* xp = x.data().data() + p * h * w;
    for (std::size_t oh = 0; oh < ho; ++oh) {
      for (std::size_t ow = 0; ow < wo; ++ow) {
        real best = -std::numeric_limits<real>::infinity();
        std::size_t best_idx = 0;
        for (std::size_t i = 0; i < kernel; ++i) {
          const long ih = static_cast<long>(oh * stride + i) - static_cast<long>(padding);
          if (ih < 0 || ih >= static_cast<long>(h)) continue;
          for (std::size_t j = 0; j < kernel; ++j) {
            const long iw = static_cast<long>(ow * stride + j) - static_cast<long>(padding);
            if (iw < 0 || iw >= static_cast<long>(w)) continue;
            const real v = xp[ih * w + iw];
            if (v > best) {
              best = v;
              best_idx = ih * w + iw;
            }
          }
        }
        const std::size_t o = (p * ho + oh) * wo + ow;
        out.data()[o] = best;
        (*arg)[o] = p * h * w + best_idx;
      }
    }
  }
  if (g_probe)
    for (std::size_t idx : *arg) g_probe->mix(idx);
  if (wants_grad({&x})) {
    ImplPtr px = x.impl(), po = out.impl();
    active_tape()->record("max_pool2d", {px}, po, [px, po, arg] {
      if_grad(px, [&](std::span<real> g) {
        for (std::size_t o = 0; o < arg->size(); ++o) g[(*arg)[o]] += po->grad[o];
      });
    });
  }
  return out;
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank("global_avg_pool", x, 4);
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor out = make({n, c});
  for (std::size_t p = 0; p < n * c; ++p) {
    double acc = 0.0;
    const real* xp = x.data().data() + p * hw;
    for (std::size_t i = 0; i < hw; ++i) acc += xp[i];
    out.data()[p] = static_cast<real>(acc / hw);
  }
  if (wants_grad({&x})) {
    ImplPtr px = x.impl(), po = out.impl();
    active_tape()->record("global_avg_pool", {px}, po, [px, po, n, c, hw] {
      if_grad(px, [&](std::span<real> g) {
        for (std::size_t p = 0; p < n * c; ++p) {
          const real v = po->grad[p] / static_cast<real>(hw);
          for (std::size_t i = 0; i < hw; ++i) g[p * hw + i] += v;
        }
      });
    });
  }
  return out;
}

std::vector<int> argmax_rows(const Tensor& a) {
  require_rank("argmax_rows", a, 2);
  const std::size_t n = a.dim(0), c = a.dim(1);
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const real* row = a.data().data() + i * c;
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (row[j] > row[best]) best = j;
    out[i] = static_cast<int>(best);
  }
  return out;
}

}  // namespace pnd
