// SPDX-License-Identifier: Apache-2.0
#include "surgvid/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace surgvid {

namespace {

thread_local Precision g_precision = Precision::f64;
thread_local bool g_grad_enabled = true;
std::atomic<int64_t> g_seq{1};

double round_value(double v) {
  return g_precision == Precision::f32 ? static_cast<double>(static_cast<float>(v)) : v;
}

void finalize(TensorImpl& t) {
  const bool f32 = g_precision == Precision::f32;
  for (double& v : t.data) {
    if (f32) v = static_cast<double>(static_cast<float>(v));
    if (!std::isfinite(v)) throw NonFiniteError(std::string(t.op));
  }
}

std::shared_ptr<TensorImpl> make_node(Shape shape, const char* op,
                                      std::vector<std::shared_ptr<TensorImpl>> parents) {
  auto out = std::make_shared<TensorImpl>();
  out->shape = std::move(shape);
  out->data.assign(shape_size(out->shape), 0.0);
  out->op = op;
  out->seq = g_seq.fetch_add(1);
  bool rg = false;
  if (g_grad_enabled) {
    for (const auto& p : parents) rg = rg || (p && p->requires_grad);
  }
  out->requires_grad = rg;
  if (rg) out->parents = std::move(parents);
  return out;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

// Decomposes a shape around `axis` into (outer, n, inner) strides.
struct AxisView {
  size_t outer = 1, n = 1, inner = 1;
};

AxisView axis_view(const Shape& s, int axis) {
  if (axis < 0) axis += static_cast<int>(s.size());
  if (axis < 0 || axis >= static_cast<int>(s.size())) throw ShapeError("axis out of range");
  AxisView v;
  for (int i = 0; i < axis; ++i) v.outer *= s[i];
  v.n = s[axis];
  for (size_t i = axis + 1; i < s.size(); ++i) v.inner *= s[i];
  return v;
}

}  // namespace

size_t shape_size(const Shape& s) {
  size_t n = 1;
  for (size_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

Precision precision() { return g_precision; }
void set_precision(Precision p) { g_precision = p; }
bool grad_enabled() { return g_grad_enabled; }
void set_grad_enabled(bool on) { g_grad_enabled = on; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return from_data(shape, std::vector<double>(shape_size(shape), 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  return from_data(shape, std::vector<double>(shape_size(shape), value), requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_size(shape) != data.size()) {
    throw ShapeError("from_data: " + shape_str(shape) + " does not hold " +
                     std::to_string(data.size()) + " values");
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->seq = g_seq.fetch_add(1);
  impl->requires_grad = requires_grad;
  finalize(*impl);
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data(Shape{1}, {value}, requires_grad);
}

size_t Tensor::rows() const {
  if (rank() < 1) throw ShapeError("rows() on rank-0 tensor");
  return impl_->shape[0];
}

size_t Tensor::cols() const {
  if (rank() != 2) throw ShapeError("cols() needs a rank-2 tensor, got " + shape_str(shape()));
  return impl_->shape[1];
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of size " + std::to_string(size()));
  return impl_->data[0];
}

const std::vector<double>& Tensor::grad() const {
  const_cast<TensorImpl*>(impl_.get())->ensure_grad();
  return impl_->grad;
}

Tensor Tensor::detach() const {
  return from_data(impl_->shape, impl_->data, false);
}

void Tensor::backward() const {
  if (!impl_) throw Error("backward on undefined tensor");
  if (size() != 1) throw ShapeError("backward() requires a scalar loss");
  // Collect reachable grad-requiring nodes, then apply records newest-first.
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> seen;
  std::vector<std::shared_ptr<TensorImpl>> stack{impl_};
  seen.insert(impl_.get());
  while (!stack.empty()) {
    auto node = stack.back();
    stack.pop_back();
    order.push_back(node.get());
    for (const auto& p : node->parents) {
      if (p && p->requires_grad && seen.insert(p.get()).second) stack.push_back(p);
    }
  }
  std::sort(order.begin(), order.end(),
            [](const TensorImpl* a, const TensorImpl* b) { return a->seq > b->seq; });
  impl_->ensure_grad();
  impl_->grad[0] = 1.0;
  for (TensorImpl* node : order) {
    if (node->backward_fn) node->backward_fn(*node);
  }
}

// ---------------------------------------------------------------------------
// ops

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("matmul: need rank-2 inputs, got " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const size_t n = a.shape()[0], k = a.shape()[1], k2 = b.shape()[0], m = b.shape()[1];
  if (k != k2) {
    throw ShapeError("matmul: inner dims " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  auto out = make_node({n, m}, "matmul", {a.impl(), b.impl()});
  const auto& A = a.data();
  const auto& B = b.data();
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = 0; j < m; ++j) {
      double acc = 0.0;
      for (size_t p = 0; p < k; ++p) acc += A[i * k + p] * B[p * m + j];
      out->data[i * m + j] = acc;
    }
  }
  finalize(*out);
  if (out->requires_grad) {
    out->backward_fn = [n, k, m](TensorImpl& self) {
      auto& pa = self.parents[0];
      auto& pb = self.parents[1];
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (size_t i = 0; i < n; ++i)
          for (size_t p = 0; p < k; ++p) {
            double acc = 0.0;
            for (size_t j = 0; j < m; ++j) acc += self.grad[i * m + j] * pb->data[p * m + j];
            pa->grad[i * k + p] += acc;
          }
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (size_t p = 0; p < k; ++p)
          for (size_t j = 0; j < m; ++j) {
            double acc = 0.0;
            for (size_t i = 0; i < n; ++i) acc += pa->data[i * k + p] * self.grad[i * m + j];
            pb->grad[p * m + j] += acc;
          }
      }
    };
  }
  return Tensor(out);
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose: need rank-2, got " + shape_str(a.shape()));
  const size_t n = a.shape()[0], m = a.shape()[1];
  auto out = make_node({m, n}, "transpose", {a.impl()});
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < m; ++j) out->data[j * n + i] = a.data()[i * m + j];
  finalize(*out);
  if (out->requires_grad) {
    out->backward_fn = [n, m](TensorImpl& self) {
      auto& pa = self.parents[0];
      if (!pa->requires_grad) return;
      pa->ensure_grad();
      for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < m; ++j) pa->grad[i * m + j] += self.grad[j * n + i];
    };
  }
  return Tensor(out);
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size()) {
    throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  auto out = make_node(std::move(shape), "reshape", {a.impl()});
  out->data = a.data();
  finalize(*out);
  if (out->requires_grad) {
    out->backward_fn = [](TensorImpl& self) {
      auto& pa = self.parents[0];
      if (!pa->requires_grad) return;
      pa->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
    };
  }
  return Tensor(out);
}

namespace {

enum class BroadcastKind { same, row_bias, scalar };

BroadcastKind classify_broadcast(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return BroadcastKind::same;
  if (b.size() == 1) return BroadcastKind::scalar;
  if (b.rank() == 1 && a.rank() >= 1 && a.shape().back() == b.shape()[0]) {
    return BroadcastKind::row_bias;
  }
  throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(b.shape()) + " onto " +
                   shape_str(a.shape()));
}

Tensor add_like(const Tensor& a, const Tensor& b, double sign, const char* op) {
  BroadcastKind kind = classify_broadcast(a, b, op);
  auto out = make_node(a.shape(), op, {a.impl(), b.impl()});
  const size_t n = a.size();
  const size_t d = kind == BroadcastKind::row_bias ? b.size() : 0;
  for (size_t i = 0; i < n; ++i) {
    double bv = kind == BroadcastKind::same ? b.data()[i]
               : kind == BroadcastKind::scalar ? b.data()[0]
                                               : b.data()[i % d];
    out->data[i] = a.data()[i] + sign * bv;
  }
  finalize(*out);
  if (out->requires_grad) {
    out->backward_fn = [kind, sign, n, d](TensorImpl& self) {
      auto& pa = self.parents[0];
      auto& pb = self.parents[1];
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (size_t i = 0; i < n; ++i) pa->grad[i] += self.grad[i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (size_t i = 0; i < n; ++i) {
          size_t j = kind == BroadcastKind::same ? i : kind == BroadcastKind::scalar ? 0 : i % d;
          pb->grad[j] += sign * self.grad[i];
        }
      }
    };
  }
  return Tensor(out);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return add_like(a, b, +1.0, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return add_like(a, b, -1.0, "sub"); }

Tensor mul(const Tensor& a, const Tensor& b) {
  BroadcastKind kind = classify_broadcast(a, b, "mul");
  if (kind == BroadcastKind::row_bias) throw ShapeError("mul: row broadcast not supported");
  auto out = make_node(a.shape(), "mul", {a.impl(), b.impl()});
  const size_t n = a.size();
  const bool scalar = kind == BroadcastKind::scalar;
  for (size_t i = 0; i < n; ++i) out->data[i] = a.data()[i] * b.data()[scalar ? 0 : i];
  finalize(*out);
  if (out->requires_grad) {
    out->backward_fn = [n, scalar](TensorImpl& self) {
      auto& pa = self.parents[0];
      auto& pb = self.parents[1];
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (size_t i = 0; i < n; ++i) pa->grad[i] += self.grad[i] * pb->data[scalar ? 0 : i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (size_t i = 0; i < n; ++i) pb->grad[scalar ? 0 : i] += self.grad[i] * pa->data[i];
      }
    };
  }
  return Tensor(out);
}

Tensor div_scalar(const Tensor& a, const Tensor& s) {
  if (s.size() != 1) throw ShapeError("div_scalar: divisor must have 1 element");
  auto out = make_node(a.shape(), "div_scalar", {a.impl(), s.impl()});
  const double sv = s.data()[0];
  const size_t n = a.size();
  for (size_t i = 0; i < n; ++i) out->data[i] = a.data()[i] / sv;
  finalize(*out);
  if (out->requires_grad) {
    out->backward_fn = [n, sv](TensorImpl& self) {
      auto& pa = self.parents[0];
      auto& ps = self.parents[1];
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (size_t i = 0; i < n; ++i) pa->grad[i] += self.grad[i] / sv;
      }
      if (ps->requires_grad) {
        ps->ensure_grad();
        double acc = 0.0;
        for (size_t i = 0; i < n; ++i) acc += self.grad[i] * (-pa->data[i] / (sv * sv));
        ps->grad[0] += acc;
      }
    };
  }
  return Tensor(out);
}

Tensor scale(const Tensor& a, double c) {
  auto out = make_node(a.shape(), "scale", {a.impl()});
  const size_t n = a.size();
  for (size_t i = 0; i < n; ++i) out->data[i] = a.data()[i] * c;
  finalize(*out);
  if (out->requires_grad) {
    out->backward_fn = [n, c](TensorImpl& self) {
      auto& pa = self.parents[0];
      if (!pa->requires_grad) return;
      pa->ensure_grad();
      for (size_t i = 0; i < n; ++i) pa->grad[i] += self.grad[i] * c;
    };
  }
  return Tensor(out);
}

Tensor add_const(const Tensor& a, double c) {
  auto out = make_node(a.shape(), "add_const", {a.impl()});
  const size_t n = a.size();
  for (size_t i = 0; i < n; ++i) out->data[i] = a.data()[i] + c;
  finalize(*out);
  if (out->requires_grad) {
    out->backward_fn = [n](TensorImpl& self) {
      auto& pa = self.parents[0];
      if (!pa->requires_grad) return;
      pa->ensure_grad();
      for (size_t i = 0; i < n; ++i) pa->grad[i] += self.grad[i];
    };
  }
  return Tensor(out);
}

Tensor softmax(const Tensor& x, int axis) {
  AxisView v = axis_view(x.shape(), axis);
  auto out = make_node(x.shape(), "softmax", {x.impl()});
  for (size_t o = 0; o < v.outer; ++o) {
    for (size_t in = 0; in < v.inner; ++in) {
      const size_t base = o * v.n * v.inner + in;
      double mx = x.data()[base];
      for (size_t i = 1; i < v.n; ++i) mx = std::max(mx, x.data()[base + i * v.inner]);
      double sum = 0.0;
      for (size_t i = 0; i < v.n; ++i) {
        double e = std::exp(x.data()[base + i * v.inner] - mx);
        out->data[base + i * v.inner] = e;
        sum += e;
      }
      for (size_t i = 0; i < v.n; ++i) out->data[base + i * v.inner] /= sum;
    }
  }
  finalize(*out);
  if (out->requires_grad) {
    out->backward_fn = [v](TensorImpl& self) {
      auto& pa = self.parents[0];
      if (!pa->requires_grad) return;
      pa->ensure_grad();
      for (size_t o = 0; o < v.outer; ++o) {
        for (size_t in = 0; in < v.inner; ++in) {
          const size_t base = o * v.n * v.inner + in;
          double dot = 0.0;
          for (size_t i = 0; i < v.n; ++i) {
            size_t idx = base + i * v.inner;
            dot += self.grad[idx] * self.data[idx];
          }
          for (size_t i = 0; i < v.n; ++i) {
            size_t idx = base + i * v.inner;
            pa->grad[idx] += self.data[idx] * (self.grad[idx] - dot);
          }
        }
      }
    };
  }
  return Tensor(out);
}

Tensor log_softmax(const Tensor& x, int axis) {
  AxisView v = axis_view(x.shape(), axis);
  auto out = make_node(x.shape(), "log_softmax", {x.impl()});
  for (size_t o = 0; o < v.outer; ++o) {
    for (size_t in = 0; in < v.inner; ++in) {
      const size_t base = o * v.n * v.inner + in;
      double mx = x.data()[base];
      for (size_t i = 1; i < v.n; ++i) mx = std::max(mx, x.data()[base + i * v.inner]);
      double sum = 0.0;
      for (size_t i = 0; i < v.n; ++i) sum += std::exp(x.data()[base + i * v.inner] - mx);
      const double lse = mx + std::log(sum);
      for (size_t i = 0; i < v.n; ++i) {
        out->data[base + i * v.inner] = x.data()[base + i * v.inner] - lse;
      }
    }
  }
  finalize(*out);
  if (out->requires_grad) {
    out->backward_fn = [v](TensorImpl& self) {
      auto& pa = self.parents[0];
      if (!pa->requires_grad) return;
      pa->ensure_grad();
      for (size_t o = 0; o < v.outer; ++o) {
        for (size_t in = 0; in < v.inner; ++in) {
          const size_t base = o * v.n * v.inner + in;
          double gsum = 0.0;
          for (size_t i = 0; i < v.n; ++i) gsum += self.grad[base + i * v.inner];
          for (size_t i = 0; i < v.n; ++i) {
            size_t idx = base + i * v.inner;
            pa->grad[idx] += self.grad[idx] - std::exp(self.data[idx]) * gsum;
          }
        }
      }
    };
  }
  return Tensor(out);
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  if (x.rank() < 1) throw ShapeError("layer_norm: rank >= 1 required");
  const size_t d = x.shape().back();
  if (d < 1) throw ShapeError("layer_norm: empty last axis");
  if (gain.size() != d || bias.size() != d) {
    throw ShapeError("layer_norm: gain/bias must have last-axis length " + std::to_string(d));
  }
  constexpr double kEps = 1e-5;
  const size_t rows = x.size() / d;
  auto out = make_node(x.shape(), "layer_norm", {x.impl(), gain.impl(), bias.impl()});
  std::vector<double> xhat(x.size());
  std::vector<double> inv_std(rows);
  for (size_t r = 0; r < rows; ++r) {
    const size_t base = r * d;
    double mean = 0.0;
    for (size_t j = 0; j < d; ++j) mean += x.data()[base + j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (size_t j = 0; j < d; ++j) {
      double c = x.data()[base + j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + kEps);
    for (size_t j = 0; j < d; ++j) {
      xhat[base + j] = (x.data()[base + j] - mean) * inv_std[r];
      out->data[base + j] = xhat[base + j] * gain.data()[j] + bias.data()[j];
    }
  }
  finalize(*out);
  if (out->requires_grad) {
    out->backward_fn = [rows, d, xhat = std::move(xhat),
                        inv_std = std::move(inv_std)](TensorImpl& self) {
      auto& px = self.parents[0];
      auto& pg = self.parents[1];
      auto& pb = self.parents[2];
      if (pg->requires_grad) {
        pg->ensure_grad();
        for (size_t r = 0; r < rows; ++r)
          for (size_t j = 0; j < d; ++j) pg->grad[j] += self.grad[r * d + j] * xhat[r * d + j];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (size_t r = 0; r < rows; ++r)
          for (size_t j = 0; j < d; ++j) pb->grad[j] += self.grad[r * d + j];
      }
      if (px->requires_grad) {
        px->ensure_grad();
        for (size_t r = 0; r < rows; ++r) {
          const size_t base = r * d;
          double m1 = 0.0, m2 = 0.0;
          for (size_t j = 0; j < d; ++j) {
            double dy = self.grad[base + j] * pg->data[j];
            m1 += dy;
            m2 += dy * xhat[base + j];
          }
          m1 /= static_cast<double>(d);
          m2 /= static_cast<double>(d);
          for (size_t j = 0; j < d; ++j) {
            double dy = self.grad[base + j] * pg->data[j];
            px->grad[base + j] += inv_std[r] * (dy - m1 - xhat[base + j] * m2);
          }
        }
      }
    };
  }
  return Tensor(out);
}

Tensor gelu(const Tensor& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  auto out = make_node(x.shape(), "gelu", {x.impl()});
  const size_t n = x.size();
  for (size_t i = 0; i < n; ++i) {
    double v = x.data()[i];
    out->data[i] = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
  }
  finalize(*out);
  if (out->requires_grad) {
    out->backward_fn = [n](TensorImpl& self) {
      auto& pa = self.parents[0];
      if (!pa->requires_grad) return;
      pa->ensure_grad();
      for (size_t i = 0; i < n; ++i) {
        double v = pa->data[i];
        double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        pa->grad[i] += self.grad[i] * (cdf + v * pdf);
      }
    };
  }
  return Tensor(out);
}

Tensor softplus(const Tensor& x) {
  auto out = make_node(x.shape(), "softplus", {x.impl()});
  const size_t n = x.size();
  for (size_t i = 0; i < n; ++i) {
    double v = x.data()[i];
    out->data[i] = std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v)));
  }
  finalize(*out);
  if (out->requires_grad) {
    out->backward_fn = [n](TensorImpl& self) {
      auto& pa = self.parents[0];
      if (!pa->requires_grad) return;
      pa->ensure_grad();
      for (size_t i = 0; i < n; ++i) {
        double v = pa->data[i];
        double sig = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
        pa->grad[i] += self.grad[i] * sig;
      }
    };
  }
  return Tensor(out);
}

namespace {

Tensor reduce_all(const Tensor& x, bool mean) {
  auto out = make_node({1}, mean ? "mean_all" : "sum_all", {x.impl()});
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  const size_t n = x.size();
  out->data[0] = mean ? acc / static_cast<double>(n) : acc;
  finalize(*out);
  if (out->requires_grad) {
    out->backward_fn = [n, mean](TensorImpl& self) {
      auto& pa = self.parents[0];
      if (!pa->requires_grad) return;
      pa->ensure_grad();
      const double g = mean ? self.grad[0] / static_cast<double>(n) : self.grad[0];
      for (size_t i = 0; i < n; ++i) pa->grad[i] += g;
    };
  }
  return Tensor(out);
}

}  // namespace

Tensor sum_all(const Tensor& x) { return reduce_all(x, false); }
Tensor mean_all(const Tensor& x) { return reduce_all(x, true); }

Tensor mean_rows(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("mean_rows: need rank-2, got " + shape_str(x.shape()));
  const size_t n = x.shape()[0], d = x.shape()[1];
  if (n == 0) throw ShapeError("mean_rows: empty tensor");
  auto out = make_node({d}, "mean_rows", {x.impl()});
  for (size_t j = 0; j < d; ++j) {
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) acc += x.data()[i * d + j];
    out->data[j] = acc / static_cast<double>(n);
  }
  finalize(*out);
  if (out->requires_grad) {
    out->backward_fn = [n, d](TensorImpl& self) {
      auto& pa = self.parents[0];
      if (!pa->requires_grad) return;
      pa->ensure_grad();
      for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < d; ++j) pa->grad[i * d + j] += self.grad[j] / static_cast<double>(n);
    };
  }
  return Tensor(out);
}

namespace {

// Interprets a tensor as rows: rank-2 as-is, rank-1 as a single row.
std::pair<size_t, size_t> row_view(const Tensor& t) {
  if (t.rank() == 2) return {t.shape()[0], t.shape()[1]};
  if (t.rank() == 1) return {1, t.shape()[0]};
  throw ShapeError("expected rank-1 or rank-2, got " + shape_str(t.shape()));
}

}  // namespace

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no parts");
  size_t d = row_view(parts[0]).second;
  size_t total = 0;
  std::vector<std::shared_ptr<TensorImpl>> parents;
  for (const auto& p : parts) {
    auto [r, c] = row_view(p);
    if (c != d) throw ShapeError("concat_rows: column mismatch");
    total += r;
    parents.push_back(p.impl());
  }
  auto out = make_node({total, d}, "concat_rows", std::move(parents));
  size_t row = 0;
  std::vector<size_t> offsets(parts.size());
  for (size_t pi = 0; pi < parts.size(); ++pi) {
    offsets[pi] = row;
    const auto& src = parts[pi].data();
    std::copy(src.begin(), src.end(), out->data.begin() + row * d);
    row += row_view(parts[pi]).first;
  }
  finalize(*out);
  if (out->requires_grad) {
    out->backward_fn = [d, offsets](TensorImpl& self) {
      for (size_t pi = 0; pi < self.parents.size(); ++pi) {
        auto& p = self.parents[pi];
        if (!p->requires_grad) continue;
        p->ensure_grad();
        const size_t base = offsets[pi] * d;
        for (size_t i = 0; i < p->data.size(); ++i) p->grad[i] += self.grad[base + i];
      }
    };
  }
  return Tensor(out);
}

Tensor slice_rows(const Tensor& x, size_t start, size_t count) {
  if (x.rank() != 2) throw ShapeError("slice_rows: need rank-2");
  const size_t n = x.shape()[0], d = x.shape()[1];
  if (start + count > n) throw ShapeError("slice_rows: range out of bounds");
  auto out = make_node({count, d}, "slice_rows", {x.impl()});
  std::copy(x.data().begin() + start * d, x.data().begin() + (start + count) * d,
            out->data.begin());
  finalize(*out);
  if (out->requires_grad) {
    out->backward_fn = [start, count, d](TensorImpl& self) {
      auto& pa = self.parents[0];
      if (!pa->requires_grad) return;
      pa->ensure_grad();
      for (size_t i = 0; i < count * d; ++i) pa->grad[start * d + i] += self.grad[i];
    };
  }
  return Tensor(out);
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no parts");
  const size_t n = parts[0].shape()[0];
  size_t total = 0;
  std::vector<std::shared_ptr<TensorImpl>> parents;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.shape()[0] != n) throw ShapeError("concat_cols: row mismatch");
    total += p.shape()[1];
    parents.push_back(p.impl());
  }
  auto out = make_node({n, total}, "concat_cols", std::move(parents));
  size_t col = 0;
  std::vector<size_t> offsets(parts.size());
  std::vector<size_t> widths(parts.size());
  for (size_t pi = 0; pi < parts.size(); ++pi) {
    offsets[pi] = col;
    widths[pi] = parts[pi].shape()[1];
    for (size_t i = 0; i < n; ++i)
      for (size_t j = 0; j < widths[pi]; ++j)
        out->data[i * total + col + j] = parts[pi].data()[i * widths[pi] + j];
    col += widths[pi];
  }
  finalize(*out);
  if (out->requires_grad) {
    out->backward_fn = [n, total, offsets, widths](TensorImpl& self) {
      for (size_t pi = 0; pi < self.parents.size(); ++pi) {
        auto& p = self.parents[pi];
        if (!p->requires_grad) continue;
        p->ensure_grad();
        for (size_t i = 0; i < n; ++i)
          for (size_t j = 0; j < widths[pi]; ++j)
            p->grad[i * widths[pi] + j] += self.grad[i * total + offsets[pi] + j];
      }
    };
  }
  return Tensor(out);
}

Tensor slice_cols(const Tensor& x, size_t start, size_t count) {
  if (x.rank() != 2) throw ShapeError("slice_cols: need rank-2");
  const size_t n = x.shape()[0], d = x.shape()[1];
  if (start + count > d) throw ShapeError("slice_cols: range out of bounds");
  auto out = make_node({n, count}, "slice_cols", {x.impl()});
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < count; ++j) out->data[i * count + j] = x.data()[i * d + start + j];
  finalize(*out);
  if (out->requires_grad) {
    out->backward_fn = [n, d, start, count](TensorImpl& self) {
      auto& pa = self.parents[0];
      if (!pa->requires_grad) return;
      pa->ensure_grad();
      for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < count; ++j) pa->grad[i * d + start + j] += self.grad[i * count + j];
    };
  }
  return Tensor(out);
}

Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
  if (table.rank() != 2) throw ShapeError("gather_rows: table must be rank-2");
  const size_t v = table.shape()[0], d = table.shape()[1];
  for (int id : ids) {
    if (id < 0 || static_cast<size_t>(id) >= v) {
      throw ShapeError("gather_rows: id " + std::to_string(id) + " out of range");
    }
  }
  auto out = make_node({ids.size(), d}, "gather_rows", {table.impl()});
  for (size_t i = 0; i < ids.size(); ++i)
    for (size_t j = 0; j < d; ++j) out->data[i * d + j] = table.data()[ids[i] * d + j];
  finalize(*out);
  if (out->requires_grad) {
    out->backward_fn = [ids, d](TensorImpl& self) {
      auto& pa = self.parents[0];
      if (!pa->requires_grad) return;
      pa->ensure_grad();
      for (size_t i = 0; i < ids.size(); ++i)
        for (size_t j = 0; j < d; ++j) pa->grad[ids[i] * d + j] += self.grad[i * d + j];
    };
  }
  return Tensor(out);
}

Tensor mse_loss(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mse_loss");
  auto out = make_node({1}, "mse_loss", {a.impl(), b.impl()});
  const size_t n = a.size();
  if (n == 0) throw ShapeError("mse_loss: empty tensors");
  double acc = 0.0;
  for (size_t i = 0; i < n; ++i) {
    double dvi = a.data()[i] - b.data()[i];
    acc += dvi * dvi;
  }
  out->data[0] = acc / static_cast<double>(n);
  finalize(*out);
  if (out->requires_grad) {
    out->backward_fn = [n](TensorImpl& self) {
      auto& pa = self.parents[0];
      auto& pb = self.parents[1];
      const double g = self.grad[0] * 2.0 / static_cast<double>(n);
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (size_t i = 0; i < n; ++i) pa->grad[i] += g * (pa->data[i] - pb->data[i]);
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (size_t i = 0; i < n; ++i) pb->grad[i] -= g * (pa->data[i] - pb->data[i]);
      }
    };
  }
  return Tensor(out);
}

Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy_rows: logits must be rank-2");
  const size_t n = logits.shape()[0], v = logits.shape()[1];
  if (targets.size() != n) throw ShapeError("cross_entropy_rows: target count mismatch");
  for (int t : targets) {
    if (t < 0 || static_cast<size_t>(t) >= v) throw ShapeError("cross_entropy_rows: bad target");
  }
  auto out = make_node({1}, "cross_entropy_rows", {logits.impl()});
  std::vector<double> probs(n * v);
  double loss = 0.0;
  for (size_t r = 0; r < n; ++r) {
    const size_t base = r * v;
    double mx = logits.data()[base];
    for (size_t j = 1; j < v; ++j) mx = std::max(mx, logits.data()[base + j]);
    double sum = 0.0;
    for (size_t j = 0; j < v; ++j) {
      probs[base + j] = std::exp(logits.data()[base + j] - mx);
      sum += probs[base + j];
    }
    for (size_t j = 0; j < v; ++j) probs[base + j] /= sum;
    loss -= std::log(probs[base + targets[r]]);
  }
  out->data[0] = loss / static_cast<double>(n);
  finalize(*out);
  if (out->requires_grad) {
    out->backward_fn = [n, v, targets, probs = std::move(probs)](TensorImpl& self) {
      auto& pa = self.parents[0];
      if (!pa->requires_grad) return;
      pa->ensure_grad();
      const double g = self.grad[0] / static_cast<double>(n);
      for (size_t r = 0; r < n; ++r)
        for (size_t j = 0; j < v; ++j) {
          double delta = static_cast<size_t>(targets[r]) == j ? 1.0 : 0.0;
          pa->grad[r * v + j] += g * (probs[r * v + j] - delta);
        }
    };
  }
  return Tensor(out);
}

Tensor l2_normalize_rows(const Tensor& x) {
  auto [n, d] = row_view(x);
  auto out = make_node(x.shape(), "l2_normalize_rows", {x.impl()});
  std::vector<double> norms(n);
  for (size_t r = 0; r < n; ++r) {
    double acc = 0.0;
    for (size_t j = 0; j < d; ++j) acc += x.data()[r * d + j] * x.data()[r * d + j];
    norms[r] = std::sqrt(acc);
    if (norms[r] < 1e-12) throw Error("l2_normalize_rows: zero-norm row " + std::to_string(r));
    for (size_t j = 0; j < d; ++j) out->data[r * d + j] = x.data()[r * d + j] / norms[r];
  }
  finalize(*out);
  if (out->requires_grad) {
    out->backward_fn = [n, d, norms = std::move(norms)](TensorImpl& self) {
      auto& pa = self.parents[0];
      if (!pa->requires_grad) return;
      pa->ensure_grad();
      for (size_t r = 0; r < n; ++r) {
        const size_t base = r * d;
        double dot = 0.0;
        for (size_t j = 0; j < d; ++j) dot += self.grad[base + j] * self.data[base + j];
        for (size_t j = 0; j < d; ++j) {
          pa->grad[base + j] += (self.grad[base + j] - self.data[base + j] * dot) / norms[r];
        }
      }
    };
  }
  return Tensor(out);
}

Tensor cross_attention(const Tensor& queries, const Tensor& keys, const Tensor& values) {
  if (queries.rank() != 2 || keys.rank() != 2 || values.rank() != 2) {
    throw ShapeError("cross_attention: rank-2 inputs required");
  }
  if (queries.cols() != keys.cols()) throw ShapeError("cross_attention: query/key width mismatch");
  if (keys.rows() != values.rows()) throw ShapeError("cross_attention: key/value count mismatch");
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(queries.cols()));
  Tensor scores = scale(matmul(queries, transpose(keys)), inv_sqrt_d);
  Tensor weights = softmax(scores, 1);
  return matmul(weights, values);
}

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double step) {
  Tensor probe = Tensor::from_data(x.shape(), x.data(), true);
  Tensor y = f(probe);
  if (y.size() != 1) throw ShapeError("finite_diff_check: f must return a scalar");
  if (!std::isfinite(y.item())) throw NonFiniteError("finite_diff_check: f(x)");
  y.backward();
  std::vector<double> analytic = probe.grad();

  NoGradGuard no_grad;
  std::vector<double> base = x.data();
  double max_rel = 0.0;
  for (size_t i = 0; i < base.size(); ++i) {
    std::vector<double> plus = base, minus = base;
    plus[i] += step;
    minus[i] -= step;
    double fp = f(Tensor::from_data(x.shape(), std::move(plus))).item();
    double fm = f(Tensor::from_data(x.shape(), std::move(minus))).item();
    double numeric = (fp - fm) / (2.0 * step);
    double rel = std::abs(analytic[i] - numeric) / std::max(std::abs(analytic[i]), 1e-8);
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

}  // namespace surgvid
