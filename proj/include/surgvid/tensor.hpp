// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "surgvid/errors.hpp"

namespace surgvid {

using Shape = std::vector<size_t>;

size_t shape_size(const Shape& s);
std::string shape_str(const Shape& s);

// Numeric storage precision. Values are always held in doubles; in f32 mode
// every op result (and every leaf) is rounded to the nearest float so the
// stored values are exactly float-representable. Gradients stay in doubles.
enum class Precision { f32, f64 };

Precision precision();
void set_precision(Precision p);

struct PrecisionGuard {
  explicit PrecisionGuard(Precision p) : saved_(precision()) { set_precision(p); }
  ~PrecisionGuard() { set_precision(saved_); }

 private:
  Precision saved_;
};

// While grad is disabled, ops produce plain values with no tape records.
bool grad_enabled();
void set_grad_enabled(bool on);

struct NoGradGuard {
  NoGradGuard() : saved_(grad_enabled()) { set_grad_enabled(false); }
  ~NoGradGuard() { set_grad_enabled(saved_); }

 private:
  bool saved_;
};

// One node of the recorded graph: the op that produced the value, the parent
// nodes it read, and a closure holding whatever the backward rule saved.
// Creation order (seq) is a topological order, so backward() visits records
// exactly once by walking reachable nodes in decreasing seq.
struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // allocated on demand, same length as data
  bool requires_grad = false;
  int64_t seq = 0;
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void(TensorImpl&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  size_t size() const { return impl_->data.size(); }
  size_t rank() const { return impl_->shape.size(); }
  size_t rows() const;  // first extent (rank >= 1)
  size_t cols() const;  // second extent (rank == 2)

  const std::vector<double>& data() const { return impl_->data; }
  // Direct mutation; bypasses the tape. Used by optimizers and initializers.
  std::vector<double>& raw_data() { return impl_->data; }
  double item() const;
  double at(size_t i) const { return impl_->data[i]; }
  double at(size_t r, size_t c) const { return impl_->data[r * cols() + c]; }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  const std::vector<double>& grad() const;
  void zero_grad() { if (impl_) impl_->grad.assign(impl_->data.size(), 0.0); }

  // Runs reverse-mode accumulation from this scalar. Each reachable graph
  // record is applied exactly once, in reverse creation (topological) order.
  void backward() const;

  Tensor detach() const;

  // Identity check (same underlying node).
  bool same_node(const Tensor& other) const { return impl_ == other.impl_; }

  std::shared_ptr<TensorImpl> impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// ---- ops ----
// All ops validate shapes, check output finiteness, and register backward
// rules when grad is enabled and some input requires it.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
// Same data, new extents (product must match).
Tensor reshape(const Tensor& a, Shape shape);

// add/sub support: identical shapes; b as rank-1 row bias over the last axis;
// b as a 1-element scalar.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
// Elementwise product; identical shapes or 1-element b.
Tensor mul(const Tensor& a, const Tensor& b);
// Elementwise division by a 1-element tensor (gradient flows to both).
Tensor div_scalar(const Tensor& a, const Tensor& s);
Tensor scale(const Tensor& a, double c);
Tensor add_const(const Tensor& a, double c);

Tensor softmax(const Tensor& x, int axis);
Tensor log_softmax(const Tensor& x, int axis);
// Normalizes over the last axis with population variance and eps = 1e-5.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);
Tensor gelu(const Tensor& x);
Tensor softplus(const Tensor& x);

Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
// Mean over rows of a 2-D tensor -> rank-1 of length cols.
Tensor mean_rows(const Tensor& x);

Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& x, size_t start, size_t count);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& x, size_t start, size_t count);
// Row gather from a 2-D table; duplicates accumulate gradient.
Tensor gather_rows(const Tensor& table, const std::vector<int>& ids);

// Mean squared error over all elements of two same-shaped tensors.
Tensor mse_loss(const Tensor& a, const Tensor& b);
// Mean cross-entropy of row-wise logits against integer targets.
Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets);
// Rows scaled to unit L2 norm; zero-norm rows are an error.
Tensor l2_normalize_rows(const Tensor& x);

// Scaled dot-product attention: softmax(q kT / sqrt(d)) v, one row per query.
// Single head; multi-head variants live in nn.hpp and are built on this.
Tensor cross_attention(const Tensor& queries, const Tensor& keys, const Tensor& values);

// Max over coordinates of |analytic - central difference| / max(|analytic|, 1e-8).
// f must be a pure scalar-valued function of x. Runs at the current precision
// (use PrecisionGuard(Precision::f64) for checkable tolerances).
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double step = 1e-5);

}  // namespace surgvid
