// SPDX-License-Identifier: Apache-2.0
#include "surgvid/nn.hpp"

#include <array>
#include <cmath>

namespace surgvid {

Tensor ParamStore::track(const std::string& name, Tensor t) {
  for (const auto& [n, _] : items_) {
    if (n == name) throw Error("ParamStore: duplicate name " + name);
  }
  items_.emplace_back(name, t);
  return t;
}

Tensor ParamStore::create_fan_in(const std::string& name, Shape shape, size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> data(shape_size(shape));
  for (double& v : data) v = rng.uniform(-bound, bound);
  return track(name, Tensor::from_data(std::move(shape), std::move(data), true));
}

Tensor ParamStore::create_zeros(const std::string& name, Shape shape) {
  return track(name, Tensor::zeros(std::move(shape), true));
}

Tensor ParamStore::create_full(const std::string& name, Shape shape, double value) {
  return track(name, Tensor::full(std::move(shape), value, true));
}

std::vector<Tensor> ParamStore::tensors() const {
  std::vector<Tensor> out;
  out.reserve(items_.size());
  for (const auto& [_, t] : items_) out.push_back(t);
  return out;
}

Tensor ParamStore::find(const std::string& name) const {
  for (const auto& [n, t] : items_) {
    if (n == name) return t;
  }
  throw Error("ParamStore: no param named " + name);
}

bool ParamStore::contains(const std::string& name) const {
  for (const auto& [n, _] : items_) {
    if (n == name) return true;
  }
  return false;
}

void ParamStore::load_values(const std::map<std::string, std::vector<double>>& arrays) {
  for (auto& [name, t] : items_) {
    auto it = arrays.find(name);
    if (it == arrays.end()) continue;
    if (it->second.size() != t.size()) {
      throw ShapeError("load_values: size mismatch for " + name);
    }
    t.raw_data() = it->second;
  }
}

void ParamStore::merge_from(const ParamStore& other) {
  for (const auto& [n, t] : other.items()) track(n, t);
}

Linear::Linear(ParamStore& store, const std::string& name, size_t in, size_t out, Rng& rng,
               bool bias)
    : in_(in), out_(out), has_bias_(bias) {
  w_ = store.create_fan_in(name + ".w", {in, out}, in, rng);
  if (bias) b_ = store.create_zeros(name + ".b", {out});
}

Tensor Linear::forward(const Tensor& x, const LowRank* delta) const {
  Tensor y = matmul(x, w_);
  if (has_bias_) y = add(y, b_);
  if (delta) {
    Tensor correction = matmul(matmul(x, transpose(delta->a)), transpose(delta->b));
    y = add(y, scale(correction, delta->alpha / static_cast<double>(delta->rank)));
  }
  return y;
}

MultiHeadAttention::MultiHeadAttention(ParamStore& store, const std::string& name, size_t dim,
                                       size_t kv_dim, size_t heads, Rng& rng)
    : dim_(dim), heads_(heads) {
  if (dim % heads != 0) throw ShapeError("attention: head count must divide model width");
  wq_ = Linear(store, name + ".wq", dim, dim, rng);
  wk_ = Linear(store, name + ".wk", kv_dim, dim, rng);
  wv_ = Linear(store, name + ".wv", kv_dim, dim, rng);
  wo_ = Linear(store, name + ".wo", dim, dim, rng);
}

Tensor MultiHeadAttention::forward(const Tensor& q, const Tensor& kv, bool causal,
                                   const LowRank* dq, const LowRank* dv) const {
  const size_t nq = q.rows();
  const size_t nk = kv.rows();
  if (causal && nq != nk) throw ShapeError("causal attention needs square q/kv");
  Tensor Q = wq_.forward(q, dq);
  Tensor K = wk_.forward(kv);
  Tensor V = wv_.forward(kv, dv);
  const size_t dh = dim_ / heads_;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor mask;
  if (causal) {
    // Finite large penalty; exp() underflows to exactly 0 for masked slots.
    std::vector<double> m(nq * nk, 0.0);
    for (size_t i = 0; i < nq; ++i)
      for (size_t j = i + 1; j < nk; ++j) m[i * nk + j] = -1e9;
    mask = Tensor::from_data({nq, nk}, std::move(m));
  }

  std::vector<Tensor> head_outputs;
  head_outputs.reserve(heads_);
  for (size_t h = 0; h < heads_; ++h) {
    Tensor qh = slice_cols(Q, h * dh, dh);
    Tensor kh = slice_cols(K, h * dh, dh);
    Tensor vh = slice_cols(V, h * dh, dh);
    Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
    if (causal) scores = add(scores, mask);
    head_outputs.push_back(matmul(softmax(scores, 1), vh));
  }
  Tensor merged = heads_ == 1 ? head_outputs[0] : concat_cols(head_outputs);
  return wo_.forward(merged);
}

TransformerBlock::TransformerBlock(ParamStore& store, const std::string& name, size_t dim,
                                   size_t heads, Rng& rng) {
  attn_ = MultiHeadAttention(store, name + ".attn", dim, dim, heads, rng);
  up_ = Linear(store, name + ".ffn.up", dim, 2 * dim, rng);
  down_ = Linear(store, name + ".ffn.down", 2 * dim, dim, rng);
  ln1_g_ = store.create_full(name + ".ln1.g", {dim}, 1.0);
  ln1_b_ = store.create_zeros(name + ".ln1.b", {dim});
  ln2_g_ = store.create_full(name + ".ln2.g", {dim}, 1.0);
  ln2_b_ = store.create_zeros(name + ".ln2.b", {dim});
}

Tensor TransformerBlock::forward(const Tensor& x, bool causal, const Deltas* deltas) const {
  const LowRank* dq = deltas ? deltas->attn_q : nullptr;
  const LowRank* dv = deltas ? deltas->attn_v : nullptr;
  Tensor normed = layer_norm(x, ln1_g_, ln1_b_);
  Tensor h = add(x, attn_.forward(normed, normed, causal, dq, dv));
  Tensor normed2 = layer_norm(h, ln2_g_, ln2_b_);
  Tensor ff = down_.forward(gelu(up_.forward(normed2, deltas ? deltas->ffn_up : nullptr)),
                            deltas ? deltas->ffn_down : nullptr);
  return add(h, ff);
}

Tensor sinusoid_positions(size_t count, size_t dim) {
  std::vector<double> data(count * dim);
  for (size_t p = 0; p < count; ++p) {
    for (size_t d = 0; d < dim; ++d) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (d / 2)) / dim);
      const double v = static_cast<double>(p) * freq;
      data[p * dim + d] = (d % 2 == 0) ? std::sin(v) : std::cos(v);
    }
  }
  return Tensor::from_data({count, dim}, std::move(data));
}

Tensor sinusoid_positions_3d(const std::vector<std::array<size_t, 3>>& cells, size_t dim) {
  std::vector<double> data(cells.size() * dim);
  const double denom = std::max<size_t>(dim / 3, 1);
  for (size_t r = 0; r < cells.size(); ++r) {
    for (size_t d = 0; d < dim; ++d) {
      const size_t axis = d % 3;
      const size_t j = d / 3;
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (j / 2)) / denom);
      const double v = static_cast<double>(cells[r][axis]) * freq;
      data[r * dim + d] = (j % 2 == 0) ? std::sin(v) : std::cos(v);
    }
  }
  return Tensor::from_data({cells.size(), dim}, std::move(data));
}

AdamW::AdamW(std::vector<Tensor> params, double lr, double weight_decay, double beta1,
             double beta2, double eps)
    : params_(std::move(params)), lr_(lr), wd_(weight_decay), beta1_(beta1), beta2_(beta2),
      eps_(eps) {
  m_.resize(params_.size());
  v_.resize(params_.size());
  for (size_t i = 0; i < params_.size(); ++i) {
    m_[i].assign(params_[i].size(), 0.0);
    v_[i].assign(params_[i].size(), 0.0);
  }
}

void AdamW::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, t_);
  const double bc2 = 1.0 - std::pow(beta2_, t_);
  const bool f32 = precision() == Precision::f32;
  for (size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    const auto& g = p.impl()->grad;
    if (g.empty()) continue;  // parameter untouched by this step's graph
    auto& data = p.raw_data();
    for (size_t j = 0; j < data.size(); ++j) {
      m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g[j];
      v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g[j] * g[j];
      const double mhat = m_[i][j] / bc1;
      const double vhat = v_[i][j] / bc2;
      double next = data[j] - lr_ * (mhat / (std::sqrt(vhat) + eps_) + wd_ * data[j]);
      data[j] = f32 ? static_cast<double>(static_cast<float>(next)) : next;
    }
  }
}

void AdamW::zero_grad() {
  for (Tensor& p : params_) p.impl()->grad.clear();
}

size_t argmax_index(const std::vector<double>& v) {
  size_t best = 0;
  for (size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

}  // namespace surgvid
