// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "surgvid/rng.hpp"
#include "surgvid/tensor.hpp"

namespace surgvid {

// Registry of named trainable tensors. Creation order is deterministic, so a
// fixed seed yields bit-identical initializations run to run. Names double as
// the checkpoint array names.
class ParamStore {
 public:
  // uniform(-1/sqrt(fan_in), +1/sqrt(fan_in))
  Tensor create_fan_in(const std::string& name, Shape shape, size_t fan_in, Rng& rng);
  Tensor create_zeros(const std::string& name, Shape shape);
  Tensor create_full(const std::string& name, Shape shape, double value);

  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
  std::vector<Tensor> tensors() const;
  Tensor find(const std::string& name) const;  // throws if absent
  bool contains(const std::string& name) const;

  // Copies values into existing params by name; shapes must match. Entries in
  // `arrays` without a matching param are ignored by default.
  void load_values(const std::map<std::string, std::vector<double>>& arrays);

  void merge_from(const ParamStore& other);  // aliases other's tensors

 private:
  Tensor track(const std::string& name, Tensor t);
  std::vector<std::pair<std::string, Tensor>> items_;
};

// y = x W + b, with W stored (in x out). Optional low-rank correction:
// y += (alpha/rank) * (x A^T) B^T with A (rank x in) and B (out x rank).
struct LowRank {
  Tensor a;  // rank x in
  Tensor b;  // out x rank
  double alpha = 8.0;
  size_t rank = 8;
};

class Linear {
 public:
  Linear() = default;
  Linear(ParamStore& store, const std::string& name, size_t in, size_t out, Rng& rng,
         bool bias = true);

  Tensor forward(const Tensor& x, const LowRank* delta = nullptr) const;
  size_t in_dim() const { return in_; }
  size_t out_dim() const { return out_; }

 private:
  Tensor w_, b_;
  size_t in_ = 0, out_ = 0;
  bool has_bias_ = true;
};

// Multi-head scaled dot-product attention. Query and key/value streams may
// have different widths; output width equals the query width.
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore& store, const std::string& name, size_t dim, size_t kv_dim,
                     size_t heads, Rng& rng);

  // q: (nq x dim), kv: (nk x kv_dim). When causal, position i attends to
  // kv rows 0..i (nq must equal nk). Optional LoRA deltas on the query and
  // value projections.
  Tensor forward(const Tensor& q, const Tensor& kv, bool causal = false,
                 const LowRank* dq = nullptr, const LowRank* dv = nullptr) const;

  size_t heads() const { return heads_; }

 private:
  Linear wq_, wk_, wv_, wo_;
  size_t dim_ = 0, heads_ = 0;
};

// Pre-norm transformer block: x += attn(ln1(x)); x += ffn(ln2(x)).
// Self-attention only; hidden width is 2x the model width.
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(ParamStore& store, const std::string& name, size_t dim, size_t heads, Rng& rng);

  struct Deltas {
    const LowRank* attn_q = nullptr;
    const LowRank* attn_v = nullptr;
    const LowRank* ffn_up = nullptr;
    const LowRank* ffn_down = nullptr;
  };

  Tensor forward(const Tensor& x, bool causal, const Deltas* deltas = nullptr) const;

 private:
  MultiHeadAttention attn_;
  Linear up_, down_;
  Tensor ln1_g_, ln1_b_, ln2_g_, ln2_b_;
};

// Fixed sinusoidal position table, (count x dim).
Tensor sinusoid_positions(size_t count, size_t dim);
// Sinusoidal encoding of 3-D grid indices; axis is chosen by dim % 3.
Tensor sinusoid_positions_3d(const std::vector<std::array<size_t, 3>>& cells, size_t dim);

// AdamW with decoupled weight decay; plain Adam is weight_decay = 0.
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, double lr, double weight_decay = 0.0, double beta1 = 0.9,
        double beta2 = 0.999, double eps = 1e-8);

  void step();
  void zero_grad();
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, wd_, beta1_, beta2_, eps_;
  long t_ = 0;
};

size_t argmax_index(const std::vector<double>& v);  // first max wins ties

}  // namespace surgvid
