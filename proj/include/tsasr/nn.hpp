// Copyright 2025 The tsasr Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Transformer building blocks. Modules are plain structs of parameter
// tensors; collect() reports them under hierarchical dotted names, which is
// all the optimizer, freeze policy, and checkpoints need.

#pragma once

#include "tsasr/tensor.hpp"

namespace tsasr {

struct ParamEntry {
  std::string name;
  Tensor t;
};
using ParamList = std::vector<ParamEntry>;

// Linear projection with an optional LoRA side path: y = xW + b + (xA)B.
// Wrapping freezes the base weights; only A/B stay trainable.
struct Linear {
  Tensor w;  // [Din, Dout]
  Tensor b;  // optional
  Tensor lora_a, lora_b;

  static Linear make(Rng& rng, int64_t d_in, int64_t d_out, bool bias = true) {
    Linear l;
    l.w = Tensor::randn({d_in, d_out}, rng, 1.0 / std::sqrt(static_cast<Real>(d_in)),
                        true);
    if (bias) l.b = Tensor::zeros({d_out}, true);
    return l;
  }

  static Linear zero(int64_t d_in, int64_t d_out, bool bias = true) {
    Linear l;
    l.w = Tensor::zeros({d_in, d_out}, true);
    if (bias) l.b = Tensor::zeros({d_out}, true);
    return l;
  }

  int64_t d_in() const { return w.dim(0); }
  int64_t d_out() const { return w.dim(1); }
  bool has_lora() const { return lora_a.defined(); }

  Tensor forward(const Tensor& x) const {
    Tensor y = matmul(x, w);
    if (b.defined()) y = add(y, b);
    if (has_lora()) y = add(y, matmul(matmul(x, lora_a), lora_b));
    return y;
  }

  void collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".weight", w});
    if (b.defined()) out.push_back({prefix + ".bias", b});
    if (lora_a.defined()) out.push_back({prefix + ".lora_a", lora_a});
    if (lora_b.defined()) out.push_back({prefix + ".lora_b", lora_b});
  }
};

// Rank-R decomposition side path; w_a ~ N(0, 0.02), w_b = 0, so the wrapped
// projection starts exactly equal to the frozen base.
inline void wrap_lora(Linear& l, int64_t rank, Rng& rng) {
  if (rank < 1 || rank >= std::min(l.d_in(), l.d_out()))
    throw ConfigError("lora rank " + std::to_string(rank) +
                      " must satisfy 1 <= R < min(" + std::to_string(l.d_in()) +
                      ", " + std::to_string(l.d_out()) + ")");
  l.lora_a = Tensor::randn({l.d_in(), rank}, rng, 0.02, true);
  l.lora_b = Tensor::zeros({rank, l.d_out()}, true);
  l.w.set_frozen(true);
  if (l.b.defined()) l.b.set_frozen(true);
}

// Fold the side path back into a single matrix (no graph).
inline Linear fold_lora(const Linear& l) {
  Linear out;
  out.w = l.w.detach();
  if (l.b.defined()) out.b = l.b.detach();
  if (l.has_lora()) {
    int64_t d_in = l.d_in(), d_out = l.d_out(), r = l.lora_a.dim(1);
    for (int64_t i = 0; i < d_in; ++i)
      for (int64_t j = 0; j < d_out; ++j) {
        Real acc = 0.0;
        for (int64_t k = 0; k < r; ++k)
          acc += l.lora_a.data()[static_cast<size_t>(i * r + k)] *
                 l.lora_b.data()[static_cast<size_t>(k * d_out + j)];
        out.w.data()[static_cast<size_t>(i * d_out + j)] += acc;
      }
  }
  out.w.set_requires_grad(true);
  if (out.b.defined()) out.b.set_requires_grad(true);
  return out;
}

struct LayerNormModule {
  Tensor gamma, beta;
  Real eps = 1e-5;

  static LayerNormModule make(int64_t d) {
    LayerNormModule m;
    m.gamma = Tensor::ones({d}, true);
    m.beta = Tensor::zeros({d}, true);
    return m;
  }

  Tensor forward(const Tensor& x) const { return layer_norm(x, gamma, beta, eps); }

  void collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
  }
};

struct FeedForward {
  Linear in, out;

  static FeedForward make(Rng& rng, int64_t d_model, int64_t d_ffn) {
    FeedForward f;
    f.in = Linear::make(rng, d_model, d_ffn);
    f.out = Linear::make(rng, d_ffn, d_model);
    return f;
  }

  Tensor forward(const Tensor& x) const { return out.forward(gelu(in.forward(x))); }

  void collect(const std::string& prefix, ParamList& o) const {
    in.collect(prefix + ".in", o);
    out.collect(prefix + ".out", o);
  }
};

// Head-and-query-averaged attention weights captured during a forward pass.
struct AttnRecord {
  int64_t rows = 0, cols = 0;
  std::vector<Real> avg_weights;  // [rows * cols], mean over heads
};

struct MultiHeadAttention {
  int n_heads = 1;
  Linear q, k, v, o;

  static MultiHeadAttention make(Rng& rng, int64_t d_model, int n_heads) {
    if (d_model % n_heads != 0)
      throw ConfigError("attention dim " + std::to_string(d_model) +
                        " not divisible by " + std::to_string(n_heads) + " heads");
    MultiHeadAttention a;
    a.n_heads = n_heads;
    a.q = Linear::make(rng, d_model, d_model);
    a.k = Linear::make(rng, d_model, d_model);
    a.v = Linear::make(rng, d_model, d_model);
    a.o = Linear::make(rng, d_model, d_model);
    return a;
  }

  // Causal masking is additive -1e30; masked scores underflow to exactly
  // zero weight after softmax, so future positions cannot leak even at the
  // bit level.
  Tensor forward(const Tensor& xq, const Tensor& xkv, bool causal,
                 AttnRecord* rec = nullptr) const {
    int64_t tq = xq.dim(0), tk = xkv.dim(0);
    int64_t d = q.d_out();
    int64_t dh = d / n_heads;
    Tensor qp = q.forward(xq);
    Tensor kp = k.forward(xkv);
    Tensor vp = v.forward(xkv);

    Tensor mask;
    if (causal) {
      if (tq != tk)
        throw std::invalid_argument("causal attention requires square scores");
      std::vector<Real> md(static_cast<size_t>(tq * tk), 0.0);
      for (int64_t i = 0; i < tq; ++i)
        for (int64_t j = i + 1; j < tk; ++j)
          md[static_cast<size_t>(i * tk + j)] = -1e30;
      mask = Tensor::from({tq, tk}, std::move(md));
    }

    if (rec) {
      rec->rows = tq;
      rec->cols = tk;
      rec->avg_weights.assign(static_cast<size_t>(tq * tk), 0.0);
    }

    std::vector<Tensor> heads;
    heads.reserve(static_cast<size_t>(n_heads));
    for (int h = 0; h < n_heads; ++h) {
      Tensor qh = slice(qp, 1, h * dh, (h + 1) * dh);
      Tensor kh = slice(kp, 1, h * dh, (h + 1) * dh);
      Tensor vh = slice(vp, 1, h * dh, (h + 1) * dh);
      Tensor scores = scale(matmul(qh, transpose2d(kh)),
                            1.0 / std::sqrt(static_cast<Real>(dh)));
      if (causal) scores = add(scores, mask);
      Tensor attn = softmax(scores, 1);
      if (rec)
        for (size_t i = 0; i < rec->avg_weights.size(); ++i)
          rec->avg_weights[i] += attn.data()[i] / n_heads;
      heads.push_back(matmul(attn, vh));
    }
    Tensor cat = (n_heads == 1) ? heads[0] : concat(heads, 1);
    return o.forward(cat);
  }

  void collect(const std::string& prefix, ParamList& out) const {
    q.collect(prefix + ".q", out);
    k.collect(prefix + ".k", out);
    v.collect(prefix + ".v", out);
    o.collect(prefix + ".o", out);
  }
};

// Fixed sinusoidal position table, [len, d], no gradient.
inline Tensor sinusoid_positions(int64_t len, int64_t d) {
  std::vector<Real> pe(static_cast<size_t>(len * d), 0.0);
  for (int64_t pos = 0; pos < len; ++pos)
    for (int64_t i = 0; i < d / 2; ++i) {
      double rate = std::pow(10000.0, -2.0 * static_cast<double>(i) / d);
      pe[static_cast<size_t>(pos * d + 2 * i)] = std::sin(pos * rate);
      if (2 * i + 1 < d)
        pe[static_cast<size_t>(pos * d + 2 * i + 1)] = std::cos(pos * rate);
    }
  return Tensor::from({len, d}, std::move(pe));
}

}  // namespace tsasr
