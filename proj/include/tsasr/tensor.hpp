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

// Dense float64 tensors with define-by-run reverse-mode differentiation.
// Every op evaluates eagerly and, when an input requires gradients, records
// a backward closure on the freshly built graph. A graph lives for one
// forward/backward pass; parameters are leaves shared across graphs.
//
// Broadcasting is limited to leading batch dimensions: two shapes are
// compatible when the smaller one is a trailing suffix of the larger one.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_set>
#include <vector>

#include "tsasr/common.hpp"

namespace tsasr {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

namespace detail {

struct TensorNode {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;  // empty means zero
  bool requires_grad = false;
  bool frozen = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void()> backward_fn;

  int64_t numel() const { return static_cast<int64_t>(data.size()); }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<Real> data,
                     bool requires_grad = false) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size()))
      throw std::invalid_argument("tensor: shape " + shape_str(shape) +
                                  " does not match data length " +
                                  std::to_string(data.size()));
    auto n = std::make_shared<detail::TensorNode>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor full(const Shape& shape, Real v, bool requires_grad = false) {
    return from(shape, std::vector<Real>(shape_numel(shape), v), requires_grad);
  }
  static Tensor zeros(const Shape& shape, bool requires_grad = false) {
    return full(shape, 0.0, requires_grad);
  }
  static Tensor ones(const Shape& shape, bool requires_grad = false) {
    return full(shape, 1.0, requires_grad);
  }
  static Tensor scalar(Real v, bool requires_grad = false) {
    return from({}, {v}, requires_grad);
  }
  static Tensor randn(const Shape& shape, Rng& rng, Real stddev = 1.0,
                      bool requires_grad = false) {
    std::vector<Real> d(shape_numel(shape));
    for (auto& x : d) x = rng.gaussian(0.0, stddev);
    return from(shape, std::move(d), requires_grad);
  }
  static Tensor rand_uniform(const Shape& shape, Rng& rng, Real lo, Real hi,
                             bool requires_grad = false) {
    std::vector<Real> d(shape_numel(shape));
    for (auto& x : d) x = rng.uniform(lo, hi);
    return from(shape, std::move(d), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  int64_t dim(int i) const {
    if (i < 0) i += ndim();
    return node_->shape[static_cast<size_t>(i)];
  }
  int64_t numel() const { return node_->numel(); }

  std::vector<Real>& data() { return node_->data; }
  const std::vector<Real>& data() const { return node_->data; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool b) { node_->requires_grad = b; }
  bool frozen() const { return node_->frozen; }
  void set_frozen(bool b) {
    node_->frozen = b;
    if (b) node_->requires_grad = false;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::vector<Real>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  // Gradient view that treats an unallocated buffer as zeros.
  std::vector<Real> grad_or_zeros() const {
    if (node_->grad.empty()) return std::vector<Real>(node_->data.size(), 0.0);
    return node_->grad;
  }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  Real value() const {
    if (numel() != 1)
      throw std::invalid_argument("value(): tensor is not scalar, shape " +
                                  shape_str(shape()));
    return node_->data[0];
  }

  Real at2(int64_t r, int64_t c) const {
    return node_->data[static_cast<size_t>(r * dim(-1) + c)];
  }

  Tensor detach() const { return from(shape(), data(), false); }

  // Reverse accumulation from a scalar loss. Gradients of every node
  // reachable from the loss are cleared first, so repeated calls on the same
  // graph produce identical results.
  void backward() const;

  std::shared_ptr<detail::TensorNode>& node() { return node_; }
  const std::shared_ptr<detail::TensorNode>& node() const { return node_; }

  explicit Tensor(std::shared_ptr<detail::TensorNode> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<detail::TensorNode> node_;
};

namespace detail {

inline Tensor make_op_result(Shape shape, std::vector<Real> data,
                             const std::vector<Tensor>& parents) {
  bool rg = false;
  for (const auto& p : parents) rg = rg || p.requires_grad();
  Tensor out = Tensor::from(std::move(shape), std::move(data), rg);
  if (rg) {
    auto& node = *out.node();
    node.parents.reserve(parents.size());
    for (const auto& p : parents) node.parents.push_back(p.node());
  }
  return out;
}

// True when `small` is a trailing suffix of `big`.
inline bool suffix_compatible(const Shape& big, const Shape& small) {
  if (small.size() > big.size()) return false;
  size_t off = big.size() - small.size();
  for (size_t i = 0; i < small.size(); ++i)
    if (big[off + i] != small[i]) return false;
  return true;
}

struct BroadcastPlan {
  Shape out_shape;
  int64_t an = 0, bn = 0, on = 0;  // numels; operand index = flat % numel
};

inline BroadcastPlan broadcast_plan(const Tensor& a, const Tensor& b,
                                    const char* opname) {
  BroadcastPlan p;
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (suffix_compatible(sa, sb)) {
    p.out_shape = sa;
  } else if (suffix_compatible(sb, sa)) {
    p.out_shape = sb;
  } else {
    throw std::invalid_argument(std::string(opname) + ": incompatible shapes " +
                                shape_str(sa) + " and " + shape_str(sb));
  }
  p.an = a.numel();
  p.bn = b.numel();
  p.on = shape_numel(p.out_shape);
  return p;
}

// Sum gradient contributions over leading broadcast repetitions.
inline void reduce_accumulate(std::vector<Real>& dst, const std::vector<Real>& src,
                              int64_t dst_n) {
  int64_t src_n = static_cast<int64_t>(src.size());
  for (int64_t i = 0; i < src_n; ++i) dst[static_cast<size_t>(i % dst_n)] += src[static_cast<size_t>(i)];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops
// ---------------------------------------------------------------------------

namespace detail {

template <typename FwdFn, typename BwdFn>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, FwdFn f,
                 BwdFn install_backward) {
  BroadcastPlan p = broadcast_plan(a, b, name);
  std::vector<Real> out(static_cast<size_t>(p.on));
  const auto& ad = a.data();
  const auto& bd = b.data();
  for (int64_t i = 0; i < p.on; ++i)
    out[static_cast<size_t>(i)] =
        f(ad[static_cast<size_t>(i % p.an)], bd[static_cast<size_t>(i % p.bn)]);
  Tensor res = make_op_result(p.out_shape, std::move(out), {a, b});
  if (res.requires_grad()) install_backward(res, a, b, p);
  return res;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "add", [](Real x, Real y) { return x + y; },
      [](Tensor& res, const Tensor& a, const Tensor& b, detail::BroadcastPlan p) {
        auto rn = res.node().get();
        auto an = a.node();
        auto bn = b.node();
        res.node()->backward_fn = [rn, an, bn, p]() {
          if (an->requires_grad) {
            an->ensure_grad();
            detail::reduce_accumulate(an->grad, rn->grad, p.an);
          }
          if (bn->requires_grad) {
            bn->ensure_grad();
            detail::reduce_accumulate(bn->grad, rn->grad, p.bn);
          }
        };
      });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "sub", [](Real x, Real y) { return x - y; },
      [](Tensor& res, const Tensor& a, const Tensor& b, detail::BroadcastPlan p) {
        auto rn = res.node().get();
        auto an = a.node();
        auto bn = b.node();
        res.node()->backward_fn = [rn, an, bn, p]() {
          if (an->requires_grad) {
            an->ensure_grad();
            detail::reduce_accumulate(an->grad, rn->grad, p.an);
          }
          if (bn->requires_grad) {
            bn->ensure_grad();
            for (int64_t i = 0; i < p.on; ++i)
              bn->grad[static_cast<size_t>(i % p.bn)] -= rn->grad[static_cast<size_t>(i)];
          }
        };
      });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "mul", [](Real x, Real y) { return x * y; },
      [](Tensor& res, const Tensor& a, const Tensor& b, detail::BroadcastPlan p) {
        auto rn = res.node().get();
        auto an = a.node();
        auto bn = b.node();
        res.node()->backward_fn = [rn, an, bn, p]() {
          if (an->requires_grad) {
            an->ensure_grad();
            for (int64_t i = 0; i < p.on; ++i)
              an->grad[static_cast<size_t>(i % p.an)] +=
                  rn->grad[static_cast<size_t>(i)] * bn->data[static_cast<size_t>(i % p.bn)];
          }
          if (bn->requires_grad) {
            bn->ensure_grad();
            for (int64_t i = 0; i < p.on; ++i)
              bn->grad[static_cast<size_t>(i % p.bn)] +=
                  rn->grad[static_cast<size_t>(i)] * an->data[static_cast<size_t>(i % p.an)];
          }
        };
      });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "div", [](Real x, Real y) { return x / y; },
      [](Tensor& res, const Tensor& a, const Tensor& b, detail::BroadcastPlan p) {
        auto rn = res.node().get();
        auto an = a.node();
        auto bn = b.node();
        res.node()->backward_fn = [rn, an, bn, p]() {
          if (an->requires_grad) {
            an->ensure_grad();
            for (int64_t i = 0; i < p.on; ++i)
              an->grad[static_cast<size_t>(i % p.an)] +=
                  rn->grad[static_cast<size_t>(i)] / bn->data[static_cast<size_t>(i % p.bn)];
          }
          if (bn->requires_grad) {
            bn->ensure_grad();
            for (int64_t i = 0; i < p.on; ++i) {
              Real bv = bn->data[static_cast<size_t>(i % p.bn)];
              bn->grad[static_cast<size_t>(i % p.bn)] -=
                  rn->grad[static_cast<size_t>(i)] *
                  an->data[static_cast<size_t>(i % p.an)] / (bv * bv);
            }
          }
        };
      });
}

// ---------------------------------------------------------------------------
// Scalar and unary ops
// ---------------------------------------------------------------------------

inline Tensor affine(const Tensor& a, Real scale, Real shift = 0.0) {
  std::vector<Real> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * scale + shift;
  Tensor res = detail::make_op_result(a.shape(), std::move(out), {a});
  if (res.requires_grad()) {
    auto rn = res.node().get();
    auto an = a.node();
    res.node()->backward_fn = [rn, an, scale]() {
      if (!an->requires_grad) return;
      an->ensure_grad();
      for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += scale * rn->grad[i];
    };
  }
  return res;
}

inline Tensor neg(const Tensor& a) { return affine(a, -1.0); }
inline Tensor scale(const Tensor& a, Real c) { return affine(a, c); }

inline Tensor sqrt_elem(const Tensor& a) {
  std::vector<Real> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) {
    if (a.data()[i] < 0.0)
      throw NumericError("sqrt_elem: negative input " + std::to_string(a.data()[i]));
    out[i] = std::sqrt(a.data()[i]);
  }
  Tensor res = detail::make_op_result(a.shape(), std::move(out), {a});
  if (res.requires_grad()) {
    auto rn = res.node().get();
    auto an = a.node();
    res.node()->backward_fn = [rn, an]() {
      if (!an->requires_grad) return;
      an->ensure_grad();
      for (size_t i = 0; i < an->grad.size(); ++i)
        an->grad[i] += rn->grad[i] * 0.5 / rn->data[i];
    };
  }
  return res;
}

// Exact-erf GeLU: 0.5 * x * (1 + erf(x / sqrt(2))).
inline Tensor gelu(const Tensor& a) {
  static const Real kInvSqrt2 = 0.70710678118654752440;
  static const Real kInvSqrt2Pi = 0.39894228040143267794;
  std::vector<Real> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) {
    Real x = a.data()[i];
    out[i] = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
  }
  Tensor res = detail::make_op_result(a.shape(), std::move(out), {a});
  if (res.requires_grad()) {
    auto rn = res.node().get();
    auto an = a.node();
    res.node()->backward_fn = [rn, an]() {
      if (!an->requires_grad) return;
      an->ensure_grad();
      for (size_t i = 0; i < an->grad.size(); ++i) {
        Real x = an->data[i];
        Real cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
        Real pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
        an->grad[i] += rn->grad[i] * (cdf + x * pdf);
      }
    };
  }
  return res;
}

// ---------------------------------------------------------------------------
// Matrix multiplication with leading batch dimensions
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2)
    throw std::invalid_argument("matmul: operands must have >= 2 dims, got " +
                                shape_str(sa) + " and " + shape_str(sb));
  int64_t M = sa[sa.size() - 2], K = sa[sa.size() - 1];
  int64_t Kb = sb[sb.size() - 2], N = sb[sb.size() - 1];
  if (K != Kb)
    throw std::invalid_argument("matmul: inner dimensions differ, " +
                                shape_str(sa) + " x " + shape_str(sb));
  int64_t batch_a = a.numel() / (M * K);
  int64_t batch_b = b.numel() / (Kb * N);
  if (batch_a != batch_b && batch_a != 1 && batch_b != 1)
    throw std::invalid_argument("matmul: batch dimensions incompatible, " +
                                shape_str(sa) + " x " + shape_str(sb));
  int64_t batch = std::max(batch_a, batch_b);

  Shape out_shape = (sa.size() >= sb.size()) ? sa : sb;
  out_shape[out_shape.size() - 2] = M;
  out_shape[out_shape.size() - 1] = N;

  std::vector<Real> out(static_cast<size_t>(batch * M * N), 0.0);
  const Real* ad = a.data().data();
  const Real* bd = b.data().data();
  for (int64_t g = 0; g < batch; ++g) {
    const Real* pa = ad + (batch_a == 1 ? 0 : g * M * K);
    const Real* pb = bd + (batch_b == 1 ? 0 : g * K * N);
    Real* pc = out.data() + g * M * N;
    for (int64_t i = 0; i < M; ++i) {
      const Real* arow = pa + i * K;
      Real* crow = pc + i * N;
      for (int64_t k = 0; k < K; ++k) {
        Real av = arow[k];
        if (av == 0.0) continue;
        const Real* brow = pb + k * N;
        for (int64_t j = 0; j < N; ++j) crow[j] += av * brow[j];
      }
    }
  }

  Tensor res = detail::make_op_result(out_shape, std::move(out), {a, b});
  if (res.requires_grad()) {
    auto rn = res.node().get();
    auto an = a.node();
    auto bn = b.node();
    res.node()->backward_fn = [rn, an, bn, batch, batch_a, batch_b, M, K, N]() {
      const Real* gd = rn->grad.data();
      if (an->requires_grad) {
        an->ensure_grad();
        Real* ga = an->grad.data();
        const Real* bd = bn->data.data();
        for (int64_t g = 0; g < batch; ++g) {
          const Real* pg = gd + g * M * N;
          const Real* pb = bd + (batch_b == 1 ? 0 : g * K * N);
          Real* pa = ga + (batch_a == 1 ? 0 : g * M * K);
          // dA = dC * B^T
          for (int64_t i = 0; i < M; ++i)
            for (int64_t k = 0; k < K; ++k) {
              Real acc = 0.0;
              const Real* grow = pg + i * N;
              const Real* brow = pb + k * N;
              for (int64_t j = 0; j < N; ++j) acc += grow[j] * brow[j];
              pa[i * K + k] += acc;
            }
        }
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        Real* gb = bn->grad.data();
        const Real* ad = an->data.data();
        for (int64_t g = 0; g < batch; ++g) {
          const Real* pg = gd + g * M * N;
          const Real* pa = ad + (batch_a == 1 ? 0 : g * M * K);
          Real* pb = gb + (batch_b == 1 ? 0 : g * K * N);
          // dB = A^T * dC
          for (int64_t i = 0; i < M; ++i) {
            const Real* grow = pg + i * N;
            const Real* arow = pa + i * K;
            for (int64_t k = 0; k < K; ++k) {
              Real av = arow[k];
              if (av == 0.0) continue;
              Real* brow = pb + k * N;
              for (int64_t j = 0; j < N; ++j) brow[j] += av * grow[j];
            }
          }
        }
      }
    };
  }
  return res;
}

// Swap the last two dimensions.
inline Tensor transpose2d(const Tensor& a) {
  const Shape& s = a.shape();
  if (s.size() < 2)
    throw std::invalid_argument("transpose2d: need >= 2 dims, got " + shape_str(s));
  int64_t R = s[s.size() - 2], C = s[s.size() - 1];
  int64_t batch = a.numel() / (R * C);
  Shape out_shape = s;
  std::swap(out_shape[out_shape.size() - 2], out_shape[out_shape.size() - 1]);
  std::vector<Real> out(a.data().size());
  for (int64_t g = 0; g < batch; ++g)
    for (int64_t i = 0; i < R; ++i)
      for (int64_t j = 0; j < C; ++j)
        out[static_cast<size_t>(g * R * C + j * R + i)] =
            a.data()[static_cast<size_t>(g * R * C + i * C + j)];
  Tensor res = detail::make_op_result(out_shape, std::move(out), {a});
  if (res.requires_grad()) {
    auto rn = res.node().get();
    auto an = a.node();
    res.node()->backward_fn = [rn, an, batch, R, C]() {
      if (!an->requires_grad) return;
      an->ensure_grad();
      for (int64_t g = 0; g < batch; ++g)
        for (int64_t i = 0; i < R; ++i)
          for (int64_t j = 0; j < C; ++j)
            an->grad[static_cast<size_t>(g * R * C + i * C + j)] +=
                rn->grad[static_cast<size_t>(g * R * C + j * R + i)];
    };
  }
  return res;
}

inline Tensor reshape(const Tensor& a, Shape new_shape) {
  if (shape_numel(new_shape) != a.numel())
    throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape()) +
                                " as " + shape_str(new_shape));
  Tensor res = detail::make_op_result(std::move(new_shape),
                                      std::vector<Real>(a.data()), {a});
  if (res.requires_grad()) {
    auto rn = res.node().get();
    auto an = a.node();
    res.node()->backward_fn = [rn, an]() {
      if (!an->requires_grad) return;
      an->ensure_grad();
      for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += rn->grad[i];
    };
  }
  return res;
}

// ---------------------------------------------------------------------------
// Concat / slice along an arbitrary axis
// ---------------------------------------------------------------------------

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  int nd = static_cast<int>(s0.size());
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd) throw std::invalid_argument("concat: bad axis");
  int64_t axis_total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (static_cast<int>(s.size()) != nd)
      throw std::invalid_argument("concat: rank mismatch " + shape_str(s0) +
                                  " vs " + shape_str(s));
    for (int i = 0; i < nd; ++i)
      if (i != axis && s[static_cast<size_t>(i)] != s0[static_cast<size_t>(i)])
        throw std::invalid_argument("concat: shape mismatch " + shape_str(s0) +
                                    " vs " + shape_str(s));
    axis_total += s[static_cast<size_t>(axis)];
  }
  Shape out_shape = s0;
  out_shape[static_cast<size_t>(axis)] = axis_total;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s0[static_cast<size_t>(i)];
  for (int i = axis + 1; i < nd; ++i) inner *= s0[static_cast<size_t>(i)];

  std::vector<Real> out(static_cast<size_t>(outer * axis_total * inner));
  int64_t off = 0;
  for (const auto& p : parts) {
    int64_t len = p.shape()[static_cast<size_t>(axis)];
    for (int64_t o = 0; o < outer; ++o)
      std::copy_n(p.data().data() + o * len * inner, len * inner,
                  out.data() + (o * axis_total + off) * inner);
    off += len;
  }

  Tensor res = detail::make_op_result(out_shape, std::move(out), parts);
  if (res.requires_grad()) {
    auto rn = res.node().get();
    std::vector<std::shared_ptr<detail::TensorNode>> pn;
    std::vector<int64_t> lens;
    for (const auto& p : parts) {
      pn.push_back(p.node());
      lens.push_back(p.shape()[static_cast<size_t>(axis)]);
    }
    res.node()->backward_fn = [rn, pn, lens, outer, inner, axis_total]() {
      int64_t off = 0;
      for (size_t k = 0; k < pn.size(); ++k) {
        int64_t len = lens[k];
        if (pn[k]->requires_grad) {
          pn[k]->ensure_grad();
          for (int64_t o = 0; o < outer; ++o) {
            const Real* src = rn->grad.data() + (o * axis_total + off) * inner;
            Real* dst = pn[k]->grad.data() + o * len * inner;
            for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
          }
        }
        off += len;
      }
    };
  }
  return res;
}

// Half-open [start, end) along axis.
inline Tensor slice(const Tensor& a, int axis, int64_t start, int64_t end) {
  const Shape& s = a.shape();
  int nd = static_cast<int>(s.size());
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd) throw std::invalid_argument("slice: bad axis");
  int64_t len = s[static_cast<size_t>(axis)];
  if (start < 0 || end > len || start > end)
    throw std::invalid_argument("slice: range [" + std::to_string(start) + ", " +
                                std::to_string(end) + ") out of bounds for " +
                                shape_str(s));
  Shape out_shape = s;
  out_shape[static_cast<size_t>(axis)] = end - start;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
  for (int i = axis + 1; i < nd; ++i) inner *= s[static_cast<size_t>(i)];
  int64_t span = end - start;

  std::vector<Real> out(static_cast<size_t>(outer * span * inner));
  for (int64_t o = 0; o < outer; ++o)
    std::copy_n(a.data().data() + (o * len + start) * inner, span * inner,
                out.data() + o * span * inner);

  Tensor res = detail::make_op_result(out_shape, std::move(out), {a});
  if (res.requires_grad()) {
    auto rn = res.node().get();
    auto an = a.node();
    res.node()->backward_fn = [rn, an, outer, inner, len, start, span]() {
      if (!an->requires_grad) return;
      an->ensure_grad();
      for (int64_t o = 0; o < outer; ++o) {
        const Real* src = rn->grad.data() + o * span * inner;
        Real* dst = an->grad.data() + (o * len + start) * inner;
        for (int64_t i = 0; i < span * inner; ++i) dst[i] += src[i];
      }
    };
  }
  return res;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum_all(const Tensor& a) {
  Real s = std::accumulate(a.data().begin(), a.data().end(), 0.0);
  Tensor res = detail::make_op_result({}, {s}, {a});
  if (res.requires_grad()) {
    auto rn = res.node().get();
    auto an = a.node();
    res.node()->backward_fn = [rn, an]() {
      if (!an->requires_grad) return;
      an->ensure_grad();
      Real g = rn->grad[0];
      for (auto& v : an->grad) v += g;
    };
  }
  return res;
}

inline Tensor mean_all(const Tensor& a) {
  return scale(sum_all(a), 1.0 / static_cast<Real>(a.numel()));
}

// Column mean of a [R, C] matrix -> [C].
inline Tensor mean_rows(const Tensor& a) {
  if (a.ndim() != 2) throw std::invalid_argument("mean_rows: need 2-D input");
  int64_t R = a.dim(0), C = a.dim(1);
  std::vector<Real> out(static_cast<size_t>(C), 0.0);
  for (int64_t i = 0; i < R; ++i)
    for (int64_t j = 0; j < C; ++j)
      out[static_cast<size_t>(j)] += a.data()[static_cast<size_t>(i * C + j)];
  for (auto& v : out) v /= static_cast<Real>(R);
  Tensor res = detail::make_op_result({C}, std::move(out), {a});
  if (res.requires_grad()) {
    auto rn = res.node().get();
    auto an = a.node();
    res.node()->backward_fn = [rn, an, R, C]() {
      if (!an->requires_grad) return;
      an->ensure_grad();
      for (int64_t i = 0; i < R; ++i)
        for (int64_t j = 0; j < C; ++j)
          an->grad[static_cast<size_t>(i * C + j)] +=
              rn->grad[static_cast<size_t>(j)] / static_cast<Real>(R);
    };
  }
  return res;
}

// Repeat a [D] vector into [T, D] rows.
inline Tensor tile_rows(const Tensor& v, int64_t rows) {
  if (v.ndim() != 1) throw std::invalid_argument("tile_rows: need 1-D input");
  int64_t D = v.dim(0);
  std::vector<Real> out(static_cast<size_t>(rows * D));
  for (int64_t i = 0; i < rows; ++i)
    std::copy_n(v.data().data(), D, out.data() + i * D);
  Tensor res = detail::make_op_result({rows, D}, std::move(out), {v});
  if (res.requires_grad()) {
    auto rn = res.node().get();
    auto vn = v.node();
    res.node()->backward_fn = [rn, vn, rows, D]() {
      if (!vn->requires_grad) return;
      vn->ensure_grad();
      for (int64_t i = 0; i < rows; ++i)
        for (int64_t j = 0; j < D; ++j)
          vn->grad[static_cast<size_t>(j)] += rn->grad[static_cast<size_t>(i * D + j)];
    };
  }
  return res;
}

// ---------------------------------------------------------------------------
// Softmax / layer norm
// ---------------------------------------------------------------------------

inline Tensor softmax(const Tensor& a, int axis) {
  const Shape& s = a.shape();
  int nd = static_cast<int>(s.size());
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd) throw std::invalid_argument("softmax: bad axis");
  int64_t n = s[static_cast<size_t>(axis)];
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
  for (int i = axis + 1; i < nd; ++i) inner *= s[static_cast<size_t>(i)];

  std::vector<Real> out(a.data().size());
  const auto& ad = a.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t in = 0; in < inner; ++in) {
      int64_t base = o * n * inner + in;
      Real mx = ad[static_cast<size_t>(base)];
      for (int64_t k = 1; k < n; ++k)
        mx = std::max(mx, ad[static_cast<size_t>(base + k * inner)]);
      Real denom = 0.0;
      for (int64_t k = 0; k < n; ++k) {
        Real e = std::exp(ad[static_cast<size_t>(base + k * inner)] - mx);
        out[static_cast<size_t>(base + k * inner)] = e;
        denom += e;
      }
      for (int64_t k = 0; k < n; ++k) out[static_cast<size_t>(base + k * inner)] /= denom;
    }

  Tensor res = detail::make_op_result(s, std::move(out), {a});
  if (res.requires_grad()) {
    auto rn = res.node().get();
    auto an = a.node();
    res.node()->backward_fn = [rn, an, outer, inner, n]() {
      if (!an->requires_grad) return;
      an->ensure_grad();
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t in = 0; in < inner; ++in) {
          int64_t base = o * n * inner + in;
          Real dot = 0.0;
          for (int64_t k = 0; k < n; ++k) {
            size_t idx = static_cast<size_t>(base + k * inner);
            dot += rn->grad[idx] * rn->data[idx];
          }
          for (int64_t k = 0; k < n; ++k) {
            size_t idx = static_cast<size_t>(base + k * inner);
            an->grad[idx] += rn->data[idx] * (rn->grad[idx] - dot);
          }
        }
    };
  }
  return res;
}

// Normalize over the last dimension, then apply gamma/beta.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         Real eps = 1e-5) {
  const Shape& s = x.shape();
  int64_t D = s.back();
  if (gamma.numel() != D || beta.numel() != D)
    throw std::invalid_argument("layer_norm: affine dims " +
                                shape_str(gamma.shape()) + "/" +
                                shape_str(beta.shape()) + " do not match D=" +
                                std::to_string(D));
  int64_t rows = x.numel() / D;
  std::vector<Real> out(x.data().size());
  std::vector<Real> rstd(static_cast<size_t>(rows));
  std::vector<Real> xhat(x.data().size());
  const auto& xd = x.data();
  for (int64_t r = 0; r < rows; ++r) {
    const Real* px = xd.data() + r * D;
    Real mean = 0.0;
    for (int64_t j = 0; j < D; ++j) mean += px[j];
    mean /= static_cast<Real>(D);
    Real var = 0.0;
    for (int64_t j = 0; j < D; ++j) {
      Real d = px[j] - mean;
      var += d * d;
    }
    var /= static_cast<Real>(D);
    Real rs = 1.0 / std::sqrt(var + eps);
    rstd[static_cast<size_t>(r)] = rs;
    for (int64_t j = 0; j < D; ++j) {
      Real h = (px[j] - mean) * rs;
      xhat[static_cast<size_t>(r * D + j)] = h;
      out[static_cast<size_t>(r * D + j)] =
          gamma.data()[static_cast<size_t>(j)] * h + beta.data()[static_cast<size_t>(j)];
    }
  }
  Tensor res = detail::make_op_result(s, std::move(out), {x, gamma, beta});
  if (res.requires_grad()) {
    auto rn = res.node().get();
    auto xn = x.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    res.node()->backward_fn = [rn, xn, gn, bn, rows, D, rstd, xhat]() {
      for (int64_t r = 0; r < rows; ++r) {
        const Real* go = rn->grad.data() + r * D;
        const Real* xh = xhat.data() + r * D;
        if (gn->requires_grad) {
          gn->ensure_grad();
          for (int64_t j = 0; j < D; ++j) gn->grad[static_cast<size_t>(j)] += go[j] * xh[j];
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (int64_t j = 0; j < D; ++j) bn->grad[static_cast<size_t>(j)] += go[j];
        }
        if (xn->requires_grad) {
          xn->ensure_grad();
          Real m1 = 0.0, m2 = 0.0;
          for (int64_t j = 0; j < D; ++j) {
            Real gg = go[j] * gn->data[static_cast<size_t>(j)];
            m1 += gg;
            m2 += gg * xh[j];
          }
          m1 /= static_cast<Real>(D);
          m2 /= static_cast<Real>(D);
          Real rs = rstd[static_cast<size_t>(r)];
          Real* gx = xn->grad.data() + r * D;
          for (int64_t j = 0; j < D; ++j) {
            Real gg = go[j] * gn->data[static_cast<size_t>(j)];
            gx[j] += rs * (gg - m1 - xh[j] * m2);
          }
        }
      }
    };
  }
  return res;
}

// ---------------------------------------------------------------------------
// Conv1d over time: x [T, D_in], kernel [W, D_in, D_out], bias [D_out]
// ---------------------------------------------------------------------------

inline int64_t conv1d_out_len(int64_t T, int64_t width, int64_t stride,
                              int64_t padding) {
  return (T + 2 * padding - width) / stride + 1;
}

inline Tensor conv1d(const Tensor& x, const Tensor& kernel, const Tensor& bias,
                     int64_t stride, int64_t padding) {
  if (x.ndim() != 2 || kernel.ndim() != 3)
    throw std::invalid_argument("conv1d: expected x [T,Din], kernel [W,Din,Dout], got " +
                                shape_str(x.shape()) + " and " + shape_str(kernel.shape()));
  int64_t T = x.dim(0), Din = x.dim(1);
  int64_t W = kernel.dim(0), KDin = kernel.dim(1), Dout = kernel.dim(2);
  if (Din != KDin)
    throw std::invalid_argument("conv1d: channel mismatch " + shape_str(x.shape()) +
                                " vs " + shape_str(kernel.shape()));
  if (stride < 1) throw std::invalid_argument("conv1d: stride must be >= 1");
  if (W < 1 || W > T + 2 * padding)
    throw std::invalid_argument("conv1d: kernel width " + std::to_string(W) +
                                " invalid for padded length " +
                                std::to_string(T + 2 * padding));
  bool use_bias = bias.defined();
  if (use_bias && bias.numel() != Dout)
    throw std::invalid_argument("conv1d: bias size mismatch");
  int64_t To = conv1d_out_len(T, W, stride, padding);

  std::vector<Real> out(static_cast<size_t>(To * Dout), 0.0);
  const Real* xd = x.data().data();
  const Real* kd = kernel.data().data();
  for (int64_t t = 0; t < To; ++t) {
    Real* orow = out.data() + t * Dout;
    if (use_bias)
      for (int64_t o = 0; o < Dout; ++o) orow[o] = bias.data()[static_cast<size_t>(o)];
    for (int64_t w = 0; w < W; ++w) {
      int64_t ti = t * stride + w - padding;
      if (ti < 0 || ti >= T) continue;
      const Real* xrow = xd + ti * Din;
      const Real* kslab = kd + w * Din * Dout;
      for (int64_t i = 0; i < Din; ++i) {
        Real xv = xrow[i];
        if (xv == 0.0) continue;
        const Real* krow = kslab + i * Dout;
        for (int64_t o = 0; o < Dout; ++o) orow[o] += xv * krow[o];
      }
    }
  }

  std::vector<Tensor> parents = use_bias ? std::vector<Tensor>{x, kernel, bias}
                                         : std::vector<Tensor>{x, kernel};
  Tensor res = detail::make_op_result({To, Dout}, std::move(out), parents);
  if (res.requires_grad()) {
    auto rn = res.node().get();
    auto xn = x.node();
    auto kn = kernel.node();
    auto bnode = use_bias ? bias.node() : nullptr;
    res.node()->backward_fn = [rn, xn, kn, bnode, T, Din, W, Dout, To, stride,
                               padding]() {
      const Real* gd = rn->grad.data();
      if (bnode && bnode->requires_grad) {
        bnode->ensure_grad();
        for (int64_t t = 0; t < To; ++t)
          for (int64_t o = 0; o < Dout; ++o)
            bnode->grad[static_cast<size_t>(o)] += gd[t * Dout + o];
      }
      if (kn->requires_grad) {
        kn->ensure_grad();
        for (int64_t t = 0; t < To; ++t)
          for (int64_t w = 0; w < W; ++w) {
            int64_t ti = t * stride + w - padding;
            if (ti < 0 || ti >= T) continue;
            const Real* xrow = xn->data.data() + ti * Din;
            const Real* grow = gd + t * Dout;
            Real* kslab = kn->grad.data() + w * Din * Dout;
            for (int64_t i = 0; i < Din; ++i) {
              Real xv = xrow[i];
              if (xv == 0.0) continue;
              Real* krow = kslab + i * Dout;
              for (int64_t o = 0; o < Dout; ++o) krow[o] += xv * grow[o];
            }
          }
      }
      if (xn->requires_grad) {
        xn->ensure_grad();
        for (int64_t t = 0; t < To; ++t)
          for (int64_t w = 0; w < W; ++w) {
            int64_t ti = t * stride + w - padding;
            if (ti < 0 || ti >= T) continue;
            Real* xrow = xn->grad.data() + ti * Din;
            const Real* grow = gd + t * Dout;
            const Real* kslab = kn->data.data() + w * Din * Dout;
            for (int64_t i = 0; i < Din; ++i) {
              const Real* krow = kslab + i * Dout;
              Real acc = 0.0;
              for (int64_t o = 0; o < Dout; ++o) acc += krow[o] * grow[o];
              xrow[i] += acc;
            }
          }
      }
    };
  }
  return res;
}

// ---------------------------------------------------------------------------
// Cross entropy
// ---------------------------------------------------------------------------

// Mean of -log P(target) over unmasked positions (mask true = contributes).
// All positions masked is well defined: zero loss, zero gradient; the
// optional flag reports it so callers can warn.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                            const std::vector<bool>& mask,
                            bool* all_masked_flag = nullptr) {
  if (logits.ndim() != 2)
    throw std::invalid_argument("cross_entropy: logits must be [L,V], got " +
                                shape_str(logits.shape()));
  int64_t L = logits.dim(0), V = logits.dim(1);
  if (static_cast<int64_t>(targets.size()) != L ||
      static_cast<int64_t>(mask.size()) != L)
    throw std::invalid_argument("cross_entropy: targets/mask length must equal L=" +
                                std::to_string(L));
  int64_t active = 0;
  for (int64_t l = 0; l < L; ++l) {
    if (!mask[static_cast<size_t>(l)]) continue;
    if (targets[static_cast<size_t>(l)] < 0 || targets[static_cast<size_t>(l)] >= V)
      throw std::invalid_argument("cross_entropy: target id " +
                                  std::to_string(targets[static_cast<size_t>(l)]) +
                                  " outside vocabulary of size " + std::to_string(V));
    ++active;
  }
  if (all_masked_flag) *all_masked_flag = (active == 0);

  const auto& ld = logits.data();
  auto probs = std::make_shared<std::vector<Real>>(ld.size(), 0.0);
  Real loss = 0.0;
  for (int64_t l = 0; l < L; ++l) {
    if (!mask[static_cast<size_t>(l)]) continue;
    const Real* row = ld.data() + l * V;
    Real mx = row[0];
    for (int64_t v = 1; v < V; ++v) mx = std::max(mx, row[v]);
    Real denom = 0.0;
    for (int64_t v = 0; v < V; ++v) denom += std::exp(row[v] - mx);
    Real log_denom = std::log(denom) + mx;
    loss += log_denom - row[targets[static_cast<size_t>(l)]];
    Real* prow = probs->data() + l * V;
    for (int64_t v = 0; v < V; ++v) prow[v] = std::exp(row[v] - log_denom);
  }
  if (active > 0) loss /= static_cast<Real>(active);

  Tensor res = detail::make_op_result({}, {loss}, {logits});
  if (res.requires_grad()) {
    auto rn = res.node().get();
    auto ln = logits.node();
    res.node()->backward_fn = [rn, ln, probs, targets, mask, L, V, active]() {
      if (!ln->requires_grad || active == 0) return;
      ln->ensure_grad();
      Real g = rn->grad[0] / static_cast<Real>(active);
      for (int64_t l = 0; l < L; ++l) {
        if (!mask[static_cast<size_t>(l)]) continue;
        const Real* prow = probs->data() + l * V;
        Real* grow = ln->grad.data() + l * V;
        for (int64_t v = 0; v < V; ++v) grow[v] += g * prow[v];
        grow[targets[static_cast<size_t>(l)]] -= g;
      }
    };
  }
  return res;
}

// Row gather with scatter-add gradient into the table.
inline Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
  if (table.ndim() != 2)
    throw std::invalid_argument("embedding: table must be [V,D]");
  int64_t V = table.dim(0), D = table.dim(1);
  int64_t L = static_cast<int64_t>(ids.size());
  std::vector<Real> out(static_cast<size_t>(L * D));
  for (int64_t l = 0; l < L; ++l) {
    int id = ids[static_cast<size_t>(l)];
    if (id < 0 || id >= V)
      throw std::invalid_argument("embedding: id " + std::to_string(id) +
                                  " outside table of size " + std::to_string(V));
    std::copy_n(table.data().data() + static_cast<int64_t>(id) * D, D,
                out.data() + l * D);
  }
  Tensor res = detail::make_op_result({L, D}, std::move(out), {table});
  if (res.requires_grad()) {
    auto rn = res.node().get();
    auto tn = table.node();
    res.node()->backward_fn = [rn, tn, ids, D]() {
      if (!tn->requires_grad) return;
      tn->ensure_grad();
      for (size_t l = 0; l < ids.size(); ++l) {
        const Real* src = rn->grad.data() + static_cast<int64_t>(l) * D;
        Real* dst = tn->grad.data() + static_cast<int64_t>(ids[l]) * D;
        for (int64_t j = 0; j < D; ++j) dst[j] += src[j];
      }
    };
  }
  return res;
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

inline void Tensor::backward() const {
  if (!node_ || numel() != 1)
    throw std::invalid_argument("backward: loss must be a defined scalar tensor");
  // Iterative DFS postorder; parents visited in stored order, so the
  // accumulation order is a pure function of graph structure.
  std::vector<detail::TensorNode*> order;
  std::unordered_set<detail::TensorNode*> visited;
  struct Frame {
    detail::TensorNode* n;
    size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({node_.get(), 0});
  visited.insert(node_.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.n->parents.size()) {
      detail::TensorNode* p = f.n->parents[f.next_parent++].get();
      if (visited.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }
  for (auto* n : order)
    if (n->requires_grad) n->grad.assign(n->data.size(), 0.0);
  node_->ensure_grad();
  node_->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward_fn) (*it)->backward_fn();
}

// Operator sugar.
inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

}  // namespace tsasr
