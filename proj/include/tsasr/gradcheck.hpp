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

// Central-difference gradient checking. The numeric side only ever calls the
// supplied function on fresh input tensors, so it stays independent of the
// reverse-mode path it is used to validate.

#pragma once

#include <functional>

#include "tsasr/tensor.hpp"

namespace tsasr {

inline Real rel_err(Real analytic, Real numeric) {
  Real denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-8});
  return std::fabs(analytic - numeric) / denom;
}

// Max over coordinates of the relative error between the analytic gradient of
// f at x and central differences (f(x+eps) - f(x-eps)) / 2eps.
inline Real finite_difference_check(const std::function<Tensor(const Tensor&)>& f,
                                    const Tensor& x, Real eps = 1e-5) {
  Tensor leaf = Tensor::from(x.shape(), x.data(), true);
  Tensor loss = f(leaf);
  if (loss.numel() != 1)
    throw std::invalid_argument("finite_difference_check: f must be scalar-valued");
  loss.backward();
  std::vector<Real> analytic = leaf.grad_or_zeros();

  std::vector<Real> base = x.data();
  Real worst = 0.0;
  for (size_t i = 0; i < base.size(); ++i) {
    std::vector<Real> up = base, down = base;
    up[i] += eps;
    down[i] -= eps;
    Real fu = f(Tensor::from(x.shape(), up)).value();
    Real fd = f(Tensor::from(x.shape(), down)).value();
    Real numeric = (fu - fd) / (2.0 * eps);
    worst = std::max(worst, rel_err(analytic[i], numeric));
  }
  return worst;
}

// Same check for a set of shared leaf parameters: loss_fn() must rebuild the
// forward graph from the parameters' current data each call.
inline Real finite_difference_check_params(const std::function<Tensor()>& loss_fn,
                                           const std::vector<Tensor>& params,
                                           Real eps = 1e-5) {
  Tensor loss = loss_fn();
  if (loss.numel() != 1)
    throw std::invalid_argument("finite_difference_check_params: loss must be scalar");
  loss.backward();
  std::vector<std::vector<Real>> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) analytic.push_back(p.grad_or_zeros());

  Real worst = 0.0;
  for (size_t k = 0; k < params.size(); ++k) {
    Tensor p = params[k];
    if (!p.requires_grad()) continue;
    auto& d = p.data();
    for (size_t i = 0; i < d.size(); ++i) {
      Real keep = d[i];
      d[i] = keep + eps;
      Real fu = loss_fn().value();
      d[i] = keep - eps;
      Real fd = loss_fn().value();
      d[i] = keep;
      Real numeric = (fu - fd) / (2.0 * eps);
      worst = std::max(worst, rel_err(analytic[k][i], numeric));
    }
  }
  return worst;
}

}  // namespace tsasr
