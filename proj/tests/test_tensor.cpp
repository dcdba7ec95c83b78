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

#include <catch2/catch_amalgamated.hpp>

#include "oracles.hpp"
#include "tsasr/gradcheck.hpp"
#include "tsasr/tensor.hpp"

using namespace tsasr;

namespace {

constexpr Real kFdTol = 1e-4;
constexpr Real kFdEps = 1e-5;

}  // namespace

TEST_CASE("matmul identity and hand cases") {
  Rng rng(7);
  Tensor a = Tensor::randn({3, 3}, rng);
  std::vector<Real> eye = {1, 0, 0, 0, 1, 0, 0, 0, 1};
  Tensor i3 = Tensor::from({3, 3}, eye);
  Tensor prod = matmul(i3, a);
  for (int64_t i = 0; i < 9; ++i)
    REQUIRE(prod.data()[i] == Catch::Approx(a.data()[i]).margin(0));

  Tensor m = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor v = Tensor::from({2, 1}, {1, 1});
  Tensor r = matmul(m, v);
  REQUIRE(r.data()[0] == 3.0);
  REQUIRE(r.data()[1] == 7.0);
}

TEST_CASE("matmul rejects mismatched shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 2});
  REQUIRE_THROWS_WITH(matmul(a, b),
                      Catch::Matchers::ContainsSubstring("[2, 3]") &&
                          Catch::Matchers::ContainsSubstring("[4, 2]"));
}

TEST_CASE("matmul gradient matches central differences") {
  for (uint64_t seed : {1u, 2u, 3u}) {
    Rng rng(seed);
    Tensor a0 = Tensor::randn({5, 4}, rng);
    Tensor b0 = Tensor::randn({4, 3}, rng);
    Rng wrng = rng.fork(99);
    Tensor w = Tensor::rand_uniform({5, 3}, wrng, -1.0, 1.0);

    Real err_a = finite_difference_check(
        [&](const Tensor& x) { return sum_all(mul(matmul(x, b0), w)); }, a0, kFdEps);
    Real err_b = finite_difference_check(
        [&](const Tensor& x) { return sum_all(mul(matmul(a0, x), w)); }, b0, kFdEps);
    REQUIRE(err_a <= kFdTol);
    REQUIRE(err_b <= kFdTol);
  }
}

TEST_CASE("softmax symmetry, stabilization, and normalization") {
  Tensor t = softmax(Tensor::from({2}, {0, 0}), 0);
  REQUIRE(t.data()[0] == Catch::Approx(0.5).margin(1e-12));
  REQUIRE(t.data()[1] == Catch::Approx(0.5).margin(1e-12));

  Tensor big = softmax(Tensor::from({2}, {1000, 1000}), 0);
  REQUIRE(std::isfinite(big.data()[0]));
  REQUIRE(big.data()[0] == Catch::Approx(0.5).margin(1e-12));

  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = Tensor::randn({4, 6}, rng, 3.0);
    for (int axis : {0, 1}) {
      Tensor y = softmax(x, axis);
      for (Real v : y.data()) REQUIRE(v > 0.0);
      int64_t n = y.dim(axis);
      int64_t outer = (axis == 0) ? 1 : y.dim(0);
      int64_t inner = (axis == 0) ? y.dim(1) : 1;
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t in = 0; in < inner; ++in) {
          Real s = 0.0;
          for (int64_t k = 0; k < n; ++k)
            s += y.data()[static_cast<size_t>(
                axis == 0 ? k * y.dim(1) + in : o * y.dim(1) + k)];
          REQUIRE(std::fabs(s - 1.0) <= 1e-9);
        }
    }
  }
}

TEST_CASE("softmax gradient matches central differences") {
  for (uint64_t seed : {4u, 5u, 6u}) {
    Rng rng(seed);
    Tensor x = Tensor::randn({7}, rng);
    Rng wrng = rng.fork(1);
    Tensor w = Tensor::rand_uniform({7}, wrng, -1.0, 1.0);
    Real err = finite_difference_check(
        [&](const Tensor& t) { return sum_all(mul(softmax(t, 0), w)); }, x, kFdEps);
    REQUIRE(err <= kFdTol);
  }
}

TEST_CASE("layer_norm constant rows and affine passthrough") {
  Tensor x = Tensor::full({2, 5}, 3.7);
  Tensor gamma = Tensor::ones({5});
  Tensor beta = Tensor::zeros({5});
  Tensor y = layer_norm(x, gamma, beta);
  for (Real v : y.data()) REQUIRE(std::fabs(v) < 1e-6);

  Tensor gz = Tensor::zeros({5});
  Tensor bc = Tensor::full({5}, -2.5);
  Rng rng(3);
  Tensor xr = Tensor::randn({3, 5}, rng);
  Tensor yc = layer_norm(xr, gz, bc);
  for (Real v : yc.data()) REQUIRE(v == Catch::Approx(-2.5).margin(1e-12));
}

TEST_CASE("layer_norm gradients match central differences") {
  for (uint64_t seed : {10u, 11u, 12u}) {
    Rng rng(seed);
    Tensor x0 = Tensor::randn({4, 6}, rng);
    Tensor g0 = Tensor::rand_uniform({6}, rng, 0.5, 1.5);
    Tensor b0 = Tensor::randn({6}, rng);
    Rng wrng = rng.fork(2);
    Tensor w = Tensor::rand_uniform({4, 6}, wrng, -1.0, 1.0);

    auto loss_x = [&](const Tensor& t) { return sum_all(mul(layer_norm(t, g0, b0), w)); };
    auto loss_g = [&](const Tensor& t) { return sum_all(mul(layer_norm(x0, t, b0), w)); };
    auto loss_b = [&](const Tensor& t) { return sum_all(mul(layer_norm(x0, g0, t), w)); };
    REQUIRE(finite_difference_check(loss_x, x0, kFdEps) <= kFdTol);
    REQUIRE(finite_difference_check(loss_g, g0, kFdEps) <= kFdTol);
    REQUIRE(finite_difference_check(loss_b, b0, kFdEps) <= kFdTol);
  }
}

TEST_CASE("gelu matches erf oracle and asymptotes") {
  REQUIRE(gelu(Tensor::scalar(0.0)).value() == 0.0);
  REQUIRE(gelu(Tensor::scalar(50.0)).value() == Catch::Approx(50.0).margin(1e-9));
  REQUIRE(std::fabs(gelu(Tensor::scalar(-50.0)).value()) < 1e-9);

  double expected =
      0.5 * 1.0 * (1.0 + (double)oracle::erf_series(1.0L / std::sqrt(2.0L)));
  REQUIRE(gelu(Tensor::scalar(1.0)).value() == Catch::Approx(expected).margin(1e-10));

  for (uint64_t seed : {21u, 22u, 23u}) {
    Rng rng(seed);
    Tensor x = Tensor::randn({9}, rng);
    Real err = finite_difference_check(
        [](const Tensor& t) { return sum_all(gelu(t)); }, x, kFdEps);
    REQUIRE(err <= kFdTol);
  }
}

TEST_CASE("conv1d identity kernel and output length") {
  // Width-1, stride-1 identity kernel leaves the input unchanged.
  Rng rng(5);
  Tensor x = Tensor::randn({10, 3}, rng);
  std::vector<Real> kd(9, 0.0);
  for (int i = 0; i < 3; ++i) kd[static_cast<size_t>(i * 3 + i)] = 1.0;
  Tensor k = Tensor::from({1, 3, 3}, kd);
  Tensor y = conv1d(x, k, Tensor(), 1, 0);
  REQUIRE(y.shape() == Shape{10, 3});
  for (size_t i = 0; i < x.data().size(); ++i) REQUIRE(y.data()[i] == x.data()[i]);

  Tensor x2 = Tensor::zeros({100, 2});
  Tensor k2 = Tensor::zeros({3, 2, 4});
  Tensor y2 = conv1d(x2, k2, Tensor(), 2, 1);
  REQUIRE(y2.dim(0) == 50);
  REQUIRE(y2.dim(1) == 4);

  REQUIRE_THROWS_AS(conv1d(x2, k2, Tensor(), 0, 1), std::invalid_argument);
  REQUIRE_THROWS_AS(conv1d(Tensor::zeros({2, 2}), Tensor::zeros({7, 2, 4}), Tensor(), 1, 1),
                    std::invalid_argument);
}

TEST_CASE("conv1d gradients match central differences") {
  for (uint64_t seed : {31u, 32u, 33u}) {
    Rng rng(seed);
    Tensor x0 = Tensor::randn({8, 3}, rng);
    Tensor k0 = Tensor::randn({3, 3, 2}, rng, 0.5);
    Tensor b0 = Tensor::randn({2}, rng, 0.5);
    Rng wrng = rng.fork(3);
    Tensor w = Tensor::rand_uniform({4, 2}, wrng, -1.0, 1.0);  // T'= (8+2-3)/2+1 = 4

    auto loss_x = [&](const Tensor& t) {
      return sum_all(mul(conv1d(t, k0, b0, 2, 1), w));
    };
    auto loss_k = [&](const Tensor& t) {
      return sum_all(mul(conv1d(x0, t, b0, 2, 1), w));
    };
    auto loss_b = [&](const Tensor& t) {
      return sum_all(mul(conv1d(x0, k0, t, 2, 1), w));
    };
    REQUIRE(finite_difference_check(loss_x, x0, kFdEps) <= kFdTol);
    REQUIRE(finite_difference_check(loss_k, k0, kFdEps) <= kFdTol);
    REQUIRE(finite_difference_check(loss_b, b0, kFdEps) <= kFdTol);
  }
}

TEST_CASE("cross_entropy closed forms and oracle") {
  // Uniform logits over V=10.
  Tensor logits = Tensor::zeros({3, 10});
  Tensor loss = cross_entropy(logits, {1, 5, 9}, {true, true, true});
  REQUIRE(loss.value() == Catch::Approx(std::log(10.0)).margin(1e-12));

  // One-hot-correct logits: loss vanishes as the margin grows.
  Real prev = 1e9;
  for (Real margin : {2.0, 10.0, 25.0}) {
    std::vector<Real> d(10, 0.0);
    d[4] = margin;
    Tensor row = Tensor::from({1, 10}, d);
    Real l = cross_entropy(row, {4}, {true}).value();
    REQUIRE(l < prev);
    prev = l;
  }
  REQUIRE(prev < 1e-8);

  // Random logits against direct summation.
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    int64_t V = 12;
    Tensor lg = Tensor::randn({4, V}, rng, 2.0);
    std::vector<int> tgt;
    std::vector<bool> m(4, true);
    for (int i = 0; i < 4; ++i) tgt.push_back((int)rng.uniform_int(0, V - 1));
    Real got = cross_entropy(lg, tgt, m).value();
    double want = 0.0;
    for (int i = 0; i < 4; ++i) {
      std::vector<double> row(lg.data().begin() + i * V, lg.data().begin() + (i + 1) * V);
      want += oracle::cross_entropy_row(row, tgt[(size_t)i]);
    }
    want /= 4.0;
    REQUIRE(got == Catch::Approx(want).epsilon(1e-10));
  }
}

TEST_CASE("cross_entropy all-masked is zero loss and zero gradient") {
  Rng rng(23);
  Tensor logits = Tensor::randn({3, 6}, rng, 1.0, true);
  bool flag = false;
  Tensor loss = cross_entropy(logits, {0, 1, 2}, {false, false, false}, &flag);
  REQUIRE(flag);
  REQUIRE(loss.value() == 0.0);
  loss.backward();
  for (Real g : logits.grad_or_zeros()) REQUIRE(g == 0.0);
}

TEST_CASE("cross_entropy masked positions receive no gradient") {
  Rng rng(29);
  Tensor logits = Tensor::randn({4, 6}, rng, 1.0, true);
  Tensor loss = cross_entropy(logits, {0, 1, 2, 3}, {true, false, true, false});
  loss.backward();
  auto g = logits.grad_or_zeros();
  for (int v = 0; v < 6; ++v) {
    REQUIRE(g[static_cast<size_t>(6 + v)] == 0.0);
    REQUIRE(g[static_cast<size_t>(18 + v)] == 0.0);
  }
  bool any = false;
  for (int v = 0; v < 6; ++v) any = any || g[static_cast<size_t>(v)] != 0.0;
  REQUIRE(any);
}

TEST_CASE("cross_entropy gradient matches central differences") {
  for (uint64_t seed : {41u, 42u, 43u}) {
    Rng rng(seed);
    Tensor lg = Tensor::randn({5, 7}, rng);
    std::vector<int> tgt;
    for (int i = 0; i < 5; ++i) tgt.push_back((int)rng.uniform_int(0, 6));
    std::vector<bool> m = {true, true, false, true, true};
    Real err = finite_difference_check(
        [&](const Tensor& t) { return cross_entropy(t, tgt, m); }, lg, kFdEps);
    REQUIRE(err <= kFdTol);
  }
}

TEST_CASE("backward basics") {
  Tensor x = Tensor::from({3}, {1, 2, 3}, true);
  Tensor loss = sum_all(x);
  loss.backward();
  for (Real g : x.grad_or_zeros()) REQUIRE(g == 1.0);

  Tensor y = Tensor::from({2}, {1, 2}, true);
  Tensor l2 = sum_all(mul(y, y));
  l2.backward();
  REQUIRE(y.grad_or_zeros()[0] == Catch::Approx(2.0).margin(1e-12));
  REQUIRE(y.grad_or_zeros()[1] == Catch::Approx(4.0).margin(1e-12));

  REQUIRE_THROWS_AS(x.backward(), std::invalid_argument);  // non-scalar loss
}

TEST_CASE("backward is deterministic and clears stale gradients") {
  Rng rng(51);
  Tensor a = Tensor::randn({6, 6}, rng, 1.0, true);
  Tensor b = Tensor::randn({6, 6}, rng, 1.0, true);
  Tensor loss = sum_all(gelu(matmul(a, b)));
  loss.backward();
  auto ga1 = a.grad_or_zeros();
  auto gb1 = b.grad_or_zeros();
  loss.backward();
  REQUIRE(a.grad_or_zeros() == ga1);  // bit-identical, not merely close
  REQUIRE(b.grad_or_zeros() == gb1);
}

TEST_CASE("tensors off the loss path keep zero gradients") {
  Rng rng(53);
  Tensor a = Tensor::randn({4}, rng, 1.0, true);
  Tensor unused_leaf = Tensor::randn({4}, rng, 1.0, true);
  Tensor loss = sum_all(mul(a, a));
  loss.backward();
  for (Real g : unused_leaf.grad_or_zeros()) REQUIRE(g == 0.0);
}

TEST_CASE("parameter reused twice accumulates both contributions") {
  Tensor x = Tensor::from({2}, {3, 5}, true);
  // loss = sum(x) + sum(x*x): grad = 1 + 2x
  Tensor loss = add(sum_all(x), sum_all(mul(x, x)));
  loss.backward();
  REQUIRE(x.grad_or_zeros()[0] == Catch::Approx(7.0).margin(1e-12));
  REQUIRE(x.grad_or_zeros()[1] == Catch::Approx(11.0).margin(1e-12));
}

TEST_CASE("finite_difference_check reference behaviors") {
  Rng rng(61);
  Tensor x = Tensor::randn({5}, rng);
  Real err_sum = finite_difference_check(
      [](const Tensor& t) { return sum_all(t); }, x, kFdEps);
  REQUIRE(err_sum <= 1e-10);

  // Quadratic form: central differences are exact up to roundoff.
  Tensor q = Tensor::rand_uniform({5, 5}, rng, -1.0, 1.0);
  Real err_quad = finite_difference_check(
      [&](const Tensor& t) {
        Tensor col = reshape(t, {5, 1});
        return sum_all(mul(col, matmul(q, col)));
      },
      x, kFdEps);
  REQUIRE(err_quad <= 1e-8);
}

TEST_CASE("elementwise broadcast ops and their gradients") {
  for (uint64_t seed : {71u, 72u, 73u}) {
    Rng rng(seed);
    Tensor a0 = Tensor::randn({4, 3}, rng);
    Tensor v0 = Tensor::rand_uniform({3}, rng, 0.5, 2.0);  // broadcast over rows

    struct Case {
      const char* name;
      std::function<Tensor(const Tensor&, const Tensor&)> op;
    };
    std::vector<Case> cases = {
        {"add", [](const Tensor& a, const Tensor& b) { return add(a, b); }},
        {"sub", [](const Tensor& a, const Tensor& b) { return sub(a, b); }},
        {"mul", [](const Tensor& a, const Tensor& b) { return mul(a, b); }},
        {"div", [](const Tensor& a, const Tensor& b) { return div(a, b); }},
    };
    for (auto& c : cases) {
      INFO(c.name);
      Rng wrng = rng.fork(4);
      Tensor w = Tensor::rand_uniform({4, 3}, wrng, -1.0, 1.0);
      Real err_a = finite_difference_check(
          [&](const Tensor& t) { return sum_all(mul(c.op(t, v0), w)); }, a0, kFdEps);
      Real err_b = finite_difference_check(
          [&](const Tensor& t) { return sum_all(mul(c.op(a0, t), w)); }, v0, kFdEps);
      REQUIRE(err_a <= kFdTol);
      REQUIRE(err_b <= kFdTol);
    }
    REQUIRE_THROWS_AS(add(Tensor::zeros({4, 3}), Tensor::zeros({2})),
                      std::invalid_argument);
  }
}

TEST_CASE("structural ops gradients: concat, slice, reshape, transpose, tiles") {
  for (uint64_t seed : {81u, 82u, 83u}) {
    Rng rng(seed);
    Tensor a0 = Tensor::randn({3, 4}, rng);
    Tensor b0 = Tensor::randn({2, 4}, rng);
    Rng wrng = rng.fork(5);

    Tensor wc = Tensor::rand_uniform({5, 4}, wrng, -1.0, 1.0);
    Real err = finite_difference_check(
        [&](const Tensor& t) { return sum_all(mul(concat({t, b0}, 0), wc)); }, a0,
        kFdEps);
    REQUIRE(err <= kFdTol);

    Tensor ws = Tensor::rand_uniform({3, 2}, wrng, -1.0, 1.0);
    err = finite_difference_check(
        [&](const Tensor& t) { return sum_all(mul(slice(t, 1, 1, 3), ws)); }, a0,
        kFdEps);
    REQUIRE(err <= kFdTol);

    Tensor wr = Tensor::rand_uniform({12}, wrng, -1.0, 1.0);
    err = finite_difference_check(
        [&](const Tensor& t) { return sum_all(mul(reshape(t, {12}), wr)); }, a0,
        kFdEps);
    REQUIRE(err <= kFdTol);

    Tensor wt = Tensor::rand_uniform({4, 3}, wrng, -1.0, 1.0);
    err = finite_difference_check(
        [&](const Tensor& t) { return sum_all(mul(transpose2d(t), wt)); }, a0, kFdEps);
    REQUIRE(err <= kFdTol);

    Tensor v0 = Tensor::randn({4}, rng);
    Tensor wv = Tensor::rand_uniform({6, 4}, wrng, -1.0, 1.0);
    err = finite_difference_check(
        [&](const Tensor& t) { return sum_all(mul(tile_rows(t, 6), wv)); }, v0, kFdEps);
    REQUIRE(err <= kFdTol);

    Tensor wm = Tensor::rand_uniform({4}, wrng, -1.0, 1.0);
    err = finite_difference_check(
        [&](const Tensor& t) { return sum_all(mul(mean_rows(t), wm)); }, a0, kFdEps);
    REQUIRE(err <= kFdTol);

    err = finite_difference_check(
        [&](const Tensor& t) { return mean_all(mul(t, t)); }, a0, kFdEps);
    REQUIRE(err <= kFdTol);

    Tensor p0 = Tensor::rand_uniform({5}, rng, 0.1, 4.0);
    err = finite_difference_check(
        [&](const Tensor& t) { return sum_all(sqrt_elem(t)); }, p0, kFdEps);
    REQUIRE(err <= kFdTol);
  }
}

TEST_CASE("embedding gathers rows and scatters gradients") {
  Rng rng(91);
  Tensor table0 = Tensor::randn({6, 3}, rng);
  std::vector<int> ids = {1, 4, 1, 0};
  Tensor out = embedding(table0, ids);
  REQUIRE(out.shape() == Shape{4, 3});
  for (int j = 0; j < 3; ++j)
    REQUIRE(out.data()[static_cast<size_t>(j)] ==
            table0.data()[static_cast<size_t>(3 + j)]);

  Rng wrng(92);
  Tensor w = Tensor::rand_uniform({4, 3}, wrng, -1.0, 1.0);
  Real err = finite_difference_check(
      [&](const Tensor& t) { return sum_all(mul(embedding(t, ids), w)); }, table0,
      kFdEps);
  REQUIRE(err <= kFdTol);

  REQUIRE_THROWS_AS(embedding(table0, {7}), std::invalid_argument);
}

TEST_CASE("batched matmul broadcasting") {
  Rng rng(95);
  Tensor a = Tensor::randn({2, 3, 4}, rng);
  Tensor b = Tensor::randn({4, 5}, rng);
  Tensor c = matmul(a, b);
  REQUIRE(c.shape() == Shape{2, 3, 5});
  // Per-batch slices agree with plain 2-D products.
  for (int g = 0; g < 2; ++g) {
    Tensor ag = slice(a, 0, g, g + 1);
    Tensor cg = matmul(reshape(ag, {3, 4}), b);
    for (int i = 0; i < 15; ++i)
      REQUIRE(c.data()[static_cast<size_t>(g * 15 + i)] ==
              Catch::Approx(cg.data()[static_cast<size_t>(i)]).margin(1e-12));
  }

  Rng wrng(96);
  Tensor w = Tensor::rand_uniform({2, 3, 5}, wrng, -1.0, 1.0);
  Real err_a = finite_difference_check(
      [&](const Tensor& t) { return sum_all(mul(matmul(t, b), w)); }, a, kFdEps);
  Real err_b = finite_difference_check(
      [&](const Tensor& t) { return sum_all(mul(matmul(a, t), w)); }, b, kFdEps);
  REQUIRE(err_a <= kFdTol);
  REQUIRE(err_b <= kFdTol);
}
