// SPDX-License-Identifier: Apache-2.0
//
// Shared helpers for the unit tests: random tensors, a central-difference
// gradient checker and a tiny backbone configuration.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "reusevit/reusevit.hpp"

namespace rvtest {

using namespace reusevit;

template <class T = double>
Tensor<T> randn(std::mt19937_64& rng, Shape shape, double stddev = 1.0, bool requires_grad = false) {
  std::normal_distribution<double> n(0.0, stddev);
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(n(rng));
  return Tensor<T>(std::move(shape), std::move(v), requires_grad);
}

/// Largest relative error between tape gradients and central differences of
/// `loss()` with respect to every entry of `params`.
inline double max_grad_rel_error(const std::function<Tensor<double>()>& loss, std::vector<Tensor<double>*> params,
                                 double h = 1e-5) {
  for (auto* p : params) {
    p->set_requires_grad(true);
    p->zero_grad();
  }
  Tape<double> tape;
  Tensor<double> l;
  {
    TapeScope<double> scope(tape);
    l = loss();
  }
  tape.backward(l);
  double worst = 0.0;
  for (auto* p : params) {
    const auto g = p->grad();
    auto w = p->mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double w0 = w[i];
      w[i] = w0 + h;
      const double up = loss().item();
      w[i] = w0 - h;
      const double down = loss().item();
      w[i] = w0;
      const double fd = (up - down) / (2 * h);
      worst = std::max(worst, std::abs(fd - g[i]) / std::max({std::abs(fd), std::abs(g[i]), 1e-6}));
    }
  }
  return worst;
}

/// Weighted sum with fixed random weights, so every output entry carries a
/// distinct gradient.
inline Tensor<double> probe(const Tensor<double>& x, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  auto w = randn(rng, x.shape());
  return sum(mul(x, w));
}

inline ViTConfig tiny_config() {
  ViTConfig c;
  c.layers = 2;
  c.dim = 8;
  c.heads = 2;
  c.grid_rows = 2;
  c.grid_cols = 2;
  c.ffn_hidden = 16;
  c.patch_pixels = 6;
  return c;
}

inline double max_abs_diff(const Tensor<float>& a, const Tensor<float>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

}  // namespace rvtest
