// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include "support.hpp"

using namespace reusevit;
using namespace rvtest;
using Catch::Approx;

namespace {

// Textbook triple loop.
std::vector<double> naive_matmul(const Tensor<double>& a, const Tensor<double>& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) c[i * n + j] += a.at(i, p) * b.at(p, j);
  return c;
}

}  // namespace

TEST_CASE("matmul matches a triple loop", "[numeric]") {
  std::mt19937_64 rng(1);
  for (auto [m, k, n] : {std::tuple{1, 1, 1}, {3, 5, 2}, {17, 64, 192}, {7, 1, 9}}) {
    auto a = randn(rng, {std::size_t(m), std::size_t(k)});
    auto b = randn(rng, {std::size_t(k), std::size_t(n)});
    auto c = matmul(a, b);
    auto ref = naive_matmul(a, b);
    REQUIRE(c.shape() == Shape{std::size_t(m), std::size_t(n)});
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(c[i] == Approx(ref[i]).margin(1e-12));
  }
}

TEST_CASE("matmul rejects mismatched inner dimensions", "[numeric]") {
  auto a = Tensor<float>::zeros({2, 3});
  auto b = Tensor<float>::zeros({4, 2});
  REQUIRE_THROWS_AS(matmul(a, b), ShapeError);
  try {
    matmul(a, b);
  } catch (const Error& e) {
    CHECK(e.code() == "E_SHAPE");
  }
}

TEST_CASE("tensor construction validates shape", "[numeric]") {
  REQUIRE_THROWS_AS(Tensor<float>({2, 2}, {1, 2, 3}), ShapeError);
  REQUIRE_THROWS_AS(Tensor<float>({1, 2, 3}, std::vector<float>(6)), ShapeError);
  REQUIRE_THROWS_AS(Tensor<float>::zeros({2, 2}).item(), ShapeError);
  auto t = Tensor<float>::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  CHECK(t.at(1, 2) == 6.0f);
  CHECK(t.reshape({3, 2}).at(2, 1) == 6.0f);
  REQUIRE_THROWS_AS(t.reshape({4}), ShapeError);
}

TEST_CASE("row movement ops", "[numeric]") {
  auto x = Tensor<double>::matrix(3, 2, {0, 1, 10, 11, 20, 21});
  auto g = gather_rows(x, {2, 0, 2});
  CHECK(std::vector<double>(g.data().begin(), g.data().end()) == std::vector<double>{20, 21, 0, 1, 20, 21});
  REQUIRE_THROWS_AS(gather_rows(x, {3}), IndexError);
  auto s = scatter_rows(x, {1}, Tensor<double>::matrix(1, 2, {-1, -2}));
  CHECK(s.at(1, 0) == -1);
  CHECK(s.at(0, 1) == 1);
  REQUIRE_THROWS_AS(scatter_rows(x, {1, 1}, Tensor<double>::zeros({2, 2})), ContractError);
  auto c = concat_rows<double>({x, Tensor<double>::zeros({0, 2}), g});
  CHECK(c.rows() == 6);
  auto cc = concat_cols<double>({x, Tensor<double>::vector({7, 8, 9})});
  CHECK(cc.cols() == 3);
  CHECK(cc.at(2, 2) == 9);
}

TEST_CASE("softmax rows sum to one and layernorm normalises", "[numeric]") {
  std::mt19937_64 rng(2);
  auto x = randn(rng, {5, 7}, 3.0);
  auto p = softmax_rows(x);
  for (std::size_t i = 0; i < 5; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < 7; ++j) s += p.at(i, j);
    CHECK(s == Approx(1.0).margin(1e-12));
  }
  auto y = layernorm(x, Tensor<double>::full({7}, 1.0), Tensor<double>::zeros({7}), 0.0);
  for (std::size_t i = 0; i < 5; ++i) {
    double mu = 0, var = 0;
    for (std::size_t j = 0; j < 7; ++j) mu += y.at(i, j) / 7;
    for (std::size_t j = 0; j < 7; ++j) var += (y.at(i, j) - mu) * (y.at(i, j) - mu) / 7;
    CHECK(mu == Approx(0.0).margin(1e-12));
    CHECK(var == Approx(1.0).margin(1e-9));
  }
}

TEST_CASE("cosine helpers agree with direct formulas", "[numeric]") {
  std::mt19937_64 rng(3);
  auto a = randn(rng, {4, 6}), b = randn(rng, {4, 6});
  auto rc = row_cosine(a, b);
  for (std::size_t i = 0; i < 4; ++i) {
    double dot = 0, na = 0, nb = 0;
    for (std::size_t j = 0; j < 6; ++j) {
      dot += a.at(i, j) * b.at(i, j);
      na += a.at(i, j) * a.at(i, j);
      nb += b.at(i, j) * b.at(i, j);
    }
    CHECK(rc[i] == Approx(dot / std::sqrt(na * nb)).margin(1e-12));
  }
  CHECK(cosine_similarity(a, a).item() == Approx(1.0).margin(1e-12));
}

TEST_CASE("gradients of every op match central differences", "[numeric][grad]") {
  std::mt19937_64 rng(4);
  auto a = randn(rng, {3, 4}), b = randn(rng, {4, 5}), c = randn(rng, {3, 4}), bias = randn(rng, {5});
  auto gam = randn(rng, {4}), bet = randn(rng, {4}), s = randn(rng, {3});

  SECTION("matmul / linear") {
    CHECK(max_grad_rel_error([&] { return probe(linear(a, b, bias)); }, {&a, &b, &bias}) < 1e-6);
  }
  SECTION("elementwise") {
    CHECK(max_grad_rel_error([&] { return probe(add(mul(a, c), sub(a, affine(c, 0.5, 2.0)))); }, {&a, &c}) < 1e-6);
    CHECK(max_grad_rel_error([&] { return probe(scale(maximum(a, c), 3.0)); }, {&a, &c}) < 1e-6);
    CHECK(max_grad_rel_error([&] { return probe(row_scale(a, s)); }, {&a, &s}) < 1e-6);
  }
  SECTION("nonlinearities") {
    CHECK(max_grad_rel_error([&] { return probe(gelu(a)); }, {&a}) < 1e-6);
    CHECK(max_grad_rel_error([&] { return probe(sigmoid(a)); }, {&a}) < 1e-6);
    CHECK(max_grad_rel_error([&] { return probe(relu(a)); }, {&a}) < 1e-6);
  }
  SECTION("reductions and normalisation") {
    CHECK(max_grad_rel_error([&] { return mean(mul(a, a)); }, {&a}) < 1e-6);
    CHECK(max_grad_rel_error([&] { return probe(layernorm(a, gam, bet)); }, {&a, &gam, &bet}) < 1e-5);
    CHECK(max_grad_rel_error([&] { return probe(softmax_rows(a)); }, {&a}) < 1e-6);
    CHECK(max_grad_rel_error([&] { return probe(row_cosine(a, c)); }, {&a, &c}) < 1e-6);
    CHECK(max_grad_rel_error([&] { return cosine_similarity(a, c); }, {&a, &c}) < 1e-6);
  }
  SECTION("row movement") {
    CHECK(max_grad_rel_error([&] { return probe(gather_rows(a, {2, 0, 2})); }, {&a}) < 1e-6);
    auto src = randn(rng, {2, 4});
    CHECK(max_grad_rel_error([&] { return probe(scatter_rows(a, {2, 0}, src)); }, {&a, &src}) < 1e-6);
    CHECK(max_grad_rel_error([&] { return probe(concat_rows<double>({a, c})); }, {&a, &c}) < 1e-6);
    CHECK(max_grad_rel_error([&] { return probe(concat_cols<double>({a, c})); }, {&a, &c}) < 1e-6);
    CHECK(max_grad_rel_error([&] { return probe(reshape_keep_grad(a, {12})); }, {&a}) < 1e-6);
  }
  SECTION("attention including the CLS importance output") {
    auto qkv = randn(rng, {5, 12});
    CHECK(max_grad_rel_error(
              [&] {
                auto r = attention(qkv, 2);
                return add(probe(r.out), probe(r.cls_attention, 7));
              },
              {&qkv}) < 1e-6);
  }
}

TEST_CASE("attention matches a per-head reference", "[numeric]") {
  std::mt19937_64 rng(5);
  const std::size_t n = 4, d = 6, heads = 2, dh = 3;
  auto qkv = randn(rng, {n, 3 * d});
  auto r = attention(qkv, heads);
  std::vector<double> cls(n - 1, 0.0);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> w(n);
      double z = 0;
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0;
        for (std::size_t t = 0; t < dh; ++t) s += qkv.at(i, h * dh + t) * qkv.at(j, d + h * dh + t);
        w[j] = std::exp(s / std::sqrt(double(dh)));
        z += w[j];
      }
      for (std::size_t t = 0; t < dh; ++t) {
        double o = 0;
        for (std::size_t j = 0; j < n; ++j) o += w[j] / z * qkv.at(j, 2 * d + h * dh + t);
        CHECK(r.out.at(i, h * dh + t) == Approx(o).margin(1e-12));
      }
      if (i == 0)
        for (std::size_t j = 1; j < n; ++j) cls[j - 1] += w[j] / z / heads;
    }
  for (std::size_t j = 0; j + 1 < n; ++j) CHECK(r.cls_attention[j] == Approx(cls[j]).margin(1e-12));
}

TEST_CASE("tape replays each adjoint once and accumulates shared inputs", "[numeric][grad]") {
  auto x = Tensor<double>::vector({2.0});
  x.set_requires_grad(true);
  Tape<double> tape;
  Tensor<double> y;
  {
    TapeScope<double> scope(tape);
    y = sum(add(mul(x, x), x));  // x^2 + x
  }
  tape.backward(y);
  CHECK(x.grad()[0] == Approx(5.0));
  CHECK(tape.size() == 0);
  REQUIRE_THROWS_AS(tape.backward(Tensor<double>::vector({1, 2})), ContractError);
}

TEST_CASE("no gradient is recorded outside a tape or under NoGradScope", "[numeric][grad]") {
  auto x = Tensor<double>::vector({1.0, 2.0});
  x.set_requires_grad(true);
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    NoGradScope<double> ng;
    auto y = mul(x, x);
    CHECK_FALSE(y.requires_grad());
  }
  CHECK(tape.size() == 0);
}

TEST_CASE("FLOPs cost model and categories", "[numeric][flops]") {
  CHECK(account_flops(OpKind::matmul, 3, 4, 5) == 120);
  CHECK(account_flops(OpKind::layernorm, 2, 8) == 80);
  CHECK(account_flops(OpKind::gelu, 2, 8) == 128);
  REQUIRE_THROWS_AS(account_flops(OpKind::matmul, 0, 1, 1), ConfigError);

  FlopCounter c;
  {
    FlopScope scope(c);
    auto a = Tensor<float>::zeros({3, 4}), b = Tensor<float>::zeros({4, 5});
    {
      FlopCategory cat("qkv");
      matmul(a, b);
    }
    add(a, a);
  }
  CHECK(c.total() == 120 + 12);
  CHECK(c.category_total("qkv") == 120);
  CHECK(c.category_total("other") == 12);
  // No counter installed: nothing recorded anywhere.
  matmul(Tensor<float>::zeros({3, 4}), Tensor<float>::zeros({4, 5}));
  CHECK(c.total() == 132);
  FlopCounter d;
  d += c;
  d += c;
  CHECK(d.category_total("qkv") == 240);
}

TEST_CASE("float and double instantiations agree", "[numeric]") {
  std::mt19937_64 rng(6);
  auto a = randn<double>(rng, {4, 8}), b = randn<double>(rng, {8, 3});
  auto d = gelu(matmul(a, b));
  auto f = gelu(matmul(a.cast<float>(), b.cast<float>()));
  for (std::size_t i = 0; i < d.numel(); ++i) CHECK(f[i] == Approx(d[i]).margin(1e-5));
}
