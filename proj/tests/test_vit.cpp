// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>

#include "support.hpp"

using namespace reusevit;
using namespace rvtest;
using Catch::Approx;

namespace {

using Mat = std::vector<std::vector<double>>;

Mat to_mat(const Tensor<float>& t) {
  Mat m(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m[i][j] = t.at(i, j);
  return m;
}
std::vector<double> to_vec(const Tensor<float>& t) { return {t.data().begin(), t.data().end()}; }

Mat mm(const Mat& a, const Mat& b) {
  Mat c(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t p = 0; p < b.size(); ++p)
      for (std::size_t j = 0; j < b[0].size(); ++j) c[i][j] += a[i][p] * b[p][j];
  return c;
}
Mat plus_bias(Mat a, const std::vector<double>& b) {
  for (auto& r : a)
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += b[j];
  return a;
}
Mat plus(Mat a, const Mat& b) {
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) a[i][j] += b[i][j];
  return a;
}
Mat ln(const Mat& x, const std::vector<double>& g, const std::vector<double>& b) {
  Mat y = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double mu = 0, var = 0;
    for (double v : x[i]) mu += v / x[i].size();
    for (double v : x[i]) var += (v - mu) * (v - mu) / x[i].size();
    for (std::size_t j = 0; j < x[i].size(); ++j) y[i][j] = (x[i][j] - mu) / std::sqrt(var + 1e-5) * g[j] + b[j];
  }
  return y;
}
Mat gelu_m(Mat x) {
  for (auto& r : x)
    for (auto& v : r) v = 0.5 * v * (1 + std::erf(v / std::sqrt(2.0)));
  return x;
}

/// Straight-line pre-norm ViT: every layer on every token, no chain split.
std::vector<double> reference_forward(const Backbone<float>& bb, const Tensor<float>& frame) {
  const auto& c = bb.cfg;
  Mat x = plus_bias(mm(to_mat(frame), to_mat(bb.w_patch)), to_vec(bb.b_patch));
  x.insert(x.begin(), to_vec(bb.cls));
  x = plus(x, to_mat(bb.pos));
  const std::size_t n = x.size(), d = c.dim, dh = d / c.heads;
  for (const auto& l : bb.layers) {
    Mat qkv = plus_bias(mm(ln(x, to_vec(l.ln1_gamma), to_vec(l.ln1_beta)), to_mat(l.w_qkv)), to_vec(l.b_qkv));
    Mat att(n, std::vector<double>(d, 0.0));
    for (std::size_t h = 0; h < c.heads; ++h)
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> w(n);
        double z = 0, mx = -1e300;
        for (std::size_t j = 0; j < n; ++j) {
          double s = 0;
          for (std::size_t t = 0; t < dh; ++t) s += qkv[i][h * dh + t] * qkv[j][d + h * dh + t];
          w[j] = s / std::sqrt(double(dh));
          mx = std::max(mx, w[j]);
        }
        for (auto& v : w) z += (v = std::exp(v - mx));
        for (std::size_t j = 0; j < n; ++j)
          for (std::size_t t = 0; t < dh; ++t) att[i][h * dh + t] += w[j] / z * qkv[j][2 * d + h * dh + t];
      }
    x = plus(x, plus_bias(mm(att, to_mat(l.w_out)), to_vec(l.b_out)));
    Mat hdn = gelu_m(plus_bias(mm(ln(x, to_vec(l.ln2_gamma), to_vec(l.ln2_beta)), to_mat(l.w_fc1)), to_vec(l.b_fc1)));
    x = plus(x, plus_bias(mm(hdn, to_mat(l.w_fc2)), to_vec(l.b_fc2)));
  }
  return ln({x[0]}, to_vec(bb.lnf_gamma), to_vec(bb.lnf_beta))[0];
}

}  // namespace

TEST_CASE("chain-decomposed forward matches a straight-line reference", "[vit]") {
  for (auto cfg : {tiny_config(), ViTConfig{}}) {
    auto bb = init_backbone(cfg, 11);
    std::mt19937_64 rng(12);
    for (int trial = 0; trial < 3; ++trial) {
      auto frame = randn<float>(rng, {cfg.patches(), cfg.patch_pixels});
      auto ref = reference_forward(bb, frame);
      auto z = dense_forward(bb, frame).z;
      REQUIRE(z.shape() == Shape{1, cfg.dim});
      for (std::size_t j = 0; j < cfg.dim; ++j) CHECK(z[j] == Approx(ref[j]).margin(1e-4));
    }
  }
}

TEST_CASE("final_embedding on the CLS row equals the full dense pass", "[vit]") {
  auto bb = init_backbone({}, 3);
  std::mt19937_64 rng(4);
  auto frame = randn<float>(rng, {16, 48});
  auto u = patch_embed(bb, frame);
  for (std::size_t k = 0; k < bb.cfg.layers; ++k) {
    auto ch = run_chain(bb, k, u);
    u = attention_step(bb, k, ch.x, ch.qkv).y;
  }
  CHECK(max_abs_diff(final_embedding(bb, u), dense_forward(bb, frame).z) < 1e-6);
}

TEST_CASE("chain 0 has a zero increment and chains are row-independent", "[vit]") {
  auto bb = init_backbone({}, 5);
  std::mt19937_64 rng(6);
  auto u = randn<float>(rng, {17, 64});
  auto c0 = run_chain(bb, 0, u);
  for (auto v : c0.increment.data()) CHECK(v == 0.0f);
  CHECK(max_abs_diff(c0.x, u) == 0.0);
  auto full = run_chain(bb, 2, u);
  auto part = run_chain(bb, 2, gather_rows(u, {3, 9}));
  CHECK(max_abs_diff(part.qkv, gather_rows(full.qkv, {3, 9})) < 1e-5);
  CHECK(max_abs_diff(part.increment, gather_rows(full.increment, {3, 9})) < 1e-5);
  REQUIRE_THROWS_AS(run_chain(bb, 4, u), ContractError);
}

TEST_CASE("stand-in weights have the requested statistics", "[vit]") {
  auto bb = init_backbone({}, 7);
  auto check_std = [](const Tensor<float>& t) {
    double mu = 0, var = 0;
    for (auto v : t.data()) mu += v / t.numel();
    for (auto v : t.data()) var += (v - mu) * (v - mu) / t.numel();
    CHECK(std::sqrt(var) >= 0.015);
    CHECK(std::sqrt(var) <= 0.025);
  };
  check_std(bb.w_patch);
  check_std(bb.pos);
  for (const auto& l : bb.layers) {
    check_std(l.w_qkv);
    check_std(l.w_out);
    check_std(l.w_fc1);
    check_std(l.w_fc2);
    for (auto v : l.b_qkv.data()) CHECK(v == 0.0f);
  }
  CHECK(init_backbone({}, 7).fingerprint() == bb.fingerprint());
  CHECK(init_backbone({}, 8).fingerprint() != bb.fingerprint());
}

TEST_CASE("attention is a minority of per-layer FLOPs", "[vit][flops]") {
  auto bb = init_backbone({}, 1);
  std::mt19937_64 rng(2);
  FlopCounter c;
  {
    FlopScope scope(c);
    dense_forward(bb, randn<float>(rng, {16, 48}));
  }
  const double att = c.category_total("attention");
  const double layer = att + c.category_total("qkv") + c.category_total("attn_proj") + c.category_total("ffn");
  CHECK(att / layer < 0.35);
  CHECK(c.category_total("qkv") == bb.cfg.layers * (account_flops(OpKind::layernorm, 17, 64) +
                                                    account_flops(OpKind::matmul, 17, 64, 192) +
                                                    account_flops(OpKind::elementwise, 17 * 192)));
}

TEST_CASE("backbone checkpoint round-trips and rejects corruption", "[vit][io]") {
  auto bb = init_backbone(tiny_config(), 9);
  const std::string path = "test_vit_weights.rvw";
  save_backbone(bb, path);
  auto back = load_backbone(path);
  CHECK(back.cfg == bb.cfg);
  CHECK(back.fingerprint() == bb.fingerprint());
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.write("XXXX", 4);
  }
  REQUIRE_THROWS_AS(load_backbone(path), FormatError);
  std::filesystem::resize_file(path, 10);
  REQUIRE_THROWS(load_backbone(path));
  std::remove(path.c_str());
  REQUIRE_THROWS_AS(load_backbone("does_not_exist.rvw"), IoError);
}

TEST_CASE("configuration and input validation", "[vit]") {
  ViTConfig bad;
  bad.heads = 5;
  REQUIRE_THROWS_AS(init_backbone(bad, 1), ConfigError);
  auto bb = init_backbone({}, 1);
  REQUIRE_THROWS_AS(patch_embed(bb, Tensor<float>::zeros({15, 48})), ShapeError);
}

TEST_CASE("double cast reproduces the float forward", "[vit]") {
  auto bb = init_backbone(tiny_config(), 2);
  std::mt19937_64 rng(3);
  auto frame = randn<float>(rng, {4, 6});
  auto zf = dense_forward(bb, frame).z;
  auto zd = dense_forward(bb.cast<double>(), frame.cast<double>()).z;
  for (std::size_t j = 0; j < zf.numel(); ++j) CHECK(zf[j] == Approx(zd[j]).margin(1e-4));
}
