// SPDX-License-Identifier: Apache-2.0
//
// Frozen toy-scale ViT encoder: patch embedding + CLS token + L pre-norm
// encoder layers + final layernorm on the CLS token.
//
// The encoder is exposed in pieces so the reuse engine can interleave its
// own gating between them. With x_k the residual stream entering encoder
// layer k, the per-layer computation is split into
//
//   chain k    : token-independent part.  k == 0: qkv_0 = QKV_0(x_0).
//                k >= 1: x_k = u_k + FFN_{k-1}(u_k), qkv_k = QKV_k(x_k)
//   attention k: y_k = x_k + Proj_k(MHA(qkv_k)); u_{k+1} = y_k
//
// and a final FFN_{L-1} + layernorm produces the embedding from the CLS row.
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "reusevit/error.hpp"
#include "reusevit/flops.hpp"
#include "reusevit/io.hpp"
#include "reusevit/ops.hpp"
#include "reusevit/tensor.hpp"

namespace reusevit {

struct ViTConfig {
  std::size_t layers = 4;
  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t grid_rows = 4;
  std::size_t grid_cols = 4;
  std::size_t ffn_hidden = 256;
  std::size_t patch_pixels = 48;

  std::size_t patches() const { return grid_rows * grid_cols; }
  std::size_t tokens() const { return patches() + 1; }

  void validate() const {
    if (layers < 1) throw ConfigError("ViTConfig: layers must be >= 1");
    if (dim == 0 || heads == 0 || dim % heads != 0) throw ConfigError("ViTConfig: dim must be divisible by heads");
    if (patches() < 1) throw ConfigError("ViTConfig: patch grid must contain at least one patch");
    if (ffn_hidden == 0 || patch_pixels == 0) throw ConfigError("ViTConfig: ffn_hidden and patch_pixels must be > 0");
  }
  bool operator==(const ViTConfig&) const = default;
};

template <class T>
struct EncoderLayer {
  Tensor<T> ln1_gamma, ln1_beta;
  Tensor<T> w_qkv, b_qkv;  // D x 3D
  Tensor<T> w_out, b_out;  // D x D
  Tensor<T> ln2_gamma, ln2_beta;
  Tensor<T> w_fc1, b_fc1;  // D x F
  Tensor<T> w_fc2, b_fc2;  // F x D

  template <class Self>
  static auto fields(Self& s) {
    return std::vector{&s.ln1_gamma, &s.ln1_beta, &s.w_qkv, &s.b_qkv, &s.w_out, &s.b_out,
                       &s.ln2_gamma, &s.ln2_beta, &s.w_fc1, &s.b_fc1, &s.w_fc2, &s.b_fc2};
  }
};

template <class T>
struct Backbone {
  ViTConfig cfg;
  Tensor<T> w_patch, b_patch;  // P x D, D
  Tensor<T> cls;               // D
  Tensor<T> pos;               // (N+1) x D
  std::vector<EncoderLayer<T>> layers;
  Tensor<T> lnf_gamma, lnf_beta;

  /// All weight tensors in checkpoint order.
  std::vector<const Tensor<T>*> tensors() const {
    std::vector<const Tensor<T>*> out{&w_patch, &b_patch, &cls, &pos};
    for (const auto& l : layers)
      for (auto* t : EncoderLayer<T>::fields(l)) out.push_back(t);
    out.push_back(&lnf_gamma);
    out.push_back(&lnf_beta);
    return out;
  }
  std::vector<Tensor<T>*> mutable_tensors() {
    std::vector<Tensor<T>*> out{&w_patch, &b_patch, &cls, &pos};
    for (auto& l : layers)
      for (auto* t : EncoderLayer<T>::fields(l)) out.push_back(t);
    out.push_back(&lnf_gamma);
    out.push_back(&lnf_beta);
    return out;
  }

  template <class U>
  Backbone<U> cast() const {
    Backbone<U> b;
    b.cfg = cfg;
    b.layers.resize(layers.size());
    auto src = tensors();
    auto dst = b.mutable_tensors();
    for (std::size_t i = 0; i < src.size(); ++i) *dst[i] = src[i]->template cast<U>();
    return b;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (auto* t : tensors()) n += t->numel();
    return n;
  }

  /// Hash of every weight's bit pattern.
  std::uint64_t fingerprint() const {
    std::uint64_t h = 1469598103934665603ull;
    for (auto* t : tensors()) h = io::fnv1a(std::as_bytes(t->data()), h);
    return h;
  }
};

/// Deterministic stand-in for pretrained weights: N(0, 0.02^2) matrices and
/// embeddings, zero biases. Pre-norm gains are 1 / (0.02 * sqrt(D)) so each
/// normalised projection preserves variance; with unit gains the CLS output
/// barely depends on frame content.
inline Backbone<float> init_backbone(const ViTConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const float ln_gain = 1.0f / (0.02f * std::sqrt(static_cast<float>(cfg.dim)));
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal(0.0f, 0.02f);
  auto gaussian = [&](Shape shape) {
    std::vector<float> v(shape_numel(shape));
    for (auto& x : v) x = normal(rng);
    return Tensor<float>(std::move(shape), std::move(v));
  };
  const std::size_t d = cfg.dim, f = cfg.ffn_hidden;
  Backbone<float> b;
  b.cfg = cfg;
  b.w_patch = gaussian({cfg.patch_pixels, d});
  b.b_patch = Tensor<float>::zeros({d});
  b.cls = gaussian({d});
  b.pos = gaussian({cfg.tokens(), d});
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    EncoderLayer<float> e;
    e.ln1_gamma = Tensor<float>::full({d}, ln_gain);
    e.ln1_beta = Tensor<float>::zeros({d});
    e.w_qkv = gaussian({d, 3 * d});
    e.b_qkv = Tensor<float>::zeros({3 * d});
    e.w_out = gaussian({d, d});
    e.b_out = Tensor<float>::zeros({d});
    e.ln2_gamma = Tensor<float>::full({d}, ln_gain);
    e.ln2_beta = Tensor<float>::zeros({d});
    e.w_fc1 = gaussian({d, f});
    e.b_fc1 = Tensor<float>::zeros({f});
    e.w_fc2 = gaussian({f, d});
    e.b_fc2 = Tensor<float>::zeros({d});
    b.layers.push_back(std::move(e));
  }
  b.lnf_gamma = Tensor<float>::full({d}, 1.0f);
  b.lnf_beta = Tensor<float>::zeros({d});
  return b;
}

// ---------------------------------------------------------------------------
// Encoder pieces

/// Frame [N x patch_pixels] -> tokens [(N+1) x D], CLS first, positions added.
template <class T>
Tensor<T> patch_embed(const Backbone<T>& bb, const Tensor<T>& frame) {
  const auto& cfg = bb.cfg;
  if (frame.rank() != 2 || frame.rows() != cfg.patches() || frame.cols() != cfg.patch_pixels)
    throw ShapeError("patch_embed: expected frame " + std::to_string(cfg.patches()) + "x" +
                     std::to_string(cfg.patch_pixels) + ", got " + shape_str(frame.shape()));
  FlopCategory cat("embed");
  auto patches = linear(frame, bb.w_patch, bb.b_patch);
  auto tokens = concat_rows<T>({bb.cls.reshape({1, cfg.dim}), patches});
  return add(tokens, bb.pos);
}

template <class T>
Tensor<T> qkv_projection(const EncoderLayer<T>& layer, const Tensor<T>& x) {
  FlopCategory cat("qkv");
  return linear(layernorm(x, layer.ln1_gamma, layer.ln1_beta), layer.w_qkv, layer.b_qkv);
}

/// FFN(LN(y)) without the residual add.
template <class T>
Tensor<T> ffn_increment(const EncoderLayer<T>& layer, const Tensor<T>& y) {
  FlopCategory cat("ffn");
  auto h = gelu(linear(layernorm(y, layer.ln2_gamma, layer.ln2_beta), layer.w_fc1, layer.b_fc1));
  return linear(h, layer.w_fc2, layer.b_fc2);
}

/// Output of the token-independent chain k for a set of rows.
template <class T>
struct ChainOutput {
  Tensor<T> increment;  // FFN residual increment added to the chain input (zeros for k == 0)
  Tensor<T> x;          // chain input + increment
  Tensor<T> qkv;        // packed Q|K|V of encoder layer k
};

template <class T>
ChainOutput<T> run_chain(const Backbone<T>& bb, std::size_t k, const Tensor<T>& u) {
  if (k >= bb.cfg.layers) throw ContractError("run_chain: chain index out of range");
  if (k == 0) return {Tensor<T>::zeros({u.rows(), bb.cfg.dim}), u, qkv_projection(bb.layers[0], u)};
  auto inc = ffn_increment(bb.layers[k - 1], u);
  Tensor<T> x;
  {
    FlopCategory cat("ffn");
    x = add(u, inc);
  }
  return {inc, x, qkv_projection(bb.layers[k], x)};
}

template <class T>
struct AttentionStep {
  Tensor<T> y;              // residual stream after attention
  Tensor<T> cls_attention;  // [N]
};

template <class T>
AttentionStep<T> attention_step(const Backbone<T>& bb, std::size_t k, const Tensor<T>& x, const Tensor<T>& qkv) {
  const auto& layer = bb.layers.at(k);
  AttentionResult<T> att;
  {
    FlopCategory cat("attention");
    att = attention(qkv, bb.cfg.heads);
  }
  FlopCategory cat("attn_proj");
  auto proj = linear(att.out, layer.w_out, layer.b_out);
  return {add(x, proj), att.cls_attention};
}

/// Final FFN of the last layer plus the final layernorm, applied to the CLS
/// row of the last post-attention stream. Returns a [1 x D] embedding.
template <class T>
Tensor<T> final_embedding(const Backbone<T>& bb, const Tensor<T>& y_last) {
  auto cls = gather_rows(y_last, {0});
  auto x = add(cls, ffn_increment(bb.layers.back(), cls));
  FlopCategory cat("final");
  return layernorm(x, bb.lnf_gamma, bb.lnf_beta);
}

template <class T>
struct DenseTrace {
  Tensor<T> z;                              // [1 x D]
  std::vector<Tensor<T>> residual;          // x_0 .. x_L, each (N+1) x D
  std::vector<Tensor<T>> chain_inputs;      // u_0 .. u_{L-1}
  std::vector<Tensor<T>> cls_attention;     // per layer, [N]
};

/// Reference encoder pass over all tokens.
template <class T>
DenseTrace<T> dense_forward(const Backbone<T>& bb, const Tensor<T>& frame) {
  DenseTrace<T> tr;
  auto u = patch_embed(bb, frame);
  for (std::size_t k = 0; k < bb.cfg.layers; ++k) {
    tr.chain_inputs.push_back(u);
    auto chain = run_chain(bb, k, u);
    tr.residual.push_back(chain.x);
    auto step = attention_step(bb, k, chain.x, chain.qkv);
    tr.cls_attention.push_back(step.cls_attention);
    u = step.y;
  }
  {
    FlopCategory cat("ffn");
    tr.residual.push_back(add(u, ffn_increment(bb.layers.back(), u)));
  }
  FlopCategory cat("final");
  tr.z = layernorm(gather_rows(tr.residual.back(), {0}), bb.lnf_gamma, bb.lnf_beta);
  return tr;
}

// ---------------------------------------------------------------------------
// Checkpoint ("RVW1")

inline void write_config(std::ostream& os, const ViTConfig& c) {
  for (auto v : {c.layers, c.dim, c.heads, c.grid_rows, c.grid_cols, c.ffn_hidden, c.patch_pixels})
    io::put_uint<std::uint32_t>(os, static_cast<std::uint32_t>(v));
}

inline ViTConfig read_config(std::istream& is) {
  ViTConfig c;
  for (auto* v : {&c.layers, &c.dim, &c.heads, &c.grid_rows, &c.grid_cols, &c.ffn_hidden, &c.patch_pixels})
    *v = io::get_uint<std::uint32_t>(is);
  c.validate();
  return c;
}

inline constexpr std::uint32_t kWeightsVersion = 1;

inline void save_backbone(const Backbone<float>& bb, const std::string& path) {
  auto os = io::open_out(path);
  io::put_magic(os, "RVW1");
  io::put_uint<std::uint32_t>(os, kWeightsVersion);
  write_config(os, bb.cfg);
  for (auto* t : bb.tensors()) io::put_f32s(os, t->data());
  if (!os) throw IoError("failed writing " + path);
}

inline Backbone<float> load_backbone(const std::string& path) {
  auto is = io::open_in(path);
  io::expect_magic(is, "RVW1", path);
  if (io::get_uint<std::uint32_t>(is) != kWeightsVersion) throw FormatError(path + ": unsupported weights version");
  // Allocate the right shapes, then overwrite every value.
  auto bb = init_backbone(read_config(is), 0);
  for (auto* t : bb.mutable_tensors()) io::get_f32s(is, t->mutable_data());
  return bb;
}

}  // namespace reusevit
