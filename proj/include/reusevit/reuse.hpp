// SPDX-License-Identifier: Apache-2.0
//
// Learned inter-frame computation reuse.
//
// For every chain k (see vit.hpp) a per-token decision selects between
// recomputing the chain for that token or reusing the chain output cached
// for the same token position of a reference frame. Reused tokens take the
// reference's FFN increment, calibrated by a small restoration MLP applied to
// the input difference, and the reference's packed QKV rows. Attention is
// always computed densely over all tokens; the CLS token is never reused.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "reusevit/error.hpp"
#include "reusevit/flops.hpp"
#include "reusevit/frame_type.hpp"
#include "reusevit/io.hpp"
#include "reusevit/ops.hpp"
#include "reusevit/tensor.hpp"
#include "reusevit/vit.hpp"

namespace reusevit {

// ---------------------------------------------------------------------------
// Gate parameters

/// Decision input: similarity, scaled CLS importance, 4-way frame-type
/// one-hot, codec motion magnitude, provider flag (1 = future reference).
inline constexpr std::size_t kDecisionFeatureDim = 8;

struct GateConfig {
  std::size_t layers = 4;
  std::size_t dim = 64;
  std::size_t hidden_decision = 16;
  std::size_t hidden_restoration = 32;

  static GateConfig for_backbone(const ViTConfig& vit, std::size_t hidden_decision = 16) {
    return {vit.layers, vit.dim, hidden_decision, std::max<std::size_t>(1, vit.ffn_hidden / 8)};
  }
  bool operator==(const GateConfig&) const = default;
};

/// Two-layer perceptron with a GELU in between.
template <class T>
struct Mlp {
  Tensor<T> w1, b1, w2, b2;

  Tensor<T> operator()(const Tensor<T>& x) const { return linear(gelu(linear(x, w1, b1)), w2, b2); }
  std::vector<Tensor<T>*> params() { return {&w1, &b1, &w2, &b2}; }
  std::vector<const Tensor<T>*> params() const { return {&w1, &b1, &w2, &b2}; }
};

template <class T>
struct GateLayer {
  Mlp<T> decision;     // 7 -> hidden_decision -> 1
  Mlp<T> restoration;  // D -> hidden_restoration -> D
};

template <class T>
struct GateModule {
  GateConfig cfg;
  std::vector<GateLayer<T>> layers;

  std::vector<Tensor<T>*> parameters() {
    std::vector<Tensor<T>*> out;
    for (auto& l : layers) {
      for (auto* p : l.decision.params()) out.push_back(p);
      for (auto* p : l.restoration.params()) out.push_back(p);
    }
    return out;
  }
  std::vector<const Tensor<T>*> parameters() const {
    std::vector<const Tensor<T>*> out;
    for (const auto& l : layers) {
      for (auto* p : l.decision.params()) out.push_back(p);
      for (auto* p : l.restoration.params()) out.push_back(p);
    }
    return out;
  }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (auto* p : parameters()) n += p->numel();
    return n;
  }
  void set_trainable(bool on) {
    for (auto* p : parameters()) p->set_requires_grad(on);
  }
  void zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
  }
  template <class U>
  GateModule<U> cast() const {
    GateModule<U> g;
    g.cfg = cfg;
    g.layers.resize(layers.size());
    auto src = parameters();
    auto dst = g.parameters();
    for (std::size_t i = 0; i < src.size(); ++i) *dst[i] = src[i]->template cast<U>();
    return g;
  }
  /// Deep copy (tensors are shared handles).
  GateModule clone() const { return cast<T>(); }
};

/// Restoration output layer starts at zero so an untrained gate reproduces
/// cached outputs exactly; the decision bias starts at -1 (recompute-leaning).
inline GateModule<float> init_gate(const GateConfig& cfg, std::uint64_t seed) {
  if (cfg.layers == 0 || cfg.dim == 0 || cfg.hidden_decision == 0 || cfg.hidden_restoration == 0)
    throw ConfigError("GateConfig: all sizes must be positive");
  std::mt19937_64 rng(seed);
  auto gaussian = [&](Shape shape, float std) {
    std::normal_distribution<float> normal(0.0f, std);
    std::vector<float> v(shape_numel(shape));
    for (auto& x : v) x = normal(rng);
    return Tensor<float>(std::move(shape), std::move(v));
  };
  GateModule<float> g;
  g.cfg = cfg;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    GateLayer<float> layer;
    const float fan_in = 1.0f / std::sqrt(static_cast<float>(kDecisionFeatureDim));
    layer.decision.w1 = gaussian({kDecisionFeatureDim, cfg.hidden_decision}, fan_in);
    layer.decision.b1 = Tensor<float>::zeros({cfg.hidden_decision});
    layer.decision.w2 = gaussian({cfg.hidden_decision, 1}, 1.0f / std::sqrt(static_cast<float>(cfg.hidden_decision)));
    layer.decision.b2 = Tensor<float>::full({1}, -1.0f);
    layer.restoration.w1 = gaussian({cfg.dim, cfg.hidden_restoration}, 1.0f / std::sqrt(static_cast<float>(cfg.dim)));
    layer.restoration.b1 = Tensor<float>::zeros({cfg.hidden_restoration});
    layer.restoration.w2 = Tensor<float>::zeros({cfg.hidden_restoration, cfg.dim});
    layer.restoration.b2 = Tensor<float>::zeros({cfg.dim});
    g.layers.push_back(std::move(layer));
  }
  return g;
}

inline constexpr std::uint32_t kGateVersion = 1;

inline void save_gate(const GateModule<float>& g, const std::string& path) {
  auto os = io::open_out(path);
  io::put_magic(os, "RVG1");
  io::put_uint<std::uint32_t>(os, kGateVersion);
  for (auto v : {g.cfg.layers, g.cfg.dim, kDecisionFeatureDim, g.cfg.hidden_decision, g.cfg.hidden_restoration})
    io::put_uint<std::uint32_t>(os, static_cast<std::uint32_t>(v));
  for (auto* p : g.parameters()) io::put_f32s(os, p->data());
  if (!os) throw IoError("failed writing " + path);
}

inline GateModule<float> load_gate(const std::string& path) {
  auto is = io::open_in(path);
  io::expect_magic(is, "RVG1", path);
  if (io::get_uint<std::uint32_t>(is) != kGateVersion) throw FormatError(path + ": unsupported gate version");
  GateConfig cfg;
  cfg.layers = io::get_uint<std::uint32_t>(is);
  cfg.dim = io::get_uint<std::uint32_t>(is);
  if (io::get_uint<std::uint32_t>(is) != kDecisionFeatureDim) throw FormatError(path + ": feature width mismatch");
  cfg.hidden_decision = io::get_uint<std::uint32_t>(is);
  cfg.hidden_restoration = io::get_uint<std::uint32_t>(is);
  auto g = init_gate(cfg, 0);
  for (auto* p : g.parameters()) io::get_f32s(is, p->mutable_data());
  return g;
}

// ---------------------------------------------------------------------------
// Cached activations of reference frames

/// What a dependent frame needs from a reference at chain k: the chain input
/// and the chain outputs, all (N+1) rows.
template <class T>
struct LayerCacheEntry {
  Tensor<T> input;
  Tensor<T> increment;
  Tensor<T> qkv;

  std::size_t bytes() const {
    std::size_t n = 0;
    for (auto* t : {&input, &increment, &qkv})
      if (t->defined()) n += t->numel() * sizeof(T);
    return n;
  }
};

template <class T>
struct ReferencePair {
  const LayerCacheEntry<T>* past = nullptr;
  const LayerCacheEntry<T>* future = nullptr;

  bool empty() const { return past == nullptr && future == nullptr; }
};

// ---------------------------------------------------------------------------
// Decision features

enum class Provider : std::uint8_t { past = 0, future = 1 };

template <class T>
struct DecisionFeatures {
  Tensor<T> similarity;  // s, [N], max cosine over references
  Tensor<T> importance;  // t, [N], CLS attention weights
  FrameType type = FrameType::P;
  std::vector<T> codec;              // c, [N]
  std::vector<Provider> provider;    // reference attaining the max similarity

  std::size_t size() const { return codec.size(); }

  /// [N x 8] decision-MLP input. Importance is scaled by N so that uniform
  /// attention maps to 1.
  Tensor<T> matrix() const {
    const std::size_t n = size();
    std::vector<T> onehot(n * kFrameTypeCount, T{0});
    std::vector<T> future(n, T{0});
    for (std::size_t i = 0; i < n; ++i) {
      onehot[i * kFrameTypeCount + static_cast<std::size_t>(type)] = T{1};
      if (provider[i] == Provider::future) future[i] = T{1};
    }
    return concat_cols<T>({similarity, affine(importance, static_cast<T>(n)),
                           Tensor<T>({n, kFrameTypeCount}, std::move(onehot)), Tensor<T>::vector(codec),
                           Tensor<T>::vector(std::move(future))});
  }
};

namespace detail {
inline std::vector<std::size_t> patch_rows(std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{1});
  return idx;
}
}  // namespace detail

/// Builds s, t, c for the patch tokens of the current frame at one chain.
/// `cls_attention` empty means no attention has run yet (uniform 1/N).
template <class T>
DecisionFeatures<T> compute_features(const Tensor<T>& input, const ReferencePair<T>& refs,
                                     const Tensor<T>& cls_attention, const std::vector<T>& codec, FrameType type) {
  if (refs.empty()) throw ContractError("compute_features: frame has no references (I frame)");
  const std::size_t n = input.rows() - 1;
  if (codec.size() != n) throw ShapeError("compute_features: codec metadata length must equal patch count");
  FlopCategory cat("features");
  const auto rows = detail::patch_rows(n);
  const auto cur = gather_rows(input, rows);
  auto cos_with = [&](const LayerCacheEntry<T>* e) {
    if (!e->input.defined() || e->input.shape() != input.shape())
      throw CacheIntegrityError("compute_features: reference input missing or mis-shaped");
    return row_cosine(cur, gather_rows(e->input, rows));
  };
  DecisionFeatures<T> f;
  f.type = type;
  f.codec = codec;
  f.provider.assign(n, refs.past ? Provider::past : Provider::future);
  if (refs.past && refs.future) {
    auto sp = cos_with(refs.past);
    auto sf = cos_with(refs.future);
    for (std::size_t i = 0; i < n; ++i)
      if (sf[i] > sp[i]) f.provider[i] = Provider::future;
    f.similarity = maximum(sp, sf);
  } else {
    f.similarity = cos_with(refs.past ? refs.past : refs.future);
  }
  if (cls_attention.defined() && cls_attention.numel() > 0) {
    if (cls_attention.numel() != n) throw ShapeError("compute_features: attention length mismatch");
    f.importance = cls_attention;
  } else {
    f.importance = Tensor<T>::full({n}, T(1) / static_cast<T>(n));
  }
  return f;
}

// ---------------------------------------------------------------------------
// Decisions

/// d_i = MLP_decision(v_i), returned as [N].
template <class T>
Tensor<T> decision_logits(const DecisionFeatures<T>& f, const Mlp<T>& decision) {
  FlopCategory cat("decision");
  auto d = decision(f.matrix());
  return reshape_keep_grad(d, {f.size()});
}

/// Hard gate: reuse iff the logit is positive.
template <class T>
std::vector<std::uint8_t> hard_mask(const Tensor<T>& logits) {
  std::vector<std::uint8_t> m(logits.numel());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = logits[i] > T(0) ? 1 : 0;
  return m;
}

/// Difference of two standard Gumbel samples, i.e. the noise that turns a
/// two-class (reuse = d, recompute = 0) Gumbel-Softmax into
/// sigmoid((d + noise) / temperature).
template <class T, class Rng>
std::vector<T> sample_gumbel_difference(Rng& rng, std::size_t n) {
  std::uniform_real_distribution<double> uni(std::numeric_limits<double>::min(), 1.0);
  std::vector<T> out(n);
  for (auto& v : out) {
    const double g1 = -std::log(-std::log(uni(rng)));
    const double g0 = -std::log(-std::log(uni(rng)));
    v = static_cast<T>(g1 - g0);
  }
  return out;
}

/// Soft gate: reuse-class probability of a 2-class Gumbel-Softmax sample.
/// `noise` empty means noise-free (pure tempered sigmoid).
template <class T>
Tensor<T> soft_mask(const Tensor<T>& logits, T temperature, const std::vector<T>& noise) {
  if (!(temperature > T(0))) throw ConfigError("soft_mask: temperature must be positive");
  FlopCategory cat("decision");
  Tensor<T> z = logits;
  if (!noise.empty()) {
    if (noise.size() != logits.numel()) throw ShapeError("soft_mask: noise length mismatch");
    z = add(logits, Tensor<T>(logits.shape(), noise));
  }
  return sigmoid(scale(z, T(1) / temperature));
}

// ---------------------------------------------------------------------------
// Filtration and reconstruction

/// Split of the N+1 tokens into recompute (C) and reuse (R) sets.
struct TokenPartition {
  std::vector<std::size_t> recompute;  // token indices, ascending, CLS first
  std::vector<std::size_t> reuse;      // token indices, ascending
  std::vector<std::size_t> slot;       // token -> position inside its set

  std::size_t tokens() const { return slot.size(); }
  bool reused(std::size_t token) const {
    return !reuse.empty() && std::binary_search(reuse.begin(), reuse.end(), token);
  }
};

/// `mask[i]` refers to patch i (token i+1); 1 = reuse.
inline TokenPartition filter_tokens(const std::vector<std::uint8_t>& mask) {
  TokenPartition p;
  p.slot.resize(mask.size() + 1);
  p.recompute.push_back(0);
  p.slot[0] = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const std::size_t token = i + 1;
    auto& set = mask[i] ? p.reuse : p.recompute;
    p.slot[token] = set.size();
    set.push_back(token);
  }
  return p;
}

/// Interleaves per-set rows back into token order.
template <class T>
Tensor<T> reconstruct(const Tensor<T>& recomputed, const Tensor<T>& reused, const TokenPartition& part) {
  if (recomputed.rows() != part.recompute.size() || (reused.defined() ? reused.rows() : 0) != part.reuse.size() ||
      part.recompute.size() + part.reuse.size() != part.tokens())
    throw ContractError("reconstruct: row sets do not cover every token exactly once");
  if (part.reuse.empty()) return recomputed;
  std::vector<std::size_t> order(part.tokens());
  const std::size_t offset = part.recompute.size();
  for (std::size_t t = 0; t < order.size(); ++t) order[t] = part.slot[t];
  for (auto t : part.reuse) order[t] += offset;
  return gather_rows(concat_rows<T>({recomputed, reused}), order);
}

// ---------------------------------------------------------------------------
// Restoration

template <class T>
struct ReusedRows {
  Tensor<T> increment;
  Tensor<T> qkv;
};

/// Provider-selected reference rows for a list of tokens.
template <class T>
struct ReferenceRows {
  Tensor<T> input, increment, qkv;
};

template <class T>
ReferenceRows<T> reference_rows(const ReferencePair<T>& refs, const std::vector<Provider>& provider,
                                const std::vector<std::size_t>& tokens) {
  auto check = [](const LayerCacheEntry<T>* e) {
    if (e && (!e->input.defined() || !e->increment.defined() || !e->qkv.defined()))
      throw CacheIntegrityError("restore: reference chain output not cached");
  };
  check(refs.past);
  check(refs.future);
  // Single reference, or all tokens served by one side: plain gather.
  auto pick = [&](Provider p) { return p == Provider::past ? refs.past : refs.future; };
  bool uniform = true;
  for (auto t : tokens) uniform = uniform && provider[t - 1] == provider[tokens.front() - 1];
  if (tokens.empty() || uniform) {
    const auto* e = tokens.empty() ? (refs.past ? refs.past : refs.future) : pick(provider[tokens.front() - 1]);
    if (e == nullptr) throw CacheIntegrityError("restore: provider reference absent");
    return {gather_rows(e->input, tokens), gather_rows(e->increment, tokens), gather_rows(e->qkv, tokens)};
  }
  if (!refs.past || !refs.future) throw CacheIntegrityError("restore: provider reference absent");
  const std::size_t rows = refs.past->input.rows();
  std::vector<std::size_t> idx(tokens.size());
  for (std::size_t r = 0; r < tokens.size(); ++r)
    idx[r] = tokens[r] + (provider[tokens[r] - 1] == Provider::future ? rows : 0);
  return {gather_rows(concat_rows<T>({refs.past->input, refs.future->input}), idx),
          gather_rows(concat_rows<T>({refs.past->increment, refs.future->increment}), idx),
          gather_rows(concat_rows<T>({refs.past->qkv, refs.future->qkv}), idx)};
}

/// Reused chain outputs for the current rows: the reference increment
/// calibrated by MLP_restoration(current - reference input), and the
/// reference QKV rows. A null restoration MLP reuses outputs verbatim.
template <class T>
ReusedRows<T> restore(const Tensor<T>& current, const ReferenceRows<T>& ref, const Mlp<T>* restoration) {
  if (current.shape() != ref.input.shape()) throw ShapeError("restore: current/reference row shape mismatch");
  if (restoration == nullptr || current.rows() == 0) return {ref.increment, ref.qkv};
  FlopCategory cat("restoration");
  auto delta = sub(current, ref.input);
  return {add(ref.increment, (*restoration)(delta)), ref.qkv};
}

/// M * reused + (1 - M) * recomputed, row-wise.
template <class T>
Tensor<T> soft_blend(const Tensor<T>& recomputed, const Tensor<T>& reused, const Tensor<T>& mask) {
  for (auto m : mask.data()) {
    if (!std::isfinite(m)) throw DivergenceError("soft_blend: non-finite mask value");
    if (m < T(0) || m > T(1)) throw ContractError("soft_blend: mask value outside [0, 1]");
  }
  FlopCategory cat("blend");
  return add(row_scale(reused, mask), row_scale(recomputed, affine(mask, T(-1), T(1))));
}

// ---------------------------------------------------------------------------
// Gate policies (hard decisions used at inference)

template <class T>
class GatePolicy {
 public:
  virtual ~GatePolicy() = default;
  virtual std::string name() const = 0;
  /// False for policies that never reuse; such frames skip feature extraction.
  virtual bool reuses() const { return true; }
  /// Hard reuse mask over the N patch tokens of one chain.
  virtual std::vector<std::uint8_t> decide(std::size_t layer, const DecisionFeatures<T>& f) const = 0;
  virtual const Mlp<T>* restoration(std::size_t) const { return nullptr; }
};

/// Recomputes everything.
template <class T>
class DenseGate final : public GatePolicy<T> {
 public:
  std::string name() const override { return "dense"; }
  bool reuses() const override { return false; }
  std::vector<std::uint8_t> decide(std::size_t, const DecisionFeatures<T>& f) const override {
    return std::vector<std::uint8_t>(f.size(), 0);
  }
};

/// Trained decision + restoration layers.
template <class T>
class LearnedGate final : public GatePolicy<T> {
 public:
  explicit LearnedGate(const GateModule<T>& gate, bool use_restoration = true)
      : gate_(gate), use_restoration_(use_restoration) {}
  std::string name() const override { return "learned"; }
  std::vector<std::uint8_t> decide(std::size_t layer, const DecisionFeatures<T>& f) const override {
    return hard_mask(decision_logits(f, gate_.layers.at(layer).decision));
  }
  const Mlp<T>* restoration(std::size_t layer) const override {
    return use_restoration_ ? &gate_.layers.at(layer).restoration : nullptr;
  }

 private:
  const GateModule<T>& gate_;
  bool use_restoration_;
};

/// Content-agnostic baseline: reuses a fixed fraction of tokens per chain,
/// choosing the most similar ones, with no restoration.
template <class T>
class FixedRateGate final : public GatePolicy<T> {
 public:
  explicit FixedRateGate(double rate) : rate_(rate) {
    if (rate < 0.0 || rate > 1.0) throw ConfigError("FixedRateGate: rate must lie in [0, 1]");
  }
  std::string name() const override { return "fixed_rate"; }
  std::vector<std::uint8_t> decide(std::size_t, const DecisionFeatures<T>& f) const override {
    const std::size_t n = f.size();
    const auto k = static_cast<std::size_t>(std::llround(rate_ * static_cast<double>(n)));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return f.similarity[a] > f.similarity[b]; });
    std::vector<std::uint8_t> m(n, 0);
    for (std::size_t i = 0; i < k; ++i) m[order[i]] = 1;
    return m;
  }

 private:
  double rate_;
};

/// Externally supplied masks; used by tests and ablations.
template <class T>
class MaskGate final : public GatePolicy<T> {
 public:
  using Fn = std::function<std::vector<std::uint8_t>(std::size_t layer, const DecisionFeatures<T>&)>;
  explicit MaskGate(Fn fn, const GateModule<T>* restoration_source = nullptr)
      : fn_(std::move(fn)), gate_(restoration_source) {}
  static MaskGate constant(bool reuse, const GateModule<T>* restoration_source = nullptr) {
    return MaskGate([reuse](std::size_t, const DecisionFeatures<T>& f) {
      return std::vector<std::uint8_t>(f.size(), reuse ? 1 : 0);
    }, restoration_source);
  }
  std::string name() const override { return "mask"; }
  std::vector<std::uint8_t> decide(std::size_t layer, const DecisionFeatures<T>& f) const override {
    auto m = fn_(layer, f);
    if (m.size() != f.size()) throw ShapeError("MaskGate: mask length mismatch");
    return m;
  }
  const Mlp<T>* restoration(std::size_t layer) const override {
    return gate_ ? &gate_->layers.at(layer).restoration : nullptr;
  }

 private:
  Fn fn_;
  const GateModule<T>* gate_;
};

// ---------------------------------------------------------------------------
// Hard-gated execution of one chain, split in phases so the runtime can
// batch the recompute rows of several frames.

/// Per-frame inputs that stay fixed across layers.
template <class T>
struct FrameContext {
  FrameType type = FrameType::I;
  std::vector<T> codec;  // [N] motion magnitude w.r.t. the references
};

/// A frame between its decision and its reconstruction at chain k.
template <class T>
struct PendingChain {
  Tensor<T> input;                  // u_k, (N+1) x D
  std::vector<std::uint8_t> mask;   // [N]
  std::vector<Provider> provider;   // [N], empty for I frames
  TokenPartition part;
};

template <class T>
PendingChain<T> decide_chain(const GatePolicy<T>& policy, std::size_t k, const Tensor<T>& input,
                             const ReferencePair<T>& refs, const Tensor<T>& cls_attention,
                             const FrameContext<T>& frame) {
  PendingChain<T> p;
  p.input = input;
  const std::size_t n = input.rows() - 1;
  if (refs.empty() || !policy.reuses()) {
    p.mask.assign(n, 0);
  } else {
    auto f = compute_features(input, refs, cls_attention, frame.codec, frame.type);
    p.mask = policy.decide(k, f);
    p.provider = std::move(f.provider);
  }
  p.part = filter_tokens(p.mask);
  return p;
}

template <class T>
struct ChainResult {
  LayerCacheEntry<T> entry;  // this frame's chain input/outputs for its dependents
  Tensor<T> y;               // u_{k+1}
  Tensor<T> cls_attention;
};

/// Finishes chain k for one frame given the recomputed rows (in
/// `part.recompute` order): restores reused rows, reconstructs token order
/// and runs attention layer k.
template <class T>
ChainResult<T> complete_chain(const Backbone<T>& bb, const GatePolicy<T>& policy, std::size_t k,
                              const PendingChain<T>& p, const ReferencePair<T>& refs,
                              const ChainOutput<T>& recomputed) {
  Tensor<T> inc, x, qkv;
  if (p.part.reuse.empty()) {
    inc = recomputed.increment;
    x = recomputed.x;
    qkv = recomputed.qkv;
  } else {
    auto ref = reference_rows(refs, p.provider, p.part.reuse);
    auto cur = gather_rows(p.input, p.part.reuse);
    auto r = restore(cur, ref, policy.restoration(k));
    Tensor<T> x_r;
    {
      FlopCategory cat("restoration");
      x_r = add(cur, r.increment);
    }
    inc = reconstruct(recomputed.increment, r.increment, p.part);
    x = reconstruct(recomputed.x, x_r, p.part);
    qkv = reconstruct(recomputed.qkv, r.qkv, p.part);
  }
  auto att = attention_step(bb, k, x, qkv);
  return {{p.input, inc, qkv}, att.y, att.cls_attention};
}

template <class T>
struct ReuseForwardResult {
  Tensor<T> z;                                  // [1 x D]
  std::vector<std::vector<std::uint8_t>> masks; // per chain, [N]
  std::vector<LayerCacheEntry<T>> entries;      // per chain
  std::vector<double> reuse_rate;               // per chain

  double mean_reuse() const {
    if (reuse_rate.empty()) return 0.0;
    return std::accumulate(reuse_rate.begin(), reuse_rate.end(), 0.0) / static_cast<double>(reuse_rate.size());
  }
};

inline double mask_rate(const std::vector<std::uint8_t>& m) {
  if (m.empty()) return 0.0;
  return static_cast<double>(std::count(m.begin(), m.end(), std::uint8_t{1})) / static_cast<double>(m.size());
}

/// Full hard-gated pass of one frame. `refs` holds one ReferencePair per
/// chain, or is empty for an I frame.
template <class T>
ReuseForwardResult<T> reuse_forward(const Backbone<T>& bb, const Tensor<T>& frame,
                                    const std::vector<ReferencePair<T>>& refs, const GatePolicy<T>& policy,
                                    const FrameContext<T>& ctx) {
  const std::size_t layers = bb.cfg.layers;
  if (!refs.empty() && refs.size() != layers) throw ContractError("reuse_forward: need one reference pair per layer");
  ReuseForwardResult<T> out;
  auto u = patch_embed(bb, frame);
  Tensor<T> cls_attention;
  for (std::size_t k = 0; k < layers; ++k) {
    const ReferencePair<T> none{};
    const auto& r = refs.empty() ? none : refs[k];
    auto pending = decide_chain(policy, k, u, r, cls_attention, ctx);
    auto recomputed = run_chain(bb, k, gather_rows(u, pending.part.recompute));
    auto done = complete_chain(bb, policy, k, pending, r, recomputed);
    out.reuse_rate.push_back(mask_rate(pending.mask));
    out.masks.push_back(std::move(pending.mask));
    out.entries.push_back(std::move(done.entry));
    u = done.y;
    cls_attention = done.cls_attention;
  }
  out.z = final_embedding(bb, u);
  return out;
}

// ---------------------------------------------------------------------------
// Soft-gated (training) pass

template <class T>
struct SoftForwardResult {
  Tensor<T> z;                              // [1 x D]
  std::vector<Tensor<T>> masks;             // per chain, soft [N]; empty for I frames
  std::vector<Tensor<T>> logits;            // per chain, [N]
  std::vector<LayerCacheEntry<T>> entries;  // per chain
};

/// Differentiable pass: both the recompute and the reuse path are evaluated
/// for every patch token and blended with the soft mask. `noise(k)` supplies
/// the Gumbel difference noise for chain k (empty for a noise-free pass).
template <class T>
SoftForwardResult<T> soft_forward(const Backbone<T>& bb, const GateModule<T>& gate, const Tensor<T>& frame,
                                  const std::vector<ReferencePair<T>>& refs, const FrameContext<T>& ctx,
                                  T temperature, const std::function<std::vector<T>(std::size_t)>& noise) {
  const std::size_t layers = bb.cfg.layers, n = bb.cfg.patches();
  if (!refs.empty() && refs.size() != layers) throw ContractError("soft_forward: need one reference pair per layer");
  SoftForwardResult<T> out;
  const auto patches = detail::patch_rows(n);
  auto u = patch_embed(bb, frame);
  Tensor<T> cls_attention;
  for (std::size_t k = 0; k < layers; ++k) {
    auto full = run_chain(bb, k, u);
    Tensor<T> inc = full.increment, qkv = full.qkv;
    if (!refs.empty()) {
      auto f = compute_features(u, refs[k], cls_attention, ctx.codec, ctx.type);
      auto d = decision_logits(f, gate.layers[k].decision);
      auto m = soft_mask(d, temperature, noise ? noise(k) : std::vector<T>{});
      auto ref = reference_rows(refs[k], f.provider, patches);
      auto reused = restore(gather_rows(u, patches), ref, &gate.layers[k].restoration);
      inc = concat_rows<T>({gather_rows(full.increment, {0}),
                            soft_blend(gather_rows(full.increment, patches), reused.increment, m)});
      qkv = concat_rows<T>({gather_rows(full.qkv, {0}), soft_blend(gather_rows(full.qkv, patches), reused.qkv, m)});
      out.masks.push_back(m);
      out.logits.push_back(d);
    }
    auto x = refs.empty() ? full.x : add(u, inc);
    auto att = attention_step(bb, k, x, qkv);
    out.entries.push_back({u, inc, qkv});
    u = att.y;
    cls_attention = att.cls_attention;
  }
  out.z = final_embedding(bb, u);
  return out;
}

}  // namespace reusevit
