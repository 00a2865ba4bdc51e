// SPDX-License-Identifier: Apache-2.0
//
// Self-supervised training of the gate (decision + restoration layers) on
// grouped frames with a frozen backbone:
//
//   l_sim   = mean over group frames of 1 - cos(Z, Z_hat)
//   l_reuse = mean soft mask over chains, tokens and non-I frames
//   l_total = l_sim + alpha * max(0, R_target - l_reuse)
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "reusevit/error.hpp"
#include "reusevit/ops.hpp"
#include "reusevit/reuse.hpp"
#include "reusevit/scheduler.hpp"
#include "reusevit/synth.hpp"
#include "reusevit/tensor.hpp"
#include "reusevit/vit.hpp"

namespace reusevit {

struct TrainConfig {
  double alpha = 2.0;
  double r_target = 0.5;
  double temp_start = 5.0;
  double temp_end = 0.1;
  double lr = 1e-3;
  std::size_t steps = 2000;
  std::size_t groups_per_step = 4;
  std::uint64_t seed = 0;
  /// When set, R_target is adapted during training and the returned gate is
  /// the snapshot with the highest reuse whose cos stays >= target_cos.
  std::optional<double> target_cos;
  std::size_t eval_every = 100;

  void validate() const {
    if (!(alpha >= 0.0)) throw ConfigError("train: alpha must be >= 0");
    if (!(r_target >= 0.0 && r_target <= 1.0)) throw ConfigError("train: r_target must lie in [0, 1]");
    if (!(temp_start > temp_end && temp_end > 0.0)) throw ConfigError("train: need temp_start > temp_end > 0");
    if (!(lr > 0.0)) throw ConfigError("train: lr must be positive");
    if (steps == 0 || groups_per_step == 0) throw ConfigError("train: steps and groups_per_step must be >= 1");
    if (target_cos && !(*target_cos > -1.0 && *target_cos <= 1.0)) throw ConfigError("train: target_cos must lie in (-1, 1]");
    if (target_cos && eval_every == 0) throw ConfigError("train: eval_every must be >= 1");
  }
};

/// Exponential decay from temp_start (step 0) to temp_end (last step).
inline double temperature_at(const TrainConfig& cfg, std::size_t step) {
  if (cfg.steps <= 1) return cfg.temp_start;
  const double frac = static_cast<double>(step) / static_cast<double>(cfg.steps - 1);
  return cfg.temp_start * std::pow(cfg.temp_end / cfg.temp_start, frac);
}

// ---------------------------------------------------------------------------
// Losses

template <class T>
Tensor<T> similarity_loss(const Tensor<T>& z, const Tensor<T>& z_hat) {
  return affine(cosine_similarity(z, z_hat), T(-1), T(1));
}

/// Mean of every mask entry. Masks of I frames are simply absent.
template <class T>
Tensor<T> reuse_loss(const std::vector<Tensor<T>>& masks) {
  std::size_t count = 0;
  Tensor<T> total;
  for (const auto& m : masks) {
    if (!m.defined() || m.numel() == 0) continue;
    for (auto v : m.data())
      if (!(v >= T(0) && v <= T(1))) throw ContractError("reuse_loss: mask value outside [0, 1]");
    auto s = sum(m);
    total = total.defined() ? add(total, s) : s;
    count += m.numel();
  }
  if (count == 0) throw ContractError("reuse_loss: no masks");
  return scale(total, T(1) / static_cast<T>(count));
}

template <class T>
Tensor<T> combined_loss(const Tensor<T>& l_sim, const Tensor<T>& l_reuse, T alpha, T r_target) {
  return add(l_sim, scale(relu(affine(l_reuse, T(-1), r_target)), alpha));
}

inline double combined_loss(double l_sim, double l_reuse, double alpha, double r_target) {
  return l_sim + alpha * std::max(0.0, r_target - l_reuse);
}

// ---------------------------------------------------------------------------
// Grouped soft forward

template <class T>
struct GroupLoss {
  Tensor<T> total;
  double l_sim = 0.0;
  double l_reuse = 0.0;
  double cos = 0.0;          // mean cos(Z, Z_hat) over group frames
  double hard_reuse = 0.0;   // fraction of positive logits on non-I frames
  double mask_entropy = 0.0; // mean binary entropy of soft masks
};

/// Noise for (slot in group, chain) -> N values; null means noise-free.
template <class T>
using NoiseFn = std::function<std::vector<T>(std::size_t slot, std::size_t chain)>;

/// Soft-gated pass over one training group. `dense_z[j]` is the dense
/// embedding of group slot j.
template <class T>
GroupLoss<T> group_loss(const Backbone<T>& bb, const GateModule<T>& gate, const Video& video,
                        const TrainingGroup& group, const std::vector<Tensor<T>>& dense_z, T temperature, T alpha,
                        T r_target, const NoiseFn<T>& noise) {
  const std::size_t slots = group.frames.size(), layers = bb.cfg.layers;
  if (dense_z.size() != slots) throw ContractError("group_loss: one dense embedding per group frame required");
  std::vector<std::vector<LayerCacheEntry<T>>> entries(slots);
  std::vector<Tensor<T>> masks;
  Tensor<T> sim_total;
  GroupLoss<T> out;
  std::size_t positive = 0, mask_count = 0;
  double entropy = 0.0;
  for (std::size_t j = 0; j < slots; ++j) {
    const auto& tf = group.frames[j];
    std::vector<ReferencePair<T>> refs;
    if (tf.past || tf.future) {
      for (std::size_t k = 0; k < layers; ++k)
        refs.push_back({tf.past ? &entries[*tf.past][k] : nullptr, tf.future ? &entries[*tf.future][k] : nullptr});
    }
    FrameContext<T> ctx;
    ctx.type = tf.type;
    auto codec = codec_features(video, tf.index, tf.past ? std::optional(group.frames[*tf.past].index) : std::nullopt,
                                tf.future ? std::optional(group.frames[*tf.future].index) : std::nullopt);
    ctx.codec.assign(codec.begin(), codec.end());
    std::function<std::vector<T>(std::size_t)> chain_noise;
    if (noise) chain_noise = [&, j](std::size_t k) { return noise(j, k); };
    auto res = soft_forward(bb, gate, video.frame<T>(tf.index), refs, ctx, temperature, chain_noise);
    entries[j] = std::move(res.entries);
    auto ls = similarity_loss(dense_z[j], res.z);
    out.cos += 1.0 - static_cast<double>(ls.item());
    sim_total = sim_total.defined() ? add(sim_total, ls) : ls;
    for (std::size_t k = 0; k < res.masks.size(); ++k) {
      for (std::size_t i = 0; i < res.masks[k].numel(); ++i) {
        const double m = static_cast<double>(res.masks[k][i]);
        if (res.logits[k][i] > T(0)) ++positive;
        if (m > 0.0 && m < 1.0) entropy -= m * std::log(m) + (1.0 - m) * std::log(1.0 - m);
        ++mask_count;
      }
      masks.push_back(res.masks[k]);
    }
  }
  auto l_sim = scale(sim_total, T(1) / static_cast<T>(slots));
  auto l_reuse = reuse_loss(masks);
  out.total = combined_loss(l_sim, l_reuse, alpha, r_target);
  out.l_sim = static_cast<double>(l_sim.item());
  out.l_reuse = static_cast<double>(l_reuse.item());
  out.cos /= static_cast<double>(slots);
  out.hard_reuse = static_cast<double>(positive) / static_cast<double>(mask_count);
  out.mask_entropy = entropy / static_cast<double>(mask_count);
  return out;
}

/// Dense embeddings of every group frame (no gradient).
template <class T>
std::vector<Tensor<T>> dense_group_embeddings(const Backbone<T>& bb, const Video& video, const TrainingGroup& group) {
  NoGradScope<T> no_grad;
  std::vector<Tensor<T>> z;
  for (const auto& f : group.frames) z.push_back(dense_forward(bb, video.frame<T>(f.index)).z);
  return z;
}

// ---------------------------------------------------------------------------
// Optimiser

template <class T>
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(const std::vector<Tensor<T>*>& params) {
    if (m_.empty()) {
      for (auto* p : params) {
        m_.emplace_back(p->numel(), 0.0);
        v_.emplace_back(p->numel(), 0.0);
      }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!params[i]->has_grad()) continue;
      const auto g = params[i]->grad();
      auto w = params[i]->mutable_data();
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = static_cast<double>(g[j]);
        m_[i][j] = b1_ * m_[i][j] + (1.0 - b1_) * gj;
        v_[i][j] = b2_ * v_[i][j] + (1.0 - b2_) * gj * gj;
        w[j] -= static_cast<T>(lr_ * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + eps_));
      }
    }
  }

 private:
  double lr_, b1_, b2_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// ---------------------------------------------------------------------------
// Training loop

struct TrainLogRow {
  std::size_t step;
  double l_sim, l_reuse, l_total, temperature, reuse_rate, cos, mask_entropy, r_target;
};

inline void write_train_log_csv(std::ostream& os, const std::vector<TrainLogRow>& rows) {
  os << "step,l_sim,l_reuse,l_total,temperature,reuse_rate,cos,mask_entropy,r_target\n";
  os.precision(8);
  for (const auto& r : rows)
    os << r.step << ',' << r.l_sim << ',' << r.l_reuse << ',' << r.l_total << ',' << r.temperature << ','
       << r.reuse_rate << ',' << r.cos << ',' << r.mask_entropy << ',' << r.r_target << '\n';
}

struct GroupEval {
  double reuse_rate = 0.0;  // hard masks of non-I group frames
  double cos = 0.0;         // mean over all group frames
};

/// Hard-gated, noise-free evaluation on training groups.
inline GroupEval evaluate_groups(const Backbone<float>& bb, const GateModule<float>& gate,
                                 const std::vector<std::pair<const Video*, TrainingGroup>>& groups) {
  NoGradScope<float> no_grad;
  LearnedGate<float> policy(gate);
  GroupEval ev;
  std::size_t masks = 0, frames = 0;
  double reuse = 0.0;
  for (const auto& [video, group] : groups) {
    std::vector<std::vector<LayerCacheEntry<float>>> entries(group.frames.size());
    for (std::size_t j = 0; j < group.frames.size(); ++j) {
      const auto& tf = group.frames[j];
      std::vector<ReferencePair<float>> refs;
      if (tf.past || tf.future)
        for (std::size_t k = 0; k < bb.cfg.layers; ++k)
          refs.push_back({tf.past ? &entries[*tf.past][k] : nullptr, tf.future ? &entries[*tf.future][k] : nullptr});
      FrameContext<float> ctx{tf.type, codec_features(*video, tf.index,
                                                      tf.past ? std::optional(group.frames[*tf.past].index) : std::nullopt,
                                                      tf.future ? std::optional(group.frames[*tf.future].index) : std::nullopt)};
      auto frame = video->frame(tf.index);
      auto r = reuse_forward(bb, frame, refs, policy, ctx);
      if (!refs.empty()) {
        for (const auto& m : r.masks) reuse += mask_rate(m);
        masks += r.masks.size();
      }
      ev.cos += static_cast<double>(cosine_similarity(dense_forward(bb, frame).z, r.z).item());
      ++frames;
      entries[j] = std::move(r.entries);
    }
  }
  ev.reuse_rate = masks ? reuse / static_cast<double>(masks) : 0.0;
  ev.cos = frames ? ev.cos / static_cast<double>(frames) : 0.0;
  return ev;
}

struct TrainResult {
  GateModule<float> gate;
  std::vector<TrainLogRow> log;
  std::uint64_t backbone_fingerprint_before = 0;
  std::uint64_t backbone_fingerprint_after = 0;
  std::optional<GroupEval> best;  // target_cos mode only
};

/// Trains a deep copy of `gate` on every training group of `videos`; the
/// caller's gate is left untouched.
inline TrainResult train(const Backbone<float>& bb, const GateModule<float>& initial, const std::vector<Video>& videos,
                         const TrainConfig& cfg) {
  cfg.validate();
  auto gate = initial.clone();
  if (gate.cfg.layers != bb.cfg.layers || gate.cfg.dim != bb.cfg.dim)
    throw ConfigError("train: gate does not match backbone dimensions");
  std::vector<std::pair<const Video*, TrainingGroup>> groups;
  for (const auto& v : videos) {
    if (v.patches() != bb.cfg.patches() || v.patch_pixels != bb.cfg.patch_pixels)
      throw ConfigError("train: video " + v.id + " does not match backbone patch layout");
    for (auto& g : build_training_groups(v.size())) groups.emplace_back(&v, std::move(g));
  }
  if (groups.empty()) throw ConfigError("train: corpus has no video long enough for one training group");

  TrainResult out;
  out.backbone_fingerprint_before = bb.fingerprint();
  std::vector<std::vector<Tensor<float>>> dense(groups.size());
  for (std::size_t i = 0; i < groups.size(); ++i) dense[i] = dense_group_embeddings(bb, *groups[i].first, groups[i].second);

  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> pick(0, groups.size() - 1);
  Adam<float> adam(cfg.lr);
  gate.set_trainable(true);
  auto params = gate.parameters();
  double r_target = cfg.r_target;
  const std::size_t n = bb.cfg.patches();
  NoiseFn<float> noise = [&](std::size_t, std::size_t) { return sample_gumbel_difference<float>(rng, n); };

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const double temp = temperature_at(cfg, step);
    Tape<float> tape;
    TrainLogRow row{step, 0, 0, 0, temp, 0, 0, 0, r_target};
    Tensor<float> loss;
    {
      TapeScope<float> scope(tape);
      for (std::size_t b = 0; b < cfg.groups_per_step; ++b) {
        const std::size_t gi = pick(rng);
        auto gl = group_loss<float>(bb, gate, *groups[gi].first, groups[gi].second, dense[gi], static_cast<float>(temp),
                                    static_cast<float>(cfg.alpha), static_cast<float>(r_target), noise);
        loss = loss.defined() ? add(loss, gl.total) : gl.total;
        const double w = 1.0 / static_cast<double>(cfg.groups_per_step);
        row.l_sim += w * gl.l_sim;
        row.l_reuse += w * gl.l_reuse;
        row.cos += w * gl.cos;
        row.reuse_rate += w * gl.hard_reuse;
        row.mask_entropy += w * gl.mask_entropy;
      }
      loss = scale(loss, 1.0f / static_cast<float>(cfg.groups_per_step));
    }
    row.l_total = static_cast<double>(loss.item());
    if (!std::isfinite(row.l_total) || !std::isfinite(row.l_sim) || !std::isfinite(row.l_reuse))
      throw DivergenceError("training diverged at step " + std::to_string(step) + ": l_sim=" +
                            std::to_string(row.l_sim) + " l_reuse=" + std::to_string(row.l_reuse) +
                            " temperature=" + std::to_string(temp));
    gate.zero_grad();
    tape.backward(loss);
    adam.step(params);
    out.log.push_back(row);

    if (cfg.target_cos && ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps)) {
      auto ev = evaluate_groups(bb, gate, groups);
      if (ev.cos >= *cfg.target_cos) {
        if (!out.best || ev.reuse_rate > out.best->reuse_rate) {
          out.best = ev;
          out.gate = gate.clone();
        }
        r_target = std::min(1.0, r_target + 0.05);
      } else {
        r_target = std::max(0.0, r_target - 0.05);
      }
    }
  }
  gate.zero_grad();
  gate.set_trainable(false);
  if (!cfg.target_cos || !out.best) out.gate = gate.clone();
  out.gate.set_trainable(false);
  out.backbone_fingerprint_after = bb.fingerprint();
  if (out.backbone_fingerprint_after != out.backbone_fingerprint_before)
    throw ContractError("train: backbone weights changed during training");
  return out;
}

}  // namespace reusevit
