// SPDX-License-Identifier: Apache-2.0
//
// Execution of a planned video: frame-wise or layer-wise scheduling, the
// activation cache with eviction after last use, and sparse computation
// compaction (gathering recompute rows of many frames into one matrix).
#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <map>
#include <mutex>
#include <ostream>
#include <set>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "reusevit/error.hpp"
#include "reusevit/flops.hpp"
#include "reusevit/reuse.hpp"
#include "reusevit/scheduler.hpp"
#include "reusevit/vit.hpp"

namespace reusevit {

// ---------------------------------------------------------------------------
// Activation cache

/// Cached chain inputs/outputs keyed by (frame, chain). Each entry carries
/// the number of consumers that still have to read it; with eviction on it
/// is freed as soon as that count reaches zero.
template <class T>
class ActivationCache {
 public:
  explicit ActivationCache(bool evict = true) : evict_(evict) {}

  /// Stores the chain input; outputs follow via `fill`.
  void put(std::size_t frame, std::size_t layer, const Tensor<T>& input, std::size_t consumers) {
    if (consumers == 0) throw ContractError("cache: entry without consumers");
    const Key key{frame, layer};
    if (slots_.count(key) || evicted_.count(key)) throw ContractError("cache: entry produced twice");
    slots_[key] = {{input, {}, {}}, consumers};
    bytes_ += slots_[key].entry.bytes();
    peak_ = std::max(peak_, bytes_);
  }

  void fill(std::size_t frame, std::size_t layer, const Tensor<T>& increment, const Tensor<T>& qkv) {
    auto& s = slot(frame, layer);
    bytes_ -= s.entry.bytes();
    s.entry.increment = increment;
    s.entry.qkv = qkv;
    bytes_ += s.entry.bytes();
    peak_ = std::max(peak_, bytes_);
  }

  const LayerCacheEntry<T>& get(std::size_t frame, std::size_t layer) const {
    auto it = slots_.find({frame, layer});
    if (it == slots_.end())
      throw CacheIntegrityError("cache: no entry for frame " + std::to_string(frame) + " chain " + std::to_string(layer) +
                                (evicted_.count({frame, layer}) ? " (already evicted)" : ""));
    return it->second.entry;
  }

  bool contains(std::size_t frame, std::size_t layer) const { return slots_.count({frame, layer}) > 0; }

  /// One consumer finished reading the entry.
  void release(std::size_t frame, std::size_t layer) {
    const Key key{frame, layer};
    auto it = slots_.find(key);
    if (it == slots_.end()) {
      if (evicted_.count(key)) throw ContractError("cache: double evict of frame " + std::to_string(frame));
      throw CacheIntegrityError("cache: release of unknown entry");
    }
    if (it->second.remaining == 0) throw ContractError("cache: more releases than consumers");
    if (--it->second.remaining == 0 && evict_) erase(it);
  }

  /// Drops every entry nobody is waiting for (used at batch boundaries when
  /// per-use eviction is off).
  void sweep() {
    for (auto it = slots_.begin(); it != slots_.end();) {
      auto next = std::next(it);
      if (it->second.remaining == 0) erase(it);
      it = next;
    }
  }

  std::size_t bytes() const { return bytes_; }
  std::size_t peak_bytes() const { return peak_; }
  std::size_t size() const { return slots_.size(); }
  /// Sum of the stored bytes recomputed from live entries.
  std::size_t recount() const {
    std::size_t n = 0;
    for (const auto& [k, s] : slots_) n += s.entry.bytes();
    return n;
  }

 private:
  using Key = std::pair<std::size_t, std::size_t>;
  struct Slot {
    LayerCacheEntry<T> entry;
    std::size_t remaining = 0;
  };
  Slot& slot(std::size_t frame, std::size_t layer) {
    auto it = slots_.find({frame, layer});
    if (it == slots_.end()) throw CacheIntegrityError("cache: no entry to fill");
    return it->second;
  }
  void erase(typename std::map<Key, Slot>::iterator it) {
    bytes_ -= it->second.entry.bytes();
    evicted_.insert(it->first);
    slots_.erase(it);
  }

  bool evict_;
  std::map<Key, Slot> slots_;
  std::set<Key> evicted_;
  std::size_t bytes_ = 0;
  std::size_t peak_ = 0;
};

template <class T>
void evict_after_last_use(ActivationCache<T>& cache, std::size_t frame, std::size_t layer) {
  cache.release(frame, layer);
}

// ---------------------------------------------------------------------------
// Sparse computation compaction

namespace detail {
template <class T>
std::vector<Tensor<T>> split_rows(const Tensor<T>& x, const std::vector<std::size_t>& counts) {
  std::vector<Tensor<T>> out;
  std::size_t start = 0;
  for (auto c : counts) {
    std::vector<std::size_t> idx(c);
    for (std::size_t i = 0; i < c; ++i) idx[i] = start + i;
    out.push_back(gather_rows(x, idx));
    start += c;
  }
  return out;
}
}  // namespace detail

/// Gathers the active rows of several frames into one matrix, runs `block`
/// once and splits the result back per frame. A frame with no active rows
/// gets a 0-row output.
template <class T, class Block>
std::vector<Tensor<T>> compact_execute(Block&& block, const std::vector<Tensor<T>>& inputs,
                                       const std::vector<std::vector<std::size_t>>& active) {
  if (inputs.size() != active.size()) throw ContractError("compact_execute: one row list per frame required");
  std::vector<Tensor<T>> parts;
  std::vector<std::size_t> counts;
  for (std::size_t f = 0; f < inputs.size(); ++f) {
    if (inputs[f].rank() != 2 || inputs[f].cols() != inputs.front().cols())
      throw ContractError("compact_execute: frames disagree on row width");
    counts.push_back(active[f].size());
    if (!active[f].empty()) parts.push_back(gather_rows(inputs[f], active[f]));
  }
  if (parts.empty()) {
    std::vector<Tensor<T>> empty;
    for (std::size_t f = 0; f < inputs.size(); ++f) empty.push_back(Tensor<T>::zeros({0, inputs[f].cols()}));
    return empty;
  }
  return detail::split_rows(block(concat_rows(parts)), counts);
}

/// Runs chain k once over the active rows of several frames.
template <class T>
std::vector<ChainOutput<T>> compact_chain(const Backbone<T>& bb, std::size_t k, const std::vector<Tensor<T>>& inputs,
                                          const std::vector<std::vector<std::size_t>>& active) {
  std::vector<Tensor<T>> x, qkv;
  auto inc = compact_execute<T>(
      [&](const Tensor<T>& rows) {
        auto out = run_chain(bb, k, rows);
        std::vector<std::size_t> counts;
        for (const auto& a : active) counts.push_back(a.size());
        x = detail::split_rows(out.x, counts);
        qkv = detail::split_rows(out.qkv, counts);
        return out.increment;
      },
      inputs, active);
  if (x.empty()) {  // nothing active, block never ran
    const std::size_t d = bb.cfg.dim;
    x.assign(inputs.size(), Tensor<T>::zeros({0, d}));
    qkv.assign(inputs.size(), Tensor<T>::zeros({0, 3 * d}));
  }
  std::vector<ChainOutput<T>> res;
  for (std::size_t f = 0; f < inputs.size(); ++f) res.push_back({inc[f], x[f], qkv[f]});
  return res;
}

// ---------------------------------------------------------------------------
// Execution

enum class SparseMode {
  masked,     // run the chain over every row, then keep the recompute rows
  per_frame,  // gather each frame's recompute rows and run them separately
  compacted,  // gather recompute rows of all frames at the current chain (layer-wise only)
};

inline std::string to_string(SparseMode m) {
  switch (m) {
    case SparseMode::masked: return "masked";
    case SparseMode::per_frame: return "per_frame";
    case SparseMode::compacted: return "compacted";
  }
  return "?";
}

struct ExecutionOptions {
  bool layer_wise = true;
  bool memory_compaction = true;
  SparseMode sparse = SparseMode::compacted;
  std::size_t batch_segments = 4;
};

struct CacheTracePoint {
  std::size_t batch;
  std::size_t layer;
  std::size_t frame;  // display index of the frame whose step just finished
  std::size_t bytes;
};

struct RunMetrics {
  FlopCounter flops;
  std::vector<double> reuse_rate_by_layer;
  std::vector<double> frame_reuse;  // display order, mean over chains
  std::size_t peak_cache_bytes = 0;
  std::vector<CacheTracePoint> cache_trace;
  std::vector<std::size_t> batch_end_bytes;
  double wall_time_s = 0.0;
  double frames_per_second = 0.0;
  std::size_t frames = 0;

  double reuse_rate() const {
    if (reuse_rate_by_layer.empty()) return 0.0;
    double s = 0.0;
    for (double r : reuse_rate_by_layer) s += r;
    return s / static_cast<double>(reuse_rate_by_layer.size());
  }
};

/// One video as fed to the runtime. `codec[f]` holds the per-patch motion
/// magnitude of display frame f relative to its references (may be empty,
/// meaning zeros).
template <class T>
struct VideoInput {
  std::string id;
  std::vector<Tensor<T>> frames;
  std::vector<std::vector<T>> codec;
};

template <class T>
struct ExecutionResult {
  std::vector<Tensor<T>> embeddings;                        // display order, each [1 x D]
  std::vector<std::vector<std::vector<std::uint8_t>>> masks;  // [frame][chain][patch]
  RunMetrics metrics;
};

namespace detail {

template <class T>
class VideoRun {
 public:
  VideoRun(const Backbone<T>& bb, const VideoInput<T>& video, const GopPlan& plan, const GatePolicy<T>& policy,
           const ExecutionOptions& opt)
      : bb_(bb), video_(video), plan_(plan), policy_(policy), opt_(opt), cache_(opt.memory_compaction),
        consumers_(plan.consumer_counts()) {
    const std::size_t n = plan.n_frames;
    if (video.frames.size() != n) throw ContractError("execute: plan and video disagree on frame count");
    if (opt.batch_segments == 0) throw ConfigError("execute: batch_segments must be >= 1");
    validate_plan(plan);
    u_.resize(n);
    cls_.resize(n);
    ctx_.resize(n);
    result_.embeddings.resize(n);
    result_.masks.assign(n, {});
    for (std::size_t f = 0; f < n; ++f) {
      ctx_[f].type = plan.type[f];
      if (f < video.codec.size() && !video.codec[f].empty()) {
        if (video.codec[f].size() != bb.cfg.patches()) throw ShapeError("execute: codec metadata length mismatch");
        ctx_[f].codec = video.codec[f];
      } else {
        ctx_[f].codec.assign(bb.cfg.patches(), T{0});
      }
    }
  }

  ExecutionResult<T> run() {
    FlopScope scope(result_.metrics.flops);
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t s = 0; s < plan_.segments.size(); s += opt_.batch_segments) {
      std::vector<std::size_t> batch;
      for (std::size_t j = s; j < std::min(plan_.segments.size(), s + opt_.batch_segments); ++j)
        batch.insert(batch.end(), plan_.segments[j].begin(), plan_.segments[j].end());
      if (opt_.layer_wise)
        run_layer_wise(batch);
      else
        run_frame_wise(batch);
      if (!opt_.memory_compaction) cache_.sweep();
      result_.metrics.batch_end_bytes.push_back(cache_.bytes());
      ++batch_index_;
    }
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    finish_metrics(wall);
    return std::move(result_);
  }

 private:
  ReferencePair<T> refs(std::size_t f, std::size_t k) const {
    ReferencePair<T> r;
    if (plan_.past_ref[f]) r.past = &cache_.get(*plan_.past_ref[f], k);
    if (plan_.future_ref[f]) r.future = &cache_.get(*plan_.future_ref[f], k);
    return r;
  }

  PendingChain<T> decide(std::size_t f, std::size_t k) {
    if (k == 0) u_[f] = patch_embed(bb_, video_.frames[f]);
    if (consumers_[f] > 0) cache_.put(f, k, u_[f], consumers_[f]);
    return decide_chain(policy_, k, u_[f], refs(f, k), cls_[f], ctx_[f]);
  }

  ChainOutput<T> recompute_one(std::size_t k, const PendingChain<T>& p) {
    if (opt_.sparse == SparseMode::masked) {
      auto full = run_chain(bb_, k, p.input);
      return {gather_rows(full.increment, p.part.recompute), gather_rows(full.x, p.part.recompute),
              gather_rows(full.qkv, p.part.recompute)};
    }
    return run_chain(bb_, k, gather_rows(p.input, p.part.recompute));
  }

  void complete(std::size_t f, std::size_t k, const PendingChain<T>& p, const ChainOutput<T>& recomputed) {
    auto done = complete_chain(bb_, policy_, k, p, refs(f, k), recomputed);
    if (consumers_[f] > 0) cache_.fill(f, k, done.entry.increment, done.entry.qkv);
    if (plan_.past_ref[f]) evict_after_last_use(cache_, *plan_.past_ref[f], k);
    if (plan_.future_ref[f]) evict_after_last_use(cache_, *plan_.future_ref[f], k);
    u_[f] = done.y;
    cls_[f] = done.cls_attention;
    result_.masks[f].push_back(p.mask);
    if (k + 1 == bb_.cfg.layers) {
      result_.embeddings[f] = final_embedding(bb_, u_[f]);
      u_[f] = Tensor<T>();
      cls_[f] = Tensor<T>();
    }
    result_.metrics.cache_trace.push_back({batch_index_, k, f, cache_.bytes()});
  }

  void run_frame_wise(const std::vector<std::size_t>& batch) {
    for (auto f : batch)
      for (std::size_t k = 0; k < bb_.cfg.layers; ++k) {
        auto p = decide(f, k);
        complete(f, k, p, recompute_one(k, p));
      }
  }

  void run_layer_wise(const std::vector<std::size_t>& batch) {
    for (std::size_t k = 0; k < bb_.cfg.layers; ++k) {
      std::vector<PendingChain<T>> pending;
      for (auto f : batch) pending.push_back(decide(f, k));
      std::vector<ChainOutput<T>> recomputed;
      if (opt_.sparse == SparseMode::compacted) {
        std::vector<Tensor<T>> inputs;
        std::vector<std::vector<std::size_t>> rows;
        for (const auto& p : pending) {
          inputs.push_back(p.input);
          rows.push_back(p.part.recompute);
        }
        recomputed = compact_chain(bb_, k, inputs, rows);
      } else {
        for (const auto& p : pending) recomputed.push_back(recompute_one(k, p));
      }
      for (std::size_t i = 0; i < batch.size(); ++i) complete(batch[i], k, pending[i], recomputed[i]);
    }
  }

  void finish_metrics(double wall) {
    auto& m = result_.metrics;
    const std::size_t n = plan_.n_frames, layers = bb_.cfg.layers;
    m.frames = n;
    m.reuse_rate_by_layer.assign(layers, 0.0);
    m.frame_reuse.assign(n, 0.0);
    for (std::size_t f = 0; f < n; ++f)
      for (std::size_t k = 0; k < layers; ++k) {
        const double r = mask_rate(result_.masks[f][k]);
        m.reuse_rate_by_layer[k] += r / static_cast<double>(n);
        m.frame_reuse[f] += r / static_cast<double>(layers);
      }
    m.peak_cache_bytes = cache_.peak_bytes();
    m.wall_time_s = wall;
    m.frames_per_second = wall > 0.0 ? static_cast<double>(n) / wall : 0.0;
  }

  const Backbone<T>& bb_;
  const VideoInput<T>& video_;
  const GopPlan& plan_;
  const GatePolicy<T>& policy_;
  ExecutionOptions opt_;
  ActivationCache<T> cache_;
  std::vector<std::size_t> consumers_;
  std::vector<Tensor<T>> u_, cls_;
  std::vector<FrameContext<T>> ctx_;
  ExecutionResult<T> result_;
  std::size_t batch_index_ = 0;
};

}  // namespace detail

/// Runs every frame of a planned video and returns display-order embeddings.
/// Scheduling and compaction options never change the math.
template <class T>
ExecutionResult<T> execute(const Backbone<T>& bb, const VideoInput<T>& video, const GopPlan& plan,
                           const GatePolicy<T>& policy, const ExecutionOptions& opt = {}) {
  NoGradScope<T> no_grad;
  return detail::VideoRun<T>(bb, video, plan, policy, opt).run();
}

/// Bytes of one cache entry (chain input, increment, QKV; all rows).
inline std::size_t cache_entry_bytes(const ViTConfig& cfg, std::size_t scalar_bytes = sizeof(float)) {
  return cfg.tokens() * cfg.dim * 5 * scalar_bytes;
}

// ---------------------------------------------------------------------------
// Concurrent execution over many videos

/// Thread-safe collector of per-video results.
template <class T>
class MetricsSink {
 public:
  void append(std::string id, ExecutionResult<T> r) {
    std::lock_guard lock(mu_);
    items_.emplace_back(std::move(id), std::move(r));
  }
  /// Results sorted by video id.
  std::vector<std::pair<std::string, ExecutionResult<T>>> take() {
    std::lock_guard lock(mu_);
    auto out = std::move(items_);
    items_.clear();
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    return out;
  }

 private:
  std::mutex mu_;
  std::vector<std::pair<std::string, ExecutionResult<T>>> items_;
};

/// Executes videos on `workers` threads, each video with its own cache.
template <class T>
std::vector<std::pair<std::string, ExecutionResult<T>>> execute_videos(const Backbone<T>& bb,
                                                                      const std::vector<VideoInput<T>>& videos,
                                                                      const std::vector<GopPlan>& plans,
                                                                      const GatePolicy<T>& policy,
                                                                      const ExecutionOptions& opt,
                                                                      std::size_t workers = 1) {
  if (videos.size() != plans.size()) throw ContractError("execute_videos: one plan per video required");
  MetricsSink<T> sink;
  std::mutex err_mu;
  std::exception_ptr err;
  std::size_t next = 0;
  std::mutex next_mu;
  auto worker = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard lock(next_mu);
        if (next >= videos.size()) return;
        i = next++;
      }
      try {
        sink.append(videos[i].id, execute(bb, videos[i], plans[i], policy, opt));
      } catch (...) {
        std::lock_guard lock(err_mu);
        if (!err) err = std::current_exception();
      }
    }
  };
  workers = std::max<std::size_t>(1, std::min(workers, videos.size()));
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
  return sink.take();
}

// ---------------------------------------------------------------------------
// Reporting

inline nlohmann::json metrics_to_json(const RunMetrics& m) {
  nlohmann::json trace = nlohmann::json::array();
  for (const auto& p : m.cache_trace)
    trace.push_back({{"batch", p.batch}, {"layer", p.layer}, {"frame", p.frame}, {"bytes", p.bytes}});
  return {{"flops_total", m.flops.total()},
          {"flops_by_op", m.flops.by_category()},
          {"reuse_rate", m.reuse_rate()},
          {"reuse_rate_by_layer", m.reuse_rate_by_layer},
          {"frame_reuse", m.frame_reuse},
          {"peak_cache_bytes", m.peak_cache_bytes},
          {"cache_trace", trace},
          {"wall_time_s", m.wall_time_s},
          {"frames_per_second", m.frames_per_second},
          {"frames", m.frames}};
}

inline void write_cache_trace_csv(std::ostream& os, const RunMetrics& m) {
  os << "step,batch,layer,frame,bytes\n";
  for (std::size_t i = 0; i < m.cache_trace.size(); ++i) {
    const auto& p = m.cache_trace[i];
    os << i << ',' << p.batch << ',' << p.layer << ',' << p.frame << ',' << p.bytes << '\n';
  }
}

}  // namespace reusevit
