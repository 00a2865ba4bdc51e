// SPDX-License-Identifier: Apache-2.0
//
// Tradeoff benchmark: runs a corpus under several gate/execution configs
// and reports reuse, FLOPs reduction, throughput and fidelity against dense
// execution.
#pragma once

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "reusevit/error.hpp"
#include "reusevit/reuse.hpp"
#include "reusevit/runtime.hpp"
#include "reusevit/scheduler.hpp"
#include "reusevit/synth.hpp"

namespace reusevit {

struct BenchConfig {
  std::string name;
  std::string gate = "learned";  // dense | learned | fixed
  double rate = 0.5;             // fixed-rate gates only
  ExecutionOptions exec;
  std::optional<std::size_t> refresh_period = 20;
  bool reorder = true;
};

inline void from_json(const nlohmann::json& j, BenchConfig& c) {
  c.name = j.at("name").get<std::string>();
  c.gate = j.value("gate", c.gate);
  c.rate = j.value("rate", c.rate);
  c.exec.layer_wise = j.value("layer_wise", c.exec.layer_wise);
  c.exec.memory_compaction = j.value("memory_compaction", c.exec.memory_compaction);
  c.exec.batch_segments = j.value("batch_segments", c.exec.batch_segments);
  const auto sparse = j.value("sparse", std::string("compacted"));
  if (sparse == "masked")
    c.exec.sparse = SparseMode::masked;
  else if (sparse == "per_frame")
    c.exec.sparse = SparseMode::per_frame;
  else if (sparse == "compacted")
    c.exec.sparse = SparseMode::compacted;
  else
    throw ConfigError("bench config " + c.name + ": unknown sparse mode " + sparse);
  if (j.contains("refresh_period"))
    c.refresh_period = j["refresh_period"].is_null() || j["refresh_period"].get<std::size_t>() == 0
                           ? std::nullopt
                           : std::optional<std::size_t>(j["refresh_period"].get<std::size_t>());
  c.reorder = j.value("reorder", c.reorder);
  if (c.gate != "dense" && c.gate != "learned" && c.gate != "fixed")
    throw ConfigError("bench config " + c.name + ": unknown gate " + c.gate);
}

/// Dense reference, the learned gate with and without compaction, and
/// content-agnostic fixed-rate baselines.
inline std::vector<BenchConfig> default_bench_configs(bool with_learned) {
  std::vector<BenchConfig> out;
  out.push_back({"dense", "dense", 0.0, {false, true, SparseMode::per_frame, 4}, 20, true});
  if (with_learned) {
    out.push_back({"learned", "learned", 0.0, {true, true, SparseMode::compacted, 4}, 20, true});
    out.push_back({"learned_uncompacted", "learned", 0.0, {false, false, SparseMode::masked, 4}, 20, true});
    out.push_back({"learned_no_reorder", "learned", 0.0, {true, true, SparseMode::compacted, 4}, 20, false});
  }
  for (double r : {0.3, 0.5, 0.7}) {
    char name[32];
    std::snprintf(name, sizeof(name), "fixed_%.1f", r);
    out.push_back({name, "fixed", r, {true, true, SparseMode::compacted, 4}, 20, true});
  }
  return out;
}

struct BenchRow {
  std::string name;
  double reuse_rate = 0.0;
  double flops_reduction = 1.0;   // dense FLOPs / config FLOPs
  double throughput_ratio = 1.0;  // dense wall time / config wall time
  double mean_cos = 1.0;          // vs dense embeddings, all frames
  std::size_t peak_cache_bytes = 0;
  double wall_time_s = 0.0;
  std::uint64_t flops = 0;
};

struct BenchFrameRow {
  std::string config, video;
  std::size_t frame;
  FrameType type;
  double reuse;
  double cos;
};

struct BenchReport {
  std::vector<BenchRow> rows;  // sorted by reuse rate
  std::vector<BenchFrameRow> frames;
};

inline VideoInput<float> video_input(const Video& v, const GopPlan& plan) {
  VideoInput<float> in{v.id, {}, codec_for_plan(v, plan)};
  for (std::size_t f = 0; f < v.size(); ++f) in.frames.push_back(v.frame(f));
  return in;
}

inline std::unique_ptr<GatePolicy<float>> make_policy(const BenchConfig& c, const GateModule<float>* gate) {
  if (c.gate == "dense") return std::make_unique<DenseGate<float>>();
  if (c.gate == "fixed") return std::make_unique<FixedRateGate<float>>(c.rate);
  if (gate == nullptr) throw ConfigError("bench config " + c.name + " needs a trained gate");
  return std::make_unique<LearnedGate<float>>(*gate);
}

/// Median wall time of `runs` timed repetitions after `warmup` untimed ones.
template <class F>
double median_wall_time(F&& fn, std::size_t runs = 5, std::size_t warmup = 1) {
  for (std::size_t i = 0; i < warmup; ++i) fn();
  std::vector<double> t;
  for (std::size_t i = 0; i < std::max<std::size_t>(1, runs); ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    t.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  std::sort(t.begin(), t.end());
  return t[t.size() / 2];
}

inline BenchReport run_bench(const Backbone<float>& bb, const GateModule<float>* gate, const std::vector<Video>& videos,
                             const std::vector<BenchConfig>& configs, std::size_t runs = 5, std::size_t warmup = 1) {
  if (configs.empty()) throw ConfigError("bench: no configs");
  if (videos.empty()) throw ConfigError("bench: empty corpus");
  struct Run {
    std::vector<ExecutionResult<float>> results;
    double wall = 0.0;
  };
  auto run_config = [&](const BenchConfig& c) {
    auto policy = make_policy(c, gate);
    std::vector<GopPlan> plans;
    std::vector<VideoInput<float>> inputs;
    for (const auto& v : videos) {
      plans.push_back(plan_gop(v.size(), c.refresh_period, c.reorder));
      inputs.push_back(video_input(v, plans.back()));
    }
    Run r;
    for (std::size_t i = 0; i < videos.size(); ++i) r.results.push_back(execute(bb, inputs[i], plans[i], *policy, c.exec));
    r.wall = median_wall_time(
        [&] {
          for (std::size_t i = 0; i < videos.size(); ++i) execute(bb, inputs[i], plans[i], *policy, c.exec);
        },
        runs, warmup);
    return std::make_pair(std::move(r), std::move(plans));
  };

  BenchConfig dense_cfg{"dense", "dense", 0.0, {false, true, SparseMode::per_frame, 4}, 20, true};
  auto [dense, dense_plans] = run_config(dense_cfg);
  std::uint64_t dense_flops = 0;
  for (const auto& r : dense.results) dense_flops += r.metrics.flops.total();

  BenchReport rep;
  for (const auto& c : configs) {
    auto [run, plans] = c.gate == "dense" && c.exec.layer_wise == dense_cfg.exec.layer_wise &&
                                c.exec.sparse == dense_cfg.exec.sparse
                            ? std::make_pair(dense, dense_plans)
                            : run_config(c);
    BenchRow row;
    row.name = c.name;
    row.wall_time_s = run.wall;
    double reuse = 0.0, cos = 0.0;
    std::size_t frames = 0;
    for (std::size_t i = 0; i < videos.size(); ++i) {
      const auto& res = run.results[i];
      row.flops += res.metrics.flops.total();
      row.peak_cache_bytes = std::max(row.peak_cache_bytes, res.metrics.peak_cache_bytes);
      for (std::size_t f = 0; f < videos[i].size(); ++f) {
        const double cf = cosine_similarity(res.embeddings[f], dense.results[i].embeddings[f]).item();
        const double rf = res.metrics.frame_reuse[f];
        rep.frames.push_back({c.name, videos[i].id, f, plans[i].type[f], rf, cf});
        reuse += rf;
        cos += cf;
        ++frames;
      }
    }
    row.reuse_rate = reuse / static_cast<double>(frames);
    row.mean_cos = cos / static_cast<double>(frames);
    row.flops_reduction = static_cast<double>(dense_flops) / static_cast<double>(row.flops);
    row.throughput_ratio = run.wall > 0.0 ? dense.wall / run.wall : 0.0;
    rep.rows.push_back(row);
  }
  std::stable_sort(rep.rows.begin(), rep.rows.end(),
                   [](const BenchRow& a, const BenchRow& b) { return a.reuse_rate < b.reuse_rate; });
  return rep;
}

inline void write_bench_csv(std::ostream& os, const BenchReport& rep) {
  os << "name,reuse_rate,flops_reduction,throughput_ratio,mean_cos,peak_cache_bytes,wall_time_s\n";
  os.precision(6);
  for (const auto& r : rep.rows)
    os << r.name << ',' << r.reuse_rate << ',' << r.flops_reduction << ',' << r.throughput_ratio << ',' << r.mean_cos
       << ',' << r.peak_cache_bytes << ',' << r.wall_time_s << '\n';
}

inline void write_bench_frames_csv(std::ostream& os, const BenchReport& rep) {
  os << "config,video,frame,type,reuse,cos\n";
  os.precision(6);
  for (const auto& f : rep.frames)
    os << f.config << ',' << f.video << ',' << f.frame << ',' << to_string(f.type) << ',' << f.reuse << ',' << f.cos
       << '\n';
}

}  // namespace reusevit
