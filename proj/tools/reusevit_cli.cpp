// SPDX-License-Identifier: Apache-2.0
//
// reusevit: corpus generation, gate training, embedding, retrieval and
// benchmarking from the command line.
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "reusevit/reusevit.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace reusevit;

namespace {

/// Fills `field` from `j[key]` when present.
template <class V>
void take(const json& j, const char* key, V& field) {
  if (j.contains(key) && !j[key].is_null()) field = j[key].get<V>();
}

json load_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path);
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
}

/// Looks for "--config <path>" ahead of parsing so file values become the
/// defaults that explicit flags override.
json preload_config(int argc, char** argv) {
  for (int i = 1; i + 1 < argc; ++i)
    if (std::string(argv[i]) == "--config") return load_json_file(argv[i + 1]);
  return json::object();
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty()) return;
  if (auto dir = fs::path(path).parent_path(); !dir.empty()) fs::create_directories(dir);
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  os << text;
}

// ---------------------------------------------------------------------------
// Shared backbone / plan options

struct BackboneOpts {
  ViTConfig vit;
  std::uint64_t seed = 1;
  std::string weights;

  void defaults(const json& j) {
    if (j.contains("backbone")) {
      const auto& b = j["backbone"];
      take(b, "layers", vit.layers);
      take(b, "dim", vit.dim);
      take(b, "heads", vit.heads);
      take(b, "grid_rows", vit.grid_rows);
      take(b, "grid_cols", vit.grid_cols);
      take(b, "ffn_hidden", vit.ffn_hidden);
      take(b, "patch_pixels", vit.patch_pixels);
    }
    take(j, "backbone_seed", seed);
    take(j, "weights", weights);
  }
  void add(CLI::App* app) {
    app->add_option("--weights", weights, "Backbone checkpoint (RVW1); overrides --backbone-seed");
    app->add_option("--backbone-seed", seed, "Seed for the stand-in backbone weights");
    app->add_option("--layers", vit.layers, "Encoder layers");
    app->add_option("--dim", vit.dim, "Embedding width");
    app->add_option("--heads", vit.heads, "Attention heads");
    app->add_option("--ffn-hidden", vit.ffn_hidden, "FFN hidden width");
  }
  Backbone<float> load(const Video* sample) {
    if (!weights.empty()) return load_backbone(weights);
    if (sample) {
      vit.grid_rows = sample->grid_rows;
      vit.grid_cols = sample->grid_cols;
      vit.patch_pixels = sample->patch_pixels;
    }
    return init_backbone(vit, seed);
  }
};

struct PlanOpts {
  std::size_t refresh_period = 20;  // 0 disables refresh
  bool no_reorder = false;

  void defaults(const json& j) {
    take(j, "refresh_period", refresh_period);
    if (j.contains("reorder")) no_reorder = !j["reorder"].get<bool>();
  }
  void add(CLI::App* app) {
    app->add_option("--refresh-period", refresh_period, "Insert an I frame every N frames (multiple of 4; 0 = never)");
    app->add_flag("--no-reorder", no_reorder, "Low-latency all-P plan without out-of-order frames");
  }
  std::optional<std::size_t> refresh() const {
    return refresh_period == 0 ? std::nullopt : std::optional<std::size_t>(refresh_period);
  }
};

void check_corpus(const std::vector<Video>& videos, const Backbone<float>& bb) {
  for (const auto& v : videos)
    if (v.patches() != bb.cfg.patches() || v.patch_pixels != bb.cfg.patch_pixels)
      throw ConfigError("video " + v.id + " has a " + std::to_string(v.grid_rows) + "x" + std::to_string(v.grid_cols) +
                        " grid of " + std::to_string(v.patch_pixels) + "-pixel patches; backbone expects " +
                        std::to_string(bb.cfg.grid_rows) + "x" + std::to_string(bb.cfg.grid_cols) + " of " +
                        std::to_string(bb.cfg.patch_pixels));
}

std::optional<GateModule<float>> load_gate_for(const std::string& path, const Backbone<float>& bb) {
  if (path.empty()) return std::nullopt;
  auto g = load_gate(path);
  if (g.cfg.layers != bb.cfg.layers || g.cfg.dim != bb.cfg.dim)
    throw ConfigError("gate " + path + " (layers " + std::to_string(g.cfg.layers) + ", dim " +
                      std::to_string(g.cfg.dim) + ") does not match the backbone");
  return g;
}

// ---------------------------------------------------------------------------
// gen

struct GenCmd {
  SyntheticVideoSpec spec;
  std::string out;
  std::size_t count = 1;

  void defaults(const json& j) {
    if (j.contains("video")) from_json(j["video"], spec);
    take(j, "out", out);
    take(j, "count", count);
  }
  void add(CLI::App* app) {
    app->add_option("--out", out, "Output .rvf file, or directory when --count > 1");
    app->add_option("--count", count, "Number of videos (seeds seed, seed+1, ...)");
    app->add_option("--frames", spec.n_frames, "Frames per video");
    app->add_option("--grid-rows", spec.grid_rows, "Patch grid rows");
    app->add_option("--grid-cols", spec.grid_cols, "Patch grid columns");
    app->add_option("--patch-pixels", spec.patch_pixels, "Values per patch");
    app->add_option("--motion-rate", spec.motion_rate, "Fraction of patches replaced per frame");
    app->add_option("--noise-std", spec.noise_std, "Observation noise");
    app->add_option("--drift", spec.drift, "steady | alternating");
    app->add_option("--drift-span", spec.drift_span, "Frames per span for alternating drift");
    app->add_option("--drift-motion-rate", spec.drift_motion_rate, "Motion rate of the high-motion spans");
    app->add_option("--fps", spec.fps, "Frame rate stored as metadata");
    app->add_option("--seed", spec.seed, "Generator seed");
    app->add_option("--video-id", spec.video_id, "Video id (suffixed with _NNN when --count > 1)");
  }
  int run() {
    if (out.empty()) throw ConfigError("gen: --out is required");
    if (count == 0) throw ConfigError("gen: --count must be >= 1");
    if (count == 1) {
      if (auto dir = fs::path(out).parent_path(); !dir.empty()) fs::create_directories(dir);
      save_video(generate_video(spec), out, spec);
      std::cout << "wrote " << out << '\n';
      return 0;
    }
    fs::create_directories(out);
    for (std::size_t i = 0; i < count; ++i) {
      auto s = spec;
      std::ostringstream id;
      id << spec.video_id << '_' << std::setw(3) << std::setfill('0') << i;
      s.video_id = id.str();
      s.seed = spec.seed + i;
      save_video(generate_video(s), (fs::path(out) / (s.video_id + ".rvf")).string(), s);
    }
    std::cout << "wrote " << count << " videos to " << out << '\n';
    return 0;
  }
};

// ---------------------------------------------------------------------------
// train

struct TrainCmd {
  BackboneOpts backbone;
  TrainConfig cfg;
  std::string corpus, out = "gate.rvg", log = "train_log.csv", sweep, save_weights, tradeoff = "tradeoff.csv";
  std::uint64_t gate_seed = 7;
  double target_cos = 0.0;

  void defaults(const json& j) {
    backbone.defaults(j);
    take(j, "corpus", corpus);
    take(j, "out", out);
    take(j, "log", log);
    take(j, "gate_seed", gate_seed);
    if (j.contains("train")) {
      const auto& t = j["train"];
      take(t, "alpha", cfg.alpha);
      take(t, "r_target", cfg.r_target);
      take(t, "temp_start", cfg.temp_start);
      take(t, "temp_end", cfg.temp_end);
      take(t, "lr", cfg.lr);
      take(t, "steps", cfg.steps);
      take(t, "groups_per_step", cfg.groups_per_step);
      take(t, "seed", cfg.seed);
      take(t, "eval_every", cfg.eval_every);
      take(t, "target_cos", target_cos);
    }
  }
  void add(CLI::App* app) {
    backbone.add(app);
    app->add_option("--corpus", corpus, "Frames file or directory of .rvf files");
    app->add_option("--out", out, "Gate checkpoint (RVG1)");
    app->add_option("--log", log, "Training log CSV");
    app->add_option("--steps", cfg.steps, "Optimiser steps");
    app->add_option("--alpha", cfg.alpha, "Weight of the reuse hinge");
    app->add_option("--r-target", cfg.r_target, "Target reuse rate");
    app->add_option("--lr", cfg.lr, "Adam learning rate");
    app->add_option("--temp-start", cfg.temp_start, "Initial Gumbel-Softmax temperature");
    app->add_option("--temp-end", cfg.temp_end, "Final Gumbel-Softmax temperature");
    app->add_option("--groups-per-step", cfg.groups_per_step, "Training groups averaged per step");
    app->add_option("--seed", cfg.seed, "Sampling seed");
    app->add_option("--gate-seed", gate_seed, "Gate initialisation seed");
    app->add_option("--target-cos", target_cos, "Adapt R_target and keep the best snapshot with cos >= this");
    app->add_option("--eval-every", cfg.eval_every, "Evaluation interval in target-cos mode");
    app->add_option("--sweep", sweep, "Comma-separated R_target values; one checkpoint each plus a tradeoff CSV");
    app->add_option("--tradeoff", tradeoff, "Tradeoff CSV written by --sweep");
    app->add_option("--save-weights", save_weights, "Also write the backbone checkpoint (RVW1)");
  }

  int run() {
    if (corpus.empty()) throw ConfigError("train: --corpus is required");
    auto videos = load_corpus(corpus);
    auto bb = backbone.load(&videos.front());
    check_corpus(videos, bb);
    if (!save_weights.empty()) save_backbone(bb, save_weights);
    if (target_cos > 0.0) cfg.target_cos = target_cos;
    if (sweep.empty()) {
      train_one(bb, videos, cfg, out, log);
      return 0;
    }
    std::vector<double> targets;
    std::stringstream ss(sweep);
    for (std::string tok; std::getline(ss, tok, ',');) {
      try {
        targets.push_back(std::stod(tok));
      } catch (const std::exception&) {
        throw ConfigError("train: bad --sweep value \"" + tok + "\"");
      }
    }
    std::ostringstream csv;
    csv << "r_target,checkpoint,reuse_rate,cos\n";
    const auto stem = fs::path(out).replace_extension().string();
    const auto log_stem = fs::path(log).replace_extension().string();
    for (double r : targets) {
      auto c = cfg;
      c.r_target = r;
      std::ostringstream tag;
      tag << std::fixed << std::setprecision(2) << r;
      const auto ckpt = stem + "_r" + tag.str() + ".rvg";
      auto ev = train_one(bb, videos, c, ckpt, log_stem + "_r" + tag.str() + ".csv");
      csv << r << ',' << ckpt << ',' << ev.reuse_rate << ',' << ev.cos << '\n';
    }
    write_text(tradeoff, csv.str());
    std::cout << "wrote " << tradeoff << '\n';
    return 0;
  }

  GroupEval train_one(const Backbone<float>& bb, const std::vector<Video>& videos, const TrainConfig& c,
                      const std::string& ckpt, const std::string& log_path) {
    auto res = train(bb, init_gate(GateConfig::for_backbone(bb.cfg), gate_seed), videos, c);
    if (auto dir = fs::path(ckpt).parent_path(); !dir.empty()) fs::create_directories(dir);
    save_gate(res.gate, ckpt);
    std::ostringstream os;
    write_train_log_csv(os, res.log);
    write_text(log_path, os.str());
    std::vector<std::pair<const Video*, TrainingGroup>> groups;
    for (const auto& v : videos)
      for (auto& g : build_training_groups(v.size())) groups.emplace_back(&v, std::move(g));
    auto ev = evaluate_groups(bb, res.gate, groups);
    std::cout << "r_target " << c.r_target << ": reuse " << ev.reuse_rate << ", cos " << ev.cos << " -> " << ckpt
              << '\n';
    return ev;
  }
};

// ---------------------------------------------------------------------------
// embed

ExecutionOptions exec_options(bool frame_wise, bool no_memory_compaction, const std::string& sparse,
                              std::size_t batch) {
  ExecutionOptions o;
  o.layer_wise = !frame_wise;
  o.memory_compaction = !no_memory_compaction;
  if (sparse == "masked")
    o.sparse = SparseMode::masked;
  else if (sparse == "per_frame")
    o.sparse = SparseMode::per_frame;
  else if (sparse == "compacted")
    o.sparse = SparseMode::compacted;
  else
    throw ConfigError("unknown --sparse mode " + sparse);
  o.batch_segments = batch;
  return o;
}

struct EmbedCmd {
  BackboneOpts backbone;
  PlanOpts plan;
  std::string corpus, store = "embeddings.rve", gate, metrics, frames_csv, trace_csv, sparse = "compacted";
  bool frame_wise = false, no_memory_compaction = false;
  std::size_t batch_segments = 4, workers = 1;

  void defaults(const json& j) {
    backbone.defaults(j);
    plan.defaults(j);
    take(j, "corpus", corpus);
    take(j, "store", store);
    take(j, "gate", gate);
    take(j, "metrics", metrics);
    take(j, "sparse", sparse);
    take(j, "batch_segments", batch_segments);
    take(j, "workers", workers);
    if (j.contains("layer_wise")) frame_wise = !j["layer_wise"].get<bool>();
    if (j.contains("memory_compaction")) no_memory_compaction = !j["memory_compaction"].get<bool>();
  }
  void add(CLI::App* app) {
    backbone.add(app);
    plan.add(app);
    app->add_option("--corpus", corpus, "Frames file or directory of .rvf files");
    app->add_option("--store", store, "Embedding store (RVE1); created when missing");
    app->add_option("--gate", gate, "Gate checkpoint (RVG1); dense execution when omitted");
    app->add_option("--metrics", metrics, "Metrics JSON output");
    app->add_option("--frames-csv", frames_csv, "Per-frame CSV (reuse, cos to dense)");
    app->add_option("--cache-trace", trace_csv, "Cache trace CSV of the first computed video");
    app->add_flag("--frame-wise", frame_wise, "Run every layer of a frame before the next frame");
    app->add_flag("--no-memory-compaction", no_memory_compaction, "Keep cache entries until the batch ends");
    app->add_option("--sparse", sparse, "masked | per_frame | compacted");
    app->add_option("--batch-segments", batch_segments, "Segments per layer-wise batch");
    app->add_option("--workers", workers, "Videos processed concurrently");
  }

  int run() {
    if (corpus.empty()) throw ConfigError("embed: --corpus is required");
    auto videos = load_corpus(corpus);
    auto bb = backbone.load(&videos.front());
    check_corpus(videos, bb);
    auto g = load_gate_for(gate, bb);
    auto st = EmbeddingStore::open(store, bb.cfg.dim, static_cast<float>(videos.front().fps));
    const auto opt = exec_options(frame_wise, no_memory_compaction, sparse, batch_segments);
    std::unique_ptr<GatePolicy<float>> policy;
    if (g)
      policy = std::make_unique<LearnedGate<float>>(*g);
    else
      policy = std::make_unique<DenseGate<float>>();
    DenseGate<float> dense_policy;

    // Compute on miss: only videos with at least one absent frame run.
    std::vector<VideoInput<float>> inputs;
    std::vector<GopPlan> plans;
    std::vector<const Video*> todo;
    for (const auto& v : videos) {
      bool complete = true;
      for (std::size_t f = 0; f < v.size() && complete; ++f) complete = st.get(v.id, static_cast<std::uint32_t>(f)).has_value();
      if (complete) continue;
      plans.push_back(plan_gop(v.size(), plan.refresh(), !plan.no_reorder));
      inputs.push_back(video_input(v, plans.back()));
      todo.push_back(&v);
    }
    auto results = execute_videos(bb, inputs, plans, *policy, opt, workers);
    auto dense = g ? execute_videos(bb, inputs, plans, dense_policy, ExecutionOptions{false, true, SparseMode::per_frame, 1}, workers)
                   : results;

    json per_video = json::array();
    std::ostringstream frames;
    frames << "video,frame,type,reuse,cos_to_dense\n";
    double reuse = 0.0, cos = 0.0;
    std::uint64_t flops = 0, dense_flops = 0;
    std::size_t n_frames = 0, peak = 0;
    for (std::size_t i = 0; i < todo.size(); ++i) {
      const auto& [id, res] = results[i];
      const auto& ref = dense[i].second;
      const Video* v = nullptr;
      std::size_t vi = 0;
      for (std::size_t t = 0; t < todo.size(); ++t)
        if (todo[t]->id == id) v = todo[t], vi = t;
      for (std::size_t f = 0; f < v->size(); ++f) {
        const auto key = static_cast<std::uint32_t>(f);
        if (!st.get(v->id, key)) st.put(v->id, key, res.embeddings[f].data());
        const double c = cosine_similarity(res.embeddings[f], ref.embeddings[f]).item();
        frames << v->id << ',' << f << ',' << to_string(plans[vi].type[f]) << ',' << res.metrics.frame_reuse[f] << ','
               << c << '\n';
        cos += c;
        reuse += res.metrics.frame_reuse[f];
        ++n_frames;
      }
      flops += res.metrics.flops.total();
      dense_flops += ref.metrics.flops.total();
      peak = std::max(peak, res.metrics.peak_cache_bytes);
      auto mj = metrics_to_json(res.metrics);
      mj["video_id"] = id;
      per_video.push_back(std::move(mj));
      if (i == 0 && !trace_csv.empty()) {
        std::ostringstream os;
        write_cache_trace_csv(os, res.metrics);
        write_text(trace_csv, os.str());
      }
    }
    json summary{{"videos_computed", todo.size()},
                 {"frames_computed", n_frames},
                 {"store_records", st.size()},
                 {"reuse_rate", n_frames ? reuse / static_cast<double>(n_frames) : 0.0},
                 {"flops_reduction", flops ? static_cast<double>(dense_flops) / static_cast<double>(flops) : 1.0},
                 {"mean_cos_to_dense", n_frames ? cos / static_cast<double>(n_frames) : 1.0},
                 {"peak_cache_bytes", peak},
                 {"gate", g ? gate : std::string("dense")}};
    write_text(metrics, json{{"summary", summary}, {"videos", per_video}}.dump(2) + "\n");
    write_text(frames_csv, frames.str());
    std::cout << summary.dump() << '\n';
    return 0;
  }
};

// ---------------------------------------------------------------------------
// query

struct QueryCmd {
  std::string store, vector, like;
  std::size_t k = 5;
  double noise = 0.0;
  std::uint64_t seed = 0;

  void add(CLI::App* app) {
    app->add_option("--store", store, "Embedding store (RVE1)")->required();
    app->add_option("--k", k, "Number of results");
    app->add_option("--vector", vector, "Comma-separated query vector");
    app->add_option("--like", like, "Use a stored frame as the query: VIDEO_ID:FRAME");
    app->add_option("--noise", noise, "Gaussian noise added to a --like query");
    app->add_option("--seed", seed, "Seed for --noise");
  }
  int run() {
    auto st = EmbeddingStore::open_existing(store);
    std::vector<float> q;
    if (!vector.empty()) {
      std::stringstream ss(vector);
      for (std::string tok; std::getline(ss, tok, ',');) {
        try {
          q.push_back(std::stof(tok));
        } catch (const std::exception&) {
          throw ConfigError("query: bad vector component \"" + tok + "\"");
        }
      }
    } else if (!like.empty()) {
      const auto colon = like.rfind(':');
      if (colon == std::string::npos) throw ConfigError("query: --like expects VIDEO_ID:FRAME");
      std::uint32_t frame = 0;
      try {
        frame = static_cast<std::uint32_t>(std::stoul(like.substr(colon + 1)));
      } catch (const std::exception&) {
        throw ConfigError("query: bad frame index in --like");
      }
      auto rec = st.get(like.substr(0, colon), frame);
      if (!rec) throw ConfigError("query: no stored frame " + like);
      q = rec->vector;
      std::mt19937_64 rng(seed);
      std::normal_distribution<float> n(0.0f, static_cast<float>(noise));
      if (noise > 0.0)
        for (auto& x : q) x += n(rng);
    } else {
      throw ConfigError("query: give --vector or --like");
    }
    auto hits = st.query_topk(q, k);
    std::cout << "rank,video_id,frame_index,timestamp_s,score\n";
    for (std::size_t i = 0; i < hits.size(); ++i)
      std::cout << i + 1 << ',' << hits[i].record->video_id << ',' << hits[i].record->frame_index << ','
                << hits[i].record->timestamp_s << ',' << hits[i].score << '\n';
    return 0;
  }
};

// ---------------------------------------------------------------------------
// bench

struct BenchCmd {
  BackboneOpts backbone;
  std::string corpus, gate, out = "bench.csv", frames_csv;
  std::size_t runs = 5, warmup = 1;
  std::vector<BenchConfig> configs;

  void defaults(const json& j) {
    backbone.defaults(j);
    take(j, "corpus", corpus);
    take(j, "gate", gate);
    take(j, "out", out);
    take(j, "runs", runs);
    take(j, "warmup", warmup);
    if (j.contains("configs")) configs = j["configs"].get<std::vector<BenchConfig>>();
  }
  void add(CLI::App* app) {
    backbone.add(app);
    app->add_option("--corpus", corpus, "Frames file or directory of .rvf files");
    app->add_option("--gate", gate, "Gate checkpoint for the learned configs");
    app->add_option("--out", out, "Tradeoff report CSV");
    app->add_option("--frames-csv", frames_csv, "Per-frame CSV (config, video, frame, type, reuse, cos)");
    app->add_option("--runs", runs, "Timed repetitions (median reported)");
    app->add_option("--warmup", warmup, "Untimed warm-up repetitions");
  }
  int run() {
    if (corpus.empty()) throw ConfigError("bench: --corpus is required");
    auto videos = load_corpus(corpus);
    auto bb = backbone.load(&videos.front());
    check_corpus(videos, bb);
    auto g = load_gate_for(gate, bb);
    if (configs.empty()) configs = default_bench_configs(g.has_value());
    auto rep = run_bench(bb, g ? &*g : nullptr, videos, configs, runs, warmup);
    std::ostringstream os;
    write_bench_csv(os, rep);
    write_text(out, os.str());
    if (!frames_csv.empty()) {
      std::ostringstream fs_;
      write_bench_frames_csv(fs_, rep);
      write_text(frames_csv, fs_.str());
    }
    std::cout << os.str();
    return 0;
  }
};

int run(int argc, char** argv) {
  const json config = preload_config(argc, argv);
  CLI::App app{"Inter-frame computation reuse for ViT video embeddings"};
  app.require_subcommand(1);
  std::string config_path;
  app.add_option("--config", config_path, "JSON config file; command-line flags override its values");

  GenCmd gen;
  TrainCmd tr;
  EmbedCmd emb;
  QueryCmd qry;
  BenchCmd bench;
  gen.defaults(config);
  tr.defaults(config);
  emb.defaults(config);
  bench.defaults(config);

  gen.add(app.add_subcommand("gen", "Generate a synthetic patch-space corpus"));
  tr.add(app.add_subcommand("train", "Train decision and restoration layers"));
  emb.add(app.add_subcommand("embed", "Embed a corpus into the store (compute on miss)"));
  qry.add(app.add_subcommand("query", "Top-k cosine search over the store"));
  bench.add(app.add_subcommand("bench", "Tradeoff benchmark across gate/execution configs"));
  app.fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    throw ConfigError(e.what());
  }

  if (app.got_subcommand("gen")) return gen.run();
  if (app.got_subcommand("train")) return tr.run();
  if (app.got_subcommand("embed")) return emb.run();
  if (app.got_subcommand("query")) return qry.run();
  return bench.run();
}

/// Collapses a message onto one line.
std::string one_line(std::string s) {
  for (auto& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const reusevit::Error& e) {
    std::cerr << "error: " << e.code() << ": " << one_line(e.what()) << '\n';
    return 2;
  } catch (const json::exception& e) {
    std::cerr << "error: E_FORMAT: " << one_line(e.what()) << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: E_INTERNAL: " << one_line(e.what()) << '\n';
    return 3;
  }
}
