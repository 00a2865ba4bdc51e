// SPDX-License-Identifier: Apache-2.0
//
// Synthetic patch-space videos and the "RVF1" frames format.
//
// Every frame is a grid of patches of Gaussian pixels. Between consecutive
// frames each patch is replaced by fresh content with probability
// motion_rate; observation noise is added on top. The per-patch RMS change
// of the underlying content is emitted as a stand-in for codec motion
// metadata.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "reusevit/error.hpp"
#include "reusevit/io.hpp"
#include "reusevit/scheduler.hpp"
#include "reusevit/tensor.hpp"

namespace reusevit {

struct SyntheticVideoSpec {
  std::string video_id = "video";
  std::size_t n_frames = 40;
  std::size_t grid_rows = 4;
  std::size_t grid_cols = 4;
  std::size_t patch_pixels = 48;
  double motion_rate = 0.1;
  double noise_std = 0.05;
  /// "steady": motion_rate throughout. "alternating": spans of drift_span
  /// frames alternate between motion_rate and drift_motion_rate.
  std::string drift = "steady";
  std::size_t drift_span = 20;
  double drift_motion_rate = 0.8;
  double fps = 2.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_frames == 0 || grid_rows == 0 || grid_cols == 0 || patch_pixels == 0)
      throw ConfigError("video spec: sizes must be positive");
    if (motion_rate < 0.0 || motion_rate > 1.0 || drift_motion_rate < 0.0 || drift_motion_rate > 1.0)
      throw ConfigError("video spec: motion rates must lie in [0, 1]");
    if (noise_std < 0.0) throw ConfigError("video spec: noise_std must be >= 0");
    if (drift != "steady" && drift != "alternating") throw ConfigError("video spec: unknown drift pattern " + drift);
    if (drift == "alternating" && drift_span == 0) throw ConfigError("video spec: drift_span must be positive");
    if (!(fps > 0.0)) throw ConfigError("video spec: fps must be positive");
  }

  /// Motion rate in effect when producing frame f from frame f-1.
  double rate_at(std::size_t f) const {
    if (drift == "alternating" && (f / drift_span) % 2 == 1) return drift_motion_rate;
    return motion_rate;
  }
};

inline void to_json(nlohmann::json& j, const SyntheticVideoSpec& s) {
  j = {{"video_id", s.video_id},         {"n_frames", s.n_frames},       {"grid_rows", s.grid_rows},
       {"grid_cols", s.grid_cols},       {"patch_pixels", s.patch_pixels}, {"motion_rate", s.motion_rate},
       {"noise_std", s.noise_std},       {"drift", s.drift},             {"drift_span", s.drift_span},
       {"drift_motion_rate", s.drift_motion_rate}, {"fps", s.fps},       {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, SyntheticVideoSpec& s) {
  SyntheticVideoSpec d;
  s.video_id = j.value("video_id", d.video_id);
  s.n_frames = j.value("n_frames", d.n_frames);
  s.grid_rows = j.value("grid_rows", d.grid_rows);
  s.grid_cols = j.value("grid_cols", d.grid_cols);
  s.patch_pixels = j.value("patch_pixels", d.patch_pixels);
  s.motion_rate = j.value("motion_rate", d.motion_rate);
  s.noise_std = j.value("noise_std", d.noise_std);
  s.drift = j.value("drift", d.drift);
  s.drift_span = j.value("drift_span", d.drift_span);
  s.drift_motion_rate = j.value("drift_motion_rate", d.drift_motion_rate);
  s.fps = j.value("fps", d.fps);
  s.seed = j.value("seed", d.seed);
}

struct Video {
  std::string id;
  std::size_t grid_rows = 0, grid_cols = 0, patch_pixels = 0;
  double fps = 2.0;
  std::vector<std::vector<float>> frames;  // [frame][patch * patch_pixels]
  std::vector<std::vector<float>> motion;  // [frame][patch], frame 0 all zero

  std::size_t patches() const { return grid_rows * grid_cols; }
  std::size_t size() const { return frames.size(); }

  template <class T = float>
  Tensor<T> frame(std::size_t f) const {
    const auto& v = frames.at(f);
    return Tensor<T>({patches(), patch_pixels}, std::vector<T>(v.begin(), v.end()));
  }
};

inline Video generate_video(const SyntheticVideoSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  const std::size_t n = spec.grid_rows * spec.grid_cols, p = spec.patch_pixels;
  Video v;
  v.id = spec.video_id;
  v.grid_rows = spec.grid_rows;
  v.grid_cols = spec.grid_cols;
  v.patch_pixels = p;
  v.fps = spec.fps;
  std::vector<double> content(n * p);
  for (auto& x : content) x = normal(rng);
  for (std::size_t f = 0; f < spec.n_frames; ++f) {
    std::vector<float> motion(n, 0.0f);
    if (f > 0) {
      const double rate = spec.rate_at(f);
      for (std::size_t i = 0; i < n; ++i) {
        if (uni(rng) >= rate) continue;
        double sq = 0.0;
        for (std::size_t j = 0; j < p; ++j) {
          const double fresh = normal(rng);
          sq += (fresh - content[i * p + j]) * (fresh - content[i * p + j]);
          content[i * p + j] = fresh;
        }
        motion[i] = static_cast<float>(std::sqrt(sq / static_cast<double>(p)));
      }
    }
    std::vector<float> frame(n * p);
    for (std::size_t k = 0; k < frame.size(); ++k)
      frame[k] = static_cast<float>(content[k] + (spec.noise_std > 0.0 ? spec.noise_std * normal(rng) : 0.0));
    v.frames.push_back(std::move(frame));
    v.motion.push_back(std::move(motion));
  }
  return v;
}

/// Codec stand-in for frame f: per patch, the content motion accumulated
/// between f and each of its references, minimum over references. Empty for
/// frames without references.
inline std::vector<float> codec_features(const Video& v, std::size_t f, std::optional<std::size_t> past,
                                         std::optional<std::size_t> future) {
  if (!past && !future) return {};
  const std::size_t n = v.patches();
  auto accumulated = [&](std::size_t a, std::size_t b) {
    std::vector<float> c(n, 0.0f);
    for (std::size_t t = std::min(a, b) + 1; t <= std::max(a, b); ++t)
      for (std::size_t i = 0; i < n; ++i) c[i] += v.motion.at(t)[i];
    return c;
  };
  std::vector<float> out = accumulated(past ? *past : *future, f);
  if (past && future) {
    auto other = accumulated(*future, f);
    for (std::size_t i = 0; i < n; ++i) out[i] = std::min(out[i], other[i]);
  }
  return out;
}

inline std::vector<std::vector<float>> codec_for_plan(const Video& v, const GopPlan& plan) {
  std::vector<std::vector<float>> c(plan.n_frames);
  for (std::size_t f = 0; f < plan.n_frames; ++f) c[f] = codec_features(v, f, plan.past_ref[f], plan.future_ref[f]);
  return c;
}

// ---------------------------------------------------------------------------
// "RVF1" frames file + JSON sidecar

inline constexpr std::uint32_t kFramesVersion = 1;

inline std::string sidecar_path(const std::string& frames_path) { return frames_path + ".json"; }

inline void save_video(const Video& v, const std::string& path, const nlohmann::json& spec = nullptr) {
  {
    auto os = io::open_out(path);
    io::put_magic(os, "RVF1");
    io::put_uint<std::uint32_t>(os, kFramesVersion);
    for (auto x : {v.frames.size(), v.grid_rows, v.grid_cols, v.patch_pixels})
      io::put_uint<std::uint32_t>(os, static_cast<std::uint32_t>(x));
    io::put_f32(os, static_cast<float>(v.fps));
    for (const auto& f : v.frames) io::put_f32s(os, f);
    if (!os) throw IoError("failed writing " + path);
  }
  nlohmann::json side{{"video_id", v.id}, {"motion", v.motion}};
  if (!spec.is_null()) side["spec"] = spec;
  std::ofstream js(sidecar_path(path));
  if (!js) throw IoError("cannot write " + sidecar_path(path));
  js << side.dump() << '\n';
}

inline Video load_video(const std::string& path) {
  auto is = io::open_in(path);
  io::expect_magic(is, "RVF1", path);
  if (io::get_uint<std::uint32_t>(is) != kFramesVersion) throw FormatError(path + ": unsupported frames version");
  Video v;
  const std::size_t n = io::get_uint<std::uint32_t>(is);
  v.grid_rows = io::get_uint<std::uint32_t>(is);
  v.grid_cols = io::get_uint<std::uint32_t>(is);
  v.patch_pixels = io::get_uint<std::uint32_t>(is);
  v.fps = io::get_f32(is);
  if (n == 0 || v.patches() == 0 || v.patch_pixels == 0) throw FormatError(path + ": empty frames header");
  v.frames.assign(n, std::vector<float>(v.patches() * v.patch_pixels));
  for (auto& f : v.frames) io::get_f32s(is, f);
  v.id = std::filesystem::path(path).stem().string();
  v.motion.assign(n, std::vector<float>(v.patches(), 0.0f));
  std::ifstream js(sidecar_path(path));
  if (js) {
    nlohmann::json side;
    try {
      side = nlohmann::json::parse(js);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(sidecar_path(path) + ": " + e.what());
    }
    v.id = side.value("video_id", v.id);
    if (side.contains("motion")) {
      auto m = side["motion"].get<std::vector<std::vector<float>>>();
      if (m.size() != n) throw FormatError(sidecar_path(path) + ": motion length mismatch");
      for (const auto& row : m)
        if (row.size() != v.patches()) throw FormatError(sidecar_path(path) + ": motion width mismatch");
      v.motion = std::move(m);
    }
  }
  return v;
}

/// A single .rvf file, or every .rvf file of a directory in name order.
inline std::vector<Video> load_corpus(const std::string& path) {
  namespace fs = std::filesystem;
  std::vector<std::string> files;
  if (fs::is_directory(path)) {
    for (const auto& e : fs::directory_iterator(path))
      if (e.path().extension() == ".rvf") files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
  } else {
    files.push_back(path);
  }
  if (files.empty()) throw IoError("no .rvf files under " + path);
  std::vector<Video> out;
  for (const auto& f : files) out.push_back(load_video(f));
  return out;
}

}  // namespace reusevit
