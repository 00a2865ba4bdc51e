// SPDX-License-Identifier: Apache-2.0
//
// Frame typing, out-of-order computation and reference assignment.
//
// Display frames are grouped in units of five with anchors every four
// frames: for a unit [a .. a+4] the anchor a+4 is a P frame referencing a,
// a+2 (Bdist2) references a and a+4, and a+1 / a+3 (Bdist1) reference their
// immediate neighbours. Computation order within a unit is a+4, a+2, a+1, a+3.
#pragma once

#include <algorithm>
#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "reusevit/error.hpp"
#include "reusevit/frame_type.hpp"

namespace reusevit {

inline constexpr std::size_t kAnchorSpacing = 4;

struct GopPlan {
  std::size_t n_frames = 0;
  std::vector<std::size_t> comp_order;  // display indices in computation order
  std::vector<FrameType> type;          // indexed by display index
  std::vector<std::optional<std::size_t>> past_ref;
  std::vector<std::optional<std::size_t>> future_ref;
  std::vector<std::vector<std::size_t>> segments;  // each in computation order

  std::vector<std::size_t> display_order() const {
    std::vector<std::size_t> d(n_frames);
    for (std::size_t i = 0; i < n_frames; ++i) d[i] = i;
    return d;
  }
  /// Position of each display frame in computation order.
  std::vector<std::size_t> comp_position() const {
    std::vector<std::size_t> pos(n_frames);
    for (std::size_t i = 0; i < comp_order.size(); ++i) pos[comp_order[i]] = i;
    return pos;
  }
  /// Number of frames referencing each frame.
  std::vector<std::size_t> consumer_counts() const {
    std::vector<std::size_t> c(n_frames, 0);
    for (std::size_t f = 0; f < n_frames; ++f) {
      if (past_ref[f]) ++c[*past_ref[f]];
      if (future_ref[f]) ++c[*future_ref[f]];
    }
    return c;
  }
  std::size_t count(FrameType t) const { return static_cast<std::size_t>(std::count(type.begin(), type.end(), t)); }
  /// Fraction of frames computed without any reuse.
  double recompute_fraction() const {
    return n_frames == 0 ? 0.0 : static_cast<double>(count(FrameType::I)) / static_cast<double>(n_frames);
  }
};

/// `refresh_period` empty disables periodic I frames; otherwise it must be a
/// positive multiple of the anchor spacing. `reorder == false` yields the
/// low-latency all-P chain (each frame references its predecessor).
inline GopPlan plan_gop(std::size_t n_frames, std::optional<std::size_t> refresh_period = 20,
                        bool reorder = true) {
  if (n_frames < 1) throw ConfigError("plan_gop: n_frames must be >= 1");
  if (refresh_period && (*refresh_period < kAnchorSpacing || *refresh_period % kAnchorSpacing != 0))
    throw ConfigError("plan_gop: refresh_period must be a multiple of 4 and >= 4");
  GopPlan p;
  p.n_frames = n_frames;
  p.type.assign(n_frames, FrameType::P);
  p.past_ref.assign(n_frames, std::nullopt);
  p.future_ref.assign(n_frames, std::nullopt);
  auto refresh_at = [&](std::size_t f) { return f == 0 || (refresh_period && f % *refresh_period == 0); };
  auto set = [&](std::size_t f, FrameType t, std::optional<std::size_t> past, std::optional<std::size_t> future) {
    p.type[f] = t;
    p.past_ref[f] = past;
    p.future_ref[f] = future;
    p.comp_order.push_back(f);
  };
  auto anchor = [&](std::size_t f, std::size_t prev) {
    if (refresh_at(f))
      set(f, FrameType::I, std::nullopt, std::nullopt);
    else
      set(f, FrameType::P, prev, std::nullopt);
  };

  if (!reorder) {
    for (std::size_t f = 0; f < n_frames; ++f) anchor(f, f - 1);
  } else {
    anchor(0, 0);
    for (std::size_t a = 0; a + 1 < n_frames; a += kAnchorSpacing) {
      const std::size_t b = a + kAnchorSpacing;
      auto has = [&](std::size_t f) { return f < n_frames; };
      auto opt = [&](std::size_t f) { return has(f) ? std::optional<std::size_t>(f) : std::nullopt; };
      if (has(b)) anchor(b, a);
      if (has(a + 2)) set(a + 2, FrameType::Bdist2, a, opt(b));
      set(a + 1, FrameType::Bdist1, a, opt(a + 2));
      if (has(a + 3)) set(a + 3, FrameType::Bdist1, a + 2, opt(b));
    }
  }

  // Segments: the first unit (5 frames), then 4 frames per following unit.
  for (std::size_t i = 0; i < p.comp_order.size();) {
    const std::size_t len = i == 0 ? kAnchorSpacing + 1 : kAnchorSpacing;
    const std::size_t end = std::min(p.comp_order.size(), i + len);
    p.segments.emplace_back(p.comp_order.begin() + static_cast<std::ptrdiff_t>(i),
                            p.comp_order.begin() + static_cast<std::ptrdiff_t>(end));
    i = end;
  }
  return p;
}

/// Checks that computation order is a permutation, every reference is
/// computed before its dependent, and reference distances match the types.
inline void validate_plan(const GopPlan& p) {
  const std::size_t n = p.n_frames;
  if (p.comp_order.size() != n || p.type.size() != n || p.past_ref.size() != n || p.future_ref.size() != n)
    throw ContractError("plan: inconsistent sizes");
  std::vector<std::size_t> pos(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto f = p.comp_order[i];
    if (f >= n || pos[f] != n) throw ContractError("plan: computation order is not a permutation");
    pos[f] = i;
  }
  std::size_t seg_total = 0;
  for (const auto& s : p.segments) seg_total += s.size();
  if (seg_total != n) throw ContractError("plan: segments do not cover all frames");
  for (std::size_t f = 0; f < n; ++f) {
    for (const auto& r : {p.past_ref[f], p.future_ref[f]})
      if (r && (*r >= n || pos[*r] >= pos[f])) throw ContractError("plan: reference not computed before frame " + std::to_string(f));
    const auto t = p.type[f];
    auto dist_ok = [&](std::size_t d) {
      return (!p.past_ref[f] || *p.past_ref[f] + d == f) && (!p.future_ref[f] || *p.future_ref[f] == f + d);
    };
    switch (t) {
      case FrameType::I:
        if (p.past_ref[f] || p.future_ref[f]) throw ContractError("plan: I frame with references");
        break;
      case FrameType::P:
        if (!p.past_ref[f] || p.future_ref[f] || *p.past_ref[f] >= f) throw ContractError("plan: P frame must reference a past frame only");
        break;
      case FrameType::Bdist2:
        if (!p.past_ref[f] || !dist_ok(2)) throw ContractError("plan: Bdist2 references must be at distance 2");
        break;
      case FrameType::Bdist1:
        if (!p.past_ref[f] || !dist_ok(1)) throw ContractError("plan: Bdist1 references must be at distance 1");
        break;
    }
  }
}

/// Reorders per-frame results from computation order to display order.
template <class R>
std::vector<R> restore_display_order(const std::vector<R>& in_comp_order, const GopPlan& plan) {
  if (in_comp_order.size() != plan.comp_order.size())
    throw ContractError("restore_display_order: expected " + std::to_string(plan.comp_order.size()) + " results, got " +
                        std::to_string(in_comp_order.size()));
  std::vector<std::optional<R>> out(plan.n_frames);
  for (std::size_t i = 0; i < in_comp_order.size(); ++i) out[plan.comp_order[i]] = in_comp_order[i];
  std::vector<R> result;
  result.reserve(out.size());
  for (std::size_t f = 0; f < out.size(); ++f) {
    if (!out[f]) throw ContractError("restore_display_order: missing frame " + std::to_string(f));
    result.push_back(std::move(*out[f]));
  }
  return result;
}

inline nlohmann::json plan_to_json(const GopPlan& p) {
  nlohmann::json frames = nlohmann::json::array();
  for (std::size_t f = 0; f < p.n_frames; ++f) {
    nlohmann::json j{{"index", f}, {"type", std::string(to_string(p.type[f]))}};
    j["past_ref"] = p.past_ref[f] ? nlohmann::json(*p.past_ref[f]) : nlohmann::json(nullptr);
    j["future_ref"] = p.future_ref[f] ? nlohmann::json(*p.future_ref[f]) : nlohmann::json(nullptr);
    frames.push_back(std::move(j));
  }
  return {{"n_frames", p.n_frames}, {"comp_order", p.comp_order}, {"segments", p.segments}, {"frames", frames}};
}

// ---------------------------------------------------------------------------
// Grouped-frame training sequences

struct GroupSlot {
  std::size_t offset;  // display offset from the group base
  FrameType type;
  std::optional<std::size_t> past;    // slot index within the group
  std::optional<std::size_t> future;  // slot index within the group
};

/// Six frames at 0-based offsets 0, 4, 8, 12, 10, 11 (computation order):
/// an I frame, three chained P frames, then a Bdist2 and a Bdist1 frame. The
/// skipped intermediate frames stretch the reference chain.
inline std::vector<GroupSlot> default_training_pattern() {
  return {{0, FrameType::I, std::nullopt, std::nullopt},
          {4, FrameType::P, 0, std::nullopt},
          {8, FrameType::P, 1, std::nullopt},
          {12, FrameType::P, 2, std::nullopt},
          {10, FrameType::Bdist2, 2, 3},
          {11, FrameType::Bdist1, 4, 3}};
}

struct TrainingFrame {
  std::size_t index;  // display index within the video
  FrameType type;
  std::optional<std::size_t> past;  // position within the group
  std::optional<std::size_t> future;
};

struct TrainingGroup {
  std::vector<TrainingFrame> frames;  // computation order
};

inline std::size_t pattern_span(const std::vector<GroupSlot>& pattern) {
  std::size_t span = 0;
  for (const auto& s : pattern) span = std::max(span, s.offset + 1);
  return span;
}

/// Non-overlapping groups laid end to end. A video shorter than one pattern
/// span yields no groups and a warning on stderr.
inline std::vector<TrainingGroup> build_training_groups(std::size_t video_len,
                                                        const std::vector<GroupSlot>& pattern = default_training_pattern()) {
  if (pattern.empty()) throw ConfigError("build_training_groups: empty pattern");
  for (std::size_t i = 0; i < pattern.size(); ++i)
    for (const auto& r : {pattern[i].past, pattern[i].future})
      if (r && *r >= i) throw ConfigError("build_training_groups: pattern slot references a later slot");
  const std::size_t span = pattern_span(pattern);
  std::vector<TrainingGroup> groups;
  if (video_len < span) {
    std::clog << "warning: video of " << video_len << " frames is shorter than the training pattern (" << span
              << "), skipped\n";
    return groups;
  }
  for (std::size_t base = 0; base + span <= video_len; base += span) {
    TrainingGroup g;
    for (const auto& s : pattern) g.frames.push_back({base + s.offset, s.type, s.past, s.future});
    groups.push_back(std::move(g));
  }
  return groups;
}

}  // namespace reusevit
