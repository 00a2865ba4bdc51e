// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <numeric>
#include <set>
#include <sstream>

#include "support.hpp"

using namespace reusevit;

namespace {
using Sz = std::vector<std::size_t>;
}

TEST_CASE("GOP plan for two units", "[scheduler]") {
  auto p = plan_gop(9, std::nullopt);
  CHECK(p.comp_order == Sz{0, 4, 2, 1, 3, 8, 6, 5, 7});
  using F = FrameType;
  CHECK(p.type == std::vector<F>{F::I, F::Bdist1, F::Bdist2, F::Bdist1, F::P, F::Bdist1, F::Bdist2, F::Bdist1, F::P});
  CHECK(p.past_ref[4] == 0u);
  CHECK(!p.future_ref[4]);
  CHECK(p.past_ref[2] == 0u);
  CHECK(p.future_ref[2] == 4u);
  CHECK(p.past_ref[1] == 0u);
  CHECK(p.future_ref[1] == 2u);
  CHECK(p.past_ref[3] == 2u);
  CHECK(p.future_ref[3] == 4u);
  REQUIRE(p.segments.size() == 2);
  CHECK(p.segments[0] == Sz{0, 4, 2, 1, 3});
  CHECK(p.segments[1] == Sz{8, 6, 5, 7});
  CHECK(p.consumer_counts() == Sz{3, 0, 2, 0, 5, 0, 2, 0, 2});
}

TEST_CASE("refresh inserts I frames at multiples of the period", "[scheduler]") {
  auto p = plan_gop(45, 20);
  for (std::size_t f = 0; f < 45; ++f) CHECK((p.type[f] == FrameType::I) == (f % 20 == 0));
  CHECK(p.recompute_fraction() == Catch::Approx(3.0 / 45));
  CHECK(plan_gop(45, std::nullopt).count(FrameType::I) == 1);
  REQUIRE_THROWS_AS(plan_gop(10, 6), ConfigError);
  REQUIRE_THROWS_AS(plan_gop(10, 0), ConfigError);
  REQUIRE_THROWS_AS(plan_gop(0), ConfigError);
}

TEST_CASE("every generated plan is valid", "[scheduler][property]") {
  for (std::size_t n = 1; n <= 120; ++n)
    for (std::optional<std::size_t> r : {std::optional<std::size_t>{}, std::optional<std::size_t>{4},
                                         std::optional<std::size_t>{8}, std::optional<std::size_t>{20}})
      for (bool reorder : {true, false}) {
        auto p = plan_gop(n, r, reorder);
        REQUIRE_NOTHROW(validate_plan(p));
        // Computation order is a permutation of display order.
        auto sorted = p.comp_order;
        std::sort(sorted.begin(), sorted.end());
        CHECK(sorted == p.display_order());
        // Segments concatenate to the computation order.
        Sz cat;
        for (const auto& s : p.segments) cat.insert(cat.end(), s.begin(), s.end());
        CHECK(cat == p.comp_order);
        // Consumer counts agree with reference lists.
        std::size_t refs = 0;
        for (std::size_t f = 0; f < n; ++f) refs += p.past_ref[f].has_value() + p.future_ref[f].has_value();
        const auto c = p.consumer_counts();
        CHECK(std::accumulate(c.begin(), c.end(), std::size_t{0}) == refs);
      }
}

TEST_CASE("low-latency plan chains P frames", "[scheduler]") {
  auto p = plan_gop(7, std::nullopt, false);
  CHECK(p.comp_order == Sz{0, 1, 2, 3, 4, 5, 6});
  for (std::size_t f = 1; f < 7; ++f) {
    CHECK(p.type[f] == FrameType::P);
    CHECK(p.past_ref[f] == f - 1);
  }
}

TEST_CASE("display-order restoration inverts the computation order", "[scheduler][property]") {
  for (std::size_t n : {1, 2, 5, 9, 13, 40, 41}) {
    auto p = plan_gop(n);
    std::vector<std::string> comp;
    for (auto f : p.comp_order) comp.push_back("frame" + std::to_string(f));
    auto disp = restore_display_order(comp, p);
    for (std::size_t f = 0; f < n; ++f) CHECK(disp[f] == "frame" + std::to_string(f));
  }
  REQUIRE_THROWS_AS(restore_display_order(std::vector<int>{1, 2}, plan_gop(3)), ContractError);
}

TEST_CASE("validate_plan rejects inconsistent plans", "[scheduler]") {
  auto p = plan_gop(9);
  auto late = p;
  std::swap(late.comp_order[1], late.comp_order[2]);  // frame 2 before its future reference 4
  REQUIRE_THROWS_AS(validate_plan(late), ContractError);
  auto dup = p;
  dup.comp_order[1] = 0;
  REQUIRE_THROWS_AS(validate_plan(dup), ContractError);
  auto dist = p;
  dist.past_ref[3] = 0;
  REQUIRE_THROWS_AS(validate_plan(dist), ContractError);
  auto iref = p;
  iref.past_ref[0] = 4;
  REQUIRE_THROWS_AS(validate_plan(iref), ContractError);
}

TEST_CASE("plan JSON dump", "[scheduler]") {
  auto j = plan_to_json(plan_gop(5));
  CHECK(j["n_frames"] == 5);
  CHECK(j["frames"][2]["type"] == "Bdist2");
  CHECK(j["frames"][0]["past_ref"].is_null());
  CHECK(j["frames"][3]["future_ref"] == 4);
}

TEST_CASE("training groups follow the 0-4-8-12-10-11 pattern", "[scheduler]") {
  auto groups = build_training_groups(30);
  REQUIRE(groups.size() == 2);
  Sz idx;
  for (const auto& f : groups[1].frames) idx.push_back(f.index);
  CHECK(idx == Sz{13, 17, 21, 25, 23, 24});
  const auto& g = groups[0].frames;
  CHECK(g[0].type == FrameType::I);
  CHECK(g[3].type == FrameType::P);
  CHECK(g[3].past == 2u);
  CHECK(g[4].type == FrameType::Bdist2);
  CHECK(g[4].past == 2u);
  CHECK(g[4].future == 3u);
  CHECK(g[5].type == FrameType::Bdist1);
  CHECK(g[5].past == 4u);
  CHECK(g[5].future == 3u);
  // Every reference is computed earlier within the group.
  for (const auto& grp : groups)
    for (std::size_t j = 0; j < grp.frames.size(); ++j)
      for (auto r : {grp.frames[j].past, grp.frames[j].future})
        if (r) CHECK(*r < j);
}

TEST_CASE("videos shorter than a group are skipped with a warning", "[scheduler]") {
  std::ostringstream captured;
  auto* old = std::clog.rdbuf(captured.rdbuf());
  auto groups = build_training_groups(12);
  std::clog.rdbuf(old);
  CHECK(groups.empty());
  CHECK(captured.str().find("shorter") != std::string::npos);
  CHECK(pattern_span(default_training_pattern()) == 13);
  std::vector<GroupSlot> bad{{0, FrameType::I, std::nullopt, std::nullopt}, {1, FrameType::P, 1, std::nullopt}};
  REQUIRE_THROWS_AS(build_training_groups(5, bad), ConfigError);
}
