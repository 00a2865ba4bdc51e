// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "support.hpp"

using namespace reusevit;
using Catch::Approx;

namespace {

struct TempFile {
  std::string path;
  explicit TempFile(std::string p) : path(std::move(p)) { std::filesystem::remove(path); }
  ~TempFile() { std::filesystem::remove(path); }
};

std::vector<float> random_vec(std::mt19937_64& rng, std::size_t d) {
  std::normal_distribution<float> n(0.0f, 1.0f);
  std::vector<float> v(d);
  for (auto& x : v) x = n(rng);
  return v;
}

}  // namespace

TEST_CASE("byte accounting", "[store]") {
  CHECK(kStoreHeaderBytes == 24);
  CHECK(record_bytes(1024) == 2088);
  CHECK(payload_bytes_per_second(1024, 2.0) == 4096.0);
  CHECK(payload_bytes_per_second(1024, 2.0) / (625.0 * 1024.0) == Approx(0.0064));
}

TEST_CASE("records survive a reopen with fp16 rounding", "[store]") {
  TempFile tmp("test_store_roundtrip.rve");
  std::mt19937_64 rng(1);
  std::vector<std::vector<float>> vecs;
  {
    auto s = EmbeddingStore::open(tmp.path, 16, 4.0f);
    for (std::uint32_t f = 0; f < 5; ++f) {
      vecs.push_back(random_vec(rng, 16));
      s.put("clip", f, vecs.back());
    }
    CHECK(std::filesystem::file_size(tmp.path) == kStoreHeaderBytes + 5 * record_bytes(16));
  }
  auto s = EmbeddingStore::open_existing(tmp.path);
  CHECK(s.dim() == 16);
  CHECK(s.fps() == 4.0f);
  REQUIRE(s.size() == 5);
  auto r = s.get("clip", 3);
  REQUIRE(r.has_value());
  CHECK(r->timestamp_s == Approx(0.75));
  for (std::size_t i = 0; i < 16; ++i) {
    CHECK(r->vector[i] == from_half_bits(to_half_bits(vecs[3][i])));
    CHECK(r->vector[i] == Approx(vecs[3][i]).epsilon(1e-3));
  }
  CHECK_FALSE(s.get("clip", 9).has_value());
  CHECK_FALSE(s.get("other", 3).has_value());
  // Appending after reopen keeps the count consistent.
  auto again = EmbeddingStore::open(tmp.path, 16);
  again.put("clip", 5, vecs[0]);
  CHECK(EmbeddingStore::open_existing(tmp.path).size() == 6);
}

TEST_CASE("half-precision conversion", "[store]") {
  CHECK(from_half_bits(to_half_bits(1.0f)) == 1.0f);
  CHECK(to_half_bits(1.0f) == 0x3C00);
  CHECK(to_half_bits(-2.0f) == 0xC000);
  CHECK(from_half_bits(to_half_bits(65504.0f)) == 65504.0f);
  CHECK(from_half_bits(to_half_bits(1.0f + 1.0f / 4096)) == 1.0f);  // below half an ulp
}

TEST_CASE("store contract violations", "[store]") {
  TempFile tmp("test_store_errors.rve");
  auto s = EmbeddingStore::open(tmp.path, 4);
  std::vector<float> v{1, 2, 3, 4};
  REQUIRE_THROWS_AS(s.query_topk(v, 1), ContractError);
  s.put("a", 0, v);
  REQUIRE_THROWS_AS(s.put("a", 0, v), ContractError);
  REQUIRE_THROWS_AS(s.put("a", 1, std::vector<float>{1, 2}), FormatError);
  REQUIRE_THROWS_AS(s.put("", 1, v), ConfigError);
  REQUIRE_THROWS_AS(s.put(std::string(33, 'x'), 1, v), ConfigError);
  REQUIRE_THROWS_AS(s.query_topk(v, 0), ConfigError);
  REQUIRE_THROWS_AS(s.query_topk(std::vector<float>{1}, 1), FormatError);
  REQUIRE_THROWS_AS(EmbeddingStore::open(tmp.path, 8), FormatError);
  REQUIRE_THROWS_AS(EmbeddingStore::open(tmp.path, 0), ConfigError);
  REQUIRE_THROWS_AS(EmbeddingStore::open_existing("missing_store.rve"), IoError);
}

TEST_CASE("corrupt store files are rejected", "[store]") {
  TempFile tmp("test_store_corrupt.rve");
  {
    auto s = EmbeddingStore::open(tmp.path, 4);
    s.put("a", 0, std::vector<float>{1, 0, 0, 0});
    s.put("a", 1, std::vector<float>{0, 1, 0, 0});
  }
  std::filesystem::resize_file(tmp.path, std::filesystem::file_size(tmp.path) - 3);
  REQUIRE_THROWS_AS(EmbeddingStore::open_existing(tmp.path), FormatError);
  {
    std::fstream f(tmp.path, std::ios::in | std::ios::out | std::ios::binary);
    f.write("NOPE", 4);
  }
  REQUIRE_THROWS_AS(EmbeddingStore::open_existing(tmp.path), FormatError);
}

TEST_CASE("top-k ordering, ties and oversized k", "[store][query]") {
  TempFile tmp("test_store_topk.rve");
  auto s = EmbeddingStore::open(tmp.path, 2);
  s.put("b", 0, std::vector<float>{1, 0});
  s.put("a", 7, std::vector<float>{2, 0});  // same direction as b#0
  s.put("a", 3, std::vector<float>{1, 0});
  s.put("c", 0, std::vector<float>{0, 1});
  s.put("c", 1, std::vector<float>{-1, 0});
  s.put("z", 0, std::vector<float>{0, 0});
  auto hits = s.query_topk(std::vector<float>{3, 0}, 10);
  REQUIRE(hits.size() == 6);
  std::vector<std::pair<std::string, std::uint32_t>> order;
  for (const auto& h : hits) order.emplace_back(h.record->video_id, h.record->frame_index);
  using P = std::pair<std::string, std::uint32_t>;
  CHECK(order == std::vector<P>{{"a", 3}, {"a", 7}, {"b", 0}, {"c", 0}, {"z", 0}, {"c", 1}});
  CHECK(hits[0].score == Approx(1.0));
  CHECK(hits[3].score == 0.0f);
  CHECK(hits[5].score == Approx(-1.0));
  CHECK(s.query_topk(std::vector<float>{0, 0}, 2)[0].score == 0.0f);
}

TEST_CASE("top-k agrees with an exhaustive scan", "[store][query][property]") {
  TempFile tmp("test_store_scan.rve");
  std::mt19937_64 rng(3);
  auto s = EmbeddingStore::open(tmp.path, 12);
  for (std::uint32_t i = 0; i < 300; ++i) s.put("v" + std::to_string(i % 7), i, random_vec(rng, 12));
  for (int q = 0; q < 10; ++q) {
    auto query = random_vec(rng, 12);
    std::vector<std::pair<double, std::size_t>> scan;
    for (std::size_t i = 0; i < s.records().size(); ++i) {
      const auto& v = s.records()[i].vector;
      double dot = 0, qn = 0, vn = 0;
      for (std::size_t j = 0; j < 12; ++j) {
        dot += double(query[j]) * v[j];
        qn += double(query[j]) * query[j];
        vn += double(v[j]) * v[j];
      }
      scan.emplace_back(-dot / std::sqrt(qn * vn), i);
    }
    std::sort(scan.begin(), scan.end());
    auto hits = s.query_topk(query, 8);
    for (std::size_t r = 0; r < 8; ++r) {
      CHECK(hits[r].record == &s.records()[scan[r].second]);
      CHECK(hits[r].score == Approx(-scan[r].first).margin(1e-6));
    }
  }
}
