// SPDX-License-Identifier: Apache-2.0
//
// Append-only per-frame embedding store ("RVE1") with brute-force cosine
// top-k search.
//
// Layout (little-endian):
//   header  : "RVE1" | u32 version | u32 dim | u64 count | f32 fps      (24 bytes)
//   record  : char[32] video_id (zero padded) | u32 frame_index | f32 timestamp_s
//             | dim x fp16                                         (40 + 2*dim bytes)
#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "reusevit/error.hpp"
#include "reusevit/io.hpp"

namespace reusevit {

inline constexpr std::uint32_t kStoreVersion = 1;
inline constexpr std::size_t kStoreHeaderBytes = 24;
inline constexpr std::size_t kVideoIdBytes = 32;
inline constexpr std::size_t kRecordHeaderBytes = kVideoIdBytes + 8;

inline std::uint16_t to_half_bits(float x) { return Eigen::numext::bit_cast<std::uint16_t>(Eigen::half(x)); }
inline float from_half_bits(std::uint16_t b) {
  return static_cast<float>(Eigen::numext::bit_cast<Eigen::half>(b));
}

/// Bytes one stored frame occupies on disk.
inline constexpr std::size_t record_bytes(std::size_t dim) { return kRecordHeaderBytes + 2 * dim; }
/// Embedding payload written per second of video (fp16 vectors only).
inline constexpr double payload_bytes_per_second(std::size_t dim, double fps) {
  return static_cast<double>(2 * dim) * fps;
}

struct EmbeddingRecord {
  std::string video_id;
  std::uint32_t frame_index = 0;
  float timestamp_s = 0.0f;
  std::vector<float> vector;  // decoded from fp16
};

struct QueryHit {
  const EmbeddingRecord* record;
  float score;
};

class EmbeddingStore {
 public:
  /// Opens `path`, creating it with the given dim/fps when absent. An
  /// existing store must agree on dim.
  static EmbeddingStore open(const std::string& path, std::size_t dim, float fps = 2.0f) {
    if (dim == 0) throw ConfigError("store: dim must be positive");
    EmbeddingStore s(path);
    if (!std::filesystem::exists(path)) {
      s.dim_ = dim;
      s.fps_ = fps;
      auto os = io::open_out(path);
      s.write_header(os);
      if (!os) throw IoError("store: cannot initialise " + path);
    } else {
      s.load();
      if (s.dim_ != dim)
        throw FormatError("store: dim mismatch, file has " + std::to_string(s.dim_) + ", requested " + std::to_string(dim));
    }
    return s;
  }

  /// Opens an existing store, taking dim from its header.
  static EmbeddingStore open_existing(const std::string& path) {
    EmbeddingStore s(path);
    s.load();
    return s;
  }

  EmbeddingStore(EmbeddingStore&& o) noexcept
      : path_(std::move(o.path_)), dim_(o.dim_), fps_(o.fps_), records_(std::move(o.records_)),
        index_(std::move(o.index_)) {}

  std::size_t dim() const { return dim_; }
  float fps() const { return fps_; }
  std::size_t size() const {
    std::shared_lock lock(mu_);
    return records_.size();
  }
  const std::string& path() const { return path_; }

  /// Appends one record and rewrites the header count.
  void put(const std::string& video_id, std::uint32_t frame_index, std::span<const float> vec) {
    if (vec.size() != dim_)
      throw FormatError("store: vector has " + std::to_string(vec.size()) + " components, store dim is " +
                        std::to_string(dim_));
    if (video_id.empty() || video_id.size() > kVideoIdBytes)
      throw ConfigError("store: video_id must be 1.." + std::to_string(kVideoIdBytes) + " bytes");
    std::unique_lock lock(mu_);
    if (index_.count({video_id, frame_index}))
      throw ContractError("store: duplicate record " + video_id + "#" + std::to_string(frame_index));
    EmbeddingRecord r{video_id, frame_index, static_cast<float>(frame_index) / fps_, {}};
    std::string buf;
    buf.append(video_id);
    buf.append(kVideoIdBytes - video_id.size(), '\0');
    auto append_u32 = [&](std::uint32_t v) {
      for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
    };
    append_u32(frame_index);
    append_u32(std::bit_cast<std::uint32_t>(r.timestamp_s));
    r.vector.reserve(dim_);
    for (float x : vec) {
      const auto h = to_half_bits(x);
      buf.push_back(static_cast<char>(h & 0xFF));
      buf.push_back(static_cast<char>(h >> 8));
      r.vector.push_back(from_half_bits(h));
    }
    {
      std::fstream fs(path_, std::ios::in | std::ios::out | std::ios::binary);
      if (!fs) throw IoError("store: cannot open " + path_);
      fs.seekp(0, std::ios::end);
      fs.write(buf.data(), static_cast<std::streamsize>(buf.size()));
      fs.seekp(12);
      io::put_uint<std::uint64_t>(fs, records_.size() + 1);
      if (!fs) throw IoError("store: write failed on " + path_);
    }
    index_[{video_id, frame_index}] = records_.size();
    records_.push_back(std::move(r));
  }

  std::optional<EmbeddingRecord> get(const std::string& video_id, std::uint32_t frame_index) const {
    std::shared_lock lock(mu_);
    auto it = index_.find({video_id, frame_index});
    if (it == index_.end()) return std::nullopt;
    return records_[it->second];
  }

  /// Records ranked by cosine to `query`, best first; equal scores order by
  /// (video_id, frame_index). k larger than the store returns everything.
  std::vector<QueryHit> query_topk(std::span<const float> query, std::size_t k) const {
    if (k == 0) throw ConfigError("query_topk: k must be >= 1");
    if (query.size() != dim_) throw FormatError("query_topk: query dim mismatch");
    std::shared_lock lock(mu_);
    if (records_.empty()) throw ContractError("query_topk: store is empty");
    double qn = 0.0;
    for (float x : query) qn += static_cast<double>(x) * x;
    qn = std::sqrt(qn);
    std::vector<QueryHit> hits;
    hits.reserve(records_.size());
    for (const auto& r : records_) hits.push_back({&r, cosine(query, qn, r.vector)});
    auto better = [](const QueryHit& a, const QueryHit& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.record->video_id != b.record->video_id) return a.record->video_id < b.record->video_id;
      return a.record->frame_index < b.record->frame_index;
    };
    k = std::min(k, hits.size());
    std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(k), hits.end(), better);
    hits.resize(k);
    return hits;
  }

  /// Cosine used by queries; zero-norm sides score 0.
  static float cosine(std::span<const float> q, double q_norm, std::span<const float> v) {
    double dot = 0.0, vn = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      dot += static_cast<double>(q[i]) * v[i];
      vn += static_cast<double>(v[i]) * v[i];
    }
    if (q_norm == 0.0 || vn == 0.0) return 0.0f;
    return static_cast<float>(dot / (q_norm * std::sqrt(vn)));
  }

  const std::vector<EmbeddingRecord>& records() const { return records_; }

 private:
  explicit EmbeddingStore(std::string path) : path_(std::move(path)) {}

  void write_header(std::ostream& os) const {
    io::put_magic(os, "RVE1");
    io::put_uint<std::uint32_t>(os, kStoreVersion);
    io::put_uint<std::uint32_t>(os, static_cast<std::uint32_t>(dim_));
    io::put_uint<std::uint64_t>(os, records_.size());
    io::put_f32(os, fps_);
  }

  void load() {
    auto is = io::open_in(path_);
    io::expect_magic(is, "RVE1", path_);
    if (io::get_uint<std::uint32_t>(is) != kStoreVersion) throw FormatError(path_ + ": unsupported store version");
    dim_ = io::get_uint<std::uint32_t>(is);
    const auto count = io::get_uint<std::uint64_t>(is);
    fps_ = io::get_f32(is);
    if (dim_ == 0) throw FormatError(path_ + ": zero dim");
    const auto size = std::filesystem::file_size(path_);
    if (size != kStoreHeaderBytes + count * record_bytes(dim_))
      throw FormatError(path_ + ": header count does not match file length");
    std::vector<char> id(kVideoIdBytes);
    for (std::uint64_t i = 0; i < count; ++i) {
      EmbeddingRecord r;
      is.read(id.data(), static_cast<std::streamsize>(id.size()));
      r.video_id.assign(id.data(), strnlen(id.data(), id.size()));
      r.frame_index = io::get_uint<std::uint32_t>(is);
      r.timestamp_s = io::get_f32(is);
      r.vector.resize(dim_);
      for (auto& x : r.vector) x = from_half_bits(io::get_uint<std::uint16_t>(is));
      if (!index_.emplace(std::make_pair(r.video_id, r.frame_index), records_.size()).second)
        throw FormatError(path_ + ": duplicate record");
      records_.push_back(std::move(r));
    }
  }

  std::string path_;
  std::size_t dim_ = 0;
  float fps_ = 2.0f;
  std::vector<EmbeddingRecord> records_;
  std::map<std::pair<std::string, std::uint32_t>, std::size_t> index_;
  mutable std::shared_mutex mu_;
};

}  // namespace reusevit
