// SPDX-License-Identifier: Apache-2.0
//
// FLOPs accounting. Forward kernels report their cost to the counter that is
// active on the calling thread; backward passes are never counted.
#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "reusevit/error.hpp"

namespace reusevit {

enum class OpKind {
  matmul,       // 2*m*k*n
  layernorm,    // 5 per element
  softmax,      // 4 per element
  gelu,         // 8 per element
  sigmoid,      // 4 per element
  elementwise,  // 1 per element (add, mul, bias, scale)
  cosine,       // 6 per element of each compared row pair
};

/// Cost model shared by every kernel. `a`, `b`, `c` are (m, k, n) for
/// matmul, (rows, cols) for row-wise ops and (count) for elementwise ops.
inline std::uint64_t account_flops(OpKind kind, std::uint64_t a, std::uint64_t b = 1,
                                   std::uint64_t c = 1) {
  if (a == 0 || b == 0 || c == 0) throw ConfigError("account_flops: dims must be positive");
  switch (kind) {
    case OpKind::matmul: return 2 * a * b * c;
    case OpKind::layernorm: return 5 * a * b;
    case OpKind::softmax: return 4 * a * b;
    case OpKind::gelu: return 8 * a * b;
    case OpKind::sigmoid: return 4 * a * b;
    case OpKind::elementwise: return a * b;
    case OpKind::cosine: return 6 * a * b;
  }
  return 0;
}

/// Accumulates FLOPs by category ("qkv", "ffn", "attention", ...). The
/// category is whatever label is current when a kernel reports.
class FlopCounter {
 public:
  void add(std::uint64_t flops) {
    total_ += flops;
    by_category_[category_] += flops;
  }
  std::uint64_t total() const { return total_; }
  const std::map<std::string, std::uint64_t>& by_category() const { return by_category_; }
  std::uint64_t category_total(const std::string& c) const {
    auto it = by_category_.find(c);
    return it == by_category_.end() ? 0 : it->second;
  }
  void reset() {
    total_ = 0;
    by_category_.clear();
  }
  const std::string& category() const { return category_; }
  void set_category(std::string c) { category_ = std::move(c); }

  FlopCounter& operator+=(const FlopCounter& o) {
    total_ += o.total_;
    for (const auto& [k, v] : o.by_category_) by_category_[k] += v;
    return *this;
  }

 private:
  std::uint64_t total_ = 0;
  std::string category_ = "other";
  std::map<std::string, std::uint64_t> by_category_;
};

inline FlopCounter*& active_flop_counter() {
  thread_local FlopCounter* counter = nullptr;
  return counter;
}

inline void record_flops(OpKind kind, std::uint64_t a, std::uint64_t b = 1, std::uint64_t c = 1) {
  if (auto* counter = active_flop_counter(); counter != nullptr && a > 0 && b > 0 && c > 0)
    counter->add(account_flops(kind, a, b, c));
}

/// Installs a counter for the current thread for the lifetime of the scope.
class FlopScope {
 public:
  explicit FlopScope(FlopCounter& counter) : previous_(active_flop_counter()) {
    active_flop_counter() = &counter;
  }
  ~FlopScope() { active_flop_counter() = previous_; }
  FlopScope(const FlopScope&) = delete;
  FlopScope& operator=(const FlopScope&) = delete;

 private:
  FlopCounter* previous_;
};

/// Relabels the active counter's category until the scope ends.
class FlopCategory {
 public:
  explicit FlopCategory(std::string category) : counter_(active_flop_counter()) {
    if (counter_ != nullptr) {
      previous_ = counter_->category();
      counter_->set_category(std::move(category));
    }
  }
  ~FlopCategory() {
    if (counter_ != nullptr) counter_->set_category(previous_);
  }
  FlopCategory(const FlopCategory&) = delete;
  FlopCategory& operator=(const FlopCategory&) = delete;

 private:
  FlopCounter* counter_;
  std::string previous_;
};

}  // namespace reusevit
