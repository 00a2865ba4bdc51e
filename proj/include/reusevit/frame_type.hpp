// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include "reusevit/error.hpp"

namespace reusevit {

/// Codec-style frame roles. I frames are computed from scratch; P frames
/// reference the previous anchor; B frames reference one frame on each side
/// at distance 2 (Bdist2) or 1 (Bdist1).
enum class FrameType : std::uint8_t { I = 0, P = 1, Bdist2 = 2, Bdist1 = 3 };

inline constexpr std::size_t kFrameTypeCount = 4;

inline std::string_view to_string(FrameType t) {
  switch (t) {
    case FrameType::I: return "I";
    case FrameType::P: return "P";
    case FrameType::Bdist2: return "Bdist2";
    case FrameType::Bdist1: return "Bdist1";
  }
  return "?";
}

inline FrameType frame_type_from_string(std::string_view s) {
  if (s == "I") return FrameType::I;
  if (s == "P") return FrameType::P;
  if (s == "Bdist2") return FrameType::Bdist2;
  if (s == "Bdist1") return FrameType::Bdist1;
  throw FormatError("unknown frame type \"" + std::string(s) + "\"");
}

}  // namespace reusevit
