#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>

namespace planseg {

// Per-axis integer triple, axis 0 first. Axis 0 is the fastest-varying axis in memory.
using Triple = std::array<int, 3>;
using Spacing = std::array<double, 3>;

enum class EncoderType { Plain, Residual };

std::string_view to_string(EncoderType type);
EncoderType encoder_type_from_string(std::string_view text);

inline std::int64_t voxel_count(const Triple& t) {
  return static_cast<std::int64_t>(t[0]) * t[1] * t[2];
}

// Binary lesion segmentation: background and lesion.
inline constexpr int kNumClasses = 2;

}  // namespace planseg
