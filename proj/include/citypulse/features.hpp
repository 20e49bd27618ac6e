#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string_view>

namespace citypulse {

inline constexpr std::size_t kNumFeatures = 4;

// Model inputs in fixed order: v_Vel, v_Acc, Space_Headway, Time_Headway.
using FeatureVector = std::array<double, kNumFeatures>;

enum FeatureIndex : std::size_t { kVVel = 0, kVAcc = 1, kSpaceHeadway = 2, kTimeHeadway = 3 };

inline constexpr std::array<std::string_view, kNumFeatures> kFeatureNames{"v_Vel", "v_Acc", "Space_Headway",
                                                                          "Time_Headway"};

// Ordered by severity; the numeric value is used as a class index.
enum class CongestionLabel : std::uint8_t { Low = 0, Medium = 1, High = 2 };

inline constexpr std::size_t kNumClasses = 3;
inline constexpr std::array<CongestionLabel, kNumClasses> kAllLabels{CongestionLabel::Low, CongestionLabel::Medium,
                                                                     CongestionLabel::High};

constexpr std::size_t index_of(CongestionLabel l) { return static_cast<std::size_t>(l); }
constexpr CongestionLabel label_at(std::size_t i) { return static_cast<CongestionLabel>(i); }

std::string_view to_string(CongestionLabel l);
std::optional<CongestionLabel> label_from_string(std::string_view s);

} // namespace citypulse
