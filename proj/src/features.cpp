#include "citypulse/features.hpp"

namespace citypulse {

std::string_view to_string(CongestionLabel l) {
    switch (l) {
    case CongestionLabel::Low: return "Low";
    case CongestionLabel::Medium: return "Medium";
    case CongestionLabel::High: return "High";
    }
    return "Low";
}

std::optional<CongestionLabel> label_from_string(std::string_view s) {
    if (s == "Low") return CongestionLabel::Low;
    if (s == "Medium") return CongestionLabel::Medium;
    if (s == "High") return CongestionLabel::High;
    return std::nullopt;
}

} // namespace citypulse
