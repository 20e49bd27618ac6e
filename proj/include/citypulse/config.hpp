#pragma once

#include "citypulse/bench.hpp"

#include <filesystem>
#include <string>

namespace citypulse {

struct SplitOptions {
    double test_fraction = 0.2;
    std::uint64_t seed = 7;
};

struct ServeOptions {
    std::string host = "127.0.0.1";
    int port = 8080;
};

// Every tunable default in one place. The JSON form uses one object per
// section with the member names below; a file may set any subset.
struct AppConfig {
    PipelineConfig pipeline;
    ForestOptions forest;
    SplitOptions split;
    StabilityOptions stability;
    ServeOptions serve;

    void validate() const;
};

std::string config_to_json(const AppConfig& config);
// Unknown keys and wrongly typed values are ConfigErrors.
AppConfig config_from_json(std::string_view text, AppConfig base = {});
AppConfig load_config(const std::filesystem::path& path);

} // namespace citypulse
