#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace citypulse {

enum class Weather : std::uint8_t { Clear, Rain, Fog };

std::string_view to_string(Weather w);
Weather weather_from_string(std::string_view s);

// One vehicle telemetry observation as produced by the generator. Optional
// fields may be absent until the stream processor cleans the record.
struct TrafficRecordRaw {
    std::int64_t vehicle_id = 1;
    std::int64_t frame_id = 0;
    std::int64_t timestamp_ms = 0;
    std::optional<int> lane_id;
    std::optional<int> section_id;
    std::optional<double> global_x;
    std::optional<double> global_y;
    std::optional<double> v_vel;
    std::optional<double> v_acc;
    std::optional<double> space_headway;
    std::optional<double> time_headway;
    Weather weather = Weather::Clear;

    bool operator==(const TrafficRecordRaw&) const = default;
};

enum class RegimeKind : std::uint8_t { FreeFlow = 0, Moderate = 1, Congested = 2 };

struct LatentRegime {
    RegimeKind kind;
    double vel_mean;      // m/s
    double vel_std;
    double headway_mean;  // m
    double headway_std;
    double acc_std;       // m/s^2
};

std::array<LatentRegime, 3> default_regimes();

struct GeneratorConfig {
    std::uint64_t num_records = 0;
    std::uint64_t seed = 42;
    std::array<double, 3> regime_weights{1.0 / 3, 1.0 / 3, 1.0 / 3};
    double missing_prob = 0.02;
    int lanes = 8;
    int sections = 20;
    int frames_per_vehicle = 50;
    std::int64_t start_timestamp_ms = 1'700'000'000'000;
    std::array<LatentRegime, 3> regimes = default_regimes();

    // Throws ConfigError.
    void validate() const;
};

// Seeds of the independent random streams a generator draws from. Exposed so
// tests can re-run a single stream as an oracle.
std::uint64_t regime_stream_seed(std::uint64_t seed);

struct GeneratedRecord {
    TrafficRecordRaw record;
    RegimeKind regime;
};

std::vector<TrafficRecordRaw> generate(const GeneratorConfig& config);
std::vector<GeneratedRecord> generate_with_regimes(const GeneratorConfig& config);

// Upper end of the velocity range used by the noise injector.
double velocity_range_max(const GeneratorConfig& config = {});

// Scrambles floor(intensity * n) records chosen by a seeded shuffle: v_vel is
// redrawn uniformly over [0, velocity_range_max] and present headways are
// scaled by a uniform factor in [0.5, 1.5].
std::vector<TrafficRecordRaw> inject_noise(const std::vector<TrafficRecordRaw>& records,
                                           double intensity, std::uint64_t seed,
                                           double vel_max = velocity_range_max());

// Indices inject_noise perturbs, in selection order.
std::vector<std::size_t> noise_selection(std::size_t n, double intensity, std::uint64_t seed);

inline constexpr std::string_view kCsvHeader =
    "Vehicle_ID,Frame_ID,Timestamp_ms,Lane_ID,Section_ID,Global_X,Global_Y,"
    "v_Vel,v_Acc,Space_Headway,Time_Headway,Weather";

inline constexpr std::size_t kCsvColumns = 12;

// Shortest decimal text that parses back to the same double.
std::string format_double(double v);

std::string to_csv_row(const TrafficRecordRaw& r);
// `line` is used for error messages only.
TrafficRecordRaw parse_csv_row(std::string_view row, std::size_t line);

std::size_t write_csv(const std::vector<TrafficRecordRaw>& records, const std::filesystem::path& path);
std::vector<TrafficRecordRaw> read_csv(const std::filesystem::path& path);

} // namespace citypulse
