#include "citypulse/datagen.hpp"

#include "citypulse/error.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

namespace citypulse {

namespace {

constexpr double kLaneWidthM = 3.7;
constexpr double kSectionLengthM = 250.0;
constexpr std::int64_t kFramePeriodMs = 100;

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

std::uint64_t missing_stream_seed(std::uint64_t seed) { return splitmix64(seed ^ 0x6D697373696E6721ULL); }

template <typename T>
std::optional<T> parse_optional(std::string_view cell, std::size_t line, std::string_view column) {
    if (cell.empty()) return std::nullopt;
    T value{};
    auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), value);
    if (ec != std::errc{} || ptr != cell.data() + cell.size())
        throw ParseError(line, "bad " + std::string(column) + " value '" + std::string(cell) + "'");
    return value;
}

template <typename T>
T parse_required(std::string_view cell, std::size_t line, std::string_view column) {
    auto v = parse_optional<T>(cell, line, column);
    if (!v) throw ParseError(line, "missing required " + std::string(column));
    return *v;
}

template <typename T>
void append_optional(std::string& out, const std::optional<T>& v) {
    if (!v) return;
    if constexpr (std::is_floating_point_v<T>)
        out += format_double(*v);
    else
        out += std::to_string(*v);
}

} // namespace

std::string_view to_string(Weather w) {
    switch (w) {
    case Weather::Clear: return "Clear";
    case Weather::Rain: return "Rain";
    case Weather::Fog: return "Fog";
    }
    return "Clear";
}

Weather weather_from_string(std::string_view s) {
    if (s == "Clear") return Weather::Clear;
    if (s == "Rain") return Weather::Rain;
    if (s == "Fog") return Weather::Fog;
    throw Error("unknown weather '" + std::string(s) + "'");
}

std::array<LatentRegime, 3> default_regimes() {
    return {{
        {RegimeKind::FreeFlow, 25.0, 4.0, 40.0, 8.0, 1.0},
        {RegimeKind::Moderate, 12.0, 3.0, 20.0, 5.0, 1.5},
        {RegimeKind::Congested, 3.0, 1.5, 7.0, 2.0, 0.8},
    }};
}

void GeneratorConfig::validate() const {
    double sum = 0.0;
    for (double w : regime_weights) {
        if (!(w >= 0.0)) throw ConfigError("regime weights must be nonnegative");
        sum += w;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("regime weights must sum to 1");
    if (!(missing_prob >= 0.0 && missing_prob <= 0.2)) throw ConfigError("missing_prob must be in [0, 0.2]");
    if (lanes < 1 || lanes > 8) throw ConfigError("lanes must be in [1, 8]");
    if (sections < 1 || sections > 20) throw ConfigError("sections must be in [1, 20]");
    if (frames_per_vehicle < 1) throw ConfigError("frames_per_vehicle must be positive");
    if (!(regimes[0].vel_mean > regimes[1].vel_mean && regimes[1].vel_mean > regimes[2].vel_mean))
        throw ConfigError("regime velocity means must decrease FreeFlow > Moderate > Congested");
    for (const auto& r : regimes) {
        if (!(r.vel_std > 0 && r.headway_std > 0 && r.acc_std > 0))
            throw ConfigError("regime standard deviations must be positive");
    }
}

std::uint64_t regime_stream_seed(std::uint64_t seed) { return splitmix64(seed ^ 0x726567696D652121ULL); }

std::vector<GeneratedRecord> generate_with_regimes(const GeneratorConfig& config) {
    config.validate();

    std::mt19937_64 regime_rng(regime_stream_seed(config.seed));
    std::mt19937_64 value_rng(config.seed);
    std::mt19937_64 missing_rng(missing_stream_seed(config.seed));

    std::discrete_distribution<int> regime_dist(config.regime_weights.begin(), config.regime_weights.end());
    std::discrete_distribution<int> weather_dist({0.7, 0.2, 0.1});
    std::uniform_int_distribution<int> lane_dist(1, config.lanes);
    std::uniform_int_distribution<int> section_dist(1, config.sections);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::bernoulli_distribution drop(config.missing_prob);

    std::vector<GeneratedRecord> out;
    out.reserve(config.num_records);

    int lane = 1;
    int section = 1;
    for (std::uint64_t i = 0; i < config.num_records; ++i) {
        const auto frame = static_cast<std::int64_t>(i % static_cast<std::uint64_t>(config.frames_per_vehicle));
        if (frame == 0) {
            lane = lane_dist(value_rng);
            section = section_dist(value_rng);
        }
        const auto& regime = config.regimes[static_cast<std::size_t>(regime_dist(regime_rng))];

        TrafficRecordRaw r;
        r.vehicle_id = static_cast<std::int64_t>(i / static_cast<std::uint64_t>(config.frames_per_vehicle)) + 1;
        r.frame_id = frame;
        r.timestamp_ms = config.start_timestamp_ms + frame * kFramePeriodMs;
        r.lane_id = lane;
        r.section_id = section;
        r.global_x = (section - 1) * kSectionLengthM + unit(value_rng) * kSectionLengthM;
        r.global_y = (lane - 0.5) * kLaneWidthM;

        const double vel = std::max(0.0, std::normal_distribution<double>(regime.vel_mean, regime.vel_std)(value_rng));
        const double headway =
            std::max(0.5, std::normal_distribution<double>(regime.headway_mean, regime.headway_std)(value_rng));
        r.v_vel = vel;
        r.v_acc = std::normal_distribution<double>(0.0, regime.acc_std)(value_rng);
        r.space_headway = headway;
        r.time_headway = headway / std::max(vel, 0.1);
        r.weather = static_cast<Weather>(weather_dist(value_rng));

        if (config.missing_prob > 0.0) {
            auto maybe_drop = [&](auto& field) {
                if (drop(missing_rng)) field.reset();
            };
            maybe_drop(r.lane_id);
            maybe_drop(r.section_id);
            maybe_drop(r.global_x);
            maybe_drop(r.global_y);
            maybe_drop(r.v_vel);
            maybe_drop(r.v_acc);
            maybe_drop(r.space_headway);
            maybe_drop(r.time_headway);
        }
        out.push_back({std::move(r), regime.kind});
    }
    return out;
}

std::vector<TrafficRecordRaw> generate(const GeneratorConfig& config) {
    auto labeled = generate_with_regimes(config);
    std::vector<TrafficRecordRaw> out;
    out.reserve(labeled.size());
    for (auto& g : labeled) out.push_back(std::move(g.record));
    return out;
}

double velocity_range_max(const GeneratorConfig& config) {
    const auto& fastest = config.regimes[0];
    return fastest.vel_mean + 3.0 * fastest.vel_std;
}

std::vector<std::size_t> noise_selection(std::size_t n, double intensity, std::uint64_t seed) {
    if (!(intensity >= 0.0 && intensity <= 1.0)) throw RangeError("noise intensity must be in [0, 1]");
    const auto count = static_cast<std::size_t>(std::floor(intensity * static_cast<double>(n)));
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(count);
    return idx;
}

std::vector<TrafficRecordRaw> inject_noise(const std::vector<TrafficRecordRaw>& records, double intensity,
                                           std::uint64_t seed, double vel_max) {
    auto selected = noise_selection(records.size(), intensity, seed);
    std::vector<TrafficRecordRaw> out = records;
    std::mt19937_64 rng(splitmix64(seed));
    std::uniform_real_distribution<double> vel(0.0, vel_max);
    std::uniform_real_distribution<double> scale(0.5, 1.5);
    for (std::size_t i : selected) {
        auto& r = out[i];
        r.v_vel = vel(rng);
        const double s1 = scale(rng);
        const double s2 = scale(rng);
        if (r.space_headway) *r.space_headway *= s1;
        if (r.time_headway) *r.time_headway *= s2;
    }
    return out;
}

std::string format_double(double v) {
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

std::string to_csv_row(const TrafficRecordRaw& r) {
    std::string out;
    out.reserve(128);
    out += std::to_string(r.vehicle_id);
    out += ',';
    out += std::to_string(r.frame_id);
    out += ',';
    out += std::to_string(r.timestamp_ms);
    out += ',';
    append_optional(out, r.lane_id);
    out += ',';
    append_optional(out, r.section_id);
    out += ',';
    append_optional(out, r.global_x);
    out += ',';
    append_optional(out, r.global_y);
    out += ',';
    append_optional(out, r.v_vel);
    out += ',';
    append_optional(out, r.v_acc);
    out += ',';
    append_optional(out, r.space_headway);
    out += ',';
    append_optional(out, r.time_headway);
    out += ',';
    out += to_string(r.weather);
    return out;
}

TrafficRecordRaw parse_csv_row(std::string_view row, std::size_t line) {
    std::array<std::string_view, kCsvColumns> cells;
    std::size_t n = 0;
    std::size_t start = 0;
    while (true) {
        const auto comma = row.find(',', start);
        if (n == kCsvColumns) throw ParseError(line, "too many columns");
        cells[n++] = row.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start);
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    if (n != kCsvColumns)
        throw ParseError(line, "expected " + std::to_string(kCsvColumns) + " columns, got " + std::to_string(n));

    TrafficRecordRaw r;
    r.vehicle_id = parse_required<std::int64_t>(cells[0], line, "Vehicle_ID");
    r.frame_id = parse_required<std::int64_t>(cells[1], line, "Frame_ID");
    r.timestamp_ms = parse_required<std::int64_t>(cells[2], line, "Timestamp_ms");
    r.lane_id = parse_optional<int>(cells[3], line, "Lane_ID");
    r.section_id = parse_optional<int>(cells[4], line, "Section_ID");
    r.global_x = parse_optional<double>(cells[5], line, "Global_X");
    r.global_y = parse_optional<double>(cells[6], line, "Global_Y");
    r.v_vel = parse_optional<double>(cells[7], line, "v_Vel");
    r.v_acc = parse_optional<double>(cells[8], line, "v_Acc");
    r.space_headway = parse_optional<double>(cells[9], line, "Space_Headway");
    r.time_headway = parse_optional<double>(cells[10], line, "Time_Headway");
    try {
        r.weather = weather_from_string(cells[11]);
    } catch (const Error& e) {
        throw ParseError(line, e.what());
    }
    return r;
}

std::size_t write_csv(const std::vector<TrafficRecordRaw>& records, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw StorageError("cannot open " + path.string() + " for writing");
    out << kCsvHeader << '\n';
    for (const auto& r : records) out << to_csv_row(r) << '\n';
    out.flush();
    if (!out) throw StorageError("write failed for " + path.string());
    return records.size();
}

std::vector<TrafficRecordRaw> read_csv(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw StorageError("cannot open " + path.string() + " for reading");
    std::string line;
    if (!std::getline(in, line)) throw ParseError(1, "missing header");
    if (line != kCsvHeader) throw ParseError(1, "unexpected header");
    std::vector<TrafficRecordRaw> out;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        out.push_back(parse_csv_row(line, lineno));
    }
    if (in.bad()) throw StorageError("read failed for " + path.string());
    return out;
}

} // namespace citypulse
