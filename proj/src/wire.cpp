#include "citypulse/wire.hpp"

#include "citypulse/error.hpp"

#include <json.hpp>

namespace citypulse {

using nlohmann::json;

namespace {

template <typename T>
json optional_to_json(const std::optional<T>& v) {
    return v ? json(*v) : json(nullptr);
}

template <typename T>
std::optional<T> optional_from_json(const json& obj, const char* key) {
    auto it = obj.find(key);
    if (it == obj.end()) throw Error(std::string("missing field ") + key);
    if (it->is_null()) return std::nullopt;
    if (!it->is_number()) throw Error(std::string("field ") + key + " is not a number");
    if constexpr (std::is_integral_v<T>) {
        if (!it->is_number_integer()) throw Error(std::string("field ") + key + " is not an integer");
    }
    return it->get<T>();
}

template <typename T>
T required_from_json(const json& obj, const char* key) {
    auto v = optional_from_json<T>(obj, key);
    if (!v) throw Error(std::string("field ") + key + " must not be null");
    return *v;
}

} // namespace

std::string to_json_payload(const TrafficRecordRaw& r) {
    json j = {
        {"Vehicle_ID", r.vehicle_id},
        {"Frame_ID", r.frame_id},
        {"Timestamp_ms", r.timestamp_ms},
        {"Lane_ID", optional_to_json(r.lane_id)},
        {"Section_ID", optional_to_json(r.section_id)},
        {"Global_X", optional_to_json(r.global_x)},
        {"Global_Y", optional_to_json(r.global_y)},
        {"v_Vel", optional_to_json(r.v_vel)},
        {"v_Acc", optional_to_json(r.v_acc)},
        {"Space_Headway", optional_to_json(r.space_headway)},
        {"Time_Headway", optional_to_json(r.time_headway)},
        {"Weather", std::string(to_string(r.weather))},
    };
    return j.dump();
}

TrafficRecordRaw from_json_payload(std::string_view payload) {
    json j = json::parse(payload, nullptr, false);
    if (j.is_discarded()) throw Error("payload is not valid JSON");
    if (!j.is_object()) throw Error("payload is not a JSON object");
    if (j.size() != kCsvColumns) throw Error("payload has " + std::to_string(j.size()) + " fields, expected 12");

    TrafficRecordRaw r;
    r.vehicle_id = required_from_json<std::int64_t>(j, "Vehicle_ID");
    r.frame_id = required_from_json<std::int64_t>(j, "Frame_ID");
    r.timestamp_ms = required_from_json<std::int64_t>(j, "Timestamp_ms");
    r.lane_id = optional_from_json<int>(j, "Lane_ID");
    r.section_id = optional_from_json<int>(j, "Section_ID");
    r.global_x = optional_from_json<double>(j, "Global_X");
    r.global_y = optional_from_json<double>(j, "Global_Y");
    r.v_vel = optional_from_json<double>(j, "v_Vel");
    r.v_acc = optional_from_json<double>(j, "v_Acc");
    r.space_headway = optional_from_json<double>(j, "Space_Headway");
    r.time_headway = optional_from_json<double>(j, "Time_Headway");
    auto w = j.find("Weather");
    if (w == j.end() || !w->is_string()) throw Error("field Weather must be a string");
    r.weather = weather_from_string(w->get<std::string>());
    return r;
}

std::string record_key(const TrafficRecordRaw& r) { return std::to_string(r.vehicle_id); }

} // namespace citypulse
