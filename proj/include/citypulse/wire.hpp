#pragma once

#include "citypulse/datagen.hpp"

#include <string>
#include <string_view>

namespace citypulse {

// Message payloads are UTF-8 JSON objects keyed by the CSV header names;
// absent optionals are encoded as null.
std::string to_json_payload(const TrafficRecordRaw& r);

// Throws Error with a description when the payload is not a valid record.
TrafficRecordRaw from_json_payload(std::string_view payload);

// Partitioning key for a record (its vehicle id).
std::string record_key(const TrafficRecordRaw& r);

} // namespace citypulse
