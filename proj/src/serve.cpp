#include "citypulse/serve.hpp"

#include "citypulse/error.hpp"

#include <cmath>
#include <fstream>
#include <httplib.h>
#include <json.hpp>

namespace citypulse {

using nlohmann::json;
namespace fs = std::filesystem;

// ---- Road directory ----

RoadDirectory RoadDirectory::generated(int lanes, int sections) {
    std::map<std::pair<int, int>, RoadName> entries;
    for (int lane = 1; lane <= lanes; ++lane) {
        for (int section = 1; section <= sections; ++section) {
            entries[{lane, section}] = {section <= 10 ? "Douala" : "Yaounde",
                                        "Avenue " + std::to_string(section) + " (lane " + std::to_string(lane) + ")"};
        }
    }
    return RoadDirectory(std::move(entries));
}

RoadDirectory RoadDirectory::load(const fs::path& csv) {
    std::ifstream in(csv);
    if (!in) throw StorageError("cannot read road directory " + csv.string());
    std::string line;
    if (!std::getline(in, line) || line != kRoadDirectoryHeader)
        throw ParseError(1, "expected header " + std::string(kRoadDirectoryHeader));
    std::map<std::pair<int, int>, RoadName> entries;
    for (std::size_t n = 2; std::getline(in, line); ++n) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::size_t start = 0;
        for (;;) {
            const auto comma = line.find(',', start);
            cells.push_back(line.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        if (cells.size() != 4) throw ParseError(n, "expected 4 columns");
        try {
            entries[{std::stoi(cells[0]), std::stoi(cells[1])}] = {cells[2], cells[3]};
        } catch (const std::logic_error&) {
            throw ParseError(n, "bad lane or section id");
        }
    }
    return RoadDirectory(std::move(entries));
}

void RoadDirectory::save(const fs::path& csv) const {
    std::string text(kRoadDirectoryHeader);
    text += '\n';
    for (const auto& [key, name] : entries_)
        text += std::to_string(key.first) + "," + std::to_string(key.second) + "," + name.city + "," + name.road + "\n";
    write_text_file(csv, text);
}

RoadName RoadDirectory::lookup(int lane, int section) const {
    const auto it = entries_.find({lane, section});
    if (it != entries_.end()) return it->second;
    return {"Unknown", "Unknown Road"};
}

// ---- State ----

ServiceState::ServiceState(RoadDirectory roads)
    : roads_(std::move(roads)), stats_(std::make_shared<const std::vector<RoadStats>>()) {}

void ServiceState::set_model(std::shared_ptr<const ModelArtifact> model) {
    std::lock_guard lock(mu_);
    model_ = std::move(model);
}

std::shared_ptr<const ModelArtifact> ServiceState::model() const {
    std::lock_guard lock(mu_);
    return model_;
}

void ServiceState::load_warehouse(const Warehouse& warehouse) { set_road_stats(aggregate_by_road(warehouse)); }

void ServiceState::set_road_stats(std::vector<RoadStats> stats) {
    auto next = std::make_shared<const std::vector<RoadStats>>(std::move(stats));
    std::lock_guard lock(mu_);
    stats_ = std::move(next);
}

std::shared_ptr<const std::vector<RoadStats>> ServiceState::road_stats() const {
    std::lock_guard lock(mu_);
    return stats_;
}

// ---- Handlers ----

namespace {

HttpReply error_reply(int status, const std::string& message, const std::string& field = {}) {
    json body{{"error", message}};
    if (!field.empty()) body["field"] = field;
    return {status, body.dump()};
}

} // namespace

HttpReply handle_health(const ServiceState& state) {
    json body{{"status", "ok"},
              {"model_loaded", state.model() != nullptr},
              {"roads", state.road_stats()->size()},
              {"has_metrics", state.metrics().latest() != nullptr}};
    return {200, body.dump()};
}

HttpReply handle_predict(const ServiceState& state, std::string_view body) {
    const auto model = state.model();
    if (!model) return error_reply(503, "no model loaded");

    json req;
    try {
        req = json::parse(body);
    } catch (const json::parse_error&) {
        return error_reply(400, "request body is not valid JSON");
    }
    if (!req.is_object()) return error_reply(400, "request body must be a JSON object");

    FeatureVector x{};
    for (std::size_t j = 0; j < kNumFeatures; ++j) {
        const std::string name(kFeatureNames[j]);
        if (!req.contains(name)) return error_reply(400, "missing feature " + name, name);
        const auto& v = req[name];
        if (!v.is_number() || !std::isfinite(v.get<double>()))
            return error_reply(400, "feature " + name + " must be a finite number", name);
        x[j] = v.get<double>();
    }

    const auto votes = model->forest.votes(x);
    std::size_t total = 0;
    for (auto v : votes) total += v;
    if (total == 0) return error_reply(503, "loaded model has no trees");

    const auto label = rf_predict(model->forest, x);
    json fractions;
    for (auto l : kAllLabels)
        fractions[std::string(to_string(l))] = static_cast<double>(votes[index_of(l)]) / static_cast<double>(total);
    json out{{"Congestion_Label", std::string(to_string(label))}, {"votes", fractions}};

    if (req.contains("Lane_ID") || req.contains("Section_ID")) {
        auto id_of = [&](const char* key) -> std::optional<int> {
            if (!req.contains(key)) return -1;
            if (!req[key].is_number_integer()) return std::nullopt;
            return req[key].get<int>();
        };
        const auto lane = id_of("Lane_ID");
        const auto section = id_of("Section_ID");
        if (!lane) return error_reply(400, "Lane_ID must be an integer", "Lane_ID");
        if (!section) return error_reply(400, "Section_ID must be an integer", "Section_ID");
        const auto name = state.roads().lookup(*lane, *section);
        out["City"] = name.city;
        out["Road_Name"] = name.road;
    }
    return {200, out.dump()};
}

HttpReply handle_congestion(const ServiceState& state, std::optional<int> lane, std::optional<int> section) {
    const auto stats = state.road_stats();
    json list = json::array();
    for (const auto& s : *stats) {
        if (lane && s.lane_id != *lane) continue;
        if (section && s.section_id != *section) continue;
        const auto name = state.roads().lookup(s.lane_id, s.section_id);
        json entry{{"Lane_ID", s.lane_id},
                   {"Section_ID", s.section_id},
                   {"City", name.city},
                   {"Road_Name", name.road},
                   {"count", s.count},
                   {"mean_v_Vel", s.mean_v_vel},
                   {"unlabeled", s.unlabeled}};
        for (auto l : kAllLabels) entry[std::string(to_string(l))] = s.label_counts[index_of(l)];
        list.push_back(std::move(entry));
    }
    return {200, list.dump()};
}

std::string metrics_to_json(const PipelineMetrics& m) {
    json lag = json::array();
    for (const auto& s : m.lag_series) lag.push_back({{"elapsed_ms", s.elapsed_ms}, {"total_lag", s.total_lag}});
    json out{{"strategy", std::string(to_string(m.strategy))},
             {"chunk_size", m.chunk_size},
             {"records_total", m.records_total},
             {"elapsed_ms", m.elapsed_ms},
             {"throughput_rpm", m.throughput_rpm},
             {"mean_batch_latency_ms", m.mean_batch_latency_ms()},
             {"latency_unit", m.latency_unit},
             {"batch_latencies_ms", m.batch_latencies_ms},
             {"lag", lag},
             {"peak_buffer_occupancy", m.peak_buffer_occupancy},
             {"warehouse_rows", m.warehouse_rows},
             {"dead_letters", m.dead_letters},
             {"final_lag", m.final_lag},
             {"content_hash", m.content_hash},
             {"reference_throughput_rpm", kReferenceThroughputRpm},
             {"reference_batch_latency_ms", kReferenceBatchLatencyMs}};
    if (!m.failure.empty()) out["failure"] = m.failure;
    return out.dump();
}

HttpReply handle_metrics(const ServiceState& state) {
    const auto latest = state.metrics().latest();
    if (!latest) return {200, json{{"status", "no runs"}}.dump()};
    return {200, metrics_to_json(*latest)};
}

// ---- Server ----

struct HttpServer::Impl {
    ServiceState& state;
    httplib::Server server;

    explicit Impl(ServiceState& s) : state(s) {}
};

namespace {

void send(httplib::Response& res, const HttpReply& reply) {
    res.status = reply.status;
    res.set_content(reply.body, "application/json");
}

std::optional<int> int_param(const httplib::Request& req, const char* name) {
    if (!req.has_param(name)) return std::nullopt;
    const auto text = req.get_param_value(name);
    if (text.empty()) return std::nullopt;
    std::size_t used = 0;
    const int v = std::stoi(text, &used);
    if (used != text.size()) throw std::invalid_argument(name);
    return v;
}

} // namespace

HttpServer::HttpServer(ServiceState& state) : impl_(std::make_unique<Impl>(state)) {
    auto& srv = impl_->server;
    auto& st = impl_->state;
    srv.Get("/health", [&st](const httplib::Request&, httplib::Response& res) { send(res, handle_health(st)); });
    srv.Post("/predict", [&st](const httplib::Request& req, httplib::Response& res) {
        send(res, handle_predict(st, req.body));
    });
    srv.Get("/congestion", [&st](const httplib::Request& req, httplib::Response& res) {
        std::optional<int> lane;
        std::optional<int> section;
        try {
            lane = int_param(req, "lane");
            section = int_param(req, "section");
        } catch (const std::logic_error&) {
            send(res, error_reply(400, "lane and section must be integers"));
            return;
        }
        send(res, handle_congestion(st, lane, section));
    });
    srv.Get("/metrics", [&st](const httplib::Request&, httplib::Response& res) { send(res, handle_metrics(st)); });
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
    if (port == 0) return impl_->server.bind_to_any_port(host);
    return impl_->server.bind_to_port(host, port) ? port : -1;
}

void HttpServer::listen() { impl_->server.listen_after_bind(); }

void HttpServer::stop() {
    if (impl_) impl_->server.stop();
}

bool HttpServer::running() const { return impl_->server.is_running(); }

} // namespace citypulse
