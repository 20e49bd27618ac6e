#pragma once

#include "citypulse/bench.hpp"
#include "citypulse/learner.hpp"
#include "citypulse/streamproc.hpp"

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace citypulse {

struct RoadName {
    std::string city;
    std::string road;

    bool operator==(const RoadName&) const = default;
};

// Simulated road names per (lane, section). Pairs with a missing lane or
// section (-1) resolve to "Unknown Road".
class RoadDirectory {
public:
    RoadDirectory() = default;
    explicit RoadDirectory(std::map<std::pair<int, int>, RoadName> entries) : entries_(std::move(entries)) {}

    // Sections 1-10 are in Douala, 11-20 in Yaounde; roads are "Avenue <section> (lane <lane>)".
    static RoadDirectory generated(int lanes = 8, int sections = 20);
    static RoadDirectory load(const std::filesystem::path& csv);
    void save(const std::filesystem::path& csv) const;

    RoadName lookup(int lane, int section) const;
    std::size_t size() const noexcept { return entries_.size(); }
    bool operator==(const RoadDirectory&) const = default;

private:
    std::map<std::pair<int, int>, RoadName> entries_;
};

inline constexpr std::string_view kRoadDirectoryHeader = "Lane_ID,Section_ID,City,Road_Name";

// What the HTTP handlers read. The model and the road summary are immutable
// snapshots swapped in whole.
class ServiceState {
public:
    explicit ServiceState(RoadDirectory roads = RoadDirectory::generated());

    void set_model(std::shared_ptr<const ModelArtifact> model);
    std::shared_ptr<const ModelArtifact> model() const;

    // Replaces the congestion snapshot with the warehouse's current contents.
    void load_warehouse(const Warehouse& warehouse);
    void set_road_stats(std::vector<RoadStats> stats);
    std::shared_ptr<const std::vector<RoadStats>> road_stats() const;

    const RoadDirectory& roads() const noexcept { return roads_; }
    MetricsStore& metrics() noexcept { return metrics_; }
    const MetricsStore& metrics() const noexcept { return metrics_; }

private:
    RoadDirectory roads_;
    mutable std::mutex mu_;
    std::shared_ptr<const ModelArtifact> model_;
    std::shared_ptr<const std::vector<RoadStats>> stats_;
    MetricsStore metrics_;
};

struct HttpReply {
    int status = 200;
    std::string body;  // JSON
};

HttpReply handle_health(const ServiceState& state);
HttpReply handle_predict(const ServiceState& state, std::string_view body);
HttpReply handle_congestion(const ServiceState& state, std::optional<int> lane, std::optional<int> section);
HttpReply handle_metrics(const ServiceState& state);

std::string metrics_to_json(const PipelineMetrics& metrics);

// Blocking HTTP front end over the handlers.
class HttpServer {
public:
    explicit HttpServer(ServiceState& state);
    ~HttpServer();
    HttpServer(const HttpServer&) = delete;
    HttpServer& operator=(const HttpServer&) = delete;

    // Port 0 picks a free port. Returns the bound port, or -1.
    int bind(const std::string& host, int port);
    // Serves until stop(); call after bind().
    void listen();
    void stop();
    bool running() const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

} // namespace citypulse
