#pragma once

#include "citypulse/datagen.hpp"
#include "citypulse/learner.hpp"
#include "citypulse/mlog.hpp"
#include "citypulse/streamproc.hpp"

#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace citypulse {

enum class IngestionStrategy { Full, Chunked };

std::string_view to_string(IngestionStrategy s);
IngestionStrategy strategy_from_string(std::string_view s);

struct StreamOptions {
    std::string topic = "raw-traffic-data";
    std::string group = "citypulse-stream";
    std::size_t micro_batch_size = 500;
    // Staged records held across all workers before a warehouse commit.
    std::size_t temp_flush_records = 100'000;
};

struct LabelerOptions {
    KMeansOptions kmeans;
    // Leading records, in (Vehicle_ID, Frame_ID) order, the labeler is fitted on.
    std::size_t canonical_sample = 50'000;
};

struct BenchOptions {
    IngestionStrategy strategy = IngestionStrategy::Full;
    std::uint64_t chunk_size = 500'000;
    // The next chunk is produced once lag drops below this share of a chunk.
    double drain_fraction = 0.1;
    std::uint64_t latency_unit = 100'000;
    int lag_sample_ms = 100;
    int resource_sample_ms = 250;
};

struct PipelineConfig {
    GeneratorConfig generator;
    BrokerConfig broker;
    StreamOptions stream;
    LabelerOptions labeler;
    BenchOptions bench;
    std::filesystem::path warehouse_dir;
};

inline constexpr double kReferenceThroughputRpm = 320'000.0;
inline constexpr double kReferenceBatchLatencyMs = 3'200.0;
inline constexpr double kReferenceTimeRatio = 1.10;

struct LagSample {
    double elapsed_ms = 0.0;
    std::int64_t total_lag = 0;
    // Messages appended to the topic when the sample was taken.
    std::int64_t produced = 0;

    bool operator==(const LagSample&) const = default;
};

struct ResourceSample {
    double elapsed_ms = 0.0;
    std::int64_t rss_bytes = 0;

    bool operator==(const ResourceSample&) const = default;
};

struct ResourceSeries {
    bool available = false;
    std::vector<ResourceSample> samples;

    bool operator==(const ResourceSeries&) const = default;
};

struct PipelineMetrics {
    IngestionStrategy strategy = IngestionStrategy::Full;
    std::uint64_t chunk_size = 0;
    std::uint64_t records_total = 0;
    double elapsed_ms = 0.0;
    double throughput_rpm = 0.0;
    std::uint64_t latency_unit = 100'000;
    std::vector<double> batch_latencies_ms;
    std::vector<LagSample> lag_series;
    std::int64_t peak_buffer_occupancy = 0;
    std::int64_t queue_capacity = 0;
    std::uint64_t warehouse_rows = 0;
    std::uint64_t dead_letters = 0;
    std::int64_t final_lag = 0;
    std::string content_hash;
    ResourceSeries resources;
    // Set when the run stopped early; the other fields are partial.
    std::string failure;

    double mean_batch_latency_ms() const;
    bool operator==(const PipelineMetrics&) const = default;
};

struct StressComparison {
    PipelineMetrics full_run;
    PipelineMetrics chunked_run;
    std::uint64_t chunk_size = 0;
    double time_ratio = 0.0;
    bool content_equal = false;
};

// Fits the labeler on the first `canonical_sample` records in
// (Vehicle_ID, Frame_ID) order, so any pipeline seeing the same records
// labels them the same way.
CongestionLabeler fit_canonical_labeler(std::vector<TrafficRecord> cleaned, const LabelerOptions& options);
Labeler as_labeler(std::shared_ptr<const CongestionLabeler> labeler);

// Generates config.generator.num_records records and runs them through the
// broker, the stream processor and the warehouse. The warehouse directory
// must not hold rows yet.
PipelineMetrics run_pipeline(const PipelineConfig& config);
PipelineMetrics run_pipeline(const std::vector<TrafficRecordRaw>& records, const PipelineConfig& config);

// Runs both strategies over the same records, in work_dir/full and
// work_dir/chunked.
StressComparison compare_strategies(const PipelineConfig& config, std::uint64_t chunk_size,
                                    const std::filesystem::path& work_dir);

// Violated structural properties of a finished run; empty when all hold.
std::vector<std::string> check_invariants(const PipelineMetrics& metrics);

struct DrainResult {
    std::size_t staged = 0;
    std::size_t committed = 0;
    std::vector<DeadLetter> dead_letters;
};

// Processes everything already in the topic into the warehouse, one worker
// per partition.
DrainResult drain_topic(Broker& broker, const StreamOptions& options, Warehouse& warehouse, const Labeler& labeler);

// ---- Resources ----

// Resident set size of this process, or nullopt where /proc is unavailable.
std::optional<std::int64_t> read_rss_bytes(const std::filesystem::path& statm = "/proc/self/statm");

// Samples RSS on a fixed schedule from a background thread.
class ResourceSampler {
public:
    explicit ResourceSampler(int interval_ms, std::filesystem::path statm = "/proc/self/statm");
    ~ResourceSampler();
    ResourceSampler(const ResourceSampler&) = delete;
    ResourceSampler& operator=(const ResourceSampler&) = delete;

    ResourceSeries stop();

private:
    void run();

    int interval_ms_;
    std::filesystem::path statm_;
    std::mutex mu_;
    std::condition_variable cv_;
    bool stopping_ = false;
    ResourceSeries series_;
    std::thread thread_;
};

// ---- Reports ----

std::string format_metrics_text(const PipelineMetrics& metrics);
// Sections: "# summary" (key,value), "# batch_latencies", "# lag", "# resources".
std::string format_metrics_csv(const PipelineMetrics& metrics);
PipelineMetrics parse_metrics_csv(std::string_view csv);

std::string format_comparison_text(const StressComparison& comparison);
std::string format_comparison_csv(const StressComparison& comparison);

void write_text_file(const std::filesystem::path& path, std::string_view content);

// Latest completed run, shared with the HTTP layer.
class MetricsStore {
public:
    void publish(PipelineMetrics metrics);
    std::shared_ptr<const PipelineMetrics> latest() const;

private:
    mutable std::mutex mu_;
    std::shared_ptr<const PipelineMetrics> latest_;
};

// ---- Model training and evaluation runs ----

struct TrainingSet {
    FeatureMatrix x;
    LabelVector y;
};

// Labeled warehouse rows in (Vehicle_ID, Frame_ID, Timestamp) order.
TrainingSet training_set(const Warehouse& warehouse);

struct TrainResult {
    RandomForestModel forest;
    SplitIndices split;
    EvalReport test_report;
};

TrainResult train_and_evaluate(const TrainingSet& data, const ForestOptions& forest, double test_fraction,
                               std::uint64_t split_seed);

struct StabilityOptions {
    std::size_t batches = 20;
    std::size_t batch_records = 10'000;
    // 1-based; 0 disables noise.
    std::size_t noisy_batch = 14;
    double noise_intensity = 0.5;
    std::uint64_t seed = 2024;
};

// Fresh generated batches. Truth labels come from the clean features; the
// noisy batch's features are perturbed afterwards.
std::vector<LabeledBatch> stability_batches(const GeneratorConfig& generator, const CongestionLabeler& labeler,
                                            const StabilityOptions& options);

} // namespace citypulse
