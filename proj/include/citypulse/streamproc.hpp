#pragma once

#include "citypulse/datagen.hpp"
#include "citypulse/features.hpp"
#include "citypulse/mlog.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

namespace citypulse {

// A cleaned record: every field present. Positions missing upstream are
// filled with 0.0.
struct TrafficRecord {
    std::int64_t vehicle_id = 1;
    std::int64_t frame_id = 0;
    std::int64_t timestamp_ms = 0;
    int lane_id = -1;
    int section_id = -1;
    double global_x = 0.0;
    double global_y = 0.0;
    double v_vel = 0.0;
    double v_acc = 0.0;
    double space_headway = 0.0;
    double time_headway = 0.0;
    Weather weather = Weather::Clear;
    std::int64_t ingest_ts_ms = 0;
    std::int64_t commit_ts_ms = 0;
    std::optional<CongestionLabel> label;

    bool operator==(const TrafficRecord&) const = default;
};

TrafficRecord clean(const TrafficRecordRaw& raw);
// Lifts a cleaned record back into the raw type (all fields present).
TrafficRecordRaw to_raw(const TrafficRecord& r);
FeatureVector featurize(const TrafficRecord& r);

using Labeler = std::function<CongestionLabel(const FeatureVector&)>;

// ---- Warehouse CSV ----

inline constexpr std::string_view kWarehouseHeader =
    "Vehicle_ID,Frame_ID,Timestamp_ms,Lane_ID,Section_ID,Global_X,Global_Y,"
    "v_Vel,v_Acc,Space_Headway,Time_Headway,Weather,Ingest_Ts_Ms,Commit_Ts_Ms,Congestion_Label";

std::string to_warehouse_row(const TrafficRecord& r);
TrafficRecord parse_warehouse_row(std::string_view row, std::size_t line);

// ---- Staging ----

struct StagedRow {
    TrafficRecord record;
    FeatureVector features;
    int partition;
    std::int64_t offset;
};

struct StagedBatch {
    std::uint64_t sequence;
    std::string batch_id;
    std::vector<StagedRow> rows;
};

// Canonical id of a batch: its per-partition offset ranges, e.g. "p0:0-124;p2:0-99".
std::string batch_id_for(const std::vector<StagedRow>& rows);

// Buffers processed micro-batches ahead of the warehouse. With a directory,
// each staged batch is also written to its own file (temp file + rename) so
// it survives a crash, and existing files are reloaded on construction.
class TempStore {
public:
    explicit TempStore(std::size_t flush_threshold = 100'000, std::optional<std::filesystem::path> dir = std::nullopt);

    // Returns the sequence number, or nullopt when a batch with the same id
    // is already staged. Throws StorageError on I/O failure (nothing staged).
    std::optional<std::uint64_t> stage(std::vector<StagedRow> rows);

    const std::vector<StagedBatch>& batches() const noexcept { return batches_; }
    std::size_t staged_records() const noexcept { return staged_records_; }
    bool empty() const noexcept { return batches_.empty(); }
    bool should_flush() const noexcept { return staged_records_ >= flush_threshold_; }
    std::size_t flush_threshold() const noexcept { return flush_threshold_; }
    void clear();

    void inject_stage_failure(bool fail) noexcept { fail_stage_ = fail; }

private:
    void persist(const StagedBatch& batch) const;
    void reload();

    std::size_t flush_threshold_;
    std::optional<std::filesystem::path> dir_;
    std::vector<StagedBatch> batches_;
    std::size_t staged_records_ = 0;
    std::uint64_t next_sequence_ = 0;
    bool fail_stage_ = false;
};

struct LedgerEntry {
    std::string batch_id;
    std::size_t row_count;
    std::int64_t commit_ts_ms;
};

// Append-only, ledger-deduplicated record table in a directory:
// warehouse.csv (rows) and ledger.csv (one line per committed batch).
// Rows already covered by a committed offset range are never appended twice.
class Warehouse {
public:
    explicit Warehouse(std::filesystem::path dir);

    // Appends every staged batch in sequence order, labelling rows when a
    // labeler is given, then clears the store. On I/O failure nothing is
    // appended and the store is left intact.
    std::size_t commit(TempStore& temp, const Labeler& labeler = {});

    std::size_t row_count() const;
    std::vector<LedgerEntry> ledger() const;
    bool has_batch(const std::string& batch_id) const;
    // Next offset not yet in the warehouse, per source partition.
    std::map<int, std::int64_t> committed_offsets() const;

    // Visits rows in append order under a consistent snapshot.
    void scan(const std::function<void(const TrafficRecord&)>& visit) const;
    std::vector<TrafficRecord> rows() const;

    // Order-independent digest of the row contents, ignoring the two
    // timestamp columns.
    std::string content_hash() const;

    const std::filesystem::path& dir() const noexcept { return dir_; }
    std::filesystem::path data_path() const { return dir_ / "warehouse.csv"; }
    std::filesystem::path ledger_path() const { return dir_ / "ledger.csv"; }

    // Fails the next commit after its rows are written but before the ledger
    // line is, exercising rollback.
    void inject_commit_failure(bool fail) noexcept { fail_commit_ = fail; }

private:
    void recover();

    std::filesystem::path dir_;
    mutable std::shared_mutex mu_;
    std::vector<LedgerEntry> ledger_;
    std::map<int, std::int64_t> partition_high_;
    std::size_t rows_ = 0;
    bool fail_commit_ = false;
};

// Hash used by content_hash(); exposed for tests that recompute it.
std::string hash_sorted_lines(std::vector<std::string> lines);
std::string content_line(const TrafficRecord& r);

// ---- Micro-batch processing ----

struct DeadLetter {
    int partition;
    std::int64_t offset;
    std::string error;
    std::string payload;
};

class SimulatedCrash : public std::runtime_error {
public:
    SimulatedCrash() : std::runtime_error("simulated crash") {}
};

struct MicroBatchResult {
    std::optional<std::uint64_t> staged_sequence;
    std::size_t polled = 0;
    std::size_t staged = 0;
    std::size_t dead_letters = 0;
};

class MicroBatchProcessor {
public:
    MicroBatchProcessor(Consumer& consumer, TempStore& temp, std::size_t batch_size = 500);

    // Polls up to batch_size messages, cleans and featurizes them, stages the
    // result and only then commits consumer offsets (at-least-once).
    MicroBatchResult process_micro_batch();

    const std::vector<DeadLetter>& dead_letters() const noexcept { return dead_letters_; }
    std::size_t batch_size() const noexcept { return batch_size_; }

    // Throws SimulatedCrash after staging and before the offset commit.
    void inject_crash_before_commit(bool crash) noexcept { crash_before_commit_ = crash; }

private:
    Consumer& consumer_;
    TempStore& temp_;
    std::size_t batch_size_;
    std::vector<DeadLetter> dead_letters_;
    bool crash_before_commit_ = false;
};

// ---- Aggregates ----

struct LaneStats {
    int lane_id;
    std::size_t count;
    double mean_v_vel;
    double mean_space_headway;
};

struct LaneAggregates {
    std::vector<LaneStats> lanes;  // ascending lane id; -1 is its own bucket
    std::array<std::size_t, kNumClasses> label_counts{};
    std::size_t unlabeled = 0;

    std::size_t total() const;
};

struct RoadStats {
    int lane_id;
    int section_id;
    std::size_t count;
    double mean_v_vel;
    std::array<std::size_t, kNumClasses> label_counts{};
    std::size_t unlabeled = 0;
};

LaneAggregates aggregate_by_lane(const Warehouse& warehouse);
LaneAggregates aggregate_by_lane(const std::vector<TrafficRecord>& rows);
// Per (lane, section), ascending.
std::vector<RoadStats> aggregate_by_road(const Warehouse& warehouse);

} // namespace citypulse
