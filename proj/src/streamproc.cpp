#include "citypulse/streamproc.hpp"

#include "citypulse/clock.hpp"
#include "citypulse/error.hpp"
#include "citypulse/wire.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <set>

namespace citypulse {

namespace fs = std::filesystem;

TrafficRecord clean(const TrafficRecordRaw& raw) {
    TrafficRecord r;
    r.vehicle_id = raw.vehicle_id;
    r.frame_id = raw.frame_id;
    r.timestamp_ms = raw.timestamp_ms;
    r.lane_id = raw.lane_id.value_or(-1);
    r.section_id = raw.section_id.value_or(-1);
    r.global_x = raw.global_x.value_or(0.0);
    r.global_y = raw.global_y.value_or(0.0);
    r.v_vel = raw.v_vel.value_or(0.0);
    r.v_acc = raw.v_acc.value_or(0.0);
    r.space_headway = raw.space_headway.value_or(0.0);
    r.time_headway = raw.time_headway.value_or(0.0);
    r.weather = raw.weather;
    return r;
}

TrafficRecordRaw to_raw(const TrafficRecord& r) {
    TrafficRecordRaw raw;
    raw.vehicle_id = r.vehicle_id;
    raw.frame_id = r.frame_id;
    raw.timestamp_ms = r.timestamp_ms;
    raw.lane_id = r.lane_id;
    raw.section_id = r.section_id;
    raw.global_x = r.global_x;
    raw.global_y = r.global_y;
    raw.v_vel = r.v_vel;
    raw.v_acc = r.v_acc;
    raw.space_headway = r.space_headway;
    raw.time_headway = r.time_headway;
    raw.weather = r.weather;
    return raw;
}

FeatureVector featurize(const TrafficRecord& r) { return {r.v_vel, r.v_acc, r.space_headway, r.time_headway}; }

// ---- Warehouse rows ----

std::string to_warehouse_row(const TrafficRecord& r) {
    std::string out = to_csv_row(to_raw(r));
    out += ',';
    out += std::to_string(r.ingest_ts_ms);
    out += ',';
    out += std::to_string(r.commit_ts_ms);
    out += ',';
    if (r.label) out += to_string(*r.label);
    return out;
}

namespace {

std::int64_t parse_i64(std::string_view cell, std::size_t line, const char* column) {
    std::int64_t v = 0;
    auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
    if (ec != std::errc{} || ptr != cell.data() + cell.size())
        throw ParseError(line, std::string("bad ") + column + " value '" + std::string(cell) + "'");
    return v;
}

// Splits off the last `n` comma-separated cells of `row`.
std::vector<std::string_view> split_tail(std::string_view& row, std::size_t n, std::size_t line) {
    std::vector<std::string_view> cells(n);
    for (std::size_t i = n; i-- > 0;) {
        const auto comma = row.rfind(',');
        if (comma == std::string_view::npos) throw ParseError(line, "too few columns");
        cells[i] = row.substr(comma + 1);
        row = row.substr(0, comma);
    }
    return cells;
}

TrafficRecord from_complete_raw(const TrafficRecordRaw& raw, std::size_t line) {
    if (!raw.lane_id || !raw.section_id || !raw.global_x || !raw.global_y || !raw.v_vel || !raw.v_acc ||
        !raw.space_headway || !raw.time_headway)
        throw ParseError(line, "warehouse rows must have every field present");
    return clean(raw);
}

std::uint64_t fnv1a(std::string_view s, std::uint64_t h) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

void append_to(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::app);
    if (!out) throw StorageError("cannot open " + path.string() + " for append");
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    out.flush();
    if (!out) throw StorageError("append to " + path.string() + " failed");
}

std::vector<std::pair<int, std::pair<std::int64_t, std::int64_t>>> parse_batch_id(const std::string& id) {
    // "p0:0-124;p2:0-99"
    std::vector<std::pair<int, std::pair<std::int64_t, std::int64_t>>> out;
    std::size_t pos = 0;
    while (pos < id.size()) {
        auto end = id.find(';', pos);
        if (end == std::string::npos) end = id.size();
        const std::string part = id.substr(pos, end - pos);
        int p = 0;
        long long lo = 0;
        long long hi = 0;
        if (std::sscanf(part.c_str(), "p%d:%lld-%lld", &p, &lo, &hi) != 3)
            throw StorageError("malformed batch id '" + id + "' in ledger");
        out.push_back({p, {lo, hi}});
        pos = end + 1;
    }
    return out;
}

} // namespace

TrafficRecord parse_warehouse_row(std::string_view row, std::size_t line) {
    auto tail = split_tail(row, 3, line);
    TrafficRecord r = from_complete_raw(parse_csv_row(row, line), line);
    r.ingest_ts_ms = parse_i64(tail[0], line, "Ingest_Ts_Ms");
    r.commit_ts_ms = parse_i64(tail[1], line, "Commit_Ts_Ms");
    if (!tail[2].empty()) {
        r.label = label_from_string(tail[2]);
        if (!r.label) throw ParseError(line, "bad Congestion_Label '" + std::string(tail[2]) + "'");
    }
    return r;
}

std::string content_line(const TrafficRecord& r) {
    std::string out = to_csv_row(to_raw(r));
    out += ',';
    if (r.label) out += to_string(*r.label);
    return out;
}

std::string hash_sorted_lines(std::vector<std::string> lines) {
    std::sort(lines.begin(), lines.end());
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& l : lines) {
        h = fnv1a(l, h);
        h = fnv1a("\n", h);
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf) + "/" + std::to_string(lines.size());
}

std::string batch_id_for(const std::vector<StagedRow>& rows) {
    std::map<int, std::pair<std::int64_t, std::int64_t>> ranges;
    for (const auto& r : rows) {
        auto [it, inserted] = ranges.try_emplace(r.partition, r.offset, r.offset);
        if (!inserted) {
            it->second.first = std::min(it->second.first, r.offset);
            it->second.second = std::max(it->second.second, r.offset);
        }
    }
    std::string id;
    for (const auto& [p, range] : ranges) {
        if (!id.empty()) id += ';';
        id += "p" + std::to_string(p) + ":" + std::to_string(range.first) + "-" + std::to_string(range.second);
    }
    return id;
}

// ---- TempStore ----

TempStore::TempStore(std::size_t flush_threshold, std::optional<fs::path> dir)
    : flush_threshold_(flush_threshold), dir_(std::move(dir)) {
    if (flush_threshold_ == 0) throw ConfigError("temp store flush threshold must be positive");
    if (dir_) {
        std::error_code ec;
        fs::create_directories(*dir_, ec);
        if (ec) throw StorageError("cannot create staging directory " + dir_->string() + ": " + ec.message());
        reload();
    }
}

std::optional<std::uint64_t> TempStore::stage(std::vector<StagedRow> rows) {
    if (rows.empty()) throw RangeError("cannot stage an empty batch");
    std::string id = batch_id_for(rows);
    for (const auto& b : batches_)
        if (b.batch_id == id) return std::nullopt;
    if (fail_stage_) throw StorageError("injected staging failure");

    StagedBatch batch{next_sequence_, std::move(id), std::move(rows)};
    if (dir_) persist(batch);
    staged_records_ += batch.rows.size();
    batches_.push_back(std::move(batch));
    return next_sequence_++;
}

void TempStore::persist(const StagedBatch& batch) const {
    char name[40];
    std::snprintf(name, sizeof name, "staged-%012llu.csv", static_cast<unsigned long long>(batch.sequence));
    const fs::path final_path = *dir_ / name;
    const fs::path tmp_path = *dir_ / (std::string(name) + ".tmp");
    {
        std::ofstream out(tmp_path, std::ios::binary | std::ios::trunc);
        if (!out) throw StorageError("cannot open " + tmp_path.string());
        out << batch.batch_id << '\n';
        for (const auto& r : batch.rows) out << r.partition << ',' << r.offset << ',' << to_warehouse_row(r.record) << '\n';
        out.flush();
        if (!out) throw StorageError("write failed for " + tmp_path.string());
    }
    std::error_code ec;
    fs::rename(tmp_path, final_path, ec);
    if (ec) throw StorageError("cannot publish staged batch: " + ec.message());
}

void TempStore::reload() {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(*dir_)) {
        const auto name = entry.path().filename().string();
        if (name.ends_with(".tmp")) {
            fs::remove(entry.path());  // never published
        } else if (name.starts_with("staged-") && name.ends_with(".csv")) {
            files.push_back(entry.path());
        }
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
        std::ifstream in(f, std::ios::binary);
        std::string line;
        StagedBatch batch{next_sequence_, {}, {}};
        if (!std::getline(in, batch.batch_id)) throw StorageError("empty staged batch file " + f.string());
        std::size_t lineno = 1;
        while (std::getline(in, line)) {
            ++lineno;
            std::string_view rest = line;
            const auto c1 = rest.find(',');
            const auto c2 = rest.find(',', c1 + 1);
            if (c1 == std::string_view::npos || c2 == std::string_view::npos)
                throw ParseError(lineno, "bad staged row in " + f.string());
            StagedRow row;
            row.partition = static_cast<int>(parse_i64(rest.substr(0, c1), lineno, "partition"));
            row.offset = parse_i64(rest.substr(c1 + 1, c2 - c1 - 1), lineno, "offset");
            row.record = parse_warehouse_row(rest.substr(c2 + 1), lineno);
            row.features = featurize(row.record);
            batch.rows.push_back(std::move(row));
        }
        staged_records_ += batch.rows.size();
        batches_.push_back(std::move(batch));
        ++next_sequence_;
    }
}

void TempStore::clear() {
    if (dir_) {
        for (const auto& entry : fs::directory_iterator(*dir_)) {
            const auto name = entry.path().filename().string();
            if (name.starts_with("staged-")) fs::remove(entry.path());
        }
    }
    batches_.clear();
    staged_records_ = 0;
}

// ---- Warehouse ----

Warehouse::Warehouse(fs::path dir) : dir_(std::move(dir)) {
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec) throw StorageError("cannot create warehouse directory " + dir_.string() + ": " + ec.message());
    if (!fs::exists(data_path())) append_to(data_path(), std::string(kWarehouseHeader) + "\n");
    if (!fs::exists(ledger_path())) append_to(ledger_path(), "");
    recover();
}

void Warehouse::recover() {
    std::ifstream ledger_in(ledger_path(), std::ios::binary);
    std::string line;
    std::size_t expected_rows = 0;
    std::size_t lineno = 0;
    while (std::getline(ledger_in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto c2 = line.rfind(',');
        const auto c1 = line.rfind(',', c2 - 1);
        if (c1 == std::string::npos || c2 == std::string::npos) throw ParseError(lineno, "bad ledger line");
        LedgerEntry e;
        e.batch_id = line.substr(0, c1);
        e.row_count = static_cast<std::size_t>(parse_i64(std::string_view(line).substr(c1 + 1, c2 - c1 - 1), lineno, "row_count"));
        e.commit_ts_ms = parse_i64(std::string_view(line).substr(c2 + 1), lineno, "commit_ts_ms");
        for (const auto& [p, range] : parse_batch_id(e.batch_id)) {
            auto& high = partition_high_[p];
            high = std::max(high, range.second + 1);
        }
        expected_rows += e.row_count;
        ledger_.push_back(std::move(e));
    }

    // Rows written by a commit whose ledger line never landed are dropped.
    std::ifstream data_in(data_path(), std::ios::binary);
    std::string header;
    if (!std::getline(data_in, header) || header != kWarehouseHeader)
        throw StorageError("unexpected warehouse header in " + data_path().string());
    std::size_t rows = 0;
    std::streamoff keep = data_in.tellg();
    while (rows < expected_rows && std::getline(data_in, line)) {
        ++rows;
        keep = data_in.tellg();
    }
    if (rows < expected_rows)
        throw StorageError("warehouse has " + std::to_string(rows) + " rows but ledger expects " +
                           std::to_string(expected_rows));
    const bool trailing = static_cast<bool>(std::getline(data_in, line));
    data_in.close();
    if (trailing) fs::resize_file(data_path(), static_cast<std::uintmax_t>(keep));
    rows_ = expected_rows;
}

std::size_t Warehouse::commit(TempStore& temp, const Labeler& labeler) {
    std::unique_lock lock(mu_);
    if (temp.empty()) return 0;

    auto highs = partition_high_;
    std::string data_text;
    std::string ledger_text;
    std::vector<LedgerEntry> new_entries;
    std::size_t appended = 0;
    const std::int64_t now = now_ms();

    for (const auto& batch : temp.batches()) {
        std::vector<StagedRow> fresh;
        for (const auto& row : batch.rows) {
            auto it = highs.find(row.partition);
            if (it != highs.end() && row.offset < it->second) continue;  // already warehoused
            fresh.push_back(row);
        }
        if (fresh.empty()) continue;
        for (const auto& row : fresh) {
            auto& high = highs[row.partition];
            high = std::max(high, row.offset + 1);
        }

        std::int64_t commit_ts = now;
        for (const auto& row : fresh) commit_ts = std::max(commit_ts, row.record.ingest_ts_ms);
        for (auto& row : fresh) {
            row.record.commit_ts_ms = commit_ts;
            if (labeler) row.record.label = labeler(row.features);
            data_text += to_warehouse_row(row.record);
            data_text += '\n';
        }
        LedgerEntry entry{batch_id_for(fresh), fresh.size(), commit_ts};
        ledger_text += entry.batch_id + "," + std::to_string(entry.row_count) + "," + std::to_string(commit_ts) + "\n";
        appended += fresh.size();
        new_entries.push_back(std::move(entry));
    }

    if (!new_entries.empty()) {
        const auto data_size = fs::file_size(data_path());
        const auto ledger_size = fs::file_size(ledger_path());
        try {
            append_to(data_path(), data_text);
            if (fail_commit_) {
                fail_commit_ = false;
                throw StorageError("injected warehouse commit failure");
            }
            append_to(ledger_path(), ledger_text);
        } catch (...) {
            std::error_code ec;
            fs::resize_file(data_path(), data_size, ec);
            fs::resize_file(ledger_path(), ledger_size, ec);
            throw;
        }
    }

    partition_high_ = std::move(highs);
    for (auto& e : new_entries) ledger_.push_back(std::move(e));
    rows_ += appended;
    temp.clear();
    return appended;
}

std::size_t Warehouse::row_count() const {
    std::shared_lock lock(mu_);
    return rows_;
}

std::vector<LedgerEntry> Warehouse::ledger() const {
    std::shared_lock lock(mu_);
    return ledger_;
}

bool Warehouse::has_batch(const std::string& batch_id) const {
    std::shared_lock lock(mu_);
    return std::any_of(ledger_.begin(), ledger_.end(), [&](const LedgerEntry& e) { return e.batch_id == batch_id; });
}

std::map<int, std::int64_t> Warehouse::committed_offsets() const {
    std::shared_lock lock(mu_);
    return partition_high_;
}

void Warehouse::scan(const std::function<void(const TrafficRecord&)>& visit) const {
    std::shared_lock lock(mu_);
    std::ifstream in(data_path(), std::ios::binary);
    if (!in) throw StorageError("cannot open " + data_path().string());
    std::string line;
    std::getline(in, line);
    std::size_t lineno = 1;
    for (std::size_t i = 0; i < rows_ && std::getline(in, line); ++i) {
        ++lineno;
        visit(parse_warehouse_row(line, lineno));
    }
}

std::vector<TrafficRecord> Warehouse::rows() const {
    std::vector<TrafficRecord> out;
    out.reserve(row_count());
    scan([&](const TrafficRecord& r) { out.push_back(r); });
    return out;
}

std::string Warehouse::content_hash() const {
    std::vector<std::string> lines;
    lines.reserve(row_count());
    scan([&](const TrafficRecord& r) { lines.push_back(content_line(r)); });
    return hash_sorted_lines(std::move(lines));
}

// ---- MicroBatchProcessor ----

MicroBatchProcessor::MicroBatchProcessor(Consumer& consumer, TempStore& temp, std::size_t batch_size)
    : consumer_(consumer), temp_(temp), batch_size_(batch_size) {
    if (batch_size_ == 0) throw ConfigError("micro-batch size must be positive");
}

MicroBatchResult MicroBatchProcessor::process_micro_batch() {
    MicroBatchResult result;
    auto messages = consumer_.poll(batch_size_);
    result.polled = messages.size();
    if (messages.empty()) return result;

    std::vector<StagedRow> rows;
    std::vector<DeadLetter> dead;
    rows.reserve(messages.size());
    for (const auto& m : messages) {
        try {
            TrafficRecord rec = clean(from_json_payload(m.payload));
            rec.ingest_ts_ms = m.produce_ts_ms;
            auto features = featurize(rec);
            rows.push_back({std::move(rec), features, m.partition, m.offset});
        } catch (const std::exception& e) {
            dead.push_back({m.partition, m.offset, e.what(), m.payload});
        }
    }

    if (!rows.empty()) {
        result.staged = rows.size();
        result.staged_sequence = temp_.stage(std::move(rows));
    }

    // A replayed message may already be in the dead-letter list.
    for (auto& d : dead) {
        const bool seen = std::any_of(dead_letters_.rbegin(), dead_letters_.rend(), [&](const DeadLetter& x) {
            return x.partition == d.partition && x.offset == d.offset;
        });
        if (!seen) {
            dead_letters_.push_back(std::move(d));
            ++result.dead_letters;
        }
    }

    if (crash_before_commit_) throw SimulatedCrash();
    consumer_.commit(Consumer::next_offsets(messages));
    return result;
}

// ---- Aggregates ----

std::size_t LaneAggregates::total() const {
    std::size_t n = 0;
    for (const auto& l : lanes) n += l.count;
    return n;
}

namespace {

struct LaneAccumulator {
    std::size_t count = 0;
    double sum_v = 0.0;
    double sum_sh = 0.0;
};

struct Aggregator {
    std::map<int, LaneAccumulator> lanes;
    LaneAggregates out;

    void add(const TrafficRecord& r) {
        auto& acc = lanes[r.lane_id];
        ++acc.count;
        acc.sum_v += r.v_vel;
        acc.sum_sh += r.space_headway;
        if (r.label)
            ++out.label_counts[index_of(*r.label)];
        else
            ++out.unlabeled;
    }

    LaneAggregates finish() {
        for (const auto& [lane, acc] : lanes) {
            const auto n = static_cast<double>(acc.count);
            out.lanes.push_back({lane, acc.count, acc.sum_v / n, acc.sum_sh / n});
        }
        return std::move(out);
    }
};

} // namespace

LaneAggregates aggregate_by_lane(const Warehouse& warehouse) {
    Aggregator agg;
    warehouse.scan([&](const TrafficRecord& r) { agg.add(r); });
    return agg.finish();
}

LaneAggregates aggregate_by_lane(const std::vector<TrafficRecord>& rows) {
    Aggregator agg;
    for (const auto& r : rows) agg.add(r);
    return agg.finish();
}

std::vector<RoadStats> aggregate_by_road(const Warehouse& warehouse) {
    struct Acc {
        std::size_t count = 0;
        double sum_v = 0.0;
        std::array<std::size_t, kNumClasses> labels{};
        std::size_t unlabeled = 0;
    };
    std::map<std::pair<int, int>, Acc> roads;
    warehouse.scan([&](const TrafficRecord& r) {
        auto& a = roads[{r.lane_id, r.section_id}];
        ++a.count;
        a.sum_v += r.v_vel;
        if (r.label)
            ++a.labels[index_of(*r.label)];
        else
            ++a.unlabeled;
    });
    std::vector<RoadStats> out;
    out.reserve(roads.size());
    for (const auto& [key, a] : roads)
        out.push_back({key.first, key.second, a.count, a.sum_v / static_cast<double>(a.count), a.labels, a.unlabeled});
    return out;
}

} // namespace citypulse
