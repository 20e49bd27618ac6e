#include "citypulse/bench.hpp"

#include "citypulse/error.hpp"
#include "citypulse/wire.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <tuple>
#include <unistd.h>

namespace citypulse {

namespace fs = std::filesystem;
using SteadyClock = std::chrono::steady_clock;

namespace {

double ms_since(SteadyClock::time_point t0) {
    return std::chrono::duration<double, std::milli>(SteadyClock::now() - t0).count();
}

} // namespace

std::string_view to_string(IngestionStrategy s) {
    return s == IngestionStrategy::Full ? "full" : "chunked";
}

IngestionStrategy strategy_from_string(std::string_view s) {
    if (s == "full") return IngestionStrategy::Full;
    if (s == "chunked") return IngestionStrategy::Chunked;
    throw ConfigError("unknown ingestion strategy '" + std::string(s) + "'");
}

double PipelineMetrics::mean_batch_latency_ms() const {
    if (batch_latencies_ms.empty()) return 0.0;
    double sum = 0.0;
    for (double v : batch_latencies_ms) sum += v;
    return sum / static_cast<double>(batch_latencies_ms.size());
}

namespace {

bool canonical_less(const TrafficRecord& a, const TrafficRecord& b) {
    return std::tie(a.vehicle_id, a.frame_id, a.timestamp_ms) < std::tie(b.vehicle_id, b.frame_id, b.timestamp_ms);
}

} // namespace

CongestionLabeler fit_canonical_labeler(std::vector<TrafficRecord> cleaned, const LabelerOptions& options) {
    std::sort(cleaned.begin(), cleaned.end(), canonical_less);
    const std::size_t n = std::min(cleaned.size(), options.canonical_sample);
    FeatureMatrix x;
    x.reserve(n);
    for (std::size_t i = 0; i < n; ++i) x.push_back(featurize(cleaned[i]));
    return CongestionLabeler::fit(x, options.kmeans);
}

Labeler as_labeler(std::shared_ptr<const CongestionLabeler> labeler) {
    return [labeler = std::move(labeler)](const FeatureVector& x) { return labeler->label(x); };
}

// ---- Stream workers ----

namespace {

// Per-unit completion tracking for batch latencies. Each record belongs to
// unit index / latency_unit by its position in the produced sequence.
class LatencyCollector {
public:
    LatencyCollector(std::uint64_t total, std::uint64_t unit) : unit_(unit) {
        const auto units = static_cast<std::size_t>((total + unit - 1) / unit);
        remaining_.resize(units);
        start_.assign(units, 0.0);
        done_.assign(units, -1.0);
        for (std::size_t u = 0; u < units; ++u)
            remaining_[u] = std::min<std::uint64_t>(unit, total - static_cast<std::uint64_t>(u) * unit);
    }

    std::uint64_t unit() const noexcept { return unit_; }

    void started(std::uint64_t index, double at) {
        std::lock_guard lock(mu_);
        start_[index / unit_] = at;
    }

    void finished(const std::vector<std::uint32_t>& units, double at) {
        std::lock_guard lock(mu_);
        for (auto u : units) {
            if (--remaining_[u] == 0) done_[u] = at;
        }
    }

    std::vector<double> latencies() const {
        std::lock_guard lock(mu_);
        std::vector<double> out;
        for (std::size_t u = 0; u < done_.size(); ++u) {
            if (done_[u] < 0) break;
            out.push_back(done_[u] - start_[u]);
        }
        return out;
    }

private:
    std::uint64_t unit_;
    mutable std::mutex mu_;
    std::vector<std::uint64_t> remaining_;
    std::vector<double> start_;
    std::vector<double> done_;
};

struct WorkerHooks {
    // unit_of[partition][offset], or empty when latencies are not tracked.
    const std::vector<std::vector<std::uint32_t>>* unit_of = nullptr;
    LatencyCollector* latency = nullptr;
    SteadyClock::time_point t0;
};

class StreamWorkers {
public:
    StreamWorkers(Broker& broker, const StreamOptions& options, Warehouse& warehouse, Labeler labeler,
                  WorkerHooks hooks = {})
        : broker_(broker), options_(options), warehouse_(warehouse), labeler_(std::move(labeler)), hooks_(hooks) {
        const int partitions = broker.partition_count(options.topic);
        const std::size_t flush = std::max(options.micro_batch_size,
                                           options.temp_flush_records / static_cast<std::size_t>(partitions));
        for (int p = 0; p < partitions; ++p) {
            auto w = std::make_unique<Worker>();
            w->consumer = std::make_unique<Consumer>(broker, options.group, options.topic, std::vector<int>{p});
            w->temp = std::make_unique<TempStore>(flush);
            w->processor = std::make_unique<MicroBatchProcessor>(*w->consumer, *w->temp, options.micro_batch_size);
            workers_.push_back(std::move(w));
        }
    }

    ~StreamWorkers() {
        stop_ = true;
        join();
    }

    void start() {
        for (auto& w : workers_) w->thread = std::thread([this, &w = *w] { run(w); });
    }

    void input_closed() { closed_ = true; }
    void abort() { stop_ = true; }

    void join() {
        for (auto& w : workers_)
            if (w->thread.joinable()) w->thread.join();
    }

    std::int64_t total_lag() const { return broker_.total_lag(options_.group, options_.topic); }

    DrainResult result() const {
        DrainResult r;
        for (const auto& w : workers_) {
            r.staged += w->staged;
            r.committed += w->committed;
            const auto& dead = w->processor->dead_letters();
            r.dead_letters.insert(r.dead_letters.end(), dead.begin(), dead.end());
        }
        return r;
    }

    // First worker error, rethrown on the caller's thread.
    void rethrow() {
        std::lock_guard lock(error_mu_);
        if (error_) std::rethrow_exception(error_);
    }

private:
    struct Worker {
        std::unique_ptr<Consumer> consumer;
        std::unique_ptr<TempStore> temp;
        std::unique_ptr<MicroBatchProcessor> processor;
        std::size_t staged = 0;
        std::size_t committed = 0;
        std::size_t dead_seen = 0;
        std::thread thread;
    };

    void commit(Worker& w) {
        if (w.temp->empty()) return;
        std::vector<std::uint32_t> units;
        if (hooks_.latency) {
            for (const auto& batch : w.temp->batches())
                for (const auto& row : batch.rows)
                    units.push_back((*hooks_.unit_of)[static_cast<std::size_t>(row.partition)]
                                                     [static_cast<std::size_t>(row.offset)]);
        }
        w.committed += warehouse_.commit(*w.temp, labeler_);
        if (hooks_.latency) hooks_.latency->finished(units, ms_since(hooks_.t0));
    }

    void account_dead_letters(Worker& w) {
        const auto& dead = w.processor->dead_letters();
        if (!hooks_.latency || dead.size() == w.dead_seen) {
            w.dead_seen = dead.size();
            return;
        }
        std::vector<std::uint32_t> units;
        for (std::size_t i = w.dead_seen; i < dead.size(); ++i)
            units.push_back((*hooks_.unit_of)[static_cast<std::size_t>(dead[i].partition)]
                                             [static_cast<std::size_t>(dead[i].offset)]);
        w.dead_seen = dead.size();
        hooks_.latency->finished(units, ms_since(hooks_.t0));
    }

    void run(Worker& w) {
        try {
            while (!stop_) {
                const auto r = w.processor->process_micro_batch();
                if (r.polled == 0) {
                    if (closed_ && w.consumer->total_lag() == 0) break;
                    std::this_thread::sleep_for(std::chrono::milliseconds(1));
                    continue;
                }
                w.staged += r.staged;
                account_dead_letters(w);
                if (w.temp->should_flush()) commit(w);
            }
            if (!stop_) commit(w);
        } catch (...) {
            std::lock_guard lock(error_mu_);
            if (!error_) error_ = std::current_exception();
            stop_ = true;
        }
    }

    Broker& broker_;
    const StreamOptions& options_;
    Warehouse& warehouse_;
    Labeler labeler_;
    WorkerHooks hooks_;
    std::vector<std::unique_ptr<Worker>> workers_;
    std::atomic<bool> closed_{false};
    std::atomic<bool> stop_{false};
    std::mutex error_mu_;
    std::exception_ptr error_;
};

class LagSampler {
public:
    LagSampler(const Broker& broker, const StreamOptions& options, int interval_ms, SteadyClock::time_point t0)
        : broker_(broker), options_(options), interval_ms_(interval_ms), t0_(t0) {
        sample();
        thread_ = std::thread([this] { run(); });
    }

    ~LagSampler() { stop(); }

    // Takes a final sample and returns the series.
    std::vector<LagSample> stop() {
        {
            std::lock_guard lock(mu_);
            if (stopped_) return series_;
            stopping_ = true;
        }
        cv_.notify_all();
        thread_.join();
        sample();
        std::lock_guard lock(mu_);
        stopped_ = true;
        return series_;
    }

    void sample() {
        // Lag first: messages appended after it only raise `produced`.
        const auto lag = broker_.total_lag(options_.group, options_.topic);
        std::int64_t produced = 0;
        for (auto hw : broker_.high_watermarks(options_.topic)) produced += hw;
        const double at = ms_since(t0_);
        std::lock_guard lock(mu_);
        series_.push_back({at, lag, produced});
    }

private:
    void run() {
        auto next = SteadyClock::now();
        std::unique_lock lock(mu_);
        for (;;) {
            next += std::chrono::milliseconds(interval_ms_);
            if (cv_.wait_until(lock, next, [this] { return stopping_; })) return;
            lock.unlock();
            sample();
            lock.lock();
        }
    }

    const Broker& broker_;
    const StreamOptions& options_;
    int interval_ms_;
    SteadyClock::time_point t0_;
    std::mutex mu_;
    std::condition_variable cv_;
    bool stopping_ = false;
    bool stopped_ = false;
    std::vector<LagSample> series_;
    std::thread thread_;
};

void validate(const PipelineConfig& config, std::uint64_t total) {
    if (total < 1) throw ConfigError("a benchmark run needs at least 1 record");
    config.broker.validate();
    if (config.stream.micro_batch_size < 1) throw ConfigError("micro_batch_size must be positive");
    if (config.bench.latency_unit < 1) throw ConfigError("latency_unit must be positive");
    if (config.bench.lag_sample_ms < 1) throw ConfigError("lag_sample_ms must be positive");
    if (config.bench.resource_sample_ms < 1) throw ConfigError("resource_sample_ms must be positive");
    if (config.bench.strategy == IngestionStrategy::Chunked) {
        if (config.bench.chunk_size < 1) throw ConfigError("chunk_size must be positive");
        if (!(config.bench.drain_fraction > 0.0 && config.bench.drain_fraction <= 1.0))
            throw ConfigError("drain_fraction must be in (0, 1]");
    }
    if (config.warehouse_dir.empty()) throw ConfigError("warehouse_dir is required");
}

} // namespace

DrainResult drain_topic(Broker& broker, const StreamOptions& options, Warehouse& warehouse, const Labeler& labeler) {
    StreamWorkers workers(broker, options, warehouse, labeler);
    workers.input_closed();
    workers.start();
    workers.join();
    workers.rethrow();
    return workers.result();
}

PipelineMetrics run_pipeline(const PipelineConfig& config) {
    return run_pipeline(generate(config.generator), config);
}

PipelineMetrics run_pipeline(const std::vector<TrafficRecordRaw>& records, const PipelineConfig& config) {
    const std::uint64_t total = records.size();
    validate(config, total);

    Warehouse warehouse(config.warehouse_dir);
    if (warehouse.row_count() != 0) throw ConfigError("warehouse " + config.warehouse_dir.string() + " is not empty");

    std::vector<TrafficRecord> cleaned;
    cleaned.reserve(records.size());
    for (const auto& r : records) cleaned.push_back(clean(r));
    auto labeler = std::make_shared<const CongestionLabeler>(fit_canonical_labeler(std::move(cleaned), config.labeler));

    Broker broker(config.broker);
    broker.create_topic(config.stream.topic);
    const int partitions = broker.partition_count(config.stream.topic);

    // Producer order is fixed, so every record's (partition, offset) is
    // known before the run.
    std::vector<std::string> keys;
    keys.reserve(records.size());
    std::vector<std::vector<std::uint32_t>> unit_of(static_cast<std::size_t>(partitions));
    for (std::size_t i = 0; i < records.size(); ++i) {
        keys.push_back(record_key(records[i]));
        const auto p = key_hash(keys.back()) % static_cast<std::uint64_t>(partitions);
        unit_of[p].push_back(static_cast<std::uint32_t>(i / config.bench.latency_unit));
    }

    PipelineMetrics m;
    m.strategy = config.bench.strategy;
    m.chunk_size = config.bench.strategy == IngestionStrategy::Chunked ? config.bench.chunk_size : 0;
    m.records_total = total;
    m.latency_unit = config.bench.latency_unit;
    m.queue_capacity = config.broker.queue_capacity;

    LatencyCollector latency(total, config.bench.latency_unit);
    const auto t0 = SteadyClock::now();
    StreamWorkers workers(broker, config.stream, warehouse, as_labeler(labeler), {&unit_of, &latency, t0});

    ResourceSampler resources(config.bench.resource_sample_ms);
    LagSampler lag(broker, config.stream, config.bench.lag_sample_ms, t0);

    std::atomic<std::int64_t> peak{0};
    Producer producer(broker);
    producer.on_batch_appended([&](std::size_t) {
        const auto occupancy = broker.total_lag(config.stream.group, config.stream.topic);
        if (occupancy > peak) peak = occupancy;
    });

    auto produce_range = [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            if (i % config.bench.latency_unit == 0) latency.started(i, ms_since(t0));
            producer.produce(config.stream.topic, keys[i], to_json_payload(records[i]));
        }
        producer.flush();
    };

    try {
        if (config.bench.strategy == IngestionStrategy::Full) {
            produce_range(0, records.size());
            workers.input_closed();
            workers.start();
        } else {
            workers.start();
            const auto chunk = static_cast<std::size_t>(config.bench.chunk_size);
            const auto resume_below =
                static_cast<std::int64_t>(config.bench.drain_fraction * static_cast<double>(chunk));
            for (std::size_t begin = 0; begin < records.size(); begin += chunk) {
                produce_range(begin, std::min(records.size(), begin + chunk));
                if (begin + chunk >= records.size()) break;
                while (workers.total_lag() >= resume_below) {
                    workers.rethrow();
                    std::this_thread::sleep_for(std::chrono::milliseconds(1));
                }
            }
            workers.input_closed();
        }
        workers.join();
        workers.rethrow();
    } catch (const std::exception& e) {
        workers.abort();
        workers.join();
        m.failure = std::string(to_string(config.bench.strategy)) + " run failed: " + e.what();
    }

    m.elapsed_ms = ms_since(t0);
    m.lag_series = lag.stop();
    m.resources = resources.stop();
    m.peak_buffer_occupancy = peak;
    m.batch_latencies_ms = latency.latencies();
    const auto drained = workers.result();
    m.dead_letters = drained.dead_letters.size();
    m.warehouse_rows = warehouse.row_count();
    m.final_lag = broker.total_lag(config.stream.group, config.stream.topic);
    m.throughput_rpm = m.elapsed_ms > 0 ? static_cast<double>(total) * 60'000.0 / m.elapsed_ms : 0.0;
    m.content_hash = warehouse.content_hash();
    return m;
}

StressComparison compare_strategies(const PipelineConfig& config, std::uint64_t chunk_size, const fs::path& work_dir) {
    const auto records = generate(config.generator);
    StressComparison out;
    out.chunk_size = chunk_size;

    auto full = config;
    full.bench.strategy = IngestionStrategy::Full;
    full.warehouse_dir = work_dir / "full";
    out.full_run = run_pipeline(records, full);

    auto chunked = config;
    chunked.bench.strategy = IngestionStrategy::Chunked;
    chunked.bench.chunk_size = chunk_size;
    chunked.warehouse_dir = work_dir / "chunked";
    out.chunked_run = run_pipeline(records, chunked);

    out.time_ratio = out.chunked_run.elapsed_ms > 0 ? out.full_run.elapsed_ms / out.chunked_run.elapsed_ms : 0.0;
    out.content_equal = out.full_run.content_hash == out.chunked_run.content_hash;
    return out;
}

std::vector<std::string> check_invariants(const PipelineMetrics& m) {
    std::vector<std::string> bad;
    auto expect = [&](bool ok, std::string what) {
        if (!ok) bad.push_back(std::move(what));
    };
    expect(m.failure.empty(), m.failure);
    expect(m.warehouse_rows + m.dead_letters == m.records_total,
           "conservation: " + std::to_string(m.warehouse_rows) + " rows + " + std::to_string(m.dead_letters) +
               " dead letters != " + std::to_string(m.records_total) + " records");
    expect(m.final_lag == 0, "final consumer lag is " + std::to_string(m.final_lag));
    const auto units = (m.records_total + m.latency_unit - 1) / m.latency_unit;
    expect(m.batch_latencies_ms.size() == units, "expected " + std::to_string(units) + " batch latencies, got " +
                                                     std::to_string(m.batch_latencies_ms.size()));
    for (const auto& s : m.lag_series) {
        expect(s.total_lag >= 0 && s.total_lag <= s.produced,
               "lag sample " + std::to_string(s.total_lag) + " outside [0, " + std::to_string(s.produced) + "]");
    }
    expect(!m.lag_series.empty() && m.lag_series.front().total_lag >= 0 && m.lag_series.back().total_lag == 0,
           "lag series must end drained");
    if (m.strategy == IngestionStrategy::Chunked) {
        const auto bound = static_cast<std::int64_t>(m.chunk_size) + m.queue_capacity;
        expect(m.peak_buffer_occupancy <= bound, "chunked peak occupancy " + std::to_string(m.peak_buffer_occupancy) +
                                                     " exceeds " + std::to_string(bound));
    }
    if (m.elapsed_ms > 0) {
        expect(m.throughput_rpm == static_cast<double>(m.records_total) * 60'000.0 / m.elapsed_ms,
               "throughput does not match records and elapsed time");
    }
    return bad;
}

// ---- Resources ----

std::optional<std::int64_t> read_rss_bytes(const fs::path& statm) {
    std::ifstream in(statm);
    std::int64_t size = 0;
    std::int64_t resident = 0;
    if (!(in >> size >> resident)) return std::nullopt;
    return resident * static_cast<std::int64_t>(::sysconf(_SC_PAGESIZE));
}

ResourceSampler::ResourceSampler(int interval_ms, fs::path statm) : interval_ms_(interval_ms), statm_(std::move(statm)) {
    if (interval_ms < 1) throw ConfigError("sampling interval must be positive");
    series_.available = read_rss_bytes(statm_).has_value();
    if (series_.available) thread_ = std::thread([this] { run(); });
}

ResourceSampler::~ResourceSampler() { stop(); }

ResourceSeries ResourceSampler::stop() {
    {
        std::lock_guard lock(mu_);
        stopping_ = true;
    }
    cv_.notify_all();
    if (thread_.joinable()) thread_.join();
    std::lock_guard lock(mu_);
    return series_;
}

void ResourceSampler::run() {
    const auto t0 = SteadyClock::now();
    auto next = t0;
    std::unique_lock lock(mu_);
    for (;;) {
        lock.unlock();
        const auto rss = read_rss_bytes(statm_);
        const double at = std::chrono::duration<double, std::milli>(next - t0).count();
        lock.lock();
        if (rss) series_.samples.push_back({at, *rss});
        next += std::chrono::milliseconds(interval_ms_);
        if (cv_.wait_until(lock, next, [this] { return stopping_; })) return;
    }
}

// ---- Reports ----

namespace {

std::string fmt_int(std::int64_t v) { return std::to_string(v); }

template <typename T>
T parse_number(std::string_view s, std::string_view what) {
    T v{};
    if constexpr (std::is_floating_point_v<T>) {
        try {
            std::size_t used = 0;
            v = std::stod(std::string(s), &used);
            if (used != s.size()) throw std::invalid_argument("trailing text");
        } catch (const std::exception&) {
            throw std::invalid_argument("bad number '" + std::string(s) + "' for " + std::string(what));
        }
    } else {
        const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc() || p != s.data() + s.size())
            throw std::invalid_argument("bad integer '" + std::string(s) + "' for " + std::string(what));
    }
    return v;
}

std::vector<std::string_view> split_commas(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    for (;;) {
        const auto comma = line.find(',', start);
        out.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
        if (comma == std::string_view::npos) return out;
        start = comma + 1;
    }
}

std::string fmt_bytes(std::int64_t bytes) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(1);
    os << static_cast<double>(bytes) / (1024.0 * 1024.0) << " MiB";
    return os.str();
}

std::string fmt_fixed(double v, int digits) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(digits);
    os << v;
    return os.str();
}

} // namespace

std::string format_metrics_text(const PipelineMetrics& m) {
    std::ostringstream os;
    os << "Pipeline benchmark (" << to_string(m.strategy) << " ingestion";
    if (m.strategy == IngestionStrategy::Chunked) os << ", chunks of " << m.chunk_size;
    os << ")\n";
    os << "- Records processed: " << m.records_total << " (" << m.warehouse_rows << " warehoused, " << m.dead_letters
       << " dead letters)\n";
    os << "- Throughput: " << fmt_fixed(m.throughput_rpm, 0) << " records/minute (reference ~"
       << fmt_fixed(kReferenceThroughputRpm, 0) << ")\n";
    os << "- Mean batch latency: " << fmt_fixed(m.mean_batch_latency_ms(), 1) << " ms per " << m.latency_unit
       << " records (reference " << fmt_fixed(kReferenceBatchLatencyMs, 0) << " ms per 100000)\n";
    os << "- Elapsed: " << fmt_fixed(m.elapsed_ms, 1) << " ms\n";
    os << "- Peak buffer occupancy: " << m.peak_buffer_occupancy << " records\n";
    os << "- Final consumer lag: " << m.final_lag << "\n";
    if (m.resources.available && !m.resources.samples.empty()) {
        std::int64_t rss = 0;
        for (const auto& s : m.resources.samples) rss = std::max(rss, s.rss_bytes);
        os << "- Peak resident memory: " << fmt_bytes(rss) << "\n";
    } else {
        os << "- Resident memory: unavailable\n";
    }
    os << "- Warehouse content hash: " << m.content_hash << "\n";
    if (!m.failure.empty()) os << "- FAILED: " << m.failure << "\n";
    return os.str();
}

std::string format_metrics_csv(const PipelineMetrics& m) {
    std::ostringstream os;
    os << "# summary\nkey,value\n";
    os << "strategy," << to_string(m.strategy) << "\n";
    os << "chunk_size," << m.chunk_size << "\n";
    os << "records_total," << m.records_total << "\n";
    os << "elapsed_ms," << format_double(m.elapsed_ms) << "\n";
    os << "throughput_rpm," << format_double(m.throughput_rpm) << "\n";
    os << "mean_batch_latency_ms," << format_double(m.mean_batch_latency_ms()) << "\n";
    os << "latency_unit," << m.latency_unit << "\n";
    os << "peak_buffer_occupancy," << m.peak_buffer_occupancy << "\n";
    os << "queue_capacity," << m.queue_capacity << "\n";
    os << "warehouse_rows," << m.warehouse_rows << "\n";
    os << "dead_letters," << m.dead_letters << "\n";
    os << "final_lag," << m.final_lag << "\n";
    os << "content_hash," << m.content_hash << "\n";
    os << "resources_available," << (m.resources.available ? 1 : 0) << "\n";
    os << "reference_throughput_rpm," << format_double(kReferenceThroughputRpm) << "\n";
    os << "reference_batch_latency_ms," << format_double(kReferenceBatchLatencyMs) << "\n";
    os << "failure," << m.failure << "\n";
    os << "# batch_latencies\nunit,latency_ms\n";
    for (std::size_t i = 0; i < m.batch_latencies_ms.size(); ++i)
        os << i << "," << format_double(m.batch_latencies_ms[i]) << "\n";
    os << "# lag\nelapsed_ms,total_lag,produced\n";
    for (const auto& s : m.lag_series) os << format_double(s.elapsed_ms) << "," << s.total_lag << "," << s.produced << "\n";
    os << "# resources\nelapsed_ms,rss_bytes\n";
    for (const auto& s : m.resources.samples) os << format_double(s.elapsed_ms) << "," << fmt_int(s.rss_bytes) << "\n";
    return os.str();
}

PipelineMetrics parse_metrics_csv(std::string_view csv) {
    PipelineMetrics m;
    std::string section;
    bool expect_header = false;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos < csv.size()) {
        auto end = csv.find('\n', pos);
        if (end == std::string_view::npos) end = csv.size();
        const auto line = csv.substr(pos, end - pos);
        pos = end + 1;
        ++line_no;
        if (line.empty()) continue;
        if (line.starts_with("# ")) {
            section = std::string(line.substr(2));
            expect_header = true;
            continue;
        }
        if (expect_header) {
            expect_header = false;
            continue;
        }
        try {
            if (section == "summary") {
                const auto comma = line.find(',');
                if (comma == std::string_view::npos) throw ParseError(line_no, "summary line without a value");
                const auto key = line.substr(0, comma);
                const auto value = line.substr(comma + 1);
                if (key == "strategy") m.strategy = strategy_from_string(value);
                else if (key == "chunk_size") m.chunk_size = parse_number<std::uint64_t>(value, key);
                else if (key == "records_total") m.records_total = parse_number<std::uint64_t>(value, key);
                else if (key == "elapsed_ms") m.elapsed_ms = parse_number<double>(value, key);
                else if (key == "throughput_rpm") m.throughput_rpm = parse_number<double>(value, key);
                else if (key == "latency_unit") m.latency_unit = parse_number<std::uint64_t>(value, key);
                else if (key == "peak_buffer_occupancy") m.peak_buffer_occupancy = parse_number<std::int64_t>(value, key);
                else if (key == "queue_capacity") m.queue_capacity = parse_number<std::int64_t>(value, key);
                else if (key == "warehouse_rows") m.warehouse_rows = parse_number<std::uint64_t>(value, key);
                else if (key == "dead_letters") m.dead_letters = parse_number<std::uint64_t>(value, key);
                else if (key == "final_lag") m.final_lag = parse_number<std::int64_t>(value, key);
                else if (key == "content_hash") m.content_hash = std::string(value);
                else if (key == "resources_available") m.resources.available = value == "1";
                else if (key == "failure") m.failure = std::string(value);
                // Derived and reference rows are recomputed, not read.
            } else if (section == "batch_latencies") {
                const auto cells = split_commas(line);
                if (cells.size() != 2) throw ParseError(line_no, "expected unit,latency_ms");
                m.batch_latencies_ms.push_back(parse_number<double>(cells[1], "latency_ms"));
            } else if (section == "lag") {
                const auto cells = split_commas(line);
                if (cells.size() != 3) throw ParseError(line_no, "expected elapsed_ms,total_lag,produced");
                m.lag_series.push_back({parse_number<double>(cells[0], "elapsed_ms"),
                                        parse_number<std::int64_t>(cells[1], "total_lag"),
                                        parse_number<std::int64_t>(cells[2], "produced")});
            } else if (section == "resources") {
                const auto cells = split_commas(line);
                if (cells.size() != 2) throw ParseError(line_no, "expected elapsed_ms,rss_bytes");
                m.resources.samples.push_back(
                    {parse_number<double>(cells[0], "elapsed_ms"), parse_number<std::int64_t>(cells[1], "rss_bytes")});
            } else {
                throw ParseError(line_no, "data outside a known section");
            }
        } catch (const ParseError&) {
            throw;
        } catch (const std::exception& e) {
            throw ParseError(line_no, e.what());
        }
    }
    return m;
}

std::string format_comparison_text(const StressComparison& c) {
    std::ostringstream os;
    os << "Ingestion stress comparison (chunks of " << c.chunk_size << ")\n";
    os << "- Full elapsed: " << fmt_fixed(c.full_run.elapsed_ms, 1) << " ms, peak occupancy "
       << c.full_run.peak_buffer_occupancy << "\n";
    os << "- Chunked elapsed: " << fmt_fixed(c.chunked_run.elapsed_ms, 1) << " ms, peak occupancy "
       << c.chunked_run.peak_buffer_occupancy << "\n";
    os << "- Time ratio full/chunked: " << fmt_fixed(c.time_ratio, 3) << " (reference "
       << fmt_fixed(kReferenceTimeRatio, 2) << ")\n";
    os << "- Warehouse content equal: " << (c.content_equal ? "yes" : "no") << "\n\n";
    os << format_metrics_text(c.full_run) << "\n" << format_metrics_text(c.chunked_run);
    return os.str();
}

std::string format_comparison_csv(const StressComparison& c) {
    std::ostringstream os;
    os << "# comparison\nkey,value\n";
    os << "chunk_size," << c.chunk_size << "\n";
    os << "time_ratio," << format_double(c.time_ratio) << "\n";
    os << "reference_time_ratio," << format_double(kReferenceTimeRatio) << "\n";
    os << "full_peak_occupancy," << c.full_run.peak_buffer_occupancy << "\n";
    os << "chunked_peak_occupancy," << c.chunked_run.peak_buffer_occupancy << "\n";
    os << "content_equal," << (c.content_equal ? 1 : 0) << "\n";
    return os.str();
}

void write_text_file(const fs::path& path, std::string_view content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw StorageError("cannot write " + path.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out.flush()) throw StorageError("write failed for " + path.string());
}

void MetricsStore::publish(PipelineMetrics metrics) {
    auto next = std::make_shared<const PipelineMetrics>(std::move(metrics));
    std::lock_guard lock(mu_);
    latest_ = std::move(next);
}

std::shared_ptr<const PipelineMetrics> MetricsStore::latest() const {
    std::lock_guard lock(mu_);
    return latest_;
}

// ---- Model runs ----

TrainingSet training_set(const Warehouse& warehouse) {
    // Commit order depends on worker interleaving, so rows are put in
    // canonical order before the seeded split sees them.
    std::vector<TrafficRecord> rows;
    warehouse.scan([&](const TrafficRecord& r) {
        if (r.label) rows.push_back(r);
    });
    std::stable_sort(rows.begin(), rows.end(), [](const TrafficRecord& a, const TrafficRecord& b) {
        if (canonical_less(a, b)) return true;
        if (canonical_less(b, a)) return false;
        return content_line(a) < content_line(b);
    });
    TrainingSet out;
    out.x.reserve(rows.size());
    out.y.reserve(rows.size());
    for (const auto& r : rows) {
        out.x.push_back(featurize(r));
        out.y.push_back(*r.label);
    }
    return out;
}

TrainResult train_and_evaluate(const TrainingSet& data, const ForestOptions& forest, double test_fraction,
                               std::uint64_t split_seed) {
    if (data.x.size() != data.y.size()) throw ValidationError("labels", "feature and label counts differ");
    TrainResult out;
    out.split = stratified_split(data.y, test_fraction, split_seed);
    if (out.split.train.empty() || out.split.test.empty())
        throw InsufficientDataError("split left an empty train or test set");

    auto pick = [&](const std::vector<std::size_t>& idx, FeatureMatrix& x, LabelVector& y) {
        x.reserve(idx.size());
        y.reserve(idx.size());
        for (auto i : idx) {
            x.push_back(data.x[i]);
            y.push_back(data.y[i]);
        }
    };
    FeatureMatrix train_x, test_x;
    LabelVector train_y, test_y;
    pick(out.split.train, train_x, train_y);
    pick(out.split.test, test_x, test_y);

    out.forest = rf_fit(train_x, train_y, forest);
    out.test_report = evaluate(rf_predict_all(out.forest, test_x), test_y);
    out.test_report.feature_importances = feature_importances(out.forest);
    return out;
}

std::vector<LabeledBatch> stability_batches(const GeneratorConfig& generator, const CongestionLabeler& labeler,
                                            const StabilityOptions& options) {
    if (options.batches < 1 || options.batch_records < 1) throw ConfigError("stability run needs batches");
    if (options.noisy_batch > options.batches) throw ConfigError("noisy_batch is past the last batch");
    auto config = generator;
    config.num_records = options.batches * options.batch_records;
    config.seed = options.seed;
    const auto records = generate(config);

    std::vector<LabeledBatch> out(options.batches);
    for (std::size_t b = 0; b < options.batches; ++b) {
        const auto first = records.begin() + static_cast<std::ptrdiff_t>(b * options.batch_records);
        std::vector<TrafficRecordRaw> raw(first, first + static_cast<std::ptrdiff_t>(options.batch_records));
        auto& batch = out[b];
        for (const auto& r : raw) batch.labels.push_back(labeler.label(featurize(clean(r))));
        if (b + 1 == options.noisy_batch)
            raw = inject_noise(raw, options.noise_intensity, options.seed + b, velocity_range_max(config));
        for (const auto& r : raw) batch.features.push_back(featurize(clean(r)));
    }
    return out;
}

} // namespace citypulse
