#include "citypulse/mlog.hpp"

#include "citypulse/clock.hpp"
#include "citypulse/error.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <numeric>
#include <thread>

namespace citypulse {

void BrokerConfig::validate() const {
    if (partitions_per_topic < 1) throw ConfigError("partitions_per_topic must be positive");
    if (batch_size < 1) throw ConfigError("batch_size must be positive");
    if (max_retries < 1) throw ConfigError("max_retries must be positive");
    if (retry_backoff_ms < 0) throw ConfigError("retry_backoff_ms must be nonnegative");
    if (queue_capacity < 1) throw ConfigError("queue_capacity must be positive");
}

std::uint64_t key_hash(std::string_view key) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : key) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

Broker::Broker(BrokerConfig config) : config_(config) { config_.validate(); }

Broker::~Broker() = default;

void Broker::create_topic(const std::string& name, int partitions) {
    if (name.empty()) throw ConfigError("topic name must be nonempty");
    if (partitions < 1) throw ConfigError("topic needs at least one partition");
    std::unique_lock lock(topics_mu_);
    if (topics_.contains(name)) throw ConflictError("topic '" + name + "' already exists");
    auto t = std::make_unique<Topic>();
    t->name = name;
    for (int p = 0; p < partitions; ++p) t->partitions.push_back(std::make_unique<Partition>());
    topics_.emplace(name, std::move(t));
}

bool Broker::has_topic(std::string_view name) const {
    std::shared_lock lock(topics_mu_);
    return topics_.contains(std::string(name));
}

Broker::Topic& Broker::topic_ref(std::string_view name) const {
    std::shared_lock lock(topics_mu_);
    auto it = topics_.find(std::string(name));
    if (it == topics_.end()) throw NotFoundError("unknown topic '" + std::string(name) + "'");
    return *it->second;
}

Broker::Partition& Broker::partition_ref(std::string_view topic, int partition) const {
    auto& t = topic_ref(topic);
    if (partition < 0 || partition >= static_cast<int>(t.partitions.size()))
        throw RangeError("partition " + std::to_string(partition) + " out of range for '" + std::string(topic) + "'");
    return *t.partitions[static_cast<std::size_t>(partition)];
}

int Broker::partition_count(std::string_view topic) const {
    return static_cast<int>(topic_ref(topic).partitions.size());
}

std::int64_t Broker::high_watermark(std::string_view topic, int partition) const {
    auto& p = partition_ref(topic, partition);
    std::lock_guard lock(p.mu);
    return p.high_watermark;
}

std::vector<std::int64_t> Broker::high_watermarks(std::string_view topic) const {
    auto& t = topic_ref(topic);
    std::unique_lock snapshot(t.watermark_mu);
    std::vector<std::int64_t> out;
    out.reserve(t.partitions.size());
    for (const auto& p : t.partitions) {
        std::lock_guard lock(p->mu);
        out.push_back(p->high_watermark);
    }
    return out;
}

void Broker::set_fault_injector(FaultInjector injector) {
    std::lock_guard lock(fault_mu_);
    fault_ = std::move(injector);
}

AppendResult Broker::append(std::string_view topic, int partition, std::string encoded_batch, int attempt) {
    {
        std::lock_guard lock(fault_mu_);
        if (fault_ && fault_(topic, partition, attempt)) return {AppendStatus::Transient, -1};
    }
    const auto header = decode_batch_header(encoded_batch);
    if (header.count == 0) throw RangeError("empty producer batch");

    auto& t = topic_ref(topic);
    if (partition < 0 || partition >= static_cast<int>(t.partitions.size()))
        throw RangeError("partition " + std::to_string(partition) + " out of range");
    auto& p = *t.partitions[static_cast<std::size_t>(partition)];

    std::shared_lock publish(t.watermark_mu);
    std::lock_guard lock(p.mu);
    const std::int64_t backlog = p.high_watermark - p.floor.load();
    if (backlog + static_cast<std::int64_t>(header.count) > config_.queue_capacity) return {AppendStatus::QueueFull, -1};

    const std::int64_t base = p.high_watermark;
    p.batches.push_back({base, header.count, now_ms(), std::make_shared<const std::string>(std::move(encoded_batch))});
    p.high_watermark += header.count;
    return {AppendStatus::Ok, base};
}

std::vector<LogMessage> Broker::read(std::string_view topic, int partition, std::int64_t from, std::size_t max) const {
    auto& p = partition_ref(topic, partition);
    std::vector<LogMessage> out;
    if (max == 0) return out;

    // Copy the covering batches out under the lock, decode outside it.
    std::vector<StoredBatch> covering;
    {
        std::lock_guard lock(p.mu);
        if (from >= p.high_watermark) return out;
        auto it = std::upper_bound(p.batches.begin(), p.batches.end(), from,
                                   [](std::int64_t off, const StoredBatch& b) { return off < b.base_offset; });
        if (it == p.batches.begin()) throw RangeError("offset " + std::to_string(from) + " was trimmed");
        --it;
        std::size_t wanted = 0;
        for (; it != p.batches.end() && wanted < max; ++it) {
            covering.push_back(*it);
            wanted += it->count;
        }
    }

    for (const auto& b : covering) {
        auto entries = decode_batch(*b.bytes);
        for (std::size_t i = 0; i < entries.size() && out.size() < max; ++i) {
            const std::int64_t off = b.base_offset + static_cast<std::int64_t>(i);
            if (off < from) continue;
            out.push_back({std::move(entries[i].key), std::move(entries[i].payload), off, partition, b.produce_ts_ms});
        }
    }
    return out;
}

void Broker::join_group(const std::string& group, const std::string& topic, const std::vector<int>& partitions) {
    const int count = partition_count(topic);
    for (int p : partitions) {
        if (p < 0 || p >= count) throw RangeError("partition " + std::to_string(p) + " out of range");
    }
    {
        std::lock_guard lock(groups_mu_);
        auto& g = groups_[{group, topic}];
        if (g.committed.empty()) g.committed.assign(static_cast<std::size_t>(count), 0);
        for (int p : partitions) {
            if (g.assigned.contains(p))
                throw ConflictError("partition " + std::to_string(p) + " already assigned in group '" + group + "'");
        }
        g.assigned.insert(partitions.begin(), partitions.end());
    }
    update_floors(topic);
}

void Broker::leave_group(const std::string& group, const std::string& topic, const std::vector<int>& partitions) noexcept {
    std::lock_guard lock(groups_mu_);
    auto it = groups_.find({group, topic});
    if (it == groups_.end()) return;
    for (int p : partitions) it->second.assigned.erase(p);
}

std::int64_t Broker::committed(std::string_view group, std::string_view topic, int partition) const {
    std::lock_guard lock(groups_mu_);
    auto it = groups_.find({std::string(group), std::string(topic)});
    if (it == groups_.end() || partition < 0 || partition >= static_cast<int>(it->second.committed.size())) return 0;
    return it->second.committed[static_cast<std::size_t>(partition)];
}

void Broker::commit(const std::string& group, const std::string& topic, const std::map<int, std::int64_t>& offsets) {
    auto& t = topic_ref(topic);
    {
        std::lock_guard lock(groups_mu_);
        auto it = groups_.find({group, topic});
        if (it == groups_.end()) throw NotFoundError("group '" + group + "' has not joined '" + topic + "'");
        auto& committed = it->second.committed;
        // Validate everything first so a rejected commit changes nothing.
        for (const auto& [p, off] : offsets) {
            if (p < 0 || p >= static_cast<int>(t.partitions.size()))
                throw RangeError("partition " + std::to_string(p) + " out of range");
            const auto hw = high_watermark(topic, p);
            if (off > hw)
                throw RangeError("offset " + std::to_string(off) + " beyond high watermark " + std::to_string(hw) +
                                 " on partition " + std::to_string(p));
            if (off < committed[static_cast<std::size_t>(p)])
                throw RangeError("offset regression on partition " + std::to_string(p) + ": " +
                                 std::to_string(committed[static_cast<std::size_t>(p)]) + " -> " + std::to_string(off));
        }
        for (const auto& [p, off] : offsets) committed[static_cast<std::size_t>(p)] = off;
    }
    update_floors(topic);
}

void Broker::update_floors(const std::string& topic) {
    auto& t = topic_ref(topic);
    std::vector<std::int64_t> floors(t.partitions.size(), std::numeric_limits<std::int64_t>::max());
    bool any = false;
    {
        std::lock_guard lock(groups_mu_);
        for (const auto& [key, g] : groups_) {
            if (key.second != topic) continue;
            any = true;
            for (std::size_t p = 0; p < floors.size(); ++p) floors[p] = std::min(floors[p], g.committed[p]);
        }
    }
    if (!any) return;
    for (std::size_t i = 0; i < floors.size(); ++i) {
        auto& p = *t.partitions[i];
        std::lock_guard lock(p.mu);
        p.floor.store(floors[i]);
        while (!p.batches.empty() && p.batches.front().base_offset + p.batches.front().count <= floors[i])
            p.batches.pop_front();
    }
}

std::map<int, std::int64_t> Broker::lag(const std::string& group, const std::string& topic) const {
    auto& t = topic_ref(topic);
    std::map<int, std::int64_t> out;
    std::unique_lock snapshot(t.watermark_mu);
    std::lock_guard lock(groups_mu_);
    auto it = groups_.find({group, topic});
    for (std::size_t p = 0; p < t.partitions.size(); ++p) {
        std::int64_t hw;
        {
            std::lock_guard plock(t.partitions[p]->mu);
            hw = t.partitions[p]->high_watermark;
        }
        const std::int64_t committed = it == groups_.end() ? 0 : it->second.committed[p];
        out[static_cast<int>(p)] = hw - committed;
    }
    return out;
}

std::int64_t Broker::total_lag(const std::string& group, const std::string& topic) const {
    const auto l = lag(group, topic);
    return std::accumulate(l.begin(), l.end(), std::int64_t{0}, [](std::int64_t acc, const auto& kv) { return acc + kv.second; });
}

std::int64_t Broker::retained_messages(std::string_view topic) const {
    auto& t = topic_ref(topic);
    std::unique_lock snapshot(t.watermark_mu);
    std::int64_t total = 0;
    for (const auto& p : t.partitions) {
        std::lock_guard lock(p->mu);
        total += p->high_watermark - p->floor.load();
    }
    return total;
}

std::vector<std::string> Broker::encoded_batches(std::string_view topic, int partition) const {
    auto& p = partition_ref(topic, partition);
    std::lock_guard lock(p.mu);
    std::vector<std::string> out;
    out.reserve(p.batches.size());
    for (const auto& b : p.batches) out.push_back(*b.bytes);
    return out;
}

// ---- Producer ----

Producer::Producer(Broker& broker) : broker_(broker) {}

std::int64_t Producer::produce(const std::string& topic, std::string key, std::string payload) {
    const int partitions = broker_.partition_count(topic);
    const int partition = static_cast<int>(key_hash(key) % static_cast<std::uint64_t>(partitions));
    const std::int64_t seq = next_sequence_++;
    buffer_.push_back({topic, partition, {std::move(key), std::move(payload)}, seq});
    if (buffer_.size() >= broker_.config().batch_size) {
        ++auto_flushes_;
        flush();
    }
    return seq;
}

std::int64_t Producer::append_with_retry(const std::string& topic, int partition, const ProducerBatch& batch) {
    const auto encoded = encode_batch(batch.messages, batch.codec);
    const auto& cfg = broker_.config();
    for (int attempt = 1;; ++attempt) {
        const auto result = broker_.append(topic, partition, encoded, attempt);
        if (result.status == AppendStatus::Ok) return result.base_offset;
        if (attempt >= cfg.max_retries) {
            throw BackpressureError(attempt, result.status == AppendStatus::QueueFull
                                                 ? "partition " + std::to_string(partition) + " of '" + topic + "' is full"
                                                 : "append to partition " + std::to_string(partition) + " failed");
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(cfg.retry_backoff_ms));
    }
}

std::size_t Producer::flush() {
    std::size_t appended = 0;
    while (!buffer_.empty()) {
        // Take the first pending message's (topic, partition) and every later
        // message routed there, preserving send order within the partition.
        const std::string topic = buffer_.front().topic;
        const int partition = buffer_.front().partition;
        ProducerBatch batch{{}, broker_.config().codec, next_batch_seq_};
        std::vector<std::int64_t> sequences;
        std::vector<Pending> rest;
        rest.reserve(buffer_.size());
        for (auto& m : buffer_) {
            if (m.topic == topic && m.partition == partition && batch.messages.size() < broker_.config().batch_size) {
                sequences.push_back(m.sequence);
                batch.messages.push_back(std::move(m.entry));
            } else {
                rest.push_back(std::move(m));
            }
        }

        std::int64_t base = 0;
        try {
            base = append_with_retry(topic, partition, batch);
        } catch (...) {
            // Put the unsent batch back in front, in its original order.
            std::vector<Pending> restored;
            restored.reserve(batch.messages.size() + rest.size());
            for (std::size_t i = 0; i < batch.messages.size(); ++i)
                restored.push_back({topic, partition, std::move(batch.messages[i]), sequences[i]});
            for (auto& m : rest) restored.push_back(std::move(m));
            buffer_ = std::move(restored);
            throw;
        }

        ++next_batch_seq_;
        appended += batch.messages.size();
        buffer_ = std::move(rest);
        if (on_delivery_) {
            for (std::size_t i = 0; i < sequences.size(); ++i)
                on_delivery_({topic, partition, base + static_cast<std::int64_t>(i), sequences[i]});
        }
        if (on_batch_) on_batch_(batch.messages.size());
    }
    return appended;
}

// ---- Consumer ----

namespace {

std::vector<int> all_partitions(Broker& broker, const std::string& topic) {
    std::vector<int> out(static_cast<std::size_t>(broker.partition_count(topic)));
    std::iota(out.begin(), out.end(), 0);
    return out;
}

} // namespace

Consumer::Consumer(Broker& broker, std::string group, std::string topic, std::vector<int> partitions)
    : broker_(broker), group_(std::move(group)), topic_(std::move(topic)), partitions_(std::move(partitions)) {
    if (partitions_.empty()) throw ConfigError("consumer needs at least one partition");
    std::sort(partitions_.begin(), partitions_.end());
    broker_.join_group(group_, topic_, partitions_);
}

Consumer::Consumer(Broker& broker, std::string group, std::string topic)
    : Consumer(broker, std::move(group), topic, all_partitions(broker, topic)) {}

Consumer::~Consumer() { broker_.leave_group(group_, topic_, partitions_); }

std::vector<LogMessage> Consumer::poll(std::size_t max_records) const {
    std::vector<LogMessage> out;
    if (max_records == 0) return out;
    // Split the budget evenly; partitions with less backlog hand their unused
    // share to the ones after them.
    std::size_t remaining_parts = partitions_.size();
    for (int p : partitions_) {
        const std::size_t budget = max_records - out.size();
        const std::size_t quota = (budget + remaining_parts - 1) / remaining_parts;
        --remaining_parts;
        if (quota == 0) continue;
        auto msgs = broker_.read(topic_, p, broker_.committed(group_, topic_, p), quota);
        for (auto& m : msgs) out.push_back(std::move(m));
    }
    return out;
}

void Consumer::commit(const std::map<int, std::int64_t>& offsets) {
    for (const auto& [p, off] : offsets) {
        if (!std::binary_search(partitions_.begin(), partitions_.end(), p))
            throw RangeError("partition " + std::to_string(p) + " is not assigned to this consumer");
    }
    broker_.commit(group_, topic_, offsets);
}

std::map<int, std::int64_t> Consumer::committed() const {
    std::map<int, std::int64_t> out;
    for (int p : partitions_) out[p] = broker_.committed(group_, topic_, p);
    return out;
}

std::map<int, std::int64_t> Consumer::lag() const {
    auto all = broker_.lag(group_, topic_);
    std::map<int, std::int64_t> out;
    for (int p : partitions_) out[p] = all[p];
    return out;
}

std::int64_t Consumer::total_lag() const {
    std::int64_t total = 0;
    for (const auto& [p, l] : lag()) total += l;
    return total;
}

std::map<int, std::int64_t> Consumer::next_offsets(const std::vector<LogMessage>& messages) {
    std::map<int, std::int64_t> out;
    for (const auto& m : messages) {
        auto& v = out[m.partition];
        v = std::max(v, m.offset + 1);
    }
    return out;
}

// ---- Spool ----

namespace {

std::filesystem::path spool_file(const std::filesystem::path& dir, int partition) {
    return dir / ("partition-" + std::to_string(partition) + ".log");
}

} // namespace

void write_spool(const Broker& broker, const std::string& topic, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw StorageError("cannot create spool directory " + dir.string() + ": " + ec.message());
    for (int p = 0; p < broker.partition_count(topic); ++p) {
        const auto path = spool_file(dir, p);
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw StorageError("cannot write " + path.string());
        for (const auto& batch : broker.encoded_batches(topic, p)) {
            const auto len = static_cast<std::uint32_t>(batch.size());
            const char prefix[4] = {static_cast<char>(len & 0xFF), static_cast<char>((len >> 8) & 0xFF),
                                    static_cast<char>((len >> 16) & 0xFF), static_cast<char>((len >> 24) & 0xFF)};
            out.write(prefix, 4);
            out.write(batch.data(), static_cast<std::streamsize>(batch.size()));
        }
        if (!out.flush()) throw StorageError("write failed for " + path.string());
    }
}

std::int64_t load_spool(Broker& broker, const std::string& topic, const std::filesystem::path& dir) {
    std::int64_t loaded = 0;
    for (int p = 0; p < broker.partition_count(topic); ++p) {
        const auto path = spool_file(dir, p);
        std::ifstream in(path, std::ios::binary);
        if (!in) throw StorageError("missing spool file " + path.string());
        for (;;) {
            unsigned char prefix[4];
            if (!in.read(reinterpret_cast<char*>(prefix), 4)) {
                if (in.gcount() != 0) throw StorageError("truncated length prefix in " + path.string());
                break;
            }
            const std::uint32_t len = prefix[0] | (prefix[1] << 8) | (prefix[2] << 16) |
                                      (static_cast<std::uint32_t>(prefix[3]) << 24);
            std::string batch(len, '\0');
            if (!in.read(batch.data(), len)) throw StorageError("truncated batch in " + path.string());
            const auto count = decode_batch_header(batch).count;
            if (broker.append(topic, p, std::move(batch)).status != AppendStatus::Ok)
                throw BackpressureError(1, "spool does not fit in partition " + std::to_string(p));
            loaded += count;
        }
    }
    return loaded;
}

} // namespace citypulse
