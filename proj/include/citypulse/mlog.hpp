#pragma once

#include "citypulse/codec.hpp"

#include <atomic>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace citypulse {

struct LogMessage {
    std::string key;
    std::string payload;
    std::int64_t offset = 0;
    int partition = 0;
    std::int64_t produce_ts_ms = 0;
};

struct BrokerConfig {
    int partitions_per_topic = 4;
    std::size_t batch_size = 500;
    // Total append attempts per batch before the producer reports backpressure.
    int max_retries = 3;
    int retry_backoff_ms = 50;
    // Unconsumed messages a partition may hold (high watermark minus the
    // slowest group's committed offset).
    std::int64_t queue_capacity = 1'000'000;
    CodecId codec = CodecId::BlockCompressed;

    void validate() const;
};

enum class AppendStatus { Ok, QueueFull, Transient };

struct AppendResult {
    AppendStatus status = AppendStatus::Ok;
    std::int64_t base_offset = -1;
};

// Returns true to fail the given append attempt (1-based) with a transient error.
using FaultInjector = std::function<bool(std::string_view topic, int partition, int attempt)>;

// Stable 64-bit FNV-1a; keyed routing must not depend on std::hash.
std::uint64_t key_hash(std::string_view key);

// In-process partitioned commit log. All members are safe to call from
// multiple threads.
class Broker {
public:
    explicit Broker(BrokerConfig config = {});
    ~Broker();
    Broker(const Broker&) = delete;
    Broker& operator=(const Broker&) = delete;

    const BrokerConfig& config() const noexcept { return config_; }

    void create_topic(const std::string& name, int partitions);
    void create_topic(const std::string& name) { create_topic(name, config_.partitions_per_topic); }
    bool has_topic(std::string_view name) const;
    int partition_count(std::string_view topic) const;

    std::int64_t high_watermark(std::string_view topic, int partition) const;
    // Consistent snapshot across all partitions of the topic.
    std::vector<std::int64_t> high_watermarks(std::string_view topic) const;

    // Appends one encoded producer batch atomically. `attempt` is passed to
    // the fault injector.
    AppendResult append(std::string_view topic, int partition, std::string encoded_batch, int attempt = 1);

    std::vector<LogMessage> read(std::string_view topic, int partition, std::int64_t from, std::size_t max) const;

    void set_fault_injector(FaultInjector injector);

    // Consumer-group bookkeeping. Offsets are "next offset to consume".
    void join_group(const std::string& group, const std::string& topic, const std::vector<int>& partitions);
    void leave_group(const std::string& group, const std::string& topic, const std::vector<int>& partitions) noexcept;
    std::int64_t committed(std::string_view group, std::string_view topic, int partition) const;
    void commit(const std::string& group, const std::string& topic, const std::map<int, std::int64_t>& offsets);
    std::map<int, std::int64_t> lag(const std::string& group, const std::string& topic) const;
    std::int64_t total_lag(const std::string& group, const std::string& topic) const;

    // Sum over partitions of messages retained above the trim point.
    std::int64_t retained_messages(std::string_view topic) const;

    // Retained batches of a partition exactly as appended, oldest first.
    std::vector<std::string> encoded_batches(std::string_view topic, int partition) const;

private:
    struct StoredBatch {
        std::int64_t base_offset;
        std::uint32_t count;
        std::int64_t produce_ts_ms;
        std::shared_ptr<const std::string> bytes;
    };

    struct Partition {
        mutable std::mutex mu;
        std::deque<StoredBatch> batches;
        std::int64_t high_watermark = 0;
        std::atomic<std::int64_t> floor{0};
    };

    struct Topic {
        std::string name;
        // Appends hold it shared; snapshots hold it exclusively.
        mutable std::shared_mutex watermark_mu;
        std::vector<std::unique_ptr<Partition>> partitions;
    };

    struct GroupState {
        std::vector<std::int64_t> committed;
        std::set<int> assigned;
    };

    Topic& topic_ref(std::string_view name) const;
    Partition& partition_ref(std::string_view topic, int partition) const;
    void update_floors(const std::string& topic);

    BrokerConfig config_;
    mutable std::shared_mutex topics_mu_;
    std::unordered_map<std::string, std::unique_ptr<Topic>> topics_;

    mutable std::mutex groups_mu_;
    std::map<std::pair<std::string, std::string>, GroupState> groups_;

    mutable std::mutex fault_mu_;
    FaultInjector fault_;
};

struct DeliveryReport {
    std::string topic;
    int partition;
    std::int64_t offset;
    std::int64_t sequence;
};

struct ProducerBatch {
    std::vector<BatchEntry> messages;
    CodecId codec;
    std::int64_t sequence;
};

// Buffers keyed messages and appends them in batches of `batch_size`
// (per-batch acknowledgment). Not thread-safe; use one producer per thread.
class Producer {
public:
    explicit Producer(Broker& broker);
    ~Producer() = default;

    // Returns the message sequence number. Flushes automatically once the
    // buffer reaches batch_size.
    std::int64_t produce(const std::string& topic, std::string key, std::string payload);
    std::size_t flush();

    void on_delivery(std::function<void(const DeliveryReport&)> cb) { on_delivery_ = std::move(cb); }
    void on_batch_appended(std::function<void(std::size_t)> cb) { on_batch_ = std::move(cb); }

    std::size_t pending() const noexcept { return buffer_.size(); }
    std::size_t auto_flushes() const noexcept { return auto_flushes_; }
    std::int64_t batches_sent() const noexcept { return next_batch_seq_; }

private:
    struct Pending {
        std::string topic;
        int partition;
        BatchEntry entry;
        std::int64_t sequence;
    };

    std::int64_t append_with_retry(const std::string& topic, int partition, const ProducerBatch& batch);

    Broker& broker_;
    std::vector<Pending> buffer_;
    std::int64_t next_sequence_ = 0;
    std::int64_t next_batch_seq_ = 0;
    std::size_t auto_flushes_ = 0;
    std::function<void(const DeliveryReport&)> on_delivery_;
    std::function<void(std::size_t)> on_batch_;
};

// A group member owning a fixed partition assignment. poll() always reads
// from the committed offsets; nothing advances until commit().
class Consumer {
public:
    Consumer(Broker& broker, std::string group, std::string topic, std::vector<int> partitions);
    Consumer(Broker& broker, std::string group, std::string topic);  // all partitions
    ~Consumer();
    Consumer(const Consumer&) = delete;
    Consumer& operator=(const Consumer&) = delete;

    std::vector<LogMessage> poll(std::size_t max_records) const;
    void commit(const std::map<int, std::int64_t>& offsets);
    std::map<int, std::int64_t> committed() const;
    std::map<int, std::int64_t> lag() const;
    std::int64_t total_lag() const;

    const std::string& group() const noexcept { return group_; }
    const std::string& topic() const noexcept { return topic_; }
    const std::vector<int>& assignment() const noexcept { return partitions_; }

    // Offsets that commit exactly the given messages.
    static std::map<int, std::int64_t> next_offsets(const std::vector<LogMessage>& messages);

private:
    Broker& broker_;
    std::string group_;
    std::string topic_;
    std::vector<int> partitions_;
};

// Spool files carry a topic's log between processes: one file per partition
// (partition-N.log) holding length-prefixed encoded batches. Loading appends
// the batches to an existing topic with the same partition count.
void write_spool(const Broker& broker, const std::string& topic, const std::filesystem::path& dir);
std::int64_t load_spool(Broker& broker, const std::string& topic, const std::filesystem::path& dir);

} // namespace citypulse
