#include "doctest.h"
#include "suites.hpp"

#include "citypulse/codec.hpp"
#include "citypulse/error.hpp"
#include "citypulse/mlog.hpp"

#include <algorithm>
#include <random>
#include <thread>

using namespace citypulse;

namespace {

BrokerConfig quick_config() {
    BrokerConfig c;
    c.retry_backoff_ms = 0;
    return c;
}

} // namespace

// ---- codec ----

TEST_CASE("codec: batch header layout") {
    std::vector<BatchEntry> entries{{"k1", "hello"}, {"", "x"}};
    const auto bytes = encode_batch(entries, CodecId::None);
    REQUIRE(bytes.size() == kBatchHeaderSize + (4 + 2 + 4 + 5) + (4 + 0 + 4 + 1));
    CHECK(static_cast<unsigned char>(bytes[0]) == 0);
    CHECK(static_cast<unsigned char>(bytes[1]) == 2);  // count, little endian
    CHECK(bytes[2] == 0);
    CHECK(static_cast<unsigned char>(bytes[5]) == 24);  // uncompressed body length
    const auto h = decode_batch_header(bytes);
    CHECK(h.codec == CodecId::None);
    CHECK(h.count == 2);
    CHECK(h.uncompressed_length == 24);
    CHECK(decode_batch(bytes) == entries);
}

TEST_CASE("codec: compressed batches decode to the exact originals (property, payloads up to 1 MB)") {
    const auto r = suites::codec_round_trip();
    INFO(r.summary());
    CHECK(r.ok());
}

TEST_CASE("codec: compression shrinks repetitive payloads") {
    std::vector<BatchEntry> entries(500, BatchEntry{"42", R"({"Vehicle_ID":42,"v_Vel":12.5,"Weather":"Clear"})"});
    CHECK(encode_batch(entries, CodecId::BlockCompressed).size() < encode_batch(entries, CodecId::None).size() / 4);
}

TEST_CASE("codec: corrupt input is rejected") {
    std::vector<BatchEntry> entries{{"a", "b"}};
    auto bytes = encode_batch(entries, CodecId::BlockCompressed);
    CHECK_THROWS_AS(decode_batch(bytes.substr(0, 5)), Error);
    bytes[0] = 9;
    CHECK_THROWS_AS(decode_batch(bytes), Error);
    auto plain = encode_batch(entries, CodecId::None);
    plain.pop_back();
    CHECK_THROWS_AS(decode_batch(plain), Error);
    CHECK(codec_from_string("block") == CodecId::BlockCompressed);
    CHECK(codec_from_string("none") == CodecId::None);
    CHECK_THROWS_AS(codec_from_string("snappy"), ConfigError);
}

// ---- topics ----

TEST_CASE("create_topic: raw-traffic-data with 4 partitions starts empty") {
    Broker broker;
    broker.create_topic("raw-traffic-data", 4);
    CHECK(broker.partition_count("raw-traffic-data") == 4);
    CHECK(broker.high_watermarks("raw-traffic-data") == std::vector<std::int64_t>{0, 0, 0, 0});
}

TEST_CASE("create_topic: zero partitions and duplicates are errors") {
    Broker broker;
    CHECK_THROWS_AS(broker.create_topic("t", 0), ConfigError);
    broker.create_topic("t", 2);
    CHECK_THROWS_AS(broker.create_topic("t", 2), ConflictError);
    CHECK_THROWS_AS(broker.partition_count("nope"), NotFoundError);
}

TEST_CASE("broker config validation") {
    BrokerConfig c;
    c.partitions_per_topic = 0;
    CHECK_THROWS_AS(Broker{c}, ConfigError);
    c = {};
    c.queue_capacity = 0;
    CHECK_THROWS_AS(Broker{c}, ConfigError);
}

// ---- produce / flush ----

TEST_CASE("produce: same key on one partition gets offsets 0, 1, 2 in order") {
    Broker broker(quick_config());
    broker.create_topic("t", 1);
    Producer producer(broker);
    std::vector<DeliveryReport> acks;
    producer.on_delivery([&](const DeliveryReport& r) { acks.push_back(r); });
    producer.produce("t", "v1", "a");
    producer.produce("t", "v1", "b");
    producer.produce("t", "v1", "c");
    CHECK(producer.flush() == 3);
    REQUIRE(acks.size() == 3);
    for (std::int64_t i = 0; i < 3; ++i) {
        CHECK(acks[static_cast<std::size_t>(i)].offset == i);
        CHECK(acks[static_cast<std::size_t>(i)].sequence == i);
    }
    const auto msgs = broker.read("t", 0, 0, 10);
    REQUIRE(msgs.size() == 3);
    CHECK(msgs[0].payload == "a");
    CHECK(msgs[1].payload == "b");
    CHECK(msgs[2].payload == "c");
}

TEST_CASE("produce: 1200 messages at batch size 500 flush twice and leave 200 pending") {
    Broker broker(quick_config());
    broker.create_topic("t", 1);
    Producer producer(broker);
    for (int i = 0; i < 1200; ++i) producer.produce("t", "k", std::to_string(i));
    CHECK(producer.auto_flushes() == 2);
    CHECK(producer.pending() == 200);
    CHECK(broker.high_watermark("t", 0) == 1000);
    CHECK(producer.flush() == 200);
    CHECK(producer.pending() == 0);
    CHECK(producer.flush() == 0);
    CHECK(broker.high_watermark("t", 0) == 1200);
}

TEST_CASE("produce: keyed routing is hash(key) mod partitions") {
    Broker broker(quick_config());
    broker.create_topic("t", 4);
    Producer producer(broker);
    std::vector<DeliveryReport> acks;
    producer.on_delivery([&](const DeliveryReport& r) { acks.push_back(r); });
    for (int v = 1; v <= 50; ++v) producer.produce("t", std::to_string(v), "x");
    producer.flush();
    for (const auto& a : acks)
        CHECK(a.partition == static_cast<int>(key_hash(std::to_string(a.sequence + 1)) % 4));
    // FNV-1a reference values.
    CHECK(key_hash("") == 0xcbf29ce484222325ULL);
    CHECK(key_hash("a") == 0xaf63dc4c8601ec8cULL);
}

TEST_CASE("produce: capacity 10 makes the 11th message fail after max_retries attempts") {
    BrokerConfig c = quick_config();
    c.queue_capacity = 10;
    c.batch_size = 1;
    Broker broker(c);
    broker.create_topic("t", 1);
    Producer producer(broker);
    for (int i = 0; i < 10; ++i) producer.produce("t", "k", "m");
    try {
        producer.produce("t", "k", "m");
        FAIL("expected backpressure");
    } catch (const BackpressureError& e) {
        CHECK(e.attempts() == 3);
    }
    CHECK(producer.pending() == 1);
    CHECK(broker.high_watermark("t", 0) == 10);

    // Consuming frees room and the retained message goes through.
    Consumer consumer(broker, "g", "t");
    consumer.commit({{0, 5}});
    CHECK(producer.flush() == 1);
    CHECK(broker.high_watermark("t", 0) == 11);
}

TEST_CASE("produce: unknown topic is an error") {
    Broker broker;
    Producer producer(broker);
    CHECK_THROWS_AS(producer.produce("missing", "k", "v"), NotFoundError);
}

TEST_CASE("produce: transient faults below max_retries are retried") {
    Broker broker(quick_config());
    broker.create_topic("t", 1);
    std::vector<int> attempts;
    broker.set_fault_injector([&](std::string_view, int, int attempt) {
        attempts.push_back(attempt);
        return attempt < 3;
    });
    Producer producer(broker);
    producer.produce("t", "k", "v");
    CHECK(producer.flush() == 1);
    CHECK(attempts == std::vector<int>{1, 2, 3});

    broker.set_fault_injector([](std::string_view, int, int) { return true; });
    producer.produce("t", "k", "w");
    CHECK_THROWS_AS(producer.flush(), BackpressureError);
    CHECK(producer.pending() == 1);
}

// ---- consume ----

TEST_CASE("poll: returns what is there without advancing") {
    Broker broker(quick_config());
    broker.create_topic("t", 1);
    Producer producer(broker);
    for (int i = 0; i < 10; ++i) producer.produce("t", "k", std::to_string(i));
    producer.flush();
    Consumer consumer(broker, "g", "t");

    CHECK(consumer.poll(500).size() == 10);
    CHECK(consumer.poll(500).front().payload == "0");
    const auto four = consumer.poll(4);
    REQUIRE(four.size() == 4);
    for (std::int64_t i = 0; i < 4; ++i) CHECK(four[static_cast<std::size_t>(i)].offset == i);
}

TEST_CASE("commit and lag arithmetic") {
    Broker broker(quick_config());
    broker.create_topic("t", 1);
    Consumer consumer(broker, "g", "t");
    CHECK(consumer.lag() == std::map<int, std::int64_t>{{0, 0}});

    Producer producer(broker);
    for (int i = 0; i < 10; ++i) producer.produce("t", "k", "x");
    producer.flush();
    consumer.commit({{0, 4}});
    CHECK(consumer.lag().at(0) == 6);
    CHECK(consumer.poll(1).front().offset == 4);
    CHECK_THROWS_AS(consumer.commit({{0, 2}}), RangeError);
    CHECK(consumer.committed().at(0) == 4);
    CHECK_THROWS_AS(consumer.commit({{0, 11}}), RangeError);
    consumer.commit({{0, 10}});
    CHECK(consumer.total_lag() == 0);
    CHECK(consumer.poll(10).empty());
}

TEST_CASE("consumer groups: one owner per partition, independent offsets per group") {
    Broker broker(quick_config());
    broker.create_topic("t", 2);
    Consumer a(broker, "g", "t", {0});
    CHECK_THROWS_AS(Consumer(broker, "g", "t", {0}), ConflictError);
    Consumer b(broker, "g", "t", {1});
    CHECK_THROWS_AS(a.commit({{1, 0}}), RangeError);
    Consumer other(broker, "h", "t");
    CHECK(other.assignment() == std::vector<int>{0, 1});
}

TEST_CASE("trimming: consumed batches are released once every group passed them") {
    BrokerConfig c = quick_config();
    c.batch_size = 10;
    Broker broker(c);
    broker.create_topic("t", 1);
    Consumer slow(broker, "slow", "t");
    Consumer fast(broker, "fast", "t");
    Producer producer(broker);
    for (int i = 0; i < 30; ++i) producer.produce("t", "k", std::to_string(i));
    fast.commit({{0, 30}});
    CHECK(broker.retained_messages("t") == 30);
    slow.commit({{0, 20}});
    CHECK(broker.retained_messages("t") == 10);
    CHECK(slow.poll(100).front().payload == "20");
}

// ---- properties (>= 1000 randomized cases each) ----

TEST_CASE("property: per-key FIFO and conservation through a random consume schedule") {
    const auto r = suites::broker_fifo();
    INFO(r.summary());
    CHECK(r.ok());
}

TEST_CASE("property: offsets are contiguous and monotone per partition") {
    const auto r = suites::broker_offsets();
    INFO(r.summary());
    CHECK(r.ok());
}

TEST_CASE("property: lag equals high watermark minus committed at every observation") {
    const auto r = suites::broker_lag();
    INFO(r.summary());
    CHECK(r.ok());
}

TEST_CASE("property: retries under injected faults leave the same log as a fault-free run") {
    const auto r = suites::broker_retry();
    INFO(r.summary());
    CHECK(r.ok());
}

TEST_CASE("concurrency: parallel producers keep per-partition offsets contiguous") {
    Broker broker(quick_config());
    broker.create_topic("t", 3);
    constexpr int kThreads = 4;
    constexpr int kPerThread = 5000;
    std::vector<std::thread> threads;
    for (int t = 0; t < kThreads; ++t) {
        threads.emplace_back([&broker, t] {
            Producer producer(broker);
            for (int i = 0; i < kPerThread; ++i) producer.produce("t", std::to_string(t * 1000 + i % 50), std::to_string(i));
            producer.flush();
        });
    }
    std::int64_t observed_max = 0;
    std::thread watcher([&] {
        for (int i = 0; i < 200; ++i) {
            const auto hws = broker.high_watermarks("t");
            std::int64_t s = 0;
            for (auto h : hws) s += h;
            CHECK(s >= observed_max);
            observed_max = s;
        }
    });
    for (auto& th : threads) th.join();
    watcher.join();
    std::int64_t total = 0;
    for (int p = 0; p < 3; ++p) {
        const auto msgs = broker.read("t", p, 0, 100'000);
        for (std::size_t i = 0; i < msgs.size(); ++i) CHECK(msgs[i].offset == static_cast<std::int64_t>(i));
        total += static_cast<std::int64_t>(msgs.size());
    }
    CHECK(total == kThreads * kPerThread);
}
