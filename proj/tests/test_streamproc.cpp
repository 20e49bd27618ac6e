#include "doctest.h"
#include "oracles.hpp"
#include "test_util.hpp"

#include "citypulse/datagen.hpp"
#include "citypulse/error.hpp"
#include "citypulse/streamproc.hpp"
#include "citypulse/wire.hpp"

#include <cmath>
#include <random>
#include <set>

using namespace citypulse;

namespace {

const std::string kTopic = "raw-traffic-data";

std::vector<TrafficRecordRaw> seeded(std::uint64_t n, std::uint64_t seed = 42, double missing = 0.02) {
    GeneratorConfig c;
    c.num_records = n;
    c.seed = seed;
    c.missing_prob = missing;
    return generate(c);
}

void produce_all(Broker& broker, const std::vector<TrafficRecordRaw>& records) {
    Producer producer(broker);
    for (const auto& r : records) producer.produce(kTopic, record_key(r), to_json_payload(r));
    producer.flush();
}

CongestionLabel by_speed(const FeatureVector& f) {
    return f[kVVel] > 18 ? CongestionLabel::Low : f[kVVel] > 7 ? CongestionLabel::Medium : CongestionLabel::High;
}

// One consumer over all partitions, draining into the warehouse. Returns
// the number of dead letters.
std::size_t drain(Broker& broker, Warehouse& warehouse, std::size_t flush_every = 100'000) {
    Consumer consumer(broker, "proc", kTopic);
    TempStore temp(flush_every);
    MicroBatchProcessor proc(consumer, temp);
    while (proc.process_micro_batch().polled > 0) {
        if (temp.should_flush()) warehouse.commit(temp, by_speed);
    }
    warehouse.commit(temp, by_speed);
    return proc.dead_letters().size();
}

TrafficRecordRaw complete_record() {
    TrafficRecordRaw r;
    r.vehicle_id = 3;
    r.frame_id = 4;
    r.timestamp_ms = 1'700'000'000'400;
    r.lane_id = 2;
    r.section_id = 9;
    r.global_x = 2100.25;
    r.global_y = 5.55;
    r.v_vel = 3.0;
    r.v_acc = -0.5;
    r.space_headway = 7.0;
    r.time_headway = 2.33;
    r.weather = Weather::Fog;
    return r;
}

} // namespace

// ---- clean / featurize ----

TEST_CASE("clean: absent velocity becomes 0.0") {
    auto r = complete_record();
    r.v_vel.reset();
    CHECK(clean(r).v_vel == 0.0);
}

TEST_CASE("clean: absent lane becomes -1") {
    auto r = complete_record();
    r.lane_id.reset();
    CHECK(clean(r).lane_id == -1);
}

TEST_CASE("clean: fill rules for every optional field") {
    TrafficRecordRaw r;
    r.vehicle_id = 1;
    const auto c = clean(r);
    CHECK(c.lane_id == -1);
    CHECK(c.section_id == -1);
    CHECK(c.v_vel == 0.0);
    CHECK(c.v_acc == 0.0);
    CHECK(c.space_headway == 0.0);
    CHECK(c.time_headway == 0.0);
    CHECK(featurize(c) == FeatureVector{0, 0, 0, 0});
}

TEST_CASE("clean: complete records pass through unchanged and clean is idempotent") {
    const auto r = complete_record();
    const auto c = clean(r);
    CHECK(to_raw(c) == r);
    for (const auto& raw : seeded(2000, 8, 0.2)) {
        const auto once = clean(raw);
        CHECK(clean(to_raw(once)) == once);
        if (raw.v_vel) CHECK(once.v_vel == *raw.v_vel);
    }
}

TEST_CASE("featurize: projection in fixed order") {
    CHECK(featurize(clean(complete_record())) == FeatureVector{3.0, -0.5, 7.0, 2.33});

    const auto records = seeded(1000, 4);
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto f = featurize(clean(records[i]));
        // Columns pulled independently from the raw record.
        CHECK(f[0] == records[i].v_vel.value_or(0.0));
        CHECK(f[1] == records[i].v_acc.value_or(0.0));
        CHECK(f[2] == records[i].space_headway.value_or(0.0));
        CHECK(f[3] == records[i].time_headway.value_or(0.0));
    }
}

// ---- wire ----

TEST_CASE("wire: JSON payload round trip with nulls for absent fields") {
    auto r = complete_record();
    r.v_vel.reset();
    const auto payload = to_json_payload(r);
    CHECK(payload.find("\"v_Vel\":null") != std::string::npos);
    CHECK(payload.find("\"Space_Headway\":7.0") != std::string::npos);
    CHECK(from_json_payload(payload) == r);
    for (const auto& raw : seeded(2000, 6, 0.2)) CHECK(from_json_payload(to_json_payload(raw)) == raw);
}

TEST_CASE("wire: malformed payloads are rejected") {
    CHECK_THROWS_AS(from_json_payload("not json"), Error);
    CHECK_THROWS_AS(from_json_payload("[1,2]"), Error);
    CHECK_THROWS_AS(from_json_payload(R"({"Vehicle_ID":1})"), Error);
    auto payload = to_json_payload(complete_record());
    const auto w = payload.find("\"Fog\"");
    CHECK_THROWS_AS(from_json_payload(payload.substr(0, w) + "\"Snow\"" + payload.substr(w + 5)), Error);
}

// ---- warehouse rows ----

TEST_CASE("warehouse row: round trip including label and timestamps") {
    auto rec = clean(complete_record());
    rec.ingest_ts_ms = 10;
    rec.commit_ts_ms = 12;
    rec.label = CongestionLabel::High;
    const auto row = to_warehouse_row(rec);
    CHECK(row.ends_with(",10,12,High"));
    CHECK(parse_warehouse_row(row, 2) == rec);
    rec.label.reset();
    CHECK(parse_warehouse_row(to_warehouse_row(rec), 2) == rec);
    CHECK_THROWS_AS(parse_warehouse_row("1,2,3", 5), ParseError);
}

// ---- micro-batch processing ----

TEST_CASE("process_micro_batch: 500 available stages one batch and advances 500") {
    Broker broker;
    broker.create_topic(kTopic, 1);
    produce_all(broker, seeded(500));
    Consumer consumer(broker, "g", kTopic);
    TempStore temp;
    MicroBatchProcessor proc(consumer, temp);
    const auto result = proc.process_micro_batch();
    CHECK(result.polled == 500);
    CHECK(result.staged == 500);
    CHECK(result.staged_sequence == 0);
    CHECK(temp.staged_records() == 500);
    CHECK(consumer.committed().at(0) == 500);
    CHECK(consumer.total_lag() == 0);
}

TEST_CASE("process_micro_batch: nothing available changes nothing") {
    Broker broker;
    broker.create_topic(kTopic, 2);
    Consumer consumer(broker, "g", kTopic);
    TempStore temp;
    MicroBatchProcessor proc(consumer, temp);
    const auto result = proc.process_micro_batch();
    CHECK(result.polled == 0);
    CHECK_FALSE(result.staged_sequence.has_value());
    CHECK(temp.empty());
    CHECK(consumer.committed() == std::map<int, std::int64_t>{{0, 0}, {1, 0}});
}

TEST_CASE("process_micro_batch: malformed payloads go to dead letters and the batch continues") {
    Broker broker;
    broker.create_topic(kTopic, 1);
    {
        Producer producer(broker);
        const auto records = seeded(10);
        for (std::size_t i = 0; i < records.size(); ++i) {
            producer.produce(kTopic, "1", i == 3 ? std::string("{broken") : to_json_payload(records[i]));
        }
        producer.flush();
    }
    Consumer consumer(broker, "g", kTopic);
    TempStore temp;
    MicroBatchProcessor proc(consumer, temp);
    const auto result = proc.process_micro_batch();
    CHECK(result.staged == 9);
    CHECK(result.dead_letters == 1);
    REQUIRE(proc.dead_letters().size() == 1);
    CHECK(proc.dead_letters()[0].offset == 3);
    CHECK(proc.dead_letters()[0].payload == "{broken");
    CHECK(consumer.total_lag() == 0);
}

TEST_CASE("process_micro_batch: staging failure leaves offsets alone") {
    Broker broker;
    broker.create_topic(kTopic, 1);
    produce_all(broker, seeded(50));
    Consumer consumer(broker, "g", kTopic);
    TempStore temp;
    temp.inject_stage_failure(true);
    MicroBatchProcessor proc(consumer, temp);
    CHECK_THROWS_AS(proc.process_micro_batch(), StorageError);
    CHECK(consumer.committed().at(0) == 0);
    CHECK(temp.empty());
    temp.inject_stage_failure(false);
    CHECK(proc.process_micro_batch().staged == 50);
}

TEST_CASE("process_micro_batch: ingest timestamp is the broker produce time") {
    Broker broker;
    broker.create_topic(kTopic, 1);
    produce_all(broker, seeded(20));
    const auto produced_at = broker.read(kTopic, 0, 0, 1).front().produce_ts_ms;
    Consumer consumer(broker, "g", kTopic);
    TempStore temp;
    MicroBatchProcessor proc(consumer, temp);
    proc.process_micro_batch();
    for (const auto& row : temp.batches().front().rows) CHECK(row.record.ingest_ts_ms == produced_at);
}

// ---- temp store and warehouse ----

TEST_CASE("warehouse: three staged batches of 500 commit 1500 rows; empty temp commits 0") {
    test::TempDir dir;
    Broker broker;
    broker.create_topic(kTopic, 1);
    produce_all(broker, seeded(1500));
    Consumer consumer(broker, "g", kTopic);
    TempStore temp;
    MicroBatchProcessor proc(consumer, temp);
    for (int i = 0; i < 3; ++i) proc.process_micro_batch();
    CHECK(temp.batches().size() == 3);
    for (std::uint64_t i = 0; i < 3; ++i) CHECK(temp.batches()[i].sequence == i);

    Warehouse wh(dir.path() / "wh");
    CHECK(wh.commit(temp, by_speed) == 1500);
    CHECK(temp.empty());
    CHECK(wh.row_count() == 1500);
    CHECK(wh.ledger().size() == 3);
    CHECK(wh.ledger()[0].batch_id == "p0:0-499");
    CHECK(wh.has_batch("p0:1000-1499"));
    CHECK(wh.commit(temp, by_speed) == 0);

    std::size_t ledger_rows = 0;
    for (const auto& e : wh.ledger()) ledger_rows += e.row_count;
    CHECK(ledger_rows == wh.row_count());
    for (const auto& r : wh.rows()) {
        CHECK(r.commit_ts_ms >= r.ingest_ts_ms);
        CHECK(r.label == by_speed(featurize(r)));
    }
}

TEST_CASE("warehouse: re-committing a ledgered batch appends nothing") {
    test::TempDir dir;
    Broker broker;
    broker.create_topic(kTopic, 1);
    produce_all(broker, seeded(300));
    Warehouse wh(dir.path());

    Consumer consumer(broker, "g", kTopic);
    TempStore temp;
    MicroBatchProcessor proc(consumer, temp, 300);
    proc.inject_crash_before_commit(true);
    CHECK_THROWS_AS(proc.process_micro_batch(), SimulatedCrash);
    const auto staged = temp.batches().front();
    CHECK(wh.commit(temp) == 300);
    const auto hash = wh.content_hash();

    // Same id staged again by the replay.
    CHECK(temp.stage(staged.rows).has_value());
    CHECK(wh.commit(temp) == 0);
    CHECK(wh.row_count() == 300);
    CHECK(wh.ledger().size() == 1);
    CHECK(wh.content_hash() == hash);
}

TEST_CASE("temp store: duplicate batch ids are refused; staged files survive a restart") {
    test::TempDir dir;
    Broker broker;
    broker.create_topic(kTopic, 2);
    produce_all(broker, seeded(400));
    Consumer consumer(broker, "g", kTopic);
    std::vector<StagedBatch> before;
    {
        TempStore temp(100'000, dir.path() / "stage");
        MicroBatchProcessor proc(consumer, temp, 150);
        proc.process_micro_batch();
        proc.process_micro_batch();
        CHECK_FALSE(temp.stage(temp.batches()[0].rows).has_value());
        before = temp.batches();
    }
    TempStore reloaded(100'000, dir.path() / "stage");
    REQUIRE(reloaded.batches().size() == before.size());
    for (std::size_t i = 0; i < before.size(); ++i) {
        CHECK(reloaded.batches()[i].batch_id == before[i].batch_id);
        REQUIRE(reloaded.batches()[i].rows.size() == before[i].rows.size());
        for (std::size_t j = 0; j < before[i].rows.size(); ++j) {
            CHECK(reloaded.batches()[i].rows[j].record == before[i].rows[j].record);
            CHECK(reloaded.batches()[i].rows[j].features == before[i].rows[j].features);
        }
    }
    CHECK(reloaded.staged_records() == 300);
    reloaded.clear();
    CHECK(TempStore(100'000, dir.path() / "stage").empty());
}

TEST_CASE("warehouse: injected commit failure rolls back and keeps the temp store") {
    test::TempDir dir;
    Broker broker;
    broker.create_topic(kTopic, 1);
    produce_all(broker, seeded(200));
    Consumer consumer(broker, "g", kTopic);
    TempStore temp;
    MicroBatchProcessor proc(consumer, temp, 100);
    proc.process_micro_batch();
    proc.process_micro_batch();

    Warehouse wh(dir.path());
    const auto data_before = test::slurp(wh.data_path());
    wh.inject_commit_failure(true);
    CHECK_THROWS_AS(wh.commit(temp), StorageError);
    CHECK(temp.staged_records() == 200);
    CHECK(wh.row_count() == 0);
    CHECK(test::slurp(wh.data_path()) == data_before);
    CHECK(test::slurp(wh.ledger_path()).empty());
    CHECK(wh.commit(temp) == 200);
    CHECK(Warehouse(dir.path()).row_count() == 200);
}

TEST_CASE("warehouse: reopening drops rows without a ledger line") {
    test::TempDir dir;
    {
        Broker broker;
        broker.create_topic(kTopic, 1);
        produce_all(broker, seeded(100));
        Warehouse wh(dir.path());
        drain(broker, wh);
    }
    const auto good = test::slurp(dir.path() / "warehouse.csv");
    {
        std::ofstream out(dir.path() / "warehouse.csv", std::ios::app);
        out << "torn,row\n";
    }
    Warehouse reopened(dir.path());
    CHECK(reopened.row_count() == 100);
    CHECK(test::slurp(reopened.data_path()) == good);
    CHECK(reopened.committed_offsets().at(0) == 100);
}

// ---- end to end ----

TEST_CASE("conservation: generated = warehouse rows + dead letters") {
    test::TempDir dir;
    Broker broker;
    broker.create_topic(kTopic, 4);
    const auto records = seeded(5000, 21);
    {
        Producer producer(broker);
        for (std::size_t i = 0; i < records.size(); ++i) {
            producer.produce(kTopic, record_key(records[i]), i % 997 == 5 ? "garbage" : to_json_payload(records[i]));
        }
        producer.flush();
    }
    Warehouse wh(dir.path());
    const auto dead = drain(broker, wh, 1000);
    CHECK(dead == 6);
    CHECK(wh.row_count() + dead == records.size());
}

TEST_CASE("exactly-once effect: any crash between staging and offset commit leaves the crash-free content") {
    const auto records = seeded(3000, 33);

    test::TempDir ref_dir;
    std::string reference;
    {
        Broker broker;
        broker.create_topic(kTopic, 3);
        produce_all(broker, records);
        Warehouse wh(ref_dir.path());
        drain(broker, wh);
        reference = wh.content_hash();
    }

    std::mt19937_64 rng(99);
    for (int trial = 0; trial < 12; ++trial) {
        test::TempDir dir;
        Broker broker;
        broker.create_topic(kTopic, 3);
        produce_all(broker, records);
        Warehouse wh(dir.path() / "wh");
        const int crash_at = static_cast<int>(rng() % 6);
        const bool commit_before_restart = rng() % 2;
        {
            Consumer consumer(broker, "proc", kTopic);
            TempStore temp(100'000, dir.path() / "stage");
            MicroBatchProcessor proc(consumer, temp, 400);
            for (int i = 0; i < crash_at; ++i) proc.process_micro_batch();
            proc.inject_crash_before_commit(true);
            CHECK_THROWS_AS(proc.process_micro_batch(), SimulatedCrash);
            if (commit_before_restart) wh.commit(temp, by_speed);
        }
        // Restart: the staged files are reloaded and the uncommitted batch is replayed.
        Consumer consumer(broker, "proc", kTopic);
        TempStore temp(100'000, dir.path() / "stage");
        MicroBatchProcessor proc(consumer, temp, 400);
        while (proc.process_micro_batch().polled > 0) {
        }
        wh.commit(temp, by_speed);
        CHECK(wh.row_count() == records.size());
        CHECK(wh.content_hash() == reference);
    }
}

TEST_CASE("content hash ignores timestamps and row order") {
    auto a = clean(complete_record());
    auto b = clean(complete_record());
    b.vehicle_id = 4;
    CHECK(hash_sorted_lines({content_line(a), content_line(b)}) == hash_sorted_lines({content_line(b), content_line(a)}));
    const auto h = hash_sorted_lines({content_line(a)});
    a.ingest_ts_ms = 99;
    a.commit_ts_ms = 100;
    CHECK(hash_sorted_lines({content_line(a)}) == h);
    a.label = CongestionLabel::Low;
    CHECK(hash_sorted_lines({content_line(a)}) != h);
    CHECK(h.ends_with("/1"));
}

// ---- aggregates ----

TEST_CASE("aggregate_by_lane: two rows in lane 1 average to 15") {
    TrafficRecord r1;
    r1.lane_id = 1;
    r1.v_vel = 10;
    r1.space_headway = 4;
    TrafficRecord r2 = r1;
    r2.v_vel = 20;
    r2.space_headway = 8;
    const auto agg = aggregate_by_lane({r1, r2});
    REQUIRE(agg.lanes.size() == 1);
    CHECK(agg.lanes[0].lane_id == 1);
    CHECK(agg.lanes[0].count == 2);
    CHECK(agg.lanes[0].mean_v_vel == 15.0);
    CHECK(agg.lanes[0].mean_space_headway == 6.0);
    CHECK(agg.unlabeled == 2);
}

TEST_CASE("aggregate_by_lane: empty warehouse gives empty aggregates") {
    test::TempDir dir;
    Warehouse wh(dir.path());
    const auto agg = aggregate_by_lane(wh);
    CHECK(agg.lanes.empty());
    CHECK(agg.total() == 0);
    CHECK(aggregate_by_road(wh).empty());
}

TEST_CASE("aggregate_by_lane: 100K seeded rows match a brute-force scan of the CSV") {
    test::TempDir dir;
    Broker broker;
    broker.create_topic(kTopic, 4);
    produce_all(broker, seeded(100'000, 12));
    Warehouse wh(dir.path());
    drain(broker, wh);

    const auto agg = aggregate_by_lane(wh);
    const auto ref = oracle::scan_warehouse_csv(wh.data_path());
    CHECK(agg.total() == wh.row_count());
    CHECK(ref.rows == wh.row_count());
    REQUIRE(agg.lanes.size() == ref.lanes.size());
    CHECK(agg.lanes.front().lane_id == -1);
    for (const auto& lane : agg.lanes) {
        const auto& r = ref.lanes.at(lane.lane_id);
        CHECK(lane.count == r.count);
        CHECK(lane.mean_v_vel == doctest::Approx(r.mean_v_vel).epsilon(1e-12));
        CHECK(lane.mean_space_headway == doctest::Approx(r.mean_space_headway).epsilon(1e-12));
    }
    for (std::size_t c = 0; c < kNumClasses; ++c) CHECK(agg.label_counts[c] == ref.labels[c]);
    CHECK(agg.unlabeled == ref.labels[3]);

    std::size_t road_total = 0;
    for (const auto& road : aggregate_by_road(wh)) {
        const auto& counts = ref.road_labels.at({road.lane_id, road.section_id});
        for (std::size_t c = 0; c < kNumClasses; ++c) CHECK(road.label_counts[c] == counts[c]);
        road_total += road.count;
    }
    CHECK(road_total == wh.row_count());
}
