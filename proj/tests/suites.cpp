#include "suites.hpp"

#include "oracles.hpp"

#include "citypulse/codec.hpp"
#include "citypulse/datagen.hpp"
#include "citypulse/learner.hpp"
#include "citypulse/mlog.hpp"

#include <cmath>
#include <map>
#include <memory>
#include <random>

namespace citypulse::suites {

void SuiteResult::check(bool pass, const std::string& what) {
    if (pass) return;
    if (failures++ == 0) first_failure = what;
}

std::string SuiteResult::summary() const {
    std::string s = std::to_string(cases - std::min(cases, failures)) + "/" + std::to_string(cases) + " cases";
    if (failures) s += ", first failure: " + first_failure;
    return s;
}

namespace {

bool close(double a, double b, double rel) { return std::abs(a - b) <= rel * std::max({1.0, std::abs(a), std::abs(b)}); }

FeatureMatrix random_points(std::mt19937_64& rng, std::size_t n) {
    std::normal_distribution<double> nd(0.0, 1.0);
    FeatureMatrix x(n);
    for (auto& row : x)
        for (auto& v : row) v = nd(rng);
    return x;
}

BrokerConfig quick_config() {
    BrokerConfig c;
    c.retry_backoff_ms = 0;
    return c;
}

std::string random_bytes(std::mt19937_64& rng, std::size_t n) {
    std::string s(n, '\0');
    // Compressible runs or noise, so both codec paths see both.
    const bool runs = rng() % 2 == 0;
    for (std::size_t i = 0; i < n; ++i) s[i] = static_cast<char>(runs ? (i / 17) % 7 + 'a' : rng() & 0xFF);
    return s;
}

} // namespace

SuiteResult kmeans_exhaustive(std::size_t instances, std::uint64_t seed) {
    SuiteResult r;
    std::mt19937_64 rng(seed);
    for (std::size_t inst = 0; inst < instances; ++inst) {
        const std::size_t n = 4 + rng() % 7;
        const auto x = random_points(rng, n);
        const auto m = kmeans_fit(x, {.k = 3, .seed = rng(), .restarts = 20});
        const auto opt = oracle::best_partition(x, 3);
        ++r.cases;
        r.check(close(m.inertia, opt.sse, 1e-9), "instance " + std::to_string(inst) + ": inertia " +
                                                     std::to_string(m.inertia) + " vs optimum " + std::to_string(opt.sse));
    }
    return r;
}

SuiteResult forest_tally(std::size_t inputs, std::uint64_t seed) {
    SuiteResult r;
    std::mt19937_64 rng(seed);
    const auto x = random_points(rng, 600);
    LabelVector y;
    for (const auto& p : x) y.push_back(label_at(static_cast<std::size_t>(p[0] + p[1] > 0) + (p[2] > 1)));
    const auto model = rf_fit(x, y, {.n_trees = 25, .seed = 1, .tree = {.max_depth = 6}});
    std::size_t i = 0;
    for (const auto& p : random_points(rng, inputs)) {
        ++r.cases;
        const auto v = model.votes(p);
        r.check(rf_predict(model, p) == oracle::tally_votes(model, p) && v[0] + v[1] + v[2] == 25,
                "input " + std::to_string(i));
        ++i;
    }
    return r;
}

SuiteResult evaluate_worked_example() {
    using L = CongestionLabel;
    SuiteResult r;
    const LabelVector truth{L::Low, L::Low, L::High, L::High};
    const LabelVector pred{L::Low, L::High, L::High, L::High};
    const auto e = evaluate(pred, truth);
    const auto hand = oracle::hand_metrics(pred, truth);
    auto expect = [&](double got, double want, const char* what) {
        ++r.cases;
        r.check(close(got, want, 1e-12), std::string(what) + " = " + std::to_string(got));
    };
    expect(e.accuracy, 0.75, "accuracy");
    expect(e.per_class[0].precision, 1.0, "Low precision");
    expect(e.per_class[0].recall, 0.5, "Low recall");
    expect(e.per_class[0].f1, 2.0 / 3.0, "Low F1");
    expect(e.per_class[2].precision, 2.0 / 3.0, "High precision");
    expect(e.per_class[2].recall, 1.0, "High recall");
    expect(e.per_class[2].f1, 0.8, "High F1");
    expect(e.per_class[1].f1, 0.0, "Medium F1");
    expect(e.macro_f1, (2.0 / 3.0 + 0.8) / 3.0, "macro F1");
    expect(e.macro_f1, hand.macro_f1, "macro F1 vs hand oracle");
    ++r.cases;
    r.check(std::abs(e.macro_f1 - 0.4889) < 1e-4, "macro F1 is not 0.4889");
    return r;
}

SuiteResult codec_round_trip(std::size_t cases, std::uint64_t seed) {
    SuiteResult r;
    std::mt19937_64 rng(seed);
    for (std::size_t round = 0; round < cases; ++round) {
        const std::size_t n = 1 + rng() % 8;
        std::vector<BatchEntry> entries;
        for (std::size_t i = 0; i < n; ++i) {
            // Every 40th round carries payloads up to 1 MB.
            const std::size_t len = round % 40 == 0 ? rng() % (1u << 20) + 1 : rng() % 2000;
            entries.push_back({random_bytes(rng, rng() % 12), random_bytes(rng, len)});
        }
        for (auto codec : {CodecId::None, CodecId::BlockCompressed}) {
            const auto bytes = encode_batch(entries, codec);
            ++r.cases;
            r.check(decode_batch_header(bytes).codec == codec && decode_batch(bytes) == entries &&
                        encode_batch(decode_batch(bytes), codec) == bytes,
                    "round " + std::to_string(round) + " codec " + std::string(to_string(codec)));
        }
    }
    return r;
}

SuiteResult csv_round_trip(std::size_t cases, std::uint64_t seed) {
    SuiteResult r;
    std::mt19937_64 rng(seed);
    for (std::size_t round = 0; round < cases; ++round) {
        GeneratorConfig c;
        c.num_records = 1 + rng() % 60;
        c.seed = rng();
        c.missing_prob = 0.2 * static_cast<double>(rng() % 100) / 100.0;
        bool ok = true;
        for (const auto& rec : generate(c)) {
            const auto row = to_csv_row(rec);
            const auto back = parse_csv_row(row, 2);
            ok = ok && back == rec && to_csv_row(back) == row;
        }
        ++r.cases;
        r.check(ok, "round " + std::to_string(round));
    }
    return r;
}

SuiteResult broker_fifo(std::size_t cases, std::uint64_t seed) {
    SuiteResult r;
    std::mt19937_64 rng(seed);
    for (std::size_t round = 0; round < cases; ++round) {
        BrokerConfig c = quick_config();
        c.batch_size = 1 + rng() % 40;
        c.codec = rng() % 2 ? CodecId::BlockCompressed : CodecId::None;
        Broker broker(c);
        const int parts = 1 + static_cast<int>(rng() % 5);
        broker.create_topic("t", parts);
        Producer producer(broker);
        const int n = static_cast<int>(rng() % 150);
        const int keys = 1 + static_cast<int>(rng() % 12);
        std::map<std::string, std::vector<std::string>> sent;
        for (int i = 0; i < n; ++i) {
            std::string key = "v" + std::to_string(rng() % static_cast<unsigned>(keys));
            std::string payload = key + "#" + std::to_string(i);
            sent[key].push_back(payload);
            producer.produce("t", key, payload);
        }
        producer.flush();

        Consumer consumer(broker, "g", "t");
        std::map<std::string, std::vector<std::string>> got;
        std::size_t consumed = 0;
        for (int guard = 0; guard < 10'000; ++guard) {
            const auto msgs = consumer.poll(1 + rng() % 30);
            if (msgs.empty()) break;
            // Commit a random prefix of what was polled; the rest is re-polled.
            const std::size_t keep = 1 + rng() % msgs.size();
            std::map<int, std::int64_t> next;
            for (std::size_t i = 0; i < keep; ++i) {
                const auto& m = msgs[i];
                if (next.contains(m.partition) && next[m.partition] != m.offset) continue;
                next[m.partition] = m.offset + 1;
                got[m.key].push_back(m.payload);
                ++consumed;
            }
            consumer.commit(next);
        }
        ++r.cases;
        r.check(consumed == static_cast<std::size_t>(n) && got == sent && consumer.total_lag() == 0,
                "round " + std::to_string(round));
    }
    return r;
}

SuiteResult broker_offsets(std::size_t cases, std::uint64_t seed) {
    SuiteResult r;
    std::mt19937_64 rng(seed);
    for (std::size_t round = 0; round < cases; ++round) {
        BrokerConfig c = quick_config();
        c.batch_size = 1 + rng() % 25;
        Broker broker(c);
        const int parts = 1 + static_cast<int>(rng() % 4);
        broker.create_topic("t", parts);
        Producer producer(broker);
        std::vector<std::int64_t> last(static_cast<std::size_t>(parts), -1);
        bool ok = true;
        producer.on_delivery([&](const DeliveryReport& d) {
            auto& l = last[static_cast<std::size_t>(d.partition)];
            ok = ok && d.offset == l + 1;
            l = d.offset;
        });
        const int n = static_cast<int>(rng() % 120);
        for (int i = 0; i < n; ++i) {
            producer.produce("t", std::to_string(rng() % 20), "p");
            if (rng() % 10 == 0) producer.flush();
        }
        producer.flush();
        std::int64_t total = 0;
        for (int p = 0; p < parts; ++p) {
            const auto msgs = broker.read("t", p, 0, 1000);
            for (std::size_t i = 0; i < msgs.size(); ++i)
                ok = ok && msgs[i].offset == static_cast<std::int64_t>(i) && msgs[i].partition == p;
            ok = ok && static_cast<std::int64_t>(msgs.size()) == broker.high_watermark("t", p) &&
                 last[static_cast<std::size_t>(p)] + 1 == broker.high_watermark("t", p);
            total += static_cast<std::int64_t>(msgs.size());
        }
        ++r.cases;
        r.check(ok && total == n, "round " + std::to_string(round));
    }
    return r;
}

SuiteResult broker_lag(std::size_t cases, std::uint64_t seed) {
    SuiteResult r;
    std::mt19937_64 rng(seed);
    for (std::size_t round = 0; round < cases; ++round) {
        BrokerConfig c = quick_config();
        c.batch_size = 1 + rng() % 10;
        Broker broker(c);
        const int parts = 1 + static_cast<int>(rng() % 4);
        broker.create_topic("t", parts);
        Producer producer(broker);
        Consumer consumer(broker, "g", "t");
        std::vector<std::int64_t> committed(static_cast<std::size_t>(parts), 0);
        bool ok = true;
        for (int step = 0; step < 30; ++step) {
            if (rng() % 2) {
                for (int i = 0, m = static_cast<int>(rng() % 8); i < m; ++i) producer.produce("t", std::to_string(rng()), "x");
                if (rng() % 2) producer.flush();
            } else {
                const int p = static_cast<int>(rng() % static_cast<unsigned>(parts));
                const auto hw = broker.high_watermark("t", p);
                auto& cur = committed[static_cast<std::size_t>(p)];
                const auto target = cur + static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(hw - cur + 1));
                consumer.commit({{p, target}});
                cur = target;
            }
            const auto lag = consumer.lag();
            std::int64_t total = 0;
            for (int p = 0; p < parts; ++p) {
                const auto expect = broker.high_watermark("t", p) - committed[static_cast<std::size_t>(p)];
                ok = ok && lag.at(p) == expect && expect >= 0;
                total += expect;
            }
            ok = ok && consumer.total_lag() == total;
        }
        ++r.cases;
        r.check(ok, "round " + std::to_string(round));
    }
    return r;
}

SuiteResult broker_retry(std::size_t cases, std::uint64_t seed) {
    SuiteResult r;
    std::mt19937_64 rng(seed);
    for (std::size_t round = 0; round < cases; ++round) {
        BrokerConfig c = quick_config();
        c.batch_size = 1 + rng() % 20;
        const int parts = 1 + static_cast<int>(rng() % 3);
        std::vector<std::pair<std::string, std::string>> messages;
        for (int i = 0, n = static_cast<int>(rng() % 80); i < n; ++i)
            messages.emplace_back(std::to_string(rng() % 9), std::to_string(rng()));

        auto run = [&](bool faults, std::uint64_t fault_seed) {
            Broker broker(c);
            broker.create_topic("t", parts);
            if (faults) {
                // Each append fails its first k < max_retries attempts.
                auto frng = std::make_shared<std::mt19937_64>(fault_seed);
                auto k = std::make_shared<int>(0);
                broker.set_fault_injector([frng, k](std::string_view, int, int attempt) {
                    if (attempt == 1) *k = static_cast<int>((*frng)() % 3);
                    return attempt <= *k;
                });
            }
            Producer producer(broker);
            for (const auto& [key, payload] : messages) producer.produce("t", key, payload);
            producer.flush();
            std::vector<std::vector<std::pair<std::string, std::string>>> content;
            for (int p = 0; p < parts; ++p) {
                content.emplace_back();
                for (const auto& m : broker.read("t", p, 0, static_cast<std::size_t>(broker.high_watermark("t", p))))
                    content.back().emplace_back(m.key, m.payload);
            }
            return content;
        };
        ++r.cases;
        r.check(run(true, rng()) == run(false, 0), "round " + std::to_string(round));
    }
    return r;
}

} // namespace citypulse::suites
