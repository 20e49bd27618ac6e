#include "citypulse/config.hpp"

#include "citypulse/error.hpp"

#include <fstream>
#include <json.hpp>
#include <set>
#include <sstream>

namespace citypulse {

using nlohmann::json;

namespace {

// Reads the keys of one JSON section into existing values, rejecting keys
// that were never asked for.
class Section {
public:
    Section(const json& root, std::string name) : name_(std::move(name)) {
        if (!root.contains(name_)) return;
        node_ = &root.at(name_);
        if (!node_->is_object()) throw ConfigError("config section '" + name_ + "' must be an object");
    }

    template <typename T>
    Section& field(const char* key, T& value) {
        seen_.insert(key);
        if (!node_ || !node_->contains(key)) return *this;
        try {
            value = node_->at(key).get<T>();
        } catch (const json::exception&) {
            throw ConfigError("config key '" + name_ + "." + key + "' has the wrong type");
        }
        return *this;
    }

    template <typename T, typename Parse>
    Section& field_as(const char* key, T& value, Parse parse) {
        std::string text;
        seen_.insert(key);
        if (!node_ || !node_->contains(key)) return *this;
        field(key, text);
        value = parse(text);
        return *this;
    }

    const json* node() const { return node_; }

    void finish() const {
        if (!node_) return;
        for (const auto& [key, _] : node_->items())
            if (!seen_.count(key)) throw ConfigError("unknown config key '" + name_ + "." + key + "'");
    }

private:
    std::string name_;
    const json* node_ = nullptr;
    std::set<std::string> seen_;
};

json regimes_json(const std::array<LatentRegime, 3>& regimes) {
    json out = json::array();
    for (const auto& r : regimes) {
        out.push_back({{"vel_mean", r.vel_mean},
                       {"vel_std", r.vel_std},
                       {"headway_mean", r.headway_mean},
                       {"headway_std", r.headway_std},
                       {"acc_std", r.acc_std}});
    }
    return out;
}

void read_regimes(const json& node, std::array<LatentRegime, 3>& regimes) {
    if (!node.is_array() || node.size() != 3)
        throw ConfigError("generator.regimes must list FreeFlow, Moderate and Congested");
    for (std::size_t i = 0; i < 3; ++i) {
        json wrapper{{"regime", node[i]}};
        Section s(wrapper, "regime");
        auto& r = regimes[i];
        s.field("vel_mean", r.vel_mean)
            .field("vel_std", r.vel_std)
            .field("headway_mean", r.headway_mean)
            .field("headway_std", r.headway_std)
            .field("acc_std", r.acc_std)
            .finish();
    }
}

} // namespace

void AppConfig::validate() const {
    pipeline.generator.validate();
    pipeline.broker.validate();
    if (pipeline.stream.micro_batch_size < 1) throw ConfigError("stream.micro_batch_size must be positive");
    if (pipeline.labeler.canonical_sample < pipeline.labeler.kmeans.k)
        throw ConfigError("labeler.canonical_sample must be at least k");
    if (pipeline.bench.chunk_size < 1) throw ConfigError("bench.chunk_size must be positive");
    if (!(pipeline.bench.drain_fraction > 0.0 && pipeline.bench.drain_fraction <= 1.0))
        throw ConfigError("bench.drain_fraction must be in (0, 1]");
    if (pipeline.bench.latency_unit < 1) throw ConfigError("bench.latency_unit must be positive");
    if (pipeline.bench.lag_sample_ms < 1 || pipeline.bench.resource_sample_ms < 1)
        throw ConfigError("bench sampling intervals must be positive");
    if (forest.n_trees < 1) throw ConfigError("forest.n_trees must be positive");
    if (!(split.test_fraction > 0.0 && split.test_fraction < 1.0))
        throw ConfigError("split.test_fraction must be in (0, 1)");
    if (stability.noisy_batch > stability.batches) throw ConfigError("stability.noisy_batch is past the last batch");
    if (serve.port < 0 || serve.port > 65535) throw ConfigError("serve.port must be in [0, 65535]");
}

std::string config_to_json(const AppConfig& c) {
    const auto& p = c.pipeline;
    json j;
    j["generator"] = {{"num_records", p.generator.num_records},
                      {"seed", p.generator.seed},
                      {"regime_weights", p.generator.regime_weights},
                      {"missing_prob", p.generator.missing_prob},
                      {"lanes", p.generator.lanes},
                      {"sections", p.generator.sections},
                      {"frames_per_vehicle", p.generator.frames_per_vehicle},
                      {"start_timestamp_ms", p.generator.start_timestamp_ms},
                      {"regimes", regimes_json(p.generator.regimes)}};
    j["broker"] = {{"partitions_per_topic", p.broker.partitions_per_topic},
                   {"batch_size", p.broker.batch_size},
                   {"max_retries", p.broker.max_retries},
                   {"retry_backoff_ms", p.broker.retry_backoff_ms},
                   {"queue_capacity", p.broker.queue_capacity},
                   {"codec", std::string(to_string(p.broker.codec))}};
    j["stream"] = {{"topic", p.stream.topic},
                   {"group", p.stream.group},
                   {"micro_batch_size", p.stream.micro_batch_size},
                   {"temp_flush_records", p.stream.temp_flush_records}};
    j["labeler"] = {{"k", p.labeler.kmeans.k},
                    {"seed", p.labeler.kmeans.seed},
                    {"max_iter", p.labeler.kmeans.max_iter},
                    {"tol", p.labeler.kmeans.tol},
                    {"restarts", p.labeler.kmeans.restarts},
                    {"transfer_moves", p.labeler.kmeans.transfer_moves},
                    {"canonical_sample", p.labeler.canonical_sample}};
    j["bench"] = {{"strategy", std::string(to_string(p.bench.strategy))},
                  {"chunk_size", p.bench.chunk_size},
                  {"drain_fraction", p.bench.drain_fraction},
                  {"latency_unit", p.bench.latency_unit},
                  {"lag_sample_ms", p.bench.lag_sample_ms},
                  {"resource_sample_ms", p.bench.resource_sample_ms}};
    j["forest"] = {{"n_trees", c.forest.n_trees},
                   {"seed", c.forest.seed},
                   {"max_depth", c.forest.tree.max_depth},
                   {"min_leaf", c.forest.tree.min_leaf},
                   {"features_per_split", c.forest.tree.features_per_split},
                   {"threads", c.forest.threads}};
    j["split"] = {{"test_fraction", c.split.test_fraction}, {"seed", c.split.seed}};
    j["stability"] = {{"batches", c.stability.batches},
                      {"batch_records", c.stability.batch_records},
                      {"noisy_batch", c.stability.noisy_batch},
                      {"noise_intensity", c.stability.noise_intensity},
                      {"seed", c.stability.seed}};
    j["serve"] = {{"host", c.serve.host}, {"port", c.serve.port}};
    return j.dump(2) + "\n";
}

AppConfig config_from_json(std::string_view text, AppConfig c) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError("config must be a JSON object");

    static const std::set<std::string> kSections{"generator", "broker", "stream", "labeler", "bench",
                                                 "forest",    "split",  "stability", "serve"};
    for (const auto& [key, _] : j.items())
        if (!kSections.count(key)) throw ConfigError("unknown config section '" + key + "'");

    auto& p = c.pipeline;
    Section gen(j, "generator");
    gen.field("num_records", p.generator.num_records)
        .field("seed", p.generator.seed)
        .field("regime_weights", p.generator.regime_weights)
        .field("missing_prob", p.generator.missing_prob)
        .field("lanes", p.generator.lanes)
        .field("sections", p.generator.sections)
        .field("frames_per_vehicle", p.generator.frames_per_vehicle)
        .field("start_timestamp_ms", p.generator.start_timestamp_ms);
    json regimes;
    gen.field("regimes", regimes);
    if (!regimes.is_null()) read_regimes(regimes, p.generator.regimes);
    gen.finish();

    Section(j, "broker")
        .field("partitions_per_topic", p.broker.partitions_per_topic)
        .field("batch_size", p.broker.batch_size)
        .field("max_retries", p.broker.max_retries)
        .field("retry_backoff_ms", p.broker.retry_backoff_ms)
        .field("queue_capacity", p.broker.queue_capacity)
        .field_as("codec", p.broker.codec, [](const std::string& s) { return codec_from_string(s); })
        .finish();
    Section(j, "stream")
        .field("topic", p.stream.topic)
        .field("group", p.stream.group)
        .field("micro_batch_size", p.stream.micro_batch_size)
        .field("temp_flush_records", p.stream.temp_flush_records)
        .finish();
    Section(j, "labeler")
        .field("k", p.labeler.kmeans.k)
        .field("seed", p.labeler.kmeans.seed)
        .field("max_iter", p.labeler.kmeans.max_iter)
        .field("tol", p.labeler.kmeans.tol)
        .field("restarts", p.labeler.kmeans.restarts)
        .field("transfer_moves", p.labeler.kmeans.transfer_moves)
        .field("canonical_sample", p.labeler.canonical_sample)
        .finish();
    Section(j, "bench")
        .field_as("strategy", p.bench.strategy, [](const std::string& s) { return strategy_from_string(s); })
        .field("chunk_size", p.bench.chunk_size)
        .field("drain_fraction", p.bench.drain_fraction)
        .field("latency_unit", p.bench.latency_unit)
        .field("lag_sample_ms", p.bench.lag_sample_ms)
        .field("resource_sample_ms", p.bench.resource_sample_ms)
        .finish();
    Section(j, "forest")
        .field("n_trees", c.forest.n_trees)
        .field("seed", c.forest.seed)
        .field("max_depth", c.forest.tree.max_depth)
        .field("min_leaf", c.forest.tree.min_leaf)
        .field("features_per_split", c.forest.tree.features_per_split)
        .field("threads", c.forest.threads)
        .finish();
    Section(j, "split").field("test_fraction", c.split.test_fraction).field("seed", c.split.seed).finish();
    Section(j, "stability")
        .field("batches", c.stability.batches)
        .field("batch_records", c.stability.batch_records)
        .field("noisy_batch", c.stability.noisy_batch)
        .field("noise_intensity", c.stability.noise_intensity)
        .field("seed", c.stability.seed)
        .finish();
    Section(j, "serve").field("host", c.serve.host).field("port", c.serve.port).finish();

    c.validate();
    return c;
}

AppConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return config_from_json(buf.str());
}

} // namespace citypulse
