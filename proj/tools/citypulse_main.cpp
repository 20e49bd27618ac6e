// citypulse: command-line front end over the pipeline stages.
//
// Exit codes: 0 ok, 1 runtime failure, 2 usage, 3 configuration,
// 4 I/O or parse failure, 5 invariant violation.

#include "citypulse/bench.hpp"
#include "citypulse/config.hpp"
#include "citypulse/datagen.hpp"
#include "citypulse/error.hpp"
#include "citypulse/serve.hpp"
#include "citypulse/streamproc.hpp"
#include "citypulse/wire.hpp"

#include <CLI11.hpp>

#include <csignal>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

using namespace citypulse;
namespace fs = std::filesystem;

namespace {

enum Exit : int { kOk = 0, kRuntime = 1, kUsage = 2, kConfig = 3, kIo = 4, kInvariant = 5 };

const char* kLabelerFile = "labeler.model";

std::string fixed(double v, int digits) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(digits) << v;
    return os.str();
}

void print_lane_report(const LaneAggregates& agg) {
    std::cout << "lane,count,mean_v_Vel,mean_Space_Headway\n";
    for (const auto& l : agg.lanes)
        std::cout << l.lane_id << "," << l.count << "," << fixed(l.mean_v_vel, 3) << ","
                  << fixed(l.mean_space_headway, 3) << "\n";
    std::cout << "Congestion distribution:";
    for (auto l : kAllLabels) std::cout << " " << to_string(l) << "=" << agg.label_counts[index_of(l)];
    std::cout << " unlabeled=" << agg.unlabeled << "\n";
}

TrainingSet load_training_set(const fs::path& warehouse_dir) {
    if (!fs::exists(warehouse_dir / "warehouse.csv")) throw StorageError("no warehouse at " + warehouse_dir.string());
    const Warehouse wh(warehouse_dir);
    auto data = training_set(wh);
    if (data.x.empty()) throw InsufficientDataError("warehouse has no labeled rows");
    return data;
}

// ---- Subcommands ----

int cmd_generate(const AppConfig& cfg, std::uint64_t records, std::uint64_t seed, const fs::path& out) {
    auto g = cfg.pipeline.generator;
    g.num_records = records;
    g.seed = seed;
    const auto n = write_csv(generate(g), out);
    std::cout << "Wrote " << n << " records to " << out.string() << "\n";
    return kOk;
}

int cmd_ingest(const AppConfig& cfg, const fs::path& in, const fs::path& spool) {
    const auto records = read_csv(in);
    Broker broker(cfg.pipeline.broker);
    broker.create_topic(cfg.pipeline.stream.topic);
    Producer producer(broker);
    for (const auto& r : records) producer.produce(cfg.pipeline.stream.topic, record_key(r), to_json_payload(r));
    producer.flush();
    write_spool(broker, cfg.pipeline.stream.topic, spool);
    std::cout << "Ingested " << records.size() << " records in " << producer.batches_sent() << " batches into "
              << spool.string() << "\n";
    return kOk;
}

int cmd_process(const AppConfig& cfg, const fs::path& spool, const fs::path& warehouse_dir,
                const std::string& dead_letter_path) {
    const auto& stream = cfg.pipeline.stream;
    Broker broker(cfg.pipeline.broker);
    broker.create_topic(stream.topic);
    const auto loaded = load_spool(broker, stream.topic, spool);

    Warehouse warehouse(warehouse_dir);
    if (warehouse.row_count() != 0) throw ConfigError("warehouse " + warehouse_dir.string() + " is not empty");

    // The labeler sees the same cleaned records a single-process run would.
    std::vector<TrafficRecord> cleaned;
    for (int p = 0; p < broker.partition_count(stream.topic); ++p) {
        for (const auto& m : broker.read(stream.topic, p, 0, static_cast<std::size_t>(loaded) + 1)) {
            try {
                cleaned.push_back(clean(from_json_payload(m.payload)));
            } catch (const Error&) {
                // dead-lettered during processing
            }
        }
    }
    auto labeler = std::make_shared<const CongestionLabeler>(fit_canonical_labeler(std::move(cleaned), cfg.pipeline.labeler));
    save_model(warehouse_dir / kLabelerFile, {*labeler, {}});

    const auto drained = drain_topic(broker, stream, warehouse, as_labeler(labeler));
    if (!dead_letter_path.empty()) {
        std::ofstream out(dead_letter_path);
        if (!out) throw StorageError("cannot write " + dead_letter_path);
        out << "partition,offset,error,payload\n";
        for (const auto& d : drained.dead_letters)
            out << d.partition << "," << d.offset << "," << std::quoted(d.error, '"', '"') << ","
                << std::quoted(d.payload, '"', '"') << "\n";
    }
    if (drained.committed + drained.dead_letters.size() != static_cast<std::size_t>(loaded))
        throw InvariantViolation("processed " + std::to_string(drained.committed + drained.dead_letters.size()) + " of " +
                                 std::to_string(loaded) + " messages");

    std::cout << "Processed " << loaded << " messages: " << drained.committed << " warehoused, " << drained.dead_letters.size()
              << " dead letters\n";
    std::cout << "Warehouse content hash: " << warehouse.content_hash() << "\n";
    print_lane_report(aggregate_by_lane(warehouse));
    return kOk;
}

int cmd_train(const AppConfig& cfg, const fs::path& warehouse_dir, const fs::path& model_path,
              const std::string& report_path) {
    const auto labeler = load_model(warehouse_dir / kLabelerFile).labeler;
    const auto data = load_training_set(warehouse_dir);
    auto result = train_and_evaluate(data, cfg.forest, cfg.split.test_fraction, cfg.split.seed);
    save_model(model_path, {labeler, result.forest});
    std::cout << "Trained " << result.forest.trees.size() << " trees on " << result.split.train.size()
              << " rows; held-out " << result.split.test.size() << " rows\n";
    std::cout << format_report_text(result.test_report);
    if (!report_path.empty()) write_text_file(report_path, format_report_csv(result.test_report));
    return kOk;
}

int cmd_evaluate(const AppConfig& cfg, const fs::path& model_path, const std::string& warehouse_dir, bool stability,
                 const std::string& report_path) {
    const auto model = load_model(model_path);
    if (model.forest.trees.empty()) throw ConfigError(model_path.string() + " holds no trained forest");
    if (stability) {
        const auto series = sequential_batch_eval(stability_batches(cfg.pipeline.generator, model.labeler, cfg.stability),
                                                  model.forest);
        std::cout << "batch,accuracy,macro_f1\n";
        for (const auto& b : series.batches) {
            if (b.skipped)
                std::cout << b.batch_number << ",skipped,skipped\n";
            else
                std::cout << b.batch_number << "," << fixed(b.report.accuracy, 4) << "," << fixed(b.report.macro_f1, 4)
                          << "\n";
        }
        std::cout << "Combined confusion:\n" << format_report_text(report_from_confusion(series.combined));
        if (!report_path.empty()) write_text_file(report_path, format_stability_csv(series));
        return kOk;
    }
    if (warehouse_dir.empty()) throw ConfigError("evaluate needs --warehouse or --stability");
    const auto data = load_training_set(warehouse_dir);
    const auto split = stratified_split(data.y, cfg.split.test_fraction, cfg.split.seed);
    FeatureMatrix x;
    LabelVector y;
    for (auto i : split.test) {
        x.push_back(data.x[i]);
        y.push_back(data.y[i]);
    }
    auto report = evaluate(rf_predict_all(model.forest, x), y);
    report.feature_importances = feature_importances(model.forest);
    std::cout << format_report_text(report);
    if (!report_path.empty()) write_text_file(report_path, format_report_csv(report));
    return kOk;
}

int cmd_bench(AppConfig cfg, std::uint64_t records, const std::string& strategy, std::uint64_t chunk_size,
              std::uint64_t seed, const std::string& report_path, const fs::path& warehouse_dir, bool compare) {
    auto& p = cfg.pipeline;
    p.generator.num_records = records;
    p.generator.seed = seed;
    p.bench.chunk_size = chunk_size;
    p.bench.strategy = strategy_from_string(strategy);
    p.warehouse_dir = warehouse_dir;

    std::vector<std::string> violations;
    if (compare) {
        const auto c = compare_strategies(p, chunk_size, warehouse_dir);
        std::cout << format_comparison_text(c);
        if (!report_path.empty())
            write_text_file(report_path, format_comparison_csv(c) + format_metrics_csv(c.full_run) +
                                             format_metrics_csv(c.chunked_run));
        violations = check_invariants(c.full_run);
        for (auto& v : check_invariants(c.chunked_run)) violations.push_back(std::move(v));
        if (!c.content_equal) violations.push_back("full and chunked warehouse contents differ");
        if (c.full_run.peak_buffer_occupancy < c.chunked_run.peak_buffer_occupancy)
            violations.push_back("full peak occupancy is below chunked");
    } else {
        const auto m = run_pipeline(p);
        std::cout << format_metrics_text(m);
        if (!report_path.empty()) write_text_file(report_path, format_metrics_csv(m));
        violations = check_invariants(m);
    }
    for (const auto& v : violations) std::cerr << "invariant violated: " << v << "\n";
    return violations.empty() ? kOk : kInvariant;
}

HttpServer* g_server = nullptr;

void on_signal(int) {
    if (g_server) g_server->stop();
}

int cmd_serve(const AppConfig& cfg, const std::string& model_path, const std::string& warehouse_dir,
              const std::string& roads_path, const std::string& metrics_path, const std::string& host, int port) {
    ServiceState state(roads_path.empty() ? RoadDirectory::generated() : RoadDirectory::load(roads_path));
    if (!model_path.empty()) state.set_model(std::make_shared<const ModelArtifact>(load_model(model_path)));
    if (!warehouse_dir.empty()) state.load_warehouse(Warehouse(warehouse_dir));
    if (!metrics_path.empty()) {
        std::ifstream in(metrics_path);
        if (!in) throw StorageError("cannot read " + metrics_path);
        std::ostringstream buf;
        buf << in.rdbuf();
        state.metrics().publish(parse_metrics_csv(buf.str()));
    }
    (void)cfg;

    HttpServer server(state);
    const int bound = server.bind(host, port);
    if (bound < 0) throw StorageError("cannot bind " + host + ":" + std::to_string(port));
    g_server = &server;
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    std::cout << "Listening on http://" << host << ":" << bound << std::endl;
    server.listen();
    g_server = nullptr;
    return kOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"CityPulse traffic analytics pipeline"};
    app.require_subcommand(1);
    app.fallthrough();
    std::string config_path;
    app.add_option("--config", config_path, "JSON config file overriding defaults")->check(CLI::ExistingFile);

    const AppConfig defaults;

    auto* gen = app.add_subcommand("generate", "Write synthetic telemetry to CSV");
    std::uint64_t gen_records = 1000;
    std::optional<std::uint64_t> gen_seed;
    std::string gen_out;
    gen->add_option("--records", gen_records, "Number of records")->check(CLI::NonNegativeNumber);
    gen->add_option("--seed", gen_seed, "Data seed");
    gen->add_option("--out", gen_out, "Output CSV")->required();

    auto* ingest = app.add_subcommand("ingest", "Produce a CSV into the log and spool it to disk");
    std::string ingest_in, ingest_spool;
    ingest->add_option("--in", ingest_in, "Input CSV")->required();
    ingest->add_option("--spool", ingest_spool, "Spool directory")->required();

    auto* process = app.add_subcommand("process", "Process a spooled log into the warehouse");
    std::string proc_spool, proc_warehouse, proc_dead;
    process->add_option("--spool", proc_spool, "Spool directory")->required();
    process->add_option("--warehouse", proc_warehouse, "Warehouse directory")->required();
    process->add_option("--dead-letters", proc_dead, "Dead-letter summary file");

    auto* train = app.add_subcommand("train", "Train the random forest on warehouse labels");
    std::string train_warehouse, train_model, train_report;
    train->add_option("--warehouse", train_warehouse, "Warehouse directory")->required();
    train->add_option("--model", train_model, "Model artifact to write")->required();
    train->add_option("--report", train_report, "Evaluation CSV");

    auto* eval = app.add_subcommand("evaluate", "Evaluate a trained model");
    std::string eval_model, eval_warehouse, eval_report;
    bool eval_stability = false;
    eval->add_option("--model", eval_model, "Model artifact")->required();
    eval->add_option("--warehouse", eval_warehouse, "Warehouse directory (held-out split)");
    eval->add_flag("--stability", eval_stability, "Sequential batch stability run");
    eval->add_option("--report", eval_report, "Report CSV");

    auto* bench = app.add_subcommand("bench", "Run the ingestion benchmark");
    std::uint64_t bench_records = 100'000;
    std::string bench_strategy = std::string(to_string(defaults.pipeline.bench.strategy));
    std::optional<std::uint64_t> bench_chunk;
    std::optional<std::uint64_t> bench_seed;
    std::string bench_report;
    std::string bench_warehouse = "bench-warehouse";
    bool bench_compare = false;
    bench->add_option("--records", bench_records, "Number of records")->check(CLI::PositiveNumber);
    bench->add_option("--strategy", bench_strategy, "full or chunked")->check(CLI::IsMember({"full", "chunked"}));
    bench->add_option("--chunk-size", bench_chunk, "Records per chunk")->check(CLI::PositiveNumber);
    bench->add_option("--seed", bench_seed, "Data seed");
    bench->add_option("--report", bench_report, "CSV report");
    bench->add_option("--warehouse", bench_warehouse, "Warehouse directory (must be empty)");
    bench->add_flag("--compare", bench_compare, "Run both strategies and compare");

    auto* serve = app.add_subcommand("serve", "Serve predictions and summaries over HTTP");
    std::string serve_model, serve_warehouse, serve_roads, serve_metrics;
    std::optional<std::string> serve_host;
    std::optional<int> serve_port;
    serve->add_option("--model", serve_model, "Model artifact");
    serve->add_option("--warehouse", serve_warehouse, "Warehouse directory");
    serve->add_option("--roads", serve_roads, "Road directory CSV");
    serve->add_option("--metrics", serve_metrics, "Bench CSV report to expose on /metrics");
    serve->add_option("--host", serve_host, "Bind address");
    serve->add_option("--port", serve_port, "Port (0 picks one)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    try {
        const AppConfig cfg = config_path.empty() ? defaults : load_config(config_path);
        const auto& p = cfg.pipeline;
        if (*gen) return cmd_generate(cfg, gen_records, gen_seed.value_or(p.generator.seed), gen_out);
        if (*ingest) return cmd_ingest(cfg, ingest_in, ingest_spool);
        if (*process) return cmd_process(cfg, proc_spool, proc_warehouse, proc_dead);
        if (*train) return cmd_train(cfg, train_warehouse, train_model, train_report);
        if (*eval) return cmd_evaluate(cfg, eval_model, eval_warehouse, eval_stability, eval_report);
        if (*bench)
            return cmd_bench(cfg, bench_records, bench_strategy, bench_chunk.value_or(p.bench.chunk_size),
                             bench_seed.value_or(p.generator.seed), bench_report, bench_warehouse, bench_compare);
        if (*serve)
            return cmd_serve(cfg, serve_model, serve_warehouse, serve_roads, serve_metrics,
                             serve_host.value_or(cfg.serve.host), serve_port.value_or(cfg.serve.port));
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfig;
    } catch (const StorageError& e) {
        std::cerr << "I/O error: " << e.what() << "\n";
        return kIo;
    } catch (const ParseError& e) {
        std::cerr << "parse error: " << e.what() << "\n";
        return kIo;
    } catch (const InvariantViolation& e) {
        std::cerr << "invariant violated: " << e.what() << "\n";
        return kInvariant;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kRuntime;
    }
    return kUsage;
}
