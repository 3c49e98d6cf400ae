#pragma once

// Desk-scale experiment driver behind `fedwrap simulate`: data, partition, local model
// pre-training, an in-process federation, evaluation on the balanced test set and the
// report bundle.
//
// Manifest (JSON):
//   {"name": "bank-noniid-10",
//    "data": {"csv": "bank-full.csv", "schema": "bank_schema.json"}   // or
//    "data": {"surrogate_rows": 20000, "positive_rate": 0.117},
//    "partition": {"mode": "bank", "alpha": 0.5, "n_clients": 10, "test_fraction": 0.05},
//    "local_models": [{"arch": "LR", "fraction": 0.4}, {"arch": "MLP-16", "fraction": 0.2}, ...],
//    "local_train": {"learning_rate": 0.05, "batch_size": 32, "local_epochs": 10},
//    "mode": "stacking", "translator": "MLP-16", "feature_mode": "probs",
//    "fusion_weight": 0.5, "threshold": 0.5,
//    "train_config": {"rounds": 10, "local_epochs": 10, "learning_rate": 0.1, "batch_size": 32},
//    "timeout_ms": 30000,
//    "baseline": {"model": "MLP-16"},                                  // or false
//    "seeds": [1, 2, 3], "out": "runs/bank-noniid-10"}

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedwrap/bank_surrogate.hpp"
#include "fedwrap/config.hpp"
#include "fedwrap/federation.hpp"
#include "fedwrap/metrics.hpp"
#include "fedwrap/partition.hpp"
#include "fedwrap/simulate.hpp"

namespace fedwrap {

struct ArchShare {
    TranslatorChoice arch;
    double fraction = 0.0;
};

struct RunManifest {
    std::string name = "experiment";
    std::string data_csv; // empty: synthetic bank surrogate
    std::string schema_path;
    std::size_t surrogate_rows = 20000;
    double positive_rate = 0.117;
    PartitionSpec partition{10, 0.5, PartitionMode::BankImbalanced, 0, 0.05};
    std::vector<ArchShare> local_models{{{ModelKind::LogisticRegression, 0}, 0.4},
                                        {{ModelKind::Mlp3, 16}, 0.2},
                                        {{ModelKind::Mlp3, 18}, 0.2},
                                        {{ModelKind::Mlp3, 24}, 0.2}};
    TrainHp local_train{0.05, 32, 10, 0.0, 0};
    WrapperMode mode = WrapperMode::Stacking;
    TranslatorChoice translator{ModelKind::Mlp3, 16};
    FeatureMode feature_mode;
    double fusion_weight = 0.5;
    double threshold = 0.5;
    std::size_t rounds = 10;
    TrainHp federated_train{0.1, 32, 10, 0.0, 0};
    std::uint64_t timeout_ms = 30000;
    std::optional<TranslatorChoice> baseline = TranslatorChoice{ModelKind::Mlp3, 16};
    std::vector<std::uint64_t> seeds{1};
    std::string out_dir;

    void validate() const {
        partition.validate();
        if (local_models.empty())
            throw ConfigError("manifest: local_models is empty");
        double total = 0.0;
        for (const auto& s : local_models) {
            if (!(s.fraction >= 0.0))
                throw ConfigError("manifest: local model fractions must be non-negative");
            total += s.fraction;
        }
        if (std::abs(total - 1.0) > 1e-9)
            throw ConfigError("manifest: local model fractions sum to " + std::to_string(total) +
                              ", expected 1");
        local_train.validate();
        federated_train.validate();
        if (rounds < 1)
            throw ConfigError("manifest: rounds must be >= 1");
        if (seeds.empty())
            throw ConfigError("manifest: no seeds");
        if (!(threshold > 0.0 && threshold < 1.0) || !(fusion_weight >= 0.0 && fusion_weight <= 1.0))
            throw ConfigError("manifest: threshold or fusion_weight out of range");
        if (!data_csv.empty() && schema_path.empty())
            throw ConfigError("manifest: a data csv needs a schema file");
    }
};

inline RunManifest manifest_from_json(const json& j, const std::filesystem::path& base_dir = {}) {
    if (!j.is_object())
        throw ConfigError("manifest must be a JSON object");
    RunManifest m;
    try {
        m.name = j.value("name", m.name);
        if (j.contains("data")) {
            const auto& d = j.at("data");
            if (d.contains("csv")) {
                m.data_csv = detail::resolve_path(d.at("csv").get<std::string>(), base_dir);
                m.schema_path = detail::resolve_path(d.value("schema", std::string()), base_dir);
            }
            m.surrogate_rows = d.value("surrogate_rows", m.surrogate_rows);
            m.positive_rate = d.value("positive_rate", m.positive_rate);
        }
        if (j.contains("partition")) {
            const auto& p = j.at("partition");
            if (p.contains("mode"))
                m.partition.mode = partition_mode_from_string(p.at("mode").get<std::string>());
            m.partition.alpha = p.value("alpha", m.partition.alpha);
            m.partition.n_clients = p.value("n_clients", m.partition.n_clients);
            m.partition.test_fraction = p.value("test_fraction", m.partition.test_fraction);
        }
        if (j.contains("local_models")) {
            m.local_models.clear();
            for (const auto& e : j.at("local_models"))
                m.local_models.push_back({parse_translator(e.at("arch")), e.at("fraction").get<double>()});
        }
        if (j.contains("local_train"))
            m.local_train = parse_train_config(j.at("local_train"), m.local_train);
        m.mode = wrapper_mode_from_string(j.value("mode", to_string(m.mode)));
        if (j.contains("translator"))
            m.translator = parse_translator(j.at("translator"));
        if (j.contains("feature_mode"))
            m.feature_mode = parse_feature_mode(j.at("feature_mode"));
        m.fusion_weight = j.value("fusion_weight", m.fusion_weight);
        m.threshold = j.value("threshold", m.threshold);
        if (j.contains("train_config")) {
            m.federated_train = parse_train_config(j.at("train_config"), m.federated_train);
            m.rounds = j.at("train_config").value("rounds", m.rounds);
        }
        m.timeout_ms = j.value("timeout_ms", m.timeout_ms);
        if (j.contains("baseline")) {
            const auto& b = j.at("baseline");
            if (b.is_boolean() && !b.get<bool>())
                m.baseline.reset();
            else if (b.is_object() && b.contains("model"))
                m.baseline = parse_translator(b.at("model"));
        }
        if (j.contains("seeds"))
            m.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
        if (j.contains("out"))
            m.out_dir = detail::resolve_path(j.at("out").get<std::string>(), base_dir);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("manifest: ") + e.what());
    }
    m.validate();
    return m;
}

inline RunManifest load_manifest(const std::string& path) {
    return manifest_from_json(parse_json_file(path), std::filesystem::path(path).parent_path());
}

inline json manifest_to_json(const RunManifest& m) {
    json locals = json::array();
    for (const auto& s : m.local_models)
        locals.push_back({{"arch", to_string(s.arch)}, {"fraction", s.fraction}});
    auto hp = [](const TrainHp& h) {
        return json{{"learning_rate", h.learning_rate},
                    {"batch_size", h.batch_size},
                    {"local_epochs", h.local_epochs},
                    {"l2", h.l2}};
    };
    json data = m.data_csv.empty()
                    ? json{{"surrogate_rows", m.surrogate_rows}, {"positive_rate", m.positive_rate}}
                    : json{{"csv", m.data_csv}, {"schema", m.schema_path}};
    json train = hp(m.federated_train);
    train["rounds"] = m.rounds;
    return {{"name", m.name},
            {"data", data},
            {"partition",
             {{"mode", to_string(m.partition.mode)},
              {"alpha", m.partition.alpha},
              {"n_clients", m.partition.n_clients},
              {"test_fraction", m.partition.test_fraction}}},
            {"local_models", locals},
            {"local_train", hp(m.local_train)},
            {"mode", to_string(m.mode)},
            {"translator", to_string(m.translator)},
            {"feature_mode", feature_mode_to_json(m.feature_mode)},
            {"fusion_weight", m.fusion_weight},
            {"threshold", m.threshold},
            {"train_config", train},
            {"timeout_ms", m.timeout_ms},
            {"baseline", m.baseline ? json{{"model", to_string(*m.baseline)}} : json(false)},
            {"seeds", m.seeds}};
}

/// Client k's local architecture: largest-remainder counts, assigned in manifest order.
inline std::vector<TranslatorChoice> assign_architectures(const std::vector<ArchShare>& mix,
                                                          std::size_t n_clients) {
    std::vector<double> shares;
    for (const auto& s : mix)
        shares.push_back(s.fraction);
    const auto counts = largest_remainder(shares, n_clients);
    std::vector<TranslatorChoice> out;
    for (std::size_t i = 0; i < mix.size(); ++i)
        out.insert(out.end(), counts[i], mix[i].arch);
    return out;
}

/// The encoded table for one seed: the CSV if given, else a fresh surrogate.
inline Dataset experiment_data(const RunManifest& m, std::uint64_t seed) {
    if (!m.data_csv.empty()) {
        if (!std::filesystem::exists(m.schema_path))
            throw ConfigError("schema file " + m.schema_path + " does not exist");
        return load_csv(m.data_csv, load_schema(m.schema_path));
    }
    return encode_table(make_bank_surrogate(m.surrogate_rows, derive_seed(seed, 0x64617461), // "data"
                                            m.positive_rate),
                        bank_schema(), "surrogate");
}

inline Model train_local_model(const TranslatorChoice& arch, const Dataset& data, const TrainHp& hp,
                               std::uint64_t seed) {
    TrainHp h = hp;
    h.seed = derive_seed(seed, 2);
    return sgd_train(init_model(arch.sized(data.in_dim, data.n_classes), derive_seed(seed, 1)), data, h);
}

/// Time of the first trace point at or above `level`.
inline std::optional<double> time_to_level(const std::vector<TracePoint>& trace, double level) {
    for (const auto& p : trace)
        if (p.accuracy >= level)
            return p.elapsed_ms;
    return std::nullopt;
}

struct SeedRun {
    std::uint64_t seed = 0;
    Partition partition;
    std::vector<ClientEvaluation> evaluations;
    std::vector<RoundLogRow> round_log;
    std::vector<TracePoint> wrapper_trace;    // mean fused accuracy over clients per round
    std::vector<TracePoint> translator_trace; // same, translator output alone
    std::vector<TracePoint> baseline_trace; // FedAvg from scratch
    double local_accuracy = 0.0;            // mean local-model accuracy over clients
};

struct ExperimentResult {
    RunManifest manifest;
    std::vector<SeedRun> runs;
    MetricsReport report; // clients of all seeds pooled
};

namespace detail {

inline ClassificationMetrics score(const std::vector<int>& truth, const std::vector<int>& pred,
                                   std::size_t n_classes) {
    return metrics_from_confusion(confusion_from_labels(truth, pred, n_classes), default_task(n_classes));
}

/// Test-set view of one client, reused by every per-round evaluation.
struct ClientTestView {
    std::vector<std::vector<double>> local_probs;
    Dataset stacked; // stacking mode only
};

} // namespace detail

inline SeedRun run_seed(const RunManifest& m, std::uint64_t seed) {
    SeedRun run;
    run.seed = seed;
    PartitionSpec ps = m.partition;
    ps.seed = seed;
    run.partition = make_partition(experiment_data(m, seed), ps);
    const auto& part = run.partition;
    const auto& test = part.test_set;
    const std::size_t n = part.client_datasets.size();
    const std::size_t k_classes = test.n_classes;
    const auto archs = assign_architectures(m.local_models, n);

    std::vector<WrapperConfig> cfgs(n);
    std::vector<detail::ClientTestView> views(n);
    for (std::size_t k = 0; k < n; ++k) {
        auto& c = cfgs[k];
        const auto& data = part.client_datasets[k];
        c.local_model = LocalModelHandle::from_model(
            train_local_model(archs[k], data, m.local_train, derive_seed(seed, 1000 + k)));
        c.train_dataset = data;
        c.client_id = client_name(k);
        for (std::size_t o = 0; o < n; ++o)
            if (o != k)
                c.clients.push_back(client_name(o));
        c.feature_mode = m.feature_mode;
        c.fusion_weight = m.fusion_weight;
        c.threshold = m.threshold;
        c.train = m.federated_train;
        c.train.seed = derive_seed(seed, 3000 + k);
        c.translator = m.translator.sized(c.stack_in_dim(), k_classes);
        for (std::size_t i = 0; i < test.n_rows(); ++i)
            views[k].local_probs.push_back(c.local_model.predict_proba(test.row(i)));
        if (m.mode == WrapperMode::Stacking)
            views[k].stacked = stack_dataset(c, test);
    }

    FederationPlan plan;
    plan.rounds = m.rounds;
    plan.hp = m.federated_train;
    plan.hp.seed = seed;
    plan.timeout_ms = m.timeout_ms;
    if (m.mode == WrapperMode::Stacking)
        plan.translator_spec = cfgs.front().translator;

    std::vector<double> translator_acc;
    SimulationOptions opt;
    opt.round_hook = [&](std::size_t, const Params& global) -> std::optional<double> {
        std::size_t hit = 0, hit_t = 0;
        for (std::size_t k = 0; k < n; ++k) {
            Model t = init_model(cfgs[k].translator, 0);
            t.params = global;
            for (std::size_t i = 0; i < test.n_rows(); ++i) {
                const auto fed = forward(t, views[k].stacked.row(i)).probs;
                const auto fused = aggregate_outputs(views[k].local_probs[i], fed, m.fusion_weight);
                hit += decide_label(fused, m.threshold) == test.labels[i];
                hit_t += decide_label(fed, m.threshold) == test.labels[i];
            }
        }
        const double total = static_cast<double>(n * test.n_rows());
        translator_acc.push_back(static_cast<double>(hit_t) / total);
        return static_cast<double>(hit) / total;
    };
    auto sim = simulate(cfgs, plan, m.mode, opt);
    run.round_log = sim.server.log;
    for (std::size_t r = 0; r < run.round_log.size(); ++r) {
        const auto& row = run.round_log[r];
        run.wrapper_trace.push_back({row.round, row.elapsed_ms, row.test_accuracy.value_or(0.0)});
        run.translator_trace.push_back({row.round, row.elapsed_ms, translator_acc.at(r)});
    }

    double local_acc = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        const auto& cfg = cfgs[k];
        const auto& state = sim.states.at(cfg.client_id);
        std::vector<int> pl, pw, pt;
        for (std::size_t i = 0; i < test.n_rows(); ++i) {
            const auto x = test.row(i);
            pl.push_back(decide_label(views[k].local_probs[i], m.threshold));
            pw.push_back(wrapper_infer(cfg, state, x).label);
            pt.push_back(decide_label(federated_predict(cfg, state, x), m.threshold));
        }
        ClientEvaluation e{cfg.client_id, cfg.local_model.descriptor,
                           detail::score(test.labels, pl, k_classes),
                           detail::score(test.labels, pw, k_classes),
                           detail::score(test.labels, pt, k_classes)};
        local_acc += e.local.accuracy;
        run.evaluations.push_back(std::move(e));
    }
    run.local_accuracy = local_acc / static_cast<double>(n);

    if (m.baseline) {
        FederationPlan bp = plan;
        bp.hp.seed = derive_seed(seed, 0x62617365); // "base"
        const auto spec = m.baseline->sized(test.in_dim, k_classes);
        run.baseline_trace = fedavg_from_scratch(part, spec, bp).trace;
    }
    return run;
}

inline MetricsReport pooled_report(const RunManifest& m, const std::vector<SeedRun>& runs) {
    std::vector<ClientEvaluation> all;
    for (const auto& r : runs)
        all.insert(all.end(), r.evaluations.begin(), r.evaluations.end());
    auto rep = build_report(to_string(m.partition.mode), std::move(all));
    rep.n_clients = m.partition.n_clients;
    return rep;
}

inline ExperimentResult run_experiment(const RunManifest& m) {
    m.validate();
    ExperimentResult res;
    res.manifest = m;
    for (auto seed : m.seeds)
        res.runs.push_back(run_seed(m, seed));
    res.report = pooled_report(m, res.runs);
    return res;
}

// ---------------------------------------------------------------------------------------
// Report bundle

/// `seed,pipeline,round,elapsed_ms,accuracy`; pipeline is wrapper, translator or fedavg.
inline std::string timing_csv(const std::vector<SeedRun>& runs) {
    std::string out = "seed,pipeline,round,elapsed_ms,accuracy\n";
    for (const auto& r : runs)
        for (const auto& [name, trace] : {std::pair{"wrapper", &r.wrapper_trace},
                                       {"translator", &r.translator_trace},
                                       {"fedavg", &r.baseline_trace}})
            for (const auto& p : *trace)
                out += std::to_string(r.seed) + "," + name + "," + std::to_string(p.round) + "," +
                       format_double(p.elapsed_ms) + "," + format_double(p.accuracy) + "\n";
    return out;
}

/// Time for each pipeline to reach the mean local-model accuracy; empty when never reached.
inline std::string timing_summary_csv(const std::vector<SeedRun>& runs) {
    auto opt = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string(); };
    auto last = [](const std::vector<TracePoint>& t) {
        return t.empty() ? std::string() : format_double(t.back().accuracy);
    };
    std::string out = "seed,local_accuracy,wrapper_time_to_local_ms,fedavg_time_to_local_ms,"
                      "wrapper_final_accuracy,fedavg_final_accuracy\n";
    for (const auto& r : runs)
        out += std::to_string(r.seed) + "," + format_double(r.local_accuracy) + "," +
               opt(time_to_level(r.wrapper_trace, r.local_accuracy)) + "," +
               opt(time_to_level(r.baseline_trace, r.local_accuracy)) + "," + last(r.wrapper_trace) +
               "," + last(r.baseline_trace) + "\n";
    return out;
}

/// Writes the bundle. report*.csv, per_client_metrics.csv, histogram.csv and partition.json
/// are byte-identical across reruns; round_log.csv and timing*.csv carry wall-clock times.
inline void write_bundle(const ExperimentResult& res, const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    const fs::path out(out_dir);
    write_file((out / "report.csv").string(), report_csv({res.report}));
    write_file((out / "report_translator.csv").string(), report_csv({res.report}, true));
    write_file((out / "timing.csv").string(), timing_csv(res.runs));
    write_file((out / "timing_summary.csv").string(), timing_summary_csv(res.runs));
    write_file((out / "manifest.json").string(), manifest_to_json(res.manifest).dump(2) + "\n");
    for (const auto& r : res.runs) {
        const auto dir = out / ("seed_" + std::to_string(r.seed));
        fs::create_directories(dir);
        auto rep = build_report(to_string(res.manifest.partition.mode), r.evaluations);
        write_file((dir / "per_client_metrics.csv").string(), per_client_csv(rep));
        write_file((dir / "round_log.csv").string(), round_log_csv(r.round_log));
        write_file((dir / "histogram.csv").string(), histogram_csv(class_histogram(r.partition)));
        write_file((dir / "partition.json").string(), partition_manifest(r.partition).dump(1) + "\n");
    }
}

// ---------------------------------------------------------------------------------------
// Rebuilding reports from per-client files

/// Inverse of per_client_csv: one MetricsReport per file.
inline MetricsReport report_from_per_client_csv(std::string_view text, const std::string& source) {
    const auto t = parse_csv(text, source);
    const std::vector<std::string> expected{"n_clients", "setting", "client_id", "model", "kind",
                                            "accuracy", "precision", "recall", "f1"};
    if (t.header != expected)
        throw IngestionError(source + ": not a per-client metrics file");
    std::map<std::string, ClientEvaluation> by_id;
    std::vector<std::string> order;
    std::string setting;
    std::size_t n_clients = 0;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        const auto& row = t.rows[r];
        const auto ctx = source + " row " + std::to_string(r + 1);
        n_clients = static_cast<std::size_t>(parse_number(row[0], ctx));
        setting = row[1];
        auto [it, fresh] = by_id.try_emplace(row[2]);
        if (fresh)
            order.push_back(row[2]);
        auto& e = it->second;
        e.client_id = row[2];
        e.descriptor = row[3];
        ClassificationMetrics mtr{parse_number(row[5], ctx), parse_number(row[6], ctx),
                                  parse_number(row[7], ctx), parse_number(row[8], ctx)};
        if (row[4] == "local")
            e.local = mtr;
        else if (row[4] == "wrapper")
            e.wrapper = mtr;
        else if (row[4] == "translator")
            e.translator = mtr;
        else
            throw IngestionError(ctx + ": unknown kind '" + row[4] + "'");
    }
    std::vector<ClientEvaluation> evals;
    for (const auto& id : order)
        evals.push_back(by_id.at(id));
    if (evals.empty())
        throw IngestionError(source + ": no rows");
    auto rep = build_report(setting, std::move(evals));
    rep.n_clients = n_clients;
    return rep;
}

} // namespace fedwrap
