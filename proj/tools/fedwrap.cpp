// fedwrap: partition data, train local models, run a coordinator or a client, simulate a
// whole experiment and rebuild report tables.
//
// Exit codes: 0 success, 1 experiment failure, 2 usage or configuration error, 130 SIGINT.

#include <atomic>
#include <csignal>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fedwrap/bank_surrogate.hpp"
#include "fedwrap/config.hpp"
#include "fedwrap/experiment.hpp"
#include "fedwrap/net.hpp"
#include "fedwrap/partition.hpp"

namespace fs = std::filesystem;
using namespace fedwrap;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;
constexpr int kExitInterrupted = 130;

std::atomic<bool> g_stop{false};

extern "C" void on_sigint(int) { g_stop.store(true); }

void info(const std::string& msg) { std::cerr << "fedwrap: " << msg << "\n"; }

std::string schema_json(const Schema& s) {
    json cols = json::object();
    for (const auto& [name, type] : s.columns)
        cols[name] = type == ColumnType::Numeric ? "numeric" : type == ColumnType::Categorical ? "categorical" : "label";
    json j{{"columns", cols}};
    if (!s.label_order.empty())
        j["label_order"] = s.label_order;
    return j.dump(2) + "\n";
}

std::string path_in(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

// ---------------------------------------------------------------------------------------

struct SynthArgs {
    std::size_t rows = 20000;
    std::uint64_t seed = 1;
    double positive_rate = 0.117;
    std::string out = "data";
};

int cmd_synth(const SynthArgs& a) {
    fs::create_directories(a.out);
    write_file(path_in(a.out, "bank.csv"), to_csv(make_bank_surrogate(a.rows, a.seed, a.positive_rate)));
    write_file(path_in(a.out, "bank_schema.json"), schema_json(bank_schema()));
    info("wrote " + path_in(a.out, "bank.csv") + " and bank_schema.json");
    return 0;
}

struct PartitionArgs {
    std::string csv, schema, out = "partition", mode = "bank";
    double alpha = 0.5, test_fraction = 0.05;
    std::size_t clients = 10;
    std::uint64_t seed = 1;
};

int cmd_partition(const PartitionArgs& a) {
    if (!fs::exists(a.schema))
        throw ConfigError("schema file " + a.schema + " does not exist");
    if (!fs::exists(a.csv))
        throw ConfigError("data file " + a.csv + " does not exist");
    PartitionSpec spec{a.clients, a.alpha, partition_mode_from_string(a.mode), a.seed, a.test_fraction};
    const auto p = make_partition(load_csv(a.csv, load_schema(a.schema)), spec);
    fs::create_directories(a.out);
    for (std::size_t k = 0; k < p.client_datasets.size(); ++k)
        write_file(path_in(a.out, "client_" + client_name(k) + ".csv"), dataset_to_csv(p.client_datasets[k]));
    write_file(path_in(a.out, "test.csv"), dataset_to_csv(p.test_set));
    write_file(path_in(a.out, "partition.json"), partition_manifest(p).dump(1) + "\n");
    write_file(path_in(a.out, "histogram.csv"), histogram_csv(class_histogram(p)));
    info("partitioned into " + std::to_string(p.client_datasets.size()) + " clients under " + a.out);
    return 0;
}

struct TrainLocalArgs {
    std::string data, arch = "LR", out = "model.fwm";
    TrainHp hp{0.05, 32, 10, 0.0, 1};
};

int cmd_train_local(const TrainLocalArgs& a) {
    const auto data = dataset_from_csv(read_file(a.data), 0, a.data);
    const auto model = train_local_model(parse_translator(json(a.arch)), data, a.hp, a.hp.seed);
    save_model(model, a.out);
    info("trained " + model.spec.descriptor() + " on " + std::to_string(data.n_rows()) + " rows, " +
         "training accuracy " + std::to_string(accuracy(model, data)) + ", saved to " + a.out);
    return 0;
}

struct Overrides {
    std::optional<std::uint64_t> seed;
    std::optional<std::string> mode;
    std::optional<double> alpha;
    std::optional<std::size_t> clients;
    std::optional<std::size_t> rounds;
    std::optional<std::string> out;
};

struct ServeArgs {
    std::string config;
    Overrides o;
    std::uint64_t drop_at_round = 0;
};

int cmd_serve(const ServeArgs& a) {
    auto sc = load_server_config(a.config);
    if (a.o.rounds)
        sc.plan.rounds = *a.o.rounds;
    if (a.o.mode)
        sc.plan.mode = wrapper_mode_from_string(*a.o.mode);
    if (a.o.seed)
        sc.plan.hp.seed = *a.o.seed;
    if (a.o.clients) {
        sc.plan.expected_clients.clear();
        for (std::size_t k = 0; k < *a.o.clients; ++k)
            sc.plan.expected_clients.insert(client_name(k));
    }
    const std::string out = a.o.out.value_or(".");

    ServeOptions opt;
    opt.startup_timeout_ms = sc.startup_timeout_ms;
    opt.stop = &g_stop;
    opt.drop_connections_at_round = a.drop_at_round;
    Server server(sc.plan, sc.token, opt);
    const auto port = server.bind(sc.bind);
    std::cout << "listening on " << sc.bind.ip << ":" << port << std::endl;
    std::signal(SIGINT, on_sigint);
    const auto res = server.run();

    fs::create_directories(out);
    write_file(path_in(out, "round_log.csv"), round_log_csv(res.log));
    if (sc.plan.mode == WrapperMode::Stacking && res.translator)
        save_model(Model{*res.translator, res.final_params, 0}, path_in(out, "translator.fwm"));
    info("federation done; round log in " + path_in(out, "round_log.csv"));
    return 0;
}

struct JoinArgs {
    std::string config;
    Overrides o;
    std::uint64_t connect_timeout_ms = 10000;
};

int cmd_join(const JoinArgs& a) {
    auto cc = load_client_config(a.config);
    if (a.o.mode)
        cc.mode = wrapper_mode_from_string(*a.o.mode);
    if (a.o.seed)
        cc.cfg.train.seed = *a.o.seed;
    cc.cfg.validate(cc.mode);
    const std::string out = a.o.out.value_or("wrapper_state.json");

    JoinOptions opt;
    opt.connect_timeout_ms = a.connect_timeout_ms;
    const auto state = join(cc.cfg, cc.mode, opt);
    if (fs::path(out).has_parent_path())
        fs::create_directories(fs::path(out).parent_path());
    save_wrapper_state(out, cc.cfg, state);
    load_wrapper_state(out); // the file must read back
    info("client " + cc.cfg.client_id + " trained; wrapper state saved to " + out);
    return 0;
}

struct InferArgs {
    std::string state, data, out;
};

int cmd_infer(const InferArgs& a) {
    const auto w = load_wrapper_state(a.state);
    const auto data = dataset_from_csv(read_file(a.data), w.cfg.local_model.n_classes, a.data);
    if (data.in_dim != w.cfg.local_model.in_dim)
        throw ConfigError(a.data + " has " + std::to_string(data.in_dim) + " features, the model expects " +
                          std::to_string(w.cfg.local_model.in_dim));
    std::string csv = "row_id,label";
    for (std::size_t c = 0; c < data.n_classes; ++c)
        csv += ",p_" + std::to_string(c);
    csv += "\n";
    std::vector<int> pred;
    for (std::size_t i = 0; i < data.n_rows(); ++i) {
        const auto r = wrapper_infer(w.cfg, w.state, data.row(i));
        pred.push_back(r.label);
        csv += std::to_string(data.row_ids[i]) + "," + std::to_string(r.label);
        for (double p : r.probs)
            csv += "," + format_double(p);
        csv += "\n";
    }
    if (a.out.empty())
        std::cout << csv;
    else
        write_file(a.out, csv);
    const auto m = metrics_from_confusion(confusion_from_labels(data.labels, pred, data.n_classes),
                                          default_task(data.n_classes));
    info("accuracy " + std::to_string(m.accuracy) + ", f1 " + std::to_string(m.f1) + " on " +
         std::to_string(data.n_rows()) + " rows");
    return 0;
}

struct SimulateArgs {
    std::string config;
    Overrides o;
};

int cmd_simulate(const SimulateArgs& a) {
    auto m = a.config.empty() ? RunManifest{} : load_manifest(a.config);
    if (a.o.seed)
        m.seeds = {*a.o.seed};
    if (a.o.mode)
        m.mode = wrapper_mode_from_string(*a.o.mode);
    if (a.o.alpha)
        m.partition.alpha = *a.o.alpha;
    if (a.o.clients)
        m.partition.n_clients = *a.o.clients;
    if (a.o.rounds)
        m.rounds = *a.o.rounds;
    if (a.o.out)
        m.out_dir = *a.o.out;
    if (m.out_dir.empty())
        m.out_dir = path_in("runs", m.name);
    m.validate();
    const auto res = run_experiment(m);
    write_bundle(res, m.out_dir);
    std::cout << report_csv({res.report});
    info("report bundle written to " + m.out_dir);
    return 0;
}

struct ReportArgs {
    std::vector<std::string> inputs;
    bool translator = false;
    std::string out;
};

int cmd_report(const ReportArgs& a) {
    std::vector<std::string> files;
    for (const auto& in : a.inputs) {
        if (fs::is_directory(in)) {
            std::vector<std::string> found;
            for (const auto& e : fs::recursive_directory_iterator(in))
                if (e.path().filename() == "per_client_metrics.csv")
                    found.push_back(e.path().string());
            std::sort(found.begin(), found.end());
            files.insert(files.end(), found.begin(), found.end());
        } else {
            files.push_back(in);
        }
    }
    if (files.empty())
        throw ConfigError("report: no per_client_metrics.csv files found");
    // Files of one setting are pooled, as in the simulate bundle.
    std::map<std::pair<std::size_t, std::string>, std::vector<ClientEvaluation>> pooled;
    std::vector<std::pair<std::size_t, std::string>> order;
    for (const auto& f : files) {
        const auto r = report_from_per_client_csv(read_file(f), f);
        const auto key = std::make_pair(r.n_clients, r.setting);
        if (!pooled.count(key))
            order.push_back(key);
        auto& v = pooled[key];
        v.insert(v.end(), r.per_client.begin(), r.per_client.end());
    }
    std::vector<MetricsReport> reports;
    for (const auto& key : order) {
        auto r = build_report(key.second, pooled.at(key));
        r.n_clients = key.first;
        reports.push_back(std::move(r));
    }
    const auto csv = report_csv(reports, a.translator);
    if (a.out.empty())
        std::cout << csv;
    else
        write_file(a.out, csv);
    return 0;
}

void add_overrides(CLI::App* c, Overrides& o, bool with_partition) {
    c->add_option("--seed", o.seed, "Seed override");
    c->add_option("--mode", o.mode, "Wrapper mode")->check(CLI::IsMember({"stacking", "bagging"}));
    c->add_option("--rounds", o.rounds, "Number of FedAvg rounds")->check(CLI::PositiveNumber);
    c->add_option("--out", o.out, "Output location");
    c->add_option("--clients", o.clients, "Number of clients")->check(CLI::Range(std::size_t{1}, std::size_t{100000}));
    if (with_partition)
        c->add_option("--alpha", o.alpha, "Dirichlet concentration")->check(CLI::PositiveNumber);
}

int run(int argc, char** argv) {
    CLI::App app{"fedwrap: federated wrappers around existing local models"};
    app.require_subcommand(1);

    SynthArgs synth;
    auto* c_synth = app.add_subcommand("synth", "Write a synthetic bank-marketing table and its schema");
    c_synth->add_option("--rows", synth.rows, "Row count")->check(CLI::PositiveNumber);
    c_synth->add_option("--seed", synth.seed, "Seed");
    c_synth->add_option("--positive-rate", synth.positive_rate, "Share of positive labels")->check(CLI::Range(0.001, 0.5));
    c_synth->add_option("--out", synth.out, "Output directory");

    PartitionArgs part;
    auto* c_part = app.add_subcommand("partition", "Split a CSV into client datasets and a balanced test set");
    c_part->add_option("--csv", part.csv, "Input CSV")->required();
    c_part->add_option("--schema", part.schema, "Schema JSON")->required();
    c_part->add_option("--mode", part.mode, "imbalanced | non-iid | bank");
    c_part->add_option("--alpha", part.alpha, "Dirichlet concentration")->check(CLI::PositiveNumber);
    c_part->add_option("--clients", part.clients, "Number of clients");
    c_part->add_option("--seed", part.seed, "Seed");
    c_part->add_option("--test-fraction", part.test_fraction, "Share of rows held out for the test set");
    c_part->add_option("--out", part.out, "Output directory");

    TrainLocalArgs tl;
    auto* c_tl = app.add_subcommand("train-local", "Train a local model on one client's dataset");
    c_tl->add_option("--data", tl.data, "Client dataset CSV")->required();
    c_tl->add_option("--arch", tl.arch, "LR or MLP-<hidden>");
    c_tl->add_option("--epochs", tl.hp.local_epochs, "Epochs")->check(CLI::PositiveNumber);
    c_tl->add_option("--lr", tl.hp.learning_rate, "Learning rate");
    c_tl->add_option("--batch-size", tl.hp.batch_size, "Batch size")->check(CLI::PositiveNumber);
    c_tl->add_option("--seed", tl.hp.seed, "Seed");
    c_tl->add_option("--out", tl.out, "Model file");

    ServeArgs serve;
    auto* c_serve = app.add_subcommand("serve", "Run the coordinator");
    c_serve->add_option("--config", serve.config, "Server config JSON")->required();
    add_overrides(c_serve, serve.o, false);
    c_serve->add_option("--drop-at-round", serve.drop_at_round, "Fault injection: drop connections at round N");

    JoinArgs jn;
    auto* c_join = app.add_subcommand("join", "Join a federation as a client and save the trained wrapper");
    c_join->add_option("--config", jn.config, "Client config JSON")->required();
    add_overrides(c_join, jn.o, false);
    c_join->add_option("--connect-timeout-ms", jn.connect_timeout_ms, "How long to retry connecting");

    InferArgs inf;
    auto* c_inf = app.add_subcommand("infer", "Predict with a saved wrapper state");
    c_inf->add_option("--state", inf.state, "Wrapper state file")->required();
    c_inf->add_option("--data", inf.data, "Dataset CSV")->required();
    c_inf->add_option("--out", inf.out, "Predictions CSV (default stdout)");

    SimulateArgs sim;
    auto* c_sim = app.add_subcommand("simulate", "Run a whole experiment in one process");
    c_sim->add_option("--config", sim.config, "Run manifest JSON");
    add_overrides(c_sim, sim.o, true);

    ReportArgs rep;
    auto* c_rep = app.add_subcommand("report", "Rebuild the report table from per-client metric files");
    c_rep->add_option("inputs", rep.inputs, "per_client_metrics.csv files or bundle directories")->required();
    c_rep->add_flag("--translator", rep.translator, "Report the translator output instead of the fused one");
    c_rep->add_option("--out", rep.out, "Output CSV (default stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    if (*c_synth)
        return cmd_synth(synth);
    if (*c_part)
        return cmd_partition(part);
    if (*c_tl)
        return cmd_train_local(tl);
    if (*c_serve)
        return cmd_serve(serve);
    if (*c_join)
        return cmd_join(jn);
    if (*c_inf)
        return cmd_infer(inf);
    if (*c_sim)
        return cmd_simulate(sim);
    return cmd_report(rep);
}

} // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const Interrupted& e) {
        info(e.what());
        return kExitInterrupted;
    } catch (const ConnectError& e) {
        info(e.what());
        return kExitUsage;
    } catch (const ConfigError& e) {
        info(std::string("configuration error: ") + e.what());
        return kExitUsage;
    } catch (const IngestionError& e) {
        info(std::string("input error: ") + e.what());
        return kExitUsage;
    } catch (const InputError& e) {
        info(std::string("input error: ") + e.what());
        return kExitUsage;
    } catch (const PartitionError& e) {
        info(std::string("partition error: ") + e.what());
        return kExitUsage;
    } catch (const DecodeError& e) {
        info(std::string("cannot decode: ") + e.what());
        return kExitUsage;
    } catch (const UnsupportedModelError& e) {
        info(e.what());
        return kExitUsage;
    } catch (const std::exception& e) {
        info(std::string("failed: ") + e.what());
        return kExitFailure;
    }
}
