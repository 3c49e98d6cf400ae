#include <gtest/gtest.h>

#include <fcntl.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <filesystem>
#include <thread>

#include "fedwrap/config.hpp"
#include "fedwrap/experiment.hpp"

#ifndef FEDWRAP_CLI
#error "FEDWRAP_CLI must point at the fedwrap binary"
#endif

using namespace fedwrap;
namespace fs = std::filesystem;

namespace {

class Workdir {
public:
    Workdir() {
        static int counter = 0;
        path_ = fs::temp_directory_path() /
                ("fedwrap_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~Workdir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    std::string operator/(const std::string& name) const { return (path_ / name).string(); }
    const fs::path& path() const { return path_; }

private:
    fs::path path_;
};

/// A running CLI process with stdout/stderr captured to files.
class Proc {
public:
    Proc(std::vector<std::string> args, const std::string& out_file, const std::string& err_file,
         std::vector<std::pair<std::string, std::string>> env = {})
        : out_(out_file), err_(err_file) {
        args.insert(args.begin(), FEDWRAP_CLI);
        pid_ = ::fork();
        if (pid_ == 0) {
            const int o = ::open(out_file.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
            const int e = ::open(err_file.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
            ::dup2(o, 1);
            ::dup2(e, 2);
            for (const auto& [k, v] : env)
                ::setenv(k.c_str(), v.c_str(), 1);
            std::vector<char*> argv;
            for (auto& a : args)
                argv.push_back(a.data());
            argv.push_back(nullptr);
            ::execv(argv[0], argv.data());
            ::_exit(127);
        }
    }

    Proc(const Proc&) = delete;
    Proc& operator=(const Proc&) = delete;

    ~Proc() {
        if (!reaped_) {
            ::kill(pid_, SIGKILL);
            ::waitpid(pid_, nullptr, 0);
        }
    }

    int wait() {
        int status = 0;
        ::waitpid(pid_, &status, 0);
        reaped_ = true;
        return WIFEXITED(status) ? WEXITSTATUS(status) : 128 + WTERMSIG(status);
    }

    void signal(int sig) { ::kill(pid_, sig); }
    std::string out() const { return slurp(out_); }
    std::string err() const { return slurp(err_); }

    /// Polls stdout until it contains `needle`.
    bool wait_for_output(const std::string& needle, int timeout_ms = 10000) const {
        for (int t = 0; t < timeout_ms; t += 20) {
            if (slurp(out_).find(needle) != std::string::npos)
                return true;
            std::this_thread::sleep_for(std::chrono::milliseconds(20));
        }
        return false;
    }

private:
    static std::string slurp(const std::string& path) { return fs::exists(path) ? read_file(path) : std::string{}; }

    pid_t pid_ = -1;
    bool reaped_ = false;
    std::string out_, err_;
};

struct Result {
    int code;
    std::string out, err;
};

Result run(const Workdir& w, std::vector<std::string> args,
           std::vector<std::pair<std::string, std::string>> env = {}) {
    static int n = 0;
    const auto tag = std::to_string(n++);
    Proc p(std::move(args), w / ("out" + tag), w / ("err" + tag), std::move(env));
    const int code = p.wait();
    return {code, p.out(), p.err()};
}

std::uint16_t listening_port(const Proc& p) {
    EXPECT_TRUE(p.wait_for_output("listening on"));
    const auto out = p.out();
    const auto colon = out.rfind(':');
    return static_cast<std::uint16_t>(std::stoul(out.substr(colon + 1)));
}

/// synth + partition + train-local for `n` clients; returns the partition directory.
std::string prepare_clients(const Workdir& w, std::size_t n) {
    EXPECT_EQ(run(w, {"synth", "--rows", "2400", "--seed", "5", "--out", w / "data"}).code, 0);
    EXPECT_EQ(run(w, {"partition", "--csv", w / "data/bank.csv", "--schema", w / "data/bank_schema.json",
                      "--clients", std::to_string(std::max<std::size_t>(n, 2)), "--alpha", "2", "--seed", "3", "--out", w / "part"})
                  .code,
              0);
    for (std::size_t k = 0; k < n; ++k)
        EXPECT_EQ(run(w, {"train-local", "--data", w / ("part/client_" + std::to_string(k) + ".csv"), "--arch",
                          k % 2 ? "MLP-8" : "LR", "--epochs", "2", "--seed", std::to_string(k), "--out",
                          w / ("m" + std::to_string(k) + ".fwm")})
                      .code,
                  0);
    return w / "part";
}

void write_client_config(const Workdir& w, std::size_t k, std::size_t n, std::uint16_t port,
                         std::size_t epochs = 1, const std::string& token = "tok") {
    json clients = json::array();
    for (std::size_t j = 0; j < n; ++j)
        if (j != k)
            clients.push_back(std::to_string(j));
    json cfg{{"local_model", "m" + std::to_string(k) + ".fwm"},
             {"train_dataset", "part/client_" + std::to_string(k) + ".csv"},
             {"translator", "MLP-6"},
             {"client_id", std::to_string(k)},
             {"clients", clients},
             {"server_addr", {{"ip", "127.0.0.1"}, {"port", std::to_string(port)}}},
             {"train_config", {{"local_epochs", epochs}, {"learning_rate", 0.1}, {"seed", k}}},
             {"token", token}};
    write_file(w / ("client" + std::to_string(k) + ".json"), cfg.dump(1));
}

void write_server_config(const Workdir& w, std::size_t n, std::size_t rounds, std::uint64_t startup_ms = 20000) {
    json clients = json::array();
    for (std::size_t j = 0; j < n; ++j)
        clients.push_back(std::to_string(j));
    json cfg{{"server_addr", {{"ip", "127.0.0.1"}, {"port", 0}}},
             {"clients", clients},
             {"translator", "MLP-6"},
             {"train_config", {{"rounds", rounds}, {"seed", 4}}},
             {"startup_timeout_ms", startup_ms},
             {"token", "tok"}};
    write_file(w / "server.json", cfg.dump(1));
}

} // namespace

TEST(Cli, UsageErrorsExitTwo) {
    Workdir w;
    EXPECT_EQ(run(w, {}).code, 2);
    EXPECT_EQ(run(w, {"frobnicate"}).code, 2);
    EXPECT_EQ(run(w, {"partition", "--csv"}).code, 2);
    EXPECT_EQ(run(w, {"simulate", "--mode", "sideways"}).code, 2);
    EXPECT_EQ(run(w, {"--help"}).code, 0);
}

TEST(Cli, PartitionMissingSchemaNamesPath) {
    Workdir w;
    ASSERT_EQ(run(w, {"synth", "--rows", "500", "--out", w / "data"}).code, 0);
    const auto missing = w / "no_such_schema.json";
    const auto r = run(w, {"partition", "--csv", w / "data/bank.csv", "--schema", missing});
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find(missing), std::string::npos) << r.err;
}

TEST(Cli, PartitionIsDeterministicAndNonIidVariesPositives) {
    Workdir w;
    ASSERT_EQ(run(w, {"synth", "--rows", "4000", "--seed", "2", "--out", w / "data"}).code, 0);
    for (const char* out : {"p1", "p2"})
        ASSERT_EQ(run(w, {"partition", "--csv", w / "data/bank.csv", "--schema", w / "data/bank_schema.json",
                          "--mode", "non-iid", "--alpha", "0.5", "--clients", "6", "--seed", "8", "--out", w / out})
                      .code,
                  0);
    for (const auto& e : fs::directory_iterator(w / "p1"))
        EXPECT_EQ(read_file(e.path().string()), read_file(w / ("p2/" + e.path().filename().string())))
            << e.path();

    // Per-client positive counts read back from the emitted histogram.
    const auto t = parse_csv(read_file(w / "p1/histogram.csv"));
    std::vector<double> pos;
    for (const auto& row : t.rows)
        if (row[1] == "1")
            pos.push_back(std::stod(row[2]));
    ASSERT_EQ(pos.size(), 6u);
    EXPECT_GT(*std::max_element(pos.begin(), pos.end()), *std::min_element(pos.begin(), pos.end()));
}

TEST(Cli, ServePortInUseExitsTwo) {
    Workdir w;
    write_server_config(w, 1, 1, 3000);
    // The first server holds a port; a second one bound to it must fail.
    Proc first({"serve", "--config", w / "server.json"}, w / "f.out", w / "f.err");
    const auto port = listening_port(first);
    json cfg = json::parse(read_file(w / "server.json"));
    cfg["server_addr"]["port"] = port;
    write_file(w / "busy.json", cfg.dump());
    const auto r = run(w, {"serve", "--config", w / "busy.json"});
    EXPECT_EQ(r.code, 2) << r.err;
    EXPECT_EQ(first.wait(), 1); // startup timeout with nobody joining
}

TEST(Cli, JoinUnreachableExitsTwoWithinTimeout) {
    Workdir w;
    prepare_clients(w, 1);
    write_client_config(w, 0, 1, 1);
    const auto t0 = std::chrono::steady_clock::now();
    const auto r = run(w, {"join", "--config", w / "client0.json", "--connect-timeout-ms", "1000"});
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    EXPECT_EQ(r.code, 2) << r.err;
    EXPECT_LT(secs, 6.0);
    EXPECT_NE(r.err.find("cannot reach"), std::string::npos);
}

TEST(Cli, ServeJoinInferEndToEnd) {
    Workdir w;
    prepare_clients(w, 3);
    write_server_config(w, 3, 2);
    Proc server({"serve", "--config", w / "server.json", "--out", w / "srv"}, w / "s.out", w / "s.err");
    const auto port = listening_port(server);
    std::vector<std::unique_ptr<Proc>> clients;
    for (std::size_t k = 0; k < 3; ++k) {
        write_client_config(w, k, 3, port);
        clients.push_back(std::make_unique<Proc>(
            std::vector<std::string>{"join", "--config", w / ("client" + std::to_string(k) + ".json"), "--out",
                                     w / ("state" + std::to_string(k) + ".json")},
            w / ("c" + std::to_string(k) + ".out"), w / ("c" + std::to_string(k) + ".err")));
    }
    for (auto& c : clients)
        EXPECT_EQ(c->wait(), 0) << c->err();
    EXPECT_EQ(server.wait(), 0) << server.err();

    const auto log = parse_csv(read_file(w / "srv/round_log.csv"));
    EXPECT_EQ(log.header, (std::vector<std::string>{"round", "elapsed_ms", "mean_client_loss", "test_accuracy"}));
    EXPECT_EQ(log.rows.size(), 2u);
    EXPECT_NO_THROW(load_model(w / "srv/translator.fwm"));

    // Saved states read back, and every client holds the same final translator.
    std::vector<LoadedWrapper> states;
    for (std::size_t k = 0; k < 3; ++k)
        states.push_back(load_wrapper_state(w / ("state" + std::to_string(k) + ".json")));
    for (const auto& s : states) {
        EXPECT_TRUE(s.state.ready());
        EXPECT_TRUE(bitwise_equal(s.state.stacking->translator.params, states[0].state.stacking->translator.params));
    }

    // infer twice gives the same file, and matches inference on the loaded state.
    for (const char* out : {"pred1.csv", "pred2.csv"})
        ASSERT_EQ(run(w, {"infer", "--state", w / "state1.json", "--data", w / "part/test.csv", "--out", w / out}).code,
                  0);
    const auto preds = read_file(w / "pred1.csv");
    EXPECT_EQ(preds, read_file(w / "pred2.csv"));
    const auto test = dataset_from_csv(read_file(w / "part/test.csv"), 2);
    const auto table = parse_csv(preds);
    ASSERT_EQ(table.rows.size(), test.n_rows());
    for (std::size_t i = 0; i < test.n_rows(); ++i) {
        const auto r = wrapper_infer(states[1].cfg, states[1].state, test.row(i));
        EXPECT_EQ(std::stoi(table.rows[i][1]), r.label);
        EXPECT_EQ(std::stod(table.rows[i][3]), r.probs[1]);
    }
}

TEST(Cli, SigintMidRoundBroadcastsErrorAndExits130) {
    Workdir w;
    prepare_clients(w, 1);
    write_server_config(w, 1, 3);
    Proc server({"serve", "--config", w / "server.json", "--out", w / "srv"}, w / "s.out", w / "s.err");
    const auto port = listening_port(server);
    write_client_config(w, 0, 1, port, 400); // slow enough to still be training when the signal lands
    Proc client({"join", "--config", w / "client0.json", "--out", w / "state.json"}, w / "c.out", w / "c.err");
    std::this_thread::sleep_for(std::chrono::milliseconds(600));
    server.signal(SIGINT);
    EXPECT_EQ(server.wait(), 130) << server.err();
    EXPECT_EQ(client.wait(), 1) << client.err();
    EXPECT_NE(client.err().find("interrupted"), std::string::npos) << client.err();
    EXPECT_FALSE(fs::exists(w / "state.json"));
}

TEST(Cli, SimulateReportBytesAreReproducible) {
    Workdir w;
    RunManifest m;
    m.surrogate_rows = 2000;
    m.partition.n_clients = 3;
    m.partition.test_fraction = 0.1;
    m.local_train.local_epochs = 2;
    m.federated_train.local_epochs = 1;
    m.rounds = 2;
    m.seeds = {7};
    write_file(w / "manifest.json", manifest_to_json(m).dump(1));
    for (const char* out : {"a", "b"}) {
        const auto r = run(w, {"simulate", "--config", w / "manifest.json", "--out", w / out});
        ASSERT_EQ(r.code, 0) << r.err;
        EXPECT_NE(r.out.find("wrapper_mean"), std::string::npos);
    }
    EXPECT_EQ(read_file(w / "a/report.csv"), read_file(w / "b/report.csv"));
    EXPECT_EQ(read_file(w / "a/seed_7/per_client_metrics.csv"), read_file(w / "b/seed_7/per_client_metrics.csv"));
    const auto rep = run(w, {"report", w / "a", "--out", w / "rebuilt.csv"});
    ASSERT_EQ(rep.code, 0) << rep.err;
    EXPECT_EQ(read_file(w / "rebuilt.csv"), read_file(w / "a/report.csv"));

    // Flag overrides win over the manifest.
    const auto r = run(w, {"simulate", "--config", w / "manifest.json", "--out", w / "c", "--clients", "4",
                           "--rounds", "1", "--seed", "9", "--alpha", "1.5"});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto part = json::parse(read_file(w / "c/seed_9/partition.json"));
    EXPECT_EQ(part.at("n_clients").get<std::size_t>(), 4u);
    EXPECT_EQ(part.at("alpha").get<double>(), 1.5);
    EXPECT_EQ(parse_csv(read_file(w / "c/seed_9/round_log.csv")).rows.size(), 1u);
}

TEST(Cli, EnvironmentSuppliesAddressAndToken) {
    Workdir w;
    write_file(w / "server.json", R"({"clients": ["0"], "startup_timeout_ms": 200})");
    const auto r = run(w, {"serve", "--config", w / "server.json"},
                       {{"FEDWRAP_ADDR", "127.0.0.1:0"}, {"FEDWRAP_TOKEN", "t"}});
    EXPECT_EQ(r.code, 1); // binds via FEDWRAP_ADDR, then nobody joins
    EXPECT_NE(r.out.find("listening on 127.0.0.1:"), std::string::npos);
    EXPECT_NE(r.err.find("missing: 0"), std::string::npos) << r.err;
}
