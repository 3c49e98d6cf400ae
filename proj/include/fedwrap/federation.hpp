#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "fedwrap/csv.hpp"
#include "fedwrap/error.hpp"
#include "fedwrap/model.hpp"
#include "fedwrap/partition.hpp"
#include "fedwrap/rng.hpp"
#include "fedwrap/wrapper.hpp"

namespace fedwrap {

struct ClientUpdate {
    std::string client_id;
    std::size_t round = 1;
    Params params;
    std::size_t n_samples = 1;
    double loss = 0.0;
};

struct FederationPlan {
    std::size_t rounds = 10;
    std::set<std::string> expected_clients;
    ModelSpec translator_spec;
    TrainHp hp;
    std::uint64_t timeout_ms = 30000;
    WrapperMode mode = WrapperMode::Stacking;

    void validate() const {
        if (rounds < 1)
            throw ConfigError("federation plan: rounds must be >= 1");
        if (expected_clients.empty())
            throw ConfigError("federation plan: expected_clients is empty");
        if (timeout_ms == 0)
            throw ConfigError("federation plan: timeout_ms must be positive");
    }
};

/// Sample-weighted mean of the client parameters.
///
/// Updates are summed in client_id order as base + sum_i w_i (p_i - base), base being the
/// first update in that order, so the result is independent of input order, equals the
/// common value when all clients agree, and is exact for a single client.
inline Params fedavg_aggregate(const std::vector<ClientUpdate>& updates) {
    if (updates.empty())
        throw AggregationError("fedavg: no updates");
    std::vector<const ClientUpdate*> sorted;
    for (const auto& u : updates)
        sorted.push_back(&u);
    std::sort(sorted.begin(), sorted.end(),
              [](const auto* a, const auto* b) { return a->client_id < b->client_id; });

    const auto& base = sorted.front()->params;
    std::uint64_t total = 0;
    for (std::size_t i = 0; i < sorted.size(); ++i) {
        const auto& u = *sorted[i];
        if (i > 0 && u.client_id == sorted[i - 1]->client_id)
            throw AggregationError("fedavg: duplicate update from client '" + u.client_id + "'");
        if (u.round != sorted.front()->round)
            throw AggregationError("fedavg: updates from different rounds (" +
                                   std::to_string(sorted.front()->round) + " and " +
                                   std::to_string(u.round) + ")");
        if (!same_shapes(u.params, base))
            throw AggregationError("fedavg: parameter shapes from client '" + u.client_id +
                                   "' differ from client '" + sorted.front()->client_id + "'");
        if (u.n_samples == 0)
            throw AggregationError("fedavg: client '" + u.client_id + "' reported 0 samples");
        total += u.n_samples;
    }

    Params out = base;
    for (std::size_t i = 1; i < sorted.size(); ++i) {
        const auto& u = *sorted[i];
        const double w = static_cast<double>(u.n_samples) / static_cast<double>(total);
        for (std::size_t b = 0; b < out.size(); ++b) {
            auto& dst = out[b].values;
            const auto& src = u.params[b].values;
            const auto& ref = base[b].values;
            for (std::size_t j = 0; j < dst.size(); ++j)
                dst[j] += w * (src[j] - ref[j]);
        }
    }
    return out;
}

struct RoundLogRow {
    std::size_t round = 0;
    double elapsed_ms = 0.0;
    double mean_client_loss = 0.0;
    std::optional<double> test_accuracy;
};

inline std::string round_log_csv(const std::vector<RoundLogRow>& log) {
    std::string out = "round,elapsed_ms,mean_client_loss,test_accuracy\n";
    for (const auto& r : log) {
        out += std::to_string(r.round) + "," + format_double(r.elapsed_ms) + "," +
               format_double(r.mean_client_loss) + ",";
        if (r.test_accuracy)
            out += format_double(*r.test_accuracy);
        out += "\n";
    }
    return out;
}

/// Scheduler state for one federation: which round is open, which updates have arrived.
/// Shared by the in-process loop and the protocol coordinator.
class RoundLoop {
public:
    RoundLoop(FederationPlan plan, Params initial)
        : plan_(std::move(plan)), global_(std::move(initial)) {
        plan_.validate();
    }

    const FederationPlan& plan() const { return plan_; }
    std::size_t round() const { return round_; }
    bool finished() const { return round_ > plan_.rounds; }
    const Params& global() const { return global_; }
    const std::vector<RoundLogRow>& log() const { return log_; }

    void submit(ClientUpdate u) {
        if (finished())
            throw FederationError("update from '" + u.client_id + "' after the final round");
        if (!plan_.expected_clients.count(u.client_id))
            throw FederationError("update from unknown client '" + u.client_id + "'");
        if (u.round != round_)
            throw FederationError("update from '" + u.client_id + "' for round " +
                                  std::to_string(u.round) + " while round " +
                                  std::to_string(round_) + " is open");
        for (const auto& p : pending_)
            if (p.client_id == u.client_id)
                throw FederationError("duplicate update from '" + u.client_id + "' in round " +
                                      std::to_string(round_));
        if (!same_shapes(u.params, global_))
            throw FederationError("update from '" + u.client_id +
                                  "' does not match the translator layout");
        pending_.push_back(std::move(u));
    }

    bool complete() const { return pending_.size() == plan_.expected_clients.size(); }

    std::vector<std::string> missing() const {
        std::vector<std::string> out;
        for (const auto& id : plan_.expected_clients) {
            bool seen = false;
            for (const auto& p : pending_)
                seen = seen || p.client_id == id;
            if (!seen)
                out.push_back(id);
        }
        return out;
    }

    /// Aggregates the full barrier and opens the next round.
    const RoundLogRow& close(double elapsed_ms, std::optional<double> test_accuracy = std::nullopt) {
        if (!complete())
            throw FederationError("round " + std::to_string(round_) + " closed before all updates arrived");
        global_ = fedavg_aggregate(pending_);
        double loss = 0.0;
        for (const auto& p : pending_)
            loss += p.loss;
        loss /= static_cast<double>(pending_.size());
        log_.push_back({round_, elapsed_ms, loss, test_accuracy});
        pending_.clear();
        ++round_;
        return log_.back();
    }

    /// Re-tags the last log row once an evaluation has been computed for it.
    void set_last_accuracy(std::optional<double> acc) {
        if (!log_.empty())
            log_.back().test_accuracy = acc;
    }

private:
    FederationPlan plan_;
    Params global_;
    std::size_t round_ = 1;
    std::vector<ClientUpdate> pending_;
    std::vector<RoundLogRow> log_;
};

inline std::string join_ids(const std::vector<std::string>& ids) {
    std::string s;
    for (const auto& id : ids)
        s += (s.empty() ? "" : ", ") + id;
    return s;
}

/// Wall-clock timer that can be paused, so evaluation time stays off the training clock.
class Stopwatch {
public:
    using clock = std::chrono::steady_clock;
    void start() {
        if (!running_) {
            since_ = clock::now();
            running_ = true;
        }
    }
    void pause() {
        if (running_) {
            acc_ += clock::now() - since_;
            running_ = false;
        }
    }
    double elapsed_ms() const {
        auto t = acc_;
        if (running_)
            t += clock::now() - since_;
        return std::chrono::duration<double, std::milli>(t).count();
    }

private:
    clock::time_point since_{};
    clock::duration acc_{};
    bool running_ = false;
};

/// Runs one client's local phase; nullopt means the client produced no update.
using ClientDriver = std::function<std::optional<ClientUpdate>(
    const std::string& client_id, std::size_t round, const Params& global)>;

/// Optional per-round evaluation of the aggregated parameters (not timed).
using RoundEvaluator = std::function<std::optional<double>(std::size_t round, const Params& global)>;

struct FederationResult {
    Params final_params;
    std::vector<RoundLogRow> log;
};

/// In-process round loop: broadcast, local phases in client_id order, barrier, FedAvg.
inline FederationResult run_round_loop(const FederationPlan& plan, Params initial,
                                       const ClientDriver& driver,
                                       const RoundEvaluator& evaluate = {}) {
    RoundLoop loop(plan, std::move(initial));
    Stopwatch clock;
    while (!loop.finished()) {
        clock.start();
        const auto round_start = Stopwatch::clock::now();
        const std::size_t r = loop.round();
        for (const auto& id : plan.expected_clients) {
            auto u = driver(id, r, loop.global());
            const auto waited = std::chrono::duration<double, std::milli>(
                                    Stopwatch::clock::now() - round_start)
                                    .count();
            if (u && waited <= static_cast<double>(plan.timeout_ms))
                loop.submit(std::move(*u));
        }
        if (!loop.complete())
            throw RoundTimeout("round " + std::to_string(r) + " timed out waiting for: " +
                               join_ids(loop.missing()));
        loop.close(clock.elapsed_ms());
        clock.pause();
        if (evaluate)
            loop.set_last_accuracy(evaluate(r, loop.global()));
    }
    return {loop.global(), loop.log()};
}

struct TracePoint {
    std::size_t round = 0;
    double elapsed_ms = 0.0;
    double accuracy = 0.0;
};

struct BaselineResult {
    Model global;
    std::vector<TracePoint> trace;
    std::vector<RoundLogRow> log;
};

inline std::string client_name(std::size_t index) { return std::to_string(index); }

/// Accuracy of `model` on `test` under the same decision rule the wrapper uses.
inline double decision_accuracy(const Model& model, const Dataset& test, double threshold = 0.5) {
    std::size_t hit = 0;
    for (std::size_t i = 0; i < test.n_rows(); ++i)
        if (decide_label(forward(model, test.row(i)).probs, threshold) == test.labels[i])
            ++hit;
    return static_cast<double>(hit) / static_cast<double>(test.n_rows());
}

/// FedAvg from scratch: every round each client trains a copy of the global model on its
/// own data; no pre-trained local model is involved. Client k is named "k".
inline BaselineResult fedavg_from_scratch(const Partition& partition, const ModelSpec& spec,
                                          FederationPlan plan) {
    spec.validate();
    if (partition.client_datasets.empty())
        throw PartitionError("fedavg_from_scratch: partition has no clients");
    if (spec.in_dim != partition.client_datasets.front().in_dim)
        throw ConfigError("fedavg_from_scratch: spec in_dim does not match the data");
    plan.translator_spec = spec;
    plan.expected_clients.clear();
    for (std::size_t k = 0; k < partition.client_datasets.size(); ++k)
        plan.expected_clients.insert(client_name(k));

    auto global = init_model(spec, plan.hp.seed);
    std::vector<TracePoint> trace;
    ClientDriver driver = [&](const std::string& id, std::size_t round,
                              const Params& params) -> std::optional<ClientUpdate> {
        const auto k = static_cast<std::size_t>(std::stoul(id));
        Model local = global;
        local.params = params;
        TrainHp hp = plan.hp;
        hp.seed = derive_seed(derive_seed(plan.hp.seed, k + 1), round);
        const auto& data = partition.client_datasets[k];
        auto rep = sgd_train_report(std::move(local), data, hp);
        return ClientUpdate{id, round, std::move(rep.model.params), data.n_rows(), rep.mean_loss};
    };
    RoundEvaluator evaluate = [&](std::size_t, const Params& params) -> std::optional<double> {
        if (partition.test_set.empty())
            return std::nullopt;
        Model m = global;
        m.params = params;
        return decision_accuracy(m, partition.test_set);
    };
    auto res = run_round_loop(plan, global.params, driver, evaluate);
    for (const auto& row : res.log)
        trace.push_back({row.round, row.elapsed_ms, row.test_accuracy.value_or(0.0)});
    global.params = res.final_params;
    return {std::move(global), std::move(trace), std::move(res.log)};
}

} // namespace fedwrap
