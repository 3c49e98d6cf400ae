#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedwrap/dataset.hpp"
#include "fedwrap/error.hpp"
#include "fedwrap/model.hpp"
#include "fedwrap/rng.hpp"

namespace fedwrap {

using ProbaFn = std::function<std::vector<double>(std::span<const double>)>;

/// The pre-existing local classifier, seen only through its input/output interface.
///
/// `feature_vec` is empty for non-parametric models (trees, SVMs); such models can join
/// the Bagging Wrapper but only the Probs flavor of the Stacking Wrapper.
struct LocalModelHandle {
    ProbaFn predict_proba;
    ProbaFn feature_vec;
    std::size_t in_dim = 0;
    std::size_t n_classes = 0;
    std::string descriptor;
    std::shared_ptr<const Model> model; // set when the model can be shared with peers

    bool has_features() const { return static_cast<bool>(feature_vec); }

    static LocalModelHandle from_model(Model m) {
        auto shared = std::make_shared<const Model>(std::move(m));
        LocalModelHandle h;
        h.in_dim = shared->spec.in_dim;
        h.n_classes = shared->spec.n_classes;
        h.descriptor = shared->spec.descriptor();
        h.predict_proba = [shared](std::span<const double> x) { return forward(*shared, x).probs; };
        h.feature_vec = [shared](std::span<const double> x) { return forward(*shared, x).features; };
        h.model = shared;
        return h;
    }

    /// Wraps an opaque predictor without feature access.
    static LocalModelHandle black_box(ProbaFn predict, std::size_t in_dim, std::size_t n_classes,
                                      std::string descriptor) {
        LocalModelHandle h;
        h.predict_proba = std::move(predict);
        h.in_dim = in_dim;
        h.n_classes = n_classes;
        h.descriptor = std::move(descriptor);
        return h;
    }
};

struct FeatureMode {
    enum class Kind { Probs, HiddenPadded };
    Kind kind = Kind::Probs;
    std::size_t dim = 0; // HiddenPadded only

    static FeatureMode probs() { return {}; }
    static FeatureMode hidden_padded(std::size_t d) { return {Kind::HiddenPadded, d}; }

    std::size_t width(std::size_t n_classes) const { return kind == Kind::Probs ? n_classes : dim; }

    friend bool operator==(const FeatureMode&, const FeatureMode&) = default;
};

enum class WrapperMode { Stacking, Bagging };

inline std::string to_string(WrapperMode m) { return m == WrapperMode::Stacking ? "stacking" : "bagging"; }

inline WrapperMode wrapper_mode_from_string(const std::string& s) {
    if (s == "stacking")
        return WrapperMode::Stacking;
    if (s == "bagging")
        return WrapperMode::Bagging;
    throw ConfigError("unknown wrapper mode '" + s + "' (expected stacking|bagging)");
}

struct Endpoint {
    std::string ip = "127.0.0.1";
    std::uint16_t port = 0;
};

struct WrapperConfig {
    LocalModelHandle local_model;
    Dataset train_dataset;
    ModelSpec translator; // in_dim must equal stack_in_dim()
    std::string client_id;
    std::vector<std::string> clients; // peers, excluding client_id
    Endpoint client_addr;
    Endpoint server_addr;
    FeatureMode feature_mode;
    double threshold = 0.5;
    double fusion_weight = 0.5;
    TrainHp train;
    std::string token;

    std::size_t stack_in_dim() const {
        return local_model.in_dim + feature_mode.width(local_model.n_classes);
    }

    /// Everyone in the federation including this client, sorted.
    std::vector<std::string> roster() const {
        std::vector<std::string> r = clients;
        r.push_back(client_id);
        std::sort(r.begin(), r.end());
        return r;
    }

    void validate(WrapperMode mode = WrapperMode::Stacking) const {
        if (client_id.empty())
            throw ConfigError("client_id must be non-empty");
        if (std::find(clients.begin(), clients.end(), client_id) != clients.end())
            throw ConfigError("client_id '" + client_id + "' also listed in clients");
        if (!local_model.predict_proba)
            throw ConfigError("local_model has no predict_proba");
        train_dataset.validate();
        if (train_dataset.in_dim != local_model.in_dim)
            throw ConfigError("train_dataset has " + std::to_string(train_dataset.in_dim) +
                              " features, local model expects " +
                              std::to_string(local_model.in_dim));
        if (train_dataset.n_classes != local_model.n_classes)
            throw ConfigError("train_dataset and local model disagree on n_classes");
        if (!(threshold > 0.0 && threshold < 1.0))
            throw ConfigError("threshold must lie in (0, 1)");
        if (!(fusion_weight >= 0.0 && fusion_weight <= 1.0))
            throw ConfigError("fusion_weight must lie in [0, 1]");
        train.validate();
        if (mode == WrapperMode::Stacking) {
            translator.validate();
            if (translator.n_classes != train_dataset.n_classes)
                throw ConfigError("translator n_classes differs from the dataset's");
            if (translator.in_dim != stack_in_dim())
                throw ConfigError("translator in_dim " + std::to_string(translator.in_dim) +
                                  " != stacked input width " + std::to_string(stack_in_dim()));
            if (feature_mode.kind == FeatureMode::Kind::HiddenPadded && feature_mode.dim == 0)
                throw ConfigError("hidden_padded feature mode needs a positive width");
        }
    }
};

/// Translator spec of the given architecture sized for this client's stacked input.
inline ModelSpec translator_spec_for(const WrapperConfig& cfg, ModelKind kind, std::size_t hidden) {
    return {kind, cfg.stack_in_dim(), kind == ModelKind::Mlp3 ? hidden : 0,
            cfg.local_model.n_classes};
}

// ---------------------------------------------------------------------------------------
// Stacking

/// x followed by the local model's probability vector (Probs) or its feature vector
/// zero-padded / truncated to the configured width (HiddenPadded).
inline std::vector<double> build_stacking_input(const WrapperConfig& cfg, std::span<const double> x) {
    if (x.size() != cfg.local_model.in_dim)
        throw InputError("stacking input has " + std::to_string(x.size()) + " features, expected " +
                         std::to_string(cfg.local_model.in_dim));
    std::vector<double> out(x.begin(), x.end());
    if (cfg.feature_mode.kind == FeatureMode::Kind::Probs) {
        auto p = cfg.local_model.predict_proba(x);
        out.insert(out.end(), p.begin(), p.end());
    } else {
        if (!cfg.local_model.has_features())
            throw UnsupportedModelError("local model '" + cfg.local_model.descriptor +
                                        "' exposes no feature vector; use feature_mode=probs");
        auto f = cfg.local_model.feature_vec(x);
        f.resize(cfg.feature_mode.dim, 0.0);
        out.insert(out.end(), f.begin(), f.end());
    }
    return out;
}

/// Applies build_stacking_input to every row; the local model is frozen, so this is
/// computed once per dataset.
inline Dataset stack_dataset(const WrapperConfig& cfg, const Dataset& d) {
    Dataset out;
    out.in_dim = cfg.stack_in_dim();
    out.n_classes = d.n_classes;
    out.labels = d.labels;
    out.row_ids = d.row_ids;
    out.features.reserve(d.n_rows() * out.in_dim);
    for (std::size_t i = 0; i < d.n_rows(); ++i) {
        auto s = build_stacking_input(cfg, d.row(i));
        out.features.insert(out.features.end(), s.begin(), s.end());
    }
    out.feature_names = d.feature_names;
    for (std::size_t k = 0; k < cfg.feature_mode.width(cfg.local_model.n_classes); ++k)
        out.feature_names.push_back("local_feature_" + std::to_string(k));
    return out;
}

struct StackingState {
    Model translator;
    std::size_t rounds_completed = 0;
    std::size_t stack_in_dim = 0;
    std::shared_ptr<const Dataset> stacked_train; // cache of stack_dataset(train_dataset)
};

inline StackingState make_stacking_state(const WrapperConfig& cfg, std::uint64_t init_seed = 0) {
    cfg.validate(WrapperMode::Stacking);
    StackingState s;
    s.translator = init_model(cfg.translator, init_seed);
    s.stack_in_dim = cfg.stack_in_dim();
    s.stacked_train = std::make_shared<const Dataset>(stack_dataset(cfg, cfg.train_dataset));
    return s;
}

struct RoundUpdate {
    Params params;
    std::size_t n_samples = 0;
    double loss = 0.0;
};

/// Loads the global translator, trains it locally on stacked inputs and returns the result.
inline RoundUpdate stacking_train_round(StackingState& state, const WrapperConfig& cfg,
                                        const Params& global_params, std::size_t round = 1) {
    if (!same_shapes(global_params, zero_params(state.translator.spec)))
        throw FederationError("global translator parameters do not match local translator spec " +
                              state.translator.spec.descriptor() +
                              "; translators must be homogeneous across the federation");
    if (!state.stacked_train)
        state.stacked_train = std::make_shared<const Dataset>(stack_dataset(cfg, cfg.train_dataset));
    state.translator.params = global_params;
    TrainHp hp = cfg.train;
    hp.seed = derive_seed(cfg.train.seed, round);
    auto rep = sgd_train_report(state.translator, *state.stacked_train, hp);
    state.translator = std::move(rep.model);
    ++state.rounds_completed;
    return {state.translator.params, cfg.train_dataset.n_rows(), rep.mean_loss};
}

inline std::vector<double> stacking_predict(const StackingState& state, const WrapperConfig& cfg,
                                            std::span<const double> x) {
    return forward(state.translator, build_stacking_input(cfg, x)).probs;
}

// ---------------------------------------------------------------------------------------
// Bagging

/// Linear re-weighting of the M concatenated member probability vectors.
///
/// Output = softmax(log(max(W c + b, floor))), i.e. the linear mixture renormalized. With
/// the averaging initialization (block-wise identity / M, zero bias) it is exactly the
/// mean of the member probabilities.
struct FusionLayer {
    std::size_t n_models = 0;
    std::size_t n_classes = 0;
    std::vector<double> weight; // [n_classes x n_models * n_classes]
    std::vector<double> bias;   // [n_classes]

    static constexpr double kFloor = 1e-12;

    std::size_t in_width() const { return n_models * n_classes; }

    static FusionLayer averaging(std::size_t n_models, std::size_t n_classes) {
        FusionLayer f{n_models, n_classes, std::vector<double>(n_classes * n_models * n_classes, 0.0),
                      std::vector<double>(n_classes, 0.0)};
        const double w = 1.0 / static_cast<double>(n_models);
        for (std::size_t m = 0; m < n_models; ++m)
            for (std::size_t c = 0; c < n_classes; ++c)
                f.weight[c * f.in_width() + m * n_classes + c] = w;
        return f;
    }

    std::vector<double> mixture(std::span<const double> concat) const {
        std::vector<double> q(n_classes);
        for (std::size_t c = 0; c < n_classes; ++c) {
            double acc = bias[c];
            const double* row = weight.data() + c * in_width();
            for (std::size_t i = 0; i < in_width(); ++i)
                acc += row[i] * concat[i];
            q[c] = acc;
        }
        return q;
    }

    std::vector<double> predict(std::span<const double> concat) const {
        if (concat.size() != in_width())
            throw InputError("fusion input width mismatch");
        auto q = mixture(concat);
        std::vector<double> logq(n_classes);
        for (std::size_t c = 0; c < n_classes; ++c)
            logq[c] = std::log(std::max(q[c], kFloor));
        return softmax(logq);
    }

    /// Mean cross-entropy of `predict` and its gradient w.r.t. (weight, bias).
    double loss_and_grad(const std::vector<std::span<const double>>& inputs,
                         std::span<const int> labels, std::vector<double>& gw,
                         std::vector<double>& gb) const {
        gw.assign(weight.size(), 0.0);
        gb.assign(bias.size(), 0.0);
        double total = 0.0;
        const double inv_b = 1.0 / static_cast<double>(inputs.size());
        std::vector<double> dq(n_classes);
        for (std::size_t s = 0; s < inputs.size(); ++s) {
            const auto& c = inputs[s];
            auto q = mixture(c);
            double sum = 0.0;
            for (double& v : q) {
                v = std::max(v, kFloor);
                sum += v;
            }
            const auto y = static_cast<std::size_t>(labels[s]);
            total += std::log(sum) - std::log(q[y]);
            const auto raw = mixture(c);
            for (std::size_t k = 0; k < n_classes; ++k) {
                double g = 1.0 / sum - (k == y ? 1.0 / q[y] : 0.0);
                dq[k] = raw[k] > kFloor ? g * inv_b : 0.0;
            }
            for (std::size_t k = 0; k < n_classes; ++k) {
                gb[k] += dq[k];
                double* row = gw.data() + k * in_width();
                for (std::size_t i = 0; i < in_width(); ++i)
                    row[i] += dq[k] * c[i];
            }
        }
        return total * inv_b;
    }
};

struct BaggingState {
    std::map<std::string, Model> peer_models; // own model included
    std::vector<std::string> order;           // member order of the fusion input blocks
    FusionLayer fusion;
    std::optional<LocalModelHandle> own_handle; // used for the own block when set
    std::string own_id;
};

inline std::vector<double> bagging_concat(const BaggingState& state, std::span<const double> x) {
    std::vector<double> c;
    c.reserve(state.fusion.in_width());
    for (const auto& id : state.order) {
        std::vector<double> p;
        if (id == state.own_id && state.own_handle)
            p = state.own_handle->predict_proba(x);
        else
            p = forward(state.peer_models.at(id), x).probs;
        c.insert(c.end(), p.begin(), p.end());
    }
    return c;
}

/// State with the averaging fusion map and no training; members ordered by id.
inline BaggingState bagging_init(const WrapperConfig& cfg, std::map<std::string, Model> peer_models) {
    BaggingState s;
    s.own_id = cfg.client_id;
    if (!peer_models.count(cfg.client_id)) {
        if (!cfg.local_model.model)
            throw FederationError("bagging: own model missing from the member set");
        peer_models.emplace(cfg.client_id, *cfg.local_model.model);
    }
    s.own_handle = cfg.local_model;
    const std::size_t n_classes = cfg.local_model.n_classes;
    for (const auto& [id, m] : peer_models) {
        if (m.spec.n_classes != n_classes)
            throw FederationError("bagging: model from '" + id + "' has " +
                                  std::to_string(m.spec.n_classes) + " classes, expected " +
                                  std::to_string(n_classes));
        if (m.spec.in_dim != cfg.local_model.in_dim)
            throw FederationError("bagging: model from '" + id + "' expects " +
                                  std::to_string(m.spec.in_dim) + " inputs");
        s.order.push_back(id);
    }
    s.peer_models = std::move(peer_models);
    s.fusion = FusionLayer::averaging(s.order.size(), n_classes);
    return s;
}

inline std::vector<double> bagging_predict(const BaggingState& state, std::span<const double> x) {
    return state.fusion.predict(bagging_concat(state, x));
}

/// Averaging-map initialization followed by cross-entropy SGD of the fusion layer on the
/// local training set.
inline BaggingState bagging_fit(const WrapperConfig& cfg, std::map<std::string, Model> peer_models) {
    auto state = bagging_init(cfg, std::move(peer_models));
    const auto& data = cfg.train_dataset;
    const TrainHp& hp = cfg.train;
    hp.validate();
    if (data.empty())
        throw InputError("bagging_fit: empty training set");

    const std::size_t width = state.fusion.in_width();
    std::vector<double> concat(data.n_rows() * width);
    for (std::size_t i = 0; i < data.n_rows(); ++i) {
        auto c = bagging_concat(state, data.row(i));
        std::copy(c.begin(), c.end(), concat.begin() + static_cast<std::ptrdiff_t>(i * width));
    }

    std::mt19937_64 rng(derive_seed(hp.seed, 0x62616767)); // "bagg"
    std::vector<std::size_t> order(data.n_rows());
    std::vector<std::span<const double>> inputs;
    std::vector<int> labels;
    std::vector<double> gw, gb;
    for (std::size_t epoch = 0; epoch < hp.local_epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t start = 0; start < order.size(); start += hp.batch_size) {
            const std::size_t end = std::min(order.size(), start + hp.batch_size);
            inputs.clear();
            labels.clear();
            for (std::size_t i = start; i < end; ++i) {
                inputs.emplace_back(concat.data() + order[i] * width, width);
                labels.push_back(data.labels[order[i]]);
            }
            const double l = state.fusion.loss_and_grad(inputs, labels, gw, gb);
            if (!std::isfinite(l))
                throw NumericalError("bagging_fit: non-finite loss at epoch " + std::to_string(epoch));
            for (std::size_t i = 0; i < gw.size(); ++i)
                state.fusion.weight[i] -= hp.learning_rate * (gw[i] + hp.l2 * state.fusion.weight[i]);
            for (std::size_t i = 0; i < gb.size(); ++i)
                state.fusion.bias[i] -= hp.learning_rate * gb[i];
        }
    }
    return state;
}

// ---------------------------------------------------------------------------------------
// Aggregator and inference

/// w * federated + (1 - w) * local.
inline std::vector<double> aggregate_outputs(std::span<const double> local_probs,
                                             std::span<const double> federated_probs,
                                             double fusion_weight) {
    if (local_probs.size() != federated_probs.size())
        throw InputError("aggregate_outputs: probability vectors differ in length");
    if (!(fusion_weight >= 0.0 && fusion_weight <= 1.0))
        throw InputError("aggregate_outputs: fusion_weight must lie in [0, 1]");
    std::vector<double> out(local_probs.size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = fusion_weight * federated_probs[i] + (1.0 - fusion_weight) * local_probs[i];
    return out;
}

/// Binary: positive iff p[1] >= threshold. Multiclass: argmax, lowest index on ties.
inline int decide_label(std::span<const double> probs, double threshold) {
    if (probs.size() == 2)
        return probs[1] >= threshold ? 1 : 0;
    return argmax(probs);
}

enum class WrapperPhase { Untrained, Training, Ready };

struct WrapperState {
    WrapperMode mode = WrapperMode::Stacking;
    WrapperPhase phase = WrapperPhase::Untrained;
    std::optional<StackingState> stacking;
    std::optional<BaggingState> bagging;

    bool ready() const { return phase == WrapperPhase::Ready; }
};

struct Inference {
    std::vector<double> probs;
    int label = 0;
};

/// Federated output alone (translator or bagging fusion), before the aggregator.
inline std::vector<double> federated_predict(const WrapperConfig& cfg, const WrapperState& state,
                                             std::span<const double> x) {
    if (!state.ready())
        throw LifecycleError(state.phase == WrapperPhase::Training
                                 ? "wrapper is training; inference is not available yet"
                                 : "wrapper has not been trained");
    if (state.mode == WrapperMode::Stacking)
        return stacking_predict(*state.stacking, cfg, x);
    return bagging_predict(*state.bagging, x);
}

/// Same interface as the local model: probabilities and a label under cfg.threshold.
inline Inference wrapper_infer(const WrapperConfig& cfg, const WrapperState& state,
                               std::span<const double> x) {
    auto fed = federated_predict(cfg, state, x);
    auto local = cfg.local_model.predict_proba(x);
    Inference r;
    r.probs = aggregate_outputs(local, fed, cfg.fusion_weight);
    r.label = decide_label(r.probs, cfg.threshold);
    return r;
}

} // namespace fedwrap
