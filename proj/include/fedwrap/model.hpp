#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedwrap/dataset.hpp"
#include "fedwrap/error.hpp"

namespace fedwrap {

enum class ModelKind { LogisticRegression, Mlp3 };

inline std::string to_string(ModelKind k) {
    return k == ModelKind::LogisticRegression ? "lr" : "mlp3";
}

inline ModelKind model_kind_from_string(const std::string& s) {
    if (s == "lr" || s == "LR" || s == "logistic_regression")
        return ModelKind::LogisticRegression;
    if (s == "mlp3" || s == "MLP3" || s == "mlp")
        return ModelKind::Mlp3;
    throw ConfigError("unknown model kind '" + s + "'");
}

struct ModelSpec {
    ModelKind kind = ModelKind::LogisticRegression;
    std::size_t in_dim = 0;
    std::size_t hidden_dim = 0; // Mlp3 only
    std::size_t n_classes = 2;

    static ModelSpec logistic(std::size_t in_dim, std::size_t n_classes) {
        return {ModelKind::LogisticRegression, in_dim, 0, n_classes};
    }
    static ModelSpec mlp3(std::size_t in_dim, std::size_t hidden, std::size_t n_classes) {
        return {ModelKind::Mlp3, in_dim, hidden, n_classes};
    }

    void validate() const {
        if (in_dim < 1)
            throw ConfigError("model spec: in_dim must be >= 1");
        if (n_classes < 2)
            throw ConfigError("model spec: n_classes must be >= 2");
        if (kind == ModelKind::Mlp3 && hidden_dim < 1)
            throw ConfigError("model spec: hidden_dim must be >= 1 for mlp3");
    }

    /// (fan_in, fan_out) of each dense layer, input to output.
    std::vector<std::pair<std::size_t, std::size_t>> layer_dims() const {
        if (kind == ModelKind::LogisticRegression)
            return {{in_dim, n_classes}};
        return {{in_dim, hidden_dim}, {hidden_dim, hidden_dim}, {hidden_dim, hidden_dim},
                {hidden_dim, n_classes}};
    }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (auto [fan_in, fan_out] : layer_dims())
            n += fan_in * fan_out + fan_out;
        return n;
    }

    std::size_t feature_dim() const {
        return kind == ModelKind::LogisticRegression ? n_classes : hidden_dim;
    }

    /// Short architecture label, e.g. "LR" or "MLP-16".
    std::string descriptor() const {
        return kind == ModelKind::LogisticRegression ? "LR" : "MLP-" + std::to_string(hidden_dim);
    }

    friend bool operator==(const ModelSpec& a, const ModelSpec& b) {
        return a.kind == b.kind && a.in_dim == b.in_dim && a.n_classes == b.n_classes &&
               (a.kind == ModelKind::LogisticRegression || a.hidden_dim == b.hidden_dim);
    }
};

/// Named row-major tensor. Weights have shape {out, in}, biases {out}.
struct ParamBlock {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<double> values;

    std::size_t element_count() const {
        return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                               std::multiplies<>());
    }

    bool same_shape(const ParamBlock& o) const { return name == o.name && shape == o.shape; }
};

using Params = std::vector<ParamBlock>;

inline bool same_shapes(const Params& a, const Params& b) {
    if (a.size() != b.size())
        return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (!a[i].same_shape(b[i]) || a[i].values.size() != b[i].values.size())
            return false;
    return true;
}

/// Bit-for-bit comparison; distinguishes -0.0 from 0.0 and compares NaN payloads.
inline bool bitwise_equal(const Params& a, const Params& b) {
    if (!same_shapes(a, b))
        return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < a[i].values.size(); ++j)
            if (std::bit_cast<std::uint64_t>(a[i].values[j]) !=
                std::bit_cast<std::uint64_t>(b[i].values[j]))
                return false;
    return true;
}

inline double max_abs_diff(const Params& a, const Params& b) {
    if (!same_shapes(a, b))
        throw InputError("parameter shapes differ");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < a[i].values.size(); ++j)
            m = std::max(m, std::abs(a[i].values[j] - b[i].values[j]));
    return m;
}

/// Zero-valued blocks laid out for `spec`.
inline Params zero_params(const ModelSpec& spec) {
    Params p;
    const auto dims = spec.layer_dims();
    for (std::size_t l = 0; l < dims.size(); ++l) {
        auto [fan_in, fan_out] = dims[l];
        p.push_back({"layer" + std::to_string(l) + ".weight", {fan_out, fan_in},
                     std::vector<double>(fan_in * fan_out, 0.0)});
        p.push_back({"layer" + std::to_string(l) + ".bias", {fan_out},
                     std::vector<double>(fan_out, 0.0)});
    }
    return p;
}

struct Model {
    ModelSpec spec;
    Params params;
    std::uint64_t rng_seed = 0;

    std::size_t n_layers() const { return params.size() / 2; }
    const ParamBlock& weight(std::size_t l) const { return params[2 * l]; }
    const ParamBlock& bias(std::size_t l) const { return params[2 * l + 1]; }
    ParamBlock& weight(std::size_t l) { return params[2 * l]; }
    ParamBlock& bias(std::size_t l) { return params[2 * l + 1]; }

    /// Replace parameters, rejecting anything not laid out for this spec.
    void load(const Params& p) {
        if (!same_shapes(p, zero_params(spec)))
            throw FederationError("parameter blocks do not match model spec " +
                                  spec.descriptor());
        params = p;
    }
};

inline bool bitwise_equal(const Model& a, const Model& b) {
    return a.spec == b.spec && a.spec.hidden_dim == b.spec.hidden_dim &&
           a.rng_seed == b.rng_seed && bitwise_equal(a.params, b.params);
}

/// Glorot-uniform weights, zero biases.
inline Model init_model(const ModelSpec& spec, std::uint64_t seed) {
    spec.validate();
    Model m{spec, zero_params(spec), seed};
    std::mt19937_64 rng(seed);
    for (std::size_t l = 0; l < m.n_layers(); ++l) {
        auto& w = m.weight(l);
        const double fan_out = static_cast<double>(w.shape[0]);
        const double fan_in = static_cast<double>(w.shape[1]);
        const double s = std::sqrt(6.0 / (fan_in + fan_out));
        std::uniform_real_distribution<double> dist(-s, s);
        for (double& v : w.values)
            v = dist(rng);
    }
    return m;
}

struct ForwardResult {
    std::vector<double> logits;
    std::vector<double> probs;
    std::vector<double> features;
};

/// Max-subtracted softmax.
inline std::vector<double> softmax(std::span<const double> logits) {
    std::vector<double> p(logits.begin(), logits.end());
    if (p.empty())
        return p;
    const double mx = *std::max_element(p.begin(), p.end());
    double sum = 0.0;
    for (double& v : p) {
        v = std::exp(v - mx);
        sum += v;
    }
    for (double& v : p)
        v /= sum;
    return p;
}

namespace detail {

// Pre- and post-activation values of every layer for one input.
struct Trace {
    std::vector<std::vector<double>> activations; // [0] = input, [l+1] = output of layer l
    std::vector<std::vector<double>> pre;         // pre-activation of layer l
};

inline void dense(const ParamBlock& w, const ParamBlock& b, std::span<const double> in,
                  std::vector<double>& out) {
    const std::size_t n_out = w.shape[0];
    const std::size_t n_in = w.shape[1];
    out.assign(n_out, 0.0);
    for (std::size_t o = 0; o < n_out; ++o) {
        const double* row = w.values.data() + o * n_in;
        double acc = b.values[o];
        for (std::size_t i = 0; i < n_in; ++i)
            acc += row[i] * in[i];
        out[o] = acc;
    }
}

inline Trace run_layers(const Model& m, std::span<const double> x) {
    Trace t;
    const std::size_t L = m.n_layers();
    t.activations.reserve(L + 1);
    t.pre.resize(L);
    t.activations.emplace_back(x.begin(), x.end());
    for (std::size_t l = 0; l < L; ++l) {
        dense(m.weight(l), m.bias(l), t.activations.back(), t.pre[l]);
        std::vector<double> a = t.pre[l];
        if (l + 1 < L)
            for (double& v : a)
                v = v > 0.0 ? v : 0.0;
        t.activations.push_back(std::move(a));
    }
    return t;
}

inline void check_input(const Model& m, std::span<const double> x) {
    if (x.size() != m.spec.in_dim)
        throw InputError("input has " + std::to_string(x.size()) + " features, model expects " +
                         std::to_string(m.spec.in_dim));
}

} // namespace detail

inline ForwardResult forward(const Model& model, std::span<const double> x) {
    detail::check_input(model, x);
    auto t = detail::run_layers(model, x);
    ForwardResult r;
    r.logits = t.activations.back();
    r.probs = softmax(r.logits);
    if (model.spec.kind == ModelKind::LogisticRegression)
        r.features = r.logits;
    else
        r.features = t.activations[t.activations.size() - 2];
    return r;
}

struct LabeledRef {
    std::span<const double> x;
    int label;
};

inline std::vector<LabeledRef> as_batch(const Dataset& d) {
    std::vector<LabeledRef> b;
    b.reserve(d.n_rows());
    for (std::size_t i = 0; i < d.n_rows(); ++i)
        b.push_back({d.row(i), d.labels[i]});
    return b;
}

namespace detail {

inline double l2_term(const Model& m, double l2) {
    if (l2 == 0.0)
        return 0.0;
    double s = 0.0;
    for (std::size_t l = 0; l < m.n_layers(); ++l)
        for (double w : m.weight(l).values)
            s += w * w;
    return 0.5 * l2 * s;
}

inline void check_batch(const Model& m, std::span<const LabeledRef> batch) {
    if (batch.empty())
        throw InputError("empty batch");
    for (const auto& s : batch) {
        check_input(m, s.x);
        if (s.label < 0 || static_cast<std::size_t>(s.label) >= m.spec.n_classes)
            throw InputError("label " + std::to_string(s.label) + " out of range");
    }
}

inline double sample_ce(std::span<const double> logits, int label) {
    const double mx = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (double z : logits)
        sum += std::exp(z - mx);
    return mx + std::log(sum) - logits[static_cast<std::size_t>(label)];
}

} // namespace detail

/// Mean cross-entropy over the batch plus l2 * |W|^2 / 2 (weights only).
inline double loss(const Model& model, std::span<const LabeledRef> batch, double l2 = 0.0) {
    detail::check_batch(model, batch);
    double total = 0.0;
    for (const auto& s : batch) {
        auto t = detail::run_layers(model, s.x);
        total += detail::sample_ce(t.activations.back(), s.label);
    }
    return total / static_cast<double>(batch.size()) + detail::l2_term(model, l2);
}

struct LossAndGrad {
    double loss = 0.0;
    Params grad;
};

inline LossAndGrad loss_and_grad(const Model& model, std::span<const LabeledRef> batch,
                                 double l2 = 0.0) {
    detail::check_batch(model, batch);
    const std::size_t L = model.n_layers();
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    LossAndGrad out{0.0, zero_params(model.spec)};
    std::vector<double> delta, prev;

    for (const auto& s : batch) {
        auto t = detail::run_layers(model, s.x);
        const auto& logits = t.activations.back();
        out.loss += detail::sample_ce(logits, s.label);

        delta = softmax(logits);
        delta[static_cast<std::size_t>(s.label)] -= 1.0;
        for (double& d : delta)
            d *= inv_b;

        for (std::size_t l = L; l-- > 0;) {
            const auto& a_in = t.activations[l];
            auto& gw = out.grad[2 * l].values;
            auto& gb = out.grad[2 * l + 1].values;
            const std::size_t n_out = delta.size();
            const std::size_t n_in = a_in.size();
            for (std::size_t o = 0; o < n_out; ++o) {
                gb[o] += delta[o];
                double* row = gw.data() + o * n_in;
                for (std::size_t i = 0; i < n_in; ++i)
                    row[i] += delta[o] * a_in[i];
            }
            if (l == 0)
                break;
            const auto& w = model.weight(l).values;
            prev.assign(n_in, 0.0);
            for (std::size_t o = 0; o < n_out; ++o) {
                const double* row = w.data() + o * n_in;
                for (std::size_t i = 0; i < n_in; ++i)
                    prev[i] += row[i] * delta[o];
            }
            // ReLU derivative on the previous layer's pre-activation.
            for (std::size_t i = 0; i < n_in; ++i)
                if (t.pre[l - 1][i] <= 0.0)
                    prev[i] = 0.0;
            std::swap(delta, prev);
        }
    }
    out.loss *= inv_b;
    if (l2 != 0.0) {
        out.loss += detail::l2_term(model, l2);
        for (std::size_t l = 0; l < L; ++l) {
            auto& gw = out.grad[2 * l].values;
            const auto& w = model.weight(l).values;
            for (std::size_t i = 0; i < gw.size(); ++i)
                gw[i] += l2 * w[i];
        }
    }
    return out;
}

/// Analytic gradient of `loss` with respect to every parameter block.
inline Params grad(const Model& model, std::span<const LabeledRef> batch, double l2 = 0.0) {
    return loss_and_grad(model, batch, l2).grad;
}

struct TrainHp {
    double learning_rate = 0.05;
    std::size_t batch_size = 32;
    std::size_t local_epochs = 1;
    double l2 = 0.0;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
            throw ConfigError("learning_rate must be a finite non-negative number");
        if (batch_size < 1)
            throw ConfigError("batch_size must be >= 1");
        if (local_epochs < 1)
            throw ConfigError("local_epochs must be >= 1");
        if (!(l2 >= 0.0))
            throw ConfigError("l2 must be non-negative");
    }
};

struct TrainReport {
    Model model;
    double mean_loss = 0.0; // mean batch loss over the final epoch
};

/// Mini-batch SGD with a seeded shuffle per epoch.
inline TrainReport sgd_train_report(Model model, const Dataset& data, const TrainHp& hp) {
    hp.validate();
    if (data.empty())
        throw InputError("sgd_train: empty dataset");
    if (data.in_dim != model.spec.in_dim)
        throw InputError("sgd_train: dataset has " + std::to_string(data.in_dim) +
                         " features, model expects " + std::to_string(model.spec.in_dim));

    std::mt19937_64 rng(hp.seed);
    std::vector<std::size_t> order(data.n_rows());
    std::vector<LabeledRef> batch;
    double epoch_loss = 0.0;

    for (std::size_t epoch = 0; epoch < hp.local_epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), rng);
        epoch_loss = 0.0;
        std::size_t n_batches = 0;
        for (std::size_t start = 0; start < order.size(); start += hp.batch_size) {
            const std::size_t end = std::min(order.size(), start + hp.batch_size);
            batch.clear();
            for (std::size_t i = start; i < end; ++i)
                batch.push_back({data.row(order[i]), data.labels[order[i]]});
            auto lg = loss_and_grad(model, batch, hp.l2);
            if (!std::isfinite(lg.loss))
                throw NumericalError("sgd_train: non-finite loss at epoch " +
                                     std::to_string(epoch) + ", batch " +
                                     std::to_string(n_batches));
            for (std::size_t b = 0; b < model.params.size(); ++b) {
                auto& p = model.params[b].values;
                const auto& g = lg.grad[b].values;
                for (std::size_t i = 0; i < p.size(); ++i)
                    p[i] -= hp.learning_rate * g[i];
            }
            epoch_loss += lg.loss;
            ++n_batches;
        }
        epoch_loss /= static_cast<double>(n_batches);
    }
    return {std::move(model), epoch_loss};
}

inline Model sgd_train(Model model, const Dataset& data, const TrainHp& hp) {
    return sgd_train_report(std::move(model), data, hp).model;
}

inline int argmax(std::span<const double> v) {
    return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

inline double accuracy(const Model& m, const Dataset& d) {
    std::size_t hit = 0;
    for (std::size_t i = 0; i < d.n_rows(); ++i)
        if (argmax(forward(m, d.row(i)).probs) == d.labels[i])
            ++hit;
    return d.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(d.n_rows());
}

} // namespace fedwrap
