#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "fedwrap/dataset.hpp"
#include "fedwrap/error.hpp"

namespace fedwrap {

/// Rows are the true class, columns the predicted class.
struct ConfusionMatrix {
    std::size_t n_classes = 0;
    std::vector<std::uint64_t> counts;

    explicit ConfusionMatrix(std::size_t n = 0) : n_classes(n), counts(n * n, 0) {}

    std::uint64_t& at(std::size_t truth, std::size_t pred) { return counts[truth * n_classes + pred]; }
    std::uint64_t at(std::size_t truth, std::size_t pred) const {
        return counts[truth * n_classes + pred];
    }

    std::uint64_t total() const {
        std::uint64_t t = 0;
        for (auto c : counts)
            t += c;
        return t;
    }

    std::uint64_t trace() const {
        std::uint64_t t = 0;
        for (std::size_t c = 0; c < n_classes; ++c)
            t += at(c, c);
        return t;
    }

    friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

inline ConfusionMatrix confusion_from_labels(const std::vector<int>& truth,
                                             const std::vector<int>& pred, std::size_t n_classes) {
    if (truth.empty())
        throw EvaluationError("confusion: empty evaluation set");
    if (truth.size() != pred.size())
        throw EvaluationError("confusion: truth and prediction lengths differ");
    ConfusionMatrix cm(n_classes);
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (pred[i] < 0 || static_cast<std::size_t>(pred[i]) >= n_classes)
            throw EvaluationError("confusion: predicted label " + std::to_string(pred[i]) +
                                  " out of range");
        cm.at(static_cast<std::size_t>(truth[i]), static_cast<std::size_t>(pred[i]))++;
    }
    return cm;
}

/// Runs `predict(row) -> int` over every test row.
template <class Predict>
ConfusionMatrix confusion(Predict&& predict, const Dataset& test_set) {
    if (test_set.empty())
        throw EvaluationError("confusion: empty test set");
    std::vector<int> pred;
    pred.reserve(test_set.n_rows());
    for (std::size_t i = 0; i < test_set.n_rows(); ++i)
        pred.push_back(static_cast<int>(predict(test_set.row(i))));
    return confusion_from_labels(test_set.labels, pred, test_set.n_classes);
}

enum class MetricTask { BinaryPositive, MacroMulticlass };

struct ClassificationMetrics {
    double accuracy = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

namespace detail {

inline ClassificationMetrics class_prf(const ConfusionMatrix& cm, std::size_t c) {
    std::uint64_t tp = cm.at(c, c), fp = 0, fn = 0;
    for (std::size_t k = 0; k < cm.n_classes; ++k) {
        if (k == c)
            continue;
        fp += cm.at(k, c);
        fn += cm.at(c, k);
    }
    ClassificationMetrics m;
    m.precision = tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
    m.recall = tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
    m.f1 = m.precision + m.recall == 0.0 ? 0.0
                                         : 2.0 * m.precision * m.recall / (m.precision + m.recall);
    return m;
}

} // namespace detail

/// Binary tasks score the positive class (1); multiclass tasks macro-average.
/// Zero denominators yield 0 for precision, recall and F1.
inline ClassificationMetrics metrics_from_confusion(const ConfusionMatrix& cm, MetricTask task) {
    const auto total = cm.total();
    if (total == 0)
        throw EvaluationError("metrics: empty confusion matrix");
    ClassificationMetrics out;
    out.accuracy = static_cast<double>(cm.trace()) / static_cast<double>(total);
    if (task == MetricTask::BinaryPositive) {
        if (cm.n_classes != 2)
            throw InputError("metrics: BinaryPositive needs 2 classes, got " +
                             std::to_string(cm.n_classes));
        auto m = detail::class_prf(cm, 1);
        out.precision = m.precision;
        out.recall = m.recall;
        out.f1 = m.f1;
        return out;
    }
    for (std::size_t c = 0; c < cm.n_classes; ++c) {
        auto m = detail::class_prf(cm, c);
        out.precision += m.precision;
        out.recall += m.recall;
        out.f1 += m.f1;
    }
    const auto n = static_cast<double>(cm.n_classes);
    out.precision /= n;
    out.recall /= n;
    out.f1 /= n;
    return out;
}

inline MetricTask default_task(std::size_t n_classes) {
    return n_classes == 2 ? MetricTask::BinaryPositive : MetricTask::MacroMulticlass;
}

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;
};

/// Arithmetic mean and population standard deviation.
inline MeanStd mean_std(const std::vector<double>& v) {
    if (v.empty())
        return {};
    double mean = 0.0;
    for (double x : v)
        mean += x;
    mean /= static_cast<double>(v.size());
    double resid = 0.0;
    for (double x : v)
        resid += x - mean;
    mean += resid / static_cast<double>(v.size()); // corrects rounding in the first pass
    double var = 0.0;
    for (double x : v)
        var += (x - mean) * (x - mean);
    return {mean, std::sqrt(var / static_cast<double>(v.size()))};
}

struct AggregateMetrics {
    MeanStd accuracy, precision, recall, f1;
};

inline AggregateMetrics aggregate_clients(const std::vector<ClassificationMetrics>& reports) {
    if (reports.empty())
        throw EvaluationError("aggregate_clients: no client reports");
    std::vector<double> a, p, r, f;
    for (const auto& m : reports) {
        a.push_back(m.accuracy);
        p.push_back(m.precision);
        r.push_back(m.recall);
        f.push_back(m.f1);
    }
    return {mean_std(a), mean_std(p), mean_std(r), mean_std(f)};
}

struct ClientEvaluation {
    std::string client_id;
    std::string descriptor;
    ClassificationMetrics local;
    ClassificationMetrics wrapper;
    ClassificationMetrics translator; // federated output alone, before fusing with local
};

/// Table-style summary of one experimental setting.
struct MetricsReport {
    std::size_t n_clients = 0;
    std::string setting;
    std::vector<ClientEvaluation> per_client;
    AggregateMetrics local;
    AggregateMetrics wrapper;
    AggregateMetrics translator;
};

inline MetricsReport build_report(std::string setting, std::vector<ClientEvaluation> per_client) {
    std::vector<ClassificationMetrics> l, w, t;
    for (const auto& c : per_client) {
        l.push_back(c.local);
        w.push_back(c.wrapper);
        t.push_back(c.translator);
    }
    MetricsReport r;
    r.n_clients = per_client.size();
    r.setting = std::move(setting);
    r.local = aggregate_clients(l);
    r.wrapper = aggregate_clients(w);
    r.translator = aggregate_clients(t);
    r.per_client = std::move(per_client);
    return r;
}

namespace detail {
inline std::string fixed6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}
} // namespace detail

/// `n_clients,setting,metric,local_mean,local_std,wrapper_mean,wrapper_std`.
/// With `translator_only` the wrapper columns hold the un-fused federated output.
inline std::string report_csv(const std::vector<MetricsReport>& reports,
                              bool translator_only = false) {
    std::string out = "n_clients,setting,metric,local_mean,local_std,wrapper_mean,wrapper_std\n";
    for (const auto& r : reports) {
        const auto& w = translator_only ? r.translator : r.wrapper;
        const std::pair<const char*, std::pair<MeanStd, MeanStd>> rows[] = {
            {"accuracy", {r.local.accuracy, w.accuracy}},
            {"precision", {r.local.precision, w.precision}},
            {"recall", {r.local.recall, w.recall}},
            {"f1", {r.local.f1, w.f1}}};
        for (const auto& [name, lw] : rows)
            out += std::to_string(r.n_clients) + "," + r.setting + "," + name + "," +
                   detail::fixed6(lw.first.mean) + "," + detail::fixed6(lw.first.std) + "," +
                   detail::fixed6(lw.second.mean) + "," + detail::fixed6(lw.second.std) + "\n";
    }
    return out;
}

/// One line per client with all three model variants; input of `fedwrap report`.
inline std::string per_client_csv(const MetricsReport& r) {
    std::string out = "n_clients,setting,client_id,model,kind,accuracy,precision,recall,f1\n";
    for (const auto& c : r.per_client) {
        const std::pair<const char*, const ClassificationMetrics*> kinds[] = {
            {"local", &c.local}, {"wrapper", &c.wrapper}, {"translator", &c.translator}};
        for (const auto& [kind, m] : kinds)
            out += std::to_string(r.n_clients) + "," + r.setting + "," + c.client_id + "," +
                   c.descriptor + "," + kind + "," + detail::fixed6(m->accuracy) + "," +
                   detail::fixed6(m->precision) + "," + detail::fixed6(m->recall) + "," +
                   detail::fixed6(m->f1) + "\n";
    }
    return out;
}

} // namespace fedwrap
