#pragma once

// Test-only reference computations, kept independent of the code paths they check.

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "fedwrap/model.hpp"

namespace oracle {

/// Central finite-difference gradient of fedwrap::loss.
inline fedwrap::Params finite_difference_grad(const fedwrap::Model& model,
                                              std::span<const fedwrap::LabeledRef> batch,
                                              double l2, double h = 1e-5) {
    fedwrap::Params g = model.params;
    fedwrap::Model probe = model;
    for (std::size_t b = 0; b < probe.params.size(); ++b) {
        for (std::size_t i = 0; i < probe.params[b].values.size(); ++i) {
            const double orig = probe.params[b].values[i];
            probe.params[b].values[i] = orig + h;
            const double up = fedwrap::loss(probe, batch, l2);
            probe.params[b].values[i] = orig - h;
            const double down = fedwrap::loss(probe, batch, l2);
            probe.params[b].values[i] = orig;
            g[b].values[i] = (up - down) / (2.0 * h);
        }
    }
    return g;
}

/// Relative error with an absolute floor for coordinates that are essentially zero.
inline double relative_error(double analytic, double numeric) {
    const double scale = std::max(std::abs(analytic), std::abs(numeric));
    const double diff = std::abs(analytic - numeric);
    return scale < 1e-6 ? diff / 1e-6 : diff / scale;
}

inline double worst_relative_error(const fedwrap::Params& a, const fedwrap::Params& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < a[i].values.size(); ++j)
            worst = std::max(worst, relative_error(a[i].values[j], b[i].values[j]));
    return worst;
}

/// Elementwise weighted mean computed in long double, in input order.
struct WeightedInput {
    std::vector<std::vector<double>> blocks;
    std::size_t n_samples;
};

inline std::vector<std::vector<double>> weighted_mean(const std::vector<WeightedInput>& in) {
    long double total = 0;
    for (const auto& u : in)
        total += static_cast<long double>(u.n_samples);
    std::vector<std::vector<double>> out;
    for (std::size_t b = 0; b < in.front().blocks.size(); ++b) {
        std::vector<double> blk(in.front().blocks[b].size());
        for (std::size_t i = 0; i < blk.size(); ++i) {
            long double acc = 0;
            for (const auto& u : in)
                acc += static_cast<long double>(u.blocks[b][i]) *
                       static_cast<long double>(u.n_samples);
            blk[i] = static_cast<double>(acc / total);
        }
        out.push_back(std::move(blk));
    }
    return out;
}

/// Binary/multiclass metrics by recounting every (true, pred) pair.
struct PairCountMetrics {
    double accuracy, precision, recall, f1;
};

inline PairCountMetrics pair_count_metrics(const std::vector<int>& truth, const std::vector<int>& pred,
                                           int n_classes, bool binary_positive) {
    auto per_class = [&](int c) {
        long tp = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < truth.size(); ++i) {
            if (pred[i] == c && truth[i] == c) ++tp;
            if (pred[i] == c && truth[i] != c) ++fp;
            if (pred[i] != c && truth[i] == c) ++fn;
        }
        const double p = tp + fp == 0 ? 0.0 : double(tp) / double(tp + fp);
        const double r = tp + fn == 0 ? 0.0 : double(tp) / double(tp + fn);
        const double f = p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r);
        return std::array<double, 3>{p, r, f};
    };
    long hit = 0;
    for (std::size_t i = 0; i < truth.size(); ++i)
        if (truth[i] == pred[i]) ++hit;
    PairCountMetrics m{double(hit) / double(truth.size()), 0, 0, 0};
    if (binary_positive) {
        auto v = per_class(1);
        m.precision = v[0]; m.recall = v[1]; m.f1 = v[2];
    } else {
        for (int c = 0; c < n_classes; ++c) {
            auto v = per_class(c);
            m.precision += v[0]; m.recall += v[1]; m.f1 += v[2];
        }
        m.precision /= n_classes; m.recall /= n_classes; m.f1 /= n_classes;
    }
    return m;
}

} // namespace oracle
