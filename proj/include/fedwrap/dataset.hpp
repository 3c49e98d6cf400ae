#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "fedwrap/error.hpp"

namespace fedwrap {

/// Dense tabular classification data, row-major.
///
/// `row_ids` records the index of each row in the source file so that
/// partitions can be audited for disjointness after they are shuffled.
struct Dataset {
    std::size_t in_dim = 0;
    std::vector<double> features;
    std::vector<int> labels;
    std::size_t n_classes = 0;
    std::vector<std::string> feature_names;
    std::vector<std::size_t> row_ids;

    std::size_t n_rows() const noexcept { return labels.size(); }
    bool empty() const noexcept { return labels.empty(); }

    std::span<const double> row(std::size_t i) const {
        return {features.data() + i * in_dim, in_dim};
    }

    void push_back(std::span<const double> x, int label, std::size_t row_id) {
        features.insert(features.end(), x.begin(), x.end());
        labels.push_back(label);
        row_ids.push_back(row_id);
    }

    /// Copy of the rows at `indices` (positions in this dataset), same order.
    Dataset subset(std::span<const std::size_t> indices) const {
        Dataset out;
        out.in_dim = in_dim;
        out.n_classes = n_classes;
        out.feature_names = feature_names;
        out.features.reserve(indices.size() * in_dim);
        out.labels.reserve(indices.size());
        out.row_ids.reserve(indices.size());
        for (std::size_t i : indices)
            out.push_back(row(i), labels.at(i), row_ids.at(i));
        return out;
    }

    std::vector<std::size_t> class_counts() const {
        std::vector<std::size_t> counts(n_classes, 0);
        for (int y : labels)
            ++counts[static_cast<std::size_t>(y)];
        return counts;
    }

    void validate() const {
        if (labels.empty())
            throw InputError("dataset has no rows");
        if (in_dim == 0)
            throw InputError("dataset has zero feature columns");
        if (features.size() != labels.size() * in_dim)
            throw InputError("dataset feature matrix does not match n_rows x in_dim");
        if (row_ids.size() != labels.size())
            throw InputError("dataset row_ids length does not match n_rows");
        if (n_classes < 2)
            throw InputError("dataset must have at least 2 classes");
        for (double v : features)
            if (!std::isfinite(v))
                throw InputError("dataset contains a non-finite feature");
        for (int y : labels)
            if (y < 0 || static_cast<std::size_t>(y) >= n_classes)
                throw InputError("dataset label out of range: " + std::to_string(y));
    }
};

} // namespace fedwrap
