#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedwrap/dataset.hpp"
#include "fedwrap/error.hpp"
#include "fedwrap/rng.hpp"

namespace fedwrap {

enum class PartitionMode { Imbalanced, NonIid, BankImbalanced };

inline std::string to_string(PartitionMode m) {
    switch (m) {
    case PartitionMode::Imbalanced: return "imbalanced";
    case PartitionMode::NonIid: return "non-iid";
    case PartitionMode::BankImbalanced: return "bank";
    }
    return "?";
}

inline PartitionMode partition_mode_from_string(const std::string& s) {
    if (s == "imbalanced")
        return PartitionMode::Imbalanced;
    if (s == "non-iid" || s == "noniid" || s == "non_iid")
        return PartitionMode::NonIid;
    if (s == "bank" || s == "bank-imbalanced")
        return PartitionMode::BankImbalanced;
    throw ConfigError("unknown partition mode '" + s + "'");
}

struct PartitionSpec {
    std::size_t n_clients = 10;
    double alpha = 0.5;
    PartitionMode mode = PartitionMode::NonIid;
    std::uint64_t seed = 0;
    double test_fraction = 0.1;

    void validate() const {
        if (n_clients < 2)
            throw ConfigError("partition: n_clients must be >= 2");
        if (!(alpha > 0.0) || !std::isfinite(alpha))
            throw ConfigError("partition: alpha must be a positive number");
        if (!(test_fraction > 0.0 && test_fraction < 1.0))
            throw ConfigError("partition: test_fraction must lie in (0, 1)");
    }
};

struct Partition {
    std::vector<Dataset> client_datasets;
    Dataset test_set;
    PartitionSpec spec;
};

inline constexpr int kMaxPartitionRetries = 100;

/// Carves a class-balanced test set: floor(test_fraction * n_rows / n_classes) rows of every
/// class, chosen uniformly. Both halves keep source row order.
inline std::pair<Dataset, Dataset> split_test(const Dataset& data, double test_fraction,
                                              std::uint64_t seed) {
    const auto counts = data.class_counts();
    for (std::size_t c = 0; c < counts.size(); ++c)
        if (counts[c] < 2)
            throw PartitionError("split_test: class " + std::to_string(c) + " has " +
                                 std::to_string(counts[c]) + " rows, need at least 2");
    const auto m = static_cast<std::size_t>(
        std::floor(test_fraction * static_cast<double>(data.n_rows()) /
                   static_cast<double>(data.n_classes)));
    if (m == 0)
        throw PartitionError("split_test: test_fraction yields 0 test rows per class");

    std::mt19937_64 rng(seed);
    std::vector<char> in_test(data.n_rows(), 0);
    for (std::size_t c = 0; c < data.n_classes; ++c) {
        if (counts[c] < m)
            throw PartitionError("split_test: class " + std::to_string(c) + " has " +
                                 std::to_string(counts[c]) + " rows, cannot supply " +
                                 std::to_string(m));
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < data.n_rows(); ++i)
            if (static_cast<std::size_t>(data.labels[i]) == c)
                idx.push_back(i);
        std::shuffle(idx.begin(), idx.end(), rng);
        for (std::size_t k = 0; k < m; ++k)
            in_test[idx[k]] = 1;
    }
    std::vector<std::size_t> train_idx, test_idx;
    for (std::size_t i = 0; i < data.n_rows(); ++i)
        (in_test[i] ? test_idx : train_idx).push_back(i);
    return {data.subset(train_idx), data.subset(test_idx)};
}

namespace detail {

inline std::vector<std::size_t> indices_of_class(const Dataset& d, std::size_t c) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < d.n_rows(); ++i)
        if (static_cast<std::size_t>(d.labels[i]) == c)
            idx.push_back(i);
    return idx;
}

inline Partition assemble(const Dataset& pool, const PartitionSpec& spec,
                          std::vector<std::vector<std::size_t>> per_client) {
    Partition p;
    p.spec = spec;
    for (auto& idx : per_client) {
        std::sort(idx.begin(), idx.end());
        p.client_datasets.push_back(pool.subset(idx));
    }
    return p;
}

inline std::uint64_t partition_stream_seed(const PartitionSpec& spec) {
    return derive_seed(spec.seed, 0x70617274); // "part"
}

} // namespace detail

/// Client sizes from Dirichlet(alpha); rows drawn uniformly without replacement, so
/// class proportions follow the pool.
inline Partition partition_imbalanced(const Dataset& pool, const PartitionSpec& spec) {
    spec.validate();
    if (spec.mode != PartitionMode::Imbalanced)
        throw PartitionError("partition_imbalanced called with mode " + to_string(spec.mode));
    std::mt19937_64 rng(detail::partition_stream_seed(spec));
    const std::size_t N = pool.n_rows();
    for (int attempt = 0; attempt < kMaxPartitionRetries; ++attempt) {
        auto p = sample_dirichlet(spec.alpha, spec.n_clients, rng);
        if (p.empty())
            continue;
        auto sizes = largest_remainder(p, N);
        if (std::find(sizes.begin(), sizes.end(), 0) != sizes.end())
            continue;
        std::vector<std::size_t> order(N);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), rng);
        std::vector<std::vector<std::size_t>> per_client(spec.n_clients);
        std::size_t pos = 0;
        for (std::size_t c = 0; c < spec.n_clients; ++c) {
            per_client[c].assign(order.begin() + static_cast<std::ptrdiff_t>(pos),
                                 order.begin() + static_cast<std::ptrdiff_t>(pos + sizes[c]));
            pos += sizes[c];
        }
        return detail::assemble(pool, spec, std::move(per_client));
    }
    throw PartitionError("partition_imbalanced: a client received 0 rows after " +
                         std::to_string(kMaxPartitionRetries) + " draws");
}

/// Per-class Dirichlet(alpha) allocation of that class's rows across clients.
inline Partition partition_noniid(const Dataset& pool, const PartitionSpec& spec) {
    spec.validate();
    if (spec.mode != PartitionMode::NonIid)
        throw PartitionError("partition_noniid called with mode " + to_string(spec.mode));
    std::mt19937_64 rng(detail::partition_stream_seed(spec));
    for (int attempt = 0; attempt < kMaxPartitionRetries; ++attempt) {
        std::vector<std::vector<std::size_t>> per_client(spec.n_clients);
        bool underflow = false;
        for (std::size_t c = 0; c < pool.n_classes && !underflow; ++c) {
            auto idx = detail::indices_of_class(pool, c);
            auto q = sample_dirichlet(spec.alpha, spec.n_clients, rng);
            if (q.empty()) {
                underflow = true;
                break;
            }
            auto counts = largest_remainder(q, idx.size());
            std::shuffle(idx.begin(), idx.end(), rng);
            std::size_t pos = 0;
            for (std::size_t k = 0; k < spec.n_clients; ++k) {
                per_client[k].insert(per_client[k].end(), idx.begin() + static_cast<std::ptrdiff_t>(pos),
                                     idx.begin() + static_cast<std::ptrdiff_t>(pos + counts[k]));
                pos += counts[k];
            }
        }
        if (underflow)
            continue;
        const bool any_empty = std::any_of(per_client.begin(), per_client.end(),
                                           [](const auto& v) { return v.empty(); });
        if (any_empty)
            continue;
        return detail::assemble(pool, spec, std::move(per_client));
    }
    throw PartitionError("partition_noniid: a client received 0 rows after " +
                         std::to_string(kMaxPartitionRetries) + " draws");
}

/// Positive (label 1) counts follow Dirichlet(alpha); every client is then padded with
/// uniformly drawn negatives up to floor(N / n_clients) rows.
inline Partition partition_bank(const Dataset& pool, const PartitionSpec& spec) {
    spec.validate();
    if (spec.mode != PartitionMode::BankImbalanced)
        throw PartitionError("partition_bank called with mode " + to_string(spec.mode));
    if (pool.n_classes != 2)
        throw PartitionError("partition_bank requires binary labels");
    std::mt19937_64 rng(detail::partition_stream_seed(spec));
    const std::size_t S = pool.n_rows() / spec.n_clients;
    auto positives = detail::indices_of_class(pool, 1);
    auto negatives = detail::indices_of_class(pool, 0);
    if (positives.size() > negatives.size())
        throw PartitionError("partition_bank: positives (label 1) must be the minority class");

    for (int attempt = 0; attempt < kMaxPartitionRetries; ++attempt) {
        auto q = sample_dirichlet(spec.alpha, spec.n_clients, rng);
        if (q.empty())
            continue;
        auto pos_counts = largest_remainder(q, positives.size());
        const auto worst = *std::max_element(pos_counts.begin(), pos_counts.end());
        if (worst > S)
            continue;
        std::size_t need = 0;
        for (auto k : pos_counts)
            need += S - k;
        if (need > negatives.size())
            throw PartitionError("partition_bank: need " + std::to_string(need) +
                                 " negatives to pad, pool has " +
                                 std::to_string(negatives.size()));
        auto pos_idx = positives;
        auto neg_idx = negatives;
        std::shuffle(pos_idx.begin(), pos_idx.end(), rng);
        std::shuffle(neg_idx.begin(), neg_idx.end(), rng);
        std::vector<std::vector<std::size_t>> per_client(spec.n_clients);
        std::size_t pp = 0, np = 0;
        for (std::size_t k = 0; k < spec.n_clients; ++k) {
            auto& v = per_client[k];
            v.insert(v.end(), pos_idx.begin() + static_cast<std::ptrdiff_t>(pp),
                     pos_idx.begin() + static_cast<std::ptrdiff_t>(pp + pos_counts[k]));
            pp += pos_counts[k];
            const std::size_t pad = S - pos_counts[k];
            v.insert(v.end(), neg_idx.begin() + static_cast<std::ptrdiff_t>(np),
                     neg_idx.begin() + static_cast<std::ptrdiff_t>(np + pad));
            np += pad;
        }
        return detail::assemble(pool, spec, std::move(per_client));
    }
    throw PartitionError("partition_bank: a client was assigned more positives than the "
                         "per-client size " + std::to_string(S) + " in every draw");
}

inline Partition partition_pool(const Dataset& pool, const PartitionSpec& spec) {
    switch (spec.mode) {
    case PartitionMode::Imbalanced: return partition_imbalanced(pool, spec);
    case PartitionMode::NonIid: return partition_noniid(pool, spec);
    case PartitionMode::BankImbalanced: return partition_bank(pool, spec);
    }
    throw PartitionError("unknown partition mode");
}

/// Balanced test split followed by the chosen partitioner over the remaining pool.
inline Partition make_partition(const Dataset& data, const PartitionSpec& spec) {
    spec.validate();
    data.validate();
    auto [pool, test] = split_test(data, spec.test_fraction, spec.seed);
    auto p = partition_pool(pool, spec);
    p.test_set = std::move(test);
    return p;
}

struct HistogramRow {
    std::size_t client_id;
    std::size_t class_id;
    std::size_t count;
};

inline std::vector<HistogramRow> class_histogram(const Partition& p) {
    std::vector<HistogramRow> rows;
    for (std::size_t k = 0; k < p.client_datasets.size(); ++k) {
        const auto counts = p.client_datasets[k].class_counts();
        for (std::size_t c = 0; c < counts.size(); ++c)
            rows.push_back({k, c, counts[c]});
    }
    return rows;
}

inline std::string histogram_csv(const std::vector<HistogramRow>& rows) {
    std::string out = "client_id,class_id,count\n";
    for (const auto& r : rows)
        out += std::to_string(r.client_id) + "," + std::to_string(r.class_id) + "," +
               std::to_string(r.count) + "\n";
    return out;
}

/// Mean total-variation distance between every pair of client class distributions.
inline double mean_pairwise_tv(const Partition& p) {
    std::vector<std::vector<double>> dist;
    for (const auto& d : p.client_datasets) {
        auto counts = d.class_counts();
        std::vector<double> q(counts.size());
        for (std::size_t c = 0; c < counts.size(); ++c)
            q[c] = static_cast<double>(counts[c]) / static_cast<double>(d.n_rows());
        dist.push_back(std::move(q));
    }
    double total = 0.0;
    std::size_t pairs = 0;
    for (std::size_t a = 0; a < dist.size(); ++a)
        for (std::size_t b = a + 1; b < dist.size(); ++b) {
            double tv = 0.0;
            for (std::size_t c = 0; c < dist[a].size(); ++c)
                tv += std::abs(dist[a][c] - dist[b][c]);
            total += 0.5 * tv;
            ++pairs;
        }
    return pairs ? total / static_cast<double>(pairs) : 0.0;
}

inline nlohmann::json partition_manifest(const Partition& p) {
    nlohmann::json clients = nlohmann::json::array();
    for (std::size_t k = 0; k < p.client_datasets.size(); ++k)
        clients.push_back({{"client_id", std::to_string(k)},
                           {"rows", p.client_datasets[k].row_ids}});
    return {{"mode", to_string(p.spec.mode)},
            {"alpha", p.spec.alpha},
            {"seed", p.spec.seed},
            {"n_clients", p.spec.n_clients},
            {"test_fraction", p.spec.test_fraction},
            {"n_classes", p.test_set.n_classes},
            {"clients", std::move(clients)},
            {"test_rows", p.test_set.row_ids}};
}

} // namespace fedwrap
