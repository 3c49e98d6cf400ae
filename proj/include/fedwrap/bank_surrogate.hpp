#pragma once

// Synthetic stand-in for the UCI bank-marketing table, for offline runs.
// Same column names and types as bank-full.csv; the subscription label is drawn from a
// logistic model with nonlinear terms whose intercept is solved so that the expected
// positive rate equals `positive_rate`.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "fedwrap/csv.hpp"

namespace fedwrap {

inline Schema bank_schema() {
    Schema s;
    s.columns = {{"age", ColumnType::Numeric},        {"job", ColumnType::Categorical},
            {"marital", ColumnType::Categorical}, {"education", ColumnType::Categorical},
            {"default", ColumnType::Categorical}, {"balance", ColumnType::Numeric},
            {"housing", ColumnType::Categorical}, {"loan", ColumnType::Categorical},
            {"contact", ColumnType::Categorical}, {"day", ColumnType::Numeric},
            {"month", ColumnType::Categorical},   {"duration", ColumnType::Numeric},
            {"campaign", ColumnType::Numeric},    {"pdays", ColumnType::Numeric},
            {"previous", ColumnType::Numeric},    {"poutcome", ColumnType::Categorical},
            {"y", ColumnType::Label}};
    s.label_order = {"no", "yes"};
    return s;
}

namespace detail {

template <std::size_t N, class Rng>
std::size_t pick(const std::array<double, N>& weights, Rng& rng) {
    std::discrete_distribution<std::size_t> d(weights.begin(), weights.end());
    return d(rng);
}

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

} // namespace detail

inline Table make_bank_surrogate(std::size_t n_rows, std::uint64_t seed,
                                 double positive_rate = 0.117) {
    static const std::array<std::string, 12> jobs{
        "blue-collar", "management", "technician", "admin.", "services", "retired",
        "self-employed", "entrepreneur", "unemployed", "housemaid", "student", "unknown"};
    static constexpr std::array<double, 12> job_w{0.215, 0.209, 0.168, 0.114, 0.092, 0.050,
                                                  0.035, 0.033, 0.029, 0.027, 0.021, 0.007};
    static constexpr std::array<double, 12> job_effect{-0.35, 0.1, 0.0, 0.05, -0.2, 0.55,
                                                       0.0, -0.15, 0.3, -0.1, 0.7, 0.0};
    static const std::array<std::string, 3> maritals{"married", "single", "divorced"};
    static constexpr std::array<double, 3> marital_w{0.60, 0.28, 0.12};
    static const std::array<std::string, 4> educations{"secondary", "tertiary", "primary",
                                                       "unknown"};
    static constexpr std::array<double, 4> education_w{0.51, 0.29, 0.15, 0.05};
    static const std::array<std::string, 3> contacts{"cellular", "unknown", "telephone"};
    static constexpr std::array<double, 3> contact_w{0.65, 0.29, 0.06};
    static const std::array<std::string, 12> months{"jan", "feb", "mar", "apr", "may", "jun",
                                                    "jul", "aug", "sep", "oct", "nov", "dec"};
    static constexpr std::array<double, 12> month_w{0.031, 0.059, 0.011, 0.065, 0.304, 0.118,
                                                    0.153, 0.138, 0.013, 0.016, 0.088, 0.005};
    static constexpr std::array<double, 12> month_effect{-0.3, 0.2, 1.4, 0.3, -0.6, -0.1,
                                                         -0.2, -0.1, 1.3, 1.3, -0.2, 1.2};
    static const std::array<std::string, 3> poutcomes{"failure", "other", "success"};
    static constexpr std::array<double, 3> poutcome_w{0.5, 0.2, 0.3};

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd(0.0, 1.0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);

    struct Row {
        std::vector<std::string> cells;
        double score; // logit without intercept
    };
    std::vector<Row> rows;
    rows.reserve(n_rows);

    for (std::size_t i = 0; i < n_rows; ++i) {
        const double age = std::clamp(std::round(41.0 + 10.6 * nd(rng)), 18.0, 95.0);
        const auto job = detail::pick(job_w, rng);
        const auto marital = detail::pick(marital_w, rng);
        const auto education = detail::pick(education_w, rng);
        const bool in_default = unif(rng) < 0.018;
        const double balance = std::round(std::exp(6.6 + 1.3 * nd(rng)) - 350.0);
        const bool housing = unif(rng) < 0.56;
        const bool loan = unif(rng) < 0.16;
        const auto contact = detail::pick(contact_w, rng);
        const int day = 1 + static_cast<int>(unif(rng) * 31.0);
        const auto month = detail::pick(month_w, rng);
        const double duration = std::max(1.0, std::round(-258.0 * std::log(1.0 - unif(rng))));
        const int campaign = 1 + static_cast<int>(std::floor(std::log(1.0 - unif(rng)) /
                                                             std::log(1.0 - 1.0 / 2.7)));
        const bool contacted_before = unif(rng) < 0.18;
        const int pdays = contacted_before ? 1 + static_cast<int>(unif(rng) * 400.0) : -1;
        std::poisson_distribution<int> prev_d(2.0);
        const int previous = contacted_before ? 1 + prev_d(rng) : 0;
        const std::string poutcome =
            contacted_before ? poutcomes[detail::pick(poutcome_w, rng)] : "unknown";

        double s = 1.6 * (std::log(duration) - 5.2);
        s += poutcome == "success" ? 2.2 : (poutcome == "failure" ? -0.2 : 0.0);
        s += contact == 0 ? 0.5 : (contact == 1 ? -0.7 : 0.0);
        s += housing ? -0.6 : 0.0;
        s += loan ? -0.4 : 0.0;
        s += month_effect[month];
        s += job_effect[job];
        s += education == 1 ? 0.3 : (education == 2 ? -0.2 : 0.0);
        s += marital == 1 ? 0.2 : 0.0;
        s += (age < 25.0 || age > 60.0) ? 0.6 : 0.0;
        s += -0.12 * static_cast<double>(campaign - 1);
        s += (balance > 1500.0 && !housing) ? 0.5 : 0.0;
        s += in_default ? -0.4 : 0.0;

        rows.push_back({{format_double(age), jobs[job], maritals[marital],
                         educations[education], in_default ? "yes" : "no",
                         format_double(balance), housing ? "yes" : "no", loan ? "yes" : "no",
                         contacts[contact], std::to_string(day), months[month],
                         format_double(duration), std::to_string(campaign),
                         std::to_string(pdays), std::to_string(previous), poutcome, ""},
                        s});
    }

    // Bisection on the intercept so the mean subscription probability hits the target.
    double lo = -30.0, hi = 30.0;
    for (int it = 0; it < 100; ++it) {
        const double mid = 0.5 * (lo + hi);
        double mean = 0.0;
        for (const auto& r : rows)
            mean += detail::sigmoid(mid + r.score);
        mean /= static_cast<double>(rows.size());
        (mean < positive_rate ? lo : hi) = mid;
    }
    const double intercept = 0.5 * (lo + hi);

    Table t;
    t.header = {"age",   "job",   "marital",  "education", "default", "balance",
                "housing", "loan", "contact", "day",       "month",   "duration",
                "campaign", "pdays", "previous", "poutcome", "y"};
    for (auto& r : rows) {
        r.cells.back() = unif(rng) < detail::sigmoid(intercept + r.score) ? "yes" : "no";
        t.rows.push_back(std::move(r.cells));
    }
    return t;
}

} // namespace fedwrap
