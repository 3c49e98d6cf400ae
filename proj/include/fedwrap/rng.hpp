#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <utility>
#include <vector>

namespace fedwrap {

/// splitmix64 finalizer; turns (base, stream) into a decorrelated seed.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
    std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// One draw from Dirichlet(alpha * 1_k) via normalized Gamma(alpha, 1) variates.
/// Returns an empty vector if every variate underflowed to zero.
template <class Rng>
std::vector<double> sample_dirichlet(double alpha, std::size_t k, Rng& rng) {
    std::gamma_distribution<double> gamma(alpha, 1.0);
    std::vector<double> p(k);
    double sum = 0.0;
    for (double& v : p) {
        v = gamma(rng);
        sum += v;
    }
    if (!(sum > 0.0))
        return {};
    for (double& v : p)
        v /= sum;
    return p;
}

/// Integer allocation of `total` proportional to `shares` using the largest-remainder
/// method. Ties in the fractional part go to the lower index. Sums exactly to `total`.
inline std::vector<std::size_t> largest_remainder(const std::vector<double>& shares,
                                                  std::size_t total) {
    std::vector<std::size_t> out(shares.size());
    std::vector<std::pair<double, std::size_t>> rema;
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < shares.size(); ++i) {
        const double exact = shares[i] * static_cast<double>(total);
        const double fl = std::floor(exact);
        out[i] = static_cast<std::size_t>(fl);
        assigned += out[i];
        rema.emplace_back(exact - fl, i);
    }
    // Floating error can push the floor sum over total; trim from the smallest remainders.
    std::stable_sort(rema.begin(), rema.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    std::size_t i = 0;
    while (assigned < total) {
        ++out[rema[i % rema.size()].second];
        ++assigned;
        ++i;
    }
    for (std::size_t j = rema.size(); assigned > total && j-- > 0;) {
        auto& v = out[rema[j].second];
        if (v > 0) {
            --v;
            --assigned;
        }
    }
    return out;
}

} // namespace fedwrap
