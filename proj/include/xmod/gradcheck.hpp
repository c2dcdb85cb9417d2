#pragma once

// Central finite-difference verification of reverse-mode gradients (64-bit).

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "xmod/autodiff.hpp"
#include "xmod/rng.hpp"

namespace xmod::ad {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst;
    std::int64_t entries_checked = 0;
};

// `loss` rebuilds the graph from the current parameter values and returns a scalar. Each parameter is
// compared as a vector: ||analytic - numeric|| / max(||analytic||, ||numeric||, floor). When
// max_entries > 0 only that many deterministic, randomly chosen entries per parameter are probed.
inline GradCheckResult check_gradients(const std::function<Var<double>()>& loss,
                                       const std::vector<std::pair<std::string, Var<double>>>& params,
                                       double h = 1e-3, std::int64_t max_entries = 0, std::uint64_t seed = 0,
                                       double floor = 1e-10) {
    for (const auto& [name, p] : params) p.node()->grad = Tensor<double>();
    backward(loss());
    GradCheckResult result;
    for (std::size_t k = 0; k < params.size(); ++k) {
        const auto& [name, p] = params[k];
        auto& value = p.node()->value;
        const Tensor<double> analytic = p.grad().empty() ? Tensor<double>(value.shape()) : p.grad();
        std::vector<std::int64_t> idx;
        if (max_entries <= 0 || value.size() <= max_entries) {
            idx.resize(static_cast<std::size_t>(value.size()));
            for (std::int64_t i = 0; i < value.size(); ++i) idx[static_cast<std::size_t>(i)] = i;
        } else {
            CounterRng rng({seed, k});
            for (std::int64_t i = 0; i < max_entries; ++i) {
                idx.push_back(static_cast<std::int64_t>(rng.next_u64() % static_cast<std::uint64_t>(value.size())));
            }
        }
        double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
        NoGradGuard guard;
        for (auto i : idx) {
            const double saved = value[i];
            value[i] = saved + h;
            const double up = loss().value()[0];
            value[i] = saved - h;
            const double down = loss().value()[0];
            value[i] = saved;
            const double numeric = (up - down) / (2.0 * h);
            diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
            a2 += analytic[i] * analytic[i];
            n2 += numeric * numeric;
        }
        result.entries_checked += static_cast<std::int64_t>(idx.size());
        const double rel = std::sqrt(diff2) / std::max({std::sqrt(a2), std::sqrt(n2), floor});
        if (rel > result.max_rel_error || result.worst.empty()) {
            if (rel >= result.max_rel_error) {
                result.max_rel_error = rel;
                result.worst = name;
            }
        }
    }
    return result;
}

}  // namespace xmod::ad
