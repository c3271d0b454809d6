#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <string>

#include "demist/nn.hpp"

namespace demist::testutil {

inline double rel_err(double a, double b) {
    double denom = std::max({std::fabs(a), std::fabs(b), 1e-6});
    return std::fabs(a - b) / denom;
}

// Central finite-difference check of analytic gradients. `loss` rebuilds the
// forward pass from the current contents of `params` and returns the scalar
// loss. Checks up to `samples` elements per tensor; returns worst relative err.
inline double max_fd_rel_err(ParamStore& params, const std::function<double()>& loss,
                             const std::map<std::string, Tensor>& grads, int samples, uint64_t seed,
                             double h = 1e-5, std::string* worst_name = nullptr) {
    Rng rng(seed);
    double worst = 0.0;
    for (const auto& [name, g] : grads) {
        Tensor& w = params.at(name);
        int64_t n = w.numel();
        for (int s = 0; s < samples; ++s) {
            int64_t idx = (n <= samples) ? s : rng.uniform_int(0, n - 1);
            if (idx >= n) break;
            double orig = w[idx];
            double step = h * std::max(1.0, std::fabs(orig));
            w[idx] = orig + step;
            double fp = loss();
            w[idx] = orig - step;
            double fm = loss();
            w[idx] = orig;
            double fd = (fp - fm) / (2.0 * step);
            double e = rel_err(fd, g[idx]);
            if (e > worst) {
                worst = e;
                if (worst_name) *worst_name = name + "[" + std::to_string(idx) + "]";
            }
        }
    }
    return worst;
}

}  // namespace demist::testutil
