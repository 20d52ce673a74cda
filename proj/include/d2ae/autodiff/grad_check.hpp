#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "d2ae/autodiff/graph.hpp"

namespace d2ae {

struct GradCheckOptions {
    /// Check at most this many randomly chosen elements per parameter (0 = all).
    std::size_t max_elements_per_param = 0;
    std::uint64_t seed = 0;
};

/// Scalar loss built on a fresh graph with parameters bound through `Graph::param`.
template <typename T>
using LossBuilder = std::function<Var<T>(Graph<T>&)>;

/// Largest |analytic − central difference| / max(|analytic|, |numeric|, 1e-8) over the
/// checked parameter elements. Parameter gradients are left zeroed afterwards.
template <typename T>
double grad_check(const std::vector<Parameter<T>*>& params, const LossBuilder<T>& f, T eps,
                  GradCheckOptions opts = {}) {
    if (!(eps > T{0})) throw std::invalid_argument("grad_check: eps must be positive");
    for (auto* p : params) p->zero_grad();
    {
        Graph<T> g;
        Var<T> loss = f(g);
        g.backward(loss);
    }
    auto evaluate = [&]() {
        Graph<T> g(false);
        T v = f(g).value().item();
        if (!std::isfinite(v)) throw NonFiniteError("grad_check: non-finite loss");
        return v;
    };
    std::mt19937_64 rng(opts.seed);
    double worst = 0.0;
    for (auto* p : params) {
        if (!p->grad.all_finite()) throw NonFiniteError("grad_check: non-finite gradient in " + p->name());
        std::vector<std::size_t> idx(p->value.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        if (opts.max_elements_per_param && idx.size() > opts.max_elements_per_param) {
            std::shuffle(idx.begin(), idx.end(), rng);
            idx.resize(opts.max_elements_per_param);
        }
        for (auto i : idx) {
            const T orig = p->value[i];
            // Divide by the step actually taken; orig ± eps is rounded in T.
            const T hi = orig + eps, lo = orig - eps;
            p->value[i] = hi;
            const T up = evaluate();
            p->value[i] = lo;
            const T down = evaluate();
            p->value[i] = orig;
            const double numeric = (static_cast<double>(up) - static_cast<double>(down)) /
                                   (static_cast<double>(hi) - static_cast<double>(lo));
            const double analytic = p->grad[i];
            const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
            worst = std::max(worst, std::abs(analytic - numeric) / denom);
        }
    }
    for (auto* p : params) p->zero_grad();
    return worst;
}

}  // namespace d2ae
