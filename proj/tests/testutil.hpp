#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "dtmi/nn.hpp"
#include "dtmi/rng.hpp"
#include "dtmi/tensor.hpp"

namespace dtmi::testutil {

inline Tensor<double> rand_tensor(Shape shape, Rng& rng, double scale = 1.0,
                                  bool requires_grad = true) {
    auto t = make_tensor<double>(std::move(shape));
    for (auto& v : t->v) v = rng.uniform(-scale, scale);
    t->requires_grad = requires_grad;
    return t;
}

// Fixed random projection to a scalar; breaks symmetry so gradients are
// informative in every element. The weights depend only on the seed and the
// shape, so rebuilding the graph (finite differences) sees the same loss.
inline Tensor<double> weighted_sum(const Tensor<double>& t, std::uint64_t seed) {
    Rng wrng(seed * 0x2545F4914F6CDD1Dull + 17);
    auto w = make_tensor<double>(t->shape);
    for (auto& v : w->v) v = wrng.uniform(-1.0, 1.0);
    return sum_all(mul(t, w));
}

inline double rel_err(double a, double b) {
    const double denom = std::max({std::abs(a), std::abs(b), 1e-8});
    return std::abs(a - b) / denom;
}

// Central finite differences on every element of every listed parameter.
// build() must reconstruct the graph from the parameters' current values.
struct GradCheckResult {
    double max_rel_err = 0.0;
    long checked = 0;
};

inline GradCheckResult check_gradients(const std::function<Tensor<double>()>& build,
                                       const std::vector<Tensor<double>>& params,
                                       double step = 1e-5, int stride = 1) {
    for (auto& p : params) p->zero_grad();
    auto loss = build();
    backward(loss);

    GradCheckResult res;
    for (const auto& p : params) {
        for (std::size_t i = 0; i < p->v.size(); i += static_cast<std::size_t>(stride)) {
            const double saved = p->v[i];
            p->v[i] = saved + step;
            const double up = [&] { NoGradGuard ng; return build()->v[0]; }();
            p->v[i] = saved - step;
            const double dn = [&] { NoGradGuard ng; return build()->v[0]; }();
            p->v[i] = saved;
            const double fd = (up - dn) / (2.0 * step);
            const double an = p->g.empty() ? 0.0 : p->g[i];
            res.max_rel_err = std::max(res.max_rel_err, rel_err(fd, an));
            ++res.checked;
        }
    }
    return res;
}

}  // namespace dtmi::testutil
