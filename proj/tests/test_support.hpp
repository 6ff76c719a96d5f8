#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "dynmm/dynmm.hpp"

namespace dynmm::testing {

inline Tensor random_tensor(const Shape& shape, Rng& rng, bool requires_grad = true, double scale = 1.0) {
    std::normal_distribution<double> normal(0.0, scale);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = normal(rng);
    return Tensor(shape, std::move(v), requires_grad);
}

inline std::vector<double> random_values(std::size_t n, Rng& rng, double scale = 1.0) {
    std::normal_distribution<double> normal(0.0, scale);
    std::vector<double> v(n);
    for (auto& x : v) x = normal(rng);
    return v;
}

// Max over all leaf entries of |analytic - central| / (|analytic| + |central| + 1e-8).
// loss() must rebuild the graph from the leaves on every call.
inline double gradient_check(const std::function<Tensor()>& loss, std::vector<Tensor> leaves, double h = 1e-5) {
    for (auto& t : leaves) t.zero_grad();
    loss().backward();
    std::vector<std::vector<double>> analytic;
    for (auto& t : leaves) {
        if (t.has_grad()) {
            analytic.emplace_back(t.grad().begin(), t.grad().end());
        } else {
            analytic.emplace_back(t.numel(), 0.0);
        }
    }
    double worst = 0.0;
    for (std::size_t k = 0; k < leaves.size(); ++k) {
        auto data = leaves[k].mutable_data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double saved = data[i];
            data[i] = saved + h;
            const double fp = loss().item();
            data[i] = saved - h;
            const double fm = loss().item();
            data[i] = saved;
            const double numeric = (fp - fm) / (2.0 * h);
            const double a = analytic[k][i];
            worst = std::max(worst, std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-8));
        }
    }
    return worst;
}

// sum(out * R) for a fixed random R: a scalar readout that exercises every
// output entry with a distinct weight.
inline Tensor random_readout(const Tensor& out, const std::vector<double>& r) {
    return sum(mul(out, Tensor(out.shape(), r)));
}

inline ParameterList params_of(const Mlp& net) {
    ParameterList p;
    net.collect(p, "net");
    return p;
}

inline std::vector<Tensor> tensors_of(const ParameterList& params) {
    std::vector<Tensor> t;
    for (const auto& p : params) t.push_back(p.tensor);
    return t;
}

inline Batch batch_of(const Dataset& d, std::size_t n) {
    std::vector<std::size_t> idx(std::min(n, d.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return make_batch(d, idx);
}

}  // namespace dynmm::testing
