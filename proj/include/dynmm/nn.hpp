#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <random>
#include <string>
#include <vector>

#include "dynmm/ops.hpp"
#include "dynmm/tensor.hpp"

namespace dynmm {

using Rng = std::mt19937_64;

struct Parameter {
    std::string name;
    Tensor tensor;
};

using ParameterList = std::vector<Parameter>;

struct LinearLayer {
    Tensor weight;  // [in x out]
    Tensor bias;    // [out]
    std::size_t in_dim = 0;
    std::size_t out_dim = 0;

    LinearLayer() = default;
    LinearLayer(std::size_t in, std::size_t out)
        : weight(Tensor::zeros({in, out}, true)), bias(Tensor::zeros({out}, true)), in_dim(in), out_dim(out) {}

    Tensor forward(const Tensor& x) const {
        if (x.rank() != 2 || x.dim(1) != in_dim) {
            throw DimensionError("linear " + std::to_string(in_dim) + "->" + std::to_string(out_dim) +
                                 " got input " + shape_str(x.shape()));
        }
        return affine(x, weight, bias);
    }

    std::uint64_t madds() const { return static_cast<std::uint64_t>(in_dim) * out_dim; }

    void collect(ParameterList& out, const std::string& prefix) const {
        out.push_back({prefix + ".weight", weight});
        out.push_back({prefix + ".bias", bias});
    }
};

// Affine layers with `activation` between them (not after the last).
struct Mlp {
    std::vector<LinearLayer> layers;
    Activation activation = Activation::relu;

    Mlp() = default;

    // dims = {in, hidden..., out}
    explicit Mlp(const std::vector<std::size_t>& dims, Activation act = Activation::relu) : activation(act) {
        if (dims.size() < 2) throw DimensionError("mlp needs at least input and output dims");
        for (auto d : dims) {
            if (d == 0) throw DimensionError("mlp dims must be positive");
        }
        for (std::size_t i = 0; i + 1 < dims.size(); ++i) layers.emplace_back(dims[i], dims[i + 1]);
    }

    std::size_t in_dim() const { return layers.front().in_dim; }
    std::size_t out_dim() const { return layers.back().out_dim; }

    Tensor forward(const Tensor& x) const {
        Tensor h = x;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            h = layers[i].forward(h);
            if (i + 1 < layers.size()) h = dynmm::activation(activation, h);
        }
        return h;
    }

    std::uint64_t madds() const {
        std::uint64_t total = 0;
        for (const auto& l : layers) total += l.madds();
        return total;
    }

    void collect(ParameterList& out, const std::string& prefix) const {
        for (std::size_t i = 0; i < layers.size(); ++i) layers[i].collect(out, prefix + ".layer" + std::to_string(i));
    }
};

inline Tensor mlp_forward(const Mlp& net, const Tensor& x) { return net.forward(x); }

// Channel-attention fusion: each stream is reweighted by a sigmoid gate
// from its own squeeze MLP (d -> d/r -> d), then the streams are added.
struct SeFusionBlock {
    Mlp squeeze_1;
    Mlp squeeze_2;
    std::size_t reduction = 4;

    SeFusionBlock() = default;
    SeFusionBlock(std::size_t dim, std::size_t r) : reduction(r) {
        if (r == 0 || dim % r != 0) {
            throw DimensionError("se_fuse: dim " + std::to_string(dim) + " not divisible by reduction " +
                                 std::to_string(r));
        }
        squeeze_1 = Mlp({dim, dim / r, dim});
        squeeze_2 = Mlp({dim, dim / r, dim});
    }

    std::size_t dim() const { return squeeze_1.in_dim(); }

    Tensor forward(const Tensor& x1, const Tensor& x2) const {
        if (x1.shape() != x2.shape()) {
            throw DimensionError("se_fuse: stream shapes differ " + shape_str(x1.shape()) + " vs " +
                                 shape_str(x2.shape()));
        }
        auto a = mul(x1, sigmoid(squeeze_1.forward(x1)));
        auto b = mul(x2, sigmoid(squeeze_2.forward(x2)));
        return add(a, b);
    }

    // two squeeze MLPs + two gating multiplies + the final add
    std::uint64_t madds() const { return squeeze_1.madds() + squeeze_2.madds() + 3 * dim(); }

    void collect(ParameterList& out, const std::string& prefix) const {
        squeeze_1.collect(out, prefix + ".squeeze1");
        squeeze_2.collect(out, prefix + ".squeeze2");
    }
};

inline Tensor se_fuse(const SeFusionBlock& block, const Tensor& x1, const Tensor& x2) {
    return block.forward(x1, x2);
}

// w[0]*x1 + w[1]*x2 with learnable w.
inline Tensor weighted_add(const Tensor& w, const Tensor& x1, const Tensor& x2) {
    if (w.numel() != 2) throw DimensionError("weighted_add: weights must have 2 entries");
    if (x1.shape() != x2.shape()) {
        throw DimensionError("weighted_add: shape mismatch " + shape_str(x1.shape()) + " vs " +
                             shape_str(x2.shape()));
    }
    return add(mul(pick(w, 0), x1), mul(pick(w, 1), x2));
}

// Weights ~ Uniform(-1/sqrt(in), 1/sqrt(in)), biases zero.
inline void init_uniform_fanin(LinearLayer& layer, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(layer.in_dim));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : layer.weight.mutable_data()) v = dist(rng);
    for (auto& v : layer.bias.mutable_data()) v = 0.0;
}

inline void init_parameters(Mlp& net, Rng& rng) {
    for (auto& l : net.layers) init_uniform_fanin(l, rng);
}

inline void init_parameters(Mlp& net, std::uint64_t seed) {
    Rng rng(seed);
    init_parameters(net, rng);
}

inline void init_parameters(SeFusionBlock& block, Rng& rng) {
    init_parameters(block.squeeze_1, rng);
    init_parameters(block.squeeze_2, rng);
}

inline std::size_t parameter_count(const ParameterList& params) {
    std::size_t n = 0;
    for (const auto& p : params) n += p.tensor.numel();
    return n;
}

// FNV-1a over the raw parameter bytes; used to assert frozen parameters.
inline std::uint64_t parameter_hash(const ParameterList& params) {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& p : params) {
        for (double v : p.tensor.data()) {
            std::uint64_t bits;
            static_assert(sizeof(bits) == sizeof(v));
            std::memcpy(&bits, &v, sizeof(bits));
            for (int b = 0; b < 8; ++b) {
                h ^= (bits >> (8 * b)) & 0xffU;
                h *= 1099511628211ULL;
            }
        }
    }
    return h;
}

inline void zero_grads(const ParameterList& params) {
    for (auto p : params) p.tensor.zero_grad();
}

}  // namespace dynmm
