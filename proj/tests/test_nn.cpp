#include <gtest/gtest.h>

#include <cmath>

#include "test_support.hpp"

using namespace dynmm;
using dynmm::testing::gradient_check;
using dynmm::testing::params_of;
using dynmm::testing::random_readout;
using dynmm::testing::random_tensor;
using dynmm::testing::random_values;
using dynmm::testing::tensors_of;

TEST(Mlp, IdentityLayerPassesInputThrough) {
    Mlp net({3, 3});
    Tensor w = net.layers[0].weight;
    auto d = w.mutable_data();
    for (std::size_t i = 0; i < 3; ++i) d[i * 3 + i] = 1.0;
    auto x = Tensor::matrix(2, 3, {1, -2, 3, 0.5, 0, -7});
    auto y = mlp_forward(net, x);
    EXPECT_EQ(std::vector<double>(y.data().begin(), y.data().end()),
              std::vector<double>(x.data().begin(), x.data().end()));
}

TEST(Mlp, ZeroWeightsOutputBias) {
    Mlp net({4, 5, 1});
    Tensor b = net.layers[1].bias;
    b.mutable_data()[0] = 2.5;
    Rng rng(4);
    auto y = net.forward(random_tensor({6, 4}, rng, false));
    for (double v : y.data()) EXPECT_EQ(v, 2.5);
}

TEST(Mlp, NoActivationAfterLastLayer) {
    Mlp net({1, 1});
    Tensor b = net.layers[0].bias;
    b.mutable_data()[0] = -3.0;
    EXPECT_EQ(net.forward(Tensor::matrix(1, 1, {0})).item(), -3.0);
}

TEST(Mlp, DimensionMismatchThrows) {
    Mlp net({4, 2});
    EXPECT_THROW(net.forward(Tensor::zeros({3, 5})), DimensionError);
    EXPECT_THROW(Mlp({4}), DimensionError);
}

TEST(Mlp, LayerDimsChain) {
    Mlp net({7, 5, 3, 2});
    for (std::size_t i = 0; i + 1 < net.layers.size(); ++i) EXPECT_EQ(net.layers[i].out_dim, net.layers[i + 1].in_dim);
    EXPECT_EQ(net.layers[0].weight.shape(), (Shape{7, 5}));
    EXPECT_EQ(net.layers[0].bias.shape(), (Shape{5}));
}

TEST(Mlp, ThreeLayerGradientCheck) {
    for (int seed = 0; seed < 10; ++seed) {
        Mlp net({5, 6, 4, 3}, seed % 2 ? Activation::tanh : Activation::relu);
        init_parameters(net, seed);
        Rng rng(seed + 50);
        auto x = random_tensor({4, 5}, rng);
        auto r = random_values(12, rng);
        auto leaves = tensors_of(params_of(net));
        leaves.push_back(x);
        EXPECT_LT(gradient_check([&] { return random_readout(net.forward(x), r); }, leaves), 1e-4) << seed;
    }
}

TEST(Mlp, ParameterCountAndMaddsClosedForm) {
    Mlp net({32, 16, 2});
    EXPECT_EQ(parameter_count(params_of(net)), 32u * 16 + 16 + 16 * 2 + 2);
    EXPECT_EQ(net.madds(), 32u * 16 + 16 * 2);
    MacCounter counter;
    net.forward(Tensor::zeros({1, 32}));
    EXPECT_EQ(counter.count(), net.madds());
}

TEST(SeFuse, ZeroSqueezeGivesHalfSum) {
    SeFusionBlock block(8, 4);
    Rng rng(1);
    auto x1 = random_tensor({3, 8}, rng, false);
    auto x2 = random_tensor({3, 8}, rng, false);
    auto y = se_fuse(block, x1, x2);
    for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_DOUBLE_EQ(y[i], 0.5 * (x1[i] + x2[i]));
}

TEST(SeFuse, ZeroSecondStreamLeavesGatedFirst) {
    SeFusionBlock block(8, 2);
    Rng rng(2);
    init_parameters(block, rng);
    auto x1 = random_tensor({2, 8}, rng, false);
    auto y = se_fuse(block, x1, Tensor::zeros({2, 8}));
    auto gate1 = sigmoid(block.squeeze_1.forward(x1));
    for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_EQ(y[i], x1[i] * gate1[i]);
}

TEST(SeFuse, RejectsIndivisibleReduction) { EXPECT_THROW(SeFusionBlock(10, 4), DimensionError); }

TEST(SeFuse, GradientCheckAllParameters) {
    for (int seed = 0; seed < 10; ++seed) {
        SeFusionBlock block(8, 4);
        Rng rng(seed);
        init_parameters(block, rng);
        auto x1 = random_tensor({3, 8}, rng);
        auto x2 = random_tensor({3, 8}, rng);
        auto r = random_values(24, rng);
        ParameterList p;
        block.collect(p, "se");
        auto leaves = tensors_of(p);
        leaves.push_back(x1);
        leaves.push_back(x2);
        EXPECT_LT(gradient_check([&] { return random_readout(se_fuse(block, x1, x2), r); }, leaves), 1e-4) << seed;
    }
}

TEST(SeFuse, PermutationEquivariantOverBatch) {
    SeFusionBlock block(8, 4);
    Rng rng(5);
    init_parameters(block, rng);
    auto x1 = random_tensor({4, 8}, rng, false);
    auto x2 = random_tensor({4, 8}, rng, false);
    const std::vector<std::size_t> perm{2, 0, 3, 1};
    auto y = se_fuse(block, x1, x2);
    auto yp = se_fuse(block, gather_rows(x1, perm), gather_rows(x2, perm));
    auto expected = gather_rows(y, perm);
    for (std::size_t i = 0; i < yp.numel(); ++i) EXPECT_EQ(yp[i], expected[i]);
}

TEST(SeFuse, MaddsIncludeGatingAndAdd) {
    SeFusionBlock block(8, 4);
    EXPECT_EQ(block.madds(), 2u * (8 * 2 + 2 * 8) + 3 * 8);
    MacCounter counter;
    se_fuse(block, Tensor::zeros({1, 8}), Tensor::zeros({1, 8}));
    EXPECT_EQ(counter.count(), block.madds());
}

TEST(WeightedAdd, Examples) {
    auto x1 = Tensor::vector({1, 2, 3});
    auto x2 = Tensor::vector({10, 20, 30});
    auto a = weighted_add(Tensor::vector({1, 0}), x1, x2);
    auto b = weighted_add(Tensor::vector({1, 1}), x1, x2);
    auto s = add(x1, x2);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(a[i], x1[i]);
        EXPECT_EQ(b[i], s[i]);
    }
    EXPECT_THROW(weighted_add(Tensor::vector({1, 1}), x1, Tensor::vector({1, 2})), DimensionError);
}

TEST(WeightedAdd, GradientWrtWeightsIsReadoutOfStreams) {
    for (int seed = 0; seed < 10; ++seed) {
        Rng rng(seed);
        auto w = random_tensor({2}, rng);
        auto x1 = random_tensor({2, 4}, rng, false);
        auto x2 = random_tensor({2, 4}, rng, false);
        auto r = random_values(8, rng);
        EXPECT_LT(gradient_check([&] { return random_readout(weighted_add(w, x1, x2), r); }, {w}), 1e-4);
        w.zero_grad();
        random_readout(weighted_add(w, x1, x2), r).backward();
        double e0 = 0, e1 = 0;
        for (std::size_t i = 0; i < 8; ++i) {
            e0 += x1[i] * r[i];
            e1 += x2[i] * r[i];
        }
        EXPECT_NEAR(w.grad()[0], e0, 1e-12);
        EXPECT_NEAR(w.grad()[1], e1, 1e-12);
    }
}

TEST(Init, SameSeedSameBytesAndZeroBias) {
    Mlp a({6, 4, 2}), b({6, 4, 2});
    init_parameters(a, 11);
    init_parameters(b, 11);
    EXPECT_EQ(parameter_hash(params_of(a)), parameter_hash(params_of(b)));
    for (const auto& l : a.layers) {
        for (double v : l.bias.data()) EXPECT_EQ(v, 0.0);
    }
    Mlp c({6, 4, 2});
    init_parameters(c, 12);
    EXPECT_NE(parameter_hash(params_of(a)), parameter_hash(params_of(c)));
}

TEST(Init, FanInBounds) {
    Mlp one({1, 50});
    init_parameters(one, 3);
    double max_abs = 0.0;
    for (double v : one.layers[0].weight.data()) max_abs = std::max(max_abs, std::abs(v));
    EXPECT_LE(max_abs, 1.0);
    EXPECT_GT(max_abs, 0.9);  // 50 draws from U(-1,1)

    Mlp wide({16, 8});
    init_parameters(wide, 3);
    for (double v : wide.layers[0].weight.data()) EXPECT_LE(std::abs(v), 0.25);
}

TEST(Init, EmpiricalMeanWithinThreeSigma) {
    Mlp net({100, 100});
    init_parameters(net, 21);
    const auto w = net.layers[0].weight.data();
    double m = 0.0;
    for (double v : w) m += v;
    m /= static_cast<double>(w.size());
    // Uniform(-b, b) has std b/sqrt(3); mean of n draws has std b/sqrt(3n)
    const double b = 0.1;
    const double sigma = b / std::sqrt(3.0 * static_cast<double>(w.size()));
    EXPECT_LT(std::abs(m), 3.0 * sigma);
}

TEST(Parameters, ZeroGradsClears) {
    Mlp net({3, 2});
    init_parameters(net, 1);
    auto params = params_of(net);
    sum(net.forward(Tensor::filled({1, 3}, 1.0))).backward();
    EXPECT_TRUE(params[0].tensor.has_grad());
    zero_grads(params);
    for (const auto& p : params) EXPECT_FALSE(p.tensor.has_grad());
}
