#include <gtest/gtest.h>

#include <set>

#include "test_support.hpp"

using namespace dynmm;
using dynmm::testing::random_tensor;

namespace {

FusionNetwork small_net(std::uint64_t seed = 0, std::size_t cells = 4,
                        std::vector<FusionOpKind> ops = {FusionOpKind::identity, FusionOpKind::se_fuse}) {
    FusionNetConfig cfg;
    cfg.input_dims = {6, 5};
    cfg.dim = 8;
    cfg.cells = cells;
    cfg.ops = std::move(ops);
    cfg.seed = seed;
    return build_fusion_network(cfg);
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

// Gate logits scaled up so samples spread over many paths.
void sharpen_gate(FusionNetwork& net, double factor) {
    for (auto& v : net.global_gate.body.layers[0].weight.mutable_data()) v *= factor;
}

}  // namespace

TEST(DecisionToArchitecture, Examples) {
    auto net = small_net();
    auto all_id = decision_to_architecture({0, 0, 0, 0}, net.cells);
    EXPECT_EQ(all_id.run_block_2, (std::vector<bool>{true, false, false, false}));
    auto late = decision_to_architecture({0, 0, 0, 1}, net.cells);
    EXPECT_EQ(late.run_block_2, (std::vector<bool>{true, true, true, true}));
    auto early = decision_to_architecture({1, 1, 0, 0}, net.cells);
    EXPECT_EQ(early.run_block_2, (std::vector<bool>{true, true, false, false}));
    EXPECT_EQ(early.ops, (std::vector<std::size_t>{1, 1, 0, 0}));
    EXPECT_THROW(decision_to_architecture({0, 0, 0}, net.cells), DimensionError);
    EXPECT_THROW(decision_to_architecture({0, 0, 0, 2}, net.cells), DimensionError);
}

TEST(FusionForward, EarlyFusionSkipsLaterModalityTwoBlocks) {
    auto net = small_net(1);
    Rng rng(2);
    auto x1 = random_tensor({5, 6}, rng, false);
    auto x2 = random_tensor({5, 5}, rng, false);
    auto out = fusion_forward(net, x1, x2, GateMode::hard_inference, 1.0, nullptr, {true, std::vector<std::size_t>{1, 1, 0, 0}});
    std::uint64_t expected = net.head.madds() + 2 * net.cells[0].cost_madds[1];
    for (std::size_t j = 0; j < 4; ++j) expected += net.blocks_1[j].madds() + (j < 2 ? net.blocks_2[j].madds() : 0);
    for (auto c : out.cost) EXPECT_EQ(c, expected);

    MacCounter counter;
    fusion_forward(net, x1, x2, GateMode::hard_inference, 1.0, nullptr, {true, std::vector<std::size_t>{1, 1, 0, 0}});
    EXPECT_EQ(counter.count(), 5 * expected);
}

TEST(FusionForward, AllIdentityEqualsModalityOnePipeline) {
    auto net = small_net(2);
    Rng rng(3);
    auto x1 = random_tensor({7, 6}, rng, false);
    auto x2 = random_tensor({7, 5}, rng, false);
    auto out = fusion_forward(net, x1, x2, GateMode::hard_inference, 1.0, nullptr, {true, std::vector<std::size_t>{0, 0, 0, 0}});
    Tensor s = x1;
    for (const auto& b : net.blocks_1) s = relu(b.forward(s));
    EXPECT_EQ(values(out.y), values(net.head.forward(s)));
    // changing modality 2 has no effect on an all-identity path
    auto other = fusion_forward(net, x1, random_tensor({7, 5}, rng, false), GateMode::hard_inference, 1.0, nullptr,
                                {true, std::vector<std::size_t>{0, 0, 0, 0}});
    EXPECT_EQ(values(other.y), values(out.y));
}

TEST(FusionForward, SkippingDeadBlocksDoesNotChangeOutputs) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        auto net = small_net(seed);
        sharpen_gate(net, 30.0);
        Rng rng(seed + 100);
        auto x1 = random_tensor({100, 6}, rng, false);
        auto x2 = random_tensor({100, 5}, rng, false);
        auto skip = fusion_forward(net, x1, x2, GateMode::hard_inference, 1.0, nullptr, {true, std::nullopt});
        auto full = fusion_forward(net, x1, x2, GateMode::hard_inference, 1.0, nullptr, {false, std::nullopt});
        EXPECT_EQ(values(skip.y), values(full.y));
        EXPECT_EQ(skip.decision.selected, full.decision.selected);
        for (std::size_t i = 0; i < 100; ++i) EXPECT_LE(skip.cost[i], full.cost[i]);
    }
}

TEST(FusionForward, BatchedHardExecutionMatchesPerSamplePaths) {
    auto net = small_net(7);
    sharpen_gate(net, 30.0);
    Rng rng(9);
    auto x1 = random_tensor({40, 6}, rng, false);
    auto x2 = random_tensor({40, 5}, rng, false);
    auto out = fusion_forward(net, x1, x2, GateMode::hard_inference, 1.0, nullptr);
    std::set<std::vector<std::size_t>> paths;
    for (std::size_t i = 0; i < 40; ++i) {
        std::vector<std::size_t> path;
        for (const auto& slot : out.decision.selected) path.push_back(slot[i]);
        paths.insert(path);
        auto single = fusion_forward(net, gather_rows(x1, {i}), gather_rows(x2, {i}), GateMode::hard_inference, 1.0,
                                     nullptr, {true, path});
        for (std::size_t k = 0; k < 2; ++k) EXPECT_EQ(out.y.at(i, k), single.y.at(0, k));
        EXPECT_EQ(out.cost[i], single.cost[0] + net.global_gate.madds());
    }
    EXPECT_GT(paths.size(), 1u);
}

TEST(FusionForward, CountedMaddsMatchReportedCost) {
    for (auto ops : {std::vector<FusionOpKind>{FusionOpKind::identity, FusionOpKind::se_fuse},
                     std::vector<FusionOpKind>{FusionOpKind::identity, FusionOpKind::add, FusionOpKind::weighted_add}}) {
        auto net = small_net(3, 3, ops);
        sharpen_gate(net, 30.0);
        Rng rng(4);
        auto x1 = random_tensor({60, 6}, rng, false);
        auto x2 = random_tensor({60, 5}, rng, false);
        for (bool skip : {true, false}) {
            MacCounter counter;
            auto out = fusion_forward(net, x1, x2, GateMode::hard_inference, 1.0, nullptr, {skip, std::nullopt});
            std::uint64_t reported = 0;
            for (auto c : out.cost) reported += c;
            EXPECT_EQ(counter.count(), reported);
        }
    }
}

TEST(FusionForward, PathCostMonotoneInFusionOps) {
    auto net = small_net(0);
    Rng rng(11);
    for (int trial = 0; trial < 200; ++trial) {
        auto path = sample_random_path(4, 2, rng);
        const auto base = plan_cost(net, decision_to_architecture(path, net.cells));
        for (std::size_t j = 0; j < 4; ++j) {
            if (path[j] != 0) continue;
            auto more = path;
            more[j] = 1;
            EXPECT_GE(plan_cost(net, decision_to_architecture(more, net.cells)), base);
        }
    }
    EXPECT_LT(plan_cost(net, decision_to_architecture({0, 0, 0, 0}, net.cells)),
              plan_cost(net, decision_to_architecture({1, 1, 1, 1}, net.cells)));
}

TEST(FusionForward, SoftAndStraightThroughShapes) {
    auto net = small_net(5);
    Rng rng(12);
    auto x1 = random_tensor({3, 6}, rng, false);
    auto x2 = random_tensor({3, 5}, rng, false);
    for (auto mode : {GateMode::soft, GateMode::hard_st}) {
        auto out = fusion_forward(net, x1, x2, mode, 1.0, &rng);
        EXPECT_EQ(out.y.shape(), (Shape{3, 2}));
        EXPECT_EQ(out.decision.slots(), 4u);
        for (const auto& w : out.decision.weights) EXPECT_EQ(w.shape(), (Shape{3, 2}));
    }
}

TEST(FusionForward, StraightThroughMatchesHardForward) {
    auto net = small_net(6);
    sharpen_gate(net, 30.0);
    Rng rng(13);
    auto x1 = random_tensor({20, 6}, rng, false);
    auto x2 = random_tensor({20, 5}, rng, false);
    auto st = fusion_forward(net, x1, x2, GateMode::hard_st, 1.0, nullptr);
    auto hard = fusion_forward(net, x1, x2, GateMode::hard_inference, 1.0, nullptr);
    EXPECT_EQ(st.decision.selected, hard.decision.selected);
    for (std::size_t i = 0; i < st.y.numel(); ++i) EXPECT_NEAR(st.y[i], hard.y[i], 1e-12);
}

TEST(FusionForward, GradientReachesGateAndActiveOps) {
    auto net = small_net(8);
    Rng rng(14);
    auto x1 = random_tensor({6, 6}, rng, false);
    auto x2 = random_tensor({6, 5}, rng, false);
    auto out = fusion_forward(net, x1, x2, GateMode::soft, 1.0, &rng);
    cross_entropy(out.y, {0, 1, 0, 1, 0, 1}).backward();
    for (const auto& p : net.parameters()) EXPECT_TRUE(p.tensor.has_grad()) << p.name;
}

TEST(FusionForward, InputValidation) {
    auto net = small_net();
    EXPECT_THROW(fusion_forward(net, Tensor::zeros({2, 5}), Tensor::zeros({2, 5}), GateMode::soft, 1.0, nullptr),
                 DimensionError);
    EXPECT_THROW(fusion_forward(net, Tensor::zeros({2, 6}), Tensor::zeros({3, 5}), GateMode::soft, 1.0, nullptr),
                 DimensionError);
    FusionNetConfig bad;
    bad.input_dims = {4, 4, 4};
    EXPECT_THROW(build_fusion_network(bad), DimensionError);
}

TEST(SampleRandomPath, RangeAndLength) {
    Rng rng(1);
    for (int i = 0; i < 100; ++i) {
        auto p = sample_random_path(4, 3, rng);
        ASSERT_EQ(p.size(), 4u);
        for (auto v : p) EXPECT_LT(v, 3u);
    }
}

// Entries of the squeeze-path gradient can be ~1e-8, where central
// differences are limited by roundoff (~eps * |loss| / h), hence the
// absolute floor.
TEST(FusionForward, SoftPipelineGradientMatchesFiniteDifferences) {
    constexpr double h = 1e-5, rel = 1e-4, floor = 1e-9;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        FusionNetConfig cfg;
        cfg.input_dims = {4, 3};
        cfg.dim = 4;
        cfg.cells = 2;
        cfg.se_reduction = 2;
        cfg.gate_hidden = 4;
        cfg.head_hidden = 4;
        cfg.seed = seed;
        auto net = build_fusion_network(cfg);
        Rng rng(seed);
        auto params = net.parameters();
        // zero biases put dead-row pre-activations exactly on the relu kink
        for (auto& p : params) {
            if (!p.name.ends_with("bias")) continue;
            for (auto& v : p.tensor.mutable_data()) v = std::normal_distribution<double>(0.0, 0.5)(rng);
        }
        auto x1 = random_tensor({3, 4}, rng, false);
        auto x2 = random_tensor({3, 3}, rng, false);
        auto loss = [&] { return cross_entropy(fusion_forward(net, x1, x2, GateMode::soft, 0.8, nullptr).y, {0, 1, 1}); };
        for (auto& p : params) p.tensor.zero_grad();
        loss().backward();
        for (auto& p : params) {
            auto data = p.tensor.mutable_data();
            for (std::size_t i = 0; i < data.size(); ++i) {
                const double saved = data[i];
                data[i] = saved + h;
                const double fp = loss().item();
                data[i] = saved - h;
                const double fm = loss().item();
                data[i] = saved;
                const double numeric = (fp - fm) / (2.0 * h);
                const double analytic = p.tensor.grad()[i];
                EXPECT_NEAR(analytic, numeric, rel * std::max(std::abs(analytic), std::abs(numeric)) + floor)
                    << p.name << "[" << i << "] seed " << seed;
            }
        }
    }
}
