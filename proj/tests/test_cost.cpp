#include <gtest/gtest.h>

#include "test_support.hpp"

using namespace dynmm;
using dynmm::testing::gradient_check;
using dynmm::testing::random_tensor;

namespace {

CostTable imdb_table() {
    CostTable t;
    t.expert_costs = {1250000, 10870000};
    return t;
}

ResourceLossConfig cfg(double lambda, CostNormalization n = CostNormalization::cheapest_expert) {
    return {lambda, n};
}

}  // namespace

TEST(CountMadds, CountingRule) {
    EXPECT_EQ(count_madds(LinearLayer(4, 8)), 32u);
    EXPECT_EQ(count_madds(Mlp({32, 16, 2})), 544u);
    EXPECT_EQ(FusionCellSpec::analytic_cost(FusionOpKind::identity, 32, nullptr), 0u);
    EXPECT_EQ(FusionCellSpec::analytic_cost(FusionOpKind::add, 32, nullptr), 32u);
    EXPECT_EQ(FusionCellSpec::analytic_cost(FusionOpKind::weighted_add, 32, nullptr), 96u);
    SeFusionBlock se(32, 4);
    EXPECT_EQ(count_madds(se), 2u * (32 * 8 + 8 * 32) + 2 * 32 + 32);
    EXPECT_EQ(count_elementwise_madds(17), 17u);
}

TEST(CountMadds, ExpertEqualsSumOfLayers) {
    auto model = build_two_expert_model({});
    for (const auto& e : model.experts) {
        std::uint64_t total = count_madds(e.decoder);
        for (const auto& enc : e.encoders) {
            for (const auto& l : enc.layers) total += count_madds(l);
        }
        EXPECT_EQ(e.cost_madds, total);
    }
}

TEST(ResourceLossModality, LambdaZeroIsZero) {
    auto g = Tensor::matrix(2, 2, {0.3, 0.7, 1, 0});
    EXPECT_EQ(resource_loss_modality(g, imdb_table(), cfg(0.0)).item(), 0.0);
}

TEST(ResourceLossModality, CheapestNormalizationMatchesPublishedScaling) {
    const double lambda = 0.37;
    auto per = resource_loss_modality_per_sample(Tensor::matrix(2, 2, {1, 0, 0, 1}), imdb_table(), cfg(lambda));
    EXPECT_NEAR(per[0], lambda, 1e-9);
    EXPECT_NEAR(per[1], lambda * 10.87 / 1.25, 1e-9);
    EXPECT_NEAR(per[1], lambda * 8.696, 1e-9);
}

TEST(ResourceLossModality, Linearity) {
    const double lambda = 2.0;
    auto l = resource_loss_modality(Tensor::vector({0.5, 0.5}), imdb_table(), cfg(lambda));
    EXPECT_NEAR(l.item(), lambda * (1 + 8.696) / 2, 1e-9);
}

TEST(ResourceLossModality, RawCostsWithoutNormalization) {
    auto l = resource_loss_modality(Tensor::vector({0, 1}), imdb_table(), cfg(1e-6, CostNormalization::none));
    EXPECT_NEAR(l.item(), 10.87, 1e-9);
}

TEST(ResourceLossModality, SizeMismatchThrows) {
    EXPECT_THROW(resource_loss_modality(Tensor::vector({0.2, 0.3, 0.5}), imdb_table(), cfg(1)), DimensionError);
    EXPECT_THROW(resource_loss_modality(Tensor::vector({1, 0}), imdb_table(), cfg(-1)), std::invalid_argument);
}

TEST(ResourceLossModality, HardDecisionGivesSelectedCost) {
    Rng rng(5);
    const auto costs = normalized_expert_costs(imdb_table(), CostNormalization::cheapest_expert);
    for (int i = 0; i < 20; ++i) {
        auto soft = softmax(random_tensor({1, 2}, rng, false), 1);
        auto hard = straight_through(soft);
        const auto sel = max_index(soft, 1)[0];
        EXPECT_EQ(resource_loss_modality(hard, imdb_table(), cfg(1.0)).item(), costs[sel]);
    }
}

TEST(ResourceLossFusion, Examples) {
    CostTable t;
    t.op_costs = {{0, 10}};
    auto l = resource_loss_fusion(std::vector<Tensor>{Tensor::vector({0.3, 0.7})}, t, cfg(2.0, CostNormalization::none));
    EXPECT_NEAR(l.item(), 2.0 * 7, 1e-12);

    CostTable t2;
    t2.op_costs = {{0, 5}, {0, 5}};
    auto hard = std::vector<Tensor>{Tensor::vector({0, 1}), Tensor::vector({0, 1})};
    EXPECT_NEAR(resource_loss_fusion(hard, t2, cfg(3.0, CostNormalization::none)).item(), 30.0, 1e-12);

    auto identity = std::vector<Tensor>{Tensor::vector({1, 0}), Tensor::vector({1, 0})};
    EXPECT_EQ(resource_loss_fusion(identity, t2, cfg(3.0)).item(), 0.0);
}

TEST(ResourceLossFusion, NormalizesBySmallestPositiveOpCost) {
    CostTable t;
    t.op_costs = {{0, 40}, {0, 80}};
    auto w = std::vector<Tensor>{Tensor::vector({0, 1}), Tensor::vector({0, 1})};
    EXPECT_NEAR(resource_loss_fusion(w, t, cfg(1.0)).item(), 1.0 + 2.0, 1e-12);
}

TEST(ResourceLossFusion, SlotMismatchThrows) {
    CostTable t;
    t.op_costs = {{0, 5}, {0, 5}};
    EXPECT_THROW(resource_loss_fusion(std::vector<Tensor>{Tensor::vector({1, 0})}, t, cfg(1)), DimensionError);
}

TEST(TotalLoss, SumAndIdentity) {
    EXPECT_EQ(total_loss(Tensor::scalar(1.0), Tensor::scalar(0.5)).item(), 1.5);
    auto task = Tensor::scalar(0.8125);
    auto res = resource_loss_modality(Tensor::vector({0.4, 0.6}), imdb_table(), cfg(0.0));
    EXPECT_EQ(total_loss(task, res).item(), task.item());
    EXPECT_THROW(total_loss(Tensor::vector({1, 2}), Tensor::scalar(0)), DimensionError);
}

TEST(TotalLoss, GradientIsSumOfPartsAndMatchesFiniteDifferences) {
    for (int seed = 0; seed < 10; ++seed) {
        Rng rng(seed);
        auto logits = random_tensor({3, 2}, rng);
        const std::vector<std::size_t> labels{0, 1, 1};
        auto gumbel = sample_gumbel({3, 2}, rng);
        auto total = [&] {
            auto g = soft_gate(logits, gumbel, 1.0);
            return total_loss(cross_entropy(logits, labels), resource_loss_modality(g, imdb_table(), cfg(0.3)));
        };
        EXPECT_LT(gradient_check(total, {logits}), 1e-4);

        logits.zero_grad();
        total().backward();
        std::vector<double> both(logits.grad().begin(), logits.grad().end());
        logits.zero_grad();
        cross_entropy(logits, labels).backward();
        std::vector<double> task(logits.grad().begin(), logits.grad().end());
        logits.zero_grad();
        resource_loss_modality(soft_gate(logits, gumbel, 1.0), imdb_table(), cfg(0.3)).backward();
        for (std::size_t i = 0; i < both.size(); ++i) EXPECT_NEAR(both[i], task[i] + logits.grad()[i], 1e-15);
        logits.zero_grad();
    }
}

TEST(CostTable, ConstantDuringTraining) {
    ModalityMoeConfig mc;
    auto model = build_two_expert_model(mc);
    const auto before = model.cost_table();
    auto split = generate(SyntheticSpec{.n_train = 64, .n_test = 16});
    TrainConfig tc;
    tc.stage1_epochs = 1;
    tc.stage2_epochs = 1;
    train_dynamic(model, split.train, tc);
    const auto after = model.cost_table();
    EXPECT_EQ(before.expert_costs, after.expert_costs);
    EXPECT_EQ(before.gate_cost, after.gate_cost);
}
