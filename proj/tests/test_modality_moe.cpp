#include <gtest/gtest.h>

#include "test_support.hpp"

using namespace dynmm;
using dynmm::testing::random_tensor;

namespace {

std::vector<Tensor> random_inputs(const ModalityMoe& model, std::size_t batch, Rng& rng) {
    std::vector<Tensor> x;
    for (auto d : model.modality_dims) x.push_back(random_tensor({batch, d}, rng, false));
    return x;
}

// Zero gate weights and a bias that always prefers `expert`.
void force_gate(ModalityMoe& model, std::size_t expert) {
    for (auto& l : model.gate.body.layers) {
        for (auto& v : l.weight.mutable_data()) v = 0.0;
        for (auto& v : l.bias.mutable_data()) v = 0.0;
    }
    auto& last = model.gate.body.layers.back();
    last.bias.mutable_data()[expert] = 50.0;
}

void make_constant(ExpertSpec& e, const std::vector<double>& out) {
    auto& last = e.decoder.layers.back();
    for (auto& v : last.weight.mutable_data()) v = 0.0;
    auto b = last.bias.mutable_data();
    for (std::size_t k = 0; k < out.size(); ++k) b[k] = out[k];
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST(ModalityMoe, ForcedSecondExpertIsBitIdentical) {
    auto model = build_two_expert_model({});
    force_gate(model, 1);
    Rng rng(3);
    auto x = random_inputs(model, 16, rng);
    const auto direct = values(model.experts[1].forward(x));
    for (auto mode : {GateMode::hard_inference, GateMode::hard_st}) {
        auto out = moe_forward(model, x, mode, 1.0, nullptr);
        EXPECT_EQ(values(out.y), direct);
        for (auto s : out.decision.selected[0]) EXPECT_EQ(s, 1u);
    }
}

TEST(ModalityMoe, SoftModeAveragesConstantExperts) {
    auto model = build_two_expert_model({});
    force_gate(model, 0);
    model.gate.body.layers.back().bias.mutable_data()[0] = 0.0;
    make_constant(model.experts[0], {1.0, -2.0});
    make_constant(model.experts[1], {3.0, 4.0});
    Rng rng(1);
    auto out = moe_forward(model, random_inputs(model, 4, rng), GateMode::soft, 1.0, nullptr);
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_DOUBLE_EQ(out.y.at(i, 0), 2.0);
        EXPECT_DOUBLE_EQ(out.y.at(i, 1), 1.0);
    }
}

TEST(ModalityMoe, HardCostIsSelectedExpertPlusGate) {
    auto model = build_two_expert_model({});
    Rng rng(2);
    auto x = random_inputs(model, 8, rng);
    for (std::size_t e = 0; e < 2; ++e) {
        force_gate(model, e);
        auto out = moe_forward(model, x, GateMode::hard_inference, 1.0, nullptr);
        for (auto c : out.cost) EXPECT_EQ(c, model.experts[e].cost_madds + model.gate_madds());
    }
    EXPECT_GT(model.experts[1].cost_madds, model.experts[0].cost_madds);
}

TEST(ModalityMoe, CheapExpertIgnoresOtherModalities) {
    auto model = build_two_expert_model({});
    EXPECT_EQ(model.experts[0].modality_subset, std::vector<std::size_t>{0});
    Rng rng(5);
    auto x = random_inputs(model, 6, rng);
    auto y1 = values(model.experts[0].forward(x));
    x[1] = random_tensor(x[1].shape(), rng, false, 10.0);
    EXPECT_EQ(values(model.experts[0].forward(x)), y1);
}

TEST(ModalityMoe, SevenSubsetsForThreeModalities) {
    auto subsets = enumerate_modality_subsets(3);
    ASSERT_EQ(subsets.size(), 7u);
    EXPECT_EQ(subsets.front(), std::vector<std::size_t>{0});
    EXPECT_EQ(subsets.back(), (std::vector<std::size_t>{0, 1, 2}));
    ModalityMoeConfig cfg;
    cfg.modality_dims = {4, 5, 6};
    auto model = build_subset_model(cfg, subsets);
    EXPECT_EQ(model.num_experts(), 7u);
    Rng rng(1);
    auto out = moe_forward(model, random_inputs(model, 10, rng), GateMode::hard_inference, 1.0, nullptr);
    EXPECT_EQ(out.y.shape(), (Shape{10, 2}));
    for (std::size_t e = 1; e < 7; ++e) {
        if (subsets[e].size() > subsets[e - 1].size()) {
            EXPECT_GT(model.experts[e].cost_madds, model.experts[e - 1].cost_madds);
        }
    }
}

TEST(ModalityMoe, HardInferenceMatchesPerSampleExpert) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        ModalityMoeConfig cfg;
        cfg.seed = seed;
        auto model = build_two_expert_model(cfg);
        // widen the gate so both experts get picked
        Rng rng(seed + 10);
        for (auto& v : model.gate.body.layers[0].weight.mutable_data()) v *= 20.0;
        auto x = random_inputs(model, 40, rng);
        auto out = moe_forward(model, x, GateMode::hard_inference, 1.0, nullptr);
        std::size_t picked_full = 0;
        for (std::size_t i = 0; i < 40; ++i) {
            const auto e = out.decision.selected[0][i];
            picked_full += e;
            std::vector<Tensor> xi;
            for (const auto& t : x) xi.push_back(gather_rows(t, {i}));
            auto yi = model.experts[e].forward(xi);
            for (std::size_t k = 0; k < 2; ++k) EXPECT_EQ(out.y.at(i, k), yi.at(0, k));
        }
        (void)picked_full;
    }
}

TEST(ModalityMoe, CountedMaddsMatchReportedCost) {
    for (auto input : {GateInput::raw, GateInput::encoded}) {
        ModalityMoeConfig cfg;
        cfg.gate_input = input;
        cfg.seed = 4;
        auto model = build_two_expert_model(cfg);
        for (auto& v : model.gate.body.layers[0].weight.mutable_data()) v *= 20.0;
        Rng rng(8);
        auto x = random_inputs(model, 50, rng);
        MacCounter counter;
        auto out = moe_forward(model, x, GateMode::hard_inference, 1.0, nullptr);
        std::uint64_t reported = 0;
        for (auto c : out.cost) reported += c;
        EXPECT_EQ(counter.count(), reported);
    }
}

TEST(ModalityMoe, UnselectedExpertGetsZeroGradientInStraightThrough) {
    auto model = build_two_expert_model({});
    force_gate(model, 0);
    Rng rng(6);
    auto x = random_inputs(model, 8, rng);
    const std::vector<std::size_t> labels{0, 1, 0, 1, 1, 0, 0, 1};
    auto out = moe_forward(model, x, GateMode::hard_st, 1.0, nullptr);
    cross_entropy(out.y, labels).backward();
    ParameterList p1;
    model.experts[1].collect(p1, "e1");
    for (const auto& p : p1) {
        if (!p.tensor.has_grad()) continue;
        for (double g : p.tensor.grad()) EXPECT_EQ(g, 0.0) << p.name;
    }
    ParameterList p0;
    model.experts[0].collect(p0, "e0");
    double norm = 0.0;
    for (const auto& p : p0) {
        for (double g : p.tensor.grad()) norm += g * g;
    }
    EXPECT_GT(norm, 0.0);
    // the gate still receives a gradient through the straight-through path
    EXPECT_TRUE(model.gate.body.layers.back().bias.has_grad());
}

TEST(ModalityMoe, InputValidation) {
    auto model = build_two_expert_model({});
    Rng rng(1);
    auto x = random_inputs(model, 3, rng);
    x.pop_back();
    EXPECT_THROW(moe_forward(model, x, GateMode::soft, 1.0, nullptr), DimensionError);
    auto y = random_inputs(model, 3, rng);
    y[1] = Tensor::zeros({3, 7});
    EXPECT_THROW(moe_forward(model, y, GateMode::soft, 1.0, nullptr), DimensionError);
    ModalityMoeConfig bad;
    bad.dominant_modality = 5;
    EXPECT_THROW(build_two_expert_model(bad), DimensionError);
}

TEST(ModalityMoe, ParameterGroupsPartitionTheModel) {
    auto model = build_two_expert_model({});
    EXPECT_EQ(model.parameters().size(), model.backbone_parameters().size() + model.gate_parameters().size());
    for (const auto& p : model.gate_parameters()) EXPECT_EQ(p.name.rfind("gate", 0), 0u);
}
