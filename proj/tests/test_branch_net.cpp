#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "dafd/branch_net.hpp"
#include "dafd/cost_model.hpp"
#include "test_util.hpp"

using namespace dafd;
using dafd::test_util::max_abs_diff;

namespace {

Batch<double> random_batch(std::size_t n, std::size_t size, std::size_t classes, std::mt19937_64& rng) {
    Batch<double> b{random_tensor<double>({n, 1, size, size}, rng), {}};
    for (std::size_t i = 0; i < n; ++i) b.labels.push_back(static_cast<int>(i % classes));
    return b;
}

std::vector<std::vector<double>> snapshot_grads(Network<double>& net) {
    std::vector<std::vector<double>> g;
    for (auto* p : net.params()) g.push_back(p->grad);
    return g;
}

void accumulate_domain(Network<double>& net, const Batch<double>& b, int domain) {
    const auto fwd = net.forward(b.images, domain);
    const auto xe = softmax_xent<double>(fwd.logits, b.labels);
    net.backward(fwd, xe.dlogits);
}

std::vector<LayerCostSpec> cost_specs(const Network<double>& net) {
    std::vector<LayerCostSpec> specs;
    for (const auto& l : net.layers())
        if (l.branched)
            specs.push_back({l.in_c, l.out_c, l.spec.L, l.out_h, l.dafd ? l.dafd->K() : l.spec.L * l.spec.L});
    return specs;
}

}  // namespace

TEST(NetSpec, Validation) {
    auto s = NetSpec::toy(Arch::A3, 18, 4, 4);
    EXPECT_NO_THROW(s.validate());
    s.branched_prefix = 3;
    EXPECT_THROW(s.validate(), std::invalid_argument);
    s = NetSpec::toy(Arch::A3, 18, 4, 10);
    EXPECT_THROW(s.validate(), std::invalid_argument);
    s = NetSpec::toy(Arch::A1, 18, 4, 4);
    s.layers.pop_back();
    EXPECT_THROW(s.validate(), std::invalid_argument);
    EXPECT_THROW(parse_arch("A4"), std::invalid_argument);
    EXPECT_EQ(parse_arch("A2"), Arch::A2);
}

TEST(BuildNetwork, DeterministicPerSeed) {
    const auto spec = NetSpec::toy(Arch::A3, 18, 4, 4);
    auto a = build_network<double>(spec, 5);
    auto b = build_network<double>(spec, 5);
    auto c = build_network<double>(spec, 6);
    const auto pa = a.params(), pb = b.params(), pc = c.params();
    ASSERT_EQ(pa.size(), pb.size());
    bool any_diff = false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        EXPECT_EQ(pa[i]->value, pb[i]->value);
        any_diff = any_diff || pa[i]->value != pc[i]->value;
    }
    EXPECT_TRUE(any_diff);
}

TEST(BuildNetwork, InitialOutputsPerArchitecture) {
    std::mt19937_64 rng(2);
    const auto batch = random_batch(4, 18, 4, rng);
    for (Arch arch : {Arch::A1, Arch::A3}) {
        auto net = build_network<double>(NetSpec::toy(arch, 18, 4, 9), 1);
        const auto y0 = net.forward(batch.images, 0).logits;
        const auto y1 = net.forward(batch.images, 1).logits;
        EXPECT_EQ(test_util::to_vec(y0.data()), test_util::to_vec(y1.data())) << to_string(arch);
    }
    // A3 with K = L² starts as an exact refactorisation of the A1 network.
    auto a1 = build_network<double>(NetSpec::toy(Arch::A1, 18, 4, 9), 1);
    auto a3 = build_network<double>(NetSpec::toy(Arch::A3, 18, 4, 9), 1);
    EXPECT_LE(max_abs_diff(a1.forward(batch.images, 0).logits.data(), a3.forward(batch.images, 0).logits.data()),
              1e-10);
    // A2 target branches are drawn independently, so the domains are distinguishable.
    auto a2 = build_network<double>(NetSpec::toy(Arch::A2, 18, 4, 9), 1);
    EXPECT_GT(max_abs_diff(a2.forward(batch.images, 0).logits.data(), a2.forward(batch.images, 1).logits.data()),
              1e-3);
}

TEST(Routing, SourceOnlyLossLeavesResidualsUntouched) {
    std::mt19937_64 rng(3);
    const auto src = random_batch(6, 18, 4, rng);
    for (Arch arch : {Arch::A2, Arch::A3}) {
        auto net = build_network<double>(NetSpec::toy(arch, 18, 4, 4), 2);
        TrainConfig cfg;
        TrainState state;
        compute_gradients<double>(net, src, nullptr, cfg, state);
        std::size_t checked = 0;
        for (auto* p : net.params())
            if (p->owner == 1) {
                for (double g : p->grad) EXPECT_EQ(g, 0.0) << p->name;
                ++checked;
            }
        EXPECT_GT(checked, 0u);
    }
}

TEST(Routing, SharedGradientsAreAdditive) {
    std::mt19937_64 rng(4);
    const auto src = random_batch(5, 18, 4, rng);
    const auto tgt = random_batch(5, 18, 4, rng);
    for (Arch arch : {Arch::A1, Arch::A2, Arch::A3}) {
        auto net = build_network<double>(NetSpec::toy(arch, 18, 4, 4), 3);
        net.zero_grad();
        accumulate_domain(net, src, 0);
        const auto g0 = snapshot_grads(net);
        net.zero_grad();
        accumulate_domain(net, tgt, 1);
        const auto g1 = snapshot_grads(net);
        TrainConfig cfg;
        TrainState state;
        compute_gradients<double>(net, src, &tgt, cfg, state);
        const auto params = net.params();
        for (std::size_t i = 0; i < params.size(); ++i)
            for (std::size_t k = 0; k < params[i]->grad.size(); ++k)
                EXPECT_NEAR(params[i]->grad[k], g0[i][k] + g1[i][k], 1e-12) << params[i]->name;
    }
}

TEST(Network, GradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(5);
    const auto b = random_batch(3, 9, 3, rng);
    NetSpec spec = NetSpec::toy(Arch::A3, 9, 3, 4);
    spec.layers = {LayerSpec::make_conv(3, 3, {3, 0}, 4), LayerSpec::make_act(Activation::leaky(0.3)),
                   LayerSpec::make_conv(2, 3, {1, 1}, 4), LayerSpec::make_act(Activation::leaky(0.3)),
                   LayerSpec::make_dense(3)};
    auto net = build_network<double>(spec, 7);
    for (auto* p : net.params())
        for (auto& v : p->value) v += std::uniform_real_distribution<double>(-0.3, 0.3)(rng);
    for (int d : {0, 1}) {
        net.zero_grad();
        accumulate_domain(net, b, d);
        for (auto* p : net.params()) {
            if (p->owner != kShared && p->owner != d) continue;
            const auto saved = p->value;
            const auto analytic = p->grad;
            auto f = [&](std::span<const double> v) {
                p->value.assign(v.begin(), v.end());
                const double loss = softmax_xent<double>(net.forward(b.images, d).logits, b.labels).loss;
                p->value = saved;
                return loss;
            };
            EXPECT_LE(grad_check(f, saved, analytic, 1e-6), 1e-5) << p->name << " domain " << d;
        }
    }
}

TEST(Mmd, ZeroForIdenticalSetsAndSymmetric) {
    std::mt19937_64 rng(6);
    const auto a = random_tensor<double>({5, 3, 1, 1}, rng);
    const auto b = random_tensor<double>({4, 3, 1, 1}, rng);
    const std::vector<double> bw{0.5, 1.0, 2.0};
    EXPECT_LE(std::abs(mmd_loss(a, a, bw).value), 1e-12);
    EXPECT_NEAR(mmd_loss(a, b, bw).value, mmd_loss(b, a, bw).value, 1e-14);
    EXPECT_GT(mmd_loss(a, b, bw).value, 0.0);
}

TEST(Mmd, GradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(7);
    const auto a = random_tensor<double>({5, 3, 1, 1}, rng);
    const auto b = random_tensor<double>({4, 3, 1, 1}, rng, -0.5, 1.5);
    const std::vector<double> bw{0.5, 1.0, 2.0};
    const auto r = mmd_loss(a, b, bw);
    auto fs = [&](std::span<const double> p) {
        return mmd_loss(Tensor4<double>(a.shape(), {p.begin(), p.end()}), b, bw).value;
    };
    auto ft = [&](std::span<const double> p) {
        return mmd_loss(a, Tensor4<double>(b.shape(), {p.begin(), p.end()}), bw).value;
    };
    EXPECT_LE(grad_check(fs, a.data(), r.grad_s.data(), 1e-6), 1e-5);
    EXPECT_LE(grad_check(ft, b.data(), r.grad_t.data(), 1e-6), 1e-5);
}

TEST(Mmd, MedianPairwiseDistance) {
    Tensor4<double> a({2, 1, 1, 1}, {0.0, 1.0});
    Tensor4<double> b({1, 1, 1, 1}, {3.0});
    // pairwise distances 1, 3, 2
    EXPECT_DOUBLE_EQ(median_pairwise_distance(a, b), 2.0);
}

TEST(CostAgreement, LiveCountsEqualCostModel) {
    for (Arch arch : {Arch::A1, Arch::A2, Arch::A3}) {
        for (std::size_t K : {1, 4, 9}) {
            auto net = build_network<double>(NetSpec::toy(arch, 18, 4, K), 1);
            const auto specs = cost_specs(net);
            if (arch == Arch::A1) {
                EXPECT_TRUE(specs.empty());
                EXPECT_EQ(net.count_branched(1), 0u);
                continue;
            }
            const auto report = count_costs(specs, net.num_domains());
            std::uint64_t biases = 0;
            for (const auto& s : specs) biases += s.c_out;
            if (arch == Arch::A2) {
                EXPECT_EQ(net.count_branched(1), report.total.extra_regular_per_domain);
                EXPECT_EQ(net.count_branched(0) + net.count_branched(1), report.total.params_regular + 2 * biases);
            } else {
                EXPECT_EQ(net.count_branched(1), report.total.extra_dafd_per_domain);
                EXPECT_EQ(net.count_branched(0) + net.count_branched(1) + net.count_branched(kShared),
                          report.total.params_dafd + biases);
            }
        }
    }
}

TEST(CostAgreement, PartitionsCoverAllParameters) {
    for (Arch arch : {Arch::A1, Arch::A2, Arch::A3}) {
        auto net = build_network<double>(NetSpec::toy(arch, 18, 4, 4), 1);
        std::size_t total = 0;
        for (const auto* p : std::as_const(net).params()) total += p->size();
        EXPECT_EQ(net.count_partition(kShared) + net.count_partition(0) + net.count_partition(1), total);
    }
}

TEST(Evaluate, ScoreLogits) {
    const std::vector<std::vector<double>> logits{{1, 0}, {0, 1}, {2, 1}, {0, 3}};
    const std::vector<int> labels{0, 1, 1, 1};
    const auto r = score_logits(logits, labels, 2);
    EXPECT_DOUBLE_EQ(r.accuracy, 0.75);
    ASSERT_EQ(r.per_class_accuracy.size(), 2u);
    EXPECT_DOUBLE_EQ(r.per_class_accuracy[0], 1.0);
    EXPECT_NEAR(r.per_class_accuracy[1], 2.0 / 3.0, 1e-15);
}

TEST(TrainConfig, Validation) {
    TrainConfig cfg;
    EXPECT_NO_THROW(cfg.validate());
    cfg.lr = 0.0;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
    cfg = {};
    cfg.target_fraction = 1.5;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
    EXPECT_EQ(parse_mode("unsupervised-target"), TrainMode::unsupervised_target);
}

TEST(TrainStep, NonFiniteLossAborts) {
    std::mt19937_64 rng(8);
    auto net = build_network<float>(NetSpec::toy(Arch::A3, 18, 4, 4), 1);
    auto b = random_batch(4, 18, 4, rng);
    Batch<float> bf{b.images.cast<float>(), b.labels};
    // a NaN input pixel can be zeroed by ReLU, a NaN head weight cannot
    net.params().back()->value[0] = std::nanf("");
    TrainConfig cfg;
    TrainState state;
    EXPECT_THROW(train_step<float>(net, bf, nullptr, cfg, state), NumericError);
}
