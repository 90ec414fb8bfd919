#include <gtest/gtest.h>

#include "dafd/cost_model.hpp"
#include "json.hpp"

using namespace dafd;

TEST(CostModel, UnitLayer) {
    const auto r = count_costs({{1, 1, 1, 1, 1}}, 1);
    const auto& c = r.layers.at(0);
    EXPECT_EQ(c.flops_regular_per_domain, 3u);
    EXPECT_EQ(c.flops_dafd_per_domain, 4u);
    EXPECT_EQ(c.params_regular, 1u);
    EXPECT_EQ(c.params_dafd, 2u);
}

TEST(CostModel, SixtyFourChannelLayer) {
    const auto r = count_costs({{64, 64, 3, 32, 6}}, 2);
    EXPECT_EQ(r.layers[0].params_regular, 73728u);
    EXPECT_EQ(r.layers[0].params_dafd, 24684u);
    EXPECT_EQ(r.layers[0].extra_dafd_per_domain, 54u);
}

TEST(CostModel, TotalsAreLayerSums) {
    const std::vector<LayerCostSpec> specs{{3, 8, 3, 10, 2}, {8, 16, 5, 4, 7}};
    const auto r = count_costs(specs, 3);
    const auto a = count_costs({specs[0]}, 3), b = count_costs({specs[1]}, 3);
    EXPECT_EQ(r.total.params_dafd, a.total.params_dafd + b.total.params_dafd);
    EXPECT_EQ(r.total.flops_regular_per_domain, a.total.flops_regular_per_domain + b.total.flops_regular_per_domain);
    EXPECT_EQ(r.total.extra_regular_per_domain, a.total.extra_regular_per_domain + b.total.extra_regular_per_domain);
}

TEST(CostModel, Vgg16Preset) {
    const auto r = vgg16_report(6);
    EXPECT_EQ(r.layers.size(), 13u);
    EXPECT_EQ(r.total.extra_dafd_per_domain, 702u);
    EXPECT_EQ(r.total.extra_regular_per_domain, 14714688u);
    EXPECT_NEAR(double(r.total.macs_regular_per_domain) / 15.38e9, 1.0, 0.10);
    EXPECT_NEAR(double(r.total.macs_dafd_per_domain) / 10.75e9, 1.0, 0.10);
    const auto table = r.to_table();
    EXPECT_NE(table.find("702"), std::string::npos);
    EXPECT_NE(table.find("14714688"), std::string::npos);
}

TEST(CostModel, CheaperPredicate) {
    for (std::uint64_t C : {1, 4, 16, 64, 256})
        for (std::uint64_t L : {1, 3, 5})
            for (std::uint64_t K = 1; K <= L * L; ++K) {
                const auto c = count_costs({{C, C, L, 7, K}}, 2).layers[0];
                const bool formula = 2 * K * (L * L + C) < C * (2 * L * L + 1);
                EXPECT_EQ(c.dafd_cheaper, formula);
                EXPECT_EQ(c.dafd_cheaper, c.flops_dafd_per_domain < c.flops_regular_per_domain);
            }
}

TEST(CostModel, LayerSpecParsing) {
    const auto specs = parse_layer_specs("# comment\n3 64 3 224\n\n64 64 3 224 4  # trailing\n", 6);
    ASSERT_EQ(specs.size(), 2u);
    EXPECT_EQ(specs[0].K, 6u);
    EXPECT_EQ(specs[1].K, 4u);
    try {
        parse_layer_specs("3 64 3 224\n3 64 x 224\n", 6);
        FAIL() << "expected a parse error";
    } catch (const std::exception& e) {
        EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
    }
    EXPECT_THROW(parse_layer_specs("3 64 3\n", 6), std::exception);
    EXPECT_THROW(parse_layer_specs("3 64 2 10\n", 6), std::exception);
}

TEST(CostModel, JsonReport) {
    const auto j = nlohmann::json::parse(vgg16_report(6).to_json());
    EXPECT_EQ(j["total"]["extra_dafd_per_domain"].get<std::uint64_t>(), 702u);
    EXPECT_EQ(j["layers"].size(), 13u);
}
