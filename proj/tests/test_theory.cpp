#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "dafd/theory.hpp"

using namespace dafd;
using namespace dafd::theory;

namespace {

GridSignal random_grid(std::size_t N, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    auto g = GridSignal::omega(N);
    for (auto& v : g.v) v = u(rng);
    return g;
}

double rad(double deg) { return deg * M_PI / 180.0; }

}  // namespace

TEST(Grid, OmegaGeometry) {
    const auto g = GridSignal::omega(8);
    EXPECT_DOUBLE_EQ(g.h, 0.25);
    EXPECT_DOUBLE_EQ(g.coord(0), -0.875);
    EXPECT_DOUBLE_EQ(g.coord(7), 0.875);
    EXPECT_THROW(GridSignal::omega(2), std::invalid_argument);
    auto c = g;
    std::fill(c.v.begin(), c.v.end(), 1.0);
    EXPECT_DOUBLE_EQ(c.l1_norm(), 4.0);
}

TEST(Grid, BilinearSampling) {
    auto g = GridSignal::omega(4);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j) g.at(i, j) = 2.0 * g.coord(j) - g.coord(i);
    EXPECT_DOUBLE_EQ(g.sample(g.coord(1), g.coord(2)), g.at(2, 1));
    // affine functions are reproduced exactly between nodes
    EXPECT_NEAR(g.sample(0.1, -0.2), 2.0 * 0.1 + 0.2, 1e-15);
    EXPECT_EQ(g.sample(5.0, 0.0), 0.0);
}

TEST(Warp, QuarterTurnIsPermutation) {
    const std::size_t N = 16;
    const auto x = random_grid(N, 1);
    const auto y = warp(x, make_rotation_unchecked(M_PI / 2), WarpDirection::forward);
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < N; ++j) EXPECT_EQ(y.at(i, j), x.at(j, N - 1 - i));
}

TEST(Warp, Linearity) {
    const auto x = random_grid(64, 2), z = random_grid(64, 3);
    const double a = 0.7, b = -1.3;
    auto comb = x;
    for (std::size_t q = 0; q < comb.v.size(); ++q) comb.v[q] = a * x.v[q] + b * z.v[q];
    for (const auto& field :
         {make_displacement(FieldKind::rotation, rad(5)), make_displacement(FieldKind::dilation, 0.95),
          make_displacement(FieldKind::smooth_odd, 0.05, 4)}) {
        for (auto dir : {WarpDirection::forward, WarpDirection::inverse}) {
            const auto lhs = warp(comb, field, dir);
            const auto wx = warp(x, field, dir), wz = warp(z, field, dir);
            double err = 0.0;
            for (std::size_t q = 0; q < lhs.v.size(); ++q)
                err = std::max(err, std::abs(lhs.v[q] - (a * wx.v[q] + b * wz.v[q])));
            EXPECT_LE(err, 1e-12) << field.str();
        }
    }
}

TEST(Warp, ZeroFieldIsExactCopy) {
    const auto x = random_grid(32, 5);
    EXPECT_EQ(warp(x, make_displacement(FieldKind::zero, 0.0), WarpDirection::forward).v, x.v);
}

TEST(Field, GradientSupNorms) {
    for (double deg : {2.0, 5.0, 10.0}) {
        const auto f = make_displacement(FieldKind::rotation, rad(deg));
        EXPECT_NEAR(f.grad_inf, 2.0 * std::sin(rad(deg) / 2.0), 1e-15);
        EXPECT_NEAR(fd_grad_inf(f, 41), f.grad_inf, 1e-8);
    }
    const auto d = make_displacement(FieldKind::dilation, 1.1);
    EXPECT_NEAR(d.grad_inf, 0.1, 1e-15);
    EXPECT_NEAR(fd_grad_inf(d, 41), 0.1, 1e-8);
    const auto s = make_displacement(FieldKind::smooth_odd, 0.05, 7);
    EXPECT_FALSE(s.rigid);
    EXPECT_GT(s.grad_inf, 0.0);
    EXPECT_LT(s.grad_inf, 0.2);
}

TEST(Field, LargeGradientRejected) {
    try {
        make_displacement(FieldKind::rotation, rad(25));
        FAIL() << "expected rejection";
    } catch (const AssumptionError& e) {
        EXPECT_EQ(e.assumption(), "A2");
    }
    EXPECT_THROW(make_displacement(FieldKind::dilation, 1.3), AssumptionError);
    EXPECT_NO_THROW(make_rotation_unchecked(rad(25)));
}

TEST(Field, InverseMapRoundTrip) {
    for (const auto& f : {make_displacement(FieldKind::smooth_odd, 0.05, 3), make_displacement(FieldKind::rotation, rad(7)),
                          make_displacement(FieldKind::dilation, 0.9)})
        for (double x : {-0.8, -0.1, 0.3, 0.9})
            for (double y : {-0.5, 0.0, 0.7}) {
                const auto r = f.rho(x, y);
                const auto back = f.rho_inverse(r[0], r[1]);
                EXPECT_NEAR(back[0], x, 1e-9);
                EXPECT_NEAR(back[1], y, 1e-9);
            }
}

TEST(Filter, NormalisationAndDelta) {
    FilterSpec w;
    w.j = -3;
    w.norm = 0.8;
    EXPECT_NEAR(w.sample(128).l1_norm(), 0.8, 1e-14);
    w.norm = 1.5;
    EXPECT_THROW(w.sample(128), AssumptionError);
    FilterSpec tiny;
    tiny.j = -8;
    EXPECT_THROW(tiny.sample(64), std::invalid_argument);

    FilterSpec delta;
    delta.shape = FilterShape::delta;
    delta.j = -3;
    const SignalSpec s = random_signal(9);
    const auto x = s.sample(128);
    EXPECT_EQ(convolve(x, delta.sample(128)).v, x.v);
}

TEST(Convolve, SupportOverflow) {
    auto x = GridSignal::omega(64);
    x.at(1, 30) = 1.0;
    FilterSpec w;
    w.j = -3;
    EXPECT_THROW(convolve(x, w.sample(64)), SupportError);
}

TEST(Convolve, NonExpansive) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto x = random_signal(seed).sample(128);
        const auto w = random_filter(seed + 100, -3).sample(128);
        const auto [l1, tv] = check_nonexpansive(x, w);
        EXPECT_TRUE(l1.pass) << l1.measured << " vs " << l1.bound;
        EXPECT_TRUE(tv.pass) << tv.measured << " vs " << tv.bound;
    }
}

TEST(SigmaB, CompactSupportRequirement) {
    const auto x = random_signal(1).sample(64);
    EXPECT_NO_THROW(sigma_b(x, -0.1, Activation::relu()));
    EXPECT_THROW(sigma_b(x, 0.1, Activation::relu()), std::invalid_argument);
    EXPECT_THROW(sigma_b(x, 0.1, Activation::identity()), std::invalid_argument);
}

TEST(Fact1, ClosedForms) {
    EXPECT_EQ(check_fact1(make_displacement(FieldKind::rotation, rad(10))).measured, 0.0);
    for (double s = 0.85; s <= 1.15 + 1e-12; s += 0.05) {
        const auto r = check_fact1(make_displacement(FieldKind::dilation, s));
        EXPECT_NEAR(r.measured, std::abs(s * s - 1.0), 1e-15);
        EXPECT_TRUE(r.pass);
    }
    const auto so = check_fact1(make_displacement(FieldKind::smooth_odd, 0.05, 2));
    EXPECT_TRUE(so.pass) << so.measured << " vs " << so.bound;
}

TEST(NormDrift, RigidFieldsAndDilation) {
    FilterSpec w;
    w.j = -3;
    for (const auto& r : check_filter_norm_drift(w, make_rotation_unchecked(M_PI / 2), {64})) {
        EXPECT_TRUE(r.pass);
        EXPECT_LE(r.measured, 1e-14);
    }
    for (const auto& r : check_filter_norm_drift(w, make_displacement(FieldKind::rotation, rad(5)), {128}))
        EXPECT_TRUE(r.pass) << r.measured << " slack " << r.slack;
    FilterSpec wide = w;
    wide.sx = wide.sy = 0.3;
    const auto d = check_filter_norm_drift(wide, make_displacement(FieldKind::dilation, 0.9), {128, 256});
    ASSERT_EQ(d.size(), 2u);
    // ‖w(s·)‖₁ = ‖w‖₁/s² away from the mask, so the constant settles near |1/s² − 1| / |1 − s|
    EXPECT_NEAR(d[1].control, (1.0 / 0.81 - 1.0) / 0.1, 0.1);
}

TEST(Lemma1, ZeroFieldAndMonotone) {
    Lemma1Config cfg;
    cfg.x = random_signal(3);
    cfg.w = random_filter(10, -3);
    cfg.f = random_filter(11, -3);
    cfg.field = make_displacement(FieldKind::zero, 0.0);
    EXPECT_EQ(eval_lemma1(cfg, 128).lhs, 0.0);
    double prev = 0.0;
    for (double deg : {2.0, 5.0, 10.0}) {
        cfg.field = make_displacement(FieldKind::rotation, rad(deg));
        const auto e = eval_lemma1(cfg, 128);
        EXPECT_GT(e.lhs, prev);
        EXPECT_LE(e.lhs, e.bound);
        prev = e.lhs;
    }
}

TEST(Theorem1, ZeroFieldGivesZero) {
    const auto h = random_signal(5, 0.35);
    for (std::size_t L : {1, 2}) {
        const auto spec = make_stack(L, make_displacement(FieldKind::zero, 0.0), -3, 1, FeatureFilters::rotated_generative);
        const auto e = eval_theorem1(spec, h, 128);
        EXPECT_EQ(e.measured, 0.0);
        EXPECT_EQ(e.control, 0.0);
        EXPECT_EQ(e.baseline_max_diff, 0.0);
    }
}

TEST(Theorem1, BaselinePreservedAndTraceRecorded) {
    const auto h = random_signal(6, 0.35);
    auto spec = make_stack(2, make_displacement(FieldKind::rotation, rad(5)), -3, 2, FeatureFilters::rotated_generative,
                           -0.01, -0.01);
    const auto e = eval_theorem1(spec, h, 128);
    EXPECT_LE(e.baseline_max_diff, 1e-12);
    ASSERT_EQ(e.trace.size(), 4u);
    EXPECT_EQ(e.trace[0].layer, -2);
    EXPECT_EQ(e.trace[1].layer, -1);
    // the top generative layer sees h itself, the zero baseline subtracted
    EXPECT_DOUBLE_EQ(e.trace[0].xc_l1, e.h_l1);
    EXPECT_GT(e.trace[1].xc_l1, 0.0);
    EXPECT_LE(e.measured, e.bound);
}

TEST(Theorem1, SingleLayerMatchesHandAssembly) {
    const auto h = random_signal(7, 0.35);
    const auto field = make_displacement(FieldKind::rotation, rad(5));
    const auto spec = make_stack(1, field, -3, 3, FeatureFilters::rotated_generative);
    const std::size_t N = 128;
    const auto& sl = spec.layers[0];
    const auto act = Activation::relu();
    const auto hs = h.sample(N);
    const auto xs = sigma_b(convolve(hs, sl.gen.sample(N)), 0.0, act);
    const auto xt = sigma_b(convolve(hs, sl.gen.sample_warped(N, field)), 0.0, act);
    const auto Fs = sigma_b(convolve(xs, sl.feat.sample(N)), 0.0, act);
    const auto Ft = sigma_b(convolve(xt, sl.feat.sample_warped(N, field)), 0.0, act);
    const auto Fc = sigma_b(convolve(xt, sl.feat.sample(N)), 0.0, act);
    const auto e = eval_theorem1(spec, h, N);
    EXPECT_NEAR(e.measured, l1_distance(Fs, Ft), 1e-15);
    EXPECT_NEAR(e.control, l1_distance(Fs, Fc), 1e-15);
}

TEST(Theorem1, AssumptionChecks) {
    auto spec = make_stack(1, make_displacement(FieldKind::rotation, rad(5)), -3, 1, FeatureFilters::independent);
    spec.layers[0].gen.norm = 1.2;
    EXPECT_THROW(spec.validate(), AssumptionError);
    spec = make_stack(1, make_displacement(FieldKind::rotation, rad(5)), -3, 1, FeatureFilters::independent);
    spec.layers[0].field = make_rotation_unchecked(rad(25));
    EXPECT_THROW(spec.validate(), AssumptionError);
    spec = make_stack(1, make_displacement(FieldKind::rotation, rad(5)), -3, 1, FeatureFilters::independent, 0.2);
    EXPECT_THROW(spec.validate(), std::invalid_argument);
}

TEST(AtomImplementability, LinearAndNegationExact) {
    std::vector<GridFilter> atoms;
    for (std::uint64_t k = 0; k < 4; ++k) atoms.push_back(random_filter(k, -3).sample(128));
    const std::vector<double> a{0.3, -1.1, 0.7, 2.0};
    for (const auto& f : {make_displacement(FieldKind::rotation, rad(10)), make_displacement(FieldKind::smooth_odd, 0.05, 1)}) {
        const auto r = verify_atom_implementability(atoms, a, f);
        EXPECT_TRUE(r.pass) << r.measured << " " << r.reason;
    }
    EXPECT_THROW(verify_atom_implementability(atoms, {1.0}, make_rotation_unchecked(0.1)), std::invalid_argument);
}

TEST(BoundReport, CsvFormatting) {
    const auto header = BoundReport::csv_header();
    EXPECT_EQ(header.rfind("check,config,N,measured,bound,slack,pass", 0), 0u);
    const auto r = rejected_report("lemma1", "rotation(25deg)", 128, "A2: too large, really");
    EXPECT_TRUE(r.rejected);
    const auto row = r.csv_row();
    EXPECT_EQ(std::count(row.begin(), row.end(), ','), std::count(header.begin(), header.end(), ','));
}
