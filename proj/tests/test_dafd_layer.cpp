#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "dafd/dafd_layer.hpp"
#include "test_util.hpp"

using namespace dafd;
using dafd::test_util::dot;
using dafd::test_util::max_abs_diff;

namespace {

void randomize(DafdLayer<double>& layer, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (auto* p : layer.params())
        for (auto& v : p->value) v = u(rng);
}

std::size_t input_extent(std::size_t want, const ConvSpec& spec, std::size_t L) {
    std::size_t H = want;
    while (H + 2 * spec.padding < L || (H + 2 * spec.padding - L) % spec.stride != 0) ++H;
    return H;
}

Tensor4<double> dense_reference(const DafdLayer<double>& layer, const Tensor4<double>& x, int domain) {
    const auto W = reconstruct_filter(layer.resolve_atoms(domain), layer.coeffs());
    auto y = conv2d(x, W, layer.spec());
    for (std::size_t n = 0; n < y.n(); ++n)
        for (std::size_t c = 0; c < y.c(); ++c)
            for (std::size_t i = 0; i < y.h(); ++i)
                for (std::size_t j = 0; j < y.w(); ++j) y(n, c, i, j) += layer.bias().value[c];
    return y;
}

}  // namespace

TEST(ReconstructFilter, HandComputed) {
    AtomBank<double> bank(0, 2, 1);
    bank.values = {2.0, -1.0};
    CoeffTensor<double> a(2, 1, 2);
    a.at(0, 0, 0) = 1.0;
    a.at(1, 0, 0) = 3.0;
    a.at(0, 0, 1) = 0.5;
    a.at(1, 0, 1) = 0.0;
    const auto W = reconstruct_filter(bank, a);
    EXPECT_DOUBLE_EQ(W(0, 0, 0, 0), 2.0 - 3.0);
    EXPECT_DOUBLE_EQ(W(1, 0, 0, 0), 1.0);
    CoeffTensor<double> wrong(3, 1, 2);
    EXPECT_THROW(reconstruct_filter(bank, wrong), ShapeError);
}

TEST(InitFromDense, FullRankIsExact) {
    std::mt19937_64 rng(1);
    const auto W = random_tensor<double>({4, 3, 3, 3}, rng);
    const auto f = init_from_dense(W, 9);
    EXPECT_LE(f.residual_error, 1e-12);
    EXPECT_LE(max_abs_diff(reconstruct_filter(f.atoms, f.coeffs).data(), W.data()), 1e-12);
}

TEST(InitFromDense, TruncationErrorMatchesReconstruction) {
    std::mt19937_64 rng(2);
    const auto W = random_tensor<double>({5, 4, 3, 3}, rng);
    for (std::size_t K : {1, 4, 6}) {
        const auto f = init_from_dense(W, K);
        const auto R = reconstruct_filter(f.atoms, f.coeffs);
        double fro = 0.0;
        for (std::size_t i = 0; i < W.size(); ++i) fro += (W[i] - R[i]) * (W[i] - R[i]);
        EXPECT_NEAR(std::sqrt(fro), f.residual_error, 1e-10) << "K=" << K;
        // atoms are orthonormal
        for (std::size_t a = 0; a < K; ++a)
            for (std::size_t b = 0; b < K; ++b) {
                double s = 0.0;
                for (std::size_t r = 0; r < 9; ++r) s += f.atoms.values[a * 9 + r] * f.atoms.values[b * 9 + r];
                EXPECT_NEAR(s, a == b ? 1.0 : 0.0, 1e-12);
            }
    }
    EXPECT_THROW(init_from_dense(W, 10), ShapeError);
    EXPECT_THROW(init_from_dense(W, 0), ShapeError);
}

TEST(DafdLayer, ConstructionChecks) {
    EXPECT_THROW(DafdLayer<double>(1, 1, 3, 0, 2, ConvSpec{1, 1}), ShapeError);
    EXPECT_THROW(DafdLayer<double>(1, 1, 2, 1, 2, ConvSpec{1, 1}), ShapeError);
    EXPECT_THROW(DafdLayer<double>(0, 1, 3, 1, 2, ConvSpec{1, 1}), ShapeError);
    DafdLayer<double> layer(2, 3, 3, 4, 2, ConvSpec{1, 1});
    EXPECT_THROW(layer.residual(0), std::out_of_range);
    EXPECT_THROW(layer.residual(2), std::out_of_range);
}

TEST(DafdLayer, ParameterCount) {
    // K(C'C + D L²) atoms and coefficients, plus C' bias
    DafdLayer<double> layer(64, 64, 3, 6, 2, ConvSpec{1, 1});
    EXPECT_EQ(layer.parameter_count(), 24684u + 64u);
}

TEST(DafdLayer, ForwardEqualsReconstructedConvolution) {
    std::mt19937_64 rng(17);
    for (std::size_t K : {1, 4, 6, 9})
        for (std::size_t stride : {1, 2, 3}) {
            const ConvSpec spec{stride, stride == 1 ? 1u : 0u};
            DafdLayer<double> layer(3, 4, 3, K, 2, spec);
            randomize(layer, rng);
            const std::size_t H = input_extent(9, spec, 3);
            const auto x = random_tensor<double>({2, 3, H, H}, rng);
            for (int d : {0, 1}) {
                const auto y = layer.forward(x, d).first;
                EXPECT_LE(max_abs_diff(y.data(), dense_reference(layer, x, d).data()), 1e-10)
                    << "K=" << K << " stride=" << stride << " domain=" << d;
            }
        }
}

TEST(DafdLayer, InitFromDenseReproducesDenseLayer) {
    std::mt19937_64 rng(4);
    const auto W = random_tensor<double>({3, 2, 3, 3}, rng);
    DafdLayer<double> layer(2, 3, 3, 9, 2, ConvSpec{1, 1});
    EXPECT_LE(layer.init_from_dense(W), 1e-12);
    const auto x = random_tensor<double>({1, 2, 6, 6}, rng);
    const auto ref = conv2d(x, W, ConvSpec{1, 1});
    for (int d : {0, 1}) EXPECT_LE(max_abs_diff(layer.forward(x, d).first.data(), ref.data()), 1e-12);
    for (double v : layer.residual(1).value) EXPECT_EQ(v, 0.0);
}

TEST(DafdLayer, BackwardMatchesFiniteDifferences) {
    std::mt19937_64 rng(21);
    const ConvSpec spec{2, 1};
    DafdLayer<double> layer(2, 3, 3, 4, 2, spec);
    randomize(layer, rng);
    const auto x = random_tensor<double>({2, 2, 7, 7}, rng);
    for (int d : {0, 1}) {
        auto [y, cache] = layer.forward(x, d);
        const auto r = random_tensor<double>(y.shape(), rng);
        const auto g = layer.backward(cache, r, d);

        auto objective = [&]() { return dot(r.data(), layer.forward(x, d).first.data()); };
        auto check_block = [&](std::vector<double>& block, const std::vector<double>& analytic) {
            const auto saved = block;
            auto f = [&](std::span<const double> p) {
                block.assign(p.begin(), p.end());
                const double v = objective();
                block = saved;
                return v;
            };
            return grad_check(f, saved, analytic, 1e-6);
        };
        EXPECT_LE(check_block(layer.atom_param(d).value, g.datoms), 1e-5);
        EXPECT_LE(check_block(layer.coeff_param().value, g.dcoeffs), 1e-5);
        EXPECT_LE(check_block(layer.bias().value, g.dbias), 1e-5);
        auto fx = [&](std::span<const double> p) {
            return dot(r.data(), layer.forward(Tensor4<double>(x.shape(), {p.begin(), p.end()}), d).first.data());
        };
        EXPECT_LE(grad_check(fx, x.data(), g.dx.data(), 1e-6), 1e-5);
    }
}

TEST(DafdLayer, AccumulateRoutesAtomGradientsToInvokedDomain) {
    std::mt19937_64 rng(8);
    DafdLayer<double> layer(2, 2, 3, 3, 3, ConvSpec{1, 1});
    randomize(layer, rng);
    const auto x = random_tensor<double>({1, 2, 5, 5}, rng);
    for (auto* p : layer.params()) p->zero_grad();
    auto [y, cache] = layer.forward(x, 2);
    const auto g = layer.backward(cache, Tensor4<double>(y.shape(), 1.0), 2);
    layer.accumulate(g, 2);
    for (double v : layer.source_atoms().grad) EXPECT_EQ(v, 0.0);
    for (double v : layer.residual(1).grad) EXPECT_EQ(v, 0.0);
    EXPECT_EQ(layer.residual(2).grad, g.datoms);
    EXPECT_EQ(layer.coeff_param().grad, g.dcoeffs);
    EXPECT_EQ(layer.bias().grad, g.dbias);
}

TEST(DafdLayer, FloatForwardTracksDouble) {
    std::mt19937_64 rng(30);
    DafdLayer<double> ld(2, 2, 3, 4, 2, ConvSpec{1, 1});
    randomize(ld, rng);
    DafdLayer<float> lf(2, 2, 3, 4, 2, ConvSpec{1, 1});
    auto pd = ld.params();
    auto pf = lf.params();
    ASSERT_EQ(pd.size(), pf.size());
    for (std::size_t i = 0; i < pd.size(); ++i) pf[i]->value.assign(pd[i]->value.begin(), pd[i]->value.end());
    const auto x = random_tensor<double>({1, 2, 5, 5}, rng);
    const auto yd = ld.forward(x, 1).first;
    const auto yf = lf.forward(x.cast<float>(), 1).first;
    for (std::size_t i = 0; i < yd.size(); ++i) EXPECT_NEAR(yd[i], yf[i], 1e-5);
}
