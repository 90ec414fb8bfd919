#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <span>
#include <vector>

#include "dafd/tensor.hpp"

namespace dafd::test_util {

inline std::vector<double> to_vec(std::span<const double> s) { return {s.begin(), s.end()}; }

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

/// Σ r ⊙ y, the scalar objective whose gradient w.r.t. y is r.
inline double dot(std::span<const double> r, std::span<const double> y) {
    double s = 0.0;
    for (std::size_t i = 0; i < r.size(); ++i) s += r[i] * y[i];
    return s;
}

/// Naive reference convolution with explicit bounds checks.
inline Tensor4<double> naive_conv(const Tensor4<double>& x, const Tensor4<double>& w, std::size_t stride,
                                  std::size_t pad) {
    const std::size_t L = w.h();
    const std::size_t oh = (x.h() + 2 * pad - L) / stride + 1;
    const std::size_t ow = (x.w() + 2 * pad - L) / stride + 1;
    Tensor4<double> y({x.n(), w.n(), oh, ow});
    for (std::size_t n = 0; n < x.n(); ++n)
        for (std::size_t co = 0; co < w.n(); ++co)
            for (std::size_t i = 0; i < oh; ++i)
                for (std::size_t j = 0; j < ow; ++j) {
                    double s = 0.0;
                    for (std::size_t ci = 0; ci < w.c(); ++ci)
                        for (std::size_t p = 0; p < L; ++p)
                            for (std::size_t q = 0; q < L; ++q) {
                                const long r = long(i * stride + p) - long(pad);
                                const long c = long(j * stride + q) - long(pad);
                                if (r < 0 || c < 0 || r >= long(x.h()) || c >= long(x.w())) continue;
                                s += x(n, ci, std::size_t(r), std::size_t(c)) * w(co, ci, p, q);
                            }
                    y(n, co, i, j) = s;
                }
    return y;
}

}  // namespace dafd::test_util
