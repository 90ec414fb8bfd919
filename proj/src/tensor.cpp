#include "dafd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace dafd {

std::string Shape4::str() const {
    std::ostringstream os;
    os << "(" << n << ", " << c << ", " << h << ", " << w << ")";
    return os.str();
}

template <typename T>
Tensor4<T>::Tensor4(Shape4 shape, T fill) : shape_(shape), data_(shape.size(), fill) {}

template <typename T>
Tensor4<T>::Tensor4(Shape4 shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.size())
        throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_.str());
}

template <typename T>
void Tensor4<T>::fill(T value) {
    std::fill(data_.begin(), data_.end(), value);
}

template <typename T>
bool Tensor4<T>::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
Tensor4<T> Tensor4<T>::reshaped(Shape4 shape) const {
    if (shape.size() != data_.size())
        throw ShapeError("cannot reshape " + shape_.str() + " to " + shape.str());
    return Tensor4<T>(shape, data_);
}

template <typename T>
void require_finite(const Tensor4<T>& t, const std::string& what) {
    if (!t.all_finite()) throw NumericError("non-finite values in " + what);
}

std::size_t ConvSpec::out_extent(std::size_t in, std::size_t k) const {
    if (stride == 0) throw ShapeError("conv stride must be positive");
    const std::size_t padded = in + 2 * padding;
    if (padded < k)
        throw ShapeError("kernel size " + std::to_string(k) + " exceeds padded input " +
                         std::to_string(padded));
    if ((padded - k) % stride != 0)
        throw ShapeError("non-integral conv output: (" + std::to_string(in) + " + 2*" +
                         std::to_string(padding) + " - " + std::to_string(k) + ") / " +
                         std::to_string(stride));
    return (padded - k) / stride + 1;
}

namespace {

void check_conv_shapes(const Shape4& x, const Shape4& w) {
    if (w.h != w.w) throw ShapeError("conv filters must be square, got " + w.str());
    if (x.c != w.c)
        throw ShapeError("conv channel mismatch: input " + x.str() + " vs filter " + w.str());
}

}  // namespace

template <typename T>
Tensor4<T> conv2d(const Tensor4<T>& x, const Tensor4<T>& w, const ConvSpec& spec) {
    check_conv_shapes(x.shape(), w.shape());
    const std::size_t L = w.h();
    const std::size_t oh = spec.out_extent(x.h(), L);
    const std::size_t ow = spec.out_extent(x.w(), L);
    const auto pad = static_cast<std::ptrdiff_t>(spec.padding);
    const auto s = static_cast<std::ptrdiff_t>(spec.stride);
    const auto H = static_cast<std::ptrdiff_t>(x.h());
    const auto W = static_cast<std::ptrdiff_t>(x.w());

    Tensor4<T> y({x.n(), w.n(), oh, ow});
    for (std::size_t n = 0; n < x.n(); ++n)
        for (std::size_t co = 0; co < w.n(); ++co)
            for (std::size_t i = 0; i < oh; ++i)
                for (std::size_t j = 0; j < ow; ++j) {
                    T acc = 0;
                    for (std::size_t ci = 0; ci < x.c(); ++ci)
                        for (std::size_t p = 0; p < L; ++p) {
                            const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(i) * s - pad +
                                                     static_cast<std::ptrdiff_t>(p);
                            if (r < 0 || r >= H) continue;
                            for (std::size_t q = 0; q < L; ++q) {
                                const std::ptrdiff_t col = static_cast<std::ptrdiff_t>(j) * s -
                                                           pad + static_cast<std::ptrdiff_t>(q);
                                if (col < 0 || col >= W) continue;
                                acc += x(n, ci, r, col) * w(co, ci, p, q);
                            }
                        }
                    y(n, co, i, j) = acc;
                }
    return y;
}

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor4<T>& x, const Tensor4<T>& w, const Tensor4<T>& dy,
                             const ConvSpec& spec) {
    check_conv_shapes(x.shape(), w.shape());
    const std::size_t L = w.h();
    const std::size_t oh = spec.out_extent(x.h(), L);
    const std::size_t ow = spec.out_extent(x.w(), L);
    if (dy.shape() != Shape4{x.n(), w.n(), oh, ow})
        throw ShapeError("conv backward: dy shape " + dy.shape().str() + " does not match output");
    const auto pad = static_cast<std::ptrdiff_t>(spec.padding);
    const auto s = static_cast<std::ptrdiff_t>(spec.stride);
    const auto H = static_cast<std::ptrdiff_t>(x.h());
    const auto W = static_cast<std::ptrdiff_t>(x.w());

    ConvGrads<T> g{Tensor4<T>(x.shape()), Tensor4<T>(w.shape())};
    for (std::size_t n = 0; n < x.n(); ++n)
        for (std::size_t co = 0; co < w.n(); ++co)
            for (std::size_t i = 0; i < oh; ++i)
                for (std::size_t j = 0; j < ow; ++j) {
                    const T d = dy(n, co, i, j);
                    if (d == T(0)) continue;
                    for (std::size_t ci = 0; ci < x.c(); ++ci)
                        for (std::size_t p = 0; p < L; ++p) {
                            const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(i) * s - pad +
                                                     static_cast<std::ptrdiff_t>(p);
                            if (r < 0 || r >= H) continue;
                            for (std::size_t q = 0; q < L; ++q) {
                                const std::ptrdiff_t col = static_cast<std::ptrdiff_t>(j) * s -
                                                           pad + static_cast<std::ptrdiff_t>(q);
                                if (col < 0 || col >= W) continue;
                                g.dx(n, ci, r, col) += d * w(co, ci, p, q);
                                g.dw(co, ci, p, q) += d * x(n, ci, r, col);
                            }
                        }
                }
    return g;
}

Activation Activation::leaky(double a) {
    Activation act{ActivationKind::leaky, a};
    act.validate();
    return act;
}

void Activation::validate() const {
    if (kind == ActivationKind::leaky && !(alpha >= 0.0 && alpha <= 1.0))
        throw std::invalid_argument("leaky slope must lie in [0, 1], got " + std::to_string(alpha));
}

Activation parse_activation(const std::string& name) {
    if (name == "relu") return Activation::relu();
    if (name == "identity") return Activation::identity();
    if (name.rfind("leaky", 0) == 0) {
        // "leaky" or "leaky:0.1"
        const auto colon = name.find(':');
        const double a = colon == std::string::npos ? 0.1 : std::stod(name.substr(colon + 1));
        return Activation::leaky(a);
    }
    throw std::invalid_argument("unsupported activation kind '" + name + "'");
}

template <typename T>
Tensor4<T> sigma_b(const Tensor4<T>& x, std::span<const T> bias, const Activation& act) {
    act.validate();
    if (!bias.empty() && bias.size() != x.c())
        throw ShapeError("bias length " + std::to_string(bias.size()) + " != channels " +
                         std::to_string(x.c()));
    Tensor4<T> y(x.shape());
    const std::size_t plane = x.h() * x.w();
    for (std::size_t n = 0; n < x.n(); ++n)
        for (std::size_t c = 0; c < x.c(); ++c) {
            const T b = bias.empty() ? T(0) : bias[c];
            const std::size_t base = (n * x.c() + c) * plane;
            for (std::size_t k = 0; k < plane; ++k) y[base + k] = act.apply(x[base + k] + b);
        }
    return y;
}

template <typename T>
Tensor4<T> sigma_b_backward(const Tensor4<T>& x, std::span<const T> bias, const Activation& act,
                            const Tensor4<T>& dy, std::span<T> dbias) {
    if (dy.shape() != x.shape()) throw ShapeError("sigma_b backward: dy shape mismatch");
    if (!bias.empty() && bias.size() != x.c()) throw ShapeError("sigma_b backward: bias length");
    if (!dbias.empty() && dbias.size() != x.c()) throw ShapeError("sigma_b backward: dbias length");
    Tensor4<T> dx(x.shape());
    const std::size_t plane = x.h() * x.w();
    for (std::size_t n = 0; n < x.n(); ++n)
        for (std::size_t c = 0; c < x.c(); ++c) {
            const T b = bias.empty() ? T(0) : bias[c];
            const std::size_t base = (n * x.c() + c) * plane;
            T acc = 0;
            for (std::size_t k = 0; k < plane; ++k) {
                const T g = dy[base + k] * act.slope(x[base + k] + b);
                dx[base + k] = g;
                acc += g;
            }
            if (!dbias.empty()) dbias[c] += acc;
        }
    return dx;
}

template <typename T>
Tensor4<T> max_pool(const Tensor4<T>& x, std::size_t k, std::vector<std::uint32_t>& argmax) {
    if (k == 0 || x.h() % k != 0 || x.w() % k != 0)
        throw ShapeError("max_pool window " + std::to_string(k) + " does not divide " +
                         x.shape().str());
    Tensor4<T> y({x.n(), x.c(), x.h() / k, x.w() / k});
    argmax.assign(y.size(), 0);
    std::size_t o = 0;
    for (std::size_t n = 0; n < x.n(); ++n)
        for (std::size_t c = 0; c < x.c(); ++c)
            for (std::size_t i = 0; i < y.h(); ++i)
                for (std::size_t j = 0; j < y.w(); ++j, ++o) {
                    std::size_t best = x.offset(n, c, i * k, j * k);
                    for (std::size_t p = 0; p < k; ++p)
                        for (std::size_t q = 0; q < k; ++q) {
                            const std::size_t idx = x.offset(n, c, i * k + p, j * k + q);
                            if (x[idx] > x[best]) best = idx;
                        }
                    y[o] = x[best];
                    argmax[o] = static_cast<std::uint32_t>(best);
                }
    return y;
}

template <typename T>
Tensor4<T> max_pool_backward(const Shape4& in_shape, const Tensor4<T>& dy,
                             const std::vector<std::uint32_t>& argmax) {
    if (argmax.size() != dy.size()) throw ShapeError("max_pool backward: argmax size mismatch");
    Tensor4<T> dx(in_shape);
    for (std::size_t o = 0; o < dy.size(); ++o) dx[argmax[o]] += dy[o];
    return dx;
}

template <typename T>
Tensor4<T> dense_forward(const Tensor4<T>& x, std::span<const T> weight, std::span<const T> bias,
                         std::size_t out) {
    const std::size_t in = x.per_sample();
    if (weight.size() != out * in)
        throw ShapeError("dense weight size " + std::to_string(weight.size()) + " != " +
                         std::to_string(out) + "x" + std::to_string(in));
    if (bias.size() != out) throw ShapeError("dense bias size mismatch");
    Tensor4<T> y({x.n(), out, 1, 1});
    for (std::size_t n = 0; n < x.n(); ++n) {
        const auto xs = x.sample(n);
        for (std::size_t o = 0; o < out; ++o) {
            T acc = bias[o];
            const T* row = weight.data() + o * in;
            for (std::size_t i = 0; i < in; ++i) acc += row[i] * xs[i];
            y(n, o, 0, 0) = acc;
        }
    }
    return y;
}

template <typename T>
Tensor4<T> dense_backward(const Tensor4<T>& x, std::span<const T> weight, std::size_t out,
                          const Tensor4<T>& dy, std::span<T> dweight, std::span<T> dbias) {
    const std::size_t in = x.per_sample();
    if (dy.n() != x.n() || dy.per_sample() != out) throw ShapeError("dense backward: dy shape");
    if (dweight.size() != out * in || dbias.size() != out)
        throw ShapeError("dense backward: gradient buffer size");
    Tensor4<T> dx(x.shape());
    for (std::size_t n = 0; n < x.n(); ++n) {
        const auto xs = x.sample(n);
        auto dxs = dx.sample(n);
        const auto dys = dy.sample(n);
        for (std::size_t o = 0; o < out; ++o) {
            const T d = dys[o];
            dbias[o] += d;
            const T* row = weight.data() + o * in;
            T* drow = dweight.data() + o * in;
            for (std::size_t i = 0; i < in; ++i) {
                drow[i] += d * xs[i];
                dxs[i] += d * row[i];
            }
        }
    }
    return dx;
}

template <typename T>
XentResult<T> softmax_xent(const Tensor4<T>& logits, std::span<const int> labels) {
    const std::size_t n = logits.n();
    const std::size_t classes = logits.per_sample();
    if (labels.size() != n)
        throw ShapeError("label count " + std::to_string(labels.size()) + " != batch " +
                         std::to_string(n));
    if (n == 0) throw ShapeError("softmax_xent on empty batch");
    XentResult<T> r{T(0), Tensor4<T>(logits.shape())};
    double total = 0.0;
    std::vector<double> p(classes);
    for (std::size_t s = 0; s < n; ++s) {
        const int y = labels[s];
        if (y < 0 || static_cast<std::size_t>(y) >= classes)
            throw std::out_of_range("label " + std::to_string(y) + " outside [0, " +
                                    std::to_string(classes) + ")");
        const auto z = logits.sample(s);
        const double mx = *std::max_element(z.begin(), z.end());
        double sum = 0.0;
        for (std::size_t k = 0; k < classes; ++k) {
            p[k] = std::exp(static_cast<double>(z[k]) - mx);
            sum += p[k];
        }
        total += -(static_cast<double>(z[y]) - mx - std::log(sum));
        auto g = r.dlogits.sample(s);
        for (std::size_t k = 0; k < classes; ++k) {
            const double onehot = static_cast<std::size_t>(y) == k ? 1.0 : 0.0;
            g[k] = static_cast<T>((p[k] / sum - onehot) / static_cast<double>(n));
        }
    }
    r.loss = static_cast<T>(total / static_cast<double>(n));
    return r;
}

template <typename T>
void sgd_step(std::span<T> params, std::span<const T> grads, std::span<T> velocity, T lr,
              T momentum) {
    if (params.size() != grads.size() || params.size() != velocity.size())
        throw ShapeError("sgd_step: params/grads/velocity sizes " + std::to_string(params.size()) +
                         "/" + std::to_string(grads.size()) + "/" +
                         std::to_string(velocity.size()));
    if (!(lr > T(0))) throw std::invalid_argument("sgd_step: lr must be positive");
    if (!(momentum >= T(0) && momentum < T(1)))
        throw std::invalid_argument("sgd_step: momentum must lie in [0, 1)");
    for (std::size_t i = 0; i < params.size(); ++i) {
        velocity[i] = momentum * velocity[i] + grads[i];
        params[i] -= lr * velocity[i];
    }
}

double grad_check(const std::function<double(std::span<const double>)>& f,
                  std::span<const double> point, std::span<const double> analytic, double eps) {
    if (!(eps > 0.0)) throw std::invalid_argument("grad_check: eps must be positive");
    if (point.size() != analytic.size()) throw ShapeError("grad_check: gradient size mismatch");
    std::vector<double> p(point.begin(), point.end());
    double worst = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double orig = p[i];
        p[i] = orig + eps;
        const double fp = f(p);
        p[i] = orig - eps;
        const double fm = f(p);
        p[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw NumericError("grad_check: non-finite objective at coordinate " +
                               std::to_string(i));
        const double central = (fp - fm) / (2.0 * eps);
        const double denom = std::max({std::abs(analytic[i]), std::abs(central), 1e-8});
        worst = std::max(worst, std::abs(analytic[i] - central) / denom);
    }
    return worst;
}

template <typename T>
void glorot_uniform(std::span<T> out, std::size_t fan_in, std::size_t fan_out,
                    std::mt19937_64& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (auto& v : out) v = static_cast<T>(dist(rng));
}

template <typename T>
Tensor4<T> random_tensor(Shape4 shape, std::mt19937_64& rng, double lo, double hi) {
    std::uniform_real_distribution<double> dist(lo, hi);
    Tensor4<T> t(shape);
    for (auto& v : t.data()) v = static_cast<T>(dist(rng));
    return t;
}

#define DAFD_INSTANTIATE(T)                                                                      \
    template class Tensor4<T>;                                                                   \
    template void require_finite(const Tensor4<T>&, const std::string&);                         \
    template Tensor4<T> conv2d(const Tensor4<T>&, const Tensor4<T>&, const ConvSpec&);           \
    template ConvGrads<T> conv2d_backward(const Tensor4<T>&, const Tensor4<T>&,                  \
                                          const Tensor4<T>&, const ConvSpec&);                   \
    template Tensor4<T> sigma_b(const Tensor4<T>&, std::span<const T>, const Activation&);       \
    template Tensor4<T> sigma_b_backward(const Tensor4<T>&, std::span<const T>,                  \
                                         const Activation&, const Tensor4<T>&, std::span<T>);    \
    template Tensor4<T> max_pool(const Tensor4<T>&, std::size_t, std::vector<std::uint32_t>&);   \
    template Tensor4<T> max_pool_backward(const Shape4&, const Tensor4<T>&,                      \
                                          const std::vector<std::uint32_t>&);                    \
    template Tensor4<T> dense_forward(const Tensor4<T>&, std::span<const T>, std::span<const T>, \
                                      std::size_t);                                              \
    template Tensor4<T> dense_backward(const Tensor4<T>&, std::span<const T>, std::size_t,       \
                                       const Tensor4<T>&, std::span<T>, std::span<T>);           \
    template XentResult<T> softmax_xent(const Tensor4<T>&, std::span<const int>);                \
    template void sgd_step(std::span<T>, std::span<const T>, std::span<T>, T, T);                \
    template void glorot_uniform(std::span<T>, std::size_t, std::size_t, std::mt19937_64&);      \
    template Tensor4<T> random_tensor(Shape4, std::mt19937_64&, double, double);

DAFD_INSTANTIATE(float)
DAFD_INSTANTIATE(double)

#undef DAFD_INSTANTIATE

}  // namespace dafd
