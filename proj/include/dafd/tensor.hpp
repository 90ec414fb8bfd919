#pragma once

// Dense rank-4 tensors and the hand-written layer primitives the learning
// stack is built from. Everything here is templated on the scalar type and
// explicitly instantiated for float (train32) and double (verify64).

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dafd {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

/// Thrown when operand shapes are inconsistent or a precondition on sizes fails.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Thrown when a computation produces or consumes NaN/Inf.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Precision
// ---------------------------------------------------------------------------

enum class Precision { train32, verify64 };

template <Precision P>
using real_t = std::conditional_t<P == Precision::train32, float, double>;

// ---------------------------------------------------------------------------
// Tensor4
// ---------------------------------------------------------------------------

struct Shape4 {
    std::size_t n = 0, c = 0, h = 0, w = 0;

    std::size_t size() const { return n * c * h * w; }
    bool operator==(const Shape4&) const = default;
    std::string str() const;
};

/// Row-major (n, c, h, w) array, w innermost.
template <typename T>
class Tensor4 {
public:
    using value_type = T;

    Tensor4() = default;
    explicit Tensor4(Shape4 shape, T fill = T(0));
    Tensor4(Shape4 shape, std::vector<T> data);

    const Shape4& shape() const { return shape_; }
    std::size_t n() const { return shape_.n; }
    std::size_t c() const { return shape_.c; }
    std::size_t h() const { return shape_.h; }
    std::size_t w() const { return shape_.w; }
    std::size_t size() const { return data_.size(); }

    std::size_t offset(std::size_t n, std::size_t c, std::size_t i, std::size_t j) const {
        return ((n * shape_.c + c) * shape_.h + i) * shape_.w + j;
    }
    T& operator()(std::size_t n, std::size_t c, std::size_t i, std::size_t j) {
        return data_[offset(n, c, i, j)];
    }
    const T& operator()(std::size_t n, std::size_t c, std::size_t i, std::size_t j) const {
        return data_[offset(n, c, i, j)];
    }
    T& operator[](std::size_t k) { return data_[k]; }
    const T& operator[](std::size_t k) const { return data_[k]; }

    std::span<T> data() { return data_; }
    std::span<const T> data() const { return data_; }

    /// Contiguous view of sample `n` (c·h·w values).
    std::span<T> sample(std::size_t n) { return {data_.data() + n * per_sample(), per_sample()}; }
    std::span<const T> sample(std::size_t n) const {
        return {data_.data() + n * per_sample(), per_sample()};
    }
    std::size_t per_sample() const { return shape_.c * shape_.h * shape_.w; }

    void fill(T value);
    bool all_finite() const;
    Tensor4 reshaped(Shape4 shape) const;

    template <typename U>
    Tensor4<U> cast() const {
        std::vector<U> out(data_.begin(), data_.end());
        return Tensor4<U>(shape_, std::move(out));
    }

private:
    Shape4 shape_{};
    std::vector<T> data_;
};

/// Throws NumericError naming `what` if any entry is NaN/Inf.
template <typename T>
void require_finite(const Tensor4<T>& t, const std::string& what);

// ---------------------------------------------------------------------------
// Convolution (cross-correlation orientation, no kernel flip)
// ---------------------------------------------------------------------------

struct ConvSpec {
    std::size_t stride = 1;
    std::size_t padding = 0;

    /// Output extent for an input extent and kernel size; throws ShapeError
    /// unless (in + 2·pad − k) is a non-negative multiple of the stride.
    std::size_t out_extent(std::size_t in, std::size_t k) const;
};

/// y[n,co,i,j] = Σ x[n,ci,i·s−pad+p, j·s−pad+q] · w[co,ci,p,q], zero outside bounds.
/// Filters are (C_out, C_in, L, L).
template <typename T>
Tensor4<T> conv2d(const Tensor4<T>& x, const Tensor4<T>& w, const ConvSpec& spec);

template <typename T>
struct ConvGrads {
    Tensor4<T> dx;
    Tensor4<T> dw;
};

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor4<T>& x, const Tensor4<T>& w, const Tensor4<T>& dy,
                             const ConvSpec& spec);

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

enum class ActivationKind { relu, identity, leaky };

/// A non-expansive scalar nonlinearity: |σ(a) − σ(b)| ≤ |a − b|.
struct Activation {
    ActivationKind kind = ActivationKind::relu;
    double alpha = 0.0;  // leaky slope, 0 ≤ alpha ≤ 1

    static Activation relu() { return {ActivationKind::relu, 0.0}; }
    static Activation identity() { return {ActivationKind::identity, 0.0}; }
    static Activation leaky(double a);

    void validate() const;

    template <typename T>
    T apply(T z) const {
        switch (kind) {
        case ActivationKind::relu: return z > T(0) ? z : T(0);
        case ActivationKind::identity: return z;
        case ActivationKind::leaky: return z > T(0) ? z : static_cast<T>(alpha) * z;
        }
        return z;
    }
    template <typename T>
    T slope(T z) const {
        switch (kind) {
        case ActivationKind::relu: return z > T(0) ? T(1) : T(0);
        case ActivationKind::identity: return T(1);
        case ActivationKind::leaky: return z > T(0) ? T(1) : static_cast<T>(alpha);
        }
        return T(1);
    }
};

Activation parse_activation(const std::string& name);

/// y = σ(x + bias[c]). Bias may be empty (treated as zeros).
template <typename T>
Tensor4<T> sigma_b(const Tensor4<T>& x, std::span<const T> bias, const Activation& act);

/// Backward of sigma_b given the forward input x. Accumulates into dbias when non-empty.
template <typename T>
Tensor4<T> sigma_b_backward(const Tensor4<T>& x, std::span<const T> bias, const Activation& act,
                            const Tensor4<T>& dy, std::span<T> dbias);

// ---------------------------------------------------------------------------
// Pooling and fully-connected
// ---------------------------------------------------------------------------

/// Non-overlapping max pooling with window `k`; h and w must be divisible by k.
template <typename T>
Tensor4<T> max_pool(const Tensor4<T>& x, std::size_t k, std::vector<std::uint32_t>& argmax);

template <typename T>
Tensor4<T> max_pool_backward(const Shape4& in_shape, const Tensor4<T>& dy,
                             const std::vector<std::uint32_t>& argmax);

/// y[n,o] = Σ_i W[o,i]·x[n,i] + b[o]; x is flattened per sample, y is (n, out, 1, 1).
template <typename T>
Tensor4<T> dense_forward(const Tensor4<T>& x, std::span<const T> weight, std::span<const T> bias,
                         std::size_t out);

/// Returns dx; accumulates dW and db.
template <typename T>
Tensor4<T> dense_backward(const Tensor4<T>& x, std::span<const T> weight, std::size_t out,
                          const Tensor4<T>& dy, std::span<T> dweight, std::span<T> dbias);

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

template <typename T>
struct XentResult {
    T loss = 0;
    Tensor4<T> dlogits;
};

/// Mean softmax cross-entropy over the batch; logits flattened to (n, classes).
template <typename T>
XentResult<T> softmax_xent(const Tensor4<T>& logits, std::span<const int> labels);

// ---------------------------------------------------------------------------
// Optimisation
// ---------------------------------------------------------------------------

/// Classical momentum: v ← μ·v + g; p ← p − lr·v.
template <typename T>
void sgd_step(std::span<T> params, std::span<const T> grads, std::span<T> velocity, T lr,
              T momentum);

/// Max over coordinates of |analytic − central| / max(|analytic|, |central|, 1e-8).
double grad_check(const std::function<double(std::span<const double>)>& f,
                  std::span<const double> point, std::span<const double> analytic, double eps);

// ---------------------------------------------------------------------------
// Initialisation helpers
// ---------------------------------------------------------------------------

/// Uniform in ±sqrt(6 / (fan_in + fan_out)).
template <typename T>
void glorot_uniform(std::span<T> out, std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng);

template <typename T>
Tensor4<T> random_tensor(Shape4 shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0);

}  // namespace dafd
