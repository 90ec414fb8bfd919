#include "dafd/dafd_layer.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <cmath>

namespace dafd {

template <typename T>
void AtomBank<T>::validate() const {
    if (K == 0) throw ShapeError("atom bank needs K >= 1");
    if (L % 2 == 0) throw ShapeError("atom size L must be odd, got " + std::to_string(L));
    if (values.size() != K * L * L) throw ShapeError("atom bank storage does not match K·L·L");
    for (T v : values)
        if (!std::isfinite(v)) throw NumericError("non-finite atom value");
}

template <typename T>
ResidualAtomBank<T>::ResidualAtomBank(AtomBank<T> b, int domain)
    : base(std::move(b)), residual(base.values.size(), T(0)), domain_(domain) {}

template <typename T>
AtomBank<T> ResidualAtomBank<T>::resolve() const {
    AtomBank<T> out(domain_, base.K, base.L);
    for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] = base.values[i] + residual[i];
    return out;
}

template <typename T>
Tensor4<T> reconstruct_filter(const AtomBank<T>& bank, const CoeffTensor<T>& coeffs) {
    if (bank.K != coeffs.K)
        throw ShapeError("reconstruct_filter: atom bank has K=" + std::to_string(bank.K) +
                         " but coefficients have K=" + std::to_string(coeffs.K));
    if (bank.values.size() != bank.K * bank.L * bank.L || coeffs.values.size() != coeffs.K * coeffs.c_in * coeffs.c_out)
        throw ShapeError("reconstruct_filter: storage size mismatch");
    const std::size_t L = bank.L;
    Tensor4<T> W({coeffs.c_out, coeffs.c_in, L, L});
    for (std::size_t co = 0; co < coeffs.c_out; ++co)
        for (std::size_t ci = 0; ci < coeffs.c_in; ++ci)
            for (std::size_t p = 0; p < L; ++p)
                for (std::size_t q = 0; q < L; ++q) {
                    T acc = 0;
                    for (std::size_t k = 0; k < bank.K; ++k) acc += coeffs.at(k, ci, co) * bank.at(k, p, q);
                    W(co, ci, p, q) = acc;
                }
    return W;
}

template <typename T>
DenseFactorization<T> init_from_dense(const Tensor4<T>& W, std::size_t K) {
    const std::size_t c_out = W.n(), c_in = W.c(), L = W.h();
    if (W.h() != W.w()) throw ShapeError("init_from_dense: filter must be square");
    if (K == 0 || K > L * L)
        throw ShapeError("init_from_dense: K=" + std::to_string(K) + " must lie in [1, L²=" +
                         std::to_string(L * L) + "]");

    DenseFactorization<T> out{AtomBank<T>(0, K, L), CoeffTensor<T>(K, c_in, c_out), 0.0};
    const auto rows = static_cast<Eigen::Index>(L * L);
    const auto cols = static_cast<Eigen::Index>(c_in * c_out);
    Eigen::MatrixXd M(rows, cols);
    for (std::size_t co = 0; co < c_out; ++co)
        for (std::size_t ci = 0; ci < c_in; ++ci)
            for (std::size_t p = 0; p < L; ++p)
                for (std::size_t q = 0; q < L; ++q)
                    M(static_cast<Eigen::Index>(p * L + q), static_cast<Eigen::Index>(ci * c_out + co)) =
                        static_cast<double>(W(co, ci, p, q));
    if (M.squaredNorm() == 0.0) return out;  // degenerate: zero atoms and coefficients

    Eigen::JacobiSVD<Eigen::MatrixXd> svd(M, Eigen::ComputeFullU | Eigen::ComputeThinV);
    const Eigen::VectorXd& s = svd.singularValues();
    const Eigen::MatrixXd& U = svd.matrixU();
    const Eigen::MatrixXd& V = svd.matrixV();
    const auto rank_cap = static_cast<std::size_t>(s.size());

    // Atoms beyond min(L², C_in·C_out) come from the remaining left basis with zero weight.
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t r = 0; r < L * L; ++r)
            out.atoms.values[k * L * L + r] =
                static_cast<T>(U(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)));
    for (std::size_t k = 0; k < std::min(K, rank_cap); ++k)
        for (std::size_t ci = 0; ci < c_in; ++ci)
            for (std::size_t co = 0; co < c_out; ++co)
                out.coeffs.at(k, ci, co) = static_cast<T>(
                    s(static_cast<Eigen::Index>(k)) *
                    V(static_cast<Eigen::Index>(ci * c_out + co), static_cast<Eigen::Index>(k)));
    double tail = 0.0;
    for (std::size_t k = K; k < rank_cap; ++k) tail += s(static_cast<Eigen::Index>(k)) * s(static_cast<Eigen::Index>(k));
    out.residual_error = std::sqrt(tail);
    return out;
}

// ---------------------------------------------------------------------------
// DafdLayer
// ---------------------------------------------------------------------------

template <typename T>
DafdLayer<T>::DafdLayer(std::size_t c_in, std::size_t c_out, std::size_t L, std::size_t K,
                        std::size_t num_domains, ConvSpec spec, const std::string& name)
    : c_in_(c_in), c_out_(c_out), L_(L), K_(K), spec_(spec),
      atoms_(name + ".atoms.d0", {K, 1, L, L}, 0),
      coeffs_(name + ".coeffs", {K, c_in, c_out, 1}, kShared),
      bias_(name + ".bias", {c_out, 1, 1, 1}, kShared) {
    if (c_in == 0 || c_out == 0) throw ShapeError("DafdLayer: channel counts must be positive");
    if (K == 0) throw ShapeError("DafdLayer: K must be >= 1");
    if (L % 2 == 0) throw ShapeError("DafdLayer: L must be odd");
    if (num_domains == 0) throw ShapeError("DafdLayer: need at least one domain");
    for (std::size_t d = 1; d < num_domains; ++d)
        residuals_.emplace_back(name + ".residual.d" + std::to_string(d), Shape4{K, 1, L, L},
                                static_cast<int>(d));
}

template <typename T>
void DafdLayer<T>::check_domain(int domain) const {
    if (domain < 0 || static_cast<std::size_t>(domain) >= num_domains())
        throw std::out_of_range("DafdLayer: unknown domain " + std::to_string(domain));
}

template <typename T>
Param<T>& DafdLayer<T>::residual(int domain) {
    if (domain <= 0 || static_cast<std::size_t>(domain) >= num_domains())
        throw std::out_of_range("DafdLayer: no residual bank for domain " + std::to_string(domain));
    return residuals_[static_cast<std::size_t>(domain - 1)];
}

template <typename T>
const Param<T>& DafdLayer<T>::residual(int domain) const {
    return const_cast<DafdLayer*>(this)->residual(domain);
}

template <typename T>
double DafdLayer<T>::init_from_dense(const Tensor4<T>& W) {
    if (W.shape() != Shape4{c_out_, c_in_, L_, L_})
        throw ShapeError("DafdLayer::init_from_dense: expected filter " +
                         Shape4{c_out_, c_in_, L_, L_}.str() + ", got " + W.shape().str());
    auto f = dafd::init_from_dense(W, K_);
    atoms_.value = f.atoms.values;
    coeffs_.value = f.coeffs.values;
    for (auto& r : residuals_) std::fill(r.value.begin(), r.value.end(), T(0));
    return f.residual_error;
}

template <typename T>
AtomBank<T> DafdLayer<T>::resolve_atoms(int domain) const {
    check_domain(domain);
    AtomBank<T> bank(domain, K_, L_);
    if (domain == 0) {
        bank.values = atoms_.value;
        return bank;
    }
    const auto& res = residual(domain).value;
    for (std::size_t i = 0; i < bank.values.size(); ++i) bank.values[i] = atoms_.value[i] + res[i];
    return bank;
}

template <typename T>
ResidualAtomBank<T> DafdLayer<T>::residual_bank(int domain) const {
    AtomBank<T> base(0, K_, L_);
    base.values = atoms_.value;
    ResidualAtomBank<T> rb(std::move(base), domain);
    rb.residual = residual(domain).value;
    return rb;
}

template <typename T>
CoeffTensor<T> DafdLayer<T>::coeffs() const {
    CoeffTensor<T> c(K_, c_in_, c_out_);
    c.values = coeffs_.value;
    return c;
}

template <typename T>
std::vector<Param<T>*> DafdLayer<T>::params() {
    std::vector<Param<T>*> out{&atoms_};
    for (auto& r : residuals_) out.push_back(&r);
    out.push_back(&coeffs_);
    out.push_back(&bias_);
    return out;
}

template <typename T>
std::size_t DafdLayer<T>::parameter_count() const {
    return K_ * (c_in_ * c_out_ + num_domains() * L_ * L_) + c_out_;
}

template <typename T>
std::pair<Tensor4<T>, DafdCache<T>> DafdLayer<T>::forward(const Tensor4<T>& x, int domain) const {
    check_domain(domain);
    if (x.c() != c_in_)
        throw ShapeError("DafdLayer::forward: input has " + std::to_string(x.c()) +
                         " channels, layer expects " + std::to_string(c_in_));
    const std::size_t oh = spec_.out_extent(x.h(), L_);
    const std::size_t ow = spec_.out_extent(x.w(), L_);
    const auto pad = static_cast<std::ptrdiff_t>(spec_.padding);
    const auto s = static_cast<std::ptrdiff_t>(spec_.stride);
    const auto H = static_cast<std::ptrdiff_t>(x.h());
    const auto W = static_cast<std::ptrdiff_t>(x.w());

    DafdCache<T> cache{domain, x, Tensor4<T>({x.n(), c_in_ * K_, oh, ow}), resolve_atoms(domain)};
    const AtomBank<T>& psi = cache.atoms;

    // Step 1: depthwise, every input channel against every atom.
    for (std::size_t n = 0; n < x.n(); ++n)
        for (std::size_t ci = 0; ci < c_in_; ++ci)
            for (std::size_t k = 0; k < K_; ++k)
                for (std::size_t i = 0; i < oh; ++i)
                    for (std::size_t j = 0; j < ow; ++j) {
                        T acc = 0;
                        for (std::size_t p = 0; p < L_; ++p) {
                            const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(i) * s - pad +
                                                     static_cast<std::ptrdiff_t>(p);
                            if (r < 0 || r >= H) continue;
                            for (std::size_t q = 0; q < L_; ++q) {
                                const std::ptrdiff_t c = static_cast<std::ptrdiff_t>(j) * s - pad +
                                                         static_cast<std::ptrdiff_t>(q);
                                if (c < 0 || c >= W) continue;
                                acc += x(n, ci, r, c) * psi.at(k, p, q);
                            }
                        }
                        cache.m(n, ci * K_ + k, i, j) = acc;
                    }

    // Step 2: pointwise combination with the shared coefficients.
    Tensor4<T> y({x.n(), c_out_, oh, ow});
    const std::size_t plane = oh * ow;
    for (std::size_t n = 0; n < x.n(); ++n)
        for (std::size_t co = 0; co < c_out_; ++co) {
            T* out = &y(n, co, 0, 0);
            for (std::size_t e = 0; e < plane; ++e) out[e] = bias_.value[co];
            for (std::size_t ci = 0; ci < c_in_; ++ci)
                for (std::size_t k = 0; k < K_; ++k) {
                    const T a = coeffs_.value[(k * c_in_ + ci) * c_out_ + co];
                    const T* mm = &cache.m(n, ci * K_ + k, 0, 0);
                    for (std::size_t e = 0; e < plane; ++e) out[e] += a * mm[e];
                }
        }
    return {std::move(y), std::move(cache)};
}

template <typename T>
DafdGrads<T> DafdLayer<T>::backward(const DafdCache<T>& cache, const Tensor4<T>& dy,
                                    int domain) const {
    check_domain(domain);
    if (cache.domain != domain)
        throw std::invalid_argument("DafdLayer::backward: cache was produced for domain " +
                                    std::to_string(cache.domain) + ", not " +
                                    std::to_string(domain));
    const Tensor4<T>& x = cache.x;
    const Tensor4<T>& m = cache.m;
    const std::size_t oh = m.h(), ow = m.w(), plane = oh * ow;
    if (dy.shape() != Shape4{x.n(), c_out_, oh, ow})
        throw ShapeError("DafdLayer::backward: dy shape " + dy.shape().str() + " mismatch");

    DafdGrads<T> g{Tensor4<T>(x.shape()), std::vector<T>(K_ * L_ * L_, T(0)),
                   std::vector<T>(K_ * c_in_ * c_out_, T(0)), std::vector<T>(c_out_, T(0))};
    Tensor4<T> dm(m.shape());

    for (std::size_t n = 0; n < x.n(); ++n)
        for (std::size_t co = 0; co < c_out_; ++co) {
            const T* d = &dy(n, co, 0, 0);
            T bsum = 0;
            for (std::size_t e = 0; e < plane; ++e) bsum += d[e];
            g.dbias[co] += bsum;
            for (std::size_t ci = 0; ci < c_in_; ++ci)
                for (std::size_t k = 0; k < K_; ++k) {
                    const std::size_t ai = (k * c_in_ + ci) * c_out_ + co;
                    const T a = coeffs_.value[ai];
                    const T* mm = &m(n, ci * K_ + k, 0, 0);
                    T* dmm = &dm(n, ci * K_ + k, 0, 0);
                    T acc = 0;
                    for (std::size_t e = 0; e < plane; ++e) {
                        acc += mm[e] * d[e];
                        dmm[e] += a * d[e];
                    }
                    g.dcoeffs[ai] += acc;
                }
        }

    const auto pad = static_cast<std::ptrdiff_t>(spec_.padding);
    const auto s = static_cast<std::ptrdiff_t>(spec_.stride);
    const auto H = static_cast<std::ptrdiff_t>(x.h());
    const auto W = static_cast<std::ptrdiff_t>(x.w());
    const AtomBank<T>& psi = cache.atoms;
    for (std::size_t n = 0; n < x.n(); ++n)
        for (std::size_t ci = 0; ci < c_in_; ++ci)
            for (std::size_t k = 0; k < K_; ++k)
                for (std::size_t i = 0; i < oh; ++i)
                    for (std::size_t j = 0; j < ow; ++j) {
                        const T d = dm(n, ci * K_ + k, i, j);
                        if (d == T(0)) continue;
                        for (std::size_t p = 0; p < L_; ++p) {
                            const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(i) * s - pad +
                                                     static_cast<std::ptrdiff_t>(p);
                            if (r < 0 || r >= H) continue;
                            for (std::size_t q = 0; q < L_; ++q) {
                                const std::ptrdiff_t c = static_cast<std::ptrdiff_t>(j) * s - pad +
                                                         static_cast<std::ptrdiff_t>(q);
                                if (c < 0 || c >= W) continue;
                                g.datoms[(k * L_ + p) * L_ + q] += d * x(n, ci, r, c);
                                g.dx(n, ci, r, c) += d * psi.at(k, p, q);
                            }
                        }
                    }
    return g;
}

template <typename T>
void DafdLayer<T>::accumulate(const DafdGrads<T>& g, int domain) {
    check_domain(domain);
    auto& target = atom_param(domain).grad;
    for (std::size_t i = 0; i < target.size(); ++i) target[i] += g.datoms[i];
    for (std::size_t i = 0; i < coeffs_.grad.size(); ++i) coeffs_.grad[i] += g.dcoeffs[i];
    for (std::size_t i = 0; i < bias_.grad.size(); ++i) bias_.grad[i] += g.dbias[i];
}

template struct AtomBank<float>;
template struct AtomBank<double>;
template struct ResidualAtomBank<float>;
template struct ResidualAtomBank<double>;
template class DafdLayer<float>;
template class DafdLayer<double>;
template Tensor4<float> reconstruct_filter(const AtomBank<float>&, const CoeffTensor<float>&);
template Tensor4<double> reconstruct_filter(const AtomBank<double>&, const CoeffTensor<double>&);
template DenseFactorization<float> init_from_dense(const Tensor4<float>&, std::size_t);
template DenseFactorization<double> init_from_dense(const Tensor4<double>&, std::size_t);

}  // namespace dafd
