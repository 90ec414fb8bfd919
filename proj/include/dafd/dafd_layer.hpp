#pragma once

// Domain-adaptive filter decomposition layer.
//
// A filter bank W of shape (C_out, C_in, L, L) is expressed as
//     W[co, ci, p, q] = Σ_k a[k][ci][co] · ψ_k[p, q]
// where the K spatial atoms ψ are owned per domain and the coefficients a
// (and the bias) are shared by every domain. Non-source domains hold their
// atoms as a residual on top of the source bank: ψ_d = ψ_0 + Δ_d, with Δ_d
// starting at exactly zero.
//
// The forward pass runs as a depthwise convolution (every input channel
// against every atom, same stride/padding as the dense filter would use)
// followed by a stride-1 pointwise combination with the shared coefficients.

#include <cstddef>
#include <vector>

#include "dafd/param.hpp"
#include "dafd/tensor.hpp"

namespace dafd {

template <typename T>
struct AtomBank {
    int domain = 0;
    std::size_t K = 0;
    std::size_t L = 0;
    std::vector<T> values;  // K·L·L, atom-major

    AtomBank() = default;
    AtomBank(int dom, std::size_t k, std::size_t l) : domain(dom), K(k), L(l), values(k * l * l) {}

    T& at(std::size_t k, std::size_t p, std::size_t q) { return values[(k * L + p) * L + q]; }
    const T& at(std::size_t k, std::size_t p, std::size_t q) const {
        return values[(k * L + p) * L + q];
    }
    void validate() const;
};

/// Target-domain atoms parameterised as base + residual.
template <typename T>
struct ResidualAtomBank {
    AtomBank<T> base;
    std::vector<T> residual;  // same layout as base.values

    explicit ResidualAtomBank(AtomBank<T> b, int domain);
    AtomBank<T> resolve() const;

private:
    int domain_;
};

template <typename T>
struct CoeffTensor {
    std::size_t K = 0, c_in = 0, c_out = 0;
    std::vector<T> values;  // [k][c_in][c_out]

    CoeffTensor() = default;
    CoeffTensor(std::size_t k, std::size_t ci, std::size_t co)
        : K(k), c_in(ci), c_out(co), values(k * ci * co) {}

    T& at(std::size_t k, std::size_t ci, std::size_t co) {
        return values[(k * c_in + ci) * c_out + co];
    }
    const T& at(std::size_t k, std::size_t ci, std::size_t co) const {
        return values[(k * c_in + ci) * c_out + co];
    }
};

/// W[co,ci,p,q] = Σ_k a[k][ci][co] · ψ_k[p,q]
template <typename T>
Tensor4<T> reconstruct_filter(const AtomBank<T>& bank, const CoeffTensor<T>& coeffs);

template <typename T>
struct DenseFactorization {
    AtomBank<T> atoms;
    CoeffTensor<T> coeffs;
    double residual_error = 0.0;  // Frobenius norm of the discarded part
};

/// Best rank-K factorisation of W viewed as an L² × (C_in·C_out) matrix (truncated SVD).
/// Atoms are the leading left singular vectors; coefficients absorb the singular values.
template <typename T>
DenseFactorization<T> init_from_dense(const Tensor4<T>& W, std::size_t K);

template <typename T>
struct DafdCache {
    int domain = 0;
    Tensor4<T> x;     // layer input
    Tensor4<T> m;     // depthwise responses, channel index ci·K + k
    AtomBank<T> atoms;  // resolved atoms used for this pass
};

template <typename T>
struct DafdGrads {
    Tensor4<T> dx;
    std::vector<T> datoms;   // w.r.t. the invoked domain's atoms (or its residual)
    std::vector<T> dcoeffs;  // [k][c_in][c_out]
    std::vector<T> dbias;
};

template <typename T>
class DafdLayer {
public:
    DafdLayer(std::size_t c_in, std::size_t c_out, std::size_t L, std::size_t K,
              std::size_t num_domains, ConvSpec spec, const std::string& name = "dafd");

    std::size_t c_in() const { return c_in_; }
    std::size_t c_out() const { return c_out_; }
    std::size_t L() const { return L_; }
    std::size_t K() const { return K_; }
    std::size_t num_domains() const { return residuals_.size() + 1; }
    const ConvSpec& spec() const { return spec_; }

    /// Source atoms from a factorisation of `W`; residuals reset to zero.
    /// Returns the Frobenius residual of the factorisation.
    double init_from_dense(const Tensor4<T>& W);

    AtomBank<T> resolve_atoms(int domain) const;
    ResidualAtomBank<T> residual_bank(int domain) const;
    CoeffTensor<T> coeffs() const;

    Param<T>& source_atoms() { return atoms_; }
    const Param<T>& source_atoms() const { return atoms_; }
    Param<T>& residual(int domain);
    const Param<T>& residual(int domain) const;
    Param<T>& coeff_param() { return coeffs_; }
    const Param<T>& coeff_param() const { return coeffs_; }
    Param<T>& bias() { return bias_; }
    const Param<T>& bias() const { return bias_; }

    /// Parameter block receiving gradients from domain `domain`'s atoms.
    Param<T>& atom_param(int domain) { return domain == 0 ? atoms_ : residual(domain); }

    std::vector<Param<T>*> params();
    std::size_t parameter_count() const;

    std::pair<Tensor4<T>, DafdCache<T>> forward(const Tensor4<T>& x, int domain) const;
    DafdGrads<T> backward(const DafdCache<T>& cache, const Tensor4<T>& dy, int domain) const;

    /// Routes gradients: atoms to the invoked domain's block only; coeffs/bias to the shared slots.
    void accumulate(const DafdGrads<T>& g, int domain);

private:
    void check_domain(int domain) const;

    std::size_t c_in_, c_out_, L_, K_;
    ConvSpec spec_;
    Param<T> atoms_;
    std::vector<Param<T>> residuals_;
    Param<T> coeffs_;
    Param<T> bias_;
};

}  // namespace dafd
