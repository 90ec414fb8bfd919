#pragma once

// Numerical checks of the commutation/invariance bounds on discretised signals.
//
// Signals live on a cell-centred N×N grid over Ω = [−1, 1]² with cell size h = 2/N.
// Filters live on a (2R+1)×(2R+1) grid of nodes (k − R)·h centred at the origin,
// R = floor(2^j / h), and vanish outside the disk of radius 2^j.
// Convolution is the true (flipped) one: (x∗w)(u) = h² Σ_v x(u − v) w(v).
// Everything here is double precision.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dafd/tensor.hpp"

namespace dafd::theory {

/// A violated modelling assumption; `assumption` is "A1", "A2" or "A3".
class AssumptionError : public std::invalid_argument {
public:
    AssumptionError(std::string assumption, const std::string& what)
        : std::invalid_argument(assumption + ": " + what), assumption_(std::move(assumption)) {}
    const std::string& assumption() const { return assumption_; }

private:
    std::string assumption_;
};

/// A convolution whose output would reach the edge of Ω.
class SupportError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Grids
// ---------------------------------------------------------------------------

struct GridSignal {
    std::size_t n = 0;   // n×n samples
    double h = 0.0;      // spacing
    double x0 = 0.0;     // coordinate of index 0 (both axes)
    std::vector<double> v;  // row-major; row ↔ y, column ↔ x

    /// Cell-centred grid over [−1, 1]², all zeros.
    static GridSignal omega(std::size_t N);
    /// Node grid (k − R)·h, k = 0..2R.
    static GridSignal centered(std::size_t R, double h);

    double coord(std::size_t k) const { return x0 + static_cast<double>(k) * h; }
    double& at(std::size_t i, std::size_t j) { return v[i * n + j]; }
    double at(std::size_t i, std::size_t j) const { return v[i * n + j]; }

    /// h² Σ |x|
    double l1_norm() const;
    /// h² Σ |∇x| with central differences and zeros outside the grid.
    double tv_norm() const;
    double max_abs() const;
    /// Bilinear interpolation at (x, y); zero outside the grid. Fractional
    /// indices within 1e-9 of a node snap to it.
    double sample(double x, double y) const;

    struct Box {
        std::size_t i0 = 0, i1 = 0, j0 = 0, j1 = 0;
        bool empty = true;
    };
    Box support_box() const;

    bool same_grid(const GridSignal& o) const;
};

double l1_distance(const GridSignal& a, const GridSignal& b);
GridSignal operator-(const GridSignal& a, const GridSignal& b);

struct GridFilter {
    GridSignal g;
    double j = 0.0;  // support radius 2^j
    std::size_t R = 0;

    double radius() const;
    /// Zeroes nodes outside the support disk; returns the removed 1-norm mass.
    double apply_disk_mask();
    double l1_norm() const { return g.l1_norm(); }
};

// ---------------------------------------------------------------------------
// Analytic signals and filters (re-sampled at every resolution)
// ---------------------------------------------------------------------------

struct Bump {
    double cx = 0, cy = 0, s = 0.1, amp = 1.0;
};

/// Σ amp·exp(−|u − c|²/(2s²)) times a smooth cutoff supported on [−window, window]².
struct SignalSpec {
    std::vector<Bump> bumps;
    double window = 0.6;

    double eval(double x, double y) const;
    GridSignal sample(std::size_t N) const;
};

SignalSpec random_signal(std::uint64_t seed, double window = 0.6, std::size_t n_bumps = 3);

enum class FilterShape { gaussian, delta };

struct DisplacementField;

enum class WarpDirection { forward, inverse };

/// How warped filters are formed: from the analytic profile, or by bilinear
/// interpolation of the sampled source filter.
enum class FilterWarp { analytic, bilinear };

/// Anisotropic Gaussian (std devs sx, sy as fractions of 2^j, rotated by `angle`)
/// times a smooth radial cutoff vanishing at radius 2^j; rescaled so ‖w‖₁ = norm.
struct FilterSpec {
    FilterShape shape = FilterShape::gaussian;
    double j = -3.0;
    double sx = 0.2, sy = 0.1, angle = 0.0;
    double norm = 1.0;

    GridFilter sample(std::size_t N) const;
    /// w(ρ(u)) (or w(ρ⁻¹(u)) for `inverse`) evaluated from the analytic profile, with
    /// the normalisation of sample(N) and the support disk re-applied.
    GridFilter sample_warped(std::size_t N, const DisplacementField& field, double* masked = nullptr,
                             WarpDirection dir = WarpDirection::forward) const;
    /// Unnormalised profile value (Gaussian shape only).
    double profile(double x, double y) const;
    /// The same filter rotated by `quarter_turns`·90° counter-clockwise.
    FilterSpec rotated90(int quarter_turns = 1) const;
};

FilterSpec random_filter(std::uint64_t seed, double j);

// ---------------------------------------------------------------------------
// Displacement fields
// ---------------------------------------------------------------------------

enum class FieldKind { zero, rotation, dilation, smooth_odd };

std::string to_string(FieldKind k);

struct OddMode {
    int k1 = 0, k2 = 0;
    double ax = 0, ay = 0;
};

struct DisplacementField {
    FieldKind kind = FieldKind::zero;
    double theta = 0.0;      // rotation angle (radians)
    double scale = 1.0;      // dilation factor s
    double amplitude = 0.0;  // smooth-odd: sup |τ| over Ω
    std::uint64_t seed = 0;
    std::vector<OddMode> modes;
    double grad_inf = 0.0;
    bool rigid = true;

    std::array<double, 2> tau(double x, double y) const;
    /// ρ(u) = u − τ(u)
    std::array<double, 2> rho(double x, double y) const;
    /// ρ⁻¹(u) by fixed-point iteration z ← u + τ(z) (closed form for zero/rotation/dilation).
    std::array<double, 2> rho_inverse(double x, double y) const;
    /// det ∇ρ, by central differences.
    double jacobian_det(double x, double y) const;
    std::pair<GridSignal, GridSignal> sample(std::size_t N) const;
    std::string str() const;
};

/// Builds a field and rejects it (AssumptionError "A2") when grad_inf ≥ 1/5.
/// `param` is θ in radians (rotation), s (dilation) or the amplitude (smooth-odd).
DisplacementField make_displacement(FieldKind kind, double param, std::uint64_t seed = 0);

/// Rotation without the small-gradient gate, e.g. for 90° permutation checks.
DisplacementField make_rotation_unchecked(double theta);

/// sup over an M×M lattice on Ω of the spectral norm of the finite-difference Jacobian of τ.
double fd_grad_inf(const DisplacementField& f, std::size_t M = 201);

/// forward: x(ρ(u)); inverse: x(ρ⁻¹(u)); bilinear, on the input's own grid.
GridSignal warp(const GridSignal& x, const DisplacementField& field, WarpDirection dir);
/// Warps a filter and re-applies its support disk; the masked mass is returned via `masked`.
GridFilter warp(const GridFilter& w, const DisplacementField& field, WarpDirection dir, double* masked = nullptr);

// ---------------------------------------------------------------------------
// Layer primitives
// ---------------------------------------------------------------------------

/// (x∗w)(u) = h² Σ_v x(u − v) w(v); throws SupportError if the result would come
/// within `margin` cells of the edge of Ω.
GridSignal convolve(const GridSignal& x, const GridFilter& w, std::size_t margin = 1);

/// σ(x + b). The activation must satisfy σ(b) = 0 so compact support is kept.
GridSignal sigma_b(const GridSignal& x, double bias, const Activation& act);
/// σ(x + b(u)) with a per-position bias field.
GridSignal sigma_b(const GridSignal& x, const GridSignal& bias, const Activation& act);

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct BoundReport {
    std::string check;
    std::string config;
    std::size_t N = 0;
    double measured = 0.0;
    double bound = 0.0;
    double slack = 0.0;
    bool pass = false;
    bool rejected = false;
    std::string reason;
    double epsilon = 0.0;
    double control = -1.0;  // theorem: uncorrected error; drift: empirical constant
    double ratio = -1.0;
    std::vector<std::pair<std::string, double>> norms;

    static std::string csv_header();
    std::string csv_row() const;
};

BoundReport rejected_report(const std::string& check, const std::string& config, std::size_t N,
                            const std::string& reason);

// ---------------------------------------------------------------------------
// Checks
// ---------------------------------------------------------------------------

/// (i) ‖x∗w‖₁ ≤ ‖x‖₁‖w‖₁ and (ii) ‖∇(x∗w)‖₁ ≤ ‖∇x‖₁‖w‖₁.
std::pair<BoundReport, BoundReport> check_nonexpansive(const GridSignal& x, const GridFilter& w);

/// ||Jρ| − 1| ≤ 4|∇τ|_∞ over an M×M lattice.
BoundReport check_fact1(const DisplacementField& field, std::size_t M = 101);

/// |‖D_τ w‖₁ − ‖w‖₁| against |∇τ|_∞‖w‖₁; `control` carries the empirical constant.
/// Rigid fields must show drift ≤ slack; the general case only reports.
std::vector<BoundReport> check_filter_norm_drift(const FilterSpec& w, const DisplacementField& field,
                                                 const std::vector<std::size_t>& Ns);

struct Lemma1Config {
    SignalSpec x;
    FilterSpec w, f;
    DisplacementField field;
    Activation act = Activation::relu();
    double bias = 0.0;
    FilterWarp filter_warp = FilterWarp::analytic;
    std::string label;
};

struct Lemma1Eval {
    double lhs = 0.0;
    double bound = 0.0;
    double x_l1 = 0.0, x_tv = 0.0, w_l1 = 0.0, f_l1 = 0.0;
};

/// lhs = ‖σ_b(x∗D_τw)∗f − σ_b(x∗w)∗D_τ⁻¹f‖₁ on given grids, filters warped bilinearly.
double lemma1_lhs(const GridSignal& x, const GridFilter& w, const GridFilter& f, const DisplacementField& field,
                  const Activation& act, double bias);
/// The same with the warped filters supplied: dw = D_τw, dinv_f = D_τ⁻¹f.
double lemma1_lhs(const GridSignal& x, const GridFilter& w, const GridFilter& dw, const GridFilter& f,
                  const GridFilter& dinv_f, const Activation& act, double bias);
Lemma1Eval eval_lemma1(const Lemma1Config& cfg, std::size_t N);
/// One report per N; slack(N) = |lhs(N) − lhs(2N)|.
std::vector<BoundReport> check_lemma1(const Lemma1Config& cfg, const std::vector<std::size_t>& Ns);

struct StackLayer {
    FilterSpec gen;   // w_s^(−l)
    FilterSpec feat;  // w_s^(l)
    double gen_bias = 0.0;
    double feat_bias = 0.0;
    DisplacementField field;  // τ_l
    double j = -3.0;
};

/// layers[l − 1] holds the pair (−l, l). The generative net runs −L … −1, the feature net 1 … L.
struct StackSpec {
    std::vector<StackLayer> layers;
    Activation act = Activation::relu();
    FilterWarp filter_warp = FilterWarp::analytic;
    std::string label;

    void validate() const;  // throws AssumptionError
};

struct LayerTrace {
    int layer = 0;            // negative: generative layer index
    double xc_l1 = 0.0;       // ‖x̃_c‖₁ of this layer's input
    double xc_tv = 0.0;       // ‖∇x̃_c‖₁
    double baseline_diff = 0.0;  // max |x̃₀ − x₀| at this layer's output
    double wt_l1 = 0.0;       // ‖w_t‖₁ after warping
    double masked_mass = 0.0;
};

struct Theorem1Eval {
    double measured = 0.0;
    double control = 0.0;
    double bound = 0.0;
    double epsilon = 0.0;
    double h_l1 = 0.0, h_tv = 0.0;
    bool all_rigid = true;
    double baseline_max_diff = 0.0;
    std::vector<LayerTrace> trace;
};

Theorem1Eval eval_theorem1(const StackSpec& spec, const SignalSpec& h, std::size_t N);
std::vector<BoundReport> run_theorem1(const StackSpec& spec, const SignalSpec& h, const std::vector<std::size_t>& Ns);

enum class FeatureFilters { independent, rotated_generative };

/// L layer pairs sharing one field, scales j, random Gaussian filters from `seed`.
/// With rotated_generative the feature filter of pair l is the generative one turned by 90°.
StackSpec make_stack(std::size_t L, const DisplacementField& field, double j, std::uint64_t seed,
                     FeatureFilters mode, double gen_bias = 0.0, double feat_bias = 0.0);

/// Checks D_τ(Σ a_k ψ_k) = Σ a_k D_τψ_k and atom-wise negation on one grid.
BoundReport verify_atom_implementability(const std::vector<GridFilter>& atoms, const std::vector<double>& coeffs,
                                         const DisplacementField& field);

}  // namespace dafd::theory
