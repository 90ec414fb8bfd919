#include "dafd/theory.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <random>
#include <set>
#include <sstream>

namespace dafd::theory {

namespace {

constexpr double kSnap = 1e-9;

double smooth_cutoff(double t) {
    // exp(1 − 1/(1 − t²)) on |t| < 1, zero elsewhere; equals 1 at t = 0
    if (std::abs(t) >= 1.0) return 0.0;
    return std::exp(1.0 - 1.0 / (1.0 - t * t));
}

double snap(double f) {
    const double r = std::round(f);
    return std::abs(f - r) < kSnap ? r : f;
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string fmt_short(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%g", v);
    return buf;
}

double spectral_norm2(double a, double b, double c, double d) {
    const double s = 0.5 * (a * a + b * b + c * c + d * d);
    const double det = a * d - b * c;
    return std::sqrt(s + std::sqrt(std::max(0.0, s * s - det * det)));
}

}  // namespace

// ---------------------------------------------------------------------------
// GridSignal
// ---------------------------------------------------------------------------

GridSignal GridSignal::omega(std::size_t N) {
    if (N < 4) throw std::invalid_argument("grid resolution must be at least 4");
    GridSignal g;
    g.n = N;
    g.h = 2.0 / static_cast<double>(N);
    g.x0 = -1.0 + 0.5 * g.h;
    g.v.assign(N * N, 0.0);
    return g;
}

GridSignal GridSignal::centered(std::size_t R, double h) {
    GridSignal g;
    g.n = 2 * R + 1;
    g.h = h;
    g.x0 = -static_cast<double>(R) * h;
    g.v.assign(g.n * g.n, 0.0);
    return g;
}

double GridSignal::l1_norm() const {
    double s = 0.0;
    for (double x : v) s += std::abs(x);
    return s * h * h;
}

double GridSignal::tv_norm() const {
    auto val = [&](std::ptrdiff_t i, std::ptrdiff_t j) {
        const auto N = static_cast<std::ptrdiff_t>(n);
        if (i < 0 || j < 0 || i >= N || j >= N) return 0.0;
        return v[static_cast<std::size_t>(i) * n + static_cast<std::size_t>(j)];
    };
    double s = 0.0;
    const auto N = static_cast<std::ptrdiff_t>(n);
    for (std::ptrdiff_t i = 0; i < N; ++i)
        for (std::ptrdiff_t j = 0; j < N; ++j) {
            const double gx = (val(i, j + 1) - val(i, j - 1)) / (2.0 * h);
            const double gy = (val(i + 1, j) - val(i - 1, j)) / (2.0 * h);
            s += std::sqrt(gx * gx + gy * gy);
        }
    return s * h * h;
}

double GridSignal::max_abs() const {
    double m = 0.0;
    for (double x : v) m = std::max(m, std::abs(x));
    return m;
}

double GridSignal::sample(double x, double y) const {
    const double fj = snap((x - x0) / h);
    const double fi = snap((y - x0) / h);
    const double i0 = std::floor(fi), j0 = std::floor(fj);
    const double ti = fi - i0, tj = fj - j0;
    const auto N = static_cast<double>(n);
    double acc = 0.0;
    for (int di = 0; di < 2; ++di) {
        const double wi = di ? ti : 1.0 - ti;
        if (wi == 0.0) continue;
        const double ii = i0 + di;
        if (ii < 0 || ii >= N) continue;
        for (int dj = 0; dj < 2; ++dj) {
            const double wj = dj ? tj : 1.0 - tj;
            if (wj == 0.0) continue;
            const double jj = j0 + dj;
            if (jj < 0 || jj >= N) continue;
            acc += wi * wj * v[static_cast<std::size_t>(ii) * n + static_cast<std::size_t>(jj)];
        }
    }
    return acc;
}

GridSignal::Box GridSignal::support_box() const {
    Box b;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (v[i * n + j] != 0.0) {
                if (b.empty) {
                    b = {i, i, j, j, false};
                } else {
                    b.i0 = std::min(b.i0, i);
                    b.i1 = std::max(b.i1, i);
                    b.j0 = std::min(b.j0, j);
                    b.j1 = std::max(b.j1, j);
                }
            }
    return b;
}

bool GridSignal::same_grid(const GridSignal& o) const {
    return n == o.n && std::abs(h - o.h) <= 1e-15 * h && std::abs(x0 - o.x0) <= 1e-15;
}

double l1_distance(const GridSignal& a, const GridSignal& b) {
    if (!a.same_grid(b)) throw ShapeError("l1_distance: signals live on different grids");
    double s = 0.0;
    for (std::size_t k = 0; k < a.v.size(); ++k) s += std::abs(a.v[k] - b.v[k]);
    return s * a.h * a.h;
}

GridSignal operator-(const GridSignal& a, const GridSignal& b) {
    if (!a.same_grid(b)) throw ShapeError("signal difference on different grids");
    GridSignal r = a;
    for (std::size_t k = 0; k < r.v.size(); ++k) r.v[k] -= b.v[k];
    return r;
}

// ---------------------------------------------------------------------------
// GridFilter
// ---------------------------------------------------------------------------

double GridFilter::radius() const { return std::exp2(j); }

double GridFilter::apply_disk_mask() {
    const double r = radius() * (1.0 + 1e-12);
    double removed = 0.0;
    for (std::size_t i = 0; i < g.n; ++i)
        for (std::size_t k = 0; k < g.n; ++k)
            if (std::hypot(g.coord(i), g.coord(k)) > r) {
                removed += std::abs(g.at(i, k));
                g.at(i, k) = 0.0;
            }
    return removed * g.h * g.h;
}

// ---------------------------------------------------------------------------
// Signals and filters
// ---------------------------------------------------------------------------

double SignalSpec::eval(double x, double y) const {
    const double win = smooth_cutoff(x / window) * smooth_cutoff(y / window);
    if (win == 0.0) return 0.0;
    double s = 0.0;
    for (const auto& b : bumps) {
        const double dx = x - b.cx, dy = y - b.cy;
        s += b.amp * std::exp(-(dx * dx + dy * dy) / (2.0 * b.s * b.s));
    }
    return s * win;
}

GridSignal SignalSpec::sample(std::size_t N) const {
    GridSignal g = GridSignal::omega(N);
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < N; ++j) g.at(i, j) = eval(g.coord(j), g.coord(i));
    return g;
}

SignalSpec random_signal(std::uint64_t seed, double window, std::size_t n_bumps) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    SignalSpec s;
    s.window = window;
    for (std::size_t k = 0; k < n_bumps; ++k) {
        Bump b;
        b.cx = (u(rng) - 0.5) * window;
        b.cy = (u(rng) - 0.5) * window;
        b.s = 0.08 + 0.12 * u(rng);
        b.amp = 0.5 + 0.5 * u(rng);
        s.bumps.push_back(b);
    }
    return s;
}

double FilterSpec::profile(double x, double y) const {
    const double r = std::exp2(j);
    const double c = std::cos(angle), s = std::sin(angle);
    const double ax = sx * r, ay = sy * r;
    const double xr = c * x + s * y, yr = -s * x + c * y;
    return std::exp(-xr * xr / (2 * ax * ax) - yr * yr / (2 * ay * ay)) * smooth_cutoff(std::hypot(x, y) / r);
}

namespace {

GridFilter empty_filter(const FilterSpec& spec, std::size_t N) {
    const double h = 2.0 / static_cast<double>(N);
    const double r = std::exp2(spec.j);
    const auto R = static_cast<std::size_t>(std::floor(r / h + 1e-9));
    if (R < 1)
        throw std::invalid_argument("filter radius 2^" + fmt_short(spec.j) + " is below one grid cell at N=" +
                                    std::to_string(N));
    if (!(spec.norm > 0.0 && spec.norm <= 1.0))
        throw AssumptionError("A3", "filter 1-norm must lie in (0, 1], got " + fmt_short(spec.norm));
    GridFilter f;
    f.j = spec.j;
    f.R = R;
    f.g = GridSignal::centered(R, h);
    return f;
}

// Fills f with k·profile(map(u)), masks it and returns the masked mass.
template <typename Map>
double fill_profile(GridFilter& f, const FilterSpec& spec, double k, Map map) {
    for (std::size_t i = 0; i < f.g.n; ++i)
        for (std::size_t q = 0; q < f.g.n; ++q) {
            const auto p = map(f.g.coord(q), f.g.coord(i));
            f.g.at(i, q) = k * spec.profile(p[0], p[1]);
        }
    return f.apply_disk_mask();
}

}  // namespace

GridFilter FilterSpec::sample(std::size_t N) const {
    GridFilter f = empty_filter(*this, N);
    if (shape == FilterShape::delta) {
        f.g.at(f.R, f.R) = norm / (f.g.h * f.g.h);
        return f;
    }
    fill_profile(f, *this, 1.0, [](double x, double y) { return std::array<double, 2>{x, y}; });
    const double l1 = f.g.l1_norm();
    for (double& v : f.g.v) v *= norm / l1;
    return f;
}

GridFilter FilterSpec::sample_warped(std::size_t N, const DisplacementField& field, double* masked,
                                     WarpDirection dir) const {
    if (shape == FilterShape::delta) return warp(sample(N), field, dir, masked);
    GridFilter base = empty_filter(*this, N);
    fill_profile(base, *this, 1.0, [](double x, double y) { return std::array<double, 2>{x, y}; });
    const double k = norm / base.g.l1_norm();
    GridFilter f = empty_filter(*this, N);
    const double m = fill_profile(f, *this, k, [&](double x, double y) {
        return dir == WarpDirection::forward ? field.rho(x, y) : field.rho_inverse(x, y);
    });
    if (masked) *masked = m;
    return f;
}

FilterSpec FilterSpec::rotated90(int quarter_turns) const {
    FilterSpec out = *this;
    out.angle += quarter_turns * M_PI / 2.0;
    return out;
}

FilterSpec random_filter(std::uint64_t seed, double j) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    FilterSpec f;
    f.j = j;
    f.sx = 0.2 + 0.1 * u(rng);
    f.sy = 0.1 + 0.05 * u(rng);
    f.angle = M_PI * u(rng);
    return f;
}

// ---------------------------------------------------------------------------
// Displacement fields
// ---------------------------------------------------------------------------

std::string to_string(FieldKind k) {
    switch (k) {
    case FieldKind::zero: return "zero";
    case FieldKind::rotation: return "rotation";
    case FieldKind::dilation: return "dilation";
    case FieldKind::smooth_odd: return "smooth-odd";
    }
    return "?";
}

std::array<double, 2> DisplacementField::tau(double x, double y) const {
    switch (kind) {
    case FieldKind::zero: return {0.0, 0.0};
    case FieldKind::rotation: {
        const double c = std::cos(theta), s = std::sin(theta);
        return {x - (c * x - s * y), y - (s * x + c * y)};
    }
    case FieldKind::dilation: return {(1.0 - scale) * x, (1.0 - scale) * y};
    case FieldKind::smooth_odd: {
        double tx = 0.0, ty = 0.0;
        for (const auto& m : modes) {
            const double sv = std::sin(M_PI * (m.k1 * x + m.k2 * y) / 2.0);
            tx += m.ax * sv;
            ty += m.ay * sv;
        }
        return {tx, ty};
    }
    }
    return {0.0, 0.0};
}

std::array<double, 2> DisplacementField::rho(double x, double y) const {
    switch (kind) {
    case FieldKind::zero: return {x, y};
    case FieldKind::rotation: {
        const double c = std::cos(theta), s = std::sin(theta);
        return {c * x - s * y, s * x + c * y};
    }
    case FieldKind::dilation: return {scale * x, scale * y};
    case FieldKind::smooth_odd: {
        const auto t = tau(x, y);
        return {x - t[0], y - t[1]};
    }
    }
    return {x, y};
}

std::array<double, 2> DisplacementField::rho_inverse(double x, double y) const {
    switch (kind) {
    case FieldKind::zero: return {x, y};
    case FieldKind::rotation: {
        const double c = std::cos(theta), s = std::sin(theta);
        return {c * x + s * y, -s * x + c * y};
    }
    case FieldKind::dilation: return {x / scale, y / scale};
    case FieldKind::smooth_odd: break;
    }
    std::array<double, 2> z{x, y};
    for (int it = 0; it < 200; ++it) {
        const auto t = tau(z[0], z[1]);
        const std::array<double, 2> next{x + t[0], y + t[1]};
        const double delta = std::max(std::abs(next[0] - z[0]), std::abs(next[1] - z[1]));
        z = next;
        if (delta < 1e-10) return z;
    }
    throw NumericError("rho_inverse: fixed-point iteration did not converge in 200 steps at (" + fmt_short(x) +
                       ", " + fmt_short(y) + ")");
}

double DisplacementField::jacobian_det(double x, double y) const {
    const double d = 1e-6;
    const auto px = rho(x + d, y), mx = rho(x - d, y), py = rho(x, y + d), my = rho(x, y - d);
    const double a = (px[0] - mx[0]) / (2 * d), b = (py[0] - my[0]) / (2 * d);
    const double c = (px[1] - mx[1]) / (2 * d), e = (py[1] - my[1]) / (2 * d);
    return a * e - b * c;
}

std::pair<GridSignal, GridSignal> DisplacementField::sample(std::size_t N) const {
    auto gx = GridSignal::omega(N), gy = GridSignal::omega(N);
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < N; ++j) {
            const auto t = tau(gx.coord(j), gx.coord(i));
            gx.at(i, j) = t[0];
            gy.at(i, j) = t[1];
        }
    return {gx, gy};
}

std::string DisplacementField::str() const {
    switch (kind) {
    case FieldKind::zero: return "zero";
    case FieldKind::rotation: return "rotation(" + fmt_short(theta * 180.0 / M_PI) + "deg)";
    case FieldKind::dilation: return "dilation(" + fmt_short(scale) + ")";
    case FieldKind::smooth_odd: return "smooth-odd(" + fmt_short(amplitude) + ";seed=" + std::to_string(seed) + ")";
    }
    return "?";
}

double fd_grad_inf(const DisplacementField& f, std::size_t M) {
    if (M < 2) throw std::invalid_argument("fd_grad_inf: lattice needs at least 2 points per axis");
    const double d = 1e-6;
    double best = 0.0;
    for (std::size_t i = 0; i < M; ++i)
        for (std::size_t k = 0; k < M; ++k) {
            const double x = -1.0 + 2.0 * static_cast<double>(k) / static_cast<double>(M - 1);
            const double y = -1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(M - 1);
            const auto px = f.tau(x + d, y), mx = f.tau(x - d, y), py = f.tau(x, y + d), my = f.tau(x, y - d);
            best = std::max(best, spectral_norm2((px[0] - mx[0]) / (2 * d), (py[0] - my[0]) / (2 * d),
                                                 (px[1] - mx[1]) / (2 * d), (py[1] - my[1]) / (2 * d)));
        }
    return best;
}

DisplacementField make_rotation_unchecked(double theta) {
    DisplacementField f;
    f.kind = FieldKind::rotation;
    f.theta = theta;
    f.grad_inf = 2.0 * std::abs(std::sin(theta / 2.0));
    f.rigid = true;
    return f;
}

DisplacementField make_displacement(FieldKind kind, double param, std::uint64_t seed) {
    DisplacementField f;
    f.kind = kind;
    f.seed = seed;
    switch (kind) {
    case FieldKind::zero: break;
    case FieldKind::rotation: f = make_rotation_unchecked(param); break;
    case FieldKind::dilation:
        if (!(param > 0.0)) throw std::invalid_argument("dilation factor must be positive");
        f.scale = param;
        f.grad_inf = std::abs(1.0 - param);
        f.rigid = param == 1.0;
        break;
    case FieldKind::smooth_odd: {
        if (!(param > 0.0)) throw std::invalid_argument("smooth-odd amplitude must be positive");
        std::mt19937_64 rng(seed);
        std::uniform_int_distribution<int> freq(-1, 1);
        std::normal_distribution<double> coef(0.0, 1.0);
        for (int m = 0; m < 4; ++m) {
            OddMode mode;
            do {
                mode.k1 = freq(rng);
                mode.k2 = freq(rng);
            } while (mode.k1 == 0 && mode.k2 == 0);
            mode.ax = coef(rng);
            mode.ay = coef(rng);
            f.modes.push_back(mode);
        }
        double sup = 0.0;
        const std::size_t M = 201;
        for (std::size_t i = 0; i < M; ++i)
            for (std::size_t k = 0; k < M; ++k) {
                const auto t = f.tau(-1.0 + 2.0 * k / double(M - 1), -1.0 + 2.0 * i / double(M - 1));
                sup = std::max(sup, std::hypot(t[0], t[1]));
            }
        for (auto& mode : f.modes) {
            mode.ax *= param / sup;
            mode.ay *= param / sup;
        }
        f.amplitude = param;
        f.rigid = false;
        f.grad_inf = fd_grad_inf(f);
        break;
    }
    }
    f.seed = seed;
    if (f.grad_inf >= 0.2)
        throw AssumptionError("A2", f.str() + " has |grad tau|_inf = " + fmt_short(f.grad_inf) + " >= 1/5");
    return f;
}

GridSignal warp(const GridSignal& x, const DisplacementField& field, WarpDirection dir) {
    if (field.kind == FieldKind::zero) return x;
    GridSignal out = x;
    for (std::size_t i = 0; i < x.n; ++i)
        for (std::size_t j = 0; j < x.n; ++j) {
            const double ux = x.coord(j), uy = x.coord(i);
            const auto p = dir == WarpDirection::forward ? field.rho(ux, uy) : field.rho_inverse(ux, uy);
            out.at(i, j) = x.sample(p[0], p[1]);
        }
    return out;
}

GridFilter warp(const GridFilter& w, const DisplacementField& field, WarpDirection dir, double* masked) {
    GridFilter out = w;
    out.g = warp(w.g, field, dir);
    const double m = out.apply_disk_mask();
    if (masked) *masked = m;
    return out;
}

// ---------------------------------------------------------------------------
// Layer primitives
// ---------------------------------------------------------------------------

GridSignal convolve(const GridSignal& x, const GridFilter& w, std::size_t margin) {
    if (std::abs(x.h - w.g.h) > 1e-15 * x.h)
        throw ShapeError("convolve: signal spacing " + fmt_short(x.h) + " differs from filter spacing " + fmt_short(w.g.h));
    GridSignal out = x;
    std::fill(out.v.begin(), out.v.end(), 0.0);
    const auto box = x.support_box();
    if (box.empty) return out;
    const std::size_t R = w.R;
    if (box.i0 < R + margin || box.j0 < R + margin || box.i1 + R + margin >= x.n || box.j1 + R + margin >= x.n)
        throw SupportError("support overflow: convolution output reaches within " + std::to_string(margin) +
                           " cells of the boundary (input box rows " + std::to_string(box.i0) + ".." +
                           std::to_string(box.i1) + ", filter radius " + std::to_string(R) + " cells, N=" +
                           std::to_string(x.n) + ")");
    const std::size_t n = x.n;
    const std::size_t width = box.j1 - box.j0 + 1;
    for (std::size_t p = 0; p < w.g.n; ++p)
        for (std::size_t q = 0; q < w.g.n; ++q) {
            const double wv = w.g.at(p, q);
            if (wv == 0.0) continue;
            for (std::size_t i = box.i0; i <= box.i1; ++i) {
                const double* src = &x.v[i * n + box.j0];
                double* dst = &out.v[(i + p - R) * n + box.j0 + q - R];
                for (std::size_t k = 0; k < width; ++k) dst[k] += wv * src[k];
            }
        }
    const double area = x.h * x.h;
    for (double& v : out.v) v *= area;
    return out;
}

namespace {

void require_zero_baseline(const Activation& act, double bias) {
    act.validate();
    if (act.apply(bias) != 0.0)
        throw std::invalid_argument("sigma_b: sigma(" + fmt_short(bias) +
                                    ") != 0 would give every layer output full support on Omega");
}

}  // namespace

GridSignal sigma_b(const GridSignal& x, double bias, const Activation& act) {
    require_zero_baseline(act, bias);
    GridSignal out = x;
    for (double& v : out.v) v = act.apply(v + bias);
    return out;
}

GridSignal sigma_b(const GridSignal& x, const GridSignal& bias, const Activation& act) {
    act.validate();
    if (!x.same_grid(bias)) throw ShapeError("sigma_b: bias field on a different grid");
    GridSignal out = x;
    for (std::size_t k = 0; k < out.v.size(); ++k) out.v[k] = act.apply(x.v[k] + bias.v[k]);
    return out;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

std::string BoundReport::csv_header() {
    return "check,config,N,measured,bound,slack,pass,rejected,epsilon,control,ratio,reason";
}

std::string BoundReport::csv_row() const {
    std::ostringstream os;
    os << check << ',' << config << ',' << N << ',' << fmt(measured) << ',' << fmt(bound) << ',' << fmt(slack) << ','
       << (pass ? 1 : 0) << ',' << (rejected ? 1 : 0) << ',' << fmt(epsilon) << ',' << fmt(control) << ','
       << fmt(ratio) << ',' << reason;
    return os.str();
}

BoundReport rejected_report(const std::string& check, const std::string& config, std::size_t N,
                            const std::string& reason) {
    BoundReport r;
    r.check = check;
    r.config = config;
    r.N = N;
    r.rejected = true;
    r.pass = false;
    r.reason = reason;
    for (char& c : r.reason)
        if (c == ',' || c == '\n') c = ';';
    return r;
}

// ---------------------------------------------------------------------------
// Checks
// ---------------------------------------------------------------------------

std::pair<BoundReport, BoundReport> check_nonexpansive(const GridSignal& x, const GridFilter& w) {
    const GridSignal y = convolve(x, w);
    const double xl1 = x.l1_norm(), xtv = x.tv_norm(), wl1 = w.l1_norm();
    BoundReport a, b;
    a.check = "nonexpansive-l1";
    b.check = "nonexpansive-tv";
    a.N = b.N = x.n;
    a.measured = y.l1_norm();
    a.bound = xl1 * wl1;
    b.measured = y.tv_norm();
    b.bound = xtv * wl1;
    for (BoundReport* r : {&a, &b}) {
        r->slack = 1e-12 * r->bound;  // floating-point summation only; the discrete inequality is exact
        r->pass = r->measured <= r->bound + r->slack;
        r->norms = {{"x_l1", xl1}, {"x_tv", xtv}, {"w_l1", wl1}};
    }
    return {a, b};
}

BoundReport check_fact1(const DisplacementField& field, std::size_t M) {
    BoundReport r;
    r.check = "fact1";
    r.config = field.str();
    r.epsilon = field.grad_inf;
    r.bound = 4.0 * field.grad_inf;
    switch (field.kind) {
    case FieldKind::zero:
    case FieldKind::rotation: r.measured = 0.0; break;  // |det R| = 1
    case FieldKind::dilation: r.measured = std::abs(field.scale * field.scale - 1.0); break;
    case FieldKind::smooth_odd:
        for (std::size_t i = 0; i < M; ++i)
            for (std::size_t k = 0; k < M; ++k) {
                const double x = -1.0 + 2.0 * k / double(M - 1), y = -1.0 + 2.0 * i / double(M - 1);
                r.measured = std::max(r.measured, std::abs(std::abs(field.jacobian_det(x, y)) - 1.0));
            }
        r.slack = 1e-8;  // finite-difference noise
        break;
    }
    r.pass = r.measured <= r.bound + r.slack;
    return r;
}

namespace {

std::vector<std::size_t> with_refinements(const std::vector<std::size_t>& Ns) {
    std::set<std::size_t> all;
    for (auto N : Ns) {
        all.insert(N);
        all.insert(2 * N);
    }
    return {all.begin(), all.end()};
}

}  // namespace

std::vector<BoundReport> check_filter_norm_drift(const FilterSpec& wspec, const DisplacementField& field,
                                                 const std::vector<std::size_t>& Ns) {
    struct Eval {
        double drift, wl1, interp;
    };
    std::map<std::size_t, Eval> ev;
    for (auto N : with_refinements(Ns)) {
        const GridFilter w = wspec.sample(N);
        const GridFilter dw = warp(w, field, WarpDirection::forward);
        // reference: the analytic filter evaluated exactly at ρ(u)
        const GridFilter exact = wspec.sample_warped(N, field);
        ev[N] = {std::abs(dw.l1_norm() - w.l1_norm()), w.l1_norm(), l1_distance(dw.g, exact.g)};
    }
    std::vector<BoundReport> out;
    for (auto N : Ns) {
        const auto& e = ev.at(N);
        BoundReport r;
        r.check = "norm-drift";
        r.config = field.str();
        r.N = N;
        r.epsilon = field.grad_inf;
        r.measured = e.drift;
        r.bound = field.grad_inf * e.wl1;
        r.slack = std::abs(e.drift - ev.at(2 * N).drift) + e.interp;
        r.control = field.grad_inf > 0 ? e.drift / (field.grad_inf * e.wl1) : 0.0;
        r.pass = field.rigid ? r.measured <= r.slack + 1e-14 : true;
        r.norms = {{"w_l1", e.wl1}, {"interp_err", e.interp}};
        out.push_back(r);
    }
    return out;
}

double lemma1_lhs(const GridSignal& x, const GridFilter& w, const GridFilter& f, const DisplacementField& field,
                  const Activation& act, double bias) {
    return lemma1_lhs(x, w, warp(w, field, WarpDirection::forward), f, warp(f, field, WarpDirection::inverse), act,
                      bias);
}

double lemma1_lhs(const GridSignal& x, const GridFilter& w, const GridFilter& dw, const GridFilter& f,
                  const GridFilter& dinv_f, const Activation& act, double bias) {
    const GridSignal y1 = convolve(sigma_b(convolve(x, dw), bias, act), f);
    const GridSignal y2 = convolve(sigma_b(convolve(x, w), bias, act), dinv_f);
    return l1_distance(y1, y2);
}

Lemma1Eval eval_lemma1(const Lemma1Config& cfg, std::size_t N) {
    cfg.act.validate();
    const GridSignal x = cfg.x.sample(N);
    const GridFilter w = cfg.w.sample(N), f = cfg.f.sample(N);
    Lemma1Eval e;
    if (cfg.filter_warp == FilterWarp::analytic)
        e.lhs = lemma1_lhs(x, w, cfg.w.sample_warped(N, cfg.field), f,
                           cfg.f.sample_warped(N, cfg.field, nullptr, WarpDirection::inverse), cfg.act, cfg.bias);
    else
        e.lhs = lemma1_lhs(x, w, f, cfg.field, cfg.act, cfg.bias);
    e.x_l1 = x.l1_norm();
    e.x_tv = x.tv_norm();
    e.w_l1 = w.l1_norm();
    e.f_l1 = f.l1_norm();
    const double second = cfg.field.rigid ? 0.0 : 4.0 * e.x_l1;
    e.bound = 2.0 * cfg.field.grad_inf * e.w_l1 * e.f_l1 *
              ((std::exp2(cfg.w.j) + std::exp2(cfg.f.j)) * e.x_tv + second);
    return e;
}

std::vector<BoundReport> check_lemma1(const Lemma1Config& cfg, const std::vector<std::size_t>& Ns) {
    if (cfg.field.grad_inf >= 0.2)
        throw AssumptionError("A2", cfg.field.str() + " violates |grad tau|_inf < 1/5");
    std::map<std::size_t, Lemma1Eval> ev;
    for (auto N : with_refinements(Ns)) ev[N] = eval_lemma1(cfg, N);
    std::vector<BoundReport> out;
    for (auto N : Ns) {
        const auto& e = ev.at(N);
        BoundReport r;
        r.check = "lemma1";
        r.config = cfg.label.empty() ? cfg.field.str() : cfg.label;
        r.N = N;
        r.epsilon = cfg.field.grad_inf;
        r.measured = e.lhs;
        r.bound = e.bound;
        r.slack = std::abs(e.lhs - ev.at(2 * N).lhs);
        r.pass = r.measured <= r.bound + r.slack;
        r.norms = {{"x_l1", e.x_l1}, {"x_tv", e.x_tv}, {"w_l1", e.w_l1}, {"f_l1", e.f_l1}};
        out.push_back(r);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Theorem 1 pipeline
// ---------------------------------------------------------------------------

void StackSpec::validate() const {
    if (layers.empty()) throw std::invalid_argument("stack needs at least one layer pair");
    try {
        act.validate();
    } catch (const std::exception& e) {
        throw AssumptionError("A1", e.what());
    }
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto& L = layers[l];
        const std::string where = "layer pair " + std::to_string(l + 1);
        if (L.field.grad_inf >= 0.2)
            throw AssumptionError("A2", where + ": |grad tau|_inf = " + fmt_short(L.field.grad_inf) + " >= 1/5");
        if (L.gen.norm > 1.0 || L.feat.norm > 1.0) throw AssumptionError("A3", where + ": filter 1-norm exceeds 1");
        if (L.gen.j != L.j || L.feat.j != L.j)
            throw AssumptionError("A3", where + ": generative and feature filters must share the scale 2^j");
        if (act.apply(L.gen_bias) != 0.0 || act.apply(L.feat_bias) != 0.0)
            throw std::invalid_argument(where + ": biases must satisfy sigma(b) = 0 to keep compact support");
    }
}

Theorem1Eval eval_theorem1(const StackSpec& spec, const SignalSpec& hspec, std::size_t N) {
    spec.validate();
    const std::size_t L = spec.layers.size();
    Theorem1Eval ev;
    const GridSignal h = hspec.sample(N);
    ev.h_l1 = h.l1_norm();
    ev.h_tv = h.tv_norm();

    std::vector<GridFilter> gs(L), gt(L), fs(L), ft(L);
    std::vector<double> gmask(L), fmask(L);
    double sum_scale = 0.0;
    for (std::size_t l = 0; l < L; ++l) {
        const auto& sl = spec.layers[l];
        gs[l] = sl.gen.sample(N);
        fs[l] = sl.feat.sample(N);
        if (spec.filter_warp == FilterWarp::analytic) {
            gt[l] = sl.gen.sample_warped(N, sl.field, &gmask[l]);
            ft[l] = sl.feat.sample_warped(N, sl.field, &fmask[l]);
        } else {
            gt[l] = warp(gs[l], sl.field, WarpDirection::forward, &gmask[l]);
            ft[l] = warp(fs[l], sl.field, WarpDirection::forward, &fmask[l]);
        }
        ev.epsilon = std::max(ev.epsilon, sl.field.grad_inf);
        ev.all_rigid = ev.all_rigid && sl.field.rigid;
        sum_scale += std::exp2(sl.j);
    }

    // generative nets, layers −L … −1
    GridSignal xs = h, xt = h;
    GridSignal x0s = GridSignal::omega(N), x0t = GridSignal::omega(N);
    for (std::size_t k = L; k-- > 0;) {
        const auto& sl = spec.layers[k];
        LayerTrace tr;
        tr.layer = -static_cast<int>(k + 1);
        const GridSignal xc = xt - x0t;
        tr.xc_l1 = xc.l1_norm();
        tr.xc_tv = xc.tv_norm();
        tr.wt_l1 = gt[k].l1_norm();
        tr.masked_mass = gmask[k];

        // per-position target bias: x̃₀∗w_t + b_t = x̃₀∗w_s + b_s
        GridSignal bt = convolve(x0t, gs[k]);
        const GridSignal x0t_wt = convolve(x0t, gt[k]);
        for (std::size_t q = 0; q < bt.v.size(); ++q) bt.v[q] = bt.v[q] + sl.gen_bias - x0t_wt.v[q];

        xs = sigma_b(convolve(xs, gs[k]), sl.gen_bias, spec.act);
        x0s = sigma_b(convolve(x0s, gs[k]), sl.gen_bias, spec.act);
        xt = sigma_b(convolve(xt, gt[k]), bt, spec.act);
        x0t = sigma_b(x0t_wt, bt, spec.act);
        for (std::size_t q = 0; q < x0t.v.size(); ++q)
            tr.baseline_diff = std::max(tr.baseline_diff, std::abs(x0t.v[q] - x0s.v[q]));
        ev.baseline_max_diff = std::max(ev.baseline_max_diff, tr.baseline_diff);
        ev.trace.push_back(tr);
    }

    // feature nets, layers 1 … L
    GridSignal Fs = xs, Ft = xt, Fc = xt;
    for (std::size_t k = 0; k < L; ++k) {
        const auto& sl = spec.layers[k];
        Fs = sigma_b(convolve(Fs, fs[k]), sl.feat_bias, spec.act);
        Ft = sigma_b(convolve(Ft, ft[k]), sl.feat_bias, spec.act);
        Fc = sigma_b(convolve(Fc, fs[k]), sl.feat_bias, spec.act);
        LayerTrace tr;
        tr.layer = static_cast<int>(k + 1);
        tr.wt_l1 = ft[k].l1_norm();
        tr.masked_mass = fmask[k];
        ev.trace.push_back(tr);
    }
    ev.measured = l1_distance(Fs, Ft);
    ev.control = l1_distance(Fs, Fc);
    ev.bound = 4.0 * ev.epsilon * (sum_scale * ev.h_tv + (ev.all_rigid ? 0.0 : 2.0 * double(L) * ev.h_l1));
    return ev;
}

std::vector<BoundReport> run_theorem1(const StackSpec& spec, const SignalSpec& h, const std::vector<std::size_t>& Ns) {
    std::map<std::size_t, Theorem1Eval> ev;
    for (auto N : with_refinements(Ns)) ev[N] = eval_theorem1(spec, h, N);
    std::vector<BoundReport> out;
    for (auto N : Ns) {
        const auto& e = ev.at(N);
        BoundReport r;
        r.check = "theorem1";
        r.config = spec.label.empty() ? "L=" + std::to_string(spec.layers.size()) : spec.label;
        r.N = N;
        r.epsilon = e.epsilon;
        r.measured = e.measured;
        r.bound = e.bound;
        r.slack = std::abs(e.measured - ev.at(2 * N).measured);
        r.control = e.control;
        r.ratio = e.measured > 0.0 ? e.control / e.measured : (e.control > 0.0 ? INFINITY : -1.0);
        r.pass = r.measured <= r.bound + r.slack;
        r.norms = {{"h_l1", e.h_l1}, {"h_tv", e.h_tv}, {"baseline_max_diff", e.baseline_max_diff}};
        for (const auto& tr : e.trace)
            if (tr.layer < 0) {
                r.norms.emplace_back("xc_l1@" + std::to_string(tr.layer), tr.xc_l1);
                r.norms.emplace_back("xc_tv@" + std::to_string(tr.layer), tr.xc_tv);
            }
        out.push_back(r);
    }
    return out;
}

StackSpec make_stack(std::size_t L, const DisplacementField& field, double j, std::uint64_t seed, FeatureFilters mode,
                     double gen_bias, double feat_bias) {
    StackSpec s;
    for (std::size_t l = 0; l < L; ++l) {
        StackLayer sl;
        sl.j = j;
        sl.field = field;
        sl.gen = random_filter(seed * 1000003ull + 2 * l, j);
        sl.feat = mode == FeatureFilters::independent ? random_filter(seed * 1000003ull + 2 * l + 1, j)
                                                      : sl.gen.rotated90(1);
        sl.gen_bias = gen_bias;
        sl.feat_bias = feat_bias;
        s.layers.push_back(sl);
    }
    s.label = "L=" + std::to_string(L) + ";" + field.str() + ";seed=" + std::to_string(seed);
    return s;
}

BoundReport verify_atom_implementability(const std::vector<GridFilter>& atoms, const std::vector<double>& coeffs,
                                         const DisplacementField& field) {
    if (atoms.empty() || atoms.size() != coeffs.size())
        throw std::invalid_argument("atom implementability: need one coefficient per atom");
    for (const auto& a : atoms)
        if (!a.g.same_grid(atoms[0].g)) throw ShapeError("atom implementability: atoms on different grids");

    auto combine = [&](const std::vector<GridFilter>& bank, double sign) {
        GridFilter w = bank[0];
        std::fill(w.g.v.begin(), w.g.v.end(), 0.0);
        for (std::size_t k = 0; k < bank.size(); ++k)
            for (std::size_t q = 0; q < w.g.v.size(); ++q) w.g.v[q] += coeffs[k] * (sign * bank[k].g.v[q]);
        return w;
    };

    const GridFilter W = combine(atoms, 1.0);
    const GridFilter warped_W = warp(W, field, WarpDirection::forward);
    std::vector<GridFilter> warped_atoms;
    for (const auto& a : atoms) warped_atoms.push_back(warp(a, field, WarpDirection::forward));
    const GridFilter combined = combine(warped_atoms, 1.0);

    BoundReport r;
    r.check = "atom-implementability";
    r.config = field.str() + ";K=" + std::to_string(atoms.size());
    r.N = atoms[0].g.n;
    r.epsilon = field.grad_inf;
    for (std::size_t q = 0; q < W.g.v.size(); ++q)
        r.measured = std::max(r.measured, std::abs(warped_W.g.v[q] - combined.g.v[q]));
    r.bound = 1e-10;

    const GridFilter neg = combine(atoms, -1.0);
    bool neg_exact = true;
    for (std::size_t q = 0; q < W.g.v.size(); ++q) neg_exact = neg_exact && neg.g.v[q] == -W.g.v[q];
    r.pass = r.measured <= r.bound && neg_exact;
    if (!neg_exact) r.reason = "atom-wise negation differs from filter-wise negation";
    return r;
}

}  // namespace dafd::theory
