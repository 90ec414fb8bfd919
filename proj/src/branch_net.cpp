#include "dafd/branch_net.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace dafd {

Arch parse_arch(const std::string& s) {
    if (s == "A1" || s == "a1") return Arch::A1;
    if (s == "A2" || s == "a2") return Arch::A2;
    if (s == "A3" || s == "a3") return Arch::A3;
    throw std::invalid_argument("unknown architecture '" + s + "' (expected A1, A2 or A3)");
}

std::string to_string(Arch a) {
    switch (a) {
    case Arch::A1: return "A1";
    case Arch::A2: return "A2";
    case Arch::A3: return "A3";
    }
    return "?";
}

TrainMode parse_mode(const std::string& s) {
    if (s == "supervised-both" || s == "supervised") return TrainMode::supervised_both;
    if (s == "unsupervised-target" || s == "unsupervised") return TrainMode::unsupervised_target;
    throw std::invalid_argument("unknown training mode '" + s + "'");
}

std::string to_string(TrainMode m) {
    return m == TrainMode::supervised_both ? "supervised-both" : "unsupervised-target";
}

// ---------------------------------------------------------------------------
// NetSpec
// ---------------------------------------------------------------------------

std::size_t NetSpec::conv_count() const {
    return static_cast<std::size_t>(
        std::count_if(layers.begin(), layers.end(), [](const LayerSpec& l) { return l.kind == LayerKind::conv; }));
}

void NetSpec::validate() const {
    if (layers.empty() || layers.back().kind != LayerKind::dense)
        throw std::invalid_argument("NetSpec: the last layer must be the dense classifier head");
    if (arch != Arch::A1 && branched_prefix > conv_count())
        throw std::invalid_argument("NetSpec: branched prefix " + std::to_string(branched_prefix) +
                                    " exceeds the " + std::to_string(conv_count()) + " conv layers");
    if (domains.empty()) throw std::invalid_argument("NetSpec: no domains");
    for (std::size_t d = 0; d < domains.size(); ++d)
        if (domains[d].index != static_cast<int>(d))
            throw std::invalid_argument("NetSpec: domain '" + domains[d].name + "' must have index " +
                                        std::to_string(d));
    if (in_channels == 0 || in_h == 0 || in_w == 0) throw std::invalid_argument("NetSpec: empty input shape");
    for (const auto& l : layers) {
        if ((l.kind == LayerKind::conv || l.kind == LayerKind::dense) && l.out == 0)
            throw std::invalid_argument("NetSpec: layer with zero outputs");
        if (l.kind == LayerKind::conv && (l.L % 2 == 0 || l.K > l.L * l.L))
            throw std::invalid_argument("NetSpec: conv layers need odd L and K <= L^2");
        if (l.kind == LayerKind::nonlinearity) l.act.validate();
    }
}

NetSpec NetSpec::toy(Arch arch, std::size_t image_size, std::size_t classes, std::size_t K,
                     std::size_t num_domains) {
    NetSpec s;
    s.arch = arch;
    s.in_channels = 1;
    s.in_h = s.in_w = image_size;
    s.layers = {LayerSpec::make_conv(8, 3, {3, 0}, K),  LayerSpec::make_act(Activation::relu()),
                LayerSpec::make_conv(16, 3, {1, 1}, K), LayerSpec::make_act(Activation::relu()),
                LayerSpec::make_pool(2),                LayerSpec::make_dense(32),
                LayerSpec::make_act(Activation::relu()), LayerSpec::make_dense(classes)};
    s.branched_prefix = arch == Arch::A1 ? 0 : 2;
    s.domains.clear();
    for (std::size_t d = 0; d < num_domains; ++d)
        s.domains.push_back({static_cast<int>(d), d == 0 ? "source" : d == 1 ? "target" : "domain" + std::to_string(d)});
    return s;
}

// ---------------------------------------------------------------------------
// Network
// ---------------------------------------------------------------------------

template <typename T>
Network<T>::Network(NetSpec spec, std::vector<NetLayer<T>> layers)
    : spec_(std::move(spec)), layers_(std::move(layers)) {}

template <typename T>
std::size_t Network<T>::feature_dim() const {
    const auto& head = layers_.back();
    return head.in_c * head.in_h * head.in_w;
}

template <typename T>
std::size_t Network<T>::num_classes() const {
    return layers_.back().out_c;
}

template <typename T>
void Network<T>::check_domain(int domain) const {
    if (domain < 0 || static_cast<std::size_t>(domain) >= num_domains())
        throw std::out_of_range("Network: unknown domain " + std::to_string(domain));
}

namespace {

template <typename T>
void add_bias(Tensor4<T>& y, const std::vector<T>& b) {
    for (std::size_t n = 0; n < y.n(); ++n)
        for (std::size_t c = 0; c < y.c(); ++c)
            for (std::size_t i = 0; i < y.h(); ++i)
                for (std::size_t j = 0; j < y.w(); ++j) y(n, c, i, j) += b[c];
}

template <typename T>
Tensor4<T> as_filter(const Param<T>& p) {
    return Tensor4<T>(p.shape, p.value);
}

}  // namespace

template <typename T>
ForwardResult<T> Network<T>::forward(const Tensor4<T>& batch, int domain) const {
    check_domain(domain);
    if (batch.n() == 0) throw std::invalid_argument("Network::forward: empty batch");
    if (batch.c() != spec_.in_channels || batch.h() != spec_.in_h || batch.w() != spec_.in_w)
        throw ShapeError("Network::forward: batch " + batch.shape().str() + " does not match the input shape");

    ForwardResult<T> r;
    r.domain = domain;
    r.tape.resize(layers_.size());
    Tensor4<T> x = batch;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const auto& layer = layers_[l];
        auto& tape = r.tape[l];
        Tensor4<T> y;
        switch (layer.spec.kind) {
        case LayerKind::conv:
            if (layer.dafd) {
                auto [out, cache] = layer.dafd->forward(x, domain);
                y = std::move(out);
                tape.dafd = std::move(cache);
            } else {
                const std::size_t slot = (layer.branched && spec_.arch == Arch::A2) ? 2 * static_cast<std::size_t>(domain) : 0;
                y = conv2d(x, as_filter(layer.params[slot]), layer.spec.conv);
                add_bias(y, layer.params[slot + 1].value);
            }
            break;
        case LayerKind::nonlinearity: y = sigma_b<T>(x, {}, layer.spec.act); break;
        case LayerKind::pool: y = max_pool(x, layer.spec.pool, tape.argmax); break;
        case LayerKind::dense:
            y = dense_forward<T>(x, layer.params[0].value, layer.params[1].value, layer.out_c);
            break;
        }
        if (l == head_index()) r.features = x;
        tape.input = std::move(x);
        x = std::move(y);
    }
    r.logits = std::move(x);
    return r;
}

template <typename T>
Tensor4<T> Network<T>::classify_features(const Tensor4<T>& features) const {
    const auto& head = layers_.back();
    if (features.per_sample() != feature_dim())
        throw ShapeError("classify_features: expected " + std::to_string(feature_dim()) + " features per sample");
    return dense_forward<T>(features, head.params[0].value, head.params[1].value, head.out_c);
}

template <typename T>
void Network<T>::backward(const ForwardResult<T>& fwd, const Tensor4<T>& dlogits, const Tensor4<T>* dfeatures) {
    check_domain(fwd.domain);
    if (fwd.tape.size() != layers_.size()) throw std::invalid_argument("Network::backward: tape mismatch");
    Tensor4<T> g = dlogits;
    for (std::size_t li = layers_.size(); li-- > 0;) {
        auto& layer = layers_[li];
        const auto& tape = fwd.tape[li];
        const Tensor4<T>& x = tape.input;
        switch (layer.spec.kind) {
        case LayerKind::dense:
            g = dense_backward<T>(x, layer.params[0].value, layer.out_c, g, layer.params[0].grad,
                                  layer.params[1].grad);
            break;
        case LayerKind::nonlinearity: g = sigma_b_backward<T>(x, {}, layer.spec.act, g, {}); break;
        case LayerKind::pool: g = max_pool_backward(x.shape(), g, tape.argmax); break;
        case LayerKind::conv:
            if (layer.dafd) {
                auto grads = layer.dafd->backward(*tape.dafd, g, fwd.domain);
                layer.dafd->accumulate(grads, fwd.domain);
                g = std::move(grads.dx);
            } else {
                const std::size_t slot = (layer.branched && spec_.arch == Arch::A2) ? 2 * static_cast<std::size_t>(fwd.domain) : 0;
                auto& W = layer.params[slot];
                auto& b = layer.params[slot + 1];
                for (std::size_t n = 0; n < g.n(); ++n)
                    for (std::size_t c = 0; c < g.c(); ++c) {
                        T acc = 0;
                        for (std::size_t i = 0; i < g.h(); ++i)
                            for (std::size_t j = 0; j < g.w(); ++j) acc += g(n, c, i, j);
                        b.grad[c] += acc;
                    }
                auto cg = conv2d_backward(x, as_filter(W), g, layer.spec.conv);
                for (std::size_t k = 0; k < W.grad.size(); ++k) W.grad[k] += cg.dw[k];
                g = std::move(cg.dx);
            }
            break;
        }
        if (li == head_index() && dfeatures) {
            if (dfeatures->size() != g.size()) throw ShapeError("Network::backward: feature gradient shape mismatch");
            for (std::size_t k = 0; k < g.size(); ++k) g[k] += (*dfeatures)[k];
        }
    }
}

template <typename T>
std::vector<Param<T>*> Network<T>::params() {
    std::vector<Param<T>*> out;
    for (auto& layer : layers_) {
        if (layer.dafd)
            for (auto* p : layer.dafd->params()) out.push_back(p);
        for (auto& p : layer.params) out.push_back(&p);
    }
    return out;
}

template <typename T>
std::vector<const Param<T>*> Network<T>::params() const {
    std::vector<const Param<T>*> out;
    for (auto* p : const_cast<Network*>(this)->params()) out.push_back(p);
    return out;
}

template <typename T>
void Network<T>::zero_grad() {
    for (auto* p : params()) p->zero_grad();
}

template <typename T>
std::size_t Network<T>::count_partition(int owner) const {
    std::size_t total = 0;
    for (const auto* p : params())
        if (p->owner == owner) total += p->size();
    return total;
}

template <typename T>
std::size_t Network<T>::count_branched(int owner) const {
    std::size_t total = 0;
    for (const auto& layer : layers_) {
        if (!layer.branched) continue;
        if (layer.dafd) {
            for (const auto* p : const_cast<DafdLayer<T>&>(*layer.dafd).params())
                if (p->owner == owner) total += p->size();
        }
        for (const auto& p : layer.params)
            if (p.owner == owner) total += p.size();
    }
    return total;
}

template <typename T>
Network<T> build_network(const NetSpec& spec, std::uint64_t seed) {
    spec.validate();
    std::mt19937_64 rng(seed);
    std::vector<NetLayer<T>> layers;
    std::size_t c = spec.in_channels, h = spec.in_h, w = spec.in_w;
    std::size_t conv_ordinal = 0, dense_ordinal = 0;

    // Shared base initialisation, identical across architectures.
    for (std::size_t l = 0; l < spec.layers.size(); ++l) {
        const auto& ls = spec.layers[l];
        NetLayer<T> layer;
        layer.spec = ls;
        layer.in_c = c;
        layer.in_h = h;
        layer.in_w = w;
        switch (ls.kind) {
        case LayerKind::conv: {
            layer.out_c = ls.out;
            layer.out_h = ls.conv.out_extent(h, ls.L);
            layer.out_w = ls.conv.out_extent(w, ls.L);
            layer.branched = spec.arch != Arch::A1 && conv_ordinal < spec.branched_prefix;
            const std::string name = "conv" + std::to_string(conv_ordinal++);
            const int owner = (layer.branched && spec.arch == Arch::A2) ? 0 : kShared;
            const std::string suffix = owner == 0 ? ".d0" : "";
            layer.params.emplace_back(name + ".weight" + suffix, Shape4{ls.out, c, ls.L, ls.L}, owner);
            layer.params.emplace_back(name + ".bias" + suffix, Shape4{ls.out, 1, 1, 1}, owner);
            glorot_uniform<T>(layer.params[0].value, c * ls.L * ls.L, ls.out * ls.L * ls.L, rng);
            break;
        }
        case LayerKind::dense: {
            const std::size_t in = c * h * w;
            layer.out_c = ls.out;
            layer.out_h = layer.out_w = 1;
            const std::string name = "dense" + std::to_string(dense_ordinal++);
            layer.params.emplace_back(name + ".weight", Shape4{ls.out, in, 1, 1}, kShared);
            layer.params.emplace_back(name + ".bias", Shape4{ls.out, 1, 1, 1}, kShared);
            glorot_uniform<T>(layer.params[0].value, in, ls.out, rng);
            break;
        }
        case LayerKind::pool:
            if (ls.pool == 0 || h % ls.pool != 0 || w % ls.pool != 0)
                throw ShapeError("build_network: pool window " + std::to_string(ls.pool) + " does not divide " +
                                 std::to_string(h) + "x" + std::to_string(w));
            layer.out_c = c;
            layer.out_h = h / ls.pool;
            layer.out_w = w / ls.pool;
            break;
        case LayerKind::nonlinearity:
            layer.out_c = c;
            layer.out_h = h;
            layer.out_w = w;
            break;
        }
        c = layer.out_c;
        h = layer.out_h;
        w = layer.out_w;
        layers.push_back(std::move(layer));
    }

    // Architecture-specific branches.
    const std::size_t D = spec.domains.size();
    conv_ordinal = 0;
    for (auto& layer : layers) {
        if (layer.spec.kind != LayerKind::conv) continue;
        const std::string name = "conv" + std::to_string(conv_ordinal++);
        if (!layer.branched) continue;
        const auto& ls = layer.spec;
        if (spec.arch == Arch::A2) {
            for (std::size_t d = 1; d < D; ++d) {
                const int owner = static_cast<int>(d);
                Param<T> W(name + ".weight.d" + std::to_string(d), layer.params[0].shape, owner);
                Param<T> b(name + ".bias.d" + std::to_string(d), layer.params[1].shape, owner);
                glorot_uniform<T>(W.value, layer.in_c * ls.L * ls.L, ls.out * ls.L * ls.L, rng);
                layer.params.push_back(std::move(W));
                layer.params.push_back(std::move(b));
            }
        } else if (spec.arch == Arch::A3) {
            const std::size_t K = ls.K == 0 ? ls.L * ls.L : ls.K;
            DafdLayer<T> dl(layer.in_c, ls.out, ls.L, K, D, ls.conv, name);
            dl.init_from_dense(as_filter(layer.params[0]));
            dl.bias().value = layer.params[1].value;
            layer.dafd = std::move(dl);
            layer.params.clear();
        }
    }
    return Network<T>(spec, std::move(layers));
}

// ---------------------------------------------------------------------------
// MMD
// ---------------------------------------------------------------------------

namespace {

template <typename T>
double sq_dist(const T* a, const T* b, std::size_t d) {
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
        const double diff = static_cast<double>(a[k]) - static_cast<double>(b[k]);
        s += diff * diff;
    }
    return s;
}

}  // namespace

template <typename T>
MmdResult<T> mmd_loss(const Tensor4<T>& feat_s, const Tensor4<T>& feat_t, const std::vector<double>& bandwidths) {
    const std::size_t n = feat_s.n(), m = feat_t.n();
    if (n == 0 || m == 0) throw std::invalid_argument("mmd_loss: empty feature set");
    if (feat_s.per_sample() != feat_t.per_sample()) throw ShapeError("mmd_loss: feature dimensions differ");
    if (bandwidths.empty()) throw std::invalid_argument("mmd_loss: no bandwidths");
    for (double bw : bandwidths)
        if (!(bw > 0.0)) throw std::invalid_argument("mmd_loss: bandwidths must be positive");
    const std::size_t d = feat_s.per_sample();
    const T* S = feat_s.data().data();
    const T* Tt = feat_t.data().data();

    MmdResult<T> r;
    r.grad_s = Tensor4<T>(feat_s.shape());
    r.grad_t = Tensor4<T>(feat_t.shape());
    std::vector<double> gs(n * d, 0.0), gt(m * d, 0.0);

    // Accumulates Σ k(x_i, y_j) and, with weight `wgt`, the gradients of that sum.
    auto block = [&](const T* X, std::size_t nx, const T* Y, std::size_t ny, std::vector<double>& gx,
                     std::vector<double>& gy, double wgt, std::vector<double>& vals) {
        for (std::size_t i = 0; i < nx; ++i)
            for (std::size_t j = 0; j < ny; ++j) {
                const T* x = X + i * d;
                const T* y = Y + j * d;
                const double r2 = sq_dist(x, y, d);
                double kv = 0.0, dk = 0.0;  // dk: d k / d (r²)
                for (double bw : bandwidths) {
                    const double e = std::exp(-r2 / (2.0 * bw * bw));
                    kv += e;
                    dk -= e / (2.0 * bw * bw);
                }
                vals.push_back(kv);
                for (std::size_t k = 0; k < d; ++k) {
                    const double diff = static_cast<double>(x[k]) - static_cast<double>(y[k]);
                    gx[i * d + k] += wgt * dk * 2.0 * diff;
                    gy[j * d + k] -= wgt * dk * 2.0 * diff;
                }
            }
    };
    auto sorted_sum = [](std::vector<double>& v) {
        std::sort(v.begin(), v.end());
        return std::accumulate(v.begin(), v.end(), 0.0);
    };

    std::vector<double> vss, vtt, vst;
    const double wn = 1.0 / (static_cast<double>(n) * static_cast<double>(n));
    const double wm = 1.0 / (static_cast<double>(m) * static_cast<double>(m));
    const double wnm = 2.0 / (static_cast<double>(n) * static_cast<double>(m));
    block(S, n, S, n, gs, gs, wn, vss);
    block(Tt, m, Tt, m, gt, gt, wm, vtt);
    block(S, n, Tt, m, gs, gt, -wnm, vst);
    const double a = sorted_sum(vss) * wn;
    const double b = sorted_sum(vtt) * wm;
    const double c = sorted_sum(vst) * wnm;
    r.value = (a + b) - c;
    if (!std::isfinite(r.value)) throw NumericError("mmd_loss: non-finite value");
    for (std::size_t k = 0; k < gs.size(); ++k) r.grad_s[k] = static_cast<T>(gs[k]);
    for (std::size_t k = 0; k < gt.size(); ++k) r.grad_t[k] = static_cast<T>(gt[k]);
    return r;
}

template <typename T>
double median_pairwise_distance(const Tensor4<T>& a, const Tensor4<T>& b) {
    if (a.per_sample() != b.per_sample()) throw ShapeError("median_pairwise_distance: dimension mismatch");
    const std::size_t d = a.per_sample();
    std::vector<const T*> pts;
    for (std::size_t i = 0; i < a.n(); ++i) pts.push_back(a.data().data() + i * d);
    for (std::size_t i = 0; i < b.n(); ++i) pts.push_back(b.data().data() + i * d);
    if (pts.size() < 2) throw std::invalid_argument("median_pairwise_distance: need at least two samples");
    std::vector<double> dist;
    for (std::size_t i = 0; i < pts.size(); ++i)
        for (std::size_t j = i + 1; j < pts.size(); ++j) dist.push_back(std::sqrt(sq_dist(pts[i], pts[j], d)));
    std::sort(dist.begin(), dist.end());
    const std::size_t k = dist.size() / 2;
    return dist.size() % 2 ? dist[k] : 0.5 * (dist[k - 1] + dist[k]);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
    if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
    if (!(lr > 0.0)) throw std::invalid_argument("lr must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("momentum must lie in [0, 1)");
    if (!(target_fraction > 0.0 && target_fraction <= 1.0))
        throw std::invalid_argument("target_fraction must lie in (0, 1]");
    if (mmd_weight < 0.0) throw std::invalid_argument("mmd_weight must be >= 0");
    if (mode == TrainMode::unsupervised_target && !(mmd_weight > 0.0))
        throw std::invalid_argument("unsupervised-target mode requires mmd_weight > 0");
    for (double b : mmd_bandwidths)
        if (!(b > 0.0)) throw std::invalid_argument("mmd bandwidth multipliers must be positive");
}

namespace {

template <typename T>
double grad_norm(Network<T>& net, int owner) {
    double s = 0.0;
    for (auto* p : net.params())
        if (p->owner == owner)
            for (T g : p->grad) s += static_cast<double>(g) * static_cast<double>(g);
    return std::sqrt(s);
}

}  // namespace

template <typename T>
StepMetrics compute_gradients(Network<T>& net, const Batch<T>& source, const Batch<T>* target,
                              const TrainConfig& cfg, TrainState& state) {
    if (source.images.n() == 0) throw std::invalid_argument("train_step: empty source batch");
    if (target && target->images.n() == 0) throw std::invalid_argument("train_step: empty target batch");
    net.zero_grad();
    StepMetrics m;

    const auto fs = net.forward(source.images, 0);
    const auto xs = softmax_xent<T>(fs.logits, source.labels);
    m.loss_s = static_cast<double>(xs.loss);

    if (!target) {
        net.backward(fs, xs.dlogits);
    } else {
        const auto ft = net.forward(target->images, 1);
        if (cfg.mode == TrainMode::supervised_both) {
            const auto xt = softmax_xent<T>(ft.logits, target->labels);
            m.loss_t = static_cast<double>(xt.loss);
            net.backward(fs, xs.dlogits);
            net.backward(ft, xt.dlogits);
        } else {
            if (state.bandwidths.empty()) {
                double med = median_pairwise_distance(fs.features, ft.features);
                if (!(med > 0.0)) med = 1.0;
                for (double mult : cfg.mmd_bandwidths) state.bandwidths.push_back(mult * med);
            }
            auto mmd = mmd_loss(fs.features, ft.features, state.bandwidths);
            m.mmd = mmd.value;
            const T wgt = static_cast<T>(cfg.mmd_weight);
            for (auto& v : mmd.grad_s.data()) v *= wgt;
            for (auto& v : mmd.grad_t.data()) v *= wgt;
            net.backward(fs, xs.dlogits, &mmd.grad_s);
            net.backward(ft, Tensor4<T>(ft.logits.shape()), &mmd.grad_t);
        }
    }
    if (!std::isfinite(m.loss_s) || !std::isfinite(m.loss_t) || !std::isfinite(m.mmd))
        throw NumericError("non-finite loss at step " + std::to_string(state.step));

    m.grad_norm_shared = grad_norm(net, kShared);
    for (std::size_t d = 0; d < net.num_domains(); ++d) m.grad_norm_domain.push_back(grad_norm(net, static_cast<int>(d)));
    return m;
}

template <typename T>
void apply_sgd(Network<T>& net, const TrainConfig& cfg) {
    for (auto* p : net.params())
        sgd_step<T>(p->value, p->grad, p->velocity, static_cast<T>(cfg.lr), static_cast<T>(cfg.momentum));
}

template <typename T>
StepMetrics train_step(Network<T>& net, const Batch<T>& source, const Batch<T>* target, const TrainConfig& cfg,
                       TrainState& state) {
    auto m = compute_gradients(net, source, target, cfg, state);
    apply_sgd(net, cfg);
    ++state.step;
    return m;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

template <typename T>
Tensor4<T> fused_feature(const Network<T>& net, const std::vector<Tensor4<T>>& batches, const std::vector<int>& domains) {
    if (batches.empty() || batches.size() != domains.size())
        throw std::invalid_argument("fused_feature: need one batch per domain");
    Tensor4<T> sum;
    for (std::size_t i = 0; i < batches.size(); ++i) {
        if (batches[i].n() != batches[0].n())
            throw ShapeError("fused_feature: misaligned batch sizes " + std::to_string(batches[0].n()) + " and " +
                             std::to_string(batches[i].n()));
        auto f = net.forward(batches[i], domains[i]).features;
        if (i == 0) {
            sum = std::move(f);
        } else {
            for (std::size_t k = 0; k < sum.size(); ++k) sum[k] += f[k];
        }
    }
    const T inv = T(1) / static_cast<T>(batches.size());
    for (auto& v : sum.data()) v *= inv;
    return sum;
}

namespace {

template <typename T>
Tensor4<T> gather(const data::Dataset& ds, std::size_t begin, std::size_t end) {
    Shape4 s = ds.images.shape();
    s.n = end - begin;
    Tensor4<T> out(s);
    const std::size_t ps = ds.images.per_sample();
    const auto src = ds.images.data();
    for (std::size_t k = 0; k < (end - begin) * ps; ++k) out[k] = static_cast<T>(src[begin * ps + k]);
    return out;
}

template <typename T>
Batch<T> gather_batch(const data::Dataset& ds, const std::vector<std::size_t>& idx, std::size_t begin, std::size_t end) {
    Shape4 s = ds.images.shape();
    s.n = end - begin;
    Batch<T> b{Tensor4<T>(s), {}};
    const std::size_t ps = ds.images.per_sample();
    for (std::size_t k = begin; k < end; ++k) {
        const auto src = ds.images.sample(idx[k]);
        auto dst = b.images.sample(k - begin);
        for (std::size_t q = 0; q < ps; ++q) dst[q] = static_cast<T>(src[q]);
        b.labels.push_back(ds.labels[idx[k]]);
    }
    return b;
}

}  // namespace

EvalResult score_logits(const std::vector<std::vector<double>>& logits, const std::vector<int>& labels,
                        std::size_t classes) {
    if (logits.empty()) throw std::invalid_argument("evaluate: empty dataset");
    if (logits.size() != labels.size()) throw ShapeError("score_logits: logits/labels length mismatch");
    EvalResult r;
    std::vector<std::size_t> hit(classes, 0), seen(classes, 0);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        const auto& row = logits[i];
        const auto pred = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
        const auto y = static_cast<std::size_t>(labels[i]);
        if (y >= classes) throw std::out_of_range("score_logits: label out of range");
        ++seen[y];
        if (pred == labels[i]) {
            ++correct;
            ++hit[y];
        }
    }
    r.accuracy = static_cast<double>(correct) / static_cast<double>(logits.size());
    for (std::size_t c = 0; c < classes; ++c)
        r.per_class_accuracy.push_back(seen[c] ? static_cast<double>(hit[c]) / static_cast<double>(seen[c]) : 0.0);
    return r;
}

template <typename T>
EvalResult evaluate(const Network<T>& net, const std::vector<const data::Dataset*>& datasets,
                    const std::vector<int>& domains, std::size_t batch_size, bool export_features) {
    if (datasets.empty() || datasets.size() != domains.size())
        throw std::invalid_argument("evaluate: need one dataset per domain");
    const auto& first = *datasets[0];
    if (first.size() == 0) throw std::invalid_argument("evaluate: empty dataset");
    for (const auto* ds : datasets)
        if (ds->labels != first.labels) throw std::invalid_argument("evaluate: fused datasets are not aligned");
    if (batch_size == 0) batch_size = first.size();

    std::vector<std::vector<double>> logits;
    std::vector<FeatureRow> rows;
    const std::string dom_name =
        domains.size() == 1 ? net.spec().domains.at(static_cast<std::size_t>(domains[0])).name : "fused";
    for (std::size_t b = 0; b < first.size(); b += batch_size) {
        const std::size_t e = std::min(first.size(), b + batch_size);
        Tensor4<T> feats, lg;
        if (datasets.size() == 1) {
            auto fwd = net.forward(gather<T>(first, b, e), domains[0]);
            feats = std::move(fwd.features);
            lg = std::move(fwd.logits);
        } else {
            std::vector<Tensor4<T>> batches;
            for (const auto* ds : datasets) batches.push_back(gather<T>(*ds, b, e));
            feats = fused_feature(net, batches, domains);
            lg = net.classify_features(feats);
        }
        for (std::size_t i = 0; i < e - b; ++i) {
            std::vector<double> row(lg.per_sample());
            for (std::size_t k = 0; k < row.size(); ++k) row[k] = static_cast<double>(lg.sample(i)[k]);
            logits.push_back(std::move(row));
            if (export_features) {
                FeatureRow fr{b + i, first.labels[b + i], dom_name, {}};
                for (T v : feats.sample(i)) fr.features.push_back(static_cast<double>(v));
                rows.push_back(std::move(fr));
            }
        }
    }
    EvalResult r = score_logits(logits, first.labels, net.num_classes());
    r.features = std::move(rows);
    return r;
}

// ---------------------------------------------------------------------------
// Fit
// ---------------------------------------------------------------------------

namespace {

template <typename T>
Tensor4<T> head_features(const Network<T>& net, const data::Dataset& ds, int domain, std::size_t limit) {
    const std::size_t n = std::min(limit, ds.size());
    return net.forward(gather<T>(ds, 0, n), domain).features;
}

template <typename T>
EpochRecord eval_epoch(const Network<T>& net, const FitData& data, std::vector<double>& eval_bw,
                       const TrainConfig& cfg) {
    EpochRecord rec;
    if (data.source_test && data.source_test->size())
        rec.source_acc = evaluate(net, {data.source_test}, {0}).accuracy;
    if (data.target_test && data.target_test->size() && net.num_domains() > 1)
        rec.target_acc = evaluate(net, {data.target_test}, {1}).accuracy;
    if (data.source_test && data.target_test && net.num_domains() > 1 && data.source_test->size() > 1 &&
        data.target_test->size() > 1) {
        const auto fs = head_features(net, *data.source_test, 0, 256);
        const auto ft = head_features(net, *data.target_test, 1, 256);
        if (eval_bw.empty()) {
            double med = median_pairwise_distance(fs, ft);
            if (!(med > 0.0)) med = 1.0;
            for (double mult : cfg.mmd_bandwidths) eval_bw.push_back(mult * med);
        }
        rec.eval_mmd = mmd_loss(fs, ft, eval_bw).value;
    }
    return rec;
}

}  // namespace

template <typename T>
FitResult fit(Network<T>& net, const FitData& data, const TrainConfig& cfg, const FitCallbacks& callbacks) {
    cfg.validate();
    if (!data.source_train || data.source_train->size() == 0)
        throw std::invalid_argument("fit: source training set is empty");
    FitResult result;
    std::vector<double> eval_bw;  // fixed at epoch 0
    std::mt19937_64 rng(cfg.seed * 0x9E3779B97F4A7C15ull + 17);

    EpochRecord rec0 = eval_epoch(net, data, eval_bw, cfg);
    rec0.epoch = 0;
    result.epochs.push_back(rec0);
    if (callbacks.on_epoch) callbacks.on_epoch(rec0);

    const auto& src = *data.source_train;
    const data::Dataset* tgt = (data.target_train && data.target_train->size() && net.num_domains() > 1)
                                   ? data.target_train
                                   : nullptr;
    std::vector<std::size_t> sidx(src.size()), tidx(tgt ? tgt->size() : 0);
    std::iota(tidx.begin(), tidx.end(), 0);
    std::size_t tpos = tidx.size();  // forces a reshuffle on first use
    const std::size_t tb = tgt ? std::min(cfg.batch_size, tgt->size()) : 0;

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::iota(sidx.begin(), sidx.end(), 0);
        std::shuffle(sidx.begin(), sidx.end(), rng);
        double sum_s = 0, sum_t = 0, sum_m = 0;
        std::size_t steps = 0;
        for (std::size_t b = 0; b < sidx.size(); b += cfg.batch_size) {
            const std::size_t e = std::min(sidx.size(), b + cfg.batch_size);
            const auto sb = gather_batch<T>(src, sidx, b, e);
            std::optional<Batch<T>> tbatch;
            if (tgt) {
                if (tpos + tb > tidx.size()) {
                    std::shuffle(tidx.begin(), tidx.end(), rng);
                    tpos = 0;
                }
                tbatch = gather_batch<T>(*tgt, tidx, tpos, tpos + tb);
                tpos += tb;
                if (cfg.mode == TrainMode::unsupervised_target) tbatch->labels.clear();
            }
            const auto m = train_step(net, sb, tbatch ? &*tbatch : nullptr, cfg, result.state);
            sum_s += m.loss_s;
            sum_t += m.loss_t;
            sum_m += m.mmd;
            ++steps;
            if (callbacks.on_step) callbacks.on_step(result.state.step, epoch, m);
        }
        EpochRecord rec = eval_epoch(net, data, eval_bw, cfg);
        rec.epoch = epoch;
        rec.mean_loss_s = sum_s / static_cast<double>(steps);
        rec.mean_loss_t = sum_t / static_cast<double>(steps);
        rec.mean_mmd = sum_m / static_cast<double>(steps);
        result.epochs.push_back(rec);
        if (callbacks.on_epoch) callbacks.on_epoch(rec);
    }
    return result;
}

// ---------------------------------------------------------------------------
// Instantiations
// ---------------------------------------------------------------------------

#define DAFD_NET_INSTANTIATE(T)                                                                             \
    template class Network<T>;                                                                              \
    template Network<T> build_network(const NetSpec&, std::uint64_t);                                      \
    template MmdResult<T> mmd_loss(const Tensor4<T>&, const Tensor4<T>&, const std::vector<double>&);      \
    template double median_pairwise_distance(const Tensor4<T>&, const Tensor4<T>&);                        \
    template StepMetrics compute_gradients(Network<T>&, const Batch<T>&, const Batch<T>*, const TrainConfig&, \
                                           TrainState&);                                                    \
    template void apply_sgd(Network<T>&, const TrainConfig&);                                              \
    template StepMetrics train_step(Network<T>&, const Batch<T>&, const Batch<T>*, const TrainConfig&,     \
                                    TrainState&);                                                           \
    template Tensor4<T> fused_feature(const Network<T>&, const std::vector<Tensor4<T>>&,                   \
                                      const std::vector<int>&);                                             \
    template EvalResult evaluate(const Network<T>&, const std::vector<const data::Dataset*>&,              \
                                 const std::vector<int>&, std::size_t, bool);                              \
    template FitResult fit(Network<T>&, const FitData&, const TrainConfig&, const FitCallbacks&);

DAFD_NET_INSTANTIATE(float)
DAFD_NET_INSTANTIATE(double)

#undef DAFD_NET_INSTANTIATE

}  // namespace dafd
