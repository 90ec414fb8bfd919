#pragma once

// The three comparison architectures:
//   A1  every layer shared across domains,
//   A2  branched conv layers hold one full filter set (and bias) per domain,
//   A3  branched conv layers are DAFD layers (per-domain atoms, shared coefficients).
// Non-branched layers and the classifier head are always shared.

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "dafd/dafd_layer.hpp"
#include "dafd/data.hpp"
#include "dafd/param.hpp"
#include "dafd/tensor.hpp"

namespace dafd {

enum class Arch { A1, A2, A3 };

Arch parse_arch(const std::string& s);
std::string to_string(Arch a);

enum class LayerKind { conv, dense, pool, nonlinearity };

struct LayerSpec {
    LayerKind kind = LayerKind::conv;
    std::size_t out = 0;  // output channels (conv) or width (dense)
    std::size_t L = 3;
    ConvSpec conv{1, 1};
    std::size_t K = 0;  // atoms for A3; 0 means L²
    std::size_t pool = 2;
    Activation act = Activation::relu();

    static LayerSpec make_conv(std::size_t out, std::size_t L, ConvSpec spec, std::size_t K) {
        LayerSpec s;
        s.kind = LayerKind::conv;
        s.out = out;
        s.L = L;
        s.conv = spec;
        s.K = K;
        return s;
    }
    static LayerSpec make_dense(std::size_t out) {
        LayerSpec s;
        s.kind = LayerKind::dense;
        s.out = out;
        return s;
    }
    static LayerSpec make_pool(std::size_t k) {
        LayerSpec s;
        s.kind = LayerKind::pool;
        s.pool = k;
        return s;
    }
    static LayerSpec make_act(Activation a) {
        LayerSpec s;
        s.kind = LayerKind::nonlinearity;
        s.act = a;
        return s;
    }
};

struct NetSpec {
    Arch arch = Arch::A1;
    std::size_t in_channels = 1, in_h = 18, in_w = 18;
    std::vector<LayerSpec> layers;  // the final layer must be dense (classifier head)
    std::size_t branched_prefix = 0;  // leading conv layers that branch
    std::vector<DomainId> domains{{0, "source"}, {1, "target"}};

    std::size_t conv_count() const;
    void validate() const;

    /// Small CNN used by the toy experiments: a stride-3 3×3 conv aligned with the
    /// patch grid, a padded 3×3 conv, 2×2 pooling, a hidden dense layer and the head.
    static NetSpec toy(Arch arch, std::size_t image_size, std::size_t classes, std::size_t K,
                       std::size_t num_domains = 2);
};

template <typename T>
struct NetLayer {
    LayerSpec spec;
    bool branched = false;
    std::size_t in_c = 0, in_h = 0, in_w = 0;
    std::size_t out_c = 0, out_h = 0, out_w = 0;
    // conv (A1/unbranched): {W, b}; conv (A2): {W_d0, b_d0, W_d1, b_d1, ...}; dense: {W, b}
    std::vector<Param<T>> params;
    std::optional<DafdLayer<T>> dafd;
};

template <typename T>
struct LayerTape {
    Tensor4<T> input;
    std::vector<std::uint32_t> argmax;
    std::optional<DafdCache<T>> dafd;
};

template <typename T>
struct ForwardResult {
    int domain = 0;
    Tensor4<T> features;  // penultimate activations, (n, d, 1, 1)
    Tensor4<T> logits;    // (n, classes, 1, 1)
    std::vector<LayerTape<T>> tape;
};

template <typename T>
class Network {
public:
    Network(NetSpec spec, std::vector<NetLayer<T>> layers);

    const NetSpec& spec() const { return spec_; }
    const std::vector<NetLayer<T>>& layers() const { return layers_; }
    std::vector<NetLayer<T>>& layers() { return layers_; }
    std::size_t num_domains() const { return spec_.domains.size(); }
    std::size_t feature_dim() const;
    std::size_t num_classes() const;

    ForwardResult<T> forward(const Tensor4<T>& batch, int domain) const;

    /// Runs only the shared classifier head on (n, d, 1, 1) features.
    Tensor4<T> classify_features(const Tensor4<T>& features) const;

    /// Accumulates parameter gradients for a pass; `dfeatures` (optional) is added to the
    /// gradient flowing into the penultimate activations.
    void backward(const ForwardResult<T>& fwd, const Tensor4<T>& dlogits,
                  const Tensor4<T>* dfeatures = nullptr);

    std::vector<Param<T>*> params();
    std::vector<const Param<T>*> params() const;
    void zero_grad();

    /// Parameter count owned by `owner` (kShared or a domain index).
    std::size_t count_partition(int owner) const;
    /// Parameter count in branched conv layers owned by `owner`.
    std::size_t count_branched(int owner) const;

private:
    void check_domain(int domain) const;
    std::size_t head_index() const { return layers_.size() - 1; }

    NetSpec spec_;
    std::vector<NetLayer<T>> layers_;
};

/// Deterministic construction. Every architecture draws the same base dense
/// initialisation from `seed`; A2 draws its extra domain branches afterwards and
/// A3 factorises each base conv filter with init_from_dense.
template <typename T>
Network<T> build_network(const NetSpec& spec, std::uint64_t seed);

// ---------------------------------------------------------------------------
// MMD
// ---------------------------------------------------------------------------

template <typename T>
struct MmdResult {
    double value = 0.0;
    Tensor4<T> grad_s;
    Tensor4<T> grad_t;
};

/// Biased V-statistic estimate of squared MMD with a sum of Gaussian kernels
/// k(x, y) = Σ_σ exp(−‖x − y‖² / (2σ²)).
template <typename T>
MmdResult<T> mmd_loss(const Tensor4<T>& feat_s, const Tensor4<T>& feat_t,
                      const std::vector<double>& bandwidths);

/// Median pairwise Euclidean distance over the pooled samples.
template <typename T>
double median_pairwise_distance(const Tensor4<T>& a, const Tensor4<T>& b);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

enum class TrainMode { supervised_both, unsupervised_target };

TrainMode parse_mode(const std::string& s);
std::string to_string(TrainMode m);

struct TrainConfig {
    std::size_t epochs = 20;
    std::size_t batch_size = 32;
    double lr = 0.05;
    double momentum = 0.9;
    std::uint64_t seed = 1;
    double target_fraction = 1.0;
    TrainMode mode = TrainMode::supervised_both;
    double mmd_weight = 0.0;
    std::vector<double> mmd_bandwidths{0.5, 1.0, 2.0, 4.0};  // multiples of the median distance

    void validate() const;
};

/// Mutable training state: the MMD bandwidths are resolved once, at the first batch.
struct TrainState {
    std::vector<double> bandwidths;
    std::size_t step = 0;
};

struct StepMetrics {
    double loss_s = 0.0;
    double loss_t = 0.0;
    double mmd = 0.0;
    double grad_norm_shared = 0.0;
    std::vector<double> grad_norm_domain;  // one entry per domain
};

template <typename T>
struct Batch {
    Tensor4<T> images;
    std::vector<int> labels;  // may be empty for unlabeled target batches
};

/// Zeroes gradients and accumulates those of L = loss_s + loss_t (supervised) or
/// L = loss_s + w·MMD (unsupervised). A missing target batch gives the source-only loss.
template <typename T>
StepMetrics compute_gradients(Network<T>& net, const Batch<T>& source, const Batch<T>* target,
                              const TrainConfig& cfg, TrainState& state);

template <typename T>
void apply_sgd(Network<T>& net, const TrainConfig& cfg);

template <typename T>
StepMetrics train_step(Network<T>& net, const Batch<T>& source, const Batch<T>* target,
                       const TrainConfig& cfg, TrainState& state);

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Elementwise mean of per-domain features; batches[i] is fed to domains[i].
template <typename T>
Tensor4<T> fused_feature(const Network<T>& net, const std::vector<Tensor4<T>>& batches,
                         const std::vector<int>& domains);

struct FeatureRow {
    std::size_t sample_id = 0;
    int label = 0;
    std::string domain;
    std::vector<double> features;
};

struct EvalResult {
    double accuracy = 0.0;
    std::vector<double> per_class_accuracy;
    std::vector<FeatureRow> features;
};

/// Evaluates on one dataset per listed domain. With a single entry this is the
/// single-domain accuracy; with several aligned datasets the fused feature is
/// classified by the shared head.
template <typename T>
EvalResult evaluate(const Network<T>& net, const std::vector<const data::Dataset*>& datasets,
                    const std::vector<int>& domains, std::size_t batch_size = 128,
                    bool export_features = false);

/// Accuracy of arbitrary logits, used for the head-only evaluation path.
EvalResult score_logits(const std::vector<std::vector<double>>& logits,
                        const std::vector<int>& labels, std::size_t classes);

// ---------------------------------------------------------------------------
// Full training loop
// ---------------------------------------------------------------------------

struct EpochRecord {
    std::size_t epoch = 0;
    double mean_loss_s = 0.0;
    double mean_loss_t = 0.0;
    double mean_mmd = 0.0;
    double source_acc = 0.0;
    double target_acc = 0.0;
    double eval_mmd = 0.0;  // MMD between held-out source/target features, fixed bandwidths
};

struct FitCallbacks {
    std::function<void(std::size_t step, std::size_t epoch, const StepMetrics&)> on_step;
    std::function<void(const EpochRecord&)> on_epoch;
};

struct FitData {
    const data::Dataset* source_train = nullptr;
    const data::Dataset* target_train = nullptr;  // labeled fraction (or unlabeled pool)
    const data::Dataset* source_test = nullptr;
    const data::Dataset* target_test = nullptr;
};

struct FitResult {
    std::vector<EpochRecord> epochs;  // entry 0 is the untrained network
    TrainState state;
};

template <typename T>
FitResult fit(Network<T>& net, const FitData& data, const TrainConfig& cfg,
              const FitCallbacks& callbacks = {});

}  // namespace dafd
