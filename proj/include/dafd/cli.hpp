#pragma once

// Config-driven commands behind the dafd_cli executable.
//
// Config files are line based:
//
//   # comment
//   [train]
//   epochs = 10
//
// Every key has a default; unknown sections or keys are errors that carry the line
// number. The resolved config (defaults applied, overrides merged) is written to the
// output directory as resolved_config.ini.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dafd/branch_net.hpp"
#include "dafd/theory.hpp"

namespace dafd::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kVerifyFailed = 2, kNumericAbort = 3 };

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

struct DataSection {
    std::vector<data::ShapeKind> classes{data::ShapeKind::disk, data::ShapeKind::square, data::ShapeKind::cross,
                                         data::ShapeKind::ring};
    std::size_t image_size = 18;
    std::size_t source_per_class = 500;
    std::size_t target_pool_per_class = 1000;
    std::size_t test_per_class = 250;
    std::string shift = "patch-rotate-negate";
    bool stratified = true;
    // optional IDX inputs; when set they replace the generated source/target training sets
    std::string source_images, source_labels, target_images, target_labels;
};

struct ModelSection {
    Arch arch = Arch::A3;
    std::size_t k = 6;
};

struct TrainSection {
    std::size_t epochs = 10;
    std::size_t batch_size = 32;
    double lr = 0.01;
    double momentum = 0.9;
    std::uint64_t seed = 1;
    double target_fraction = 0.005;
    TrainMode mode = TrainMode::supervised_both;
    double mmd_weight = 0.3;
    std::vector<double> mmd_bandwidths{0.5, 1.0, 2.0, 4.0};
    std::string precision = "float";  // float | double
    bool export_features = false;
    bool checkpoint = true;
};

struct VerifySection {
    std::string check = "lemma1";  // lemma1 | nonexpansive | norm-drift | theorem1 | atom-implementability | fact1
    std::string field = "rotation";  // rotation | smooth-odd | dilation | zero
    std::vector<double> thetas_deg{2.0, 5.0, 10.0};
    std::vector<double> amplitudes{0.02, 0.05};
    std::vector<double> scales{0.9, 0.95, 1.05};
    std::vector<std::size_t> resolutions{128, 256};
    std::size_t seeds = 10;
    std::vector<std::size_t> layers{1, 2, 3};
    double j = -2.5;        // filter scale for lemma1 and the single-filter checks
    double stack_j = -3.0;  // theorem1 scale for one or two layer pairs
    double j_deep = -4.0;   // theorem1 scale for three or more layer pairs
    double signal_window = 0.5;
    double stack_window = 0.35;
    std::string feature_filters = "rotated-generative";  // rotated-generative | independent
    std::string filter_warp = "bilinear";                // lemma1: bilinear | analytic
    std::string stack_filter_warp = "analytic";          // theorem1: analytic | bilinear
    std::string activation = "relu";
    double bias = 0.0;
    std::size_t atoms = 3;
};

struct CostSection {
    std::string preset = "vgg16";
    std::string layer_file;
    std::size_t k = 6;
    std::size_t domains = 2;
    std::size_t input_size = 224;
};

struct CompareSection {
    std::vector<Arch> archs{Arch::A1, Arch::A2, Arch::A3};
    std::vector<double> fractions{0.005};
    std::vector<std::uint64_t> seeds{1, 2, 3};
};

struct RunConfig {
    DataSection data;
    ModelSection model;
    TrainSection train;
    VerifySection verify;
    CostSection cost;
    CompareSection compare;
    std::size_t threads = 1;

    /// Applies one `section.key = value` assignment; throws ConfigError.
    void set(const std::string& section, const std::string& key, const std::string& value);
    /// All keys with their current values, in file order.
    std::string to_ini() const;
};

/// Parses config text on top of the defaults. `origin` names the source in errors.
RunConfig parse_config(const std::string& text, const std::string& origin = "config");
RunConfig load_config(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

// Layout (all integers little-endian):
//   "DAFDCKPT" | u32 version | u32 scalar bytes (4 or 8) | u32 block count
//   per block: u32 name length | name | i32 owner | 4 × u64 shape | values
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Network<T>& net);
/// Restores values into a network of the same architecture; throws on any mismatch.
template <typename T>
void load_checkpoint(const std::filesystem::path& path, Network<T>& net);

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

struct TrainOutcome {
    std::vector<EpochRecord> epochs;
    double source_acc = 0.0;
    double target_acc = 0.0;
    double fused_acc = 0.0;
    std::size_t labeled_target = 0;
};

/// Builds the datasets and network described by `cfg` and trains. When `out` is set the
/// run artifacts are written there.
TrainOutcome run_train(const RunConfig& cfg, const std::optional<std::filesystem::path>& out);

/// Runs the configured sweep; one report per configuration (rejected points included).
std::vector<theory::BoundReport> run_verify(const RunConfig& cfg);

std::string features_csv_header(std::size_t dim);

int cmd_train(const RunConfig& cfg, const std::filesystem::path& out, std::ostream& log);
int cmd_verify(const RunConfig& cfg, const std::filesystem::path& out, std::ostream& log);
int cmd_cost(const RunConfig& cfg, const std::optional<std::filesystem::path>& out, std::ostream& log);
int cmd_compare(const RunConfig& cfg, const std::filesystem::path& out, std::ostream& log);

std::string version();

}  // namespace dafd::cli
