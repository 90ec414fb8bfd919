#pragma once

// Parameter and flop accounting for the three architectures.
//
//   regular conv, per domain:   params C'·C·L² (+C bias), flops W²·C'·C·(2L² + 1)
//   DAFD conv, D domains:       params K·(C'·C + D·L²),   flops W²·C'·2K·(L² + C)
//
// The multiply-add counts (W²·C'·C·L² and W²·C'·K·(L² + C)) are reported alongside,
// since published network-level "flop" figures usually count one multiply-add as one.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace dafd {

struct LayerCostSpec {
    std::uint64_t c_in = 0;
    std::uint64_t c_out = 0;
    std::uint64_t L = 3;
    std::uint64_t W = 0;  // output resolution
    std::uint64_t K = 0;

    void validate() const;
};

struct LayerCost {
    LayerCostSpec spec;
    std::uint64_t params_regular = 0;         // D·C'·C·L²
    std::uint64_t params_dafd = 0;            // K·(C'·C + D·L²)
    std::uint64_t flops_regular_per_domain = 0;
    std::uint64_t flops_dafd_per_domain = 0;
    std::uint64_t macs_regular_per_domain = 0;
    std::uint64_t macs_dafd_per_domain = 0;
    std::uint64_t extra_regular_per_domain = 0;  // C'·C·L² + C (filters and bias)
    std::uint64_t extra_dafd_per_domain = 0;     // K·L²
    bool dafd_cheaper = false;                   // 2K(L² + C) < C(2L² + 1)
};

struct CostReport {
    std::uint64_t D = 1;
    std::vector<LayerCost> layers;
    LayerCost total;  // spec fields unused

    std::string to_json() const;
    /// Aligned two-row comparison (Parameters / Flops) for one extra domain.
    std::string to_table() const;
};

CostReport count_costs(const std::vector<LayerCostSpec>& layers, std::uint64_t D);

/// The 13 conv layers of VGG-16 at the given input size, pooled after blocks 1–4.
std::vector<LayerCostSpec> vgg16_layers(std::uint64_t K, std::uint64_t input_size = 224);
CostReport vgg16_report(std::uint64_t K, std::uint64_t input_size = 224, std::uint64_t D = 2);

/// One layer per line: "c_in c_out L W [K]"; '#' starts a comment. Errors carry line numbers.
std::vector<LayerCostSpec> parse_layer_specs(const std::string& text, std::uint64_t default_K);
std::vector<LayerCostSpec> read_layer_spec_file(const std::filesystem::path& path, std::uint64_t default_K);

}  // namespace dafd
