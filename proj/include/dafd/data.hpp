#pragma once

// Deterministic multi-domain datasets: synthetic shapes, the patch-rotate-negate
// toy shift, photometric shifts, IDX ingestion and target-fraction splits.
// Images are stored as (n, c, h, w) in [−1, 1].

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "dafd/param.hpp"
#include "dafd/tensor.hpp"

namespace dafd::data {

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class ShapeKind { disk, square, cross, ring };

ShapeKind parse_shape(const std::string& s);
std::string to_string(ShapeKind k);

struct Dataset {
    Tensor4<double> images;
    std::vector<int> labels;
    std::size_t num_classes = 0;
    DomainId domain;
    std::string provenance;  // generator name + seed, or source file digest
    std::uint64_t seed = 0;

    std::size_t size() const { return labels.size(); }
    std::vector<std::size_t> class_counts() const;
    /// FNV-1a over image bytes and labels.
    std::uint64_t digest() const;
    Dataset subset(const std::vector<std::size_t>& indices) const;
    void validate() const;
    /// JSON manifest: generator/provenance, seed, counts, digest.
    std::string manifest_json() const;
};

/// Grayscale shapes with position/scale/intensity jitter and additive N(0, 0.05²) noise.
Dataset gen_shapes(const std::vector<ShapeKind>& classes, std::size_t n_per_class,
                   std::size_t size, std::uint64_t seed);

enum class ShiftKind { patch_rotate_negate, negate_only, photometric, custom_warp };

/// Displacement τ(u) in normalised image coordinates u ∈ [−1, 1]²; the shifted
/// image samples the source at u − τ(u).
using WarpFunction = std::function<std::array<double, 2>(double, double)>;

struct ShiftSpec {
    ShiftKind kind = ShiftKind::patch_rotate_negate;
    std::size_t patch = 3;
    double gain = 1.0;
    double offset = 0.0;
    WarpFunction warp;

    static ShiftSpec parse(const std::string& s);
    std::string str() const;
};

/// Rotates every non-overlapping patch×patch block counter-clockwise by 90°·quarter_turns.
Tensor4<double> patch_rotate(const Tensor4<double>& images, std::size_t patch, int quarter_turns);

Dataset apply_shift(const Dataset& ds, const ShiftSpec& spec, DomainId new_domain);

/// Inverse of the patch-rotate-negate shift: negate, then rotate each patch by −90°.
Dataset invert_patch_rotate_negate(const Dataset& ds, std::size_t patch, DomainId domain);

/// Filter transform that exactly undoes the toy shift for patch-aligned stride-L
/// convolution: −rot90(w) applied to each L×L kernel of a (C_out, C_in, L, L) bank.
Tensor4<double> toy_shift_filter(const Tensor4<double>& w);

// ---------------------------------------------------------------------------
// IDX
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

struct IdxFile {
    std::uint32_t magic = 0;
    std::vector<std::uint32_t> dims;
    std::vector<std::uint8_t> payload;
};

IdxFile read_idx(const std::filesystem::path& path);
void write_idx(const std::filesystem::path& path, const IdxFile& file);

/// rank-3 uint8 images → (n, 1, rows, cols) scaled by v/127.5 − 1.
Tensor4<double> parse_idx_images(const std::filesystem::path& path);
std::vector<int> parse_idx_labels(const std::filesystem::path& path);

Dataset load_idx_dataset(const std::filesystem::path& images, const std::filesystem::path& labels,
                         std::size_t num_classes = 10);

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

/// Returns (kept, held_out). Kept size is round(fraction·n); the stratified
/// variant floors per class and hands the remainder out in seeded order.
std::pair<Dataset, Dataset> split_fraction(const Dataset& ds, double fraction, std::uint64_t seed,
                                           bool stratified);

/// Same partition as split_fraction, as sorted index lists.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(
    const Dataset& ds, double fraction, std::uint64_t seed, bool stratified);

}  // namespace dafd::data
