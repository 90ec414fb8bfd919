#include "dafd/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "json.hpp"

namespace dafd::data {

ShapeKind parse_shape(const std::string& s) {
    if (s == "disk") return ShapeKind::disk;
    if (s == "square") return ShapeKind::square;
    if (s == "cross") return ShapeKind::cross;
    if (s == "ring") return ShapeKind::ring;
    throw std::invalid_argument("unknown shape class '" + s + "'");
}

std::string to_string(ShapeKind k) {
    switch (k) {
    case ShapeKind::disk: return "disk";
    case ShapeKind::square: return "square";
    case ShapeKind::cross: return "cross";
    case ShapeKind::ring: return "ring";
    }
    return "?";
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

std::vector<std::size_t> Dataset::class_counts() const {
    std::vector<std::size_t> counts(num_classes, 0);
    for (int y : labels)
        if (y >= 0 && static_cast<std::size_t>(y) < num_classes) ++counts[static_cast<std::size_t>(y)];
    return counts;
}

std::uint64_t Dataset::digest() const {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 1099511628211ull;
        }
    };
    const auto img = images.data();
    mix(img.data(), img.size() * sizeof(double));
    mix(labels.data(), labels.size() * sizeof(int));
    return h;
}

Dataset Dataset::subset(const std::vector<std::size_t>& indices) const {
    Dataset out;
    out.num_classes = num_classes;
    out.domain = domain;
    out.provenance = provenance;
    out.seed = seed;
    Shape4 s = images.shape();
    s.n = indices.size();
    out.images = Tensor4<double>(s);
    out.labels.reserve(indices.size());
    for (std::size_t k = 0; k < indices.size(); ++k) {
        const std::size_t i = indices[k];
        if (i >= size()) throw std::out_of_range("Dataset::subset index out of range");
        const auto src = images.sample(i);
        std::copy(src.begin(), src.end(), out.images.sample(k).begin());
        out.labels.push_back(labels[i]);
    }
    return out;
}

void Dataset::validate() const {
    if (images.n() != labels.size())
        throw ShapeError("dataset has " + std::to_string(images.n()) + " images but " +
                         std::to_string(labels.size()) + " labels");
    for (int y : labels)
        if (y < 0 || static_cast<std::size_t>(y) >= num_classes)
            throw std::out_of_range("dataset label " + std::to_string(y) + " outside [0, " +
                                    std::to_string(num_classes) + ")");
}

std::string Dataset::manifest_json() const {
    nlohmann::json j;
    j["generator"] = provenance;
    j["seed"] = seed;
    j["domain"] = domain.name;
    j["size"] = size();
    j["shape"] = {images.c(), images.h(), images.w()};
    j["class_counts"] = class_counts();
    std::ostringstream hex;
    hex << std::hex << digest();
    j["digest"] = hex.str();
    return j.dump(2);
}

// ---------------------------------------------------------------------------
// Synthetic shapes
// ---------------------------------------------------------------------------

Dataset gen_shapes(const std::vector<ShapeKind>& classes, std::size_t n_per_class,
                   std::size_t size, std::uint64_t seed) {
    if (size < 12 || size % 3 != 0)
        throw std::invalid_argument("gen_shapes: size must be >= 12 and divisible by 3, got " +
                                    std::to_string(size));
    if (classes.empty()) throw std::invalid_argument("gen_shapes: no classes given");

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 0.05);

    Dataset ds;
    ds.num_classes = classes.size();
    ds.provenance = "shapes(seed=" + std::to_string(seed) + ")";
    ds.seed = seed;
    ds.images = Tensor4<double>({classes.size() * n_per_class, 1, size, size});
    ds.labels.reserve(classes.size() * n_per_class);

    const double S = static_cast<double>(size);
    const double jitter = S / 18.0;
    std::size_t idx = 0;
    for (std::size_t c = 0; c < classes.size(); ++c)
        for (std::size_t k = 0; k < n_per_class; ++k, ++idx) {
            const double cy = (S - 1.0) / 2.0 + (2.0 * uni(rng) - 1.0) * jitter;
            const double cx = (S - 1.0) / 2.0 + (2.0 * uni(rng) - 1.0) * jitter;
            const double r = 0.3 * S * (0.85 + 0.3 * uni(rng));
            const double level = 0.6 + 0.4 * uni(rng);
            for (std::size_t i = 0; i < size; ++i)
                for (std::size_t j = 0; j < size; ++j) {
                    const double dy = static_cast<double>(i) - cy;
                    const double dx = static_cast<double>(j) - cx;
                    const double d = std::hypot(dx, dy);
                    bool on = false;
                    switch (classes[c]) {
                    case ShapeKind::disk: on = d <= r; break;
                    case ShapeKind::square: on = std::max(std::abs(dx), std::abs(dy)) <= 0.8 * r; break;
                    case ShapeKind::cross:
                        on = (std::abs(dx) <= 0.3 * r && std::abs(dy) <= r) ||
                             (std::abs(dy) <= 0.3 * r && std::abs(dx) <= r);
                        break;
                    case ShapeKind::ring: on = d <= r && d >= 0.55 * r; break;
                    }
                    const double v = (on ? level : 0.0) + noise(rng);
                    ds.images(idx, 0, i, j) = std::clamp(v, -1.0, 1.0);
                }
            ds.labels.push_back(static_cast<int>(c));
        }
    return ds;
}

// ---------------------------------------------------------------------------
// Shifts
// ---------------------------------------------------------------------------

ShiftSpec ShiftSpec::parse(const std::string& s) {
    ShiftSpec spec;
    if (s == "patch-rotate-negate") {
        spec.kind = ShiftKind::patch_rotate_negate;
    } else if (s == "negate-only") {
        spec.kind = ShiftKind::negate_only;
    } else if (s.rfind("photometric", 0) == 0) {
        spec.kind = ShiftKind::photometric;
        const auto colon = s.find(':');
        if (colon != std::string::npos) {
            const auto comma = s.find(',', colon);
            if (comma == std::string::npos)
                throw std::invalid_argument("photometric shift expects 'photometric:gain,offset'");
            spec.gain = std::stod(s.substr(colon + 1, comma - colon - 1));
            spec.offset = std::stod(s.substr(comma + 1));
        }
    } else if (s.rfind("custom-warp:", 0) == 0) {
        // custom-warp:rotation:<degrees> | custom-warp:dilation:<scale>
        spec.kind = ShiftKind::custom_warp;
        const std::string rest = s.substr(12);
        const auto colon = rest.find(':');
        if (colon == std::string::npos) throw std::invalid_argument("malformed shift '" + s + "'");
        const std::string what = rest.substr(0, colon);
        const double v = std::stod(rest.substr(colon + 1));
        if (what == "rotation") {
            const double t = v * M_PI / 180.0, c = std::cos(t), sn = std::sin(t);
            spec.warp = [c, sn](double x, double y) {
                return std::array<double, 2>{x - (c * x - sn * y), y - (sn * x + c * y)};
            };
        } else if (what == "dilation") {
            spec.warp = [v](double x, double y) {
                return std::array<double, 2>{(1.0 - v) * x, (1.0 - v) * y};
            };
        } else {
            throw std::invalid_argument("unknown custom warp '" + what + "'");
        }
    } else {
        throw std::invalid_argument("unknown shift kind '" + s + "'");
    }
    return spec;
}

std::string ShiftSpec::str() const {
    switch (kind) {
    case ShiftKind::patch_rotate_negate: return "patch-rotate-negate";
    case ShiftKind::negate_only: return "negate-only";
    case ShiftKind::photometric:
        return "photometric:" + std::to_string(gain) + "," + std::to_string(offset);
    case ShiftKind::custom_warp: return "custom-warp";
    }
    return "?";
}

Tensor4<double> patch_rotate(const Tensor4<double>& images, std::size_t patch, int quarter_turns) {
    if (patch == 0 || images.h() % patch != 0 || images.w() % patch != 0)
        throw ShapeError("patch size " + std::to_string(patch) + " does not divide image " +
                         std::to_string(images.h()) + "x" + std::to_string(images.w()));
    const int turns = ((quarter_turns % 4) + 4) % 4;
    Tensor4<double> out = images;
    const std::size_t p = patch;
    std::vector<double> block(p * p), rotated(p * p);
    for (std::size_t n = 0; n < images.n(); ++n)
        for (std::size_t c = 0; c < images.c(); ++c)
            for (std::size_t bi = 0; bi < images.h(); bi += p)
                for (std::size_t bj = 0; bj < images.w(); bj += p) {
                    for (std::size_t i = 0; i < p; ++i)
                        for (std::size_t j = 0; j < p; ++j) block[i * p + j] = images(n, c, bi + i, bj + j);
                    for (int t = 0; t < turns; ++t) {
                        // counter-clockwise: out[i][j] = in[j][p-1-i]
                        for (std::size_t i = 0; i < p; ++i)
                            for (std::size_t j = 0; j < p; ++j)
                                rotated[i * p + j] = block[j * p + (p - 1 - i)];
                        block.swap(rotated);
                    }
                    for (std::size_t i = 0; i < p; ++i)
                        for (std::size_t j = 0; j < p; ++j) out(n, c, bi + i, bj + j) = block[i * p + j];
                }
    return out;
}

namespace {

Tensor4<double> bilinear_warp(const Tensor4<double>& images, const WarpFunction& tau) {
    Tensor4<double> out(images.shape());
    const auto H = static_cast<double>(images.h());
    const auto W = static_cast<double>(images.w());
    for (std::size_t i = 0; i < images.h(); ++i)
        for (std::size_t j = 0; j < images.w(); ++j) {
            const double uy = -1.0 + (static_cast<double>(i) + 0.5) * 2.0 / H;
            const double ux = -1.0 + (static_cast<double>(j) + 0.5) * 2.0 / W;
            const auto t = tau(ux, uy);
            // back to fractional pixel indices
            const double fy = (uy - t[1] + 1.0) * H / 2.0 - 0.5;
            const double fx = (ux - t[0] + 1.0) * W / 2.0 - 0.5;
            const double y0 = std::floor(fy), x0 = std::floor(fx);
            const double ay = fy - y0, ax = fx - x0;
            for (std::size_t n = 0; n < images.n(); ++n)
                for (std::size_t c = 0; c < images.c(); ++c) {
                    auto at = [&](double yy, double xx) {
                        if (yy < 0 || xx < 0 || yy >= H || xx >= W) return 0.0;
                        return images(n, c, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
                    };
                    out(n, c, i, j) = (1 - ay) * ((1 - ax) * at(y0, x0) + ax * at(y0, x0 + 1)) +
                                      ay * ((1 - ax) * at(y0 + 1, x0) + ax * at(y0 + 1, x0 + 1));
                }
        }
    return out;
}

}  // namespace

Dataset apply_shift(const Dataset& ds, const ShiftSpec& spec, DomainId new_domain) {
    Dataset out = ds;
    out.domain = new_domain;
    out.provenance = ds.provenance + "+" + spec.str();
    switch (spec.kind) {
    case ShiftKind::patch_rotate_negate: {
        out.images = patch_rotate(ds.images, spec.patch, 1);
        for (auto& v : out.images.data()) v = -v;
        break;
    }
    case ShiftKind::negate_only:
        for (auto& v : out.images.data()) v = -v;
        break;
    case ShiftKind::photometric:
        for (auto& v : out.images.data()) v = std::clamp(spec.gain * v + spec.offset, -1.0, 1.0);
        break;
    case ShiftKind::custom_warp:
        if (!spec.warp) throw std::invalid_argument("custom-warp shift without a displacement");
        out.images = bilinear_warp(ds.images, spec.warp);
        break;
    }
    return out;
}

Dataset invert_patch_rotate_negate(const Dataset& ds, std::size_t patch, DomainId domain) {
    Dataset out = ds;
    out.domain = domain;
    for (auto& v : out.images.data()) v = -v;
    out.images = patch_rotate(out.images, patch, -1);
    return out;
}

Tensor4<double> toy_shift_filter(const Tensor4<double>& w) {
    if (w.h() != w.w()) throw ShapeError("toy_shift_filter: kernels must be square");
    Tensor4<double> out = patch_rotate(w, w.h(), 1);
    for (auto& v : out.data()) v = -v;
    return out;
}

// ---------------------------------------------------------------------------
// IDX
// ---------------------------------------------------------------------------

namespace {

std::uint32_t read_be32(const unsigned char* p) {
    return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
           (static_cast<std::uint32_t>(p[2]) << 8) | static_cast<std::uint32_t>(p[3]);
}

void write_be32(std::ostream& os, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::string hex32(std::uint32_t v) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "0x%08X", v);
    return buf;
}

}  // namespace

IdxFile read_idx(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open IDX file " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < 4) throw FormatError(path.string() + ": file too short for IDX magic");

    IdxFile f;
    f.magic = read_be32(bytes.data());
    if (f.magic != kIdxImagesMagic && f.magic != kIdxLabelsMagic)
        throw FormatError(path.string() + ": unsupported IDX magic " + hex32(f.magic) +
                          " (expected 0x00000803 images or 0x00000801 labels)");
    const std::size_t rank = f.magic & 0xFF;
    const std::size_t header = 4 + 4 * rank;
    if (bytes.size() < header)
        throw FormatError(path.string() + ": truncated IDX header, expected " + std::to_string(header) +
                          " bytes, got " + std::to_string(bytes.size()));
    std::uint64_t expected = 1;
    for (std::size_t d = 0; d < rank; ++d) {
        const std::uint32_t dim = read_be32(bytes.data() + 4 + 4 * d);
        f.dims.push_back(dim);
        if (dim != 0 && expected > (std::uint64_t{1} << 40) / dim)
            throw FormatError(path.string() + ": IDX dimension product overflows");
        expected *= dim;
    }
    const std::uint64_t actual = bytes.size() - header;
    if (actual != expected)
        throw FormatError(path.string() + (actual < expected ? ": truncated" : ": oversized") +
                          " IDX payload, expected " + std::to_string(expected) + " bytes, got " +
                          std::to_string(actual));
    f.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(header), bytes.end());
    return f;
}

void write_idx(const std::filesystem::path& path, const IdxFile& file) {
    const std::size_t rank = file.magic & 0xFF;
    if (file.dims.size() != rank)
        throw FormatError("write_idx: magic " + hex32(file.magic) + " implies rank " +
                          std::to_string(rank) + " but " + std::to_string(file.dims.size()) +
                          " dims given");
    std::uint64_t expected = 1;
    for (auto d : file.dims) expected *= d;
    if (expected != file.payload.size()) throw FormatError("write_idx: payload length mismatch");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot create IDX file " + path.string());
    write_be32(out, file.magic);
    for (auto d : file.dims) write_be32(out, d);
    out.write(reinterpret_cast<const char*>(file.payload.data()),
              static_cast<std::streamsize>(file.payload.size()));
}

Tensor4<double> parse_idx_images(const std::filesystem::path& path) {
    const IdxFile f = read_idx(path);
    if (f.magic != kIdxImagesMagic)
        throw FormatError(path.string() + ": expected image magic 0x00000803, got " + hex32(f.magic));
    Tensor4<double> t({f.dims[0], 1, f.dims[1], f.dims[2]});
    for (std::size_t i = 0; i < f.payload.size(); ++i) t[i] = f.payload[i] / 127.5 - 1.0;
    return t;
}

std::vector<int> parse_idx_labels(const std::filesystem::path& path) {
    const IdxFile f = read_idx(path);
    if (f.magic != kIdxLabelsMagic)
        throw FormatError(path.string() + ": expected label magic 0x00000801, got " + hex32(f.magic));
    return {f.payload.begin(), f.payload.end()};
}

Dataset load_idx_dataset(const std::filesystem::path& images, const std::filesystem::path& labels,
                         std::size_t num_classes) {
    Dataset ds;
    ds.images = parse_idx_images(images);
    ds.labels = parse_idx_labels(labels);
    ds.num_classes = num_classes;
    ds.validate();
    std::ostringstream os;
    os << "idx(" << images.filename().string() << ")";
    ds.provenance = os.str();
    std::ostringstream hex;
    hex << std::hex << ds.digest();
    ds.provenance += "#" + hex.str();
    return ds;
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(
    const Dataset& ds, double fraction, std::uint64_t seed, bool stratified) {
    if (!(fraction > 0.0 && fraction <= 1.0))
        throw std::invalid_argument("split fraction must lie in (0, 1], got " + std::to_string(fraction));
    const std::size_t n = ds.size();
    const auto total = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
    std::mt19937_64 rng(seed);
    std::vector<char> keep(n, 0);

    if (!stratified) {
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t k = 0; k < total; ++k) keep[order[k]] = 1;
    } else {
        std::vector<std::vector<std::size_t>> by_class(ds.num_classes);
        for (std::size_t i = 0; i < n; ++i) by_class.at(static_cast<std::size_t>(ds.labels[i])).push_back(i);
        for (auto& members : by_class) std::shuffle(members.begin(), members.end(), rng);
        std::vector<std::size_t> quota(ds.num_classes);
        std::size_t assigned = 0;
        for (std::size_t c = 0; c < ds.num_classes; ++c) {
            quota[c] = static_cast<std::size_t>(
                std::floor(fraction * static_cast<double>(by_class[c].size()) + 1e-9));
            assigned += quota[c];
        }
        std::vector<std::size_t> class_order(ds.num_classes);
        std::iota(class_order.begin(), class_order.end(), 0);
        std::shuffle(class_order.begin(), class_order.end(), rng);
        for (std::size_t r = 0; assigned < total && r < class_order.size(); ++r) {
            const std::size_t c = class_order[r];
            if (quota[c] < by_class[c].size()) {
                ++quota[c];
                ++assigned;
            }
        }
        for (std::size_t c = 0; c < ds.num_classes; ++c) {
            if (!by_class[c].empty() && quota[c] == 0)
                throw std::invalid_argument("stratified split at fraction " + std::to_string(fraction) +
                                            " keeps no samples of class " + std::to_string(c));
            for (std::size_t k = 0; k < quota[c]; ++k) keep[by_class[c][k]] = 1;
        }
    }

    std::pair<std::vector<std::size_t>, std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < n; ++i) (keep[i] ? out.first : out.second).push_back(i);
    return out;
}

std::pair<Dataset, Dataset> split_fraction(const Dataset& ds, double fraction, std::uint64_t seed,
                                           bool stratified) {
    auto [kept, held] = split_indices(ds, fraction, seed, stratified);
    return {ds.subset(kept), ds.subset(held)};
}

}  // namespace dafd::data
