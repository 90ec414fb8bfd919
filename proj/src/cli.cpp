#include "dafd/cli.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <iomanip>
#include <random>
#include <sstream>
#include <thread>

#include "dafd/cost_model.hpp"
#include "json.hpp"

#ifndef DAFD_VERSION
#define DAFD_VERSION "unknown"
#endif

namespace dafd::cli {

namespace fs = std::filesystem;
using nlohmann::json;

std::string version() { return DAFD_VERSION; }

// ---------------------------------------------------------------------------
// Value parsing
// ---------------------------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    for (std::string item; std::getline(ss, item, ',');) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

double to_double(const std::string& s) {
    double v = 0.0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size() || !std::isfinite(v))
        throw ConfigError("'" + s + "' is not a number");
    return v;
}

std::uint64_t to_uint(const std::string& s) {
    std::uint64_t v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size())
        throw ConfigError("'" + s + "' is not a non-negative integer");
    return v;
}

bool to_bool(const std::string& s) {
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    throw ConfigError("'" + s + "' is not a boolean");
}

std::string num(double v) {
    char buf[64];
    const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    (void)ec;
    return std::string(buf, p);
}

std::string g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

template <typename T, typename F>
std::string join(const std::vector<T>& v, F f) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += f(v[i]);
    }
    return out;
}

template <typename T, typename F>
std::vector<T> parse_vec(const std::string& s, F f) {
    std::vector<T> out;
    for (const auto& item : split_list(s)) out.push_back(f(item));
    if (out.empty()) throw ConfigError("empty list");
    return out;
}

std::string one_of(const std::string& v, std::initializer_list<const char*> allowed) {
    for (const char* a : allowed)
        if (v == a) return v;
    std::string msg = "'" + v + "' is not one of";
    for (const char* a : allowed) msg += std::string(" ") + a;
    throw ConfigError(msg);
}

struct Entry {
    const char* section;
    const char* key;
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

#define DAFD_SIZE(sec, field, name)                                                              \
    Entry {                                                                                      \
        #sec, name, [](RunConfig& c, const std::string& v) { c.sec.field = to_uint(v); },        \
            [](const RunConfig& c) { return std::to_string(c.sec.field); }                       \
    }
#define DAFD_DOUBLE(sec, field, name)                                                            \
    Entry {                                                                                      \
        #sec, name, [](RunConfig& c, const std::string& v) { c.sec.field = to_double(v); },      \
            [](const RunConfig& c) { return num(c.sec.field); }                                  \
    }
#define DAFD_BOOL(sec, field, name)                                                              \
    Entry {                                                                                      \
        #sec, name, [](RunConfig& c, const std::string& v) { c.sec.field = to_bool(v); },        \
            [](const RunConfig& c) { return std::string(c.sec.field ? "true" : "false"); }       \
    }
#define DAFD_STRING(sec, field, name)                                                            \
    Entry {                                                                                      \
        #sec, name, [](RunConfig& c, const std::string& v) { c.sec.field = v; },                 \
            [](const RunConfig& c) { return c.sec.field; }                                       \
    }

const std::vector<Entry>& entries() {
    static const std::vector<Entry> table = {
        {"run", "threads", [](RunConfig& c, const std::string& v) { c.threads = std::max<std::uint64_t>(1, to_uint(v)); },
         [](const RunConfig& c) { return std::to_string(c.threads); }},

        {"data", "classes",
         [](RunConfig& c, const std::string& v) {
             c.data.classes = parse_vec<data::ShapeKind>(v, [](const std::string& s) { return data::parse_shape(s); });
         },
         [](const RunConfig& c) {
             return join(c.data.classes, [](data::ShapeKind k) { return data::to_string(k); });
         }},
        DAFD_SIZE(data, image_size, "image_size"),
        DAFD_SIZE(data, source_per_class, "source_per_class"),
        DAFD_SIZE(data, target_pool_per_class, "target_pool_per_class"),
        DAFD_SIZE(data, test_per_class, "test_per_class"),
        {"data", "shift",
         [](RunConfig& c, const std::string& v) {
             data::ShiftSpec::parse(v);
             c.data.shift = v;
         },
         [](const RunConfig& c) { return c.data.shift; }},
        DAFD_BOOL(data, stratified, "stratified"),
        DAFD_STRING(data, source_images, "source_images"),
        DAFD_STRING(data, source_labels, "source_labels"),
        DAFD_STRING(data, target_images, "target_images"),
        DAFD_STRING(data, target_labels, "target_labels"),

        {"model", "arch", [](RunConfig& c, const std::string& v) { c.model.arch = parse_arch(v); },
         [](const RunConfig& c) { return to_string(c.model.arch); }},
        DAFD_SIZE(model, k, "k"),

        DAFD_SIZE(train, epochs, "epochs"),
        DAFD_SIZE(train, batch_size, "batch_size"),
        DAFD_DOUBLE(train, lr, "lr"),
        DAFD_DOUBLE(train, momentum, "momentum"),
        DAFD_SIZE(train, seed, "seed"),
        DAFD_DOUBLE(train, target_fraction, "target_fraction"),
        {"train", "mode", [](RunConfig& c, const std::string& v) { c.train.mode = parse_mode(v); },
         [](const RunConfig& c) { return to_string(c.train.mode); }},
        DAFD_DOUBLE(train, mmd_weight, "mmd_weight"),
        {"train", "mmd_bandwidths",
         [](RunConfig& c, const std::string& v) { c.train.mmd_bandwidths = parse_vec<double>(v, to_double); },
         [](const RunConfig& c) { return join(c.train.mmd_bandwidths, num); }},
        {"train", "precision",
         [](RunConfig& c, const std::string& v) { c.train.precision = one_of(v, {"float", "double"}); },
         [](const RunConfig& c) { return c.train.precision; }},
        DAFD_BOOL(train, export_features, "export_features"),
        DAFD_BOOL(train, checkpoint, "checkpoint"),

        {"verify", "check",
         [](RunConfig& c, const std::string& v) {
             c.verify.check =
                 one_of(v, {"lemma1", "nonexpansive", "norm-drift", "theorem1", "atom-implementability", "fact1"});
         },
         [](const RunConfig& c) { return c.verify.check; }},
        {"verify", "field",
         [](RunConfig& c, const std::string& v) {
             c.verify.field = one_of(v, {"rotation", "smooth-odd", "dilation", "zero"});
         },
         [](const RunConfig& c) { return c.verify.field; }},
        {"verify", "thetas_deg",
         [](RunConfig& c, const std::string& v) { c.verify.thetas_deg = parse_vec<double>(v, to_double); },
         [](const RunConfig& c) { return join(c.verify.thetas_deg, num); }},
        {"verify", "amplitudes",
         [](RunConfig& c, const std::string& v) { c.verify.amplitudes = parse_vec<double>(v, to_double); },
         [](const RunConfig& c) { return join(c.verify.amplitudes, num); }},
        {"verify", "scales",
         [](RunConfig& c, const std::string& v) { c.verify.scales = parse_vec<double>(v, to_double); },
         [](const RunConfig& c) { return join(c.verify.scales, num); }},
        {"verify", "resolutions",
         [](RunConfig& c, const std::string& v) {
             c.verify.resolutions = parse_vec<std::size_t>(v, [](const std::string& s) { return to_uint(s); });
         },
         [](const RunConfig& c) {
             return join(c.verify.resolutions, [](std::size_t n) { return std::to_string(n); });
         }},
        DAFD_SIZE(verify, seeds, "seeds"),
        {"verify", "layers",
         [](RunConfig& c, const std::string& v) {
             c.verify.layers = parse_vec<std::size_t>(v, [](const std::string& s) { return to_uint(s); });
         },
         [](const RunConfig& c) { return join(c.verify.layers, [](std::size_t n) { return std::to_string(n); }); }},
        DAFD_DOUBLE(verify, j, "j"),
        DAFD_DOUBLE(verify, stack_j, "stack_j"),
        DAFD_DOUBLE(verify, j_deep, "j_deep"),
        DAFD_DOUBLE(verify, signal_window, "signal_window"),
        DAFD_DOUBLE(verify, stack_window, "stack_window"),
        {"verify", "feature_filters",
         [](RunConfig& c, const std::string& v) {
             c.verify.feature_filters = one_of(v, {"rotated-generative", "independent"});
         },
         [](const RunConfig& c) { return c.verify.feature_filters; }},
        {"verify", "filter_warp",
         [](RunConfig& c, const std::string& v) { c.verify.filter_warp = one_of(v, {"analytic", "bilinear"}); },
         [](const RunConfig& c) { return c.verify.filter_warp; }},
        {"verify", "stack_filter_warp",
         [](RunConfig& c, const std::string& v) {
             c.verify.stack_filter_warp = one_of(v, {"analytic", "bilinear"});
         },
         [](const RunConfig& c) { return c.verify.stack_filter_warp; }},
        {"verify", "activation",
         [](RunConfig& c, const std::string& v) {
             parse_activation(v);
             c.verify.activation = v;
         },
         [](const RunConfig& c) { return c.verify.activation; }},
        DAFD_DOUBLE(verify, bias, "bias"),
        DAFD_SIZE(verify, atoms, "atoms"),

        DAFD_STRING(cost, preset, "preset"),
        DAFD_STRING(cost, layer_file, "layer_file"),
        DAFD_SIZE(cost, k, "k"),
        DAFD_SIZE(cost, domains, "domains"),
        DAFD_SIZE(cost, input_size, "input_size"),

        {"compare", "archs",
         [](RunConfig& c, const std::string& v) { c.compare.archs = parse_vec<Arch>(v, parse_arch); },
         [](const RunConfig& c) { return join(c.compare.archs, [](Arch a) { return to_string(a); }); }},
        {"compare", "fractions",
         [](RunConfig& c, const std::string& v) { c.compare.fractions = parse_vec<double>(v, to_double); },
         [](const RunConfig& c) { return join(c.compare.fractions, num); }},
        {"compare", "seeds",
         [](RunConfig& c, const std::string& v) {
             c.compare.seeds = parse_vec<std::uint64_t>(v, [](const std::string& s) { return to_uint(s); });
         },
         [](const RunConfig& c) {
             return join(c.compare.seeds, [](std::uint64_t n) { return std::to_string(n); });
         }},
    };
    return table;
}

#undef DAFD_SIZE
#undef DAFD_DOUBLE
#undef DAFD_BOOL
#undef DAFD_STRING

}  // namespace

void RunConfig::set(const std::string& section, const std::string& key, const std::string& value) {
    bool known_section = false;
    for (const auto& e : entries()) {
        if (section != e.section) continue;
        known_section = true;
        if (key != e.key) continue;
        try {
            e.set(*this, value);
        } catch (const ConfigError& err) {
            throw ConfigError(section + "." + key + ": " + err.what());
        } catch (const std::exception& err) {
            throw ConfigError(section + "." + key + ": " + err.what());
        }
        return;
    }
    if (!known_section) throw ConfigError("unknown section [" + section + "]");
    throw ConfigError("unknown key '" + key + "' in section [" + section + "]");
}

std::string RunConfig::to_ini() const {
    std::ostringstream os;
    std::string current;
    for (const auto& e : entries()) {
        if (current != e.section) {
            if (!current.empty()) os << "\n";
            current = e.section;
            os << "[" << current << "]\n";
        }
        os << e.key << " = " << e.get(*this) << "\n";
    }
    return os.str();
}

RunConfig parse_config(const std::string& text, const std::string& origin) {
    RunConfig cfg;
    std::istringstream in(text);
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string where = origin + ":" + std::to_string(lineno) + ": ";
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError(where + "unterminated section header");
            section = trim(line.substr(1, line.size() - 2));
            const bool known = std::any_of(entries().begin(), entries().end(),
                                           [&](const Entry& e) { return section == e.section; });
            if (!known) throw ConfigError(where + "unknown section [" + section + "]");
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
        if (section.empty()) throw ConfigError(where + "key outside of any [section]");
        try {
            cfg.set(section, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        } catch (const ConfigError& e) {
            throw ConfigError(where + e.what());
        }
    }
    return cfg;
}

RunConfig load_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), path.string());
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_uint(std::istream& is, int bytes, const std::string& what) {
    unsigned char b[8] = {};
    if (!is.read(reinterpret_cast<char*>(b), bytes)) throw data::FormatError("checkpoint truncated reading " + what);
    std::uint64_t v = 0;
    for (int i = bytes - 1; i >= 0; --i) v = (v << 8) | b[i];
    return v;
}

template <typename T>
void put_value(std::ostream& os, T v) {
    if constexpr (sizeof(T) == 4) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        put_u32(os, bits);
    } else {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        put_u64(os, bits);
    }
}

}  // namespace

template <typename T>
void save_checkpoint(const fs::path& path, const Network<T>& net) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write checkpoint " + path.string());
    const auto params = net.params();
    os.write("DAFDCKPT", 8);
    put_u32(os, kCheckpointVersion);
    put_u32(os, sizeof(T));
    put_u32(os, static_cast<std::uint32_t>(params.size()));
    for (const auto* p : params) {
        put_u32(os, static_cast<std::uint32_t>(p->name.size()));
        os.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
        put_u32(os, static_cast<std::uint32_t>(p->owner));
        for (auto d : {p->shape.n, p->shape.c, p->shape.h, p->shape.w}) put_u64(os, d);
        for (T v : p->value) put_value(os, v);
    }
    if (!os) throw std::runtime_error("error writing checkpoint " + path.string());
}

template <typename T>
void load_checkpoint(const fs::path& path, Network<T>& net) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
    char magic[8];
    if (!is.read(magic, 8) || std::string(magic, 8) != "DAFDCKPT")
        throw data::FormatError(path.string() + ": not a checkpoint file");
    const auto ver = get_uint(is, 4, "version");
    if (ver != kCheckpointVersion)
        throw data::FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(ver));
    const auto width = get_uint(is, 4, "scalar width");
    if (width != sizeof(T))
        throw data::FormatError(path.string() + ": checkpoint holds " + std::to_string(width) +
                                "-byte values, network uses " + std::to_string(sizeof(T)));
    auto params = net.params();
    const auto count = get_uint(is, 4, "block count");
    if (count != params.size())
        throw data::FormatError(path.string() + ": " + std::to_string(count) + " blocks, network has " +
                                std::to_string(params.size()));
    for (auto* p : params) {
        const auto len = get_uint(is, 4, "name length");
        std::string name(len, '\0');
        if (!is.read(name.data(), static_cast<std::streamsize>(len))) throw data::FormatError("checkpoint truncated");
        if (name != p->name) throw data::FormatError("checkpoint block '" + name + "' where '" + p->name + "' expected");
        const auto owner = static_cast<std::int32_t>(get_uint(is, 4, "owner"));
        Shape4 s{get_uint(is, 8, "shape"), get_uint(is, 8, "shape"), get_uint(is, 8, "shape"), get_uint(is, 8, "shape")};
        if (owner != p->owner || !(s == p->shape))
            throw data::FormatError("checkpoint block '" + name + "' has a different owner or shape");
        for (T& v : p->value) {
            const auto bits = get_uint(is, sizeof(T), name);
            if constexpr (sizeof(T) == 4) {
                const auto b32 = static_cast<std::uint32_t>(bits);
                std::memcpy(&v, &b32, 4);
            } else {
                std::memcpy(&v, &bits, 8);
            }
        }
    }
}

template void save_checkpoint(const fs::path&, const Network<float>&);
template void save_checkpoint(const fs::path&, const Network<double>&);
template void load_checkpoint(const fs::path&, Network<float>&);
template void load_checkpoint(const fs::path&, Network<double>&);

// ---------------------------------------------------------------------------
// Train
// ---------------------------------------------------------------------------

std::string features_csv_header(std::size_t dim) {
    std::string h = "sample_id,label,domain";
    for (std::size_t k = 0; k < dim; ++k) h += ",f" + std::to_string(k);
    return h;
}

namespace {

struct Datasets {
    data::Dataset source_train, source_test, target_pool, target_train, target_test;
    data::Dataset source_test_shifted;  // aligned with source_test, for the fused feature
};

void check_class_labels(const data::Dataset& ds, std::size_t classes, const std::string& name) {
    for (int y : ds.labels)
        if (y < 0 || static_cast<std::size_t>(y) >= classes)
            throw ConfigError(name + ": label " + std::to_string(y) + " outside the configured " +
                              std::to_string(classes) + " classes");
}

Datasets build_datasets(const RunConfig& cfg) {
    const auto& d = cfg.data;
    const std::uint64_t s = cfg.train.seed;
    if (d.classes.empty()) throw ConfigError("data.classes: need at least one class");
    const auto shift = data::ShiftSpec::parse(d.shift);
    const DomainId tdom{1, "target"};
    Datasets out;
    const bool idx_source = !d.source_images.empty() || !d.source_labels.empty();
    const bool idx_target = !d.target_images.empty() || !d.target_labels.empty();
    if (idx_source) {
        if (d.source_images.empty() || d.source_labels.empty())
            throw ConfigError("data: source_images and source_labels must be given together");
        auto all = data::load_idx_dataset(d.source_images, d.source_labels, d.classes.size());
        check_class_labels(all, d.classes.size(), "source IDX");
        std::tie(out.source_train, out.source_test) = data::split_fraction(all, 0.8, s, d.stratified);
    } else {
        out.source_train = data::gen_shapes(d.classes, d.source_per_class, d.image_size, s * 1000 + 1);
        out.source_test = data::gen_shapes(d.classes, d.test_per_class, d.image_size, s * 1000 + 3);
    }
    if (idx_target) {
        if (d.target_images.empty() || d.target_labels.empty())
            throw ConfigError("data: target_images and target_labels must be given together");
        auto all = data::load_idx_dataset(d.target_images, d.target_labels, d.classes.size());
        check_class_labels(all, d.classes.size(), "target IDX");
        all.domain = tdom;
        std::tie(out.target_pool, out.target_test) = data::split_fraction(all, 0.8, s + 1, d.stratified);
    } else if (idx_source) {
        auto shifted = data::apply_shift(out.source_test, shift, tdom);
        std::tie(out.target_pool, out.target_test) = data::split_fraction(shifted, 0.5, s + 1, d.stratified);
    } else {
        out.target_pool = data::apply_shift(
            data::gen_shapes(d.classes, d.target_pool_per_class, d.image_size, s * 1000 + 2), shift, tdom);
        out.target_test = data::apply_shift(
            data::gen_shapes(d.classes, d.test_per_class, d.image_size, s * 1000 + 4), shift, tdom);
    }
    out.source_test_shifted = data::apply_shift(out.source_test, shift, tdom);
    if (cfg.train.mode == TrainMode::unsupervised_target)
        out.target_train = out.target_pool;
    else
        out.target_train = data::split_fraction(out.target_pool, cfg.train.target_fraction, s, d.stratified).first;
    return out;
}

TrainConfig train_config(const RunConfig& cfg) {
    TrainConfig tc;
    tc.epochs = cfg.train.epochs;
    tc.batch_size = cfg.train.batch_size;
    tc.lr = cfg.train.lr;
    tc.momentum = cfg.train.momentum;
    tc.seed = cfg.train.seed;
    tc.target_fraction = cfg.train.target_fraction;
    tc.mode = cfg.train.mode;
    tc.mmd_weight = cfg.train.mode == TrainMode::unsupervised_target ? cfg.train.mmd_weight : 0.0;
    tc.mmd_bandwidths = cfg.train.mmd_bandwidths;
    return tc;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << text;
}

template <typename T>
TrainOutcome train_impl(const RunConfig& cfg, const std::optional<fs::path>& out) {
    const auto wall0 = std::chrono::steady_clock::now();
    const Datasets ds = build_datasets(cfg);
    const std::size_t classes = cfg.data.classes.size();
    const NetSpec spec = NetSpec::toy(cfg.model.arch, ds.source_train.images.h(), classes, cfg.model.k);
    Network<T> net = build_network<T>(spec, cfg.train.seed);
    const TrainConfig tc = train_config(cfg);

    std::ofstream metrics, epochs;
    if (out) {
        metrics.open(*out / "metrics.csv", std::ios::binary);
        epochs.open(*out / "epochs.csv", std::ios::binary);
        metrics << "step,epoch,loss_s,loss_t,mmd,grad_norm_shared";
        for (std::size_t d = 0; d < net.num_domains(); ++d) metrics << ",grad_norm_d" << d;
        metrics << "\n";
        epochs << "epoch,mean_loss_s,mean_loss_t,mean_mmd,source_acc,target_acc,eval_mmd\n";
    }
    FitCallbacks cb;
    cb.on_step = [&](std::size_t step, std::size_t epoch, const StepMetrics& m) {
        if (!out) return;
        metrics << step << ',' << epoch << ',' << g17(m.loss_s) << ',' << g17(m.loss_t) << ',' << g17(m.mmd) << ','
                << g17(m.grad_norm_shared);
        for (double g : m.grad_norm_domain) metrics << ',' << g17(g);
        metrics << '\n';
    };
    cb.on_epoch = [&](const EpochRecord& r) {
        if (!out) return;
        epochs << r.epoch << ',' << g17(r.mean_loss_s) << ',' << g17(r.mean_loss_t) << ',' << g17(r.mean_mmd) << ','
               << g17(r.source_acc) << ',' << g17(r.target_acc) << ',' << g17(r.eval_mmd) << '\n';
    };
    FitData fd{&ds.source_train, &ds.target_train, &ds.source_test, &ds.target_test};
    const FitResult fr = fit(net, fd, tc, cb);

    TrainOutcome res;
    res.epochs = fr.epochs;
    res.source_acc = fr.epochs.back().source_acc;
    res.target_acc = fr.epochs.back().target_acc;
    res.fused_acc = evaluate(net, {&ds.source_test, &ds.source_test_shifted}, {0, 1}).accuracy;
    res.labeled_target = cfg.train.mode == TrainMode::supervised_both ? ds.target_train.size() : 0;
    if (!out) return res;

    metrics.close();
    epochs.close();
    if (cfg.train.export_features) {
        std::ofstream f(*out / "features.csv", std::ios::binary);
        f << features_csv_header(net.feature_dim()) << "\n";
        for (auto [set, dom] : {std::pair{&ds.source_test, 0}, std::pair{&ds.target_test, 1}}) {
            const auto ev = evaluate(net, {set}, {dom}, 128, true);
            for (const auto& row : ev.features) {
                f << row.sample_id << ',' << row.label << ',' << row.domain;
                for (double v : row.features) f << ',' << g17(v);
                f << '\n';
            }
        }
    }
    if (cfg.train.checkpoint) save_checkpoint(*out / "checkpoint.bin", net);

    json j;
    j["command"] = "train";
    j["version"] = version();
    j["seed"] = cfg.train.seed;
    j["arch"] = to_string(cfg.model.arch);
    j["mode"] = to_string(cfg.train.mode);
    j["precision"] = cfg.train.precision;
    j["k"] = cfg.model.k;
    j["target_fraction"] = cfg.train.target_fraction;
    j["labeled_target_samples"] = res.labeled_target;
    j["epochs"] = cfg.train.epochs;
    j["source_acc"] = res.source_acc;
    j["target_acc"] = res.target_acc;
    j["fused_acc"] = res.fused_acc;
    j["eval_mmd_initial"] = fr.epochs.front().eval_mmd;
    j["eval_mmd_final"] = fr.epochs.back().eval_mmd;
    j["params"] = {{"shared", net.count_partition(kShared)}};
    for (std::size_t d = 0; d < net.num_domains(); ++d)
        j["params"][spec.domains[d].name] = net.count_partition(static_cast<int>(d));
    for (auto [name, set] : {std::pair{"source_train", &ds.source_train}, std::pair{"source_test", &ds.source_test},
                             std::pair{"target_train", &ds.target_train}, std::pair{"target_test", &ds.target_test}})
        j["datasets"][name] = json::parse(set->manifest_json());
    j["wall_clock_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - wall0).count();
    write_text(*out / "results.json", j.dump(2) + "\n");
    return res;
}

void prepare_out(const RunConfig& cfg, const fs::path& out) {
    fs::create_directories(out);
    write_text(out / "resolved_config.ini", cfg.to_ini());
}

}  // namespace

TrainOutcome run_train(const RunConfig& cfg, const std::optional<fs::path>& out) {
    if (cfg.data.classes.size() < 2) throw ConfigError("data.classes: need at least two classes");
    if (cfg.train.precision == "double") return train_impl<double>(cfg, out);
    return train_impl<float>(cfg, out);
}

int cmd_train(const RunConfig& cfg, const fs::path& out, std::ostream& log) {
    prepare_out(cfg, out);
    const auto r = run_train(cfg, out);
    for (const auto& e : r.epochs)
        log << "epoch " << std::setw(3) << e.epoch << "  source " << std::fixed << std::setprecision(4)
            << e.source_acc << "  target " << e.target_acc << "  mmd " << e.eval_mmd << "\n";
    log << "final: source_acc " << r.source_acc << " target_acc " << r.target_acc << " fused_acc " << r.fused_acc
        << " (" << r.labeled_target << " labeled target samples)\n"
        << std::defaultfloat;
    return kOk;
}

// ---------------------------------------------------------------------------
// Verify
// ---------------------------------------------------------------------------

namespace {

using Job = std::function<std::vector<theory::BoundReport>()>;

std::vector<std::vector<theory::BoundReport>> run_jobs(const std::vector<Job>& jobs, std::size_t threads) {
    std::vector<std::vector<theory::BoundReport>> results(jobs.size());
    std::vector<std::exception_ptr> errors(jobs.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i; (i = next.fetch_add(1)) < jobs.size();) {
            try {
                results[i] = jobs[i]();
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const std::size_t n = std::max<std::size_t>(1, std::min(threads, jobs.size()));
    if (n == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    return results;
}

// Runs `body`; assumption violations and support overflows become rejected rows.
Job guarded(const std::string& check, const std::string& config, const std::vector<std::size_t>& Ns,
            std::function<std::vector<theory::BoundReport>()> body) {
    return [=] {
        try {
            return body();
        } catch (const theory::AssumptionError& e) {
            std::vector<theory::BoundReport> out;
            for (auto N : Ns) out.push_back(theory::rejected_report(check, config, N, e.what()));
            return out;
        } catch (const theory::SupportError& e) {
            std::vector<theory::BoundReport> out;
            for (auto N : Ns) out.push_back(theory::rejected_report(check, config, N, e.what()));
            return out;
        }
    };
}

struct FieldPoint {
    theory::FieldKind kind;
    double param;
    std::string label;
};

std::vector<FieldPoint> field_points(const VerifySection& v) {
    std::vector<FieldPoint> out;
    if (v.field == "rotation") {
        for (double t : v.thetas_deg) out.push_back({theory::FieldKind::rotation, t * M_PI / 180.0, "rotation(" + num(t) + "deg)"});
    } else if (v.field == "smooth-odd") {
        for (double a : v.amplitudes) out.push_back({theory::FieldKind::smooth_odd, a, "smooth-odd(" + num(a) + ")"});
    } else if (v.field == "dilation") {
        for (double s : v.scales) out.push_back({theory::FieldKind::dilation, s, "dilation(" + num(s) + ")"});
    } else {
        out.push_back({theory::FieldKind::zero, 0.0, "zero"});
    }
    return out;
}

std::uint64_t filter_seed(std::uint64_t seed, int which) { return seed * 7919 + static_cast<std::uint64_t>(which); }

}  // namespace

std::vector<theory::BoundReport> run_verify(const RunConfig& cfg) {
    using namespace theory;
    const auto& v = cfg.verify;
    if (v.resolutions.empty()) throw ConfigError("verify.resolutions: empty");
    if (v.seeds == 0) throw ConfigError("verify.seeds must be >= 1");
    const Activation act = parse_activation(v.activation);
    const auto Ns = v.resolutions;
    std::vector<Job> jobs;

    for (const auto& fp : field_points(v)) {
        for (std::uint64_t seed = 1; seed <= v.seeds; ++seed) {
            const std::string label = fp.label + ";seed=" + std::to_string(seed);
            auto field = [fp, seed] { return make_displacement(fp.kind, fp.param, seed); };
            if (v.check == "lemma1") {
                jobs.push_back(guarded("lemma1", label, Ns, [=] {
                    Lemma1Config c;
                    c.x = random_signal(seed, v.signal_window);
                    c.w = random_filter(filter_seed(seed, 1), v.j);
                    c.f = random_filter(filter_seed(seed, 2), v.j);
                    c.field = field();
                    c.act = act;
                    c.bias = v.bias;
                    c.filter_warp = v.filter_warp == "bilinear" ? FilterWarp::bilinear : FilterWarp::analytic;
                    c.label = label;
                    return check_lemma1(c, Ns);
                }));
            } else if (v.check == "theorem1") {
                for (std::size_t L : v.layers) {
                    const std::string lab = "L=" + std::to_string(L) + ";" + label;
                    jobs.push_back(guarded("theorem1", lab, Ns, [=] {
                        const auto mode = v.feature_filters == "independent" ? FeatureFilters::independent
                                                                             : FeatureFilters::rotated_generative;
                        StackSpec s = make_stack(L, field(), L >= 3 ? v.j_deep : v.stack_j, seed, mode, v.bias, v.bias);
                        s.act = act;
                        s.filter_warp =
                            v.stack_filter_warp == "bilinear" ? FilterWarp::bilinear : FilterWarp::analytic;
                        s.label = lab;
                        return run_theorem1(s, random_signal(seed, v.stack_window), Ns);
                    }));
                }
            } else if (v.check == "norm-drift") {
                jobs.push_back(guarded("norm-drift", label, Ns, [=] {
                    auto r = check_filter_norm_drift(random_filter(filter_seed(seed, 1), v.j), field(), Ns);
                    for (auto& b : r) b.config = label;
                    return r;
                }));
            } else if (v.check == "atom-implementability") {
                jobs.push_back(guarded("atom-implementability", label, Ns, [=] {
                    std::vector<BoundReport> out;
                    std::mt19937_64 rng(filter_seed(seed, 3));
                    std::normal_distribution<double> coef(0.0, 1.0);
                    std::vector<double> a;
                    for (std::size_t k = 0; k < v.atoms; ++k) a.push_back(coef(rng));
                    const auto f = field();
                    for (auto N : Ns) {
                        std::vector<GridFilter> atoms;
                        for (std::size_t k = 0; k < v.atoms; ++k)
                            atoms.push_back(random_filter(filter_seed(seed, 10 + static_cast<int>(k)), v.j).sample(N));
                        auto r = verify_atom_implementability(atoms, a, f);
                        r.config = label;
                        out.push_back(r);
                    }
                    return out;
                }));
            } else if (v.check == "fact1") {
                if (seed > 1 && fp.kind != FieldKind::smooth_odd) continue;
                jobs.push_back(guarded("fact1", label, {0}, [=] {
                    auto r = check_fact1(field());
                    r.config = label;
                    return std::vector<BoundReport>{r};
                }));
            } else if (v.check == "nonexpansive") {
                jobs.push_back(guarded("nonexpansive", "seed=" + std::to_string(seed), Ns, [=] {
                    std::vector<BoundReport> out;
                    for (auto N : Ns) {
                        auto [a, b] = check_nonexpansive(random_signal(seed, v.signal_window).sample(N),
                                                         random_filter(filter_seed(seed, 1), v.j).sample(N));
                        a.config = b.config = "seed=" + std::to_string(seed);
                        out.push_back(a);
                        out.push_back(b);
                    }
                    return out;
                }));
            }
        }
        if (v.check == "nonexpansive") break;  // the field plays no part
    }

    std::vector<BoundReport> rows;
    for (auto& batch : run_jobs(jobs, cfg.threads))
        for (auto& r : batch) rows.push_back(std::move(r));
    return rows;
}

int cmd_verify(const RunConfig& cfg, const fs::path& out, std::ostream& log) {
    const auto wall0 = std::chrono::steady_clock::now();
    prepare_out(cfg, out);
    const auto rows = run_verify(cfg);
    std::size_t pass = 0, fail = 0, rejected = 0;
    std::ofstream csv(out / "bound_reports.csv", std::ios::binary);
    csv << theory::BoundReport::csv_header() << "\n";
    for (const auto& r : rows) {
        csv << r.csv_row() << "\n";
        if (r.rejected)
            ++rejected;
        else if (r.pass)
            ++pass;
        else
            ++fail;
    }
    csv.close();
    json j;
    j["command"] = "verify";
    j["version"] = version();
    j["check"] = cfg.verify.check;
    j["rows"] = rows.size();
    j["pass"] = pass;
    j["fail"] = fail;
    j["rejected"] = rejected;
    j["wall_clock_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - wall0).count();
    write_text(out / "results.json", j.dump(2) + "\n");
    log << cfg.verify.check << ": " << pass << " pass, " << fail << " fail, " << rejected << " rejected ("
        << rows.size() << " rows)\n";
    for (const auto& r : rows)
        if (!r.rejected && !r.pass) log << "FAIL " << r.csv_row() << "\n";
    return fail == 0 ? kOk : kVerifyFailed;
}

// ---------------------------------------------------------------------------
// Cost
// ---------------------------------------------------------------------------

int cmd_cost(const RunConfig& cfg, const std::optional<fs::path>& out, std::ostream& log) {
    const auto& c = cfg.cost;
    std::vector<LayerCostSpec> layers;
    if (!c.layer_file.empty())
        layers = read_layer_spec_file(c.layer_file, c.k);
    else if (c.preset == "vgg16")
        layers = vgg16_layers(c.k, c.input_size);
    else
        throw ConfigError("cost.preset: unknown preset '" + c.preset + "' (available: vgg16)");
    const auto report = count_costs(layers, c.domains);
    log << report.to_table();
    if (out) {
        prepare_out(cfg, *out);
        write_text(*out / "cost_report.json", report.to_json() + "\n");
    }
    return kOk;
}

// ---------------------------------------------------------------------------
// Compare
// ---------------------------------------------------------------------------

int cmd_compare(const RunConfig& cfg, const fs::path& out, std::ostream& log) {
    prepare_out(cfg, out);
    std::ofstream csv(out / "comparison.csv", std::ios::binary);
    csv << "arch,target_fraction,seed,source_acc,target_acc,fused_acc\n";
    struct Agg {
        std::vector<double> src, tgt;
    };
    std::vector<std::pair<std::pair<Arch, double>, Agg>> agg;
    for (double frac : cfg.compare.fractions)
        for (Arch a : cfg.compare.archs) {
            Agg g;
            for (auto seed : cfg.compare.seeds) {
                RunConfig c = cfg;
                c.model.arch = a;
                c.train.seed = seed;
                c.train.target_fraction = frac;
                const auto r = run_train(c, std::nullopt);
                csv << to_string(a) << ',' << num(frac) << ',' << seed << ',' << g17(r.source_acc) << ','
                    << g17(r.target_acc) << ',' << g17(r.fused_acc) << '\n';
                g.src.push_back(r.source_acc);
                g.tgt.push_back(r.target_acc);
            }
            agg.push_back({{a, frac}, g});
        }
    csv.close();

    auto mean = [](const std::vector<double>& v) {
        double s = 0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
    };
    std::ostringstream table;
    table << std::left << std::setw(6) << "arch" << std::setw(12) << "fraction" << std::setw(14) << "source (%)"
          << "target (%)\n";
    for (const auto& [key, g] : agg)
        table << std::setw(6) << to_string(key.first) << std::setw(12) << num(key.second) << std::setw(14)
              << std::fixed << std::setprecision(1) << 100.0 * mean(g.src) << 100.0 * mean(g.tgt) << "\n"
              << std::defaultfloat;
    write_text(out / "comparison.txt", table.str());
    log << table.str();
    return kOk;
}

}  // namespace dafd::cli
