#include "dafd/cost_model.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace dafd {

void LayerCostSpec::validate() const {
    if (c_in == 0 || c_out == 0 || L == 0 || W == 0 || K == 0)
        throw std::invalid_argument("layer cost spec: all of c_in, c_out, L, W, K must be positive");
    if (L % 2 == 0) throw std::invalid_argument("layer cost spec: L must be odd, got " + std::to_string(L));
}

CostReport count_costs(const std::vector<LayerCostSpec>& layers, std::uint64_t D) {
    if (layers.empty()) throw std::invalid_argument("count_costs: empty layer list");
    if (D == 0) throw std::invalid_argument("count_costs: need at least one domain");
    CostReport r;
    r.D = D;
    for (const auto& s : layers) {
        s.validate();
        LayerCost c;
        c.spec = s;
        const std::uint64_t L2 = s.L * s.L, W2 = s.W * s.W;
        c.params_regular = D * s.c_in * s.c_out * L2;
        c.params_dafd = s.K * (s.c_in * s.c_out + D * L2);
        c.flops_regular_per_domain = W2 * s.c_in * s.c_out * (2 * L2 + 1);
        c.flops_dafd_per_domain = W2 * s.c_in * 2 * s.K * (L2 + s.c_out);
        c.macs_regular_per_domain = W2 * s.c_in * s.c_out * L2;
        c.macs_dafd_per_domain = W2 * s.c_in * s.K * (L2 + s.c_out);
        c.extra_regular_per_domain = s.c_in * s.c_out * L2 + s.c_out;
        c.extra_dafd_per_domain = s.K * L2;
        c.dafd_cheaper = 2 * s.K * (L2 + s.c_out) < s.c_out * (2 * L2 + 1);

        r.total.params_regular += c.params_regular;
        r.total.params_dafd += c.params_dafd;
        r.total.flops_regular_per_domain += c.flops_regular_per_domain;
        r.total.flops_dafd_per_domain += c.flops_dafd_per_domain;
        r.total.macs_regular_per_domain += c.macs_regular_per_domain;
        r.total.macs_dafd_per_domain += c.macs_dafd_per_domain;
        r.total.extra_regular_per_domain += c.extra_regular_per_domain;
        r.total.extra_dafd_per_domain += c.extra_dafd_per_domain;
        r.layers.push_back(c);
    }
    r.total.dafd_cheaper = r.total.flops_dafd_per_domain < r.total.flops_regular_per_domain;
    return r;
}

std::vector<LayerCostSpec> vgg16_layers(std::uint64_t K, std::uint64_t input_size) {
    if (K == 0) throw std::invalid_argument("vgg16: K must be >= 1");
    if (input_size == 0 || input_size % 16 != 0)
        throw std::invalid_argument("vgg16: input size must be a positive multiple of 16");
    // (block, channels) with two or three convs per block
    const std::vector<std::vector<std::uint64_t>> blocks = {
        {64, 64}, {128, 128}, {256, 256, 256}, {512, 512, 512}, {512, 512, 512}};
    std::vector<LayerCostSpec> out;
    std::uint64_t c = 3, w = input_size;
    for (const auto& block : blocks) {
        for (std::uint64_t co : block) {
            out.push_back({c, co, 3, w, K});
            c = co;
        }
        w /= 2;
    }
    return out;
}

CostReport vgg16_report(std::uint64_t K, std::uint64_t input_size, std::uint64_t D) {
    return count_costs(vgg16_layers(K, input_size), D);
}

namespace {

nlohmann::json layer_json(const LayerCost& c, bool with_spec) {
    nlohmann::json j;
    if (with_spec)
        j["spec"] = {{"c_in", c.spec.c_in}, {"c_out", c.spec.c_out}, {"L", c.spec.L}, {"W", c.spec.W}, {"K", c.spec.K}};
    j["params_regular"] = c.params_regular;
    j["params_dafd"] = c.params_dafd;
    j["flops_regular_per_domain"] = c.flops_regular_per_domain;
    j["flops_dafd_per_domain"] = c.flops_dafd_per_domain;
    j["macs_regular_per_domain"] = c.macs_regular_per_domain;
    j["macs_dafd_per_domain"] = c.macs_dafd_per_domain;
    j["extra_regular_per_domain"] = c.extra_regular_per_domain;
    j["extra_dafd_per_domain"] = c.extra_dafd_per_domain;
    j["dafd_cheaper"] = c.dafd_cheaper;
    return j;
}

std::string human(double v) {
    std::ostringstream os;
    os << std::fixed;
    if (v >= 1e9)
        os << std::setprecision(2) << v / 1e9 << "G";
    else if (v >= 1e6)
        os << std::setprecision(2) << v / 1e6 << "M";
    else
        os << std::setprecision(0) << v;
    return os.str();
}

}  // namespace

std::string CostReport::to_json() const {
    nlohmann::json j;
    j["domains"] = D;
    j["flop_convention"] =
        "flops_*: multiply and add counted separately, regular adds one bias op per output; "
        "macs_*: one multiply-add per tap (the convention compared against published totals)";
    j["layers"] = nlohmann::json::array();
    for (const auto& l : layers) j["layers"].push_back(layer_json(l, true));
    j["total"] = layer_json(total, false);
    return j.dump(2);
}

std::string CostReport::to_table() const {
    std::ostringstream os;
    const int w0 = 22, w1 = 24, w2 = 24;
    os << std::left << std::setw(w0) << "" << std::setw(w1) << "Regular branching" << std::setw(w2) << "DAFD" << "\n";
    os << std::setw(w0) << "Parameters" << std::setw(w1)
       << (std::to_string(total.extra_regular_per_domain) + " (" + human(double(total.extra_regular_per_domain)) + ")")
       << std::setw(w2) << std::to_string(total.extra_dafd_per_domain) << "\n";
    os << std::setw(w0) << "Flops (mult-add)" << std::setw(w1)
       << (std::to_string(total.macs_regular_per_domain) + " (" + human(double(total.macs_regular_per_domain)) + ")")
       << std::setw(w2)
       << (std::to_string(total.macs_dafd_per_domain) + " (" + human(double(total.macs_dafd_per_domain)) + ")")
       << "\n";
    os << std::setw(w0) << "Flops (mul+add+bias)" << std::setw(w1)
       << (std::to_string(total.flops_regular_per_domain) + " (" + human(double(total.flops_regular_per_domain)) + ")")
       << std::setw(w2)
       << (std::to_string(total.flops_dafd_per_domain) + " (" + human(double(total.flops_dafd_per_domain)) + ")")
       << "\n";
    os << "# cost of one additional domain; parameters include the per-domain conv bias for regular branching\n";
    return os.str();
}

std::vector<LayerCostSpec> parse_layer_specs(const std::string& text, std::uint64_t default_K) {
    std::vector<LayerCostSpec> out;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        std::istringstream ls(line);
        std::vector<std::string> tok;
        for (std::string t; ls >> t;) tok.push_back(t);
        if (tok.empty()) continue;
        if (tok.size() != 4 && tok.size() != 5)
            throw std::invalid_argument("layer spec line " + std::to_string(lineno) +
                                        ": expected 'c_in c_out L W [K]', got " + std::to_string(tok.size()) +
                                        " fields");
        std::vector<std::uint64_t> v;
        for (const auto& t : tok) {
            std::size_t used = 0;
            unsigned long long x = 0;
            try {
                x = std::stoull(t, &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used != t.size() || t[0] == '-')
                throw std::invalid_argument("layer spec line " + std::to_string(lineno) + ": '" + t +
                                            "' is not a non-negative integer");
            v.push_back(x);
        }
        LayerCostSpec s{v[0], v[1], v[2], v[3], tok.size() == 5 ? v[4] : default_K};
        try {
            s.validate();
        } catch (const std::invalid_argument& e) {
            throw std::invalid_argument("layer spec line " + std::to_string(lineno) + ": " + e.what());
        }
        out.push_back(s);
    }
    if (out.empty()) throw std::invalid_argument("layer spec: no layers given");
    return out;
}

std::vector<LayerCostSpec> read_layer_spec_file(const std::filesystem::path& path, std::uint64_t default_K) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open layer spec file " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_layer_specs(ss.str(), default_K);
}

}  // namespace dafd
