// dafd_cli: train / verify / cost / compare entry point.
//
//   dafd_cli train   [--config run.ini] [--arch A3] [--seed 1] [--target-fraction 0.005] --out runs/a3
//   dafd_cli verify  [--config sweep.ini] --out runs/lemma1
//   dafd_cli cost    --preset vgg16 --k 6 [--layer-file layers.txt] [--out runs/cost]
//   dafd_cli compare [--config run.ini] --out runs/table1

#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dafd/cli.hpp"

namespace {

struct Options {
    std::string config;
    std::string out;
    std::optional<std::string> arch, mode, preset, layer_file;
    std::optional<std::uint64_t> seed, k, threads;
    std::optional<double> target_fraction;
    std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, Options& o) {
    cmd->add_option("--config", o.config, "key=value config file with [section] headers");
    cmd->add_option("--out", o.out, "output directory");
    cmd->add_option("--threads", o.threads, "worker threads for parallel sweeps");
    cmd->add_option("--set", o.sets, "override, e.g. --set train.epochs=5 (repeatable)");
}

void add_train_flags(CLI::App* cmd, Options& o) {
    cmd->add_option("--arch", o.arch, "A1 | A2 | A3");
    cmd->add_option("--seed", o.seed, "run seed");
    cmd->add_option("--target-fraction", o.target_fraction, "labeled fraction of the target pool");
    cmd->add_option("--mode", o.mode, "supervised-both | unsupervised-target");
    cmd->add_option("--k", o.k, "atoms per DAFD layer");
}

std::string exact(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

dafd::cli::RunConfig resolve(const Options& o, const std::string& command) {
    using dafd::cli::ConfigError;
    dafd::cli::RunConfig cfg = o.config.empty() ? dafd::cli::RunConfig{} : dafd::cli::load_config(o.config);
    for (const auto& s : o.sets) {
        const auto dot = s.find('.'), eq = s.find('=');
        if (dot == std::string::npos || eq == std::string::npos || dot > eq)
            throw ConfigError("--set expects section.key=value, got '" + s + "'");
        cfg.set(s.substr(0, dot), s.substr(dot + 1, eq - dot - 1), s.substr(eq + 1));
    }
    if (o.arch) cfg.set("model", "arch", *o.arch);
    if (o.mode) cfg.set("train", "mode", *o.mode);
    if (o.seed) cfg.set("train", "seed", std::to_string(*o.seed));
    if (o.target_fraction) cfg.set("train", "target_fraction", exact(*o.target_fraction));
    if (o.k) cfg.set(command == "cost" ? "cost" : "model", "k", std::to_string(*o.k));
    if (o.preset) cfg.set("cost", "preset", *o.preset);
    if (o.layer_file) cfg.set("cost", "layer_file", *o.layer_file);
    if (o.threads) cfg.set("run", "threads", std::to_string(*o.threads));
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Domain-adaptive filter decomposition: training, bound verification and cost reports"};
    app.set_version_flag("--version", dafd::cli::version());
    app.require_subcommand(1);

    Options o;
    auto* train = app.add_subcommand("train", "train one architecture and write run artifacts");
    auto* verify = app.add_subcommand("verify", "run a bound-verification sweep");
    auto* cost = app.add_subcommand("cost", "parameter / flop comparison for one extra domain");
    auto* compare = app.add_subcommand("compare", "A1/A2/A3 sweep over target fractions and seeds");
    for (auto* c : {train, verify, cost, compare}) add_common(c, o);
    add_train_flags(train, o);
    add_train_flags(compare, o);
    cost->add_option("--k", o.k, "atoms per DAFD layer");
    cost->add_option("--preset", o.preset, "network preset (vgg16)");
    cost->add_option("--layer-file", o.layer_file, "layer spec file, one 'c_in c_out L W [K]' per line");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : dafd::cli::kUsage;
    }

    const std::string command = app.get_subcommands().front()->get_name();
    try {
        const auto cfg = resolve(o, command);
        if (command == "cost")
            return dafd::cli::cmd_cost(cfg, o.out.empty() ? std::nullopt : std::optional<std::filesystem::path>(o.out),
                                       std::cout);
        if (o.out.empty()) throw dafd::cli::ConfigError("--out is required for " + command);
        if (command == "train") return dafd::cli::cmd_train(cfg, o.out, std::cout);
        if (command == "verify") return dafd::cli::cmd_verify(cfg, o.out, std::cout);
        return dafd::cli::cmd_compare(cfg, o.out, std::cout);
    } catch (const dafd::NumericError& e) {
        std::cerr << "numerical abort: " << e.what() << "\n";
        return dafd::cli::kNumericAbort;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return dafd::cli::kUsage;
    }
}
