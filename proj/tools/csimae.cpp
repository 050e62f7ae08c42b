#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "csimae/error.hpp"
#include "csimae/experiment.hpp"

namespace {

enum ExitCode { kOk = 0, kInternal = 1, kConfig = 2, kData = 3, kNumeric = 4 };

struct Overrides {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> strategy;
    std::optional<std::size_t> buckets;
};

csimae::ExperimentConfig resolve(const Overrides& o) {
    std::ifstream in(o.config);
    if (!in) throw csimae::ConfigError("cannot open config " + o.config);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw csimae::ConfigError("cannot parse " + o.config + ": " + e.what());
    }
    if (o.seed) j["seed"] = *o.seed;
    if (o.strategy) j["schedule"]["strategy"] = *o.strategy;
    if (o.buckets) j["schedule"]["buckets"] = *o.buckets;
    auto cfg = csimae::ExperimentConfig::from_json(j, std::filesystem::path(o.config).parent_path());
    if (!o.out.empty()) cfg.out_dir = o.out;
    return cfg;
}

void add_common(CLI::App* cmd, Overrides& o) {
    cmd->add_option("--config", o.config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
    cmd->add_option("--out", o.out, "Output directory (overrides config)");
    cmd->add_option("--seed", o.seed, "Master seed (overrides config)");
    cmd->add_option("--strategy", o.strategy, "proposed | sequential | alternating | global");
    cmd->add_option("--buckets", o.buckets, "Bucket count B")->check(CLI::PositiveNumber);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Heterogeneous CSI masked-autoencoder pretraining toolkit"};
    app.require_subcommand(1);
    Overrides o;

    auto* gen = app.add_subcommand("generate", "Synthesize datasets and write manifests");
    add_common(gen, o);
    auto* train = app.add_subcommand("train", "Pretrain the toy model");
    add_common(train, o);
    auto* eval = app.add_subcommand("eval", "NMSE table for the configured tasks");
    add_common(eval, o);
    std::optional<std::string> checkpoint;
    bool untrained = false;
    eval->add_option("--checkpoint", checkpoint, "Checkpoint file (default <out>/train/checkpoint.bin)");
    eval->add_flag("--untrained", untrained, "Evaluate the freshly initialized model");
    auto* study = app.add_subcommand("study", "Run a study: strategy-compare | conflict | bucket-sweep");
    add_common(study, o);
    std::string study_name;
    study->add_option("name", study_name, "Study name")
        ->required()
        ->check(CLI::IsMember({"strategy-compare", "conflict", "bucket-sweep"}));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kConfig;
    }

    try {
        const auto cfg = resolve(o);
        if (gen->parsed()) {
            csimae::cmd_generate(cfg);
        } else if (train->parsed()) {
            csimae::cmd_train(cfg);
        } else if (eval->parsed()) {
            std::optional<std::filesystem::path> ckpt;
            if (checkpoint) ckpt = *checkpoint;
            csimae::cmd_eval(cfg, ckpt, untrained);
        } else {
            csimae::cmd_study(study_name, cfg);
        }
    } catch (const csimae::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfig;
    } catch (const csimae::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kData;
    } catch (const csimae::NumericError& e) {
        std::cerr << "numeric abort: " << e.what() << "\n";
        return kNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kInternal;
    }
    return kOk;
}
