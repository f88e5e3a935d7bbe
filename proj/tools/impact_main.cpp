#include <cstdint>
#include <exception>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "impact/harness.hpp"

namespace {

struct CliArgs {
    std::string config_path;
    std::string out_dir;
    uint64_t seed = 0;
    bool resume = false;
};

void add_common_options(CLI::App* sub, CliArgs& args) {
    sub->add_option("--config", args.config_path, "experiment config (json)")
        ->check(CLI::ExistingFile);
    sub->add_option("--seed", args.seed, "override the global seed");
    sub->add_option("--out", args.out_dir, "override the output directory");
    sub->add_flag("--resume", args.resume, "reuse cached stages after verifying checksums");
}

void print_stages(const impact::RunManifest& m) {
    for (const std::string& name : m.stage_order) {
        auto it = m.stages.find(name);
        if (it == m.stages.end()) continue;
        std::cout << "  " << name << ": " << it->second.status;
        if (it->second.status == "done")
            std::cout << " (" << it->second.seconds << "s)";
        std::cout << "\n";
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"multi-level interpretability pipeline for tiny vision transformers"};
    app.require_subcommand(1);
    CliArgs args;

    const std::vector<std::pair<std::string, std::string>> stages = {
        {"train", "train the dense model (generates data first)"},
        {"prune", "prune and fine-tune the sparse variants"},
        {"neurons", "neuron-level metrics at the mlp activations"},
        {"sae", "train sparse autoencoders on the final residual"},
        {"circuits", "optimize per-category circuit masks"},
        {"attribution", "attribution maps with insertion/deletion curves"},
        {"report", "aggregate metric tables and a summary"},
        {"pipeline", "run every stage in order"},
    };
    for (const auto& [name, desc] : stages) add_common_options(app.add_subcommand(name, desc), args);

    CLI11_PARSE(app, argc, argv);
    const std::string command = app.get_subcommands().front()->get_name();

    std::string out_dir;
    try {
        impact::ExperimentConfig cfg;
        if (!args.config_path.empty()) cfg = impact::load_experiment_config(args.config_path);
        for (const CLI::App* sub : app.get_subcommands()) {
            if (sub->count("--seed")) cfg.seed = args.seed;
            if (sub->count("--out")) cfg.out_dir = args.out_dir;
        }
        out_dir = cfg.out_dir;

        impact::RunManifest manifest =
            command == "pipeline" ? impact::run_pipeline(cfg, args.resume)
                                  : impact::run_stages(cfg, {command}, args.resume);
        std::cout << command << ": ok, manifest at "
                  << (std::filesystem::path(cfg.out_dir) / "manifest.json").string() << "\n";
        print_stages(manifest);
        return 0;
    } catch (const std::exception& e) {
        std::string stage;
        if (!out_dir.empty()) {
            const std::filesystem::path mp = std::filesystem::path(out_dir) / "manifest.json";
            try {
                if (std::filesystem::exists(mp))
                    stage = impact::load_manifest(mp.string()).failed_stage;
            } catch (const std::exception&) {
            }
        }
        if (stage.empty())
            std::cerr << "error: " << e.what() << "\n";
        else
            std::cerr << "error in stage " << stage << ": " << e.what() << "\n";
        return 1;
    }
}
