#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "impact/circuits.hpp"
#include "impact/model.hpp"
#include "impact/sae.hpp"

namespace impact {

struct DataConfig {
    std::string source = "shapes";  // "shapes" | "idx"
    int train_per_class = 200;
    int val_per_class = 40;
    // Source paths for "idx"; the data stage re-serializes either source
    // into the run directory so later stages only read run artifacts.
    std::string train_images, train_labels, val_images, val_labels;
};

struct ExperimentConfig {
    ModelConfig model;  // desk-scale defaults
    DataConfig data;
    std::vector<double> sparsities{0.0, 0.1, 0.3, 0.5, 0.7};
    std::string prune_method = "magnitude";  // | "wanda"
    int train_epochs = 14;
    int finetune_epochs = 2;
    int batch_size = 50;
    double lr = 2e-3;
    double weight_decay = 0.01;
    int lr_step = 10;      // epochs per lr decay; 0 disables the schedule
    double lr_gamma = 0.1; // decay factor at each step
    // Which evaluation levels run; subset of {neurons, sae, circuits,
    // attribution}. Stages for deselected levels are skipped.
    std::vector<std::string> levels{"neurons", "sae", "circuits", "attribution"};
    int categories = -1;  // class tasks to fan over; -1 means every class
    int top_k = 5;        // ranked units kept per category
    CircuitConfig circuits;
    double circuit_k_pen_sparse = 4e-5;
    int circuit_examples = 60;  // per-side cap on task images
    SaeTrainConfig sae;
    int attribution_steps = 50;
    int attribution_images = 100;
    uint64_t seed = 0;
    std::string out_dir = "runs/desk";
};

nlohmann::json experiment_to_json(const ExperimentConfig& cfg);
// Starts from defaults and overrides present keys; unknown keys error.
ExperimentConfig experiment_from_json(const nlohmann::json& j);
ExperimentConfig load_experiment_config(const std::string& path);
void save_experiment_config(const ExperimentConfig& cfg, const std::string& path);
void validate_experiment(const ExperimentConfig& cfg);

struct FileRecord {
    std::string path;  // relative to the run directory
    uint64_t bytes = 0;
    std::string hash;  // fnv1a64 of the file contents, hex
};

struct StageRecord {
    std::string status = "pending";  // done | cached | skipped | failed
    double seconds = 0.0;
    std::string input_hash;  // config + upstream artifacts fingerprint
    std::vector<FileRecord> outputs;
};

struct RunManifest {
    nlohmann::json config;
    bool complete = false;
    std::string failed_stage;
    std::vector<std::string> stage_order;
    std::map<std::string, StageRecord> stages;
};

extern const std::vector<std::string> kPipelineStages;  // data .. report

uint64_t file_checksum(const std::string& path);

nlohmann::json manifest_to_json(const RunManifest& m);
RunManifest manifest_from_json(const nlohmann::json& j);
void save_manifest(const RunManifest& m, const std::string& path);
RunManifest load_manifest(const std::string& path);

// Executes the listed stages in pipeline order, always running any missing
// prerequisite stages first. With resume=false the listed stages re-run even
// when cached copies verify; prerequisites are reused whenever their inputs
// and outputs check out. The manifest is rewritten after every stage; a
// stage failure persists it with complete=false and the failing stage named,
// then rethrows.
RunManifest run_stages(const ExperimentConfig& cfg, const std::vector<std::string>& stages,
                       bool resume);
RunManifest run_pipeline(const ExperimentConfig& cfg, bool resume = false);

// Writes the report tables (accuracy vs sparsity, SAE quality, per-model
// circuit results, attribution AUCs) and summary.json with per-model
// aggregate means and population standard deviations. Levels that were
// skipped produce header-only tables and zero-count aggregates.
void emit_report(const RunManifest& manifest);

// Model tag for one sparsity entry: "dense" for 0, else method + percent.
std::string sparsity_tag(const ExperimentConfig& cfg, double sparsity);

}  // namespace impact
