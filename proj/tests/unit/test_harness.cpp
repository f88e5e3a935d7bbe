#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "impact/data.hpp"
#include "impact/harness.hpp"
#include "impact/rng.hpp"

using namespace impact;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path test_root() {
    static const fs::path root = [] {
        fs::path p = fs::temp_directory_path() / "impact_harness_test";
        fs::remove_all(p);
        fs::create_directories(p);
        return p;
    }();
    return root;
}

ModelConfig micro_model() {
    ModelConfig mc;
    mc.image_size = 8;
    mc.patch_size = 4;
    mc.embed_dim = 16;
    mc.depth = 2;
    mc.heads = 2;
    mc.mlp_ratio = 2;
    mc.num_classes = 4;
    return mc;
}

Dataset micro_dataset(int per_class, const std::string& split, uint64_t salt) {
    const ModelConfig mc = micro_model();
    const int n = per_class * mc.num_classes;
    const int64_t hw = mc.image_size;
    std::vector<float> pixels(static_cast<size_t>(n) * hw * hw);
    for (size_t i = 0; i < pixels.size(); ++i)
        pixels[i] = float((i * 37 + salt * 11 + 5) % 256) / 255.0f;
    Dataset ds;
    ds.images = Tensor({n, 1, hw, hw}, std::move(pixels));
    ds.labels.resize(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) ds.labels[size_t(i)] = i % mc.num_classes;
    ds.num_classes = mc.num_classes;
    ds.split = split;
    ds.validate();
    return ds;
}

// Writes the source IDX files once; every config points at them.
fs::path source_dir() {
    static const fs::path dir = [] {
        fs::path d = test_root() / "src";
        fs::create_directories(d);
        Dataset tr = micro_dataset(6, "train", 1);
        Dataset va = micro_dataset(4, "val", 2);
        save_idx(tr, (d / "train-images.idx").string(), (d / "train-labels.idx").string());
        save_idx(va, (d / "val-images.idx").string(), (d / "val-labels.idx").string());
        return d;
    }();
    return dir;
}

ExperimentConfig micro_cfg(const std::string& out_name) {
    ExperimentConfig cfg;
    cfg.model = micro_model();
    cfg.data.source = "idx";
    cfg.data.train_images = (source_dir() / "train-images.idx").string();
    cfg.data.train_labels = (source_dir() / "train-labels.idx").string();
    cfg.data.val_images = (source_dir() / "val-images.idx").string();
    cfg.data.val_labels = (source_dir() / "val-labels.idx").string();
    cfg.sparsities = {0.0, 0.5};
    cfg.prune_method = "magnitude";
    cfg.train_epochs = 1;
    cfg.finetune_epochs = 1;
    cfg.batch_size = 8;
    cfg.levels = {"neurons", "sae", "circuits", "attribution"};
    cfg.categories = 2;
    cfg.top_k = 2;
    cfg.circuits.epochs = 1;
    cfg.circuits.batch_size = 4;
    cfg.circuit_examples = 4;
    cfg.sae.k_sae = 2;
    cfg.sae.expansion = 2;
    cfg.sae.epochs = 2;
    cfg.sae.batch_size = 8;
    cfg.attribution_steps = 2;
    cfg.attribution_images = 2;
    cfg.seed = 11;
    cfg.out_dir = (test_root() / out_name).string();
    return cfg;
}

std::string read_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

std::string first_line(const fs::path& path) {
    std::ifstream in(path);
    REQUIRE(in.good());
    std::string line;
    std::getline(in, line);
    return line;
}

int data_row_count(const fs::path& path) {
    std::ifstream in(path);
    REQUIRE(in.good());
    std::string line;
    int rows = -1;  // header does not count
    while (std::getline(in, line))
        if (!line.empty()) ++rows;
    return rows;
}

// Mean of one numeric column over rows whose first column matches tag (or all
// rows when tag is empty).
std::pair<int, double> column_mean(const fs::path& path, size_t col, const std::string& tag) {
    std::ifstream in(path);
    REQUIRE(in.good());
    std::string line;
    std::getline(in, line);
    int n = 0;
    double sum = 0.0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (!tag.empty() && cells.at(0) != tag) continue;
        sum += std::stod(cells.at(col));
        ++n;
    }
    return {n, n ? sum / n : 0.0};
}

json read_json(const fs::path& path) { return json::parse(read_bytes(path)); }

const std::string kStatusDone = "done";
const std::string kStatusCached = "cached";
const std::string kStatusSkipped = "skipped";

std::string stage_status(const RunManifest& m, const std::string& name) {
    auto it = m.stages.find(name);
    REQUIRE(it != m.stages.end());
    return it->second.status;
}

}  // namespace

TEST_CASE("experiment config json round trip") {
    ExperimentConfig cfg;
    cfg.seed = 42;
    cfg.sparsities = {0.0, 0.3};
    cfg.levels = {"sae", "circuits"};
    const json j = experiment_to_json(cfg);
    const ExperimentConfig back = experiment_from_json(j);
    CHECK(experiment_to_json(back).dump() == j.dump());
    CHECK(back.seed == 42);
    CHECK(back.sparsities == std::vector<double>{0.0, 0.3});
    CHECK(back.levels == std::vector<std::string>{"sae", "circuits"});
    CHECK(back.model.embed_dim == cfg.model.embed_dim);

    // partial json leaves defaults in place
    const ExperimentConfig sparse = experiment_from_json(json{{"seed", 9}});
    CHECK(sparse.seed == 9);
    CHECK(sparse.batch_size == cfg.batch_size);
    CHECK(sparse.sae.k_sae == cfg.sae.k_sae);

    json bad = experiment_to_json(cfg);
    bad["bogus"] = 1;
    CHECK_THROWS_WITH_AS(experiment_from_json(bad),
                         doctest::Contains("unknown key \"bogus\""), std::runtime_error);
    json bad_nested = experiment_to_json(cfg);
    bad_nested["sae"]["bogus"] = 1;
    CHECK_THROWS_WITH_AS(experiment_from_json(bad_nested), doctest::Contains("config.sae"),
                         std::runtime_error);
    json bad_data = experiment_to_json(cfg);
    bad_data["data"]["path"] = "x";
    CHECK_THROWS_WITH_AS(experiment_from_json(bad_data), doctest::Contains("config.data"),
                         std::runtime_error);
    json bad_model = experiment_to_json(cfg);
    bad_model["model"]["seed"] = 3;
    CHECK_THROWS_WITH_AS(experiment_from_json(bad_model), doctest::Contains("config.model"),
                         std::runtime_error);

    // a partial model section falls back to the architecture defaults
    const ExperimentConfig partial =
        experiment_from_json(json{{"model", {{"embed_dim", 32}}}});
    CHECK(partial.model.embed_dim == 32);
    CHECK(partial.model.depth == ModelConfig{}.depth);
}

TEST_CASE("experiment config validation") {
    CHECK_NOTHROW(validate_experiment(ExperimentConfig{}));

    auto broken = [](auto mutate) {
        ExperimentConfig cfg;
        mutate(cfg);
        return cfg;
    };
    CHECK_THROWS_AS(validate_experiment(broken([](ExperimentConfig& c) {
                        c.sparsities = {1.0};
                    })),
                    std::runtime_error);
    CHECK_THROWS_WITH_AS(validate_experiment(broken([](ExperimentConfig& c) {
                             c.sparsities = {0.5, 0.5};
                         })),
                         doctest::Contains("duplicate sparsity"), std::runtime_error);
    CHECK_THROWS_AS(validate_experiment(broken([](ExperimentConfig& c) {
                        c.sparsities = {};
                    })),
                    std::runtime_error);
    CHECK_THROWS_AS(validate_experiment(broken([](ExperimentConfig& c) {
                        c.prune_method = "l1";
                    })),
                    std::runtime_error);
    CHECK_THROWS_WITH_AS(validate_experiment(broken([](ExperimentConfig& c) {
                             c.levels = {"foo"};
                         })),
                         doctest::Contains("unknown level"), std::runtime_error);
    CHECK_THROWS_AS(validate_experiment(broken([](ExperimentConfig& c) {
                        c.levels = {"sae", "sae"};
                    })),
                    std::runtime_error);
    CHECK_THROWS_AS(validate_experiment(broken([](ExperimentConfig& c) { c.categories = 0; })),
                    std::runtime_error);
    CHECK_THROWS_AS(validate_experiment(broken([](ExperimentConfig& c) { c.top_k = 0; })),
                    std::runtime_error);
    CHECK_THROWS_AS(
        validate_experiment(broken([](ExperimentConfig& c) { c.circuit_examples = 1; })),
        std::runtime_error);
    CHECK_THROWS_AS(
        validate_experiment(broken([](ExperimentConfig& c) { c.attribution_steps = 1; })),
        std::runtime_error);
    CHECK_THROWS_AS(
        validate_experiment(broken([](ExperimentConfig& c) { c.attribution_steps = 65; })),
        std::runtime_error);
    // the shapes generator is fixed at 32x32 grayscale, 10 classes
    CHECK_THROWS_WITH_AS(validate_experiment(broken([](ExperimentConfig& c) {
                             c.model = micro_model();
                         })),
                         doctest::Contains("shapes"), std::runtime_error);
    CHECK_THROWS_AS(validate_experiment(broken([](ExperimentConfig& c) {
                        c.data.source = "idx";
                    })),
                    std::runtime_error);
    CHECK_THROWS_AS(validate_experiment(broken([](ExperimentConfig& c) {
                        c.data.source = "csv";
                    })),
                    std::runtime_error);
    CHECK_THROWS_AS(validate_experiment(broken([](ExperimentConfig& c) { c.out_dir = ""; })),
                    std::runtime_error);
}

TEST_CASE("sparsity tags and config files") {
    ExperimentConfig cfg;
    CHECK(sparsity_tag(cfg, 0.0) == "dense");
    CHECK(sparsity_tag(cfg, 0.5) == "magnitude50");
    CHECK(sparsity_tag(cfg, 0.07) == "magnitude7");
    cfg.prune_method = "wanda";
    CHECK(sparsity_tag(cfg, 0.3) == "wanda30");

    const fs::path dir = test_root() / "cfg";
    fs::create_directories(dir);
    cfg.seed = 123;
    save_experiment_config(cfg, (dir / "config.json").string());
    const ExperimentConfig back = load_experiment_config((dir / "config.json").string());
    CHECK(experiment_to_json(back).dump() == experiment_to_json(cfg).dump());

    CHECK_THROWS_WITH_AS(load_experiment_config((dir / "missing.json").string()),
                         doctest::Contains("cannot open"), std::runtime_error);
    std::ofstream((dir / "broken.json")) << "{ not json";
    CHECK_THROWS_WITH_AS(load_experiment_config((dir / "broken.json").string()),
                         doctest::Contains("parse error"), std::runtime_error);
}

TEST_CASE("file checksums track content") {
    const fs::path dir = test_root() / "sum";
    fs::create_directories(dir);
    std::ofstream(dir / "a.bin", std::ios::binary) << "abcdef";
    std::ofstream(dir / "b.bin", std::ios::binary) << "abcdeg";
    CHECK(file_checksum((dir / "a.bin").string()) == fnv1a64("abcdef"));
    CHECK(file_checksum((dir / "a.bin").string()) != file_checksum((dir / "b.bin").string()));
    CHECK_THROWS_AS(file_checksum((dir / "missing.bin").string()), std::runtime_error);
}

TEST_CASE("manifest json round trip") {
    RunManifest m;
    m.config = experiment_to_json(ExperimentConfig{});
    m.complete = false;
    m.failed_stage = "train";
    m.stage_order = kPipelineStages;
    StageRecord rec;
    rec.status = "done";
    rec.seconds = 1.25;
    rec.input_hash = "00ff";
    rec.outputs.push_back({"csv/a.csv", 10, "aabb"});
    m.stages["data"] = rec;

    const json j = manifest_to_json(m);
    const RunManifest back = manifest_from_json(j);
    CHECK(back.complete == m.complete);
    CHECK(back.failed_stage == "train");
    CHECK(back.stage_order == kPipelineStages);
    CHECK(back.stages.at("data").status == "done");
    CHECK(back.stages.at("data").seconds == doctest::Approx(1.25));
    CHECK(back.stages.at("data").outputs.size() == 1);
    CHECK(back.stages.at("data").outputs[0].path == "csv/a.csv");
    CHECK(back.stages.at("data").outputs[0].bytes == 10);
    CHECK(manifest_to_json(back).dump() == j.dump());

    const fs::path dir = test_root() / "manifest";
    fs::create_directories(dir);
    save_manifest(m, (dir / "m.json").string());
    const RunManifest loaded = load_manifest((dir / "m.json").string());
    CHECK(manifest_to_json(loaded).dump() == j.dump());

    json bad = j;
    bad["extra"] = 1;
    CHECK_THROWS_AS(manifest_from_json(bad), std::runtime_error);
    CHECK_THROWS_AS(load_manifest((dir / "missing.json").string()), std::runtime_error);
}

TEST_CASE("pipeline runs, reports, resumes, and reproduces") {
    const ExperimentConfig cfg = micro_cfg("runA");
    const fs::path out = cfg.out_dir;
    const RunManifest m = run_pipeline(cfg);

    CHECK(m.complete);
    CHECK(m.failed_stage.empty());
    for (const std::string& name : kPipelineStages) CHECK(stage_status(m, name) == kStatusDone);

    // artifacts are where the manifest says, with matching checksums
    for (const auto& [name, rec] : m.stages) {
        for (const FileRecord& f : rec.outputs) {
            const fs::path p = out / f.path;
            REQUIRE(fs::exists(p));
            CHECK(fs::file_size(p) == f.bytes);
        }
    }
    for (const char* rel :
         {"config.json", "manifest.json", "data/train-images.idx", "models/dense.ckpt",
          "models/magnitude50.ckpt", "models/sae_dense.ckpt", "csv/history_dense.csv",
          "csv/accuracy_magnitude50.csv", "csv/neurons_dense.csv", "csv/neurons_magnitude50.csv",
          "csv/sae_quality.csv", "csv/sae_features_dense.csv", "csv/circuits.csv",
          "csv/attribution.csv", "csv/attr_map_dense.csv", "report/accuracy_vs_sparsity.csv",
          "report/sae_quality.csv", "report/circuits_dense.csv", "report/circuits_magnitude50.csv",
          "report/attribution_auc.csv", "report/summary.json"})
        CHECK_MESSAGE(fs::exists(out / rel), rel);

    // report table shapes
    CHECK(first_line(out / "report/circuits_dense.csv") ==
          "category,node_pct,size_pct,acc,ablated_acc,ncq,seed");
    CHECK(first_line(out / "csv/neurons_dense.csv") ==
          "model,sparsity,category,block,site,unit,metric,value,flag");
    CHECK(data_row_count(out / "report/accuracy_vs_sparsity.csv") == 4);
    CHECK(data_row_count(out / "report/sae_quality.csv") == 2);
    CHECK(data_row_count(out / "report/circuits_dense.csv") == 2);
    CHECK(data_row_count(out / "report/circuits_magnitude50.csv") == 2);
    CHECK(data_row_count(out / "report/attribution_auc.csv") == 4);

    // summary aggregates must be recomputable from the csv rows
    const json summary = read_json(out / "report/summary.json");
    REQUIRE(summary.at("models").contains("dense"));
    REQUIRE(summary.at("models").contains("magnitude50"));
    const json& dense = summary.at("models").at("dense");
    CHECK(dense.at("sparsity").get<double>() == 0.0);
    CHECK(dense.at("circuits").at("count").get<int>() == 2);
    CHECK(dense.at("attribution").at("count").get<int>() == 2);
    CHECK(dense.at("sae").at("count").get<int>() == 1);
    CHECK(dense.at("accuracy").contains("val"));
    {
        auto [n, mean] = column_mean(out / "report/circuits_dense.csv", 5, "");
        CHECK(n == 2);
        CHECK(dense.at("circuits").at("ncq_mean").get<double>() == doctest::Approx(mean).epsilon(1e-12));
    }
    {
        auto [n, mean] = column_mean(out / "report/attribution_auc.csv", 4, "dense");
        CHECK(n == 2);
        CHECK(dense.at("attribution").at("insertion_auc_mean").get<double>() ==
              doctest::Approx(mean).epsilon(1e-12));
    }
    const json& sparse = summary.at("models").at("magnitude50");
    CHECK(sparse.at("sparsity").get<double>() == doctest::Approx(0.5));
    CHECK(sparse.at("circuits").at("count").get<int>() == 2);

    // a second run with the same seed produces byte-identical artifacts
    ExperimentConfig cfg_b = cfg;
    cfg_b.out_dir = (test_root() / "runB").string();
    const RunManifest mb = run_pipeline(cfg_b);
    CHECK(mb.complete);
    int compared = 0;
    for (const char* sub : {"data", "models", "csv", "report"}) {
        for (const auto& entry : fs::directory_iterator(out / sub)) {
            const fs::path rel = fs::path(sub) / entry.path().filename();
            REQUIRE(fs::exists(fs::path(cfg_b.out_dir) / rel));
            CHECK_MESSAGE(read_bytes(entry.path()) == read_bytes(fs::path(cfg_b.out_dir) / rel),
                          rel.string());
            ++compared;
        }
    }
    CHECK(compared > 20);

    // resume leaves every stage cached and the artifacts untouched
    const std::string circuits_bytes = read_bytes(out / "csv/circuits.csv");
    const RunManifest mr = run_pipeline(cfg, true);
    CHECK(mr.complete);
    for (const std::string& name : kPipelineStages)
        CHECK_MESSAGE(stage_status(mr, name) == kStatusCached, name);
    CHECK(read_bytes(out / "csv/circuits.csv") == circuits_bytes);

    // tampering with an output forces only that stage to re-run
    std::ofstream(out / "csv/circuits.csv", std::ios::app) << "tampered\n";
    const RunManifest mt = run_pipeline(cfg, true);
    CHECK(mt.complete);
    CHECK(stage_status(mt, "circuits") == kStatusDone);
    CHECK(stage_status(mt, "neurons") == kStatusCached);
    CHECK(stage_status(mt, "sae") == kStatusCached);
    CHECK(stage_status(mt, "report") == kStatusCached);
    CHECK(read_bytes(out / "csv/circuits.csv") == circuits_bytes);

    // deleting an artifact re-runs its producer, downstream stays cached
    fs::remove(out / "models/magnitude50.ckpt");
    const RunManifest md = run_pipeline(cfg, true);
    CHECK(md.complete);
    CHECK(stage_status(md, "prune") == kStatusDone);
    CHECK(stage_status(md, "circuits") == kStatusCached);
    CHECK(fs::exists(out / "models/magnitude50.ckpt"));

    // emit_report on the loaded manifest reproduces the summary byte for byte
    const std::string summary_bytes = read_bytes(out / "report/summary.json");
    const RunManifest loaded = load_manifest((out / "manifest.json").string());
    emit_report(loaded);
    CHECK(read_bytes(out / "report/summary.json") == summary_bytes);

    RunManifest truncated = loaded;
    truncated.stages.erase("train");
    CHECK_THROWS_WITH_AS(emit_report(truncated), doctest::Contains("has not completed"),
                         std::runtime_error);
}

TEST_CASE("dense-only grid skips pruning and empty levels emit headers") {
    ExperimentConfig cfg = micro_cfg("runC");
    cfg.sparsities = {0.0};
    cfg.levels = {};
    const fs::path out = cfg.out_dir;
    const RunManifest m = run_pipeline(cfg);

    CHECK(m.complete);
    CHECK(stage_status(m, "data") == kStatusDone);
    CHECK(stage_status(m, "train") == kStatusDone);
    CHECK(stage_status(m, "prune") == kStatusSkipped);
    for (const char* name : {"neurons", "sae", "circuits", "attribution"})
        CHECK(stage_status(m, name) == kStatusSkipped);
    CHECK(stage_status(m, "report") == kStatusDone);

    CHECK(!fs::exists(out / "models/magnitude50.ckpt"));
    CHECK(data_row_count(out / "report/accuracy_vs_sparsity.csv") == 2);
    CHECK(data_row_count(out / "report/sae_quality.csv") == 0);
    CHECK(data_row_count(out / "report/circuits_dense.csv") == 0);
    CHECK(data_row_count(out / "report/attribution_auc.csv") == 0);
    CHECK(first_line(out / "report/circuits_dense.csv") ==
          "category,node_pct,size_pct,acc,ablated_acc,ncq,seed");

    const json summary = read_json(out / "report/summary.json");
    const json& dense = summary.at("models").at("dense");
    CHECK(dense.at("circuits").at("count").get<int>() == 0);
    CHECK(!dense.at("circuits").contains("ncq_mean"));
    CHECK(dense.at("sae").at("count").get<int>() == 0);
    CHECK(dense.at("attribution").at("count").get<int>() == 0);
    CHECK(dense.at("accuracy").contains("train"));
}

TEST_CASE("stage failure leaves a flagged partial manifest") {
    ExperimentConfig cfg = micro_cfg("runD");
    cfg.data.val_images = (test_root() / "missing.idx").string();
    CHECK_THROWS_WITH_AS(run_pipeline(cfg), doctest::Contains("missing input"),
                         std::runtime_error);
    const RunManifest m = load_manifest((fs::path(cfg.out_dir) / "manifest.json").string());
    CHECK(!m.complete);
    CHECK(m.failed_stage == "data");
    CHECK(stage_status(m, "data") == "failed");
    CHECK(m.stages.count("train") == 0);
}

TEST_CASE("targeted stages run their prefix and honor resume") {
    ExperimentConfig cfg = micro_cfg("runE");
    cfg.sparsities = {0.0};
    cfg.levels = {};

    CHECK_THROWS_WITH_AS(run_stages(cfg, {"bogus"}, false), doctest::Contains("unknown stage"),
                         std::runtime_error);

    const RunManifest m1 = run_stages(cfg, {"train"}, false);
    CHECK(stage_status(m1, "train") == kStatusDone);
    CHECK(stage_status(m1, "data") == kStatusDone);
    CHECK(stage_status(m1, "prune") == kStatusSkipped);
    CHECK(stage_status(m1, "sae") == kStatusSkipped);
    CHECK(m1.stages.count("report") == 0);
    CHECK(!m1.complete);

    // prerequisites come from the cache, the target re-runs without --resume
    const RunManifest m2 = run_stages(cfg, {"train"}, false);
    CHECK(stage_status(m2, "data") == kStatusCached);
    CHECK(stage_status(m2, "train") == kStatusDone);

    const RunManifest m3 = run_stages(cfg, {"train"}, true);
    CHECK(stage_status(m3, "train") == kStatusCached);

    // the configured levels decide what runs, even for a named target
    const RunManifest m4 = run_stages(cfg, {"sae"}, true);
    CHECK(stage_status(m4, "sae") == kStatusSkipped);
    CHECK(!fs::exists(fs::path(cfg.out_dir) / "models/sae_dense.ckpt"));

    // enabling the level runs the stage on top of cached prerequisites
    ExperimentConfig cfg_sae = cfg;
    cfg_sae.levels = {"sae"};
    const RunManifest m5 = run_stages(cfg_sae, {"sae"}, true);
    CHECK(stage_status(m5, "data") == kStatusCached);
    CHECK(stage_status(m5, "train") == kStatusCached);
    CHECK(stage_status(m5, "neurons") == kStatusSkipped);
    CHECK(stage_status(m5, "sae") == kStatusDone);
    CHECK(fs::exists(fs::path(cfg_sae.out_dir) / "models/sae_dense.ckpt"));
}
