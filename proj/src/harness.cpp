#include "impact/harness.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "impact/attribution.hpp"
#include "impact/checkpoint.hpp"
#include "impact/data.hpp"
#include "impact/neuron_metrics.hpp"
#include "impact/pruning.hpp"
#include "impact/rng.hpp"

namespace impact {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

void ensure(bool ok, const std::string& msg) {
    if (!ok) throw std::runtime_error("harness: " + msg);
}

std::string format_value(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, 17);
    ensure(ec == std::errc(), "value formatting failed");
    return std::string(buf, end);
}

std::string hex64(uint64_t v) {
    char buf[17];
    for (int i = 15; i >= 0; --i) {
        buf[i] = "0123456789abcdef"[v & 0xf];
        v >>= 4;
    }
    buf[16] = '\0';
    return std::string(buf);
}

void require_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
    ensure(j.is_object(), where + " must be a JSON object");
    for (const auto& item : j.items())
        ensure(allowed.count(item.key()) > 0, "unknown key \"" + item.key() + "\" in " + where);
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    ensure(out.good(), "cannot open " + path.string());
    out << text;
    ensure(out.good(), "write failed: " + path.string());
}

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.push_back("");
    return cells;
}

CsvTable read_csv(const fs::path& path) {
    std::ifstream in(path);
    ensure(in.good(), "cannot open " + path.string());
    CsvTable t;
    std::string line;
    ensure(bool(std::getline(in, line)), "empty csv: " + path.string());
    t.header = split_csv_line(line);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        t.rows.push_back(split_csv_line(line));
    }
    return t;
}

size_t column_index(const CsvTable& t, const std::string& name, const fs::path& path) {
    for (size_t i = 0; i < t.header.size(); ++i)
        if (t.header[i] == name) return i;
    throw std::runtime_error("harness: column \"" + name + "\" missing in " + path.string());
}

struct Aggregate {
    int64_t count = 0;
    double mean = 0.0;
    double std_dev = 0.0;  // population
};

Aggregate aggregate(const std::vector<double>& xs) {
    Aggregate a;
    a.count = int64_t(xs.size());
    if (xs.empty()) return a;
    double s = 0.0;
    for (double x : xs) s += x;
    a.mean = s / double(xs.size());
    double q = 0.0;
    for (double x : xs) q += (x - a.mean) * (x - a.mean);
    a.std_dev = std::sqrt(q / double(xs.size()));
    return a;
}

// ---------------------------------------------------------------------------
// Config serialization

const std::set<std::string> kTopKeys = {
    "model",          "data",           "sparsities",
    "prune_method",   "train_epochs",   "finetune_epochs",
    "batch_size",     "lr",             "weight_decay",
    "lr_step",        "lr_gamma",
    "levels",         "categories",     "top_k",
    "circuits",       "circuit_k_pen_sparse", "circuit_examples",
    "sae",            "attribution_steps",    "attribution_images",
    "seed",           "out_dir"};

const std::set<std::string> kDataKeys = {"source",       "train_per_class", "val_per_class",
                                         "train_images", "train_labels",    "val_images",
                                         "val_labels"};

const std::set<std::string> kCircuitKeys = {"lr",       "epochs", "batch_size",
                                            "tau",      "k_pen",  "step_size",
                                            "gamma",    "init_mean", "init_std"};

const std::set<std::string> kSaeKeys = {"k_sae", "expansion", "epochs", "batch_size", "lr"};

const std::set<std::string> kLevelNames = {"neurons", "sae", "circuits", "attribution"};

const std::set<std::string> kModelKeys = {"image_size", "patch_size", "channels",
                                          "embed_dim",  "depth",      "heads",
                                          "mlp_ratio",  "num_classes", "layerscale_init"};

// The experiment schema describes only the architecture; the init seed is
// derived from the global seed at train time.
json model_section_to_json(const ModelConfig& mc) {
    json j = config_to_json(mc);
    j.erase("seed");
    return j;
}

ModelConfig model_section_from_json(const json& j) {
    require_keys(j, kModelKeys, "config.model");
    ModelConfig mc;
    mc.image_size = j.value("image_size", mc.image_size);
    mc.patch_size = j.value("patch_size", mc.patch_size);
    mc.channels = j.value("channels", mc.channels);
    mc.embed_dim = j.value("embed_dim", mc.embed_dim);
    mc.depth = j.value("depth", mc.depth);
    mc.heads = j.value("heads", mc.heads);
    mc.mlp_ratio = j.value("mlp_ratio", mc.mlp_ratio);
    mc.num_classes = j.value("num_classes", mc.num_classes);
    mc.layerscale_init = j.value("layerscale_init", mc.layerscale_init);
    return mc;
}

}  // namespace

nlohmann::json experiment_to_json(const ExperimentConfig& cfg) {
    json j;
    j["model"] = model_section_to_json(cfg.model);
    j["data"] = {{"source", cfg.data.source},
                 {"train_per_class", cfg.data.train_per_class},
                 {"val_per_class", cfg.data.val_per_class},
                 {"train_images", cfg.data.train_images},
                 {"train_labels", cfg.data.train_labels},
                 {"val_images", cfg.data.val_images},
                 {"val_labels", cfg.data.val_labels}};
    j["sparsities"] = cfg.sparsities;
    j["prune_method"] = cfg.prune_method;
    j["train_epochs"] = cfg.train_epochs;
    j["finetune_epochs"] = cfg.finetune_epochs;
    j["batch_size"] = cfg.batch_size;
    j["lr"] = cfg.lr;
    j["weight_decay"] = cfg.weight_decay;
    j["lr_step"] = cfg.lr_step;
    j["lr_gamma"] = cfg.lr_gamma;
    j["levels"] = cfg.levels;
    j["categories"] = cfg.categories;
    j["top_k"] = cfg.top_k;
    // Per-stage seeds are derived from the global seed at run time, so the
    // nested configs carry no seed fields.
    j["circuits"] = {{"lr", cfg.circuits.lr},
                     {"epochs", cfg.circuits.epochs},
                     {"batch_size", cfg.circuits.batch_size},
                     {"tau", cfg.circuits.tau},
                     {"k_pen", cfg.circuits.k_pen},
                     {"step_size", cfg.circuits.step_size},
                     {"gamma", cfg.circuits.gamma},
                     {"init_mean", cfg.circuits.init_mean},
                     {"init_std", cfg.circuits.init_std}};
    j["circuit_k_pen_sparse"] = cfg.circuit_k_pen_sparse;
    j["circuit_examples"] = cfg.circuit_examples;
    j["sae"] = {{"k_sae", cfg.sae.k_sae},
                {"expansion", cfg.sae.expansion},
                {"epochs", cfg.sae.epochs},
                {"batch_size", cfg.sae.batch_size},
                {"lr", cfg.sae.lr}};
    j["attribution_steps"] = cfg.attribution_steps;
    j["attribution_images"] = cfg.attribution_images;
    j["seed"] = cfg.seed;
    j["out_dir"] = cfg.out_dir;
    return j;
}

ExperimentConfig experiment_from_json(const nlohmann::json& j) {
    ExperimentConfig cfg;
    require_keys(j, kTopKeys, "config");
    if (j.contains("model")) cfg.model = model_section_from_json(j.at("model"));
    if (j.contains("data")) {
        const json& d = j.at("data");
        require_keys(d, kDataKeys, "config.data");
        cfg.data.source = d.value("source", cfg.data.source);
        cfg.data.train_per_class = d.value("train_per_class", cfg.data.train_per_class);
        cfg.data.val_per_class = d.value("val_per_class", cfg.data.val_per_class);
        cfg.data.train_images = d.value("train_images", cfg.data.train_images);
        cfg.data.train_labels = d.value("train_labels", cfg.data.train_labels);
        cfg.data.val_images = d.value("val_images", cfg.data.val_images);
        cfg.data.val_labels = d.value("val_labels", cfg.data.val_labels);
    }
    if (j.contains("sparsities"))
        cfg.sparsities = j.at("sparsities").get<std::vector<double>>();
    cfg.prune_method = j.value("prune_method", cfg.prune_method);
    cfg.train_epochs = j.value("train_epochs", cfg.train_epochs);
    cfg.finetune_epochs = j.value("finetune_epochs", cfg.finetune_epochs);
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.lr = j.value("lr", cfg.lr);
    cfg.weight_decay = j.value("weight_decay", cfg.weight_decay);
    cfg.lr_step = j.value("lr_step", cfg.lr_step);
    cfg.lr_gamma = j.value("lr_gamma", cfg.lr_gamma);
    if (j.contains("levels")) cfg.levels = j.at("levels").get<std::vector<std::string>>();
    cfg.categories = j.value("categories", cfg.categories);
    cfg.top_k = j.value("top_k", cfg.top_k);
    if (j.contains("circuits")) {
        const json& c = j.at("circuits");
        require_keys(c, kCircuitKeys, "config.circuits");
        cfg.circuits.lr = c.value("lr", cfg.circuits.lr);
        cfg.circuits.epochs = c.value("epochs", cfg.circuits.epochs);
        cfg.circuits.batch_size = c.value("batch_size", cfg.circuits.batch_size);
        cfg.circuits.tau = c.value("tau", cfg.circuits.tau);
        cfg.circuits.k_pen = c.value("k_pen", cfg.circuits.k_pen);
        cfg.circuits.step_size = c.value("step_size", cfg.circuits.step_size);
        cfg.circuits.gamma = c.value("gamma", cfg.circuits.gamma);
        cfg.circuits.init_mean = c.value("init_mean", cfg.circuits.init_mean);
        cfg.circuits.init_std = c.value("init_std", cfg.circuits.init_std);
    }
    cfg.circuit_k_pen_sparse = j.value("circuit_k_pen_sparse", cfg.circuit_k_pen_sparse);
    cfg.circuit_examples = j.value("circuit_examples", cfg.circuit_examples);
    if (j.contains("sae")) {
        const json& s = j.at("sae");
        require_keys(s, kSaeKeys, "config.sae");
        cfg.sae.k_sae = s.value("k_sae", cfg.sae.k_sae);
        cfg.sae.expansion = s.value("expansion", cfg.sae.expansion);
        cfg.sae.epochs = s.value("epochs", cfg.sae.epochs);
        cfg.sae.batch_size = s.value("batch_size", cfg.sae.batch_size);
        cfg.sae.lr = s.value("lr", cfg.sae.lr);
    }
    cfg.attribution_steps = j.value("attribution_steps", cfg.attribution_steps);
    cfg.attribution_images = j.value("attribution_images", cfg.attribution_images);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.out_dir = j.value("out_dir", cfg.out_dir);
    validate_experiment(cfg);
    return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream in(path);
    ensure(in.good(), "cannot open config " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw std::runtime_error("harness: config parse error in " + path + ": " + e.what());
    }
    return experiment_from_json(j);
}

void save_experiment_config(const ExperimentConfig& cfg, const std::string& path) {
    write_text(path, experiment_to_json(cfg).dump(2) + "\n");
}

std::string sparsity_tag(const ExperimentConfig& cfg, double sparsity) {
    if (sparsity == 0.0) return "dense";
    return cfg.prune_method + std::to_string(int(std::llround(sparsity * 100.0)));
}

void validate_experiment(const ExperimentConfig& cfg) {
    cfg.model.validate();
    ensure(cfg.data.source == "shapes" || cfg.data.source == "idx",
           "data.source must be \"shapes\" or \"idx\"");
    if (cfg.data.source == "shapes") {
        ensure(cfg.model.image_size == 32 && cfg.model.channels == 1 &&
                   cfg.model.num_classes == 10,
               "the shapes source generates 32x32 grayscale images over 10 classes");
        ensure(cfg.data.train_per_class >= 1 && cfg.data.val_per_class >= 1,
               "per-class counts must be >= 1");
    } else {
        ensure(!cfg.data.train_images.empty() && !cfg.data.train_labels.empty() &&
                   !cfg.data.val_images.empty() && !cfg.data.val_labels.empty(),
               "idx source needs all four file paths");
    }
    ensure(!cfg.sparsities.empty(), "sparsity grid is empty");
    std::set<std::string> tags;
    for (double s : cfg.sparsities) {
        ensure(s >= 0.0 && s < 1.0, "sparsity values must lie in [0, 1)");
        ensure(tags.insert(sparsity_tag(cfg, s)).second,
               "duplicate sparsity entry " + sparsity_tag(cfg, s));
    }
    ensure(cfg.prune_method == "magnitude" || cfg.prune_method == "wanda",
           "prune_method must be \"magnitude\" or \"wanda\"");
    ensure(cfg.train_epochs >= 0 && cfg.finetune_epochs >= 0, "epoch counts must be >= 0");
    ensure(cfg.batch_size >= 1, "batch_size must be >= 1");
    ensure(cfg.lr > 0.0, "lr must be positive");
    ensure(cfg.weight_decay >= 0.0, "weight_decay must be >= 0");
    ensure(cfg.lr_step >= 0, "lr_step must be >= 0");
    ensure(cfg.lr_gamma > 0.0 && cfg.lr_gamma <= 1.0, "lr_gamma must be in (0, 1]");
    std::set<std::string> seen;
    for (const std::string& level : cfg.levels) {
        ensure(kLevelNames.count(level) > 0, "unknown level \"" + level + "\"");
        ensure(seen.insert(level).second, "duplicate level \"" + level + "\"");
    }
    ensure(cfg.categories == -1 || cfg.categories >= 1, "categories must be -1 or >= 1");
    ensure(cfg.top_k >= 1, "top_k must be >= 1");
    ensure(cfg.circuit_k_pen_sparse >= 0.0, "circuit_k_pen_sparse must be >= 0");
    ensure(cfg.circuit_examples >= 2, "circuit_examples must be >= 2");
    ensure(cfg.attribution_steps >= 2 && int64_t(cfg.attribution_steps) <= cfg.model.patch_count(),
           "attribution_steps must lie in [2, patch_count]");
    ensure(cfg.attribution_images >= 1, "attribution_images must be >= 1");
    ensure(!cfg.out_dir.empty(), "out_dir is empty");
}

uint64_t file_checksum(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    ensure(in.good(), "cannot open " + path);
    uint64_t h = 0xcbf29ce484222325ull;
    char buf[1 << 16];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0)
        h = fnv1a64(buf, size_t(in.gcount()), h);
    return h;
}

// ---------------------------------------------------------------------------
// Manifest serialization

nlohmann::json manifest_to_json(const RunManifest& m) {
    json j;
    j["version"] = 1;
    j["config"] = m.config;
    j["complete"] = m.complete;
    j["failed_stage"] = m.failed_stage;
    j["stage_order"] = m.stage_order;
    json stages = json::object();
    for (const auto& [name, rec] : m.stages) {
        json outputs = json::array();
        for (const FileRecord& f : rec.outputs)
            outputs.push_back({{"path", f.path}, {"bytes", f.bytes}, {"hash", f.hash}});
        stages[name] = {{"status", rec.status},
                        {"seconds", rec.seconds},
                        {"input_hash", rec.input_hash},
                        {"outputs", outputs}};
    }
    j["stages"] = stages;
    return j;
}

RunManifest manifest_from_json(const nlohmann::json& j) {
    require_keys(j, {"version", "config", "complete", "failed_stage", "stage_order", "stages"},
                 "manifest");
    RunManifest m;
    m.config = j.at("config");
    m.complete = j.at("complete").get<bool>();
    m.failed_stage = j.at("failed_stage").get<std::string>();
    m.stage_order = j.at("stage_order").get<std::vector<std::string>>();
    for (const auto& item : j.at("stages").items()) {
        StageRecord rec;
        const json& r = item.value();
        rec.status = r.at("status").get<std::string>();
        rec.seconds = r.at("seconds").get<double>();
        rec.input_hash = r.at("input_hash").get<std::string>();
        for (const json& f : r.at("outputs")) {
            FileRecord fr;
            fr.path = f.at("path").get<std::string>();
            fr.bytes = f.at("bytes").get<uint64_t>();
            fr.hash = f.at("hash").get<std::string>();
            rec.outputs.push_back(std::move(fr));
        }
        m.stages[item.key()] = std::move(rec);
    }
    return m;
}

void save_manifest(const RunManifest& m, const std::string& path) {
    write_text(path, manifest_to_json(m).dump(2) + "\n");
}

RunManifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    ensure(in.good(), "cannot open manifest " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw std::runtime_error("harness: manifest parse error in " + path + ": " + e.what());
    }
    return manifest_from_json(j);
}

// ---------------------------------------------------------------------------
// Stage bodies

const std::vector<std::string> kPipelineStages = {"data",     "train", "prune",
                                                  "neurons",  "sae",   "circuits",
                                                  "attribution", "report"};

namespace {

struct TagEntry {
    std::string tag;
    double sparsity = 0.0;
};

std::vector<TagEntry> grid_tags(const ExperimentConfig& cfg) {
    std::vector<TagEntry> tags;
    for (double s : cfg.sparsities) tags.push_back({sparsity_tag(cfg, s), s});
    return tags;
}

bool has_sparse(const ExperimentConfig& cfg) {
    return std::any_of(cfg.sparsities.begin(), cfg.sparsities.end(),
                       [](double s) { return s > 0.0; });
}

bool level_on(const ExperimentConfig& cfg, const std::string& level) {
    return std::find(cfg.levels.begin(), cfg.levels.end(), level) != cfg.levels.end();
}

std::vector<int> category_list(const ExperimentConfig& cfg) {
    int count = cfg.categories == -1 ? cfg.model.num_classes
                                     : std::min(cfg.categories, cfg.model.num_classes);
    std::vector<int> cats;
    for (int c = 0; c < count; ++c) cats.push_back(c);
    return cats;
}

std::string model_file(const TagEntry& t) { return "models/" + t.tag + ".ckpt"; }

const std::vector<std::string> kDataFiles = {"data/train-images.idx", "data/train-labels.idx",
                                             "data/val-images.idx", "data/val-labels.idx"};

std::vector<std::string> model_inputs(const ExperimentConfig& cfg) {
    std::vector<std::string> in = kDataFiles;
    in.push_back("models/dense.ckpt");
    for (const TagEntry& t : grid_tags(cfg))
        if (t.sparsity > 0.0) in.push_back(model_file(t));
    return in;
}

struct StageCtx {
    const ExperimentConfig& cfg;
    fs::path out;
    RunManifest& manifest;
};

Dataset load_split(const StageCtx& ctx, bool train_split) {
    const char* img = train_split ? "data/train-images.idx" : "data/val-images.idx";
    const char* lab = train_split ? "data/train-labels.idx" : "data/val-labels.idx";
    return load_idx((ctx.out / img).string(), (ctx.out / lab).string(),
                    train_split ? "train" : "val");
}

void check_dataset_matches(const ExperimentConfig& cfg, const Dataset& ds) {
    ensure(ds.num_classes == cfg.model.num_classes, "dataset class count differs from model");
    ensure(ds.images.dim(1) == cfg.model.channels && ds.images.dim(2) == cfg.model.image_size &&
               ds.images.dim(3) == cfg.model.image_size,
           "dataset image shape differs from model");
}

std::string accuracy_rows(const VitModel& model, const Dataset& tr, const Dataset& va,
                          const std::string& tag, double sparsity) {
    std::string text = "model,sparsity,split,accuracy\n";
    text += tag + "," + format_value(sparsity) + ",train," +
            format_value(evaluate(model, tr)) + "\n";
    text += tag + "," + format_value(sparsity) + ",val," + format_value(evaluate(model, va)) +
            "\n";
    return text;
}

std::string history_csv(const TrainHistory& hist) {
    std::string text = "epoch,train_loss,train_acc,val_acc\n";
    for (size_t e = 0; e < hist.train_loss.size(); ++e)
        text += std::to_string(e) + "," + format_value(hist.train_loss[e]) + "," +
                format_value(hist.train_acc[e]) + "," + format_value(hist.val_acc[e]) + "\n";
    return text;
}

std::vector<std::string> stage_data(const StageCtx& ctx) {
    const ExperimentConfig& cfg = ctx.cfg;
    Dataset tr, va;
    if (cfg.data.source == "shapes") {
        tr = generate_shapes(derive_seed(cfg.seed, "data", 0), cfg.data.train_per_class, "train");
        va = generate_shapes(derive_seed(cfg.seed, "data", 1), cfg.data.val_per_class, "val");
    } else {
        for (const std::string& p : {cfg.data.train_images, cfg.data.train_labels,
                                     cfg.data.val_images, cfg.data.val_labels})
            ensure(fs::exists(p), "missing input file " + p);
        tr = load_idx(cfg.data.train_images, cfg.data.train_labels, "train");
        va = load_idx(cfg.data.val_images, cfg.data.val_labels, "val");
    }
    check_dataset_matches(cfg, tr);
    check_dataset_matches(cfg, va);
    save_idx(tr, (ctx.out / kDataFiles[0]).string(), (ctx.out / kDataFiles[1]).string());
    save_idx(va, (ctx.out / kDataFiles[2]).string(), (ctx.out / kDataFiles[3]).string());
    return kDataFiles;
}

std::vector<std::string> stage_train(const StageCtx& ctx) {
    const ExperimentConfig& cfg = ctx.cfg;
    Dataset tr = load_split(ctx, true);
    Dataset va = load_split(ctx, false);
    ModelConfig mc = cfg.model;
    mc.seed = derive_seed(cfg.seed, "model_init");
    VitModel model = VitModel::init(mc);
    TrainConfig tc;
    tc.epochs = cfg.train_epochs;
    tc.batch_size = cfg.batch_size;
    tc.opt = OptimizerConfig{.kind = "adamw", .lr = cfg.lr, .weight_decay = cfg.weight_decay};
    tc.lr_step = cfg.lr_step;
    tc.lr_gamma = cfg.lr_gamma;
    tc.seed = derive_seed(cfg.seed, "train");
    TrainHistory hist = train(model, tr, va, tc);
    save_model(model, (ctx.out / "models/dense.ckpt").string());
    write_text(ctx.out / "csv/history_dense.csv", history_csv(hist));
    write_text(ctx.out / "csv/accuracy_dense.csv", accuracy_rows(model, tr, va, "dense", 0.0));
    return {"models/dense.ckpt", "csv/history_dense.csv", "csv/accuracy_dense.csv"};
}

std::vector<std::string> stage_prune(const StageCtx& ctx) {
    const ExperimentConfig& cfg = ctx.cfg;
    Dataset tr = load_split(ctx, true);
    Dataset va = load_split(ctx, false);
    std::vector<std::string> produced;
    int index = 0;
    for (const TagEntry& t : grid_tags(cfg)) {
        if (t.sparsity == 0.0) continue;
        VitModel model = load_model((ctx.out / "models/dense.ckpt").string());
        PruneMask mask;
        if (cfg.prune_method == "magnitude") {
            mask = magnitude_prune(model, t.sparsity);
        } else {
            const int64_t calib = std::min<int64_t>(100, tr.size());
            std::vector<int64_t> idx(static_cast<size_t>(calib));
            for (int64_t i = 0; i < calib; ++i) idx[size_t(i)] = i;
            ActivationNorms norms = collect_activation_norms(model, gather_images(tr, idx));
            mask = wanda_prune(model, norms, t.sparsity);
        }
        apply_prune_mask(model, mask);
        TrainConfig tc;
        tc.epochs = cfg.finetune_epochs;
        tc.batch_size = cfg.batch_size;
        tc.opt = OptimizerConfig{.kind = "adamw", .lr = cfg.lr, .weight_decay = cfg.weight_decay};
        tc.seed = derive_seed(cfg.seed, "finetune", index++);
        TrainHistory hist = train(model, tr, va, tc, &mask.masks);
        save_pruned_model(model, mask, (ctx.out / model_file(t)).string());
        write_text(ctx.out / ("csv/history_" + t.tag + ".csv"), history_csv(hist));
        write_text(ctx.out / ("csv/accuracy_" + t.tag + ".csv"),
                   accuracy_rows(model, tr, va, t.tag, t.sparsity));
        produced.push_back(model_file(t));
        produced.push_back("csv/history_" + t.tag + ".csv");
        produced.push_back("csv/accuracy_" + t.tag + ".csv");
    }
    return produced;
}

std::vector<std::string> stage_neurons(const StageCtx& ctx) {
    const ExperimentConfig& cfg = ctx.cfg;
    Dataset tr = load_split(ctx, true);
    Dataset va = load_split(ctx, false);
    const std::vector<int> cats = category_list(cfg);
    std::vector<std::string> produced;
    for (const TagEntry& t : grid_tags(cfg)) {
        VitModel model = load_model((ctx.out / model_file(t)).string());
        MeanCache cache = compute_mean_cache(model, tr);
        MetricReport all;
        for (int cat : cats) {
            BinaryTask task = make_binary_task(va, cat, derive_seed(cfg.seed, "neuron_task", cat));
            for (int b = 0; b < cfg.model.depth; ++b) {
                MetricReport rep = category_site_report(model, va, task,
                                                        HookSite{b, SiteTag::mlp_act}, cache,
                                                        cfg.top_k, t.tag, t.sparsity);
                all.rows.insert(all.rows.end(), rep.rows.begin(), rep.rows.end());
            }
        }
        const std::string file = "csv/neurons_" + t.tag + ".csv";
        write_metric_csv(all, (ctx.out / file).string());
        produced.push_back(file);
    }
    return produced;
}

std::vector<std::string> stage_sae(const StageCtx& ctx) {
    const ExperimentConfig& cfg = ctx.cfg;
    Dataset tr = load_split(ctx, true);
    Dataset va = load_split(ctx, false);
    const std::vector<int> cats = category_list(cfg);
    const HookSite hook{cfg.model.depth - 1, SiteTag::resid};
    std::string quality = "model,sparsity,nmse,fve,dead_fraction,active_count,final_loss\n";
    std::vector<std::string> produced;
    for (const TagEntry& t : grid_tags(cfg)) {
        VitModel model = load_model((ctx.out / model_file(t)).string());
        Tensor acts = collect_sae_inputs(model, tr.images, hook, 0);
        SaeTrainConfig sc = cfg.sae;
        sc.seed = derive_seed(cfg.seed, "sae_" + t.tag);
        SaeTrainResult res = train_sae(acts, sc, hook, 0);
        const std::string ckpt = "models/sae_" + t.tag + ".ckpt";
        save_sae(res.sae, (ctx.out / ckpt).string());
        const SaeQuality q = res.quality.empty() ? sae_quality(res.sae, acts)
                                                 : res.quality.back();
        const double final_loss = res.loss.empty() ? 0.0 : res.loss.back();
        quality += t.tag + "," + format_value(t.sparsity) + "," + format_value(q.nmse) + "," +
                   format_value(q.fve) + "," + format_value(q.dead_fraction) + "," +
                   std::to_string(q.active_count) + "," + format_value(final_loss) + "\n";
        MetricReport features = sae_feature_metrics(model, res.sae, va, cats, cfg.top_k,
                                                    derive_seed(cfg.seed, "sae_task"), t.tag,
                                                    t.sparsity);
        const std::string file = "csv/sae_features_" + t.tag + ".csv";
        write_metric_csv(features, (ctx.out / file).string());
        produced.push_back(ckpt);
        produced.push_back(file);
    }
    write_text(ctx.out / "csv/sae_quality.csv", quality);
    produced.push_back("csv/sae_quality.csv");
    return produced;
}

std::vector<std::string> stage_circuits(const StageCtx& ctx) {
    const ExperimentConfig& cfg = ctx.cfg;
    Dataset tr = load_split(ctx, true);
    const std::vector<int> cats = category_list(cfg);
    std::vector<CircuitResult> all;
    for (const TagEntry& t : grid_tags(cfg)) {
        VitModel model = load_model((ctx.out / model_file(t)).string());
        MeanCache cache = compute_mean_cache(model, tr);
        for (int cat : cats) {
            BinaryTask task = make_binary_task(tr, cat, derive_seed(cfg.seed, "circuit_task", cat));
            const size_t cap = static_cast<size_t>(cfg.circuit_examples);
            if (task.positives.size() > cap) task.positives.resize(cap);
            if (task.negatives.size() > cap) task.negatives.resize(cap);
            CircuitConfig cc = cfg.circuits;
            cc.k_pen = t.sparsity == 0.0 ? cfg.circuits.k_pen : cfg.circuit_k_pen_sparse;
            cc.seed = derive_seed(cfg.seed, "circuits_" + t.tag, cat);
            CircuitResult r = optimize_circuit(model, tr, task, cache, cc);
            r.model_tag = t.tag;
            r.sparsity = t.sparsity;
            all.push_back(std::move(r));
        }
    }
    write_circuit_csv(all, (ctx.out / "csv/circuits.csv").string());
    return {"csv/circuits.csv"};
}

std::vector<std::string> stage_attribution(const StageCtx& ctx) {
    const ExperimentConfig& cfg = ctx.cfg;
    Dataset va = load_split(ctx, false);
    const int64_t count = std::min<int64_t>(cfg.attribution_images, va.size());
    std::string rows =
        "model,sparsity,image,category,insertion_auc,deletion_auc,"
        "insertion_random,deletion_random\n";
    std::vector<std::string> produced;
    for (const TagEntry& t : grid_tags(cfg)) {
        VitModel model = load_model((ctx.out / model_file(t)).string());
        for (int64_t i = 0; i < count; ++i) {
            const int64_t one[] = {i};
            Tensor img = gather_images(va, one);
            const int label = va.labels[size_t(i)];
            AttributionMap map = transformer_attribution(model, img, label);
            FaithfulnessCurve ins = insertion_auc(model, img, map, label, cfg.attribution_steps);
            FaithfulnessCurve del = deletion_auc(model, img, map, label, cfg.attribution_steps);
            // The random reference order is derived per image, not per model,
            // so comparisons stay paired across the sparsity grid.
            AttributionMap rnd;
            rnd.category = label;
            Rng rng(derive_seed(cfg.seed, "attribution_random", i));
            rnd.patch_scores = rng.normal_tensor({cfg.model.patch_count()});
            FaithfulnessCurve ins_r = insertion_auc(model, img, rnd, label, cfg.attribution_steps);
            FaithfulnessCurve del_r = deletion_auc(model, img, rnd, label, cfg.attribution_steps);
            rows += t.tag + "," + format_value(t.sparsity) + "," + std::to_string(i) + "," +
                    std::to_string(label) + "," + format_value(ins.auc) + "," +
                    format_value(del.auc) + "," + format_value(ins_r.auc) + "," +
                    format_value(del_r.auc) + "\n";
            if (i == 0) {
                write_attribution_csv(map, (ctx.out / ("csv/attr_map_" + t.tag + ".csv")).string());
                write_curve_csv(ins,
                                (ctx.out / ("csv/attr_insertion_" + t.tag + ".csv")).string());
                write_curve_csv(del,
                                (ctx.out / ("csv/attr_deletion_" + t.tag + ".csv")).string());
                produced.push_back("csv/attr_map_" + t.tag + ".csv");
                produced.push_back("csv/attr_insertion_" + t.tag + ".csv");
                produced.push_back("csv/attr_deletion_" + t.tag + ".csv");
            }
        }
    }
    write_text(ctx.out / "csv/attribution.csv", rows);
    produced.push_back("csv/attribution.csv");
    return produced;
}

std::vector<std::string> stage_report(const StageCtx& ctx) {
    emit_report(ctx.manifest);
    const ExperimentConfig& cfg = ctx.cfg;
    std::vector<std::string> produced = {"report/accuracy_vs_sparsity.csv",
                                         "report/sae_quality.csv", "report/attribution_auc.csv",
                                         "report/summary.json"};
    for (const TagEntry& t : grid_tags(cfg)) produced.push_back("report/circuits_" + t.tag + ".csv");
    return produced;
}

// ---------------------------------------------------------------------------
// Stage table and runner

struct StageDef {
    std::string name;
    bool (*enabled)(const ExperimentConfig&);
    std::vector<std::string> (*inputs)(const ExperimentConfig&);
    // The part of the config this stage actually consumes; edits outside the
    // slice leave cached results valid.
    json (*slice)(const ExperimentConfig&);
    std::vector<std::string> (*run)(const StageCtx&);
};

std::vector<std::string> no_inputs(const ExperimentConfig&) { return {}; }
std::vector<std::string> data_only(const ExperimentConfig&) { return kDataFiles; }
std::vector<std::string> data_and_dense(const ExperimentConfig&) {
    std::vector<std::string> in = kDataFiles;
    in.push_back("models/dense.ckpt");
    return in;
}
bool always(const ExperimentConfig&) { return true; }

json grid_slice(const ExperimentConfig& c) {
    return {{"seed", c.seed}, {"sparsities", c.sparsities}, {"prune_method", c.prune_method}};
}

json task_slice(const ExperimentConfig& c) {
    json j = grid_slice(c);
    j["model"] = model_section_to_json(c.model);
    j["categories"] = c.categories;
    j["top_k"] = c.top_k;
    return j;
}

const std::vector<StageDef>& stage_defs() {
    static const std::vector<StageDef> defs = {
        {"data", always, no_inputs,
         [](const ExperimentConfig& c) {
             return json{{"seed", c.seed},
                         {"model", model_section_to_json(c.model)},
                         {"data",
                          {{"source", c.data.source},
                           {"train_per_class", c.data.train_per_class},
                           {"val_per_class", c.data.val_per_class},
                           {"train_images", c.data.train_images},
                           {"train_labels", c.data.train_labels},
                           {"val_images", c.data.val_images},
                           {"val_labels", c.data.val_labels}}}};
         },
         stage_data},
        {"train", always, data_only,
         [](const ExperimentConfig& c) {
             return json{{"seed", c.seed},
                         {"model", model_section_to_json(c.model)},
                         {"train_epochs", c.train_epochs},
                         {"batch_size", c.batch_size},
                         {"lr", c.lr},
                         {"weight_decay", c.weight_decay}};
         },
         stage_train},
        {"prune", [](const ExperimentConfig& c) { return has_sparse(c); }, data_and_dense,
         [](const ExperimentConfig& c) {
             json j = grid_slice(c);
             j["model"] = model_section_to_json(c.model);
             j["finetune_epochs"] = c.finetune_epochs;
             j["batch_size"] = c.batch_size;
             j["lr"] = c.lr;
             j["weight_decay"] = c.weight_decay;
             return j;
         },
         stage_prune},
        {"neurons", [](const ExperimentConfig& c) { return level_on(c, "neurons"); },
         model_inputs, task_slice, stage_neurons},
        {"sae", [](const ExperimentConfig& c) { return level_on(c, "sae"); }, model_inputs,
         [](const ExperimentConfig& c) {
             json j = task_slice(c);
             j["sae"] = {{"k_sae", c.sae.k_sae},
                         {"expansion", c.sae.expansion},
                         {"epochs", c.sae.epochs},
                         {"batch_size", c.sae.batch_size},
                         {"lr", c.sae.lr}};
             return j;
         },
         stage_sae},
        {"circuits", [](const ExperimentConfig& c) { return level_on(c, "circuits"); },
         model_inputs,
         [](const ExperimentConfig& c) {
             json j = task_slice(c);
             j["circuits"] = {{"lr", c.circuits.lr},
                              {"epochs", c.circuits.epochs},
                              {"batch_size", c.circuits.batch_size},
                              {"tau", c.circuits.tau},
                              {"k_pen", c.circuits.k_pen},
                              {"step_size", c.circuits.step_size},
                              {"gamma", c.circuits.gamma},
                              {"init_mean", c.circuits.init_mean},
                              {"init_std", c.circuits.init_std}};
             j["circuit_k_pen_sparse"] = c.circuit_k_pen_sparse;
             j["circuit_examples"] = c.circuit_examples;
             return j;
         },
         stage_circuits},
        {"attribution", [](const ExperimentConfig& c) { return level_on(c, "attribution"); },
         model_inputs,
         [](const ExperimentConfig& c) {
             json j = grid_slice(c);
             j["model"] = model_section_to_json(c.model);
             j["attribution_steps"] = c.attribution_steps;
             j["attribution_images"] = c.attribution_images;
             return j;
         },
         stage_attribution},
        {"report", always, no_inputs, grid_slice, stage_report},
    };
    return defs;
}

std::string stage_input_hash(const StageDef& def, const ExperimentConfig& cfg,
                             const fs::path& out, const RunManifest& manifest) {
    uint64_t h = fnv1a64(def.name);
    h = fnv1a64(def.slice(cfg).dump(), h);
    if (def.name == "report") {
        // The report depends on everything upstream; fingerprint the recorded
        // outputs of every earlier stage instead of a fixed file list.
        for (const std::string& stage : kPipelineStages) {
            if (stage == "report") break;
            auto it = manifest.stages.find(stage);
            if (it == manifest.stages.end()) continue;
            h = fnv1a64(stage, h);
            for (const FileRecord& f : it->second.outputs) {
                h = fnv1a64(f.path, h);
                h = fnv1a64(f.hash, h);
            }
        }
        return hex64(h);
    }
    for (const std::string& rel : def.inputs(cfg)) {
        const fs::path p = out / rel;
        ensure(fs::exists(p), "stage " + def.name + ": missing input " + rel);
        h = fnv1a64(rel, h);
        const uint64_t fh = file_checksum(p.string());
        h = fnv1a64(&fh, sizeof(fh), h);
    }
    if (def.name == "data" && cfg.data.source == "idx") {
        for (const std::string& p : {cfg.data.train_images, cfg.data.train_labels,
                                     cfg.data.val_images, cfg.data.val_labels}) {
            ensure(fs::exists(p), "stage data: missing input " + p);
            h = fnv1a64(p, h);
            const uint64_t fh = file_checksum(p);
            h = fnv1a64(&fh, sizeof(fh), h);
        }
    }
    return hex64(h);
}

bool outputs_verify(const StageRecord& rec, const fs::path& out) {
    for (const FileRecord& f : rec.outputs) {
        const fs::path p = out / f.path;
        std::error_code ec;
        if (!fs::exists(p, ec) || ec) return false;
        if (fs::file_size(p, ec) != f.bytes || ec) return false;
        if (hex64(file_checksum(p.string())) != f.hash) return false;
    }
    return true;
}

}  // namespace

RunManifest run_stages(const ExperimentConfig& cfg, const std::vector<std::string>& stages,
                       bool resume) {
    validate_experiment(cfg);
    std::set<std::string> targets;
    size_t last_needed = 0;
    for (const std::string& s : stages) {
        auto it = std::find(kPipelineStages.begin(), kPipelineStages.end(), s);
        ensure(it != kPipelineStages.end(), "unknown stage \"" + s + "\"");
        targets.insert(s);
        last_needed = std::max(last_needed, size_t(it - kPipelineStages.begin()));
    }
    ensure(!targets.empty(), "no stages requested");

    const fs::path out = cfg.out_dir;
    for (const char* sub : {"", "data", "models", "csv", "report"})
        fs::create_directories(out / sub);

    RunManifest prev;
    const fs::path manifest_path = out / "manifest.json";
    const bool have_prev = fs::exists(manifest_path);
    if (have_prev) prev = load_manifest(manifest_path.string());

    RunManifest m;
    m.config = experiment_to_json(cfg);
    m.stage_order = kPipelineStages;
    save_experiment_config(cfg, (out / "config.json").string());

    for (size_t i = 0; i <= last_needed; ++i) {
        const StageDef& def = stage_defs()[i];
        const bool targeted = targets.count(def.name) > 0;
        // The config decides what runs: a stage outside the configured levels
        // is skipped even when requested by name.
        if (!def.enabled(cfg)) {
            StageRecord rec;
            rec.status = "skipped";
            m.stages[def.name] = rec;
            save_manifest(m, manifest_path.string());
            continue;
        }
        std::string input_hash;
        try {
            input_hash = stage_input_hash(def, cfg, out, m);
        } catch (const std::exception&) {
            m.complete = false;
            m.failed_stage = def.name;
            StageRecord rec;
            rec.status = "failed";
            m.stages[def.name] = rec;
            save_manifest(m, manifest_path.string());
            throw;
        }
        const bool may_cache = !targeted || resume;
        if (may_cache && have_prev) {
            auto it = prev.stages.find(def.name);
            if (it != prev.stages.end() &&
                (it->second.status == "done" || it->second.status == "cached") &&
                it->second.input_hash == input_hash && outputs_verify(it->second, out)) {
                StageRecord rec = it->second;
                rec.status = "cached";
                m.stages[def.name] = rec;
                save_manifest(m, manifest_path.string());
                continue;
            }
        }
        StageCtx ctx{cfg, out, m};
        StageRecord rec;
        rec.input_hash = input_hash;
        const auto t0 = std::chrono::steady_clock::now();
        std::vector<std::string> files;
        try {
            files = def.run(ctx);
        } catch (const std::exception&) {
            m.complete = false;
            m.failed_stage = def.name;
            rec.status = "failed";
            rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                              .count();
            m.stages[def.name] = rec;
            save_manifest(m, manifest_path.string());
            throw;
        }
        rec.seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        for (const std::string& rel : files) {
            const fs::path p = out / rel;
            ensure(fs::exists(p), "stage " + def.name + " did not produce " + rel);
            FileRecord fr;
            fr.path = rel;
            fr.bytes = fs::file_size(p);
            fr.hash = hex64(file_checksum(p.string()));
            rec.outputs.push_back(std::move(fr));
        }
        rec.status = "done";
        m.stages[def.name] = rec;
        save_manifest(m, manifest_path.string());
    }

    // Records from a previous run for stages past the requested range are
    // carried over only if they still verify against the artifacts on disk;
    // a forced re-run upstream may have invalidated them.
    for (size_t i = last_needed + 1; i < kPipelineStages.size(); ++i) {
        const StageDef& def = stage_defs()[i];
        if (!def.enabled(cfg)) {
            StageRecord rec;
            rec.status = "skipped";
            m.stages[def.name] = rec;
            continue;
        }
        if (!have_prev) continue;
        auto it = prev.stages.find(def.name);
        if (it == prev.stages.end()) continue;
        if (it->second.status != "done" && it->second.status != "cached") continue;
        std::string input_hash;
        try {
            input_hash = stage_input_hash(def, cfg, out, m);
        } catch (const std::exception&) {
            continue;
        }
        if (it->second.input_hash != input_hash || !outputs_verify(it->second, out)) continue;
        StageRecord rec = it->second;
        rec.status = "cached";
        m.stages[def.name] = rec;
    }

    bool complete = true;
    for (const std::string& name : kPipelineStages) {
        auto it = m.stages.find(name);
        if (it == m.stages.end() ||
            (it->second.status != "done" && it->second.status != "cached" &&
             it->second.status != "skipped")) {
            complete = false;
            break;
        }
    }
    m.complete = complete;
    save_manifest(m, manifest_path.string());
    return m;
}

RunManifest run_pipeline(const ExperimentConfig& cfg, bool resume) {
    return run_stages(cfg, kPipelineStages, resume);
}

// ---------------------------------------------------------------------------
// Report

void emit_report(const RunManifest& manifest) {
    const ExperimentConfig cfg = experiment_from_json(manifest.config);
    const fs::path out = cfg.out_dir;
    for (const std::string& name : kPipelineStages) {
        if (name == "report") break;
        auto it = manifest.stages.find(name);
        ensure(it != manifest.stages.end() &&
                   (it->second.status == "done" || it->second.status == "cached" ||
                    it->second.status == "skipped"),
               "report: stage " + name + " has not completed");
    }
    fs::create_directories(out / "report");
    const std::vector<TagEntry> tags = grid_tags(cfg);

    // accuracy table: one file per model concatenated in grid order
    std::string acc = "model,sparsity,split,accuracy\n";
    std::map<std::string, std::map<std::string, double>> accuracy_by_tag;
    for (const TagEntry& t : tags) {
        const fs::path p = out / ("csv/accuracy_" + t.tag + ".csv");
        if (!fs::exists(p)) continue;
        CsvTable table = read_csv(p);
        const size_t split_col = column_index(table, "split", p);
        const size_t value_col = column_index(table, "accuracy", p);
        for (const auto& row : table.rows) {
            acc += row[0] + "," + row[1] + "," + row[split_col] + "," + row[value_col] + "\n";
            accuracy_by_tag[t.tag][row[split_col]] = std::stod(row[value_col]);
        }
    }
    write_text(out / "report/accuracy_vs_sparsity.csv", acc);

    // sae quality table: copied when the level ran, header-only otherwise
    const std::string sae_header = "model,sparsity,nmse,fve,dead_fraction,active_count,final_loss";
    std::map<std::string, std::map<std::string, double>> sae_by_tag;
    {
        const fs::path p = out / "csv/sae_quality.csv";
        std::string text = sae_header + "\n";
        if (fs::exists(p)) {
            CsvTable table = read_csv(p);
            ensure(table.header.size() == 7, "unexpected sae_quality.csv layout");
            text = sae_header + "\n";
            for (const auto& row : table.rows) {
                std::string joined;
                for (size_t c = 0; c < row.size(); ++c)
                    joined += (c ? "," : "") + row[c];
                text += joined + "\n";
                sae_by_tag[row[0]] = {{"nmse", std::stod(row[2])},
                                      {"fve", std::stod(row[3])},
                                      {"dead_fraction", std::stod(row[4])},
                                      {"active_count", std::stod(row[5])}};
            }
        }
        write_text(out / "report/sae_quality.csv", text);
    }

    // circuit tables: per model, fixed column set
    std::map<std::string, std::map<std::string, std::vector<double>>> circuits_by_tag;
    {
        const fs::path src = out / "csv/circuits.csv";
        CsvTable table;
        bool have = fs::exists(src);
        if (have) table = read_csv(src);
        for (const TagEntry& t : tags) {
            std::string text = "category,node_pct,size_pct,acc,ablated_acc,ncq,seed\n";
            if (have) {
                const size_t model_col = column_index(table, "model", src);
                const size_t cat_col = column_index(table, "category", src);
                const size_t node_col = column_index(table, "node_pct", src);
                const size_t size_col = column_index(table, "size_pct", src);
                const size_t acc_col = column_index(table, "acc_circuit", src);
                const size_t abl_col = column_index(table, "acc_ablated", src);
                const size_t ncq_col = column_index(table, "ncq", src);
                const size_t seed_col = column_index(table, "seed", src);
                for (const auto& row : table.rows) {
                    if (row[model_col] != t.tag) continue;
                    text += row[cat_col] + "," + row[node_col] + "," + row[size_col] + "," +
                            row[acc_col] + "," + row[abl_col] + "," + row[ncq_col] + "," +
                            row[seed_col] + "\n";
                    auto& agg = circuits_by_tag[t.tag];
                    agg["node_pct"].push_back(std::stod(row[node_col]));
                    agg["size_pct"].push_back(std::stod(row[size_col]));
                    agg["acc"].push_back(std::stod(row[acc_col]));
                    agg["ablated_acc"].push_back(std::stod(row[abl_col]));
                    agg["ncq"].push_back(std::stod(row[ncq_col]));
                }
            }
            write_text(out / ("report/circuits_" + t.tag + ".csv"), text);
        }
    }

    // attribution table: per-image rows copied through
    std::map<std::string, std::map<std::string, std::vector<double>>> attribution_by_tag;
    {
        const fs::path src = out / "csv/attribution.csv";
        std::string text =
            "model,sparsity,image,category,insertion_auc,deletion_auc,"
            "insertion_random,deletion_random\n";
        if (fs::exists(src)) {
            CsvTable table = read_csv(src);
            const size_t model_col = column_index(table, "model", src);
            const size_t ins_col = column_index(table, "insertion_auc", src);
            const size_t del_col = column_index(table, "deletion_auc", src);
            const size_t insr_col = column_index(table, "insertion_random", src);
            const size_t delr_col = column_index(table, "deletion_random", src);
            for (const auto& row : table.rows) {
                std::string joined;
                for (size_t c = 0; c < row.size(); ++c) joined += (c ? "," : "") + row[c];
                text += joined + "\n";
                auto& agg = attribution_by_tag[row[model_col]];
                agg["insertion_auc"].push_back(std::stod(row[ins_col]));
                agg["deletion_auc"].push_back(std::stod(row[del_col]));
                agg["insertion_random"].push_back(std::stod(row[insr_col]));
                agg["deletion_random"].push_back(std::stod(row[delr_col]));
            }
        }
        write_text(out / "report/attribution_auc.csv", text);
    }

    json summary;
    summary["seed"] = cfg.seed;
    summary["models"] = json::object();
    for (const TagEntry& t : tags) {
        json entry;
        entry["sparsity"] = t.sparsity;
        if (auto it = accuracy_by_tag.find(t.tag); it != accuracy_by_tag.end()) {
            json accj = json::object();
            for (const auto& [split, value] : it->second) accj[split] = value;
            entry["accuracy"] = accj;
        }
        if (auto it = sae_by_tag.find(t.tag); it != sae_by_tag.end()) {
            json s = json::object();
            for (const auto& [key, value] : it->second) s[key] = value;
            s["count"] = 1;
            entry["sae"] = s;
        } else {
            entry["sae"] = {{"count", 0}};
        }
        {
            json c = json::object();
            auto it = circuits_by_tag.find(t.tag);
            const int64_t n = it == circuits_by_tag.end()
                                  ? 0
                                  : int64_t(it->second.at("ncq").size());
            c["count"] = n;
            if (n > 0) {
                for (const char* key : {"node_pct", "size_pct", "acc", "ablated_acc", "ncq"}) {
                    Aggregate a = aggregate(it->second.at(key));
                    c[std::string(key) + "_mean"] = a.mean;
                    c[std::string(key) + "_std"] = a.std_dev;
                }
            }
            entry["circuits"] = c;
        }
        {
            json a = json::object();
            auto it = attribution_by_tag.find(t.tag);
            const int64_t n = it == attribution_by_tag.end()
                                  ? 0
                                  : int64_t(it->second.at("insertion_auc").size());
            a["count"] = n;
            if (n > 0) {
                for (const char* key :
                     {"insertion_auc", "deletion_auc", "insertion_random", "deletion_random"}) {
                    Aggregate g = aggregate(it->second.at(key));
                    a[std::string(key) + "_mean"] = g.mean;
                    a[std::string(key) + "_std"] = g.std_dev;
                }
            }
            entry["attribution"] = a;
        }
        summary["models"][t.tag] = entry;
    }
    write_text(out / "report/summary.json", summary.dump(2) + "\n");
}

}  // namespace impact
