#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "impact/data.hpp"
#include "impact/optimizer.hpp"
#include "impact/tape.hpp"
#include "impact/tensor.hpp"

namespace impact {

struct ModelConfig {
    int image_size = 32;
    int patch_size = 4;
    int channels = 1;
    int embed_dim = 64;
    int depth = 4;
    int heads = 4;
    int mlp_ratio = 4;
    int num_classes = 10;
    float layerscale_init = 1e-4f;
    uint64_t seed = 0;

    int patches_per_side() const { return image_size / patch_size; }
    int patch_count() const { return patches_per_side() * patches_per_side(); }
    int tokens() const { return patch_count() + 1; }  // CLS at index 0
    int head_dim() const { return embed_dim / heads; }
    int mlp_dim() const { return embed_dim * mlp_ratio; }
    void validate() const;
};

// The eight intervention sites per block, plus a capture-only tap on the
// block's residual-stream output (not part of the 8-site hook set).
enum class SiteTag { norm1, q, k, v, attn_out, norm2, mlp_act, mlp_out, resid };

const char* site_tag_name(SiteTag tag);
SiteTag parse_site_tag(const std::string& name);

struct HookSite {
    int block = 0;
    SiteTag tag = SiteTag::norm1;
    auto operator<=>(const HookSite&) const = default;
};

std::string site_name(const HookSite& site);  // "blocks.2.mlp_act"

// All 8 x depth intervention sites in block order.
std::vector<HookSite> all_hook_sites(int depth);

// Declared activation shape at a site for a given batch size.
// norm1/attn_out/norm2/mlp_out: (B, T, E); mlp_act: (B, T, mlp_dim);
// q/k/v: (B, T, H, head_dim); resid: (B, T, E).
std::vector<int64_t> site_shape(const ModelConfig& cfg, const HookSite& site, int64_t batch);

using ActivationTrace = std::map<HookSite, Tensor>;

// Replaces a site's activation before downstream use. Returning the input
// unchanged is the identity intervention.
using Intervention = std::function<Var(Tape&, const HookSite&, Var)>;

struct ForwardOptions {
    std::set<HookSite> hooks;            // sites to capture (post-intervention)
    Intervention intervention;           // applied at every site when set
    bool capture_attention = false;      // keep post-softmax attention vars
    bool params_trainable = true;        // false: params enter as constants
};

struct ForwardResult {
    Var logits;                      // (B, num_classes)
    std::map<HookSite, Var> trace;   // requested sites
    std::map<int, Var> attn;         // block -> (B, H, T, T), if captured
};

// (B, C, H, W) -> (B, patches, C*p*p), row-major patch order.
Tensor patchify(const Tensor& images, int patch_size);

struct VitModel {
    ModelConfig config;
    std::map<std::string, Tensor> params;

    static VitModel init(const ModelConfig& cfg);

    ForwardResult forward(Tape& tape, const Tensor& images,
                          const ForwardOptions& opts = {}) const;

    // Convenience non-recording pass.
    Tensor logits(const Tensor& images) const;
    ActivationTrace capture(const Tensor& images, const std::set<HookSite>& hooks) const;

    const Tensor& p(const std::string& name) const;
};

// 0/1 masks keyed by parameter name; only listed tensors are constrained.
using SparsityMask = std::map<std::string, Tensor>;

struct TrainConfig {
    int epochs = 2;
    int batch_size = 50;
    OptimizerConfig opt{.kind = "adamw", .lr = 1e-3, .weight_decay = 0.01};
    int lr_step = 0;       // epochs per decay step; 0 keeps the lr constant
    double lr_gamma = 0.1; // multiplier applied at every lr_step boundary
    uint64_t seed = 0;
};

struct TrainHistory {
    std::vector<double> train_loss;  // per epoch, mean over batches
    std::vector<double> train_acc;   // per epoch, computed on the fly
    std::vector<double> val_acc;     // per epoch
    std::vector<double> lr;          // per epoch, after the schedule
};

// Serves both scratch training and post-prune fine-tuning. When `mask` is
// given, masked gradients are zeroed before each step and masked weights
// re-zeroed after it, so pruned weights stay exactly zero.
TrainHistory train(VitModel& model, const Dataset& train_ds, const Dataset& val_ds,
                   const TrainConfig& cfg, const SparsityMask* mask = nullptr);

double evaluate(const VitModel& model, const Dataset& ds, int batch_size = 100);

// Argmax class per example, in dataset order.
std::vector<int> predict(const VitModel& model, const Dataset& ds, int batch_size = 100);

}  // namespace impact
