#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "impact/data.hpp"
#include "impact/model.hpp"
#include "impact/neuron_metrics.hpp"
#include "impact/tensor.hpp"

namespace impact {

// Sparse autoencoder over one hook site's activations (a single token row).
struct SaeModel {
    HookSite hook{0, SiteTag::resid};
    int64_t token = 0;  // token row the SAE reads, CLS by default
    int64_t input_dim = 0;
    int64_t k_sae = 8;
    int64_t expansion = 8;
    Tensor w_enc;  // (latents, input_dim)
    Tensor b_enc;  // (latents)
    Tensor w_dec;  // (input_dim, latents)
    Tensor b_dec;  // (input_dim)

    int64_t latents() const { return expansion * input_dim; }
};

struct SaeQuality {
    double nmse = 0.0;
    double fve = 0.0;
    double dead_fraction = 0.0;
    int64_t active_count = 0;
};

struct SaeTrainConfig {
    int64_t k_sae = 8;
    int64_t expansion = 8;
    int epochs = 30;
    int64_t batch_size = 64;
    double lr = 1e-3;
    uint64_t seed = 0;
};

struct SaeTrainResult {
    SaeModel sae;
    std::vector<double> loss;         // per epoch, mean over batches
    std::vector<SaeQuality> quality;  // per epoch, on the training set
};

// 0/1 mask keeping the k_per_sample * batch largest pre-activations across
// the whole batch; ties prefer the lower latent index, then the lower sample.
Tensor batchtopk_mask(const Tensor& pre, int64_t k_per_sample);

// mask * (W_enc x + b_enc): winners pass through unchanged (no ReLU, so
// negative winners are possible).
Tensor batchtopk_encode(const SaeModel& sae, const Tensor& x);

Tensor sae_decode(const SaeModel& sae, const Tensor& codes);

// One token row of a hook site per image: (images, features).
Tensor collect_sae_inputs(const VitModel& model, const Tensor& images, const HookSite& site,
                          int64_t token = 0, int batch_size = 64);

// Decoder columns are unit-normalized after every step; the encoder starts
// as the decoder transpose. Deterministic in the seed.
SaeTrainResult train_sae(const Tensor& activations, const SaeTrainConfig& cfg,
                         const HookSite& hook, int64_t token = 0);

// Whole-set encode: NMSE = sum ||x - x_hat||^2 / sum ||x - x_bar||^2,
// FVE = 1 - NMSE, dead = latents never selected over this evaluation.
SaeQuality sae_quality(const SaeModel& sae, const Tensor& activations);

// Logits obtained by running rows through the final norm and head, exactly
// as the forward pass treats the CLS row of the last block's output.
Tensor logits_from_cls(const VitModel& model, const Tensor& cls_rows);

// Mean over rows of (f_c[base] - f_c[ablated]) / ||f[base]||_2 where both
// sides substitute the (un)ablated reconstruction into the class head; the
// baseline absorbs reconstruction error so dead latents score exactly 0.
double sae_ablation_impact(const VitModel& model, const SaeModel& sae, const Tensor& codes,
                           const std::vector<int64_t>& latents, int category);

// Latents ranked by mean |code * d f_c / d code| over the rows (the zero
// reference of zero ablation), descending, ties toward lower latent index.
RankedUnits rank_latents(const VitModel& model, const SaeModel& sae, const Tensor& codes,
                         int category, int64_t k);

// Per-category top-k latent report mirroring the neuron-level metrics, with
// zero ablation. Values land at the SAE's hook site/block in the rows.
MetricReport sae_feature_metrics(const VitModel& model, const SaeModel& sae,
                                 const Dataset& ds, const std::vector<int>& categories,
                                 int64_t k, uint64_t task_seed, const std::string& model_tag,
                                 double sparsity);

void save_sae(const SaeModel& sae, const std::string& path);
SaeModel load_sae(const std::string& path);

}  // namespace impact
