#pragma once

#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "impact/data.hpp"
#include "impact/model.hpp"
#include "impact/tensor.hpp"

namespace impact {

// A unit is one MLP/feature channel at feature sites, or one whole attention
// head at q/k/v/attn_out (head slices are contiguous in the embed dim there).
struct NeuronId {
    HookSite site;
    int64_t unit = 0;
    auto operator<=>(const NeuronId&) const = default;
};

bool site_has_head_units(SiteTag tag);
int64_t site_unit_count(const ModelConfig& cfg, const HookSite& site);

// Dataset-wide mean activation per site, tokens collapsed: feature sites map
// to a (features) tensor, q/k/v to (heads, head_dim).
struct MeanCache {
    std::map<HookSite, Tensor> means;
};

MeanCache compute_mean_cache(const VitModel& model, const Dataset& ds, int batch_size = 64);

// Replaces each listed unit's activation with its cached mean, all at once.
Intervention mean_ablation_intervention(const ModelConfig& cfg,
                                        const std::set<NeuronId>& neurons,
                                        const MeanCache& cache);

// L2 norm over one head's slice, per token: (B, T, H, head_dim) or the
// merged (B, T, E) layout at attn_out -> (B, T) scalars.
Tensor head_activation(const Tensor& site_act, const ModelConfig& cfg, SiteTag tag, int64_t head);

// Per-image, per-unit scalars at a site: the CLS-token value and the max
// over patch tokens (CLS excluded). Head units use the L2-norm scalar.
struct UnitActivations {
    Tensor cls;        // (images, units)
    Tensor patch_max;  // (images, units)
};
UnitActivations collect_unit_activations(const VitModel& model, const Tensor& images,
                                         const HookSite& site, int batch_size = 64);

// Rank-statistic AUROC; tied activations contribute half per tied pair.
double selectivity_auroc(std::span<const double> acts, std::span<const int> labels);

// Population std over mean magnitude; NaN sentinel when the mean is zero.
double population_cv(std::span<const double> values);

// Shannon entropy in nats of mass / sum(mass), clamped to [0, ln(classes)];
// NaN sentinel when the total mass is zero. Mass entries must be >= 0.
double label_entropy_nats(std::span<const double> class_mass);

// Mean over the task's category images of (f_c - f_c_ablated) / ||f||_2,
// with the listed units mean-ablated simultaneously. Empty set gives 0.
double ablation_impact(const VitModel& model, const Dataset& ds, const BinaryTask& task,
                       const std::set<NeuronId>& neurons, const MeanCache& cache);

// CV of per-image max patch activations over the category's images, one
// value per unit at the site. NaN where the mean is zero.
std::vector<double> class_variance(const VitModel& model, const Dataset& ds, int category,
                                   const HookSite& site);

// Dataset-wide entropy of each unit's per-class activation mass. Max-pooled
// activations are clipped at zero before accumulation.
std::vector<double> label_entropy(const VitModel& model, const Dataset& ds,
                                  const HookSite& site);

// Units sorted by mean |(a - mean) . df_c/da| over the category's images,
// descending, ties toward the lower unit index.
struct RankedUnits {
    std::vector<int64_t> units;
    std::vector<double> importance;  // aligned with units
};
RankedUnits rank_neurons_attribution_patching(const VitModel& model, const Dataset& ds,
                                              const BinaryTask& task, const HookSite& site,
                                              const MeanCache& cache, int64_t k);

struct MetricRow {
    std::string model_tag;
    double sparsity = 0.0;
    int category = -1;
    int block = 0;
    std::string site;
    int64_t unit = -1;  // -1 marks a whole-set row (simultaneous ablation)
    std::string metric;
    double value = 0.0;
    bool undefined = false;
};

struct MetricReport {
    std::vector<MetricRow> rows;
};

// Columns: model,sparsity,category,block,site,unit,metric,value,flag
void write_metric_csv(const MetricReport& report, const std::string& path);

// Top-k units at one site for one category task: per-unit attribution
// importance, selectivity, class variance, and label entropy rows plus one
// simultaneous ablation-impact row for the whole set.
MetricReport category_site_report(const VitModel& model, const Dataset& ds,
                                  const BinaryTask& task, const HookSite& site,
                                  const MeanCache& cache, int64_t k,
                                  const std::string& model_tag, double sparsity);

}  // namespace impact
