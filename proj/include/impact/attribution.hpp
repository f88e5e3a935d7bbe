#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "impact/model.hpp"
#include "impact/tensor.hpp"

namespace impact {

struct AttributionMap {
    int category = -1;
    std::string normalization = "raw";
    Tensor patch_scores;  // (patch_count), CLS excluded
};

struct FaithfulnessCurve {
    std::vector<double> fractions;      // strictly increasing, 0 to 1
    std::vector<double> probabilities;  // target-class softmax per step
    double auc = 0.0;                   // trapezoid over the fraction axis
};

// Rollout of gradient-weighted attention: per block, A_bar is the mean over
// heads of max(0, attention * gradient); C starts at identity and accumulates
// C += A_bar * C. attn and grad are (heads, tokens, tokens) per block.
Tensor attention_rollout(const std::vector<Tensor>& attn, const std::vector<Tensor>& grad);

// Gradients of the target logit are taken with LayerScale branches
// reweighted by (gamma + eps)^-1; the map is the CLS row of the rollout over
// patch tokens.
AttributionMap transformer_attribution(const VitModel& model, const Tensor& image, int category,
                                       float layerscale_eps = 1e-6f);

// Same computation for a whole batch in one pass; per-image maps equal the
// single-image results exactly.
std::vector<AttributionMap> transformer_attribution_batch(const VitModel& model,
                                                          const Tensor& images, int category,
                                                          float layerscale_eps = 1e-6f);

// Reveal patches of `image` onto a zero image in decreasing relevance order
// (ties by patch index); step s uncovers floor(s * patches / steps) patches.
FaithfulnessCurve insertion_auc(const VitModel& model, const Tensor& image,
                                const AttributionMap& map, int category, int steps = 50);

// Zero out patches of `image` in the same order; the final step is blank.
FaithfulnessCurve deletion_auc(const VitModel& model, const Tensor& image,
                               const AttributionMap& map, int category, int steps = 50);

// Square relevance grid, one row per patch row.
void write_attribution_csv(const AttributionMap& map, const std::string& path);

// Columns: fraction,probability
void write_curve_csv(const FaithfulnessCurve& curve, const std::string& path);

}  // namespace impact
