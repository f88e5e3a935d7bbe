#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "impact/model.hpp"
#include "impact/tensor.hpp"

namespace impact {

// Input-feature L2 norms per linear layer, keyed by weight name. Each entry
// is a 1-d tensor of length K (the layer's input width), pooled over every
// token and batch entry feeding that layer.
using ActivationNorms = std::map<std::string, Tensor>;

struct PruneMask {
    std::string method;  // "magnitude" | "wanda"
    double ratio = 0.0;
    SparsityMask masks;  // weight name -> 0/1 keep mask, same shape as weight
};

// Weights eligible for pruning: the per-block fused qkv, attention output
// projection, and both mlp linears. Patch embed, head, norms, and layer
// scales stay dense.
std::vector<std::string> prunable_param_names(const ModelConfig& cfg);

// Column norms of x viewed as (rows, k): out_j = sqrt(sum_r x[r, j]^2).
Tensor l2_column_norms(const Tensor& x);

// Runs the model over one calibration batch and returns input-feature norms
// for every linear layer (patch embed, all block linears, head).
ActivationNorms collect_activation_norms(const VitModel& model, const Tensor& images);

// S_ij = |W_ij| * norms_j; norms length must match the column count of w.
Tensor wanda_scores(const Tensor& w, const Tensor& norms);

// Per output row, zero the floor(ratio * width) lowest-scoring entries of a
// fresh all-ones mask. Ties prune the lower column index first.
Tensor apply_row_prune(const Tensor& scores, double ratio);

PruneMask magnitude_prune(const VitModel& model, double ratio);
PruneMask wanda_prune(const VitModel& model, const ActivationNorms& norms, double ratio);

// Zeroes pruned weights in place.
void apply_prune_mask(VitModel& model, const PruneMask& mask);

// Fraction of weights pruned across all masked tensors.
double measured_sparsity(const PruneMask& mask);

// Checkpoint with "mask.<weight name>" tensors stored next to the weights
// and method/ratio recorded in meta. Such files also load via load_model,
// which ignores the mask entries.
void save_pruned_model(const VitModel& model, const PruneMask& mask, const std::string& path);
std::pair<VitModel, PruneMask> load_pruned_model(const std::string& path);

}  // namespace impact
