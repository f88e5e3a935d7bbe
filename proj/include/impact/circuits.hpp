#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "impact/data.hpp"
#include "impact/model.hpp"
#include "impact/neuron_metrics.hpp"
#include "impact/tensor.hpp"

namespace impact {

// One learnable gate per node: per-feature at norm1/norm2/mlp_act/mlp_out/
// attn_out, per-head at q/k/v. Gates are shared across tokens and images.
using BinaryMasks = std::map<HookSite, Tensor>;

struct CircuitMask {
    double tau = 1.0;
    double k_pen = 8e-5;
    std::map<HookSite, Tensor> logits;  // clamped to [-1, 1]
};

struct CircuitConfig {
    double lr = 1e-2;
    int epochs = 15;
    int64_t batch_size = 16;
    double tau = 1.0;
    double k_pen = 8e-5;     // 4e-5 is the sparse-model default
    int step_size = 5;       // epochs between learning-rate drops
    double gamma = 0.2;
    double init_mean = 0.5;
    double init_std = 0.01;
    uint64_t seed = 0;
};

struct CircuitAccuracy {
    double circuit = 0.0;
    double full = 0.0;
    double ablated = 0.0;  // complement mask
};

struct EdgeStats {
    int64_t active = 0;
    int64_t total = 0;
};

struct CircuitResult {
    CircuitMask mask;
    int category = -1;
    uint64_t seed = 0;
    double acc_circuit = 0.0;
    double acc_full = 0.0;
    double acc_ablated = 0.0;
    int64_t active_nodes = 0;
    int64_t total_nodes = 0;
    int64_t active_edges = 0;
    int64_t total_edges = 0;
    double ncq_value = 0.0;
    std::vector<double> loss;        // per epoch
    std::vector<double> lr_history;  // per epoch, after the schedule
    std::string model_tag;           // filled in by the caller for reporting
    double sparsity = 0.0;
};

// Gate count per site: heads at q/k/v, features elsewhere. resid carries
// no gates.
int64_t mask_width(const ModelConfig& cfg, const HookSite& site);
int64_t total_mask_nodes(const ModelConfig& cfg);

CircuitMask init_circuit_mask(const ModelConfig& cfg, const CircuitConfig& hp);

BinaryMasks binarize_mask(const CircuitMask& mask);        // 1(m > 0)
BinaryMasks complement_mask(const BinaryMasks& masks);     // 1 - m_hat
BinaryMasks full_mask(const ModelConfig& cfg, float value);
int64_t count_active(const BinaryMasks& masks);

// Forward pass with every site blended as m_hat*a + (1 - m_hat)*mean. The
// blend is bit-exact in both branches.
Tensor masked_forward(const VitModel& model, const BinaryMasks& masks, const MeanCache& cache,
                      const Tensor& images);
Tensor masked_forward(const VitModel& model, const CircuitMask& mask, const MeanCache& cache,
                      const Tensor& images);

// (acc_circuit / acc_full) * (1 - n_circuit / n_total), clipped into [0,1].
double ncq(double acc_circuit, double acc_full, int64_t n_circuit, int64_t n_total);

// Edges are nonzero weights in the block linears whose producing and
// consuming gates are both active, plus one attention-pattern edge per head
// gated by that head's q and k. An all-ones mask always scores 1.
EdgeStats circuit_edges(const VitModel& model, const BinaryMasks& masks);

// Accuracy of the binary readout (target logit vs the best other logit) for
// the masked model, the unmasked model, and the complement mask.
CircuitAccuracy evaluate_circuit(const VitModel& model, const BinaryMasks& masks,
                                 const MeanCache& cache, const Dataset& ds,
                                 const BinaryTask& task);

// AdamW on the gate logits only: cross-entropy of the 2-way readout plus
// k_pen * (active node count) through the straight-through estimator.
CircuitResult optimize_circuit(const VitModel& model, const Dataset& ds, const BinaryTask& task,
                               const MeanCache& cache, const CircuitConfig& hp);

// One row per result: model,sparsity,category,node_pct,size_pct,
// acc_circuit,acc_full,acc_ablated,ncq,seed
void write_circuit_csv(std::span<const CircuitResult> results, const std::string& path);

}  // namespace impact
