#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "impact/ops.hpp"
#include "impact/tensor.hpp"

namespace impact {

class Tape;

// Handle to a tape node. Cheap to copy; valid as long as its tape lives.
struct Var {
    Tape* tape = nullptr;
    int32_t id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
    const Tensor& val() const;
    const std::vector<int64_t>& shape() const { return val().shape(); }
};

using GradMap = std::map<std::string, Tensor>;

// Reverse-mode gradient tape. Records primitive applications in topological
// order; backward() visits nodes exactly once in reverse order and
// accumulates gradients additively at fan-out points. Single-owner: a tape
// must not be shared across concurrent tasks, and backward() may run once.
class Tape {
public:
    explicit Tape(bool recording = true) : recording_(recording) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const { return recording_; }

    // Leaves. Parameters are named and their gradients are exported by
    // backward(); constants never receive gradients.
    Var param(const std::string& name, Tensor value);
    Var constant(Tensor value);
    Var leaf(Tensor value, bool needs_grad, const std::string& name = "");

    const Tensor& value(int32_t id) const { return nodes_[static_cast<size_t>(id)].value; }
    bool needs_grad(int32_t id) const { return nodes_[static_cast<size_t>(id)].needs_grad; }
    size_t size() const { return nodes_.size(); }

    // Seed must match the output's shape. Gradients for all reachable nodes
    // are retained and can be queried with grad()/named_grads().
    void backward(Var output, const Tensor& seed);
    bool consumed() const { return consumed_; }

    // Gradient of the last backward() at `v` (zeros if none reached it).
    Tensor grad(Var v) const;
    GradMap named_grads() const;

    // When enabled, the backward rule of layerscale() propagates
    // grad * 1/(gamma + eps) instead of grad * gamma (clamped to |.| <= 1/eps).
    void set_layerscale_relprop(bool on, float eps = 1e-6f) {
        ls_relprop_ = on;
        ls_eps_ = eps;
    }
    bool layerscale_relprop() const { return ls_relprop_; }
    float layerscale_eps() const { return ls_eps_; }

    // --- recorded operations -------------------------------------------
    Var matmul(Var a, Var b);
    Var linear(Var x, Var w, Var b);  // b may be invalid for no bias
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var scale(Var a, float s);
    Var add_scalar(Var a, float c);
    Var gelu(Var x);
    Var softmax_last(Var x);
    Var layernorm_last(Var x, Var gamma, Var beta, float eps);
    Var layerscale(Var x, Var gamma);
    Var reduce_sum(Var x, int64_t axis);
    Var reduce_mean(Var x, int64_t axis);
    Var reduce_max(Var x, int64_t axis);
    Var reduce_sum_all(Var x);
    Var reduce_mean_all(Var x);
    Var transpose(Var x, std::vector<int64_t> perm);
    Var reshape(Var x, std::vector<int64_t> shape);
    Var slice(Var x, int64_t axis, int64_t start, int64_t len);
    Var concat(const std::vector<Var>& parts, int64_t axis);
    Var l2norm_last(Var x);
    Var ste_binarize(Var m, float tau);
    // Mean negative log-likelihood of integer labels under softmax(logits).
    Var cross_entropy_mean(Var logits, const std::vector<int>& labels);

private:
    friend struct Var;

    struct Node {
        Tensor value;
        std::vector<int32_t> parents;
        // Accumulates parent gradients given this node's output gradient.
        std::function<void(Tape&, const Node&, const Tensor&)> backward;
        std::string name;
        bool needs_grad = false;
    };

    Var push(Tensor value, std::vector<int32_t> parents,
             std::function<void(Tape&, const Node&, const Tensor&)> bw);
    void accumulate(int32_t id, const Tensor& g);
    void accumulate_move(int32_t id, Tensor&& g);

    std::vector<Node> nodes_;
    std::vector<Tensor> grads_;
    bool recording_;
    bool consumed_ = false;
    bool ls_relprop_ = false;
    float ls_eps_ = 1e-6f;
};

inline const Tensor& Var::val() const { return tape->value(id); }

}  // namespace impact
