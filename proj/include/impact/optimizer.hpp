#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "impact/tensor.hpp"

namespace impact {

struct OptimizerConfig {
    std::string kind = "adamw";  // "adamw" or "sgd"
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

// Holds first/second moment estimates keyed by parameter name. Parameters
// not present in the gradient map are left untouched by step().
class Optimizer {
public:
    explicit Optimizer(OptimizerConfig cfg);

    void step(std::map<std::string, Tensor>& params,
              const std::map<std::string, Tensor>& grads);

    void set_lr(double lr) { cfg_.lr = lr; }
    double lr() const { return cfg_.lr; }
    int64_t steps() const { return step_; }
    const OptimizerConfig& config() const { return cfg_; }

private:
    OptimizerConfig cfg_;
    int64_t step_ = 0;
    std::map<std::string, Tensor> m_;
    std::map<std::string, Tensor> v_;
};

}  // namespace impact
