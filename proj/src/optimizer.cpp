#include "impact/optimizer.hpp"

#include <cmath>

namespace impact {

Optimizer::Optimizer(OptimizerConfig cfg) : cfg_(std::move(cfg)) {
    check(cfg_.kind == "adamw" || cfg_.kind == "sgd",
          "optimizer: unknown kind '" + cfg_.kind + "'");
    check(cfg_.lr >= 0.0, "optimizer: negative learning rate");
}

void Optimizer::step(std::map<std::string, Tensor>& params,
                     const std::map<std::string, Tensor>& grads) {
    ++step_;
    const double lr = cfg_.lr;
    const double wd = cfg_.weight_decay;
    if (cfg_.kind == "sgd") {
        for (const auto& [name, g] : grads) {
            auto it = params.find(name);
            check(it != params.end(), "optimizer: gradient for unknown param " + name);
            Tensor& p = it->second;
            check(p.same_shape(g), "optimizer: grad shape mismatch for " + name);
            for (int64_t i = 0; i < p.numel(); ++i) {
                const double pv = double(p.data()[i]);
                const double gv = double(g.data()[i]) + wd * pv;
                p.data()[i] = static_cast<float>(pv - lr * gv);
            }
        }
        return;
    }
    const double b1 = cfg_.beta1;
    const double b2 = cfg_.beta2;
    const double bc1 = 1.0 - std::pow(b1, double(step_));
    const double bc2 = 1.0 - std::pow(b2, double(step_));
    for (const auto& [name, g] : grads) {
        auto it = params.find(name);
        check(it != params.end(), "optimizer: gradient for unknown param " + name);
        Tensor& p = it->second;
        check(p.same_shape(g), "optimizer: grad shape mismatch for " + name);
        Tensor& m = m_.try_emplace(name, Tensor::zeros(p.shape())).first->second;
        Tensor& v = v_.try_emplace(name, Tensor::zeros(p.shape())).first->second;
        for (int64_t i = 0; i < p.numel(); ++i) {
            const double gv = double(g.data()[i]);
            const double mv = b1 * double(m.data()[i]) + (1.0 - b1) * gv;
            const double vv = b2 * double(v.data()[i]) + (1.0 - b2) * gv * gv;
            m.data()[i] = static_cast<float>(mv);
            v.data()[i] = static_cast<float>(vv);
            const double mhat = mv / bc1;
            const double vhat = vv / bc2;
            double pv = double(p.data()[i]);
            pv -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            pv -= lr * wd * double(p.data()[i]);
            p.data()[i] = static_cast<float>(pv);
        }
    }
}

}  // namespace impact
