#include "impact/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "impact/checkpoint.hpp"
#include "impact/ops.hpp"

namespace impact {

namespace {

// Accumulates squared column entries of x viewed as (rows, k).
void accumulate_sq(const Tensor& x, std::vector<double>& acc) {
    const int64_t k = static_cast<int64_t>(acc.size());
    check(x.numel() % k == 0, "norms: width mismatch");
    const int64_t rows = x.numel() / k;
    const float* p = x.data();
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < k; ++j) acc[size_t(j)] += double(p[r * k + j]) * double(p[r * k + j]);
}

Tensor sqrt_to_tensor(const std::vector<double>& acc) {
    Tensor out({static_cast<int64_t>(acc.size())});
    for (size_t j = 0; j < acc.size(); ++j) out.data()[j] = static_cast<float>(std::sqrt(acc[j]));
    return out;
}

}  // namespace

std::vector<std::string> prunable_param_names(const ModelConfig& cfg) {
    std::vector<std::string> names;
    for (int b = 0; b < cfg.depth; ++b) {
        const std::string pre = "blocks." + std::to_string(b) + ".";
        names.push_back(pre + "qkv.w");
        names.push_back(pre + "attn_out.w");
        names.push_back(pre + "mlp_in.w");
        names.push_back(pre + "mlp_out.w");
    }
    return names;
}

Tensor l2_column_norms(const Tensor& x) {
    check(x.ndim() >= 1 && x.numel() > 0, "norms: empty input");
    std::vector<double> acc(size_t(x.dim(-1)), 0.0);
    accumulate_sq(x, acc);
    return sqrt_to_tensor(acc);
}

ActivationNorms collect_activation_norms(const VitModel& model, const Tensor& images) {
    const ModelConfig& cfg = model.config;
    check(images.ndim() == 4 && images.dim(0) > 0, "norms: calibration batch is empty");
    const int64_t B = images.dim(0);
    const int64_t E = cfg.embed_dim;
    const int64_t T = cfg.tokens();

    std::map<std::string, std::vector<double>> acc;
    acc["patch_embed.w"].resize(size_t(cfg.channels * cfg.patch_size * cfg.patch_size), 0.0);
    for (const std::string& name : prunable_param_names(cfg))
        acc[name].resize(size_t(model.p(name).dim(1)), 0.0);
    acc["head.w"].resize(size_t(E), 0.0);

    std::set<HookSite> hooks;
    for (int b = 0; b < cfg.depth; ++b) {
        hooks.insert({b, SiteTag::norm1});
        hooks.insert({b, SiteTag::v});
        hooks.insert({b, SiteTag::norm2});
        hooks.insert({b, SiteTag::mlp_act});
    }
    hooks.insert({cfg.depth - 1, SiteTag::resid});

    const int64_t chunk = 64;
    for (int64_t start = 0; start < B; start += chunk) {
        const int64_t n = std::min(chunk, B - start);
        Tensor batch = ops::slice(images, 0, start, n);
        accumulate_sq(patchify(batch, cfg.patch_size), acc["patch_embed.w"]);

        Tape tape(false);
        ForwardOptions opts;
        opts.hooks = hooks;
        opts.capture_attention = true;
        opts.params_trainable = false;
        ForwardResult res = model.forward(tape, batch, opts);

        for (int b = 0; b < cfg.depth; ++b) {
            const std::string pre = "blocks." + std::to_string(b) + ".";
            accumulate_sq(res.trace.at({b, SiteTag::norm1}).val(), acc[pre + "qkv.w"]);
            accumulate_sq(res.trace.at({b, SiteTag::norm2}).val(), acc[pre + "mlp_in.w"]);
            accumulate_sq(res.trace.at({b, SiteTag::mlp_act}).val(), acc[pre + "mlp_out.w"]);
            // attn_out's input is the merged head context, recomputed exactly
            // as the forward pass builds it
            Tensor vh = ops::transpose(res.trace.at({b, SiteTag::v}).val(), {0, 2, 1, 3});
            Tensor ctx = ops::matmul(res.attn.at(b).val(), vh);
            Tensor merged = ops::transpose(ctx, {0, 2, 1, 3}).reshaped({n, T, E});
            accumulate_sq(merged, acc[pre + "attn_out.w"]);
        }
        Tensor fin = ops::layernorm_last(res.trace.at({cfg.depth - 1, SiteTag::resid}).val(),
                                         model.p("final_norm.gamma"), model.p("final_norm.beta"),
                                         1e-6f);
        accumulate_sq(ops::slice(fin, 1, 0, 1), acc["head.w"]);
    }

    ActivationNorms norms;
    for (const auto& [name, a] : acc) norms.emplace(name, sqrt_to_tensor(a));
    return norms;
}

Tensor wanda_scores(const Tensor& w, const Tensor& norms) {
    check(w.ndim() == 2, "wanda: weight must be 2-d");
    check(norms.numel() == w.dim(1), "wanda: norms length " + std::to_string(norms.numel()) +
                                         " does not match weight columns " +
                                         std::to_string(w.dim(1)));
    Tensor s(w.shape());
    const int64_t rows = w.dim(0), k = w.dim(1);
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < k; ++j)
            s.data()[r * k + j] = std::fabs(w.data()[r * k + j]) * norms.data()[j];
    return s;
}

Tensor apply_row_prune(const Tensor& scores, double ratio) {
    check(ratio >= 0.0 && ratio < 1.0, "prune: ratio must be in [0, 1)");
    check(scores.all_finite(), "prune: scores must be finite");
    const int64_t k = scores.dim(-1);
    const int64_t rows = scores.numel() / k;
    // the nudge keeps decimal ratios like 0.7 from flooring one short
    const auto n_prune = static_cast<int64_t>(std::floor(ratio * double(k) + 1e-9));
    Tensor mask = Tensor::full(scores.shape(), 1.0f);
    std::vector<int64_t> order(static_cast<size_t>(k));
    for (int64_t r = 0; r < rows; ++r) {
        const float* s = scores.data() + r * k;
        std::iota(order.begin(), order.end(), int64_t{0});
        std::stable_sort(order.begin(), order.end(),
                         [s](int64_t a, int64_t b) { return s[a] < s[b]; });
        for (int64_t i = 0; i < n_prune; ++i) mask.data()[r * k + order[size_t(i)]] = 0.0f;
    }
    return mask;
}

PruneMask magnitude_prune(const VitModel& model, double ratio) {
    PruneMask pm{.method = "magnitude", .ratio = ratio, .masks = {}};
    for (const std::string& name : prunable_param_names(model.config)) {
        const Tensor& w = model.p(name);
        Tensor s(w.shape());
        for (int64_t i = 0; i < w.numel(); ++i) s.data()[i] = std::fabs(w.data()[i]);
        pm.masks.emplace(name, apply_row_prune(s, ratio));
    }
    return pm;
}

PruneMask wanda_prune(const VitModel& model, const ActivationNorms& norms, double ratio) {
    PruneMask pm{.method = "wanda", .ratio = ratio, .masks = {}};
    for (const std::string& name : prunable_param_names(model.config)) {
        auto it = norms.find(name);
        check(it != norms.end(), "wanda: missing activation norms for " + name);
        pm.masks.emplace(name, apply_row_prune(wanda_scores(model.p(name), it->second), ratio));
    }
    return pm;
}

void apply_prune_mask(VitModel& model, const PruneMask& mask) {
    for (const auto& [name, m] : mask.masks) {
        auto it = model.params.find(name);
        check(it != model.params.end(), "prune: unknown parameter " + name);
        check(it->second.same_shape(m), "prune: mask shape mismatch for " + name);
        for (int64_t i = 0; i < m.numel(); ++i) it->second.data()[i] *= m.data()[i];
    }
}

double measured_sparsity(const PruneMask& mask) {
    int64_t zeros = 0, total = 0;
    for (const auto& [name, m] : mask.masks) {
        total += m.numel();
        for (int64_t i = 0; i < m.numel(); ++i)
            if (m.data()[i] == 0.0f) ++zeros;
    }
    return total == 0 ? 0.0 : double(zeros) / double(total);
}

void save_pruned_model(const VitModel& model, const PruneMask& mask, const std::string& path) {
    std::map<std::string, Tensor> tensors = model.params;
    for (const auto& [name, m] : mask.masks) tensors.emplace("mask." + name, m);
    nlohmann::json meta;
    meta["kind"] = "vit";
    meta["config"] = config_to_json(model.config);
    meta["prune"] = {{"method", mask.method}, {"ratio", mask.ratio}};
    save_archive(path, tensors, meta);
}

std::pair<VitModel, PruneMask> load_pruned_model(const std::string& path) {
    VitModel model = load_model(path);
    Archive ar = load_archive(path);
    check(ar.meta.contains("prune"), "archive: not a pruned checkpoint");
    PruneMask pm;
    pm.method = ar.meta["prune"].at("method").get<std::string>();
    pm.ratio = ar.meta["prune"].at("ratio").get<double>();
    for (auto& [name, t] : ar.tensors)
        if (name.starts_with("mask.")) pm.masks.emplace(name.substr(5), std::move(t));
    check(!pm.masks.empty(), "archive: pruned checkpoint has no masks");
    return {std::move(model), std::move(pm)};
}

}  // namespace impact
