#include "impact/sae.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <span>
#include <stdexcept>

#include "impact/checkpoint.hpp"
#include "impact/ops.hpp"
#include "impact/optimizer.hpp"
#include "impact/rng.hpp"
#include "impact/tape.hpp"

namespace impact {

namespace {

void check_matrix(const Tensor& t, const char* what) {
    if (t.shape().size() != 2 || t.numel() == 0)
        throw std::invalid_argument(std::string(what) + " must be a non-empty rank-2 tensor");
    for (int64_t i = 0; i < t.numel(); ++i)
        if (!std::isfinite(t[i]))
            throw std::invalid_argument(std::string(what) + " contains a non-finite value");
}

void check_sae(const SaeModel& sae) {
    int64_t d = sae.input_dim, l = sae.latents();
    if (d <= 0 || sae.expansion <= 0) throw std::invalid_argument("sae dimensions must be positive");
    if (sae.k_sae < 1 || sae.k_sae > l) throw std::invalid_argument("k_sae out of range");
    if (sae.w_enc.shape() != std::vector<int64_t>{l, d} ||
        sae.w_dec.shape() != std::vector<int64_t>{d, l} ||
        sae.b_enc.shape() != std::vector<int64_t>{l} ||
        sae.b_dec.shape() != std::vector<int64_t>{d})
        throw std::invalid_argument("sae tensor shapes are inconsistent");
}

void unit_normalize_columns(Tensor& w) {
    int64_t rows = w.shape()[0], cols = w.shape()[1];
    for (int64_t c = 0; c < cols; ++c) {
        double ss = 0.0;
        for (int64_t r = 0; r < rows; ++r) {
            double v = w[r * cols + c];
            ss += v * v;
        }
        double n = std::sqrt(ss);
        if (n == 0.0) continue;
        for (int64_t r = 0; r < rows; ++r)
            w[r * cols + c] = static_cast<float>(w[r * cols + c] / n);
    }
}

// Sum over all entries of (x - per-column mean of x)^2, in double.
double centered_sum_sq(const Tensor& x) {
    int64_t n = x.shape()[0], d = x.shape()[1];
    std::vector<double> mean(static_cast<size_t>(d), 0.0);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) mean[static_cast<size_t>(j)] += x[i * d + j];
    for (auto& m : mean) m /= static_cast<double>(n);
    double ss = 0.0;
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) {
            double r = x[i * d + j] - mean[static_cast<size_t>(j)];
            ss += r * r;
        }
    return ss;
}

Tensor gather_rows(const Tensor& x, std::span<const int64_t> idx) {
    int64_t d = x.shape()[1];
    Tensor out({static_cast<int64_t>(idx.size()), d});
    for (size_t i = 0; i < idx.size(); ++i)
        std::memcpy(out.data() + static_cast<int64_t>(i) * d, x.data() + idx[i] * d,
                    static_cast<size_t>(d) * sizeof(float));
    return out;
}

SiteTag tag_from_string(const std::string& s) {
    for (int t = 0; t <= static_cast<int>(SiteTag::resid); ++t) {
        HookSite probe{0, static_cast<SiteTag>(t)};
        std::string name = site_name(probe);
        if (name.substr(name.rfind('.') + 1) == s) return probe.tag;
    }
    throw std::invalid_argument("unknown hook tag: " + s);
}

std::string tag_to_string(SiteTag tag) {
    std::string name = site_name(HookSite{0, tag});
    return name.substr(name.rfind('.') + 1);
}

}  // namespace

Tensor batchtopk_mask(const Tensor& pre, int64_t k_per_sample) {
    check_matrix(pre, "pre-activations");
    int64_t b = pre.shape()[0], l = pre.shape()[1];
    if (k_per_sample < 1 || k_per_sample > l)
        throw std::invalid_argument("k_per_sample must be in [1, latents]");
    int64_t keep = k_per_sample * b;
    std::vector<int64_t> order(static_cast<size_t>(b * l));
    std::iota(order.begin(), order.end(), 0);
    // value descending; ties go to the lower latent, then the lower sample
    std::sort(order.begin(), order.end(), [&](int64_t x, int64_t y) {
        float vx = pre[x], vy = pre[y];
        if (vx != vy) return vx > vy;
        int64_t lx = x % l, ly = y % l;
        if (lx != ly) return lx < ly;
        return x / l < y / l;
    });
    Tensor mask(pre.shape());
    for (int64_t i = 0; i < keep; ++i) mask[order[static_cast<size_t>(i)]] = 1.0f;
    return mask;
}

Tensor batchtopk_encode(const SaeModel& sae, const Tensor& x) {
    check_sae(sae);
    check_matrix(x, "activations");
    if (x.shape()[1] != sae.input_dim)
        throw std::invalid_argument("activation width does not match the sae input size");
    Tensor pre = ops::linear(x, sae.w_enc, sae.b_enc);
    Tensor mask = batchtopk_mask(pre, sae.k_sae);
    return ops::mul(pre, mask);
}

Tensor sae_decode(const SaeModel& sae, const Tensor& codes) {
    check_sae(sae);
    if (codes.shape().size() != 2 || codes.shape()[1] != sae.latents())
        throw std::invalid_argument("code width does not match the sae latent count");
    return ops::linear(codes, sae.w_dec, sae.b_dec);
}

Tensor collect_sae_inputs(const VitModel& model, const Tensor& images, const HookSite& site,
                          int64_t token, int batch_size) {
    const auto& cfg = model.config;
    if (site.block < 0 || site.block >= cfg.depth) throw std::invalid_argument("hook block out of range");
    if (token < 0 || token >= cfg.tokens()) throw std::invalid_argument("token index out of range");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be positive");
    int64_t n = images.shape()[0];
    auto feat_shape = site_shape(cfg, site, 1);
    int64_t width = 1;
    for (size_t i = 2; i < feat_shape.size(); ++i) width *= feat_shape[i];
    Tensor out({n, width});
    for (int64_t start = 0; start < n; start += batch_size) {
        int64_t len = std::min<int64_t>(batch_size, n - start);
        Tensor chunk = ops::slice(images, 0, start, len);
        ActivationTrace trace = model.capture(chunk, {site});
        Tensor row = ops::slice(trace.at(site), 1, token, 1);  // (len, 1, ...)
        std::memcpy(out.data() + start * width, row.data(),
                    static_cast<size_t>(len * width) * sizeof(float));
    }
    return out;
}

SaeTrainResult train_sae(const Tensor& activations, const SaeTrainConfig& cfg,
                         const HookSite& hook, int64_t token) {
    check_matrix(activations, "activations");
    int64_t n = activations.shape()[0], d = activations.shape()[1];
    if (cfg.expansion < 1) throw std::invalid_argument("expansion must be >= 1");
    int64_t l = cfg.expansion * d;
    if (cfg.k_sae < 1 || cfg.k_sae > l) throw std::invalid_argument("k_sae out of range");
    if (cfg.batch_size < 1) throw std::invalid_argument("batch_size must be positive");
    if (n < cfg.batch_size) throw std::invalid_argument("need at least one full batch of activations");
    if (cfg.epochs < 0) throw std::invalid_argument("epochs must be >= 0");
    if (!(cfg.lr > 0.0)) throw std::invalid_argument("lr must be positive");
    if (centered_sum_sq(activations) == 0.0)
        throw std::invalid_argument("activations are all identical; nothing to reconstruct");

    SaeModel sae;
    sae.hook = hook;
    sae.token = token;
    sae.input_dim = d;
    sae.k_sae = cfg.k_sae;
    sae.expansion = cfg.expansion;

    Rng init_rng(derive_seed(cfg.seed, "sae_init"));
    sae.w_dec = init_rng.normal_tensor({d, l});
    unit_normalize_columns(sae.w_dec);
    sae.w_enc = ops::transpose(sae.w_dec, {1, 0});
    sae.b_enc = Tensor::zeros({l});
    sae.b_dec = Tensor::zeros({d});

    std::map<std::string, Tensor> params{{"w_enc", sae.w_enc},
                                         {"b_enc", sae.b_enc},
                                         {"w_dec", sae.w_dec},
                                         {"b_dec", sae.b_dec}};
    OptimizerConfig oc;
    oc.lr = cfg.lr;
    Optimizer opt(oc);

    SaeTrainResult res;
    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng erng(derive_seed(cfg.seed, "sae_epoch", epoch));
        erng.shuffle(order);
        double loss_sum = 0.0;
        int64_t batches = 0;
        for (int64_t start = 0; start < n; start += cfg.batch_size) {
            int64_t len = std::min<int64_t>(cfg.batch_size, n - start);
            Tensor xb = gather_rows(activations, std::span(order).subspan(
                                                     static_cast<size_t>(start),
                                                     static_cast<size_t>(len)));
            Tape t(true);
            Var w_enc = t.param("w_enc", params.at("w_enc"));
            Var b_enc = t.param("b_enc", params.at("b_enc"));
            Var w_dec = t.param("w_dec", params.at("w_dec"));
            Var b_dec = t.param("b_dec", params.at("b_dec"));
            Var x = t.constant(xb);
            Var pre = t.linear(x, w_enc, b_enc);
            // winners pass through as-is; the mask is constant so gradient
            // flows only through kept entries
            Tensor mask = batchtopk_mask(pre.val(), cfg.k_sae);
            Var codes = t.mul(pre, t.constant(mask));
            Var xhat = t.linear(codes, w_dec, b_dec);
            Var diff = t.sub(xhat, x);
            Var loss = t.scale(t.reduce_sum_all(t.mul(diff, diff)), 1.0f / static_cast<float>(len));
            t.backward(loss, Tensor::scalar(1.0f));
            opt.step(params, t.named_grads());
            unit_normalize_columns(params.at("w_dec"));
            loss_sum += loss.val()[0];
            ++batches;
        }
        res.loss.push_back(loss_sum / static_cast<double>(batches));
        sae.w_enc = params.at("w_enc");
        sae.b_enc = params.at("b_enc");
        sae.w_dec = params.at("w_dec");
        sae.b_dec = params.at("b_dec");
        res.quality.push_back(sae_quality(sae, activations));
    }
    res.sae = std::move(sae);
    return res;
}

SaeQuality sae_quality(const SaeModel& sae, const Tensor& activations) {
    check_sae(sae);
    check_matrix(activations, "activations");
    if (activations.shape()[1] != sae.input_dim)
        throw std::invalid_argument("activation width does not match the sae input size");
    double den = centered_sum_sq(activations);
    if (den == 0.0) throw std::invalid_argument("activations have zero variance");

    Tensor pre = ops::linear(activations, sae.w_enc, sae.b_enc);
    Tensor mask = batchtopk_mask(pre, sae.k_sae);
    Tensor codes = ops::mul(pre, mask);
    Tensor xhat = sae_decode(sae, codes);

    double num = 0.0;
    for (int64_t i = 0; i < activations.numel(); ++i) {
        double r = static_cast<double>(activations[i]) - static_cast<double>(xhat[i]);
        num += r * r;
    }
    int64_t n = activations.shape()[0], l = sae.latents();
    int64_t active = 0;
    for (int64_t c = 0; c < l; ++c) {
        bool hit = false;
        for (int64_t i = 0; i < n && !hit; ++i) hit = mask[i * l + c] != 0.0f;
        active += hit ? 1 : 0;
    }
    SaeQuality q;
    q.nmse = num / den;
    q.fve = 1.0 - q.nmse;
    q.active_count = active;
    q.dead_fraction = static_cast<double>(l - active) / static_cast<double>(l);
    return q;
}

Tensor logits_from_cls(const VitModel& model, const Tensor& cls_rows) {
    if (cls_rows.shape().size() != 2 || cls_rows.shape()[1] != model.config.embed_dim)
        throw std::invalid_argument("rows must be (batch, embed_dim)");
    Tensor normed = ops::layernorm_last(cls_rows, model.params.at("final_norm.gamma"),
                                        model.params.at("final_norm.beta"), 1e-6f);
    return ops::linear(normed, model.params.at("head.w"), model.params.at("head.b"));
}

double sae_ablation_impact(const VitModel& model, const SaeModel& sae, const Tensor& codes,
                           const std::vector<int64_t>& latents, int category) {
    check_sae(sae);
    if (sae.input_dim != model.config.embed_dim)
        throw std::invalid_argument("sae input size does not match the model embed dim");
    if (codes.shape().size() != 2 || codes.shape()[1] != sae.latents())
        throw std::invalid_argument("code width does not match the sae latent count");
    if (category < 0 || category >= model.config.num_classes)
        throw std::invalid_argument("category out of range");
    int64_t n = codes.shape()[0], l = sae.latents();
    if (n == 0) return 0.0;
    for (int64_t lat : latents)
        if (lat < 0 || lat >= l) throw std::invalid_argument("latent index out of range");

    Tensor ablated = codes;
    for (int64_t lat : latents)
        for (int64_t i = 0; i < n; ++i) ablated[i * l + lat] = 0.0f;

    Tensor base = logits_from_cls(model, sae_decode(sae, codes));
    Tensor abl = logits_from_cls(model, sae_decode(sae, ablated));
    int64_t c = model.config.num_classes;
    double sum = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        double norm_sq = 0.0;
        for (int64_t j = 0; j < c; ++j) {
            double v = base[i * c + j];
            norm_sq += v * v;
        }
        double norm = std::sqrt(norm_sq);
        if (norm == 0.0) throw std::runtime_error("zero logit norm; cannot normalize impact");
        sum += (static_cast<double>(base[i * c + category]) -
                static_cast<double>(abl[i * c + category])) /
               norm;
    }
    return sum / static_cast<double>(n);
}

RankedUnits rank_latents(const VitModel& model, const SaeModel& sae, const Tensor& codes,
                         int category, int64_t k) {
    check_sae(sae);
    if (sae.input_dim != model.config.embed_dim)
        throw std::invalid_argument("sae input size does not match the model embed dim");
    if (codes.shape().size() != 2 || codes.shape()[1] != sae.latents())
        throw std::invalid_argument("code width does not match the sae latent count");
    if (category < 0 || category >= model.config.num_classes)
        throw std::invalid_argument("category out of range");
    int64_t l = sae.latents();
    if (k < 1 || k > l) throw std::invalid_argument("k out of range");
    int64_t n = codes.shape()[0];
    if (n == 0) throw std::invalid_argument("need at least one code row");

    Tape t(true);
    Var code_var = t.leaf(codes, true, "codes");
    Var xhat = t.linear(code_var, t.constant(sae.w_dec), t.constant(sae.b_dec));
    Var normed = t.layernorm_last(xhat, t.constant(model.params.at("final_norm.gamma")),
                                  t.constant(model.params.at("final_norm.beta")), 1e-6f);
    Var logits = t.linear(normed, t.constant(model.params.at("head.w")),
                          t.constant(model.params.at("head.b")));
    Var fc = t.reduce_sum_all(t.slice(logits, 1, category, 1));
    t.backward(fc, Tensor::scalar(1.0f));
    Tensor g = t.grad(code_var);

    // zero reference: contribution of latent j on row i is codes[i,j]*g[i,j]
    std::vector<double> importance(static_cast<size_t>(l), 0.0);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < l; ++j)
            importance[static_cast<size_t>(j)] +=
                std::abs(static_cast<double>(codes[i * l + j]) * static_cast<double>(g[i * l + j]));
    for (auto& v : importance) v /= static_cast<double>(n);

    std::vector<int64_t> order(static_cast<size_t>(l));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
        return importance[static_cast<size_t>(a)] > importance[static_cast<size_t>(b)];
    });
    RankedUnits out;
    for (int64_t i = 0; i < k; ++i) {
        int64_t u = order[static_cast<size_t>(i)];
        out.units.push_back(u);
        out.importance.push_back(importance[static_cast<size_t>(u)]);
    }
    return out;
}

MetricReport sae_feature_metrics(const VitModel& model, const SaeModel& sae,
                                 const Dataset& ds, const std::vector<int>& categories,
                                 int64_t k, uint64_t task_seed, const std::string& model_tag,
                                 double sparsity) {
    check_sae(sae);
    const auto& cfg = model.config;
    // the reconstruction is spliced back in at the class head, so only the
    // last block's residual CLS row is supported
    if (sae.hook.tag != SiteTag::resid || sae.hook.block != cfg.depth - 1 || sae.token != 0)
        throw std::invalid_argument("feature metrics need an sae over the final residual CLS row");
    if (sae.input_dim != cfg.embed_dim)
        throw std::invalid_argument("sae input size does not match the model embed dim");
    ds.validate();
    for (int c : categories)
        if (c < 0 || c >= ds.num_classes) throw std::invalid_argument("category out of range");

    Tensor acts = collect_sae_inputs(model, ds.images, sae.hook, sae.token);
    Tensor codes = batchtopk_encode(sae, acts);
    int64_t l = sae.latents();

    MetricReport report;
    for (int c : categories) {
        BinaryTask task = make_binary_task(ds, c, derive_seed(task_seed, "sae_task", c));
        Tensor codes_pos = gather_rows(codes, task.positives);
        RankedUnits ranked = rank_latents(model, sae, codes_pos, c, k);

        std::vector<double> task_acts;
        std::vector<int> task_labels(task.positives.size(), 1);
        task_labels.insert(task_labels.end(), task.negatives.size(), 0);
        task_acts.reserve(task_labels.size());

        auto push = [&](int64_t unit, const std::string& metric, double value) {
            MetricRow row;
            row.model_tag = model_tag;
            row.sparsity = sparsity;
            row.category = c;
            row.block = sae.hook.block;
            row.site = tag_to_string(sae.hook.tag);
            row.unit = unit;
            row.metric = metric;
            row.value = value;
            row.undefined = std::isnan(value);
            report.rows.push_back(std::move(row));
        };

        for (size_t r = 0; r < ranked.units.size(); ++r) {
            int64_t u = ranked.units[r];
            task_acts.clear();
            for (int64_t i : task.positives) task_acts.push_back(codes[i * l + u]);
            for (int64_t i : task.negatives) task_acts.push_back(codes[i * l + u]);
            double auroc = selectivity_auroc(task_acts, task_labels);

            std::vector<double> pos_acts;
            pos_acts.reserve(task.positives.size());
            for (int64_t i : task.positives) pos_acts.push_back(codes[i * l + u]);
            double cv = population_cv(pos_acts);

            std::vector<double> mass(static_cast<size_t>(ds.num_classes), 0.0);
            for (int64_t i = 0; i < codes.shape()[0]; ++i)
                mass[static_cast<size_t>(ds.labels[static_cast<size_t>(i)])] +=
                    std::max(0.0, static_cast<double>(codes[i * l + u]));
            double entropy = label_entropy_nats(mass);

            push(u, "attribution_importance", ranked.importance[r]);
            push(u, "selectivity", auroc);
            push(u, "class_variance", cv);
            push(u, "label_entropy", entropy);
        }
        push(-1, "ablation_impact",
             sae_ablation_impact(model, sae, codes_pos, ranked.units, c));
    }
    return report;
}

void save_sae(const SaeModel& sae, const std::string& path) {
    check_sae(sae);
    nlohmann::json meta;
    meta["kind"] = "sae";
    meta["k_sae"] = sae.k_sae;
    meta["expansion"] = sae.expansion;
    meta["input_dim"] = sae.input_dim;
    meta["token"] = sae.token;
    meta["hook_block"] = sae.hook.block;
    meta["hook_tag"] = tag_to_string(sae.hook.tag);
    std::map<std::string, Tensor> tensors{{"w_enc", sae.w_enc},
                                          {"b_enc", sae.b_enc},
                                          {"w_dec", sae.w_dec},
                                          {"b_dec", sae.b_dec}};
    save_archive(path, tensors, meta);
}

SaeModel load_sae(const std::string& path) {
    Archive arc = load_archive(path);
    if (!arc.meta.contains("kind") || arc.meta.at("kind") != "sae")
        throw std::runtime_error("archive does not hold an sae checkpoint: " + path);
    SaeModel sae;
    sae.k_sae = arc.meta.at("k_sae").get<int64_t>();
    sae.expansion = arc.meta.at("expansion").get<int64_t>();
    sae.input_dim = arc.meta.at("input_dim").get<int64_t>();
    sae.token = arc.meta.at("token").get<int64_t>();
    sae.hook.block = arc.meta.at("hook_block").get<int>();
    sae.hook.tag = tag_from_string(arc.meta.at("hook_tag").get<std::string>());
    for (const char* name : {"w_enc", "b_enc", "w_dec", "b_dec"})
        if (!arc.tensors.contains(name))
            throw std::runtime_error(std::string("sae checkpoint is missing tensor ") + name);
    sae.w_enc = arc.tensors.at("w_enc");
    sae.b_enc = arc.tensors.at("b_enc");
    sae.w_dec = arc.tensors.at("w_dec");
    sae.b_dec = arc.tensors.at("b_dec");
    check_sae(sae);
    return sae;
}

}  // namespace impact
