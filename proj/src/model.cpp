#include "impact/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "impact/rng.hpp"

namespace impact {

void ModelConfig::validate() const {
    check(image_size > 0 && patch_size > 0 && channels > 0 && embed_dim > 0 && depth > 0 &&
              heads > 0 && mlp_ratio > 0 && num_classes > 0,
          "model config: all dimensions must be positive");
    check(image_size % patch_size == 0, "model config: image size not divisible by patch size");
    check(embed_dim % heads == 0, "model config: embed dim not divisible by heads");
}

const char* site_tag_name(SiteTag tag) {
    switch (tag) {
        case SiteTag::norm1: return "norm1";
        case SiteTag::q: return "q";
        case SiteTag::k: return "k";
        case SiteTag::v: return "v";
        case SiteTag::attn_out: return "attn_out";
        case SiteTag::norm2: return "norm2";
        case SiteTag::mlp_act: return "mlp_act";
        case SiteTag::mlp_out: return "mlp_out";
        case SiteTag::resid: return "resid";
    }
    return "?";
}

SiteTag parse_site_tag(const std::string& name) {
    for (SiteTag tag : {SiteTag::norm1, SiteTag::q, SiteTag::k, SiteTag::v, SiteTag::attn_out,
                        SiteTag::norm2, SiteTag::mlp_act, SiteTag::mlp_out, SiteTag::resid})
        if (name == site_tag_name(tag)) return tag;
    check(false, "unknown site tag: " + name);
    return SiteTag::norm1;
}

std::string site_name(const HookSite& site) {
    return "blocks." + std::to_string(site.block) + "." + site_tag_name(site.tag);
}

std::vector<HookSite> all_hook_sites(int depth) {
    std::vector<HookSite> out;
    for (int b = 0; b < depth; ++b)
        for (SiteTag tag : {SiteTag::norm1, SiteTag::q, SiteTag::k, SiteTag::v, SiteTag::attn_out,
                            SiteTag::norm2, SiteTag::mlp_act, SiteTag::mlp_out})
            out.push_back({b, tag});
    return out;
}

std::vector<int64_t> site_shape(const ModelConfig& cfg, const HookSite& site, int64_t batch) {
    const int64_t T = cfg.tokens();
    switch (site.tag) {
        case SiteTag::q:
        case SiteTag::k:
        case SiteTag::v:
            return {batch, T, cfg.heads, cfg.head_dim()};
        case SiteTag::mlp_act:
            return {batch, T, cfg.mlp_dim()};
        default:
            return {batch, T, cfg.embed_dim};
    }
}

Tensor patchify(const Tensor& images, int patch_size) {
    check(images.ndim() == 4, "patchify: images must be (B, C, H, W)");
    const int64_t B = images.dim(0), C = images.dim(1), H = images.dim(2), W = images.dim(3);
    check(H % patch_size == 0 && W % patch_size == 0, "patchify: image not divisible by patch");
    const int64_t ph = H / patch_size, pw = W / patch_size;
    const int64_t flat = C * patch_size * patch_size;
    Tensor out({B, ph * pw, flat});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t pr = 0; pr < ph; ++pr)
            for (int64_t pc = 0; pc < pw; ++pc) {
                float* dst = out.data() + ((b * ph * pw) + pr * pw + pc) * flat;
                for (int64_t c = 0; c < C; ++c)
                    for (int64_t y = 0; y < patch_size; ++y) {
                        const float* src = images.data() +
                                           ((b * C + c) * H + pr * patch_size + y) * W +
                                           pc * patch_size;
                        std::memcpy(dst + (c * patch_size + y) * patch_size, src,
                                    static_cast<size_t>(patch_size) * sizeof(float));
                    }
            }
    return out;
}

VitModel VitModel::init(const ModelConfig& cfg) {
    cfg.validate();
    VitModel m;
    m.config = cfg;
    Rng rng(derive_seed(cfg.seed, "model_init"));
    const int64_t E = cfg.embed_dim, M = cfg.mlp_dim(), T = cfg.tokens();
    const int64_t flat = int64_t(cfg.channels) * cfg.patch_size * cfg.patch_size;
    auto normal = [&](std::vector<int64_t> shape) { return rng.normal_tensor(std::move(shape), 0.0, 0.02); };
    m.params["patch_embed.w"] = normal({E, flat});
    m.params["patch_embed.b"] = Tensor::zeros({E});
    m.params["pos_embed"] = normal({T, E});
    for (int b = 0; b < cfg.depth; ++b) {
        const std::string pre = "blocks." + std::to_string(b) + ".";
        m.params[pre + "norm1.gamma"] = Tensor::full({E}, 1.0f);
        m.params[pre + "norm1.beta"] = Tensor::zeros({E});
        m.params[pre + "qkv.w"] = normal({3 * E, E});
        m.params[pre + "qkv.b"] = Tensor::zeros({3 * E});
        m.params[pre + "attn_out.w"] = normal({E, E});
        m.params[pre + "attn_out.b"] = Tensor::zeros({E});
        m.params[pre + "ls1.gamma"] = Tensor::full({E}, cfg.layerscale_init);
        m.params[pre + "norm2.gamma"] = Tensor::full({E}, 1.0f);
        m.params[pre + "norm2.beta"] = Tensor::zeros({E});
        m.params[pre + "mlp_in.w"] = normal({M, E});
        m.params[pre + "mlp_in.b"] = Tensor::zeros({M});
        m.params[pre + "mlp_out.w"] = normal({E, M});
        m.params[pre + "mlp_out.b"] = Tensor::zeros({E});
        m.params[pre + "ls2.gamma"] = Tensor::full({E}, cfg.layerscale_init);
    }
    m.params["final_norm.gamma"] = Tensor::full({E}, 1.0f);
    m.params["final_norm.beta"] = Tensor::zeros({E});
    m.params["head.w"] = normal({cfg.num_classes, E});
    m.params["head.b"] = Tensor::zeros({cfg.num_classes});
    return m;
}

const Tensor& VitModel::p(const std::string& name) const {
    auto it = params.find(name);
    check(it != params.end(), "model: missing parameter " + name);
    return it->second;
}

ForwardResult VitModel::forward(Tape& t, const Tensor& images, const ForwardOptions& o) const {
    config.validate();
    check(images.ndim() == 4 && images.dim(1) == config.channels &&
              images.dim(2) == config.image_size && images.dim(3) == config.image_size,
          "forward: images shaped " + shape_str(images.shape()) + " do not match config");
    const int64_t B = images.dim(0);
    const int64_t T = config.tokens(), E = config.embed_dim;
    const int64_t H = config.heads, Dh = config.head_dim();

    std::map<std::string, Var> cache;
    auto P = [&](const std::string& n) -> Var {
        auto it = cache.find(n);
        if (it != cache.end()) return it->second;
        Var v = o.params_trainable ? t.param(n, p(n)) : t.constant(p(n));
        cache.emplace(n, v);
        return v;
    };

    ForwardResult res;
    auto apply_site = [&](int block, SiteTag tag, Var a) -> Var {
        const HookSite site{block, tag};
        if (o.intervention && tag != SiteTag::resid) {
            Var b = o.intervention(t, site, a);
            check(b.valid() && b.val().same_shape(a.val()),
                  "intervention changed the shape at " + site_name(site));
            a = b;
        }
        if (o.hooks.count(site)) res.trace.emplace(site, a);
        return a;
    };

    Tensor patches = patchify(images, config.patch_size);
    Var x = t.linear(t.constant(patches), P("patch_embed.w"), P("patch_embed.b"));
    x = t.concat({t.constant(Tensor::zeros({B, 1, E})), x}, 1);
    x = t.add(x, P("pos_embed"));

    const float att_scale = 1.0f / std::sqrt(static_cast<float>(Dh));
    for (int b = 0; b < config.depth; ++b) {
        const std::string pre = "blocks." + std::to_string(b) + ".";
        Var h1 = apply_site(b, SiteTag::norm1,
                            t.layernorm_last(x, P(pre + "norm1.gamma"), P(pre + "norm1.beta"), 1e-6f));
        Var qkv = t.linear(h1, P(pre + "qkv.w"), P(pre + "qkv.b"));
        Var q = apply_site(b, SiteTag::q, t.reshape(t.slice(qkv, 2, 0, E), {B, T, H, Dh}));
        Var k = apply_site(b, SiteTag::k, t.reshape(t.slice(qkv, 2, E, E), {B, T, H, Dh}));
        Var v = apply_site(b, SiteTag::v, t.reshape(t.slice(qkv, 2, 2 * E, E), {B, T, H, Dh}));
        Var qh = t.transpose(q, {0, 2, 1, 3});
        Var kh = t.transpose(k, {0, 2, 3, 1});
        Var vh = t.transpose(v, {0, 2, 1, 3});
        Var scores = t.scale(t.matmul(qh, kh), att_scale);
        Var attn = t.softmax_last(scores);
        if (o.capture_attention) res.attn.emplace(b, attn);
        Var ctx = t.matmul(attn, vh);
        Var merged = t.reshape(t.transpose(ctx, {0, 2, 1, 3}), {B, T, E});
        Var proj = t.linear(merged, P(pre + "attn_out.w"), P(pre + "attn_out.b"));
        Var s1 = apply_site(b, SiteTag::attn_out, t.layerscale(proj, P(pre + "ls1.gamma")));
        x = t.add(x, s1);
        Var h2 = apply_site(b, SiteTag::norm2,
                            t.layernorm_last(x, P(pre + "norm2.gamma"), P(pre + "norm2.beta"), 1e-6f));
        Var mid = apply_site(b, SiteTag::mlp_act,
                             t.gelu(t.linear(h2, P(pre + "mlp_in.w"), P(pre + "mlp_in.b"))));
        Var mo = t.linear(mid, P(pre + "mlp_out.w"), P(pre + "mlp_out.b"));
        Var s2 = apply_site(b, SiteTag::mlp_out, t.layerscale(mo, P(pre + "ls2.gamma")));
        x = t.add(x, s2);
        x = apply_site(b, SiteTag::resid, x);  // capture-only tap
    }
    Var fin = t.layernorm_last(x, P("final_norm.gamma"), P("final_norm.beta"), 1e-6f);
    Var cls = t.reshape(t.slice(fin, 1, 0, 1), {B, E});
    res.logits = t.linear(cls, P("head.w"), P("head.b"));
    return res;
}

Tensor VitModel::logits(const Tensor& images) const {
    Tape t(false);
    ForwardOptions o;
    o.params_trainable = false;
    return forward(t, images, o).logits.val();
}

ActivationTrace VitModel::capture(const Tensor& images, const std::set<HookSite>& hooks) const {
    Tape t(false);
    ForwardOptions o;
    o.hooks = hooks;
    o.params_trainable = false;
    ForwardResult fr = forward(t, images, o);
    ActivationTrace trace;
    for (const auto& [site, var] : fr.trace) trace.emplace(site, var.val());
    return trace;
}

namespace {

int64_t count_correct(const Tensor& logits, const std::vector<int>& labels) {
    const int64_t B = logits.dim(0), C = logits.dim(1);
    int64_t correct = 0;
    for (int64_t i = 0; i < B; ++i) {
        const float* row = logits.data() + i * C;
        int64_t arg = 0;
        for (int64_t c = 1; c < C; ++c)
            if (row[c] > row[arg]) arg = c;
        if (int(arg) == labels[static_cast<size_t>(i)]) ++correct;
    }
    return correct;
}

void zero_masked(std::map<std::string, Tensor>& tensors, const SparsityMask& mask) {
    for (const auto& [name, m] : mask) {
        auto it = tensors.find(name);
        if (it == tensors.end()) continue;
        check(it->second.same_shape(m), "mask shape mismatch for " + name);
        float* d = it->second.data();
        const float* k = m.data();
        for (int64_t i = 0; i < it->second.numel(); ++i)
            if (k[i] == 0.0f) d[i] = 0.0f;
    }
}

}  // namespace

TrainHistory train(VitModel& model, const Dataset& train_ds, const Dataset& val_ds,
                   const TrainConfig& cfg, const SparsityMask* mask) {
    check(train_ds.size() > 0, "train: empty dataset");
    check(train_ds.num_classes == model.config.num_classes, "train: class count mismatch");
    check(cfg.batch_size > 0 && cfg.epochs >= 0, "train: bad epochs/batch size");
    check(cfg.lr_step >= 0 && cfg.lr_gamma > 0.0, "train: bad lr schedule");
    if (mask) zero_masked(model.params, *mask);
    Optimizer opt(cfg.opt);
    const uint64_t seed = cfg.seed ? cfg.seed : model.config.seed;
    TrainHistory hist;
    std::vector<int64_t> order(static_cast<size_t>(train_ds.size()));
    for (int e = 0; e < cfg.epochs; ++e) {
        if (cfg.lr_step > 0)
            opt.set_lr(cfg.opt.lr * std::pow(cfg.lr_gamma, e / cfg.lr_step));
        hist.lr.push_back(opt.lr());
        std::iota(order.begin(), order.end(), 0);
        Rng(derive_seed(seed, "train_epoch", e)).shuffle(order);
        double loss_sum = 0.0;
        int64_t correct = 0;
        int batches = 0;
        for (int64_t start = 0; start < train_ds.size(); start += cfg.batch_size) {
            const int64_t len = std::min<int64_t>(cfg.batch_size, train_ds.size() - start);
            std::span<const int64_t> idx(order.data() + start, static_cast<size_t>(len));
            Tensor images = gather_images(train_ds, idx);
            std::vector<int> labels = gather_labels(train_ds, idx);
            Tape t;
            ForwardResult fr = model.forward(t, images);
            Var loss = t.cross_entropy_mean(fr.logits, labels);
            check(loss.val().all_finite(), "train: non-finite loss");
            loss_sum += double(loss.val()[0]);
            correct += count_correct(fr.logits.val(), labels);
            ++batches;
            t.backward(loss, Tensor::scalar(1.0f));
            GradMap grads = t.named_grads();
            if (mask) zero_masked(grads, *mask);
            opt.step(model.params, grads);
            if (mask) zero_masked(model.params, *mask);
        }
        hist.train_loss.push_back(loss_sum / std::max(batches, 1));
        hist.train_acc.push_back(double(correct) / double(train_ds.size()));
        hist.val_acc.push_back(val_ds.size() > 0 ? evaluate(model, val_ds, cfg.batch_size) : 0.0);
    }
    return hist;
}

double evaluate(const VitModel& model, const Dataset& ds, int batch_size) {
    check(ds.size() > 0, "evaluate: empty dataset");
    int64_t correct = 0;
    std::vector<int64_t> idx;
    for (int64_t start = 0; start < ds.size(); start += batch_size) {
        const int64_t len = std::min<int64_t>(batch_size, ds.size() - start);
        idx.resize(static_cast<size_t>(len));
        std::iota(idx.begin(), idx.end(), start);
        Tensor logits = model.logits(gather_images(ds, idx));
        correct += count_correct(logits, gather_labels(ds, idx));
    }
    return double(correct) / double(ds.size());
}

std::vector<int> predict(const VitModel& model, const Dataset& ds, int batch_size) {
    std::vector<int> out;
    out.reserve(static_cast<size_t>(ds.size()));
    std::vector<int64_t> idx;
    for (int64_t start = 0; start < ds.size(); start += batch_size) {
        const int64_t len = std::min<int64_t>(batch_size, ds.size() - start);
        idx.resize(static_cast<size_t>(len));
        std::iota(idx.begin(), idx.end(), start);
        Tensor logits = model.logits(gather_images(ds, idx));
        const int64_t C = logits.dim(1);
        for (int64_t i = 0; i < len; ++i) {
            const float* row = logits.data() + i * C;
            int64_t arg = 0;
            for (int64_t c = 1; c < C; ++c)
                if (row[c] > row[arg]) arg = c;
            out.push_back(int(arg));
        }
    }
    return out;
}

}  // namespace impact
