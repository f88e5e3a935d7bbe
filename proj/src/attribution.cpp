#include "impact/attribution.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "impact/ops.hpp"
#include "impact/tape.hpp"

namespace impact {

namespace {

void ensure(bool ok, const std::string& msg) {
    if (!ok) throw std::runtime_error("attribution: " + msg);
}

std::string format_value(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, 17);
    ensure(ec == std::errc(), "value formatting failed");
    return std::string(buf, end);
}

void check_image_batch(const ModelConfig& cfg, const Tensor& images) {
    ensure(images.ndim() == 4, "images must be (batch, channels, height, width)");
    ensure(images.dim(0) >= 1, "empty image batch");
    ensure(images.dim(1) == cfg.channels && images.dim(2) == cfg.image_size &&
              images.dim(3) == cfg.image_size,
          "image shape does not match the model");
    for (int64_t i = 0; i < images.numel(); ++i)
        ensure(std::isfinite(images.data()[i]), "non-finite pixel");
}

Tensor as_batch(const ModelConfig& cfg, const Tensor& image) {
    if (image.ndim() == 3) {
        Tensor out({1, image.dim(0), image.dim(1), image.dim(2)},
                   std::vector<float>(image.data(), image.data() + image.numel()));
        check_image_batch(cfg, out);
        return out;
    }
    check_image_batch(cfg, image);
    ensure(image.dim(0) == 1, "expected a single image");
    return image;
}

// Relevance order: score descending, patch index breaks ties.
std::vector<int64_t> patch_order(const AttributionMap& map) {
    const int64_t n = map.patch_scores.numel();
    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    const float* s = map.patch_scores.data();
    std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
        if (s[a] != s[b]) return s[a] > s[b];
        return a < b;
    });
    return order;
}

void copy_patch(const ModelConfig& cfg, Tensor& dst, const Tensor& src, int64_t patch) {
    const int64_t pps = cfg.patches_per_side();
    const int64_t ps = cfg.patch_size;
    const int64_t hw = cfg.image_size;
    const int64_t pr = (patch / pps) * ps;
    const int64_t pc = (patch % pps) * ps;
    for (int64_t c = 0; c < cfg.channels; ++c)
        for (int64_t r = 0; r < ps; ++r) {
            const int64_t off = (c * hw + pr + r) * hw + pc;
            std::memcpy(dst.data() + off, src.data() + off, static_cast<size_t>(ps) * sizeof(float));
        }
}

void check_map(const ModelConfig& cfg, const AttributionMap& map) {
    ensure(map.patch_scores.ndim() == 1, "relevance map must be rank 1");
    ensure(map.patch_scores.numel() == cfg.patch_count(), "relevance map size does not match model");
    for (int64_t i = 0; i < map.patch_scores.numel(); ++i)
        ensure(std::isfinite(map.patch_scores[i]), "non-finite relevance");
}

// Shared by insertion (reveal onto zeros) and deletion (blank out the real
// image); both walk the same relevance order.
FaithfulnessCurve faithfulness_curve(const VitModel& model, const Tensor& image,
                                     const AttributionMap& map, int category, int steps,
                                     bool insertion) {
    const ModelConfig& cfg = model.config;
    Tensor img = as_batch(cfg, image);
    check_map(cfg, map);
    ensure(category >= 0 && category < cfg.num_classes, "category out of range");
    const int64_t patches = cfg.patch_count();
    ensure(steps >= 2 && steps <= patches, "steps must be in [2, patch_count]");

    const std::vector<int64_t> order = patch_order(map);
    const int64_t pixels = cfg.channels * cfg.image_size * cfg.image_size;
    Tensor batch({steps + 1, cfg.channels, cfg.image_size, cfg.image_size});
    FaithfulnessCurve curve;
    for (int64_t s = 0; s <= steps; ++s) {
        const int64_t k = s * patches / steps;
        curve.fractions.push_back(double(k) / double(patches));
        Tensor frame = insertion ? Tensor::zeros(img.shape()) : img;
        if (insertion) {
            for (int64_t i = 0; i < k; ++i) copy_patch(cfg, frame, img, order[size_t(i)]);
        } else {
            Tensor blank = Tensor::zeros(img.shape());
            for (int64_t i = 0; i < k; ++i) copy_patch(cfg, frame, blank, order[size_t(i)]);
        }
        std::memcpy(batch.data() + s * pixels, frame.data(),
                    static_cast<size_t>(pixels) * sizeof(float));
    }

    Tensor probs = ops::softmax_last(model.logits(batch));
    for (int64_t s = 0; s <= steps; ++s) {
        const double p = double(probs[s * cfg.num_classes + category]);
        ensure(std::isfinite(p), "non-finite probability");
        curve.probabilities.push_back(p);
    }
    double auc = 0.0;
    for (size_t s = 0; s + 1 < curve.fractions.size(); ++s)
        auc += (curve.fractions[s + 1] - curve.fractions[s]) *
               (curve.probabilities[s] + curve.probabilities[s + 1]) * 0.5;
    curve.auc = auc;
    return curve;
}

}  // namespace

Tensor attention_rollout(const std::vector<Tensor>& attn, const std::vector<Tensor>& grad) {
    ensure(!attn.empty(), "rollout needs at least one block");
    ensure(attn.size() == grad.size(), "attention and gradient block counts differ");
    ensure(attn[0].ndim() == 3, "blocks must be (heads, tokens, tokens)");
    const int64_t heads = attn[0].dim(0);
    const int64_t tokens = attn[0].dim(1);
    for (size_t b = 0; b < attn.size(); ++b) {
        ensure(attn[b].ndim() == 3 && grad[b].ndim() == 3, "blocks must be (heads, tokens, tokens)");
        ensure(attn[b].dim(0) == heads && grad[b].same_shape(attn[b]) &&
                  attn[b].dim(1) == tokens && attn[b].dim(2) == tokens,
              "block shape mismatch");
        for (int64_t i = 0; i < attn[b].numel(); ++i)
            ensure(std::isfinite(attn[b][i]) && std::isfinite(grad[b][i]),
                  "non-finite attention or gradient");
    }

    const size_t t2 = static_cast<size_t>(tokens * tokens);
    std::vector<double> c(t2, 0.0);
    for (int64_t i = 0; i < tokens; ++i) c[size_t(i * tokens + i)] = 1.0;
    std::vector<double> abar(t2), next(t2);
    for (size_t b = 0; b < attn.size(); ++b) {
        const float* a = attn[b].data();
        const float* g = grad[b].data();
        for (size_t i = 0; i < t2; ++i) {
            double m = 0.0;
            for (int64_t h = 0; h < heads; ++h) {
                const double w = double(a[size_t(h) * t2 + i]) * double(g[size_t(h) * t2 + i]);
                if (w > 0.0) m += w;
            }
            abar[i] = m / double(heads);
        }
        next = c;
        for (int64_t i = 0; i < tokens; ++i)
            for (int64_t k = 0; k < tokens; ++k) {
                const double aik = abar[size_t(i * tokens + k)];
                if (aik == 0.0) continue;
                const double* crow = c.data() + k * tokens;
                double* nrow = next.data() + i * tokens;
                for (int64_t j = 0; j < tokens; ++j) nrow[size_t(j)] += aik * crow[size_t(j)];
            }
        c.swap(next);
    }

    Tensor out({tokens, tokens});
    for (size_t i = 0; i < t2; ++i) {
        ensure(std::isfinite(c[i]), "rollout diverged");
        out.data()[i] = static_cast<float>(c[i]);
    }
    return out;
}

std::vector<AttributionMap> transformer_attribution_batch(const VitModel& model,
                                                          const Tensor& images, int category,
                                                          float layerscale_eps) {
    const ModelConfig& cfg = model.config;
    check_image_batch(cfg, images);
    ensure(category >= 0 && category < cfg.num_classes, "category out of range");
    ensure(layerscale_eps > 0.0f, "layerscale eps must be positive");
    const int64_t batch = images.dim(0);
    const int64_t heads = cfg.heads;
    const int64_t tokens = cfg.tokens();

    Tape t(true);
    t.set_layerscale_relprop(true, layerscale_eps);
    ForwardOptions opts;
    opts.capture_attention = true;
    // Gradients only flow to nodes that depend on a grad-requiring leaf, so
    // the weights stay registered as parameters here.
    opts.params_trainable = true;
    ForwardResult res = model.forward(t, images, opts);
    t.backward(t.reduce_sum_all(t.slice(res.logits, 1, category, 1)), Tensor::scalar(1.0f));

    std::vector<Tensor> attn_vals, attn_grads;
    attn_vals.reserve(static_cast<size_t>(cfg.depth));
    attn_grads.reserve(static_cast<size_t>(cfg.depth));
    for (int b = 0; b < cfg.depth; ++b) {
        Var av = res.attn.at(b);
        attn_vals.push_back(av.val());
        attn_grads.push_back(t.grad(av));
    }

    const size_t block = static_cast<size_t>(heads * tokens * tokens);
    std::vector<AttributionMap> maps;
    maps.reserve(static_cast<size_t>(batch));
    for (int64_t i = 0; i < batch; ++i) {
        std::vector<Tensor> a, g;
        for (int b = 0; b < cfg.depth; ++b) {
            const float* av = attn_vals[size_t(b)].data() + size_t(i) * block;
            const float* gv = attn_grads[size_t(b)].data() + size_t(i) * block;
            a.emplace_back(std::vector<int64_t>{heads, tokens, tokens},
                           std::vector<float>(av, av + block));
            g.emplace_back(std::vector<int64_t>{heads, tokens, tokens},
                           std::vector<float>(gv, gv + block));
        }
        Tensor c = attention_rollout(a, g);
        AttributionMap map;
        map.category = category;
        map.patch_scores = Tensor({cfg.patch_count()});
        std::memcpy(map.patch_scores.data(), c.data() + 1,
                    static_cast<size_t>(cfg.patch_count()) * sizeof(float));
        maps.push_back(std::move(map));
    }
    return maps;
}

AttributionMap transformer_attribution(const VitModel& model, const Tensor& image, int category,
                                       float layerscale_eps) {
    Tensor batch = as_batch(model.config, image);
    return transformer_attribution_batch(model, batch, category, layerscale_eps)[0];
}

FaithfulnessCurve insertion_auc(const VitModel& model, const Tensor& image,
                                const AttributionMap& map, int category, int steps) {
    return faithfulness_curve(model, image, map, category, steps, true);
}

FaithfulnessCurve deletion_auc(const VitModel& model, const Tensor& image,
                               const AttributionMap& map, int category, int steps) {
    return faithfulness_curve(model, image, map, category, steps, false);
}

void write_attribution_csv(const AttributionMap& map, const std::string& path) {
    const int64_t n = map.patch_scores.numel();
    int64_t side = static_cast<int64_t>(std::llround(std::sqrt(double(n))));
    ensure(side * side == n, "relevance map is not square");
    std::ofstream out(path);
    ensure(out.good(), "cannot open " + path);
    for (int64_t r = 0; r < side; ++r) {
        for (int64_t c = 0; c < side; ++c) {
            if (c) out << ',';
            out << format_value(double(map.patch_scores[r * side + c]));
        }
        out << '\n';
    }
    ensure(out.good(), "write failed: " + path);
}

void write_curve_csv(const FaithfulnessCurve& curve, const std::string& path) {
    ensure(curve.fractions.size() == curve.probabilities.size(), "curve arrays differ in length");
    std::ofstream out(path);
    ensure(out.good(), "cannot open " + path);
    out << "fraction,probability\n";
    for (size_t i = 0; i < curve.fractions.size(); ++i)
        out << format_value(curve.fractions[i]) << ',' << format_value(curve.probabilities[i])
            << '\n';
    ensure(out.good(), "write failed: " + path);
}

}  // namespace impact
