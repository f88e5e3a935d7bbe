#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <vector>

#include "impact/checkpoint.hpp"
#include "impact/data.hpp"
#include "impact/model.hpp"
#include "impact/ops.hpp"
#include "impact/rng.hpp"
#include "impact/sae.hpp"

using namespace impact;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.image_size = 8;
    cfg.patch_size = 4;
    cfg.embed_dim = 16;
    cfg.depth = 2;
    cfg.heads = 2;
    cfg.mlp_ratio = 2;
    cfg.num_classes = 4;
    return cfg;
}

SaeModel random_sae(const ModelConfig& cfg, int64_t expansion, int64_t k, uint64_t seed) {
    SaeModel sae;
    sae.hook = HookSite{cfg.depth - 1, SiteTag::resid};
    sae.token = 0;
    sae.input_dim = cfg.embed_dim;
    sae.expansion = expansion;
    sae.k_sae = k;
    Rng rng(seed);
    int64_t l = sae.latents();
    sae.w_dec = rng.normal_tensor({sae.input_dim, l});
    for (int64_t c = 0; c < l; ++c) {
        double ss = 0.0;
        for (int64_t r = 0; r < sae.input_dim; ++r) {
            double v = sae.w_dec[r * l + c];
            ss += v * v;
        }
        double n = std::sqrt(ss);
        for (int64_t r = 0; r < sae.input_dim; ++r)
            sae.w_dec[r * l + c] = static_cast<float>(sae.w_dec[r * l + c] / n);
    }
    sae.w_enc = ops::transpose(sae.w_dec, {1, 0});
    sae.b_enc = Tensor::zeros({l});
    sae.b_dec = Tensor::zeros({sae.input_dim});
    return sae;
}

Dataset synthetic_dataset(const ModelConfig& cfg, int per_class, uint64_t seed) {
    Dataset ds;
    ds.num_classes = cfg.num_classes;
    ds.split = "synthetic";
    int n = per_class * cfg.num_classes;
    Rng rng(seed);
    ds.images = rng.normal_tensor({n, cfg.channels, cfg.image_size, cfg.image_size}, 0.5, 0.25);
    for (int64_t i = 0; i < ds.images.numel(); ++i)
        ds.images[i] = std::min(1.0f, std::max(0.0f, ds.images[i]));
    for (int i = 0; i < n; ++i) ds.labels.push_back(i % cfg.num_classes);
    ds.validate();
    return ds;
}

// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, descending.
std::vector<double> symmetric_eigenvalues(std::vector<double> a, int n) {
    for (int sweep = 0; sweep < 200; ++sweep) {
        double off = 0.0;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) off += a[p * n + q] * a[p * n + q];
        if (off < 1e-24) break;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) {
                double apq = a[p * n + q];
                if (apq == 0.0) continue;
                double theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                double t = (theta >= 0.0 ? 1.0 : -1.0) /
                           (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
                for (int i = 0; i < n; ++i) {
                    double aip = a[i * n + p], aiq = a[i * n + q];
                    a[i * n + p] = c * aip - s * aiq;
                    a[i * n + q] = s * aip + c * aiq;
                }
                for (int i = 0; i < n; ++i) {
                    double api = a[p * n + i], aqi = a[q * n + i];
                    a[p * n + i] = c * api - s * aqi;
                    a[q * n + i] = s * api + c * aqi;
                }
            }
    }
    std::vector<double> ev(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) ev[static_cast<size_t>(i)] = a[i * n + i];
    std::sort(ev.begin(), ev.end(), std::greater<>());
    return ev;
}

}  // namespace

TEST_CASE("batchtopk keeps the k*B largest pre-activations batch-wide") {
    SUBCASE("budget moves across samples") {
        Tensor pre({2, 3}, {5.0f, 1.0f, 0.0f, 4.0f, 3.0f, 0.0f});
        Tensor mask = batchtopk_mask(pre, 1);
        CHECK(mask.shape() == std::vector<int64_t>{2, 3});
        Tensor want({2, 3}, {1.0f, 0.0f, 0.0f, 1.0f, 0.0f, 0.0f});
        CHECK(bitwise_equal(mask, want));

        Tensor starved({2, 3}, {5.0f, 4.0f, 0.0f, 1.0f, 0.0f, 0.0f});
        Tensor mask2 = batchtopk_mask(starved, 1);
        Tensor want2({2, 3}, {1.0f, 1.0f, 0.0f, 0.0f, 0.0f, 0.0f});
        CHECK(bitwise_equal(mask2, want2));
    }
    SUBCASE("single sample reduces to plain top-k") {
        Tensor pre({1, 4}, {3.0f, -1.0f, 2.0f, 0.5f});
        Tensor mask = batchtopk_mask(pre, 2);
        Tensor want({1, 4}, {1.0f, 0.0f, 1.0f, 0.0f});
        CHECK(bitwise_equal(mask, want));
    }
    SUBCASE("negative winners are kept; there is no clamping") {
        Tensor pre({1, 2}, {-1.0f, -2.0f});
        Tensor mask = batchtopk_mask(pre, 1);
        CHECK(mask[0] == 1.0f);
        CHECK(mask[1] == 0.0f);
    }
    SUBCASE("ties prefer the lower latent, then the lower sample") {
        Tensor pre({2, 2}, {2.0f, 2.0f, 2.0f, 0.0f});
        Tensor mask = batchtopk_mask(pre, 1);
        Tensor want({2, 2}, {1.0f, 0.0f, 1.0f, 0.0f});
        CHECK(bitwise_equal(mask, want));
    }
    SUBCASE("mask is exact on random input") {
        Rng rng(7);
        Tensor pre = rng.normal_tensor({9, 13});
        Tensor mask = batchtopk_mask(pre, 4);
        int64_t ones = 0;
        for (int64_t i = 0; i < mask.numel(); ++i) {
            CHECK((mask[i] == 0.0f || mask[i] == 1.0f));
            ones += mask[i] == 1.0f ? 1 : 0;
        }
        CHECK(ones == 4 * 9);
        float kept_min = 1e30f, dropped_max = -1e30f;
        for (int64_t i = 0; i < mask.numel(); ++i)
            (mask[i] == 1.0f ? kept_min = std::min(kept_min, pre[i])
                             : dropped_max = std::max(dropped_max, pre[i]));
        CHECK(kept_min >= dropped_max);
    }
    SUBCASE("kept code values pass through unchanged") {
        ModelConfig cfg = tiny_config();
        SaeModel sae = random_sae(cfg, 2, 3, 11);
        Rng rng(5);
        Tensor x = rng.normal_tensor({6, cfg.embed_dim});
        Tensor pre = ops::linear(x, sae.w_enc, sae.b_enc);
        Tensor mask = batchtopk_mask(pre, sae.k_sae);
        Tensor codes = batchtopk_encode(sae, x);
        for (int64_t i = 0; i < codes.numel(); ++i) {
            if (mask[i] == 1.0f)
                CHECK(std::memcmp(codes.data() + i, pre.data() + i, sizeof(float)) == 0);
            else
                CHECK(codes[i] == 0.0f);
        }
    }
    SUBCASE("bad arguments throw") {
        Tensor pre({2, 3});
        CHECK_THROWS(batchtopk_mask(pre, 0));
        CHECK_THROWS(batchtopk_mask(pre, 4));
        Tensor bad({1, 2}, {std::nanf(""), 0.0f});
        CHECK_THROWS(batchtopk_mask(bad, 1));
        ModelConfig cfg = tiny_config();
        SaeModel sae = random_sae(cfg, 1, 2, 1);
        Tensor narrow({3, cfg.embed_dim - 1});
        CHECK_THROWS(batchtopk_encode(sae, narrow));
    }
}

TEST_CASE("sae training reduces reconstruction error deterministically") {
    Rng rng(42);
    int64_t n = 128, d = 8, latent_rank = 3;
    Tensor basis = rng.normal_tensor({d, latent_rank});
    Tensor z = rng.normal_tensor({n, latent_rank});
    Tensor acts = ops::matmul(z, ops::transpose(basis, {1, 0}));
    Tensor noise = rng.normal_tensor({n, d}, 0.0, 0.02);
    acts = ops::add(acts, noise);

    SaeTrainConfig cfg;
    cfg.k_sae = 3;
    cfg.expansion = 2;
    cfg.epochs = 8;
    cfg.batch_size = 32;
    cfg.lr = 1e-2;
    cfg.seed = 9;
    HookSite hook{1, SiteTag::resid};

    SaeTrainResult res = train_sae(acts, cfg, hook);
    REQUIRE(res.loss.size() == 8);
    REQUIRE(res.quality.size() == 8);

    SUBCASE("per-epoch loss is non-increasing within 5%") {
        for (size_t e = 1; e < res.loss.size(); ++e)
            CHECK(res.loss[e] <= res.loss[e - 1] * 1.05);
    }
    SUBCASE("reconstruction improves and fve complements nmse") {
        CHECK(res.quality.back().nmse < res.quality.front().nmse);
        CHECK(res.quality.back().nmse < 1.0);
        for (const auto& q : res.quality)
            CHECK(q.fve + q.nmse == doctest::Approx(1.0).epsilon(1e-6));
    }
    SUBCASE("decoder columns stay unit length") {
        const Tensor& w = res.sae.w_dec;
        int64_t l = res.sae.latents();
        for (int64_t c = 0; c < l; ++c) {
            double ss = 0.0;
            for (int64_t r = 0; r < d; ++r) ss += double(w[r * l + c]) * double(w[r * l + c]);
            CHECK(std::sqrt(ss) == doctest::Approx(1.0).epsilon(1e-5));
        }
    }
    SUBCASE("same seed reproduces the run; another seed diverges") {
        SaeTrainResult again = train_sae(acts, cfg, hook);
        CHECK(bitwise_equal(again.sae.w_enc, res.sae.w_enc));
        CHECK(bitwise_equal(again.sae.w_dec, res.sae.w_dec));
        CHECK(bitwise_equal(again.sae.b_enc, res.sae.b_enc));
        CHECK(bitwise_equal(again.sae.b_dec, res.sae.b_dec));
        CHECK(again.loss == res.loss);

        SaeTrainConfig other = cfg;
        other.seed = 10;
        SaeTrainResult diff = train_sae(acts, other, hook);
        CHECK_FALSE(bitwise_equal(diff.sae.w_enc, res.sae.w_enc));
    }
    SUBCASE("zero epochs returns the transposed-decoder init untouched") {
        SaeTrainConfig init_cfg = cfg;
        init_cfg.epochs = 0;
        SaeTrainResult init = train_sae(acts, init_cfg, hook);
        CHECK(init.loss.empty());
        CHECK(init.quality.empty());
        CHECK(bitwise_equal(init.sae.w_enc, ops::transpose(init.sae.w_dec, {1, 0})));
        for (int64_t i = 0; i < init.sae.b_enc.numel(); ++i) CHECK(init.sae.b_enc[i] == 0.0f);
        for (int64_t i = 0; i < init.sae.b_dec.numel(); ++i) CHECK(init.sae.b_dec[i] == 0.0f);
        int64_t l = init.sae.latents();
        for (int64_t c = 0; c < l; ++c) {
            double ss = 0.0;
            for (int64_t r = 0; r < d; ++r)
                ss += double(init.sae.w_dec[r * l + c]) * double(init.sae.w_dec[r * l + c]);
            CHECK(std::sqrt(ss) == doctest::Approx(1.0).epsilon(1e-5));
        }
    }
    SUBCASE("invalid setups throw") {
        SaeTrainConfig bad = cfg;
        bad.batch_size = n + 1;
        CHECK_THROWS(train_sae(acts, bad, hook));
        bad = cfg;
        bad.k_sae = 0;
        CHECK_THROWS(train_sae(acts, bad, hook));
        bad = cfg;
        bad.k_sae = 2 * d + 1;
        CHECK_THROWS(train_sae(acts, bad, hook));
        bad = cfg;
        bad.expansion = 0;
        CHECK_THROWS(train_sae(acts, bad, hook));
        bad = cfg;
        bad.epochs = -1;
        CHECK_THROWS(train_sae(acts, bad, hook));
        Tensor flat = Tensor::full({40, 4}, 0.75f);
        CHECK_THROWS(train_sae(flat, cfg, hook));
    }
}

TEST_CASE("an unrestricted sae beats the best rank-limited linear reconstruction") {
    Rng rng(3);
    int64_t n = 256, d = 8;
    Tensor mix = rng.normal_tensor({d, d});
    Tensor z = rng.normal_tensor({n, d});
    Tensor acts = ops::matmul(z, mix);

    std::vector<double> mean(static_cast<size_t>(d), 0.0);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) mean[static_cast<size_t>(j)] += acts[i * d + j];
    for (auto& m : mean) m /= static_cast<double>(n);
    std::vector<double> cov(static_cast<size_t>(d * d), 0.0);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t p = 0; p < d; ++p)
            for (int64_t q = 0; q < d; ++q)
                cov[static_cast<size_t>(p * d + q)] +=
                    (acts[i * d + p] - mean[static_cast<size_t>(p)]) *
                    (acts[i * d + q] - mean[static_cast<size_t>(q)]);

    std::vector<double> ev = symmetric_eigenvalues(cov, static_cast<int>(d));
    double total = 0.0, tail = 0.0;
    for (size_t i = 0; i < ev.size(); ++i) {
        total += ev[i];
        if (i >= 4) tail += ev[i];
    }
    double pca_rank4_nmse = tail / total;
    CHECK(pca_rank4_nmse > 0.05);  // the baseline has a real residual to beat

    SaeTrainConfig cfg;
    cfg.k_sae = 2 * d;  // every latent active: a plain linear autoencoder
    cfg.expansion = 2;
    cfg.epochs = 120;
    cfg.batch_size = 64;
    cfg.lr = 2e-2;
    cfg.seed = 17;
    SaeTrainResult res = train_sae(acts, cfg, HookSite{1, SiteTag::resid});
    CHECK(res.quality.back().nmse < pca_rank4_nmse);
    CHECK(res.quality.back().dead_fraction == 0.0);
}

TEST_CASE("quality metrics on handcrafted autoencoders") {
    SUBCASE("identity autoencoder reconstructs exactly") {
        SaeModel sae;
        sae.input_dim = 4;
        sae.expansion = 1;
        sae.k_sae = 4;
        sae.w_enc = Tensor({4, 4});
        sae.w_dec = Tensor({4, 4});
        for (int64_t i = 0; i < 4; ++i) {
            sae.w_enc[i * 4 + i] = 1.0f;
            sae.w_dec[i * 4 + i] = 1.0f;
        }
        sae.b_enc = Tensor::zeros({4});
        sae.b_dec = Tensor::zeros({4});
        Rng rng(2);
        Tensor acts = rng.normal_tensor({10, 4});
        SaeQuality q = sae_quality(sae, acts);
        CHECK(q.nmse == 0.0);
        CHECK(q.fve == 1.0);
        CHECK(q.dead_fraction == 0.0);
        CHECK(q.active_count == 4);
    }
    SUBCASE("predicting the mean scores nmse exactly one") {
        SaeModel sae;
        sae.input_dim = 2;
        sae.expansion = 2;
        sae.k_sae = 1;
        sae.w_enc = Tensor::zeros({4, 2});
        sae.b_enc = Tensor::zeros({4});
        sae.w_dec = Tensor::zeros({2, 4});
        sae.w_dec[0] = 1.0f;  // a harmless nonzero decoder
        sae.b_dec = Tensor({2}, {2.0f, 2.0f});
        Tensor acts({2, 2}, {1.0f, 1.0f, 3.0f, 3.0f});  // mean (2,2), exact in float
        SaeQuality q = sae_quality(sae, acts);
        CHECK(q.nmse == 1.0);
        CHECK(q.fve == 0.0);
    }
    SUBCASE("latents that never win count as dead") {
        SaeModel sae;
        sae.input_dim = 2;
        sae.expansion = 2;
        sae.k_sae = 1;
        sae.w_enc = Tensor({4, 2}, {1.0f, 0.0f, 0.1f, 0.0f, 0.0f, 0.0f, 0.0f, 0.0f});
        sae.b_enc = Tensor({4}, {0.0f, 0.0f, -1e9f, -1e9f});
        sae.w_dec = Tensor::zeros({2, 4});
        sae.w_dec[0] = 1.0f;
        sae.b_dec = Tensor::zeros({2});
        Tensor acts({3, 2}, {1.0f, 0.0f, 2.0f, 0.0f, 0.5f, 0.0f});
        SaeQuality q = sae_quality(sae, acts);
        CHECK(q.active_count == 1);
        CHECK(q.dead_fraction == doctest::Approx(0.75));
    }
    SUBCASE("zero-variance activations are rejected") {
        ModelConfig cfg = tiny_config();
        SaeModel sae = random_sae(cfg, 1, 2, 4);
        Tensor flat = Tensor::full({6, cfg.embed_dim}, 1.25f);
        CHECK_THROWS(sae_quality(sae, flat));
    }
}

TEST_CASE("cls-row logits match the forward pass bit for bit") {
    ModelConfig cfg = tiny_config();
    cfg.seed = 31;
    VitModel model = VitModel::init(cfg);
    Rng rng(8);
    Tensor images = rng.normal_tensor({5, cfg.channels, cfg.image_size, cfg.image_size}, 0.5, 0.25);
    HookSite last{cfg.depth - 1, SiteTag::resid};
    Tensor cls = collect_sae_inputs(model, images, last, 0);
    CHECK(cls.shape() == std::vector<int64_t>{5, cfg.embed_dim});
    Tensor via_rows = logits_from_cls(model, cls);
    Tensor via_forward = model.logits(images);
    CHECK(bitwise_equal(via_rows, via_forward));
}

TEST_CASE("latent zero-ablation matches a hand recomputation") {
    ModelConfig cfg = tiny_config();
    cfg.seed = 19;
    VitModel model = VitModel::init(cfg);
    SaeModel sae = random_sae(cfg, 2, 4, 23);
    int64_t l = sae.latents(), d = sae.input_dim;
    Rng rng(6);
    Tensor codes = rng.normal_tensor({3, l});

    SUBCASE("hand-rolled layernorm plus head agrees") {
        std::vector<int64_t> drop{1, 3};
        int category = 2;
        double got = sae_ablation_impact(model, sae, codes, drop, category);

        const Tensor& gamma = model.params.at("final_norm.gamma");
        const Tensor& beta = model.params.at("final_norm.beta");
        const Tensor& hw = model.params.at("head.w");
        const Tensor& hb = model.params.at("head.b");
        auto logits_row = [&](const std::vector<double>& code_row) {
            std::vector<double> x(static_cast<size_t>(d), 0.0);
            for (int64_t j = 0; j < d; ++j) {
                double s = sae.b_dec[j];
                for (int64_t c = 0; c < l; ++c)
                    s += code_row[static_cast<size_t>(c)] * sae.w_dec[j * l + c];
                x[static_cast<size_t>(j)] = s;
            }
            double mu = 0.0;
            for (double v : x) mu += v;
            mu /= static_cast<double>(d);
            double var = 0.0;
            for (double v : x) var += (v - mu) * (v - mu);
            var /= static_cast<double>(d);
            double inv = 1.0 / std::sqrt(var + 1e-6);
            std::vector<double> out(static_cast<size_t>(cfg.num_classes), 0.0);
            for (int c = 0; c < cfg.num_classes; ++c) {
                double s = hb[c];
                for (int64_t j = 0; j < d; ++j)
                    s += ((x[static_cast<size_t>(j)] - mu) * inv * gamma[j] + beta[j]) *
                         hw[c * d + j];
                out[static_cast<size_t>(c)] = s;
            }
            return out;
        };

        double acc = 0.0;
        for (int64_t i = 0; i < 3; ++i) {
            std::vector<double> base_row(static_cast<size_t>(l));
            for (int64_t c = 0; c < l; ++c) base_row[static_cast<size_t>(c)] = codes[i * l + c];
            std::vector<double> abl_row = base_row;
            for (int64_t dr : drop) abl_row[static_cast<size_t>(dr)] = 0.0;
            auto base = logits_row(base_row);
            auto abl = logits_row(abl_row);
            double norm = 0.0;
            for (double v : base) norm += v * v;
            acc += (base[static_cast<size_t>(category)] - abl[static_cast<size_t>(category)]) /
                   std::sqrt(norm);
        }
        CHECK(got == doctest::Approx(acc / 3.0).epsilon(1e-4));
    }
    SUBCASE("dead latents and empty sets score exactly zero") {
        Tensor with_dead = codes;
        for (int64_t i = 0; i < 3; ++i) with_dead[i * l + 5] = 0.0f;
        CHECK(sae_ablation_impact(model, sae, with_dead, {5}, 1) == 0.0);
        CHECK(sae_ablation_impact(model, sae, codes, {}, 1) == 0.0);
    }
    SUBCASE("bad indices throw") {
        CHECK_THROWS(sae_ablation_impact(model, sae, codes, {l}, 0));
        CHECK_THROWS(sae_ablation_impact(model, sae, codes, {-1}, 0));
        CHECK_THROWS(sae_ablation_impact(model, sae, codes, {0}, cfg.num_classes));
    }
}

TEST_CASE("latent ranking follows the code-times-gradient rule") {
    ModelConfig cfg = tiny_config();
    cfg.seed = 77;
    VitModel model = VitModel::init(cfg);
    SaeModel sae = random_sae(cfg, 1, 3, 13);
    int64_t l = sae.latents();
    Rng rng(21);
    Tensor codes = rng.normal_tensor({3, l});
    int category = 1;

    SUBCASE("finite differences reproduce the importance scores") {
        RankedUnits ranked = rank_latents(model, sae, codes, category, l);
        REQUIRE(ranked.units.size() == static_cast<size_t>(l));
        std::vector<double> by_unit(static_cast<size_t>(l), 0.0);
        for (size_t i = 0; i < ranked.units.size(); ++i)
            by_unit[static_cast<size_t>(ranked.units[i])] = ranked.importance[i];

        const double h = 5e-3;
        std::vector<double> fd(static_cast<size_t>(l), 0.0);
        for (int64_t i = 0; i < 3; ++i)
            for (int64_t j = 0; j < l; ++j) {
                Tensor plus = codes, minus = codes;
                plus[i * l + j] += static_cast<float>(h);
                minus[i * l + j] -= static_cast<float>(h);
                Tensor lp = logits_from_cls(model, sae_decode(sae, plus));
                Tensor lm = logits_from_cls(model, sae_decode(sae, minus));
                double g = (lp[i * cfg.num_classes + category] -
                            lm[i * cfg.num_classes + category]) /
                           (2.0 * h);
                fd[static_cast<size_t>(j)] += std::abs(codes[i * l + j] * g);
            }
        for (auto& v : fd) v /= 3.0;
        for (int64_t j = 0; j < l; ++j) {
            if (fd[static_cast<size_t>(j)] > 1e-3)
                CHECK(by_unit[static_cast<size_t>(j)] ==
                      doctest::Approx(fd[static_cast<size_t>(j)]).epsilon(0.02));
            else
                CHECK(std::abs(by_unit[static_cast<size_t>(j)] - fd[static_cast<size_t>(j)]) <
                      1e-3);
        }
    }
    SUBCASE("a silent latent ranks last with zero importance") {
        Tensor muted = codes;
        for (int64_t i = 0; i < 3; ++i) muted[i * l + 7] = 0.0f;
        RankedUnits ranked = rank_latents(model, sae, muted, category, l);
        CHECK(ranked.units.back() == 7);
        CHECK(ranked.importance.back() == 0.0);
        for (size_t i = 1; i < ranked.importance.size(); ++i)
            CHECK(ranked.importance[i] <= ranked.importance[i - 1]);
    }
    SUBCASE("bad arguments throw") {
        CHECK_THROWS(rank_latents(model, sae, codes, category, 0));
        CHECK_THROWS(rank_latents(model, sae, codes, category, l + 1));
        CHECK_THROWS(rank_latents(model, sae, codes, cfg.num_classes, 2));
        Tensor empty({0, l});
        CHECK_THROWS(rank_latents(model, sae, empty, category, 2));
    }
}

TEST_CASE("feature report emits the neuron-style rows for latents") {
    ModelConfig cfg = tiny_config();
    cfg.seed = 55;
    VitModel model = VitModel::init(cfg);
    Dataset ds = synthetic_dataset(cfg, 5, 91);
    SaeModel sae = random_sae(cfg, 2, 4, 37);

    std::vector<int> cats{0, 2};
    MetricReport report = sae_feature_metrics(model, sae, ds, cats, 3, 1234, "dense", 0.0);
    REQUIRE(report.rows.size() == 2 * (3 * 4 + 1));

    const char* metric_cycle[4] = {"attribution_importance", "selectivity", "class_variance",
                                   "label_entropy"};
    for (size_t ci = 0; ci < cats.size(); ++ci) {
        size_t base = ci * 13;
        for (size_t r = 0; r < 12; ++r) {
            const MetricRow& row = report.rows[base + r];
            CHECK(row.category == cats[ci]);
            CHECK(row.site == "resid");
            CHECK(row.block == cfg.depth - 1);
            CHECK(row.metric == metric_cycle[r % 4]);
            CHECK(row.unit >= 0);
            CHECK(row.unit < sae.latents());
            CHECK(row.undefined == std::isnan(row.value));
        }
        const MetricRow& last = report.rows[base + 12];
        CHECK(last.unit == -1);
        CHECK(last.metric == "ablation_impact");
        CHECK(last.undefined == false);
    }

    SUBCASE("selectivity stays within auroc bounds") {
        for (const auto& row : report.rows)
            if (row.metric == "selectivity") {
                CHECK(row.value >= 0.0);
                CHECK(row.value <= 1.0);
            }
    }
    SUBCASE("csv serialization carries every row") {
        std::string path = "/tmp/impact_sae_report.csv";
        write_metric_csv(report, path);
        std::ifstream in(path);
        std::string line;
        REQUIRE(std::getline(in, line));
        CHECK(line == "model,sparsity,category,block,site,unit,metric,value,flag");
        size_t count = 0;
        while (std::getline(in, line))
            if (!line.empty()) ++count;
        CHECK(count == report.rows.size());
        std::remove(path.c_str());
    }
    SUBCASE("only the final residual cls row is accepted") {
        SaeModel early = sae;
        early.hook = HookSite{0, SiteTag::resid};
        CHECK_THROWS(sae_feature_metrics(model, early, ds, cats, 3, 1, "dense", 0.0));
        SaeModel off_token = sae;
        off_token.token = 1;
        CHECK_THROWS(sae_feature_metrics(model, off_token, ds, cats, 3, 1, "dense", 0.0));
        SaeModel wrong_tag = sae;
        wrong_tag.hook = HookSite{cfg.depth - 1, SiteTag::mlp_out};
        CHECK_THROWS(sae_feature_metrics(model, wrong_tag, ds, cats, 3, 1, "dense", 0.0));
    }
}

TEST_CASE("sae checkpoints round-trip and reject foreign archives") {
    ModelConfig cfg = tiny_config();
    SaeModel sae = random_sae(cfg, 2, 5, 41);
    sae.b_enc[2] = 0.25f;
    sae.b_dec[1] = -0.5f;
    std::string path = "/tmp/impact_sae_ckpt.bin";
    save_sae(sae, path);
    SaeModel back = load_sae(path);
    CHECK(back.k_sae == sae.k_sae);
    CHECK(back.expansion == sae.expansion);
    CHECK(back.input_dim == sae.input_dim);
    CHECK(back.token == sae.token);
    CHECK(back.hook.block == sae.hook.block);
    CHECK((back.hook.tag == sae.hook.tag));
    CHECK(bitwise_equal(back.w_enc, sae.w_enc));
    CHECK(bitwise_equal(back.b_enc, sae.b_enc));
    CHECK(bitwise_equal(back.w_dec, sae.w_dec));
    CHECK(bitwise_equal(back.b_dec, sae.b_dec));
    CHECK_THROWS(load_model(path));

    cfg.seed = 3;
    VitModel model = VitModel::init(cfg);
    std::string model_path = "/tmp/impact_vit_ckpt.bin";
    save_model(model, model_path);
    CHECK_THROWS(load_sae(model_path));
    std::remove(path.c_str());
    std::remove(model_path.c_str());
}
