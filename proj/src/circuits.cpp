#include "impact/circuits.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "impact/ops.hpp"
#include "impact/optimizer.hpp"
#include "impact/rng.hpp"
#include "impact/tape.hpp"

namespace impact {

namespace {

std::string format_value(double v) {
    char buf[40];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

bool per_head_site(SiteTag tag) {
    return tag == SiteTag::q || tag == SiteTag::k || tag == SiteTag::v;
}

void check_mask_layout(const ModelConfig& cfg, const BinaryMasks& masks, bool binary) {
    auto sites = all_hook_sites(cfg.depth);
    if (masks.size() != sites.size())
        throw std::invalid_argument("mask must cover every gated site exactly once");
    for (const HookSite& site : sites) {
        auto it = masks.find(site);
        if (it == masks.end())
            throw std::invalid_argument("mask is missing site " + site_name(site));
        const Tensor& m = it->second;
        if (m.shape() != std::vector<int64_t>{mask_width(cfg, site)})
            throw std::invalid_argument("mask width mismatch at " + site_name(site));
        for (int64_t i = 0; i < m.numel(); ++i) {
            if (!std::isfinite(m[i]))
                throw std::invalid_argument("mask has a non-finite entry at " + site_name(site));
            if (binary && m[i] != 0.0f && m[i] != 1.0f)
                throw std::invalid_argument("mask entries must be 0 or 1 at " + site_name(site));
        }
    }
}

void check_cache(const ModelConfig& cfg, const MeanCache& cache) {
    for (const HookSite& site : all_hook_sites(cfg.depth))
        if (!cache.means.contains(site))
            throw std::invalid_argument("mean cache is missing site " + site_name(site));
}

// m_hat * a + (1 - m_hat) * mean, with per-head gates broadcast over the
// head's feature slice. Exact in both branches.
Var blend_site(Tape& t, const ModelConfig& cfg, const HookSite& site, Var a, Var m_hat,
               const Tensor& mean) {
    Var gate = m_hat;
    if (per_head_site(site.tag)) gate = t.reshape(gate, {cfg.heads, 1});
    Var inv = t.add_scalar(t.scale(gate, -1.0f), 1.0f);
    return t.add(t.mul(a, gate), t.mul(t.constant(mean), inv));
}

// Binary readout: the image is assigned to the category when its logit
// beats the best other logit.
double readout_accuracy(const Tensor& logits, std::span<const int> labels, int category) {
    int64_t n = logits.shape()[0], c = logits.shape()[1];
    int64_t correct = 0;
    for (int64_t i = 0; i < n; ++i) {
        float target = logits[i * c + category];
        float other = -std::numeric_limits<float>::infinity();
        for (int64_t j = 0; j < c; ++j)
            if (j != category) other = std::max(other, logits[i * c + j]);
        bool positive = target > other;
        bool want = labels[static_cast<size_t>(i)] == 0;
        correct += positive == want ? 1 : 0;
    }
    return static_cast<double>(correct) / static_cast<double>(n);
}

struct TaskBatchPlan {
    std::vector<int64_t> indices;  // dataset rows, positives first
    std::vector<int> labels;       // 0 = target class, 1 = rest
};

TaskBatchPlan task_plan(const BinaryTask& task) {
    TaskBatchPlan plan;
    plan.indices.insert(plan.indices.end(), task.positives.begin(), task.positives.end());
    plan.indices.insert(plan.indices.end(), task.negatives.begin(), task.negatives.end());
    plan.labels.assign(task.positives.size(), 0);
    plan.labels.insert(plan.labels.end(), task.negatives.size(), 1);
    return plan;
}

// Accuracy of the readout over the whole task for one forward function.
template <typename Fwd>
double task_accuracy(const Dataset& ds, const BinaryTask& task, int batch_size, Fwd&& fwd) {
    TaskBatchPlan plan = task_plan(task);
    int64_t n = static_cast<int64_t>(plan.indices.size());
    double correct = 0.0;
    for (int64_t start = 0; start < n; start += batch_size) {
        int64_t len = std::min<int64_t>(batch_size, n - start);
        Tensor images = gather_images(ds, std::span(plan.indices).subspan(
                                              static_cast<size_t>(start),
                                              static_cast<size_t>(len)));
        std::span<const int> labels(plan.labels.data() + start, static_cast<size_t>(len));
        Tensor logits = fwd(images);
        correct += readout_accuracy(logits, labels, task.category) * static_cast<double>(len);
    }
    return correct / static_cast<double>(n);
}

}  // namespace

int64_t mask_width(const ModelConfig& cfg, const HookSite& site) {
    switch (site.tag) {
        case SiteTag::q:
        case SiteTag::k:
        case SiteTag::v:
            return cfg.heads;
        case SiteTag::mlp_act:
            return cfg.mlp_dim();
        case SiteTag::norm1:
        case SiteTag::norm2:
        case SiteTag::attn_out:
        case SiteTag::mlp_out:
            return cfg.embed_dim;
        case SiteTag::resid:
            break;
    }
    throw std::invalid_argument("resid carries no circuit gates");
}

int64_t total_mask_nodes(const ModelConfig& cfg) {
    int64_t total = 0;
    for (const HookSite& site : all_hook_sites(cfg.depth)) total += mask_width(cfg, site);
    return total;
}

CircuitMask init_circuit_mask(const ModelConfig& cfg, const CircuitConfig& hp) {
    if (!(hp.tau > 0.0)) throw std::invalid_argument("tau must be positive");
    CircuitMask mask;
    mask.tau = hp.tau;
    mask.k_pen = hp.k_pen;
    Rng rng(derive_seed(hp.seed, "circuit_init"));
    for (const HookSite& site : all_hook_sites(cfg.depth)) {
        Tensor m = rng.normal_tensor({mask_width(cfg, site)}, hp.init_mean, hp.init_std);
        for (int64_t i = 0; i < m.numel(); ++i)
            m[i] = std::clamp(m[i], -1.0f, 1.0f);
        mask.logits.emplace(site, std::move(m));
    }
    return mask;
}

BinaryMasks binarize_mask(const CircuitMask& mask) {
    BinaryMasks out;
    for (const auto& [site, m] : mask.logits) out.emplace(site, ops::heaviside(m));
    return out;
}

BinaryMasks complement_mask(const BinaryMasks& masks) {
    BinaryMasks out;
    for (const auto& [site, m] : masks) {
        Tensor c(m.shape());
        for (int64_t i = 0; i < m.numel(); ++i) c[i] = m[i] != 0.0f ? 0.0f : 1.0f;
        out.emplace(site, std::move(c));
    }
    return out;
}

BinaryMasks full_mask(const ModelConfig& cfg, float value) {
    if (value != 0.0f && value != 1.0f) throw std::invalid_argument("gate value must be 0 or 1");
    BinaryMasks out;
    for (const HookSite& site : all_hook_sites(cfg.depth))
        out.emplace(site, Tensor::full({mask_width(cfg, site)}, value));
    return out;
}

int64_t count_active(const BinaryMasks& masks) {
    int64_t n = 0;
    for (const auto& [site, m] : masks)
        for (int64_t i = 0; i < m.numel(); ++i) n += m[i] != 0.0f ? 1 : 0;
    return n;
}

Tensor masked_forward(const VitModel& model, const BinaryMasks& masks, const MeanCache& cache,
                      const Tensor& images) {
    const ModelConfig& cfg = model.config;
    check_mask_layout(cfg, masks, true);
    check_cache(cfg, cache);
    Tape t(false);
    ForwardOptions opts;
    opts.params_trainable = false;
    opts.intervention = [&](Tape& tape, const HookSite& site, Var a) -> Var {
        return blend_site(tape, cfg, site, a, tape.constant(masks.at(site)),
                          cache.means.at(site));
    };
    return model.forward(t, images, opts).logits.val();
}

Tensor masked_forward(const VitModel& model, const CircuitMask& mask, const MeanCache& cache,
                      const Tensor& images) {
    return masked_forward(model, binarize_mask(mask), cache, images);
}

double ncq(double acc_circuit, double acc_full, int64_t n_circuit, int64_t n_total) {
    if (!(acc_full > 0.0)) throw std::invalid_argument("ncq needs acc_full > 0");
    if (n_total <= 0) throw std::invalid_argument("ncq needs a positive node total");
    if (n_circuit < 0 || n_circuit > n_total)
        throw std::invalid_argument("active node count outside [0, total]");
    double value = (acc_circuit / acc_full) *
                   (1.0 - static_cast<double>(n_circuit) / static_cast<double>(n_total));
    return std::clamp(value, 0.0, 1.0);
}

EdgeStats circuit_edges(const VitModel& model, const BinaryMasks& masks) {
    const ModelConfig& cfg = model.config;
    check_mask_layout(cfg, masks, true);
    const int64_t E = cfg.embed_dim, H = cfg.heads, Dh = cfg.head_dim(), M = cfg.mlp_dim();
    EdgeStats stats;
    auto on = [](const Tensor& m, int64_t i) { return m[i] != 0.0f; };
    for (int b = 0; b < cfg.depth; ++b) {
        const Tensor& n1 = masks.at({b, SiteTag::norm1});
        const Tensor& qm = masks.at({b, SiteTag::q});
        const Tensor& km = masks.at({b, SiteTag::k});
        const Tensor& vm = masks.at({b, SiteTag::v});
        const Tensor& ao = masks.at({b, SiteTag::attn_out});
        const Tensor& n2 = masks.at({b, SiteTag::norm2});
        const Tensor& ma = masks.at({b, SiteTag::mlp_act});
        const Tensor& mo = masks.at({b, SiteTag::mlp_out});
        const std::string pre = "blocks." + std::to_string(b) + ".";

        const Tensor& qkv = model.p(pre + "qkv.w");  // (3E, E)
        for (int64_t r = 0; r < 3 * E; ++r) {
            int64_t section = r / E, head = (r - section * E) / Dh;
            const Tensor& gate = section == 0 ? qm : section == 1 ? km : vm;
            bool consumer = on(gate, head);
            for (int64_t j = 0; j < E; ++j) {
                if (qkv[r * E + j] == 0.0f) continue;
                ++stats.total;
                if (consumer && on(n1, j)) ++stats.active;
            }
        }
        // one pattern edge per head, needing both its q and k gates
        stats.total += H;
        for (int64_t h = 0; h < H; ++h)
            if (on(qm, h) && on(km, h)) ++stats.active;

        const Tensor& proj = model.p(pre + "attn_out.w");  // (E, E)
        for (int64_t o = 0; o < E; ++o)
            for (int64_t i = 0; i < E; ++i) {
                if (proj[o * E + i] == 0.0f) continue;
                ++stats.total;
                if (on(vm, i / Dh) && on(ao, o)) ++stats.active;
            }
        const Tensor& fc1 = model.p(pre + "mlp_in.w");  // (M, E)
        for (int64_t u = 0; u < M; ++u)
            for (int64_t j = 0; j < E; ++j) {
                if (fc1[u * E + j] == 0.0f) continue;
                ++stats.total;
                if (on(n2, j) && on(ma, u)) ++stats.active;
            }
        const Tensor& fc2 = model.p(pre + "mlp_out.w");  // (E, M)
        for (int64_t o = 0; o < E; ++o)
            for (int64_t u = 0; u < M; ++u) {
                if (fc2[o * M + u] == 0.0f) continue;
                ++stats.total;
                if (on(ma, u) && on(mo, o)) ++stats.active;
            }
    }
    return stats;
}

CircuitAccuracy evaluate_circuit(const VitModel& model, const BinaryMasks& masks,
                                 const MeanCache& cache, const Dataset& ds,
                                 const BinaryTask& task) {
    constexpr int kBatch = 64;
    CircuitAccuracy acc;
    acc.circuit = task_accuracy(ds, task, kBatch, [&](const Tensor& images) {
        return masked_forward(model, masks, cache, images);
    });
    acc.full = task_accuracy(ds, task, kBatch,
                             [&](const Tensor& images) { return model.logits(images); });
    BinaryMasks comp = complement_mask(masks);
    acc.ablated = task_accuracy(ds, task, kBatch, [&](const Tensor& images) {
        return masked_forward(model, comp, cache, images);
    });
    return acc;
}

CircuitResult optimize_circuit(const VitModel& model, const Dataset& ds, const BinaryTask& task,
                               const MeanCache& cache, const CircuitConfig& hp) {
    const ModelConfig& cfg = model.config;
    check_cache(cfg, cache);
    if (task.positives.size() < 2 || task.negatives.size() < 2)
        throw std::invalid_argument("task too small: need at least 2 images per side");
    if (hp.epochs < 0) throw std::invalid_argument("epochs must be >= 0");
    if (hp.batch_size < 1) throw std::invalid_argument("batch_size must be positive");
    if (!(hp.lr > 0.0)) throw std::invalid_argument("lr must be positive");
    if (hp.step_size < 1) throw std::invalid_argument("step_size must be positive");

    CircuitMask mask = init_circuit_mask(cfg, hp);
    std::map<std::string, Tensor> params;
    std::map<std::string, HookSite> name_to_site;
    for (const auto& [site, m] : mask.logits) {
        std::string name = "mask." + site_name(site);
        params.emplace(name, m);
        name_to_site.emplace(std::move(name), site);
    }

    OptimizerConfig oc;
    oc.lr = hp.lr;
    Optimizer opt(oc);

    TaskBatchPlan plan = task_plan(task);
    const int64_t n = static_cast<int64_t>(plan.indices.size());
    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);

    CircuitResult res;
    res.category = task.category;
    res.seed = hp.seed;

    for (int epoch = 0; epoch < hp.epochs; ++epoch) {
        double lr = hp.lr * std::pow(hp.gamma, epoch / hp.step_size);
        opt.set_lr(lr);
        res.lr_history.push_back(lr);
        Rng erng(derive_seed(hp.seed, "circuit_epoch", epoch));
        erng.shuffle(order);

        double loss_sum = 0.0;
        int64_t batches = 0;
        for (int64_t start = 0; start < n; start += hp.batch_size) {
            int64_t len = std::min<int64_t>(hp.batch_size, n - start);
            std::vector<int64_t> rows(static_cast<size_t>(len));
            std::vector<int> labels(static_cast<size_t>(len));
            for (int64_t i = 0; i < len; ++i) {
                int64_t o = order[static_cast<size_t>(start + i)];
                rows[static_cast<size_t>(i)] = plan.indices[static_cast<size_t>(o)];
                labels[static_cast<size_t>(i)] = plan.labels[static_cast<size_t>(o)];
            }
            Tensor images = gather_images(ds, rows);

            Tape t(true);
            std::map<HookSite, Var> gates;
            ForwardOptions opts;
            opts.params_trainable = false;
            opts.intervention = [&](Tape& tape, const HookSite& site, Var a) -> Var {
                Var leaf = tape.leaf(params.at("mask." + site_name(site)), true,
                                     "mask." + site_name(site));
                Var m_hat = tape.ste_binarize(leaf, static_cast<float>(hp.tau));
                gates.emplace(site, m_hat);
                return blend_site(tape, cfg, site, a, m_hat, cache.means.at(site));
            };
            ForwardResult fwd = model.forward(t, images, opts);

            Var logits = fwd.logits;
            const int64_t C = cfg.num_classes;
            Var target = t.slice(logits, 1, task.category, 1);
            std::vector<Var> others;
            if (task.category > 0) others.push_back(t.slice(logits, 1, 0, task.category));
            if (task.category + 1 < C)
                others.push_back(t.slice(logits, 1, task.category + 1, C - 1 - task.category));
            Var rest = others.size() == 1 ? others[0] : t.concat(others, 1);
            Var best_other = t.reshape(t.reduce_max(rest, 1), {len, 1});
            Var two_way = t.concat({target, best_other}, 1);
            Var ce = t.cross_entropy_mean(two_way, labels);

            Var penalty;
            for (const auto& [site, gate] : gates) {
                Var s = t.reduce_sum_all(gate);
                penalty = penalty.valid() ? t.add(penalty, s) : s;
            }
            Var total = t.add(ce, t.scale(penalty, static_cast<float>(hp.k_pen)));
            double loss = total.val()[0];
            if (!std::isfinite(loss)) throw std::runtime_error("non-finite circuit loss");
            loss_sum += loss;
            ++batches;

            t.backward(total, Tensor::scalar(1.0f));
            opt.step(params, t.named_grads());
            for (auto& [name, m] : params)
                for (int64_t i = 0; i < m.numel(); ++i)
                    m[i] = std::clamp(m[i], -1.0f, 1.0f);
        }
        res.loss.push_back(loss_sum / static_cast<double>(batches));
    }

    for (auto& [name, m] : params) mask.logits.at(name_to_site.at(name)) = m;
    res.mask = mask;

    BinaryMasks m_hat = binarize_mask(mask);
    CircuitAccuracy acc = evaluate_circuit(model, m_hat, cache, ds, task);
    res.acc_circuit = acc.circuit;
    res.acc_full = acc.full;
    res.acc_ablated = acc.ablated;
    res.active_nodes = count_active(m_hat);
    res.total_nodes = total_mask_nodes(cfg);
    EdgeStats edges = circuit_edges(model, m_hat);
    res.active_edges = edges.active;
    res.total_edges = edges.total;
    res.ncq_value = ncq(res.acc_circuit, res.acc_full, res.active_nodes, res.total_nodes);
    return res;
}

void write_circuit_csv(std::span<const CircuitResult> results, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path);
    out << "model,sparsity,category,node_pct,size_pct,acc_circuit,acc_full,acc_ablated,ncq,seed\n";
    for (const CircuitResult& r : results) {
        double node_pct = r.total_nodes > 0
                              ? 100.0 * static_cast<double>(r.active_nodes) /
                                    static_cast<double>(r.total_nodes)
                              : 0.0;
        double size_pct = r.total_edges > 0
                              ? 100.0 * static_cast<double>(r.active_edges) /
                                    static_cast<double>(r.total_edges)
                              : 0.0;
        out << r.model_tag << ',' << format_value(r.sparsity) << ',' << r.category << ','
            << format_value(node_pct) << ',' << format_value(size_pct) << ','
            << format_value(r.acc_circuit) << ',' << format_value(r.acc_full) << ','
            << format_value(r.acc_ablated) << ',' << format_value(r.ncq_value) << ',' << r.seed
            << '\n';
    }
    if (!out.good()) throw std::runtime_error("failed writing " + path);
}

}  // namespace impact
