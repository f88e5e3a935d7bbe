#include "impact/neuron_metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <memory>
#include <numeric>

#include "impact/ops.hpp"

namespace impact {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

int64_t feature_width(const ModelConfig& cfg, const HookSite& site) {
    std::vector<int64_t> s = site_shape(cfg, site, 1);
    int64_t w = 1;
    for (size_t i = 2; i < s.size(); ++i) w *= s[i];
    return w;
}

void check_site_in_range(const ModelConfig& cfg, const HookSite& site) {
    check(site.block >= 0 && site.block < cfg.depth,
          "neuron: block out of range at " + site_name(site));
    check(site.tag != SiteTag::resid, "neuron: resid is a capture-only tap, not a metric site");
}

// Slices one chunk of images and invokes fn(start, images_chunk).
template <typename Fn>
void for_batches(const Tensor& images, int batch_size, Fn&& fn) {
    check(images.ndim() == 4 && images.dim(0) > 0, "neuron: empty image batch");
    const int64_t n = images.dim(0);
    for (int64_t start = 0; start < n; start += batch_size)
        fn(start, ops::slice(images, 0, start, std::min<int64_t>(batch_size, n - start)));
}

std::string format_value(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, end);
}

}  // namespace

bool site_has_head_units(SiteTag tag) {
    return tag == SiteTag::q || tag == SiteTag::k || tag == SiteTag::v ||
           tag == SiteTag::attn_out;
}

int64_t site_unit_count(const ModelConfig& cfg, const HookSite& site) {
    return site_has_head_units(site.tag) ? cfg.heads : feature_width(cfg, site);
}

MeanCache compute_mean_cache(const VitModel& model, const Dataset& ds, int batch_size) {
    check(ds.size() > 0, "mean cache: dataset is empty");
    const ModelConfig& cfg = model.config;
    const std::vector<HookSite> sites = all_hook_sites(cfg.depth);
    std::set<HookSite> hooks(sites.begin(), sites.end());

    std::map<HookSite, std::vector<double>> acc;
    for (const HookSite& s : sites) acc[s].assign(size_t(feature_width(cfg, s)), 0.0);

    for_batches(ds.images, batch_size, [&](int64_t, const Tensor& batch) {
        ActivationTrace trace = model.capture(batch, hooks);
        for (const HookSite& s : sites) {
            const Tensor& a = trace.at(s);
            std::vector<double>& sums = acc[s];
            const int64_t w = static_cast<int64_t>(sums.size());
            const int64_t rows = a.numel() / w;
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t j = 0; j < w; ++j) sums[size_t(j)] += double(a.data()[r * w + j]);
        }
    });

    const double rows_total = double(ds.size()) * double(cfg.tokens());
    MeanCache cache;
    for (const HookSite& s : sites) {
        std::vector<int64_t> shape = site_shape(cfg, s, 1);
        shape.erase(shape.begin(), shape.begin() + 2);  // drop batch and token dims
        Tensor mean(shape);
        const std::vector<double>& sums = acc[s];
        for (size_t j = 0; j < sums.size(); ++j)
            mean.data()[j] = static_cast<float>(sums[j] / rows_total);
        cache.means.emplace(s, std::move(mean));
    }
    return cache;
}

Intervention mean_ablation_intervention(const ModelConfig& cfg,
                                        const std::set<NeuronId>& neurons,
                                        const MeanCache& cache) {
    struct SitePlan {
        Tensor sel;   // 1 on ablated units, broadcastable over the activation
        Tensor keep;  // 1 - sel
        Tensor mean;
    };
    auto plan = std::make_shared<std::map<HookSite, SitePlan>>();
    for (const NeuronId& n : neurons) {
        check_site_in_range(cfg, n.site);
        check(n.unit >= 0 && n.unit < site_unit_count(cfg, n.site),
              "neuron: unit out of range at " + site_name(n.site));
        auto mit = cache.means.find(n.site);
        check(mit != cache.means.end(), "neuron: no cached mean for " + site_name(n.site));
        auto [it, inserted] = plan->try_emplace(n.site);
        if (inserted) {
            const bool qkv_shape = n.site.tag == SiteTag::q || n.site.tag == SiteTag::k ||
                                   n.site.tag == SiteTag::v;
            it->second.sel = qkv_shape ? Tensor::zeros({cfg.heads, 1})
                                       : Tensor::zeros({feature_width(cfg, n.site)});
            it->second.mean = mit->second;
        }
        Tensor& sel = it->second.sel;
        if (n.site.tag == SiteTag::attn_out) {
            for (int64_t d = 0; d < cfg.head_dim(); ++d)
                sel.data()[n.unit * cfg.head_dim() + d] = 1.0f;
        } else {
            sel.data()[n.unit] = 1.0f;
        }
    }
    for (auto& [site, sp] : *plan) {
        sp.keep = Tensor(sp.sel.shape());
        for (int64_t i = 0; i < sp.sel.numel(); ++i) sp.keep.data()[i] = 1.0f - sp.sel.data()[i];
    }
    // a*(1-sel) + mean*sel substitutes the cached mean bit-exactly on the
    // ablated units and leaves every other value untouched
    return [plan](Tape& t, const HookSite& site, Var v) -> Var {
        auto it = plan->find(site);
        if (it == plan->end()) return v;
        return t.add(t.mul(v, t.constant(it->second.keep)),
                     t.mul(t.constant(it->second.mean), t.constant(it->second.sel)));
    };
}

Tensor head_activation(const Tensor& site_act, const ModelConfig& cfg, SiteTag tag,
                       int64_t head) {
    check(site_has_head_units(tag), "neuron: " + std::string(site_tag_name(tag)) +
                                        " has no head structure");
    check(head >= 0 && head < cfg.heads, "neuron: head index out of range");
    const int64_t Dh = cfg.head_dim();
    const int64_t B = site_act.dim(0), T = site_act.dim(1);
    Tensor out({B, T});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t t = 0; t < T; ++t) {
            const float* base;
            if (tag == SiteTag::attn_out) {
                check(site_act.ndim() == 3 && site_act.dim(2) == cfg.embed_dim,
                      "neuron: attn_out activation shape mismatch");
                base = site_act.data() + (b * T + t) * cfg.embed_dim + head * Dh;
            } else {
                check(site_act.ndim() == 4 && site_act.dim(2) == cfg.heads &&
                          site_act.dim(3) == Dh,
                      "neuron: head activation shape mismatch");
                base = site_act.data() + ((b * T + t) * cfg.heads + head) * Dh;
            }
            double acc = 0.0;
            for (int64_t d = 0; d < Dh; ++d) acc += double(base[d]) * double(base[d]);
            out.data()[b * T + t] = static_cast<float>(std::sqrt(acc));
        }
    return out;
}

UnitActivations collect_unit_activations(const VitModel& model, const Tensor& images,
                                         const HookSite& site, int batch_size) {
    const ModelConfig& cfg = model.config;
    check(site.block >= 0 && site.block < cfg.depth, "neuron: block out of range");
    const int64_t units = site_unit_count(cfg, site);
    const int64_t N = images.dim(0);
    const int64_t T = cfg.tokens();
    UnitActivations out{Tensor::zeros({N, units}), Tensor::zeros({N, units})};

    for_batches(images, batch_size, [&](int64_t start, const Tensor& batch) {
        ActivationTrace trace = model.capture(batch, {site});
        const Tensor& act = trace.at(site);
        const int64_t B = act.dim(0);
        if (site_has_head_units(site.tag)) {
            for (int64_t h = 0; h < units; ++h) {
                Tensor ha = head_activation(act, cfg, site.tag, h);
                for (int64_t b = 0; b < B; ++b) {
                    out.cls.data()[(start + b) * units + h] = ha.data()[b * T];
                    float mx = ha.data()[b * T + 1];
                    for (int64_t t = 2; t < T; ++t)
                        mx = std::max(mx, ha.data()[b * T + t]);
                    out.patch_max.data()[(start + b) * units + h] = mx;
                }
            }
        } else {
            for (int64_t b = 0; b < B; ++b)
                for (int64_t j = 0; j < units; ++j) {
                    const float* a = act.data() + (b * T) * units + j;
                    out.cls.data()[(start + b) * units + j] = a[0];
                    float mx = a[units];
                    for (int64_t t = 2; t < T; ++t) mx = std::max(mx, a[t * units]);
                    out.patch_max.data()[(start + b) * units + j] = mx;
                }
        }
    });
    return out;
}

double selectivity_auroc(std::span<const double> acts, std::span<const int> labels) {
    check(acts.size() == labels.size() && !acts.empty(), "auroc: size mismatch");
    int64_t n_pos = 0, n_neg = 0;
    for (int y : labels) (y != 0 ? n_pos : n_neg)++;
    check(n_pos > 0 && n_neg > 0, "auroc: both labels must be present");

    std::vector<size_t> order(acts.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return acts[a] < acts[b]; });

    // average ranks across tie groups, then the Mann-Whitney statistic
    double rank_pos = 0.0;
    size_t i = 0;
    while (i < order.size()) {
        size_t j = i;
        while (j < order.size() && acts[order[j]] == acts[order[i]]) ++j;
        const double avg_rank = 0.5 * (double(i + 1) + double(j));
        for (size_t t = i; t < j; ++t)
            if (labels[order[t]] != 0) rank_pos += avg_rank;
        i = j;
    }
    return (rank_pos - 0.5 * double(n_pos) * double(n_pos + 1)) /
           (double(n_pos) * double(n_neg));
}

double population_cv(std::span<const double> values) {
    check(values.size() >= 2, "cv: need at least two values");
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= double(values.size());
    if (mean == 0.0) return kNaN;
    double var = 0.0;
    for (double v : values) var += (v - mean) * (v - mean);
    var /= double(values.size());
    return std::sqrt(var) / std::fabs(mean);
}

double label_entropy_nats(std::span<const double> class_mass) {
    check(!class_mass.empty(), "entropy: empty mass");
    double total = 0.0;
    for (double m : class_mass) {
        check(m >= 0.0, "entropy: mass must be non-negative");
        total += m;
    }
    if (total == 0.0) return kNaN;
    double h = 0.0;
    for (double m : class_mass)
        if (m > 0.0) {
            const double p = m / total;
            h -= p * std::log(p);
        }
    return std::clamp(h, 0.0, std::log(double(class_mass.size())));
}

double ablation_impact(const VitModel& model, const Dataset& ds, const BinaryTask& task,
                       const std::set<NeuronId>& neurons, const MeanCache& cache) {
    if (neurons.empty()) return 0.0;
    Intervention ablate = mean_ablation_intervention(model.config, neurons, cache);
    const int c = task.category;

    double total = 0.0;
    int64_t count = 0;
    for (size_t start = 0; start < task.positives.size(); start += 64) {
        const size_t n = std::min<size_t>(64, task.positives.size() - start);
        Tensor batch = gather_images(ds, std::span(task.positives).subspan(start, n));
        Tensor clean = model.logits(batch);
        Tape tape(false);
        ForwardOptions opts;
        opts.intervention = ablate;
        opts.params_trainable = false;
        Tensor ablated = model.forward(tape, batch, opts).logits.val();
        const int64_t C = clean.dim(1);
        for (size_t b = 0; b < n; ++b) {
            double norm = 0.0;
            for (int64_t j = 0; j < C; ++j) {
                const double v = clean.data()[int64_t(b) * C + j];
                norm += v * v;
            }
            norm = std::sqrt(norm);
            check(norm > 0.0, "ablation: zero logit norm");
            total += (double(clean.data()[int64_t(b) * C + c]) -
                      double(ablated.data()[int64_t(b) * C + c])) /
                     norm;
            ++count;
        }
    }
    check(count > 0, "ablation: task has no category images");
    return total / double(count);
}

std::vector<double> class_variance(const VitModel& model, const Dataset& ds, int category,
                                   const HookSite& site) {
    std::vector<int64_t> idx = ds.indices_of_class(category);
    check(idx.size() >= 2, "cv: need at least two category images");
    Tensor images = gather_images(ds, idx);
    UnitActivations ua = collect_unit_activations(model, images, site);
    const int64_t units = ua.patch_max.dim(1);
    std::vector<double> out(static_cast<size_t>(units));
    std::vector<double> vals(idx.size());
    for (int64_t j = 0; j < units; ++j) {
        for (size_t i = 0; i < idx.size(); ++i)
            vals[i] = ua.patch_max.data()[int64_t(i) * units + j];
        out[size_t(j)] = population_cv(vals);
    }
    return out;
}

std::vector<double> label_entropy(const VitModel& model, const Dataset& ds,
                                  const HookSite& site) {
    check(ds.size() > 0, "entropy: dataset is empty");
    UnitActivations ua = collect_unit_activations(model, ds.images, site);
    const int64_t units = ua.patch_max.dim(1);
    const int C = ds.num_classes;
    std::vector<double> out(static_cast<size_t>(units));
    std::vector<double> mass(static_cast<size_t>(C));
    for (int64_t j = 0; j < units; ++j) {
        std::fill(mass.begin(), mass.end(), 0.0);
        for (int64_t i = 0; i < ds.size(); ++i)
            mass[size_t(ds.labels[size_t(i)])] +=
                std::max(0.0, double(ua.patch_max.data()[i * units + j]));
        out[size_t(j)] = label_entropy_nats(mass);
    }
    return out;
}

RankedUnits rank_neurons_attribution_patching(const VitModel& model, const Dataset& ds,
                                              const BinaryTask& task, const HookSite& site,
                                              const MeanCache& cache, int64_t k) {
    const ModelConfig& cfg = model.config;
    check_site_in_range(cfg, site);
    const int64_t units = site_unit_count(cfg, site);
    check(k >= 1 && k <= units, "rank: k out of range");
    auto mit = cache.means.find(site);
    check(mit != cache.means.end(), "rank: no cached mean for " + site_name(site));
    const Tensor& mean = mit->second;
    const int64_t slice = feature_width(cfg, site) / units;  // values per unit per token
    const int64_t T = cfg.tokens();

    std::vector<double> importance(size_t(units), 0.0);
    Tensor task_images = gather_images(ds, task.positives);
    for_batches(task_images, 64, [&](int64_t, const Tensor& batch) {
        Tape tape(true);
        Var probe;
        ForwardOptions opts;
        opts.params_trainable = false;
        opts.intervention = [&](Tape& t, const HookSite& s, Var v) -> Var {
            if (s == site) probe = t.leaf(v.val(), true, "probe");
            return s == site ? probe : v;
        };
        ForwardResult res = model.forward(tape, batch, opts);
        check(probe.valid(), "rank: probe site was not reached");
        Var fc = tape.reduce_sum_all(tape.slice(res.logits, 1, task.category, 1));
        tape.backward(fc, Tensor::scalar(1.0f));
        Tensor g = tape.grad(probe);
        const Tensor& a = probe.val();

        const int64_t B = batch.dim(0);
        const int64_t w = feature_width(cfg, site);
        for (int64_t b = 0; b < B; ++b)
            for (int64_t u = 0; u < units; ++u) {
                // contiguous unit slices: heads own `slice` features per token
                double s = 0.0;
                for (int64_t t = 0; t < T; ++t)
                    for (int64_t d = 0; d < slice; ++d) {
                        const int64_t off = (b * T + t) * w + u * slice + d;
                        s += (double(a.data()[off]) - double(mean.data()[u * slice + d])) *
                             double(g.data()[off]);
                    }
                importance[size_t(u)] += std::fabs(s);
            }
    });
    for (double& v : importance) v /= double(task_images.dim(0));

    std::vector<int64_t> order(static_cast<size_t>(units));
    std::iota(order.begin(), order.end(), int64_t{0});
    std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
        return importance[size_t(a)] > importance[size_t(b)];
    });
    RankedUnits out;
    for (int64_t i = 0; i < k; ++i) {
        out.units.push_back(order[size_t(i)]);
        out.importance.push_back(importance[size_t(order[size_t(i)])]);
    }
    return out;
}

void write_metric_csv(const MetricReport& report, const std::string& path) {
    std::ofstream os(path);
    check(bool(os), "metrics: cannot write " + path);
    os << "model,sparsity,category,block,site,unit,metric,value,flag\n";
    for (const MetricRow& r : report.rows) {
        os << r.model_tag << ',' << format_value(r.sparsity) << ',' << r.category << ','
           << r.block << ',' << r.site << ',' << r.unit << ',' << r.metric << ','
           << format_value(r.value) << ',' << (r.undefined ? "undefined" : "") << '\n';
    }
    check(bool(os), "metrics: short write to " + path);
}

MetricReport category_site_report(const VitModel& model, const Dataset& ds,
                                  const BinaryTask& task, const HookSite& site,
                                  const MeanCache& cache, int64_t k,
                                  const std::string& model_tag, double sparsity) {
    RankedUnits ranked = rank_neurons_attribution_patching(model, ds, task, site, cache, k);

    std::vector<int64_t> task_idx(task.positives);
    task_idx.insert(task_idx.end(), task.negatives.begin(), task.negatives.end());
    UnitActivations task_acts =
        collect_unit_activations(model, gather_images(ds, task_idx), site);
    std::vector<int> task_labels(task_idx.size(), 0);
    std::fill(task_labels.begin(), task_labels.begin() + long(task.positives.size()), 1);

    std::vector<double> cv = class_variance(model, ds, task.category, site);
    std::vector<double> entropy = label_entropy(model, ds, site);

    const int64_t units = task_acts.cls.dim(1);
    MetricReport report;
    auto push = [&](int64_t unit, const std::string& metric, double value) {
        MetricRow row;
        row.model_tag = model_tag;
        row.sparsity = sparsity;
        row.category = task.category;
        row.block = site.block;
        row.site = site_tag_name(site.tag);
        row.unit = unit;
        row.metric = metric;
        row.value = value;
        row.undefined = std::isnan(value);
        report.rows.push_back(std::move(row));
    };

    std::vector<double> acts(task_idx.size());
    for (size_t i = 0; i < ranked.units.size(); ++i) {
        const int64_t u = ranked.units[i];
        for (size_t r = 0; r < task_idx.size(); ++r)
            acts[r] = task_acts.cls.data()[int64_t(r) * units + u];
        push(u, "attribution_importance", ranked.importance[i]);
        push(u, "selectivity", selectivity_auroc(acts, task_labels));
        push(u, "class_variance", cv[size_t(u)]);
        push(u, "label_entropy", entropy[size_t(u)]);
    }
    std::set<NeuronId> top;
    for (int64_t u : ranked.units) top.insert({site, u});
    push(-1, "ablation_impact", ablation_impact(model, ds, task, top, cache));
    return report;
}

}  // namespace impact
