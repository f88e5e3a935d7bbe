#include "impact/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace impact::ops {

namespace {

void check_shape(bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(std::string("shape mismatch: ") + what);
}

int64_t leading_product(const std::vector<int64_t>& s, size_t upto) {
    int64_t n = 1;
    for (size_t i = 0; i < upto; ++i) n *= s[i];
    return n;
}

}  // namespace

// Core GEMM, C(M,N) += A(M,K) * B(K,N), row-major. ikj order keeps the inner
// loop contiguous (vector-friendly) while each c[i,j] still accumulates its k
// terms strictly in ascending order, so results are run-to-run identical.
void gemm_acc(const float* a, const float* b, float* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        float* ci = c + i * n;
        const float* ai = a + i * k;
        for (int64_t p = 0; p < k; ++p) {
            const float av = ai[p];
            const float* bp = b + p * n;
            for (int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

namespace {

inline void gemm_nn(const float* a, const float* b, float* c, int64_t m, int64_t k, int64_t n) {
    gemm_acc(a, b, c, m, k, n);
}

// C(M,N) = A(M,K) * B(N,K)^T via a scratch transpose of B, keeping the
// accumulation order identical to a direct dot product.
void gemm_nt(const float* a, const float* b, float* c, int64_t m, int64_t k, int64_t n) {
    std::vector<float> bt(static_cast<size_t>(k * n));
    for (int64_t j = 0; j < n; ++j)
        for (int64_t p = 0; p < k; ++p) bt[static_cast<size_t>(p * n + j)] = b[j * k + p];
    gemm_nn(a, bt.data(), c, m, k, n);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_shape(a.ndim() >= 2 && b.ndim() >= 2, "matmul needs >=2-d operands");
    int64_t m = a.dim(a.ndim() - 2), k = a.dim(a.ndim() - 1);
    int64_t k2 = b.dim(b.ndim() - 2), n = b.dim(b.ndim() - 1);
    check_shape(k == k2, "matmul inner dims");
    int64_t batch = leading_product(a.shape(), static_cast<size_t>(a.ndim() - 2));
    bool shared_b = (b.ndim() == 2);
    if (!shared_b) {
        std::vector<int64_t> la(a.shape().begin(), a.shape().end() - 2);
        std::vector<int64_t> lb(b.shape().begin(), b.shape().end() - 2);
        check_shape(la == lb, "matmul batch dims");
    }
    std::vector<int64_t> out_shape(a.shape().begin(), a.shape().end() - 1);
    out_shape.push_back(n);
    Tensor out(out_shape);
    for (int64_t bi = 0; bi < batch; ++bi) {
        const float* pa = a.data() + bi * m * k;
        const float* pb = b.data() + (shared_b ? 0 : bi * k * n);
        gemm_nn(pa, pb, out.data() + bi * m * n, m, k, n);
    }
    return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    check_shape(x.ndim() >= 1 && w.ndim() == 2, "linear operands");
    int64_t k = x.dim(x.ndim() - 1);
    check_shape(w.dim(1) == k, "linear input width");
    int64_t n = w.dim(0);
    if (b.numel() > 0) check_shape(b.numel() == n, "linear bias width");
    int64_t m = x.numel() / std::max<int64_t>(k, 1);
    std::vector<int64_t> out_shape(x.shape().begin(), x.shape().end() - 1);
    out_shape.push_back(n);
    Tensor out(out_shape);
    gemm_nt(x.data(), w.data(), out.data(), m, k, n);
    if (b.numel() > 0) {
        float* o = out.data();
        for (int64_t i = 0; i < m; ++i, o += n)
            for (int64_t j = 0; j < n; ++j) o[j] += b[j];
    }
    return out;
}

std::vector<int64_t> broadcast_shape(const std::vector<int64_t>& a, const std::vector<int64_t>& b) {
    size_t nd = std::max(a.size(), b.size());
    std::vector<int64_t> out(nd);
    for (size_t i = 0; i < nd; ++i) {
        int64_t da = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
        int64_t db = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
        if (da != db && da != 1 && db != 1)
            throw std::invalid_argument("broadcast: incompatible shapes " + shape_str(a) + " vs " + shape_str(b));
        out[i] = std::max(da, db);
    }
    return out;
}

namespace {

// Right-aligned strides for iterating `shape` while reading a tensor of
// shape `src` (0-stride on broadcast dims).
std::vector<int64_t> broadcast_strides(const std::vector<int64_t>& src, const std::vector<int64_t>& shape) {
    std::vector<int64_t> strides(shape.size(), 0);
    int64_t s = 1;
    for (size_t i = src.size(); i-- > 0;) {
        size_t oi = i + (shape.size() - src.size());
        strides[oi] = (src[i] == 1) ? 0 : s;
        s *= src[i];
    }
    return strides;
}

template <typename F>
Tensor binary_broadcast(const Tensor& a, const Tensor& b, F f) {
    if (a.shape() == b.shape()) {
        Tensor out(a.shape());
        const float* pa = a.data();
        const float* pb = b.data();
        float* po = out.data();
        int64_t n = a.numel();
        for (int64_t i = 0; i < n; ++i) po[i] = f(pa[i], pb[i]);
        return out;
    }
    auto shape = broadcast_shape(a.shape(), b.shape());
    Tensor out(shape);
    // suffix fast path: b's shape equals the trailing dims of the output
    if (b.numel() > 0 && shape.size() >= b.shape().size()) {
        bool suffix = a.shape() == shape;
        if (suffix) {
            size_t off = shape.size() - b.shape().size();
            for (size_t i = 0; i < b.shape().size() && suffix; ++i)
                suffix = b.shape()[i] == shape[off + i];
            if (suffix) {
                int64_t inner = b.numel();
                int64_t outer = out.numel() / inner;
                const float* pa = a.data();
                const float* pb = b.data();
                float* po = out.data();
                for (int64_t i = 0; i < outer; ++i) {
                    for (int64_t j = 0; j < inner; ++j) po[i * inner + j] = f(pa[i * inner + j], pb[j]);
                }
                return out;
            }
        }
    }
    auto sa = broadcast_strides(a.shape(), shape);
    auto sb = broadcast_strides(b.shape(), shape);
    size_t nd = shape.size();
    std::vector<int64_t> idx(nd, 0);
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.data();
    int64_t oa = 0, ob = 0;
    for (int64_t i = 0, n = out.numel(); i < n; ++i) {
        po[i] = f(pa[oa], pb[ob]);
        for (size_t d = nd; d-- > 0;) {
            ++idx[d];
            oa += sa[d];
            ob += sb[d];
            if (idx[d] < shape[d]) break;
            idx[d] = 0;
            oa -= sa[d] * shape[d];
            ob -= sb[d] * shape[d];
        }
    }
    return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_broadcast(a, b, [](float x, float y) { return x + y; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_broadcast(a, b, [](float x, float y) { return x - y; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_broadcast(a, b, [](float x, float y) { return x * y; });
}

Tensor reduce_to_shape(const Tensor& t, const std::vector<int64_t>& shape) {
    if (t.shape() == shape) return t;
    // accumulate in double at the target positions
    std::vector<double> acc(static_cast<size_t>(Tensor::checked_numel(shape)), 0.0);
    auto full = t.shape();
    auto st = broadcast_strides(shape, full);
    size_t nd = full.size();
    std::vector<int64_t> idx(nd, 0);
    const float* p = t.data();
    int64_t off = 0;
    for (int64_t i = 0, n = t.numel(); i < n; ++i) {
        acc[static_cast<size_t>(off)] += static_cast<double>(p[i]);
        for (size_t d = nd; d-- > 0;) {
            ++idx[d];
            off += st[d];
            if (idx[d] < full[d]) break;
            idx[d] = 0;
            off -= st[d] * full[d];
        }
    }
    Tensor out(shape);
    for (size_t i = 0; i < acc.size(); ++i) out[static_cast<int64_t>(i)] = static_cast<float>(acc[i]);
    return out;
}

Tensor scale(const Tensor& a, float s) {
    Tensor out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] * s;
    return out;
}

Tensor add_scalar(const Tensor& a, float c) {
    Tensor out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] + c;
    return out;
}

Tensor gelu(const Tensor& x) {
    Tensor out(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) {
        double v = x[i];
        out[i] = static_cast<float>(0.5 * v * (1.0 + std::erf(v * 0.7071067811865476)));
    }
    return out;
}

Tensor gelu_grad(const Tensor& x) {
    Tensor out(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) {
        double v = x[i];
        double phi = 0.5 * (1.0 + std::erf(v * 0.7071067811865476));
        double pdf = 0.3989422804014327 * std::exp(-0.5 * v * v);
        out[i] = static_cast<float>(phi + v * pdf);
    }
    return out;
}

Tensor softmax_last(const Tensor& x) {
    check_shape(x.ndim() >= 1, "softmax needs >=1-d input");
    int64_t k = x.dim(x.ndim() - 1);
    int64_t rows = x.numel() / std::max<int64_t>(k, 1);
    Tensor out(x.shape());
    std::vector<double> ex(static_cast<size_t>(k));
    for (int64_t r = 0; r < rows; ++r) {
        const float* xi = x.data() + r * k;
        float* oi = out.data() + r * k;
        float mx = xi[0];
        for (int64_t j = 1; j < k; ++j) mx = std::max(mx, xi[j]);
        double sum = 0.0;
        for (int64_t j = 0; j < k; ++j) {
            ex[static_cast<size_t>(j)] = std::exp(static_cast<double>(xi[j] - mx));
            sum += ex[static_cast<size_t>(j)];
        }
        for (int64_t j = 0; j < k; ++j)
            oi[j] = static_cast<float>(ex[static_cast<size_t>(j)] / sum);
    }
    return out;
}

Tensor layernorm_last(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps,
                      Tensor* saved_mean, Tensor* saved_inv_std) {
    int64_t k = x.dim(x.ndim() - 1);
    check_shape(gamma.numel() == k && beta.numel() == k, "layernorm affine width");
    int64_t rows = x.numel() / std::max<int64_t>(k, 1);
    Tensor out(x.shape());
    Tensor mean({rows}), inv_std({rows});
    for (int64_t r = 0; r < rows; ++r) {
        const float* xi = x.data() + r * k;
        float* oi = out.data() + r * k;
        double mu = 0.0;
        for (int64_t j = 0; j < k; ++j) mu += xi[j];
        mu /= static_cast<double>(k);
        double var = 0.0;
        for (int64_t j = 0; j < k; ++j) {
            double d = xi[j] - mu;
            var += d * d;
        }
        var /= static_cast<double>(k);
        double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));
        mean[r] = static_cast<float>(mu);
        inv_std[r] = static_cast<float>(inv);
        for (int64_t j = 0; j < k; ++j)
            oi[j] = static_cast<float>((xi[j] - mu) * inv) * gamma[j] + beta[j];
    }
    if (saved_mean) *saved_mean = std::move(mean);
    if (saved_inv_std) *saved_inv_std = std::move(inv_std);
    return out;
}

namespace {

// Decomposes shape into (outer, axis_len, inner) around `axis`.
struct AxisSplit {
    int64_t outer, len, inner;
};

AxisSplit axis_split(const Tensor& x, int64_t axis) {
    check_shape(axis >= 0 && axis < x.ndim(), "reduce axis in range");
    AxisSplit s{1, x.dim(axis), 1};
    for (int64_t i = 0; i < axis; ++i) s.outer *= x.dim(i);
    for (int64_t i = axis + 1; i < x.ndim(); ++i) s.inner *= x.dim(i);
    return s;
}

std::vector<int64_t> drop_axis(const std::vector<int64_t>& shape, int64_t axis) {
    std::vector<int64_t> out;
    for (int64_t i = 0; i < static_cast<int64_t>(shape.size()); ++i)
        if (i != axis) out.push_back(shape[static_cast<size_t>(i)]);
    if (out.empty()) out.push_back(1);
    return out;
}

}  // namespace

Tensor reduce_sum(const Tensor& x, int64_t axis) {
    auto s = axis_split(x, axis);
    Tensor out(drop_axis(x.shape(), axis));
    for (int64_t o = 0; o < s.outer; ++o)
        for (int64_t in = 0; in < s.inner; ++in) {
            double acc = 0.0;
            for (int64_t a = 0; a < s.len; ++a) acc += x[(o * s.len + a) * s.inner + in];
            out[o * s.inner + in] = static_cast<float>(acc);
        }
    return out;
}

Tensor reduce_mean(const Tensor& x, int64_t axis) {
    auto s = axis_split(x, axis);
    Tensor out = reduce_sum(x, axis);
    for (int64_t i = 0; i < out.numel(); ++i)
        out[i] = static_cast<float>(static_cast<double>(out[i]) / static_cast<double>(s.len));
    return out;
}

Tensor reduce_max(const Tensor& x, int64_t axis, std::vector<int64_t>* argmax) {
    auto s = axis_split(x, axis);
    check_shape(s.len > 0, "reduce_max over empty axis");
    Tensor out(drop_axis(x.shape(), axis));
    if (argmax) argmax->assign(static_cast<size_t>(out.numel()), 0);
    for (int64_t o = 0; o < s.outer; ++o)
        for (int64_t in = 0; in < s.inner; ++in) {
            float best = x[(o * s.len) * s.inner + in];
            int64_t best_a = 0;
            for (int64_t a = 1; a < s.len; ++a) {
                float v = x[(o * s.len + a) * s.inner + in];
                if (v > best) {
                    best = v;
                    best_a = a;
                }
            }
            out[o * s.inner + in] = best;
            if (argmax) (*argmax)[static_cast<size_t>(o * s.inner + in)] = best_a;
        }
    return out;
}

Tensor reduce_sum_all(const Tensor& x) {
    double acc = 0.0;
    for (int64_t i = 0; i < x.numel(); ++i) acc += x[i];
    return Tensor::scalar(static_cast<float>(acc));
}

Tensor reduce_mean_all(const Tensor& x) {
    check_shape(x.numel() > 0, "mean of empty tensor");
    double acc = 0.0;
    for (int64_t i = 0; i < x.numel(); ++i) acc += x[i];
    return Tensor::scalar(static_cast<float>(acc / static_cast<double>(x.numel())));
}

Tensor reduce_max_all(const Tensor& x, int64_t* argmax) {
    check_shape(x.numel() > 0, "max of empty tensor");
    float best = x[0];
    int64_t best_i = 0;
    for (int64_t i = 1; i < x.numel(); ++i)
        if (x[i] > best) {
            best = x[i];
            best_i = i;
        }
    if (argmax) *argmax = best_i;
    return Tensor::scalar(best);
}

Tensor transpose(const Tensor& x, const std::vector<int64_t>& perm) {
    check_shape(static_cast<int64_t>(perm.size()) == x.ndim(), "transpose perm arity");
    size_t nd = perm.size();
    std::vector<int64_t> out_shape(nd);
    for (size_t i = 0; i < nd; ++i) out_shape[i] = x.dim(perm[i]);
    std::vector<int64_t> in_strides(nd, 1);
    for (size_t i = nd - 1; i > 0; --i) in_strides[i - 1] = in_strides[i] * x.dim(static_cast<int64_t>(i));
    std::vector<int64_t> walk(nd);
    for (size_t i = 0; i < nd; ++i) walk[i] = in_strides[static_cast<size_t>(perm[i])];
    Tensor out(out_shape);
    std::vector<int64_t> idx(nd, 0);
    int64_t src = 0;
    float* po = out.data();
    const float* px = x.data();
    for (int64_t i = 0, n = out.numel(); i < n; ++i) {
        po[i] = px[src];
        for (size_t d = nd; d-- > 0;) {
            ++idx[d];
            src += walk[d];
            if (idx[d] < out_shape[d]) break;
            idx[d] = 0;
            src -= walk[d] * out_shape[d];
        }
    }
    return out;
}

Tensor slice(const Tensor& x, int64_t axis, int64_t start, int64_t len) {
    auto s = axis_split(x, axis);
    check_shape(start >= 0 && len >= 0 && start + len <= s.len, "slice bounds");
    auto out_shape = x.shape();
    out_shape[static_cast<size_t>(axis)] = len;
    Tensor out(out_shape);
    for (int64_t o = 0; o < s.outer; ++o)
        std::memcpy(out.data() + o * len * s.inner, x.data() + (o * s.len + start) * s.inner,
                    sizeof(float) * static_cast<size_t>(len * s.inner));
    return out;
}

Tensor concat(const std::vector<const Tensor*>& parts, int64_t axis) {
    check_shape(!parts.empty(), "concat needs inputs");
    auto base = parts[0]->shape();
    int64_t total = 0;
    for (auto* p : parts) {
        check_shape(p->ndim() == static_cast<int64_t>(base.size()), "concat arity");
        for (int64_t i = 0; i < p->ndim(); ++i)
            if (i != axis) check_shape(p->dim(i) == base[static_cast<size_t>(i)], "concat dims");
        total += p->dim(axis);
    }
    auto out_shape = base;
    out_shape[static_cast<size_t>(axis)] = total;
    Tensor out(out_shape);
    auto s = axis_split(out, axis);
    int64_t at = 0;
    for (auto* p : parts) {
        int64_t plen = p->dim(axis);
        for (int64_t o = 0; o < s.outer; ++o)
            std::memcpy(out.data() + (o * total + at) * s.inner, p->data() + o * plen * s.inner,
                        sizeof(float) * static_cast<size_t>(plen * s.inner));
        at += plen;
    }
    return out;
}

Tensor l2norm_last(const Tensor& x) {
    int64_t k = x.dim(x.ndim() - 1);
    int64_t rows = x.numel() / std::max<int64_t>(k, 1);
    auto out_shape = x.shape();
    out_shape.back() = 1;
    Tensor out(out_shape);
    for (int64_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        const float* xi = x.data() + r * k;
        for (int64_t j = 0; j < k; ++j) acc += static_cast<double>(xi[j]) * static_cast<double>(xi[j]);
        out[r] = static_cast<float>(std::sqrt(acc));
    }
    return out;
}

Tensor heaviside(const Tensor& x) {
    Tensor out(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) out[i] = x[i] > 0.0f ? 1.0f : 0.0f;
    return out;
}

double ste_surrogate_gradient(double m, double tau) {
    double s = 1.0 / (1.0 + std::exp(-tau * m));
    return tau * s * (1.0 - s);
}

Tensor primitive_forward(std::string_view name, std::span<const Tensor> inputs,
                         std::span<const int64_t> attrs) {
    auto need = [&](size_t n) {
        if (inputs.size() != n)
            throw std::invalid_argument(std::string(name) + ": wrong input count");
    };
    Tensor out;
    if (name == "matmul") {
        need(2);
        out = matmul(inputs[0], inputs[1]);
    } else if (name == "add") {
        need(2);
        out = add(inputs[0], inputs[1]);
    } else if (name == "mul") {
        need(2);
        out = mul(inputs[0], inputs[1]);
    } else if (name == "layernorm") {
        need(3);
        out = layernorm_last(inputs[0], inputs[1], inputs[2], 1e-6f);
    } else if (name == "softmax") {
        need(1);
        out = softmax_last(inputs[0]);
    } else if (name == "gelu") {
        need(1);
        out = gelu(inputs[0]);
    } else if (name == "reduce_sum") {
        need(1);
        out = attrs.empty() ? reduce_sum_all(inputs[0]) : reduce_sum(inputs[0], attrs[0]);
    } else if (name == "reduce_mean") {
        need(1);
        out = attrs.empty() ? reduce_mean_all(inputs[0]) : reduce_mean(inputs[0], attrs[0]);
    } else if (name == "reduce_max") {
        need(1);
        out = attrs.empty() ? reduce_max_all(inputs[0]) : reduce_max(inputs[0], attrs[0]);
    } else if (name == "transpose") {
        need(1);
        out = transpose(inputs[0], std::vector<int64_t>(attrs.begin(), attrs.end()));
    } else if (name == "slice") {
        need(1);
        if (attrs.size() != 3) throw std::invalid_argument("slice: attrs are (axis, start, len)");
        out = slice(inputs[0], attrs[0], attrs[1], attrs[2]);
    } else if (name == "concat") {
        if (inputs.empty()) throw std::invalid_argument("concat: no inputs");
        std::vector<const Tensor*> ps;
        for (const auto& t : inputs) ps.push_back(&t);
        out = concat(ps, attrs.empty() ? 0 : attrs[0]);
    } else if (name == "l2_norm") {
        need(1);
        out = l2norm_last(inputs[0]);
    } else {
        throw std::invalid_argument("unknown primitive: " + std::string(name));
    }
    check(out.all_finite(), std::string(name) + ": non-finite output");
    return out;
}

}  // namespace impact::ops
