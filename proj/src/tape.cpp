#include "impact/tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <utility>

namespace impact {

namespace {

void check_same_tape(const Var& a, const Var& b) {
    check(a.valid() && b.valid(), "tape op: invalid operand");
    check(a.tape == b.tape, "tape op: operands from different tapes");
}

// grad wrt one operand of a broadcast binary op: reduce `g` (already shaped
// like the op output, possibly pre-multiplied) back to the operand's shape.
Tensor reduce_back(const Tensor& g, const std::vector<int64_t>& shape) {
    return ops::reduce_to_shape(g, shape);
}

// dw[n,k] += sum_m g[m,n] * x[m,k], rows of x/g walked in order.
void gemm_acc_tn(const float* g, const float* x, float* dw, int64_t m_rows,
                 int64_t n_dim, int64_t k_dim) {
    for (int64_t m = 0; m < m_rows; ++m) {
        const float* grow = g + m * n_dim;
        const float* xrow = x + m * k_dim;
        for (int64_t n = 0; n < n_dim; ++n) {
            const float gv = grow[n];
            if (gv == 0.0f) continue;
            float* dst = dw + n * k_dim;
            for (int64_t k = 0; k < k_dim; ++k) dst[k] += gv * xrow[k];
        }
    }
}

// db[k,n] += sum_m a[m,k] * g[m,n]
void gemm_acc_tn_kn(const float* a, const float* g, float* db, int64_t m_rows,
                    int64_t k_dim, int64_t n_dim) {
    for (int64_t m = 0; m < m_rows; ++m) {
        const float* arow = a + m * k_dim;
        const float* grow = g + m * n_dim;
        for (int64_t k = 0; k < k_dim; ++k) {
            const float av = arow[k];
            if (av == 0.0f) continue;
            float* dst = db + k * n_dim;
            for (int64_t n = 0; n < n_dim; ++n) dst[n] += av * grow[n];
        }
    }
}

}  // namespace

Var Tape::push(Tensor value, std::vector<int32_t> parents,
               std::function<void(Tape&, const Node&, const Tensor&)> bw) {
    Node node;
    node.value = std::move(value);
    if (recording_) {
        bool any = false;
        for (int32_t p : parents) {
            if (p >= 0 && nodes_[static_cast<size_t>(p)].needs_grad) any = true;
        }
        node.needs_grad = any;
        if (any) {
            node.parents = std::move(parents);
            node.backward = std::move(bw);
        }
    }
    nodes_.push_back(std::move(node));
    return Var{this, static_cast<int32_t>(nodes_.size() - 1)};
}

Var Tape::param(const std::string& name, Tensor value) {
    check(!name.empty(), "param: empty name");
    return leaf(std::move(value), true, name);
}

Var Tape::constant(Tensor value) { return leaf(std::move(value), false); }

Var Tape::leaf(Tensor value, bool needs_grad, const std::string& name) {
    Node node;
    node.value = std::move(value);
    node.needs_grad = recording_ && needs_grad;
    node.name = name;
    nodes_.push_back(std::move(node));
    return Var{this, static_cast<int32_t>(nodes_.size() - 1)};
}

void Tape::accumulate(int32_t id, const Tensor& g) {
    auto& slot = grads_[static_cast<size_t>(id)];
    if (slot.numel() == 0) {
        slot = g;
        return;
    }
    check(slot.same_shape(g), "grad accumulate: shape mismatch");
    float* dst = slot.data();
    const float* src = g.data();
    for (int64_t i = 0; i < slot.numel(); ++i) dst[i] += src[i];
}

void Tape::accumulate_move(int32_t id, Tensor&& g) {
    auto& slot = grads_[static_cast<size_t>(id)];
    if (slot.numel() == 0) {
        slot = std::move(g);
        return;
    }
    accumulate(id, g);
}

void Tape::backward(Var output, const Tensor& seed) {
    check(output.valid() && output.tape == this, "backward: output not on this tape");
    check(!consumed_, "backward: tape already consumed");
    check(recording_, "backward: tape was created non-recording");
    const Tensor& out_val = value(output.id);
    check(out_val.same_shape(seed), "backward: seed shape " + shape_str(seed.shape()) +
                                        " does not match output " + shape_str(out_val.shape()));
    consumed_ = true;
    grads_.assign(nodes_.size(), Tensor());
    if (!nodes_[static_cast<size_t>(output.id)].needs_grad) return;
    grads_[static_cast<size_t>(output.id)] = seed;
    for (int32_t id = output.id; id >= 0; --id) {
        const Node& node = nodes_[static_cast<size_t>(id)];
        const Tensor& g = grads_[static_cast<size_t>(id)];
        if (g.numel() == 0 || !node.backward) continue;
        node.backward(*this, node, g);
    }
}

Tensor Tape::grad(Var v) const {
    check(v.valid() && v.tape == this, "grad: var not on this tape");
    check(consumed_, "grad: backward has not run");
    const Tensor& g = grads_[static_cast<size_t>(v.id)];
    if (g.numel() == 0) return Tensor::zeros(value(v.id).shape());
    return g;
}

GradMap Tape::named_grads() const {
    check(consumed_, "named_grads: backward has not run");
    GradMap out;
    for (size_t i = 0; i < nodes_.size(); ++i) {
        const Node& node = nodes_[i];
        if (node.name.empty()) continue;
        const Tensor& g = grads_[i];
        out[node.name] = g.numel() ? g : Tensor::zeros(node.value.shape());
    }
    return out;
}

// --- ops ----------------------------------------------------------------

Var Tape::matmul(Var a, Var b) {
    check_same_tape(a, b);
    Tensor out = ops::matmul(a.val(), b.val());
    const int32_t aid = a.id;
    const int32_t bid = b.id;
    return push(std::move(out), {aid, bid}, [aid, bid](Tape& t, const Node&, const Tensor& g) {
        const Tensor& av = t.value(aid);
        const Tensor& bv = t.value(bid);
        const int64_t k_dim = av.dim(-1);
        const int64_t m_rows = av.dim(-2);
        const int64_t n_dim = bv.dim(-1);
        const int64_t batch = av.numel() / (m_rows * k_dim);
        const bool shared_b = bv.ndim() == 2;
        if (t.needs_grad(aid)) {
            Tensor da = Tensor::zeros(av.shape());
            std::vector<float> bt(static_cast<size_t>(k_dim * n_dim));
            for (int64_t bi = 0; bi < batch; ++bi) {
                const float* gp = g.data() + bi * m_rows * n_dim;
                const float* bp = bv.data() + (shared_b ? 0 : bi * k_dim * n_dim);
                float* dp = da.data() + bi * m_rows * k_dim;
                // da = g (M,N) @ b^T (N,K)
                if (bi == 0 || !shared_b)
                    for (int64_t k = 0; k < k_dim; ++k)
                        for (int64_t n = 0; n < n_dim; ++n)
                            bt[static_cast<size_t>(n * k_dim + k)] = bp[k * n_dim + n];
                ops::gemm_acc(gp, bt.data(), dp, m_rows, n_dim, k_dim);
            }
            t.accumulate_move(aid, std::move(da));
        }
        if (t.needs_grad(bid)) {
            Tensor db = Tensor::zeros(bv.shape());
            for (int64_t bi = 0; bi < batch; ++bi) {
                const float* ap = av.data() + bi * m_rows * k_dim;
                const float* gp = g.data() + bi * m_rows * n_dim;
                float* dp = db.data() + (shared_b ? 0 : bi * k_dim * n_dim);
                gemm_acc_tn_kn(ap, gp, dp, m_rows, k_dim, n_dim);
            }
            t.accumulate_move(bid, std::move(db));
        }
    });
}

Var Tape::linear(Var x, Var w, Var b) {
    check_same_tape(x, w);
    if (b.valid()) check_same_tape(x, b);
    Tensor out = ops::linear(x.val(), w.val(), b.valid() ? b.val() : Tensor());
    const int32_t xid = x.id;
    const int32_t wid = w.id;
    const int32_t bid = b.valid() ? b.id : -1;
    std::vector<int32_t> parents = {xid, wid};
    if (bid >= 0) parents.push_back(bid);
    return push(std::move(out), std::move(parents),
                [xid, wid, bid](Tape& t, const Node&, const Tensor& g) {
                    const Tensor& xv = t.value(xid);
                    const Tensor& wv = t.value(wid);
                    const int64_t k_dim = wv.dim(1);
                    const int64_t n_dim = wv.dim(0);
                    const int64_t rows = xv.numel() / k_dim;
                    if (t.needs_grad(xid)) {
                        // dx = g (.., N) @ W (N, K)
                        Tensor dx = ops::matmul(g.reshaped({rows, n_dim}), wv);
                        t.accumulate_move(xid, std::move(dx.reshaped(xv.shape())));
                    }
                    if (t.needs_grad(wid)) {
                        Tensor dw = Tensor::zeros(wv.shape());
                        gemm_acc_tn(g.data(), xv.data(), dw.data(), rows, n_dim, k_dim);
                        t.accumulate_move(wid, std::move(dw));
                    }
                    if (bid >= 0 && t.needs_grad(bid)) {
                        Tensor db = Tensor::zeros({n_dim});
                        std::vector<double> acc(static_cast<size_t>(n_dim), 0.0);
                        const float* gp = g.data();
                        for (int64_t r = 0; r < rows; ++r)
                            for (int64_t n = 0; n < n_dim; ++n) acc[size_t(n)] += gp[r * n_dim + n];
                        for (int64_t n = 0; n < n_dim; ++n) db.data()[n] = static_cast<float>(acc[size_t(n)]);
                        t.accumulate_move(bid, std::move(db));
                    }
                });
}

Var Tape::add(Var a, Var b) {
    check_same_tape(a, b);
    Tensor out = ops::add(a.val(), b.val());
    const int32_t aid = a.id;
    const int32_t bid = b.id;
    return push(std::move(out), {aid, bid}, [aid, bid](Tape& t, const Node&, const Tensor& g) {
        if (t.needs_grad(aid)) t.accumulate_move(aid, reduce_back(g, t.value(aid).shape()));
        if (t.needs_grad(bid)) t.accumulate_move(bid, reduce_back(g, t.value(bid).shape()));
    });
}

Var Tape::sub(Var a, Var b) {
    check_same_tape(a, b);
    Tensor out = ops::sub(a.val(), b.val());
    const int32_t aid = a.id;
    const int32_t bid = b.id;
    return push(std::move(out), {aid, bid}, [aid, bid](Tape& t, const Node&, const Tensor& g) {
        if (t.needs_grad(aid)) t.accumulate_move(aid, reduce_back(g, t.value(aid).shape()));
        if (t.needs_grad(bid)) {
            Tensor db = reduce_back(g, t.value(bid).shape());
            for (int64_t i = 0; i < db.numel(); ++i) db.data()[i] = -db.data()[i];
            t.accumulate_move(bid, std::move(db));
        }
    });
}

Var Tape::mul(Var a, Var b) {
    check_same_tape(a, b);
    Tensor out = ops::mul(a.val(), b.val());
    const int32_t aid = a.id;
    const int32_t bid = b.id;
    return push(std::move(out), {aid, bid}, [aid, bid](Tape& t, const Node&, const Tensor& g) {
        if (t.needs_grad(aid))
            t.accumulate_move(aid, reduce_back(ops::mul(g, t.value(bid)), t.value(aid).shape()));
        if (t.needs_grad(bid))
            t.accumulate_move(bid, reduce_back(ops::mul(g, t.value(aid)), t.value(bid).shape()));
    });
}

Var Tape::scale(Var a, float s) {
    check(a.valid(), "scale: invalid operand");
    Tensor out = ops::scale(a.val(), s);
    const int32_t aid = a.id;
    return push(std::move(out), {aid}, [aid, s](Tape& t, const Node&, const Tensor& g) {
        if (t.needs_grad(aid)) t.accumulate_move(aid, ops::scale(g, s));
    });
}

Var Tape::add_scalar(Var a, float c) {
    check(a.valid(), "add_scalar: invalid operand");
    Tensor out = ops::add_scalar(a.val(), c);
    const int32_t aid = a.id;
    return push(std::move(out), {aid}, [aid](Tape& t, const Node&, const Tensor& g) {
        if (t.needs_grad(aid)) t.accumulate(aid, g);
    });
}

Var Tape::gelu(Var x) {
    check(x.valid(), "gelu: invalid operand");
    Tensor out = ops::gelu(x.val());
    const int32_t xid = x.id;
    return push(std::move(out), {xid}, [xid](Tape& t, const Node&, const Tensor& g) {
        if (!t.needs_grad(xid)) return;
        Tensor dx = ops::gelu_grad(t.value(xid));
        float* dp = dx.data();
        const float* gp = g.data();
        for (int64_t i = 0; i < dx.numel(); ++i) dp[i] *= gp[i];
        t.accumulate_move(xid, std::move(dx));
    });
}

Var Tape::softmax_last(Var x) {
    check(x.valid(), "softmax: invalid operand");
    Tensor out = ops::softmax_last(x.val());
    const int32_t xid = x.id;
    return push(std::move(out), {xid}, [xid](Tape& t, const Node& node, const Tensor& g) {
        if (!t.needs_grad(xid)) return;
        const Tensor& y = node.value;
        const int64_t cols = y.dim(-1);
        const int64_t rows = y.numel() / cols;
        Tensor dx = Tensor::zeros(y.shape());
        for (int64_t r = 0; r < rows; ++r) {
            const float* yr = y.data() + r * cols;
            const float* gr = g.data() + r * cols;
            double dot = 0.0;
            for (int64_t c = 0; c < cols; ++c) dot += double(gr[c]) * double(yr[c]);
            float* dr = dx.data() + r * cols;
            for (int64_t c = 0; c < cols; ++c)
                dr[c] = static_cast<float>(double(yr[c]) * (double(gr[c]) - dot));
        }
        t.accumulate_move(xid, std::move(dx));
    });
}

Var Tape::layernorm_last(Var x, Var gamma, Var beta, float eps) {
    check_same_tape(x, gamma);
    check_same_tape(x, beta);
    Tensor mean, inv_std;
    Tensor out = ops::layernorm_last(x.val(), gamma.val(), beta.val(), eps, &mean, &inv_std);
    const int32_t xid = x.id;
    const int32_t gid = gamma.id;
    const int32_t bid = beta.id;
    return push(std::move(out), {xid, gid, bid},
                [xid, gid, bid, mean, inv_std](Tape& t, const Node&, const Tensor& g) {
                    const Tensor& xv = t.value(xid);
                    const Tensor& gv = t.value(gid);
                    const int64_t cols = xv.dim(-1);
                    const int64_t rows = xv.numel() / cols;
                    const bool need_x = t.needs_grad(xid);
                    const bool need_g = t.needs_grad(gid);
                    const bool need_b = t.needs_grad(bid);
                    Tensor dx = need_x ? Tensor::zeros(xv.shape()) : Tensor();
                    std::vector<double> dgamma(static_cast<size_t>(need_g ? cols : 0), 0.0);
                    std::vector<double> dbeta(static_cast<size_t>(need_b ? cols : 0), 0.0);
                    for (int64_t r = 0; r < rows; ++r) {
                        const float* xr = xv.data() + r * cols;
                        const float* gr = g.data() + r * cols;
                        const double mu = double(mean.data()[r]);
                        const double inv = double(inv_std.data()[r]);
                        if (need_g || need_b) {
                            for (int64_t c = 0; c < cols; ++c) {
                                const double xhat = (double(xr[c]) - mu) * inv;
                                if (need_g) dgamma[size_t(c)] += double(gr[c]) * xhat;
                                if (need_b) dbeta[size_t(c)] += double(gr[c]);
                            }
                        }
                        if (need_x) {
                            double sum_dy = 0.0;
                            double sum_dy_xhat = 0.0;
                            for (int64_t c = 0; c < cols; ++c) {
                                const double xhat = (double(xr[c]) - mu) * inv;
                                const double dy = double(gr[c]) * double(gv.data()[c]);
                                sum_dy += dy;
                                sum_dy_xhat += dy * xhat;
                            }
                            const double inv_n = 1.0 / double(cols);
                            float* dr = dx.data() + r * cols;
                            for (int64_t c = 0; c < cols; ++c) {
                                const double xhat = (double(xr[c]) - mu) * inv;
                                const double dy = double(gr[c]) * double(gv.data()[c]);
                                dr[c] = static_cast<float>(
                                    inv * (dy - inv_n * sum_dy - xhat * inv_n * sum_dy_xhat));
                            }
                        }
                    }
                    if (need_x) t.accumulate_move(xid, std::move(dx));
                    if (need_g) {
                        Tensor dg = Tensor::zeros({cols});
                        for (int64_t c = 0; c < cols; ++c) dg.data()[c] = static_cast<float>(dgamma[size_t(c)]);
                        t.accumulate_move(gid, std::move(dg));
                    }
                    if (need_b) {
                        Tensor db = Tensor::zeros({cols});
                        for (int64_t c = 0; c < cols; ++c) db.data()[c] = static_cast<float>(dbeta[size_t(c)]);
                        t.accumulate_move(bid, std::move(db));
                    }
                });
}

Var Tape::layerscale(Var x, Var gamma) {
    check_same_tape(x, gamma);
    check(gamma.val().ndim() == 1 && gamma.val().dim(0) == x.val().dim(-1),
          "layerscale: gamma must match last dim");
    Tensor out = ops::mul(x.val(), gamma.val());
    const int32_t xid = x.id;
    const int32_t gid = gamma.id;
    return push(std::move(out), {xid, gid}, [xid, gid](Tape& t, const Node&, const Tensor& g) {
        const Tensor& xv = t.value(xid);
        const Tensor& gv = t.value(gid);
        if (t.needs_grad(xid)) {
            Tensor factor = gv;
            if (t.layerscale_relprop()) {
                const double eps = double(t.layerscale_eps());
                const double cap = 1.0 / eps;
                for (int64_t i = 0; i < factor.numel(); ++i) {
                    double r = 1.0 / (double(gv.data()[i]) + eps);
                    r = std::clamp(r, -cap, cap);
                    factor.data()[i] = static_cast<float>(r);
                }
            }
            t.accumulate_move(xid, reduce_back(ops::mul(g, factor), xv.shape()));
        }
        if (t.needs_grad(gid))
            t.accumulate_move(gid, reduce_back(ops::mul(g, xv), gv.shape()));
    });
}

Var Tape::reduce_sum(Var x, int64_t axis) {
    check(x.valid(), "reduce_sum: invalid operand");
    Tensor out = ops::reduce_sum(x.val(), axis);
    const int32_t xid = x.id;
    return push(std::move(out), {xid}, [xid, axis](Tape& t, const Node&, const Tensor& g) {
        if (!t.needs_grad(xid)) return;
        const Tensor& xv = t.value(xid);
        const int64_t ax = axis < 0 ? axis + xv.ndim() : axis;
        int64_t outer = 1, inner = 1;
        for (int64_t d = 0; d < ax; ++d) outer *= xv.dim(d);
        for (int64_t d = ax + 1; d < xv.ndim(); ++d) inner *= xv.dim(d);
        const int64_t len = xv.dim(ax);
        Tensor dx = Tensor::zeros(xv.shape());
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t l = 0; l < len; ++l)
                std::memcpy(dx.data() + (o * len + l) * inner, g.data() + o * inner,
                            static_cast<size_t>(inner) * sizeof(float));
        t.accumulate_move(xid, std::move(dx));
    });
}

Var Tape::reduce_mean(Var x, int64_t axis) {
    check(x.valid(), "reduce_mean: invalid operand");
    const int64_t ax = axis < 0 ? axis + x.val().ndim() : axis;
    const float inv = 1.0f / static_cast<float>(x.val().dim(ax));
    Var s = reduce_sum(x, axis);
    return scale(s, inv);
}

Var Tape::reduce_max(Var x, int64_t axis) {
    check(x.valid(), "reduce_max: invalid operand");
    std::vector<int64_t> argmax;
    Tensor out = ops::reduce_max(x.val(), axis, &argmax);
    const int32_t xid = x.id;
    return push(std::move(out), {xid},
                [xid, axis, argmax](Tape& t, const Node&, const Tensor& g) {
                    if (!t.needs_grad(xid)) return;
                    const Tensor& xv = t.value(xid);
                    const int64_t ax = axis < 0 ? axis + xv.ndim() : axis;
                    int64_t outer = 1, inner = 1;
                    for (int64_t d = 0; d < ax; ++d) outer *= xv.dim(d);
                    for (int64_t d = ax + 1; d < xv.ndim(); ++d) inner *= xv.dim(d);
                    const int64_t len = xv.dim(ax);
                    Tensor dx = Tensor::zeros(xv.shape());
                    for (int64_t o = 0; o < outer; ++o)
                        for (int64_t i = 0; i < inner; ++i) {
                            const int64_t win = argmax[static_cast<size_t>(o * inner + i)];
                            dx.data()[(o * len + win) * inner + i] = g.data()[o * inner + i];
                        }
                    t.accumulate_move(xid, std::move(dx));
                });
}

Var Tape::reduce_sum_all(Var x) {
    check(x.valid(), "reduce_sum_all: invalid operand");
    Tensor out = ops::reduce_sum_all(x.val());
    const int32_t xid = x.id;
    return push(std::move(out), {xid}, [xid](Tape& t, const Node&, const Tensor& g) {
        if (!t.needs_grad(xid)) return;
        t.accumulate_move(xid, Tensor::full(t.value(xid).shape(), g.data()[0]));
    });
}

Var Tape::reduce_mean_all(Var x) {
    check(x.valid(), "reduce_mean_all: invalid operand");
    const float inv = 1.0f / static_cast<float>(x.val().numel());
    return scale(reduce_sum_all(x), inv);
}

Var Tape::transpose(Var x, std::vector<int64_t> perm) {
    check(x.valid(), "transpose: invalid operand");
    Tensor out = ops::transpose(x.val(), perm);
    const int32_t xid = x.id;
    std::vector<int64_t> inv(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) inv[static_cast<size_t>(perm[i])] = static_cast<int64_t>(i);
    return push(std::move(out), {xid}, [xid, inv](Tape& t, const Node&, const Tensor& g) {
        if (t.needs_grad(xid)) t.accumulate_move(xid, ops::transpose(g, inv));
    });
}

Var Tape::reshape(Var x, std::vector<int64_t> shape) {
    check(x.valid(), "reshape: invalid operand");
    Tensor out = x.val().reshaped(shape);
    const int32_t xid = x.id;
    return push(std::move(out), {xid}, [xid](Tape& t, const Node&, const Tensor& g) {
        if (t.needs_grad(xid)) t.accumulate_move(xid, g.reshaped(t.value(xid).shape()));
    });
}

Var Tape::slice(Var x, int64_t axis, int64_t start, int64_t len) {
    check(x.valid(), "slice: invalid operand");
    Tensor out = ops::slice(x.val(), axis, start, len);
    const int32_t xid = x.id;
    return push(std::move(out), {xid},
                [xid, axis, start, len](Tape& t, const Node&, const Tensor& g) {
                    if (!t.needs_grad(xid)) return;
                    const Tensor& xv = t.value(xid);
                    const int64_t ax = axis < 0 ? axis + xv.ndim() : axis;
                    int64_t outer = 1, inner = 1;
                    for (int64_t d = 0; d < ax; ++d) outer *= xv.dim(d);
                    for (int64_t d = ax + 1; d < xv.ndim(); ++d) inner *= xv.dim(d);
                    const int64_t full = xv.dim(ax);
                    Tensor dx = Tensor::zeros(xv.shape());
                    for (int64_t o = 0; o < outer; ++o)
                        std::memcpy(dx.data() + (o * full + start) * inner,
                                    g.data() + o * len * inner,
                                    static_cast<size_t>(len * inner) * sizeof(float));
                    t.accumulate_move(xid, std::move(dx));
                });
}

Var Tape::concat(const std::vector<Var>& parts, int64_t axis) {
    check(!parts.empty(), "concat: no parts");
    std::vector<const Tensor*> vals;
    std::vector<int32_t> ids;
    for (const Var& p : parts) {
        check(p.valid() && p.tape == this, "concat: invalid part");
        vals.push_back(&p.val());
        ids.push_back(p.id);
    }
    Tensor out = ops::concat(vals, axis);
    const int64_t ax = axis < 0 ? axis + out.ndim() : axis;
    return push(std::move(out), std::vector<int32_t>(ids),
                [ids, ax](Tape& t, const Node&, const Tensor& g) {
                    int64_t offset = 0;
                    for (int32_t id : ids) {
                        const int64_t len = t.value(id).dim(ax);
                        if (t.needs_grad(id))
                            t.accumulate_move(id, ops::slice(g, ax, offset, len));
                        offset += len;
                    }
                });
}

Var Tape::l2norm_last(Var x) {
    check(x.valid(), "l2norm: invalid operand");
    Tensor out = ops::l2norm_last(x.val());
    const int32_t xid = x.id;
    return push(std::move(out), {xid}, [xid](Tape& t, const Node& node, const Tensor& g) {
        if (!t.needs_grad(xid)) return;
        const Tensor& xv = t.value(xid);
        const Tensor& y = node.value;
        const int64_t cols = xv.dim(-1);
        const int64_t rows = xv.numel() / cols;
        Tensor dx = Tensor::zeros(xv.shape());
        for (int64_t r = 0; r < rows; ++r) {
            const float norm = y.data()[r];
            if (norm == 0.0f) continue;
            const float gr = g.data()[r];
            const float* xr = xv.data() + r * cols;
            float* dr = dx.data() + r * cols;
            for (int64_t c = 0; c < cols; ++c) dr[c] = gr * xr[c] / norm;
        }
        t.accumulate_move(xid, std::move(dx));
    });
}

Var Tape::ste_binarize(Var m, float tau) {
    check(m.valid(), "ste_binarize: invalid operand");
    Tensor out = ops::heaviside(m.val());
    const int32_t mid = m.id;
    return push(std::move(out), {mid}, [mid, tau](Tape& t, const Node&, const Tensor& g) {
        if (!t.needs_grad(mid)) return;
        const Tensor& mv = t.value(mid);
        Tensor dm = Tensor::zeros(mv.shape());
        for (int64_t i = 0; i < mv.numel(); ++i) {
            const double s = ops::ste_surrogate_gradient(double(mv.data()[i]), double(tau));
            dm.data()[i] = static_cast<float>(double(g.data()[i]) * s);
        }
        t.accumulate_move(mid, std::move(dm));
    });
}

Var Tape::cross_entropy_mean(Var logits, const std::vector<int>& labels) {
    check(logits.valid(), "cross_entropy: invalid operand");
    const Tensor& lv = logits.val();
    check(lv.ndim() == 2, "cross_entropy: logits must be (batch, classes)");
    const int64_t batch = lv.dim(0);
    const int64_t classes = lv.dim(1);
    check(static_cast<int64_t>(labels.size()) == batch, "cross_entropy: label count mismatch");
    for (int lab : labels)
        check(lab >= 0 && lab < classes, "cross_entropy: label out of range");
    Tensor probs = ops::softmax_last(lv);
    double loss = 0.0;
    for (int64_t i = 0; i < batch; ++i) {
        const float p = probs.data()[i * classes + labels[static_cast<size_t>(i)]];
        loss -= std::log(std::max(double(p), 1e-30));
    }
    loss /= double(batch);
    Tensor out({1}, {static_cast<float>(loss)});
    const int32_t lid = logits.id;
    return push(std::move(out), {lid},
                [lid, probs, labels](Tape& t, const Node&, const Tensor& g) {
                    if (!t.needs_grad(lid)) return;
                    const int64_t batch = probs.dim(0);
                    const int64_t classes = probs.dim(1);
                    const float gs = g.data()[0] / static_cast<float>(batch);
                    Tensor dl = probs;
                    for (int64_t i = 0; i < batch; ++i) {
                        float* row = dl.data() + i * classes;
                        row[labels[static_cast<size_t>(i)]] -= 1.0f;
                        for (int64_t c = 0; c < classes; ++c) row[c] *= gs;
                    }
                    t.accumulate_move(lid, std::move(dl));
                });
}

}  // namespace impact
