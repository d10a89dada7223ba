#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "voxgene/error.hpp"
#include "voxgene/parallel.hpp"
#include "voxgene/rng.hpp"
#include "voxgene/tensor.hpp"

namespace voxgene {

// Named parameter registry. Iteration order is creation order; the optimizer,
// the serializer, and the gradient checker all walk it in that order.
class ParamStore {
public:
    Tensor& add(const std::string& name, Tensor t) {
        if (index_.count(name)) throw config_error("duplicate parameter name '" + name + "'");
        t.set_requires_grad(true);
        index_[name] = items_.size();
        items_.emplace_back(name, std::move(t));
        return items_.back().second;
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    Tensor& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw config_error("unknown parameter '" + name + "'");
        return items_[it->second].second;
    }

    const Tensor& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw config_error("unknown parameter '" + name + "'");
        return items_[it->second].second;
    }

    std::size_t size() const { return items_.size(); }
    const std::string& name(std::size_t i) const { return items_[i].first; }
    Tensor& tensor(std::size_t i) { return items_[i].second; }
    const Tensor& tensor(std::size_t i) const { return items_[i].second; }

    std::size_t total_elements() const {
        std::size_t n = 0;
        for (const auto& [_, t] : items_) n += t.size();
        return n;
    }

    void zero_grads() {
        for (auto& [_, t] : items_) t.zero_grad();
    }

private:
    std::vector<std::pair<std::string, Tensor>> items_;
    std::unordered_map<std::string, std::size_t> index_;
};

// ---- initialization ----

inline Tensor trunc_normal_param(Shape shape, double stddev, Rng& rng) {
    Tensor t(std::move(shape));
    for (auto& v : t.values()) v = rng.truncated_normal(stddev);
    return t;
}

inline Tensor zeros_param(Shape shape) { return Tensor(std::move(shape), 0.0); }
inline Tensor ones_param(Shape shape) { return Tensor(std::move(shape), 1.0); }

// ---- layer ops (all record their backward rules on the tape) ----

// x[T x I] * w[I x O] + b[O]
inline Tensor linear(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b) {
    return tape.add(tape.matmul(x, w), b);
}

// Cross-correlation: x[Cin x H x W], w[Cout x Cin x k x k], b[Cout].
// Output H' = (H + 2p - k)/s + 1 and likewise W'.
inline Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b,
                     std::size_t stride, std::size_t padding) {
    if (x.ndim() != 3 || w.ndim() != 4 || b.ndim() != 1)
        throw dimension_error("conv2d expects x[CxHxW], w[OxCxkxk], b[O]; got x=" +
                              shape_str(x.shape()) + " w=" + shape_str(w.shape()));
    const std::size_t ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const std::size_t co = w.dim(0), k = w.dim(2);
    if (w.dim(1) != ci || w.dim(3) != k || b.dim(0) != co)
        throw dimension_error("conv2d parameter mismatch: x=" + shape_str(x.shape()) +
                              " w=" + shape_str(w.shape()));
    if (stride == 0) throw config_error("conv2d stride must be positive");
    if (h + 2 * padding < k || wd + 2 * padding < k)
        throw dimension_error("conv2d kernel " + std::to_string(k) + " larger than padded input " +
                              shape_str(x.shape()));
    const std::size_t oh = (h + 2 * padding - k) / stride + 1;
    const std::size_t ow = (wd + 2 * padding - k) / stride + 1;
    Tensor out({co, oh, ow});
    const double* xd = x.values().data();
    const double* wd_ = w.values().data();
    const double* bd = b.values().data();
    double* od = out.values().data();
    parallel_for(0, co, [&](std::size_t o0, std::size_t o1) {
        for (std::size_t oc = o0; oc < o1; ++oc) {
            for (std::size_t oy = 0; oy < oh; ++oy) {
                for (std::size_t ox = 0; ox < ow; ++ox) {
                    double acc = bd[oc];
                    for (std::size_t ic = 0; ic < ci; ++ic) {
                        for (std::size_t ky = 0; ky < k; ++ky) {
                            const std::ptrdiff_t iy =
                                static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                static_cast<std::ptrdiff_t>(padding);
                            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                            for (std::size_t kx = 0; kx < k; ++kx) {
                                const std::ptrdiff_t ix =
                                    static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                    static_cast<std::ptrdiff_t>(padding);
                                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
                                acc += xd[(ic * h + iy) * wd + ix] *
                                       wd_[((oc * ci + ic) * k + ky) * k + kx];
                            }
                        }
                    }
                    od[(oc * oh + oy) * ow + ox] = acc;
                }
            }
        }
    });
    if (x.requires_grad() || w.requires_grad() || b.requires_grad()) {
        out.set_requires_grad(true);
        tape.record([xn = x.shared_node(), wn = w.shared_node(), bn = b.shared_node(),
                     on = out.shared_node(), ci, h, wd, co, k, stride, padding, oh, ow] {
            if (on->grad.empty()) return;
            const double* g = on->grad.data();
            const bool need_x = xn->requires_grad || !xn->grad.empty();
            const bool need_w = wn->requires_grad || !wn->grad.empty();
            const bool need_b = bn->requires_grad || !bn->grad.empty();
            double* gx = need_x ? detail::ensure_grad(xn).data() : nullptr;
            double* gw = need_w ? detail::ensure_grad(wn).data() : nullptr;
            double* gb = need_b ? detail::ensure_grad(bn).data() : nullptr;
            for (std::size_t oc = 0; oc < co; ++oc) {
                for (std::size_t oy = 0; oy < oh; ++oy) {
                    for (std::size_t ox = 0; ox < ow; ++ox) {
                        const double gv = g[(oc * oh + oy) * ow + ox];
                        if (gb) gb[oc] += gv;
                        if (!gx && !gw) continue;
                        for (std::size_t ic = 0; ic < ci; ++ic) {
                            for (std::size_t ky = 0; ky < k; ++ky) {
                                const std::ptrdiff_t iy =
                                    static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                    static_cast<std::ptrdiff_t>(padding);
                                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                                for (std::size_t kx = 0; kx < k; ++kx) {
                                    const std::ptrdiff_t ix =
                                        static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                        static_cast<std::ptrdiff_t>(padding);
                                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
                                    const std::size_t xi = (ic * h + iy) * wd + ix;
                                    const std::size_t wi = ((oc * ci + ic) * k + ky) * k + kx;
                                    if (gw) gw[wi] += gv * xn->data[xi];
                                    if (gx) gx[xi] += gv * wn->data[wi];
                                }
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

// Width-1 1D convolution: the same affine map D -> G applied at each of the T
// positions. x[T x D], w[G x D], b[G] -> [T x G].
inline Tensor conv1d_k1(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.ndim() != 2 || w.ndim() != 2 || b.ndim() != 1)
        throw dimension_error("conv1d_k1 expects x[TxD], w[GxD], b[G]");
    const std::size_t t = x.dim(0), d = x.dim(1), g = w.dim(0);
    if (w.dim(1) != d || b.dim(0) != g)
        throw dimension_error("conv1d_k1 channel mismatch: x=" + shape_str(x.shape()) +
                              " w=" + shape_str(w.shape()));
    Tensor out({t, g});
    const double* xd = x.values().data();
    const double* wd = w.values().data();
    const double* bd = b.values().data();
    double* od = out.values().data();
    parallel_for(0, t, [&](std::size_t t0, std::size_t t1) {
        for (std::size_t p = t0; p < t1; ++p) {
            const double* xrow = xd + p * d;
            double* orow = od + p * g;
            for (std::size_t o = 0; o < g; ++o) {
                const double* wrow = wd + o * d;
                double acc = bd[o];
                for (std::size_t c = 0; c < d; ++c) acc += xrow[c] * wrow[c];
                orow[o] = acc;
            }
        }
    });
    if (x.requires_grad() || w.requires_grad() || b.requires_grad()) {
        out.set_requires_grad(true);
        tape.record([xn = x.shared_node(), wn = w.shared_node(), bn = b.shared_node(),
                     on = out.shared_node(), t, d, g] {
            if (on->grad.empty()) return;
            const double* gr = on->grad.data();
            if (xn->requires_grad || !xn->grad.empty()) {
                double* gx = detail::ensure_grad(xn).data();
                for (std::size_t p = 0; p < t; ++p)
                    for (std::size_t o = 0; o < g; ++o) {
                        const double gv = gr[p * g + o];
                        const double* wrow = wn->data.data() + o * d;
                        for (std::size_t c = 0; c < d; ++c) gx[p * d + c] += gv * wrow[c];
                    }
            }
            if (wn->requires_grad || !wn->grad.empty()) {
                double* gw = detail::ensure_grad(wn).data();
                for (std::size_t p = 0; p < t; ++p)
                    for (std::size_t o = 0; o < g; ++o) {
                        const double gv = gr[p * g + o];
                        const double* xrow = xn->data.data() + p * d;
                        for (std::size_t c = 0; c < d; ++c) gw[o * d + c] += gv * xrow[c];
                    }
            }
            if (bn->requires_grad || !bn->grad.empty()) {
                double* gb = detail::ensure_grad(bn).data();
                for (std::size_t p = 0; p < t; ++p)
                    for (std::size_t o = 0; o < g; ++o) gb[o] += gr[p * g + o];
            }
        });
    }
    return out;
}

// Per-slice normalization over the last axis (population variance), then affine.
inline Tensor layernorm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias,
                        double eps = 1e-5) {
    if (x.ndim() == 0) throw dimension_error("layernorm needs at least one axis");
    const std::size_t d = x.dim(x.ndim() - 1);
    if (gain.size() != d || bias.size() != d)
        throw dimension_error("layernorm gain/bias must have length " + std::to_string(d));
    const std::size_t rows = x.size() / d;
    Tensor out(x.shape());
    auto xhat = std::make_shared<std::vector<double>>(x.size());
    auto invstd = std::make_shared<std::vector<double>>(rows);
    const auto& xv = x.values();
    const auto& gv = gain.values();
    const auto& bv = bias.values();
    auto& ov = out.values();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = xv.data() + r * d;
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += in[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = in[j] - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + eps);
        (*invstd)[r] = inv;
        for (std::size_t j = 0; j < d; ++j) {
            const double xh = (in[j] - mean) * inv;
            (*xhat)[r * d + j] = xh;
            ov[r * d + j] = gv[j] * xh + bv[j];
        }
    }
    if (x.requires_grad() || gain.requires_grad() || bias.requires_grad()) {
        out.set_requires_grad(true);
        tape.record([xn = x.shared_node(), gn = gain.shared_node(), bn = bias.shared_node(),
                     on = out.shared_node(), xhat, invstd, rows, d] {
            if (on->grad.empty()) return;
            const double* g = on->grad.data();
            const bool need_x = xn->requires_grad || !xn->grad.empty();
            const bool need_g = gn->requires_grad || !gn->grad.empty();
            const bool need_b = bn->requires_grad || !bn->grad.empty();
            double* gx = need_x ? detail::ensure_grad(xn).data() : nullptr;
            double* gg = need_g ? detail::ensure_grad(gn).data() : nullptr;
            double* gb = need_b ? detail::ensure_grad(bn).data() : nullptr;
            for (std::size_t r = 0; r < rows; ++r) {
                const double* grow = g + r * d;
                const double* xh = xhat->data() + r * d;
                if (gg)
                    for (std::size_t j = 0; j < d; ++j) gg[j] += grow[j] * xh[j];
                if (gb)
                    for (std::size_t j = 0; j < d; ++j) gb[j] += grow[j];
                if (gx) {
                    double m1 = 0.0, m2 = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dxh = grow[j] * gn->data[j];
                        m1 += dxh;
                        m2 += dxh * xh[j];
                    }
                    m1 /= static_cast<double>(d);
                    m2 /= static_cast<double>(d);
                    const double inv = (*invstd)[r];
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dxh = grow[j] * gn->data[j];
                        gx[r * d + j] += inv * (dxh - m1 - xh[j] * m2);
                    }
                }
            }
        });
    }
    return out;
}

struct DropoutConfig {
    double rate = 0.5;
    bool train = false;
};

// Train mode: zero each element with probability rate and scale survivors by
// 1/(1-rate). Eval mode (and rate 0) is the identity, returned as-is.
inline Tensor dropout(Tape& tape, const Tensor& x, const DropoutConfig& cfg, Rng& stream) {
    if (cfg.rate < 0.0 || cfg.rate >= 1.0)
        throw config_error("dropout rate must be in [0,1), got " + std::to_string(cfg.rate));
    if (!cfg.train || cfg.rate == 0.0) return x;
    const double keep_scale = 1.0 / (1.0 - cfg.rate);
    auto factors = std::make_shared<std::vector<double>>(x.size());
    for (auto& f : *factors) f = stream.uniform01() < cfg.rate ? 0.0 : keep_scale;
    Tensor out(x.shape());
    const auto& xv = x.values();
    auto& ov = out.values();
    for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = xv[i] * (*factors)[i];
    if (x.requires_grad()) {
        out.set_requires_grad(true);
        tape.record([xn = x.shared_node(), on = out.shared_node(), factors] {
            if (on->grad.empty()) return;
            auto& gx = detail::ensure_grad(xn);
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += on->grad[i] * (*factors)[i];
        });
    }
    return out;
}

// ---- multi-head self-attention ----

inline void add_attention_params(ParamStore& ps, const std::string& prefix, std::size_t dim,
                                 Rng& rng) {
    for (const char* p : {"q", "k", "v", "o"}) {
        ps.add(prefix + "." + p + ".w", trunc_normal_param({dim, dim}, 0.02, rng));
        ps.add(prefix + "." + p + ".b", zeros_param({dim}));
    }
}

// Scaled dot-product attention per head with 1/sqrt(D/H) scaling, head
// concatenation, output projection. Shape-preserving on x[T x D].
// When `attn` is non-null the per-head softmax weights are appended to it.
inline Tensor multihead_self_attention(Tape& tape, const Tensor& x, const ParamStore& ps,
                                       const std::string& prefix, std::size_t heads,
                                       std::vector<Tensor>* attn = nullptr) {
    if (x.ndim() != 2) throw dimension_error("attention expects x[TxD], got " + shape_str(x.shape()));
    const std::size_t d = x.dim(1);
    if (heads == 0 || d % heads != 0)
        throw config_error("token dim " + std::to_string(d) + " not divisible by " +
                           std::to_string(heads) + " heads");
    const std::size_t dh = d / heads;
    const double scaling = 1.0 / std::sqrt(static_cast<double>(dh));
    const Tensor q = linear(tape, x, ps.at(prefix + ".q.w"), ps.at(prefix + ".q.b"));
    const Tensor k = linear(tape, x, ps.at(prefix + ".k.w"), ps.at(prefix + ".k.b"));
    const Tensor v = linear(tape, x, ps.at(prefix + ".v.w"), ps.at(prefix + ".v.b"));
    std::vector<Tensor> ctx;
    ctx.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t c0 = h * dh, c1 = (h + 1) * dh;
        const Tensor qh = tape.slice_cols(q, c0, c1);
        const Tensor kh = tape.slice_cols(k, c0, c1);
        const Tensor vh = tape.slice_cols(v, c0, c1);
        const Tensor scores = tape.scale(tape.matmul(qh, tape.transpose(kh)), scaling);
        const Tensor weights = tape.softmax_lastaxis(scores);
        if (attn) attn->push_back(weights);
        ctx.push_back(tape.matmul(weights, vh));
    }
    const Tensor merged = tape.concat_cols(ctx);
    return linear(tape, merged, ps.at(prefix + ".o.w"), ps.at(prefix + ".o.b"));
}

inline void add_transformer_layer_params(ParamStore& ps, const std::string& prefix,
                                         std::size_t dim, std::size_t mlp_hidden, Rng& rng) {
    ps.add(prefix + ".ln1.g", ones_param({dim}));
    ps.add(prefix + ".ln1.b", zeros_param({dim}));
    add_attention_params(ps, prefix + ".attn", dim, rng);
    ps.add(prefix + ".ln2.g", ones_param({dim}));
    ps.add(prefix + ".ln2.b", zeros_param({dim}));
    ps.add(prefix + ".mlp.w1", trunc_normal_param({dim, mlp_hidden}, 0.02, rng));
    ps.add(prefix + ".mlp.b1", zeros_param({mlp_hidden}));
    ps.add(prefix + ".mlp.w2", trunc_normal_param({mlp_hidden, dim}, 0.02, rng));
    ps.add(prefix + ".mlp.b2", zeros_param({dim}));
}

// Pre-norm block: x + attn(ln(x)), then x + mlp(ln(x)).
inline Tensor transformer_layer(Tape& tape, const Tensor& x, const ParamStore& ps,
                                const std::string& prefix, std::size_t heads,
                                std::vector<Tensor>* attn = nullptr) {
    Tensor h = tape.add(
        x, multihead_self_attention(
               tape, layernorm(tape, x, ps.at(prefix + ".ln1.g"), ps.at(prefix + ".ln1.b")), ps,
               prefix + ".attn", heads, attn));
    const Tensor f = layernorm(tape, h, ps.at(prefix + ".ln2.g"), ps.at(prefix + ".ln2.b"));
    const Tensor inner =
        tape.gelu(linear(tape, f, ps.at(prefix + ".mlp.w1"), ps.at(prefix + ".mlp.b1")));
    return tape.add(h, linear(tape, inner, ps.at(prefix + ".mlp.w2"), ps.at(prefix + ".mlp.b2")));
}

}  // namespace voxgene
