#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "voxgene/error.hpp"
#include "voxgene/linalg.hpp"
#include "voxgene/rng.hpp"

namespace voxgene {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

struct TensorNode {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until a gradient is accumulated
    bool requires_grad = false;
};

// Cheap handle onto a shared node. Tensors are immutable once produced by a
// taped op; only leaf parameters are updated in place (by the optimizer).
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false)
        : node_(std::make_shared<TensorNode>()) {
        node_->shape = std::move(shape);
        node_->data.assign(shape_numel(node_->shape), fill);
        node_->requires_grad = requires_grad;
    }

    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
        : node_(std::make_shared<TensorNode>()) {
        if (shape_numel(shape) != data.size())
            throw dimension_error("tensor data length " + std::to_string(data.size()) +
                                  " does not match shape " + shape_str(shape));
        node_->shape = std::move(shape);
        node_->data = std::move(data);
        node_->requires_grad = requires_grad;
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return Tensor({1}, std::vector<double>{v}, requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t ndim() const { return node_->shape.size(); }
    std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t size() const { return node_->data.size(); }

    std::vector<double>& values() { return node_->data; }
    const std::vector<double>& values() const { return node_->data; }

    double value() const {
        if (size() != 1) throw dimension_error("value() requires a scalar, got " + shape_str(shape()));
        return node_->data[0];
    }

    // flat access
    double operator[](std::size_t i) const { return node_->data[i]; }
    double& operator[](std::size_t i) { return node_->data[i]; }

    // 2-D access
    double at2(std::size_t i, std::size_t j) const { return node_->data[i * dim(1) + j]; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool b) { node_->requires_grad = b; }

    bool has_grad() const { return !node_->grad.empty(); }

    std::vector<double>& grad() {
        if (node_->grad.empty()) node_->grad.assign(node_->data.size(), 0.0);
        return node_->grad;
    }

    const std::vector<double>& grad() const {
        if (node_->grad.empty())
            throw dimension_error("gradient not computed for tensor " + shape_str(shape()));
        return node_->grad;
    }

    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    }

    TensorNode* node() const { return node_.get(); }
    const std::shared_ptr<TensorNode>& shared_node() const { return node_; }

private:
    std::shared_ptr<TensorNode> node_;
};

namespace detail {

using NodePtr = std::shared_ptr<TensorNode>;

inline std::vector<double>& ensure_grad(const NodePtr& n) {
    if (n->grad.empty()) n->grad.assign(n->data.size(), 0.0);
    return n->grad;
}

inline const double kGeluC = 0.7978845608028653558798921198687;  // sqrt(2/pi)
inline const double kGeluA = 0.044715;

}  // namespace detail

// Records one forward pass; operations append in execution order, so inputs
// always precede their consumers and a single reverse sweep visits each
// recorded op exactly once. Build a fresh tape per forward pass.
class Tape {
public:
    std::size_t recorded() const { return records_.size(); }

    void clear() { records_.clear(); }

    // Appends a backward closure; used by the layer ops that carry their own
    // backward rules (conv, layernorm, dropout).
    void record(std::function<void()> fn) { records_.push_back(std::move(fn)); }

    // Seeds d(loss)/d(loss) = 1 and replays the tape backwards. Repeated calls
    // without zeroing leaf gradients accumulate.
    void backward(const Tensor& loss) {
        if (loss.size() != 1)
            throw dimension_error("backward requires a scalar loss, got " + shape_str(loss.shape()));
        detail::ensure_grad(loss.shared_node())[0] += 1.0;
        for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
    }

    // ---- elementwise (with scalar / last-axis-vector broadcast on rhs) ----

    Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::add); }
    Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::sub); }
    Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::mul); }

    Tensor scale(const Tensor& x, double c) {
        Tensor out(x.shape());
        const auto& xv = x.values();
        auto& ov = out.values();
        for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = xv[i] * c;
        if (x.requires_grad()) {
            out.set_requires_grad(true);
            push([xn = x.shared_node(), on = out.shared_node(), c] {
                if (on->grad.empty()) return;
                auto& gx = detail::ensure_grad(xn);
                for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += on->grad[i] * c;
            });
        }
        return out;
    }

    Tensor relu(const Tensor& x) {
        Tensor out(x.shape());
        const auto& xv = x.values();
        auto& ov = out.values();
        for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = xv[i] > 0.0 ? xv[i] : 0.0;
        if (x.requires_grad()) {
            out.set_requires_grad(true);
            push([xn = x.shared_node(), on = out.shared_node()] {
                if (on->grad.empty()) return;
                auto& gx = detail::ensure_grad(xn);
                for (std::size_t i = 0; i < gx.size(); ++i)
                    if (xn->data[i] > 0.0) gx[i] += on->grad[i];
            });
        }
        return out;
    }

    // tanh approximation; the gradient differentiates the same approximation
    Tensor gelu(const Tensor& x) {
        Tensor out(x.shape());
        const auto& xv = x.values();
        auto& ov = out.values();
        for (std::size_t i = 0; i < xv.size(); ++i) {
            const double v = xv[i];
            const double u = detail::kGeluC * (v + detail::kGeluA * v * v * v);
            ov[i] = 0.5 * v * (1.0 + std::tanh(u));
        }
        if (x.requires_grad()) {
            out.set_requires_grad(true);
            push([xn = x.shared_node(), on = out.shared_node()] {
                if (on->grad.empty()) return;
                auto& gx = detail::ensure_grad(xn);
                for (std::size_t i = 0; i < gx.size(); ++i) {
                    const double v = xn->data[i];
                    const double u = detail::kGeluC * (v + detail::kGeluA * v * v * v);
                    const double t = std::tanh(u);
                    const double du = detail::kGeluC * (1.0 + 3.0 * detail::kGeluA * v * v);
                    const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
                    gx[i] += on->grad[i] * d;
                }
            });
        }
        return out;
    }

    // ---- softmax over the last axis, max-subtracted ----

    Tensor softmax_lastaxis(const Tensor& x) {
        if (x.ndim() == 0 || x.dim(x.ndim() - 1) < 1)
            throw dimension_error("softmax_lastaxis needs a non-empty last axis, got " +
                                  shape_str(x.shape()));
        const std::size_t d = x.dim(x.ndim() - 1);
        const std::size_t rows = x.size() / d;
        Tensor out(x.shape());
        const auto& xv = x.values();
        auto& ov = out.values();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* in = xv.data() + r * d;
            double* o = ov.data() + r * d;
            double mx = in[0];
            for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, in[j]);
            double sum = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                o[j] = std::exp(in[j] - mx);
                sum += o[j];
            }
            for (std::size_t j = 0; j < d; ++j) o[j] /= sum;
        }
        if (x.requires_grad()) {
            out.set_requires_grad(true);
            push([xn = x.shared_node(), on = out.shared_node(), d, rows] {
                if (on->grad.empty()) return;
                auto& gx = detail::ensure_grad(xn);
                for (std::size_t r = 0; r < rows; ++r) {
                    const double* s = on->data.data() + r * d;
                    const double* g = on->grad.data() + r * d;
                    double dot = 0.0;
                    for (std::size_t j = 0; j < d; ++j) dot += g[j] * s[j];
                    double* out_g = gx.data() + r * d;
                    for (std::size_t j = 0; j < d; ++j) out_g[j] += s[j] * (g[j] - dot);
                }
            });
        }
        return out;
    }

    // ---- matmul and 2-D structure ops ----

    Tensor matmul(const Tensor& a, const Tensor& b) {
        if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
            throw dimension_error("matmul shape mismatch: " + shape_str(a.shape()) + " * " +
                                  shape_str(b.shape()));
        const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
        Tensor out({m, n});
        matmul_kernel(a.values().data(), b.values().data(), out.values().data(), m, k, n);
        if (a.requires_grad() || b.requires_grad()) {
            out.set_requires_grad(true);
            push([an = a.shared_node(), bn = b.shared_node(), on = out.shared_node(), m, k, n] {
                if (on->grad.empty()) return;
                const double* g = on->grad.data();
                if (an->requires_grad || !an->grad.empty()) {
                    // dA += g * B^T
                    matmul_nt_acc(g, bn->data.data(), detail::ensure_grad(an).data(), m, n, k);
                }
                if (bn->requires_grad || !bn->grad.empty()) {
                    // dB += A^T * g
                    matmul_tn_acc(an->data.data(), g, detail::ensure_grad(bn).data(), m, k, n);
                }
            });
        }
        return out;
    }

    Tensor transpose(const Tensor& x) {
        if (x.ndim() != 2)
            throw dimension_error("transpose needs a 2-D tensor, got " + shape_str(x.shape()));
        const std::size_t r = x.dim(0), c = x.dim(1);
        Tensor out({c, r});
        const auto& xv = x.values();
        auto& ov = out.values();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) ov[j * r + i] = xv[i * c + j];
        if (x.requires_grad()) {
            out.set_requires_grad(true);
            push([xn = x.shared_node(), on = out.shared_node(), r, c] {
                if (on->grad.empty()) return;
                auto& gx = detail::ensure_grad(xn);
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += on->grad[j * r + i];
            });
        }
        return out;
    }

    Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t c1) {
        if (x.ndim() != 2 || c0 >= c1 || c1 > x.dim(1))
            throw dimension_error("slice_cols [" + std::to_string(c0) + "," + std::to_string(c1) +
                                  ") out of range for " + shape_str(x.shape()));
        const std::size_t r = x.dim(0), c = x.dim(1), w = c1 - c0;
        Tensor out({r, w});
        const auto& xv = x.values();
        auto& ov = out.values();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < w; ++j) ov[i * w + j] = xv[i * c + c0 + j];
        if (x.requires_grad()) {
            out.set_requires_grad(true);
            push([xn = x.shared_node(), on = out.shared_node(), r, c, c0, w] {
                if (on->grad.empty()) return;
                auto& gx = detail::ensure_grad(xn);
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < w; ++j) gx[i * c + c0 + j] += on->grad[i * w + j];
            });
        }
        return out;
    }

    Tensor concat_cols(std::span<const Tensor> parts) {
        if (parts.empty()) throw dimension_error("concat_cols of zero tensors");
        const std::size_t r = parts[0].dim(0);
        std::size_t total = 0;
        bool needs = false;
        for (const auto& p : parts) {
            if (p.ndim() != 2 || p.dim(0) != r)
                throw dimension_error("concat_cols row mismatch at " + shape_str(p.shape()));
            total += p.dim(1);
            needs = needs || p.requires_grad();
        }
        Tensor out({r, total});
        auto& ov = out.values();
        std::size_t base = 0;
        for (const auto& p : parts) {
            const std::size_t w = p.dim(1);
            const auto& pv = p.values();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < w; ++j) ov[i * total + base + j] = pv[i * w + j];
            base += w;
        }
        if (needs) {
            out.set_requires_grad(true);
            std::vector<detail::NodePtr> srcs;
            for (const auto& p : parts) srcs.push_back(p.shared_node());
            push([srcs, on = out.shared_node(), r, total] {
                if (on->grad.empty()) return;
                std::size_t base = 0;
                for (const auto& s : srcs) {
                    const std::size_t w = s->shape[1];
                    if (s->requires_grad || !s->grad.empty()) {
                        auto& gs = detail::ensure_grad(s);
                        for (std::size_t i = 0; i < r; ++i)
                            for (std::size_t j = 0; j < w; ++j)
                                gs[i * w + j] += on->grad[i * total + base + j];
                    }
                    base += w;
                }
            });
        }
        return out;
    }

    Tensor reshape(const Tensor& x, Shape s) {
        if (shape_numel(s) != x.size())
            throw dimension_error("reshape " + shape_str(x.shape()) + " -> " + shape_str(s) +
                                  " changes element count");
        Tensor out(std::move(s), x.values());
        if (x.requires_grad()) {
            out.set_requires_grad(true);
            push([xn = x.shared_node(), on = out.shared_node()] {
                if (on->grad.empty()) return;
                auto& gx = detail::ensure_grad(xn);
                for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += on->grad[i];
            });
        }
        return out;
    }

    // [C x H x W] feature map -> [H*W x C] tokens, position-major
    Tensor tokens_from_chw(const Tensor& x) {
        if (x.ndim() != 3)
            throw dimension_error("tokens_from_chw needs [CxHxW], got " + shape_str(x.shape()));
        const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
        Tensor out({hw, c});
        const auto& xv = x.values();
        auto& ov = out.values();
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t p = 0; p < hw; ++p) ov[p * c + ch] = xv[ch * hw + p];
        if (x.requires_grad()) {
            out.set_requires_grad(true);
            push([xn = x.shared_node(), on = out.shared_node(), c, hw] {
                if (on->grad.empty()) return;
                auto& gx = detail::ensure_grad(xn);
                for (std::size_t ch = 0; ch < c; ++ch)
                    for (std::size_t p = 0; p < hw; ++p) gx[ch * hw + p] += on->grad[p * c + ch];
            });
        }
        return out;
    }

    // ---- reductions ----

    Tensor sum(const Tensor& x) {
        double acc = 0.0;
        for (double v : x.values()) acc += v;
        Tensor out = Tensor::scalar(acc);
        if (x.requires_grad()) {
            out.set_requires_grad(true);
            push([xn = x.shared_node(), on = out.shared_node()] {
                if (on->grad.empty()) return;
                auto& gx = detail::ensure_grad(xn);
                const double g = on->grad[0];
                for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
            });
        }
        return out;
    }

    Tensor mean(const Tensor& x) {
        double acc = 0.0;
        for (double v : x.values()) acc += v;
        const double inv = 1.0 / static_cast<double>(x.size());
        Tensor out = Tensor::scalar(acc * inv);
        if (x.requires_grad()) {
            out.set_requires_grad(true);
            push([xn = x.shared_node(), on = out.shared_node(), inv] {
                if (on->grad.empty()) return;
                auto& gx = detail::ensure_grad(xn);
                const double g = on->grad[0] * inv;
                for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
            });
        }
        return out;
    }

    // [R x C] -> [C], mean over rows in ascending row order
    Tensor mean_rows(const Tensor& x) {
        if (x.ndim() != 2)
            throw dimension_error("mean_rows needs a 2-D tensor, got " + shape_str(x.shape()));
        const std::size_t r = x.dim(0), c = x.dim(1);
        Tensor out({c});
        const auto& xv = x.values();
        auto& ov = out.values();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) ov[j] += xv[i * c + j];
        const double inv = 1.0 / static_cast<double>(r);
        for (std::size_t j = 0; j < c; ++j) ov[j] *= inv;
        if (x.requires_grad()) {
            out.set_requires_grad(true);
            push([xn = x.shared_node(), on = out.shared_node(), r, c, inv] {
                if (on->grad.empty()) return;
                auto& gx = detail::ensure_grad(xn);
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += on->grad[j] * inv;
            });
        }
        return out;
    }

    // Elementwise mean of same-shape tensors. Per element the addends are
    // sorted before summation, so the result is exactly invariant to the
    // order of the inputs.
    Tensor mean_stack(std::span<const Tensor> xs) {
        if (xs.empty()) throw input_error("mean_stack of zero tensors");
        const Shape& s = xs[0].shape();
        bool needs = false;
        for (const auto& x : xs) {
            if (x.shape() != s)
                throw dimension_error("mean_stack shape mismatch: " + shape_str(x.shape()) +
                                      " vs " + shape_str(s));
            needs = needs || x.requires_grad();
        }
        const std::size_t n = xs.size();
        const double inv = 1.0 / static_cast<double>(n);
        Tensor out(s);
        auto& ov = out.values();
        std::vector<double> vals(n);
        for (std::size_t e = 0; e < ov.size(); ++e) {
            for (std::size_t i = 0; i < n; ++i) vals[i] = xs[i].values()[e];
            std::sort(vals.begin(), vals.end());
            double acc = 0.0;
            for (double v : vals) acc += v;
            ov[e] = acc * inv;
        }
        if (needs) {
            out.set_requires_grad(true);
            std::vector<detail::NodePtr> srcs;
            for (const auto& x : xs) srcs.push_back(x.shared_node());
            push([srcs, on = out.shared_node(), inv] {
                if (on->grad.empty()) return;
                for (const auto& src : srcs) {
                    if (!src->requires_grad && src->grad.empty()) continue;
                    auto& gs = detail::ensure_grad(src);
                    for (std::size_t e = 0; e < gs.size(); ++e) gs[e] += on->grad[e] * inv;
                }
            });
        }
        return out;
    }

private:
    enum class BinOp { add, sub, mul };

    // rhs broadcast modes: equal shape, scalar, or vector along the last axis
    Tensor binary(const Tensor& a, const Tensor& b, BinOp op) {
        enum class Bc { none, scalar, lastaxis };
        Bc bc;
        if (a.shape() == b.shape()) {
            bc = Bc::none;
        } else if (b.size() == 1) {
            bc = Bc::scalar;
        } else if (b.ndim() == 1 && a.ndim() >= 1 && b.dim(0) == a.dim(a.ndim() - 1)) {
            bc = Bc::lastaxis;
        } else {
            throw dimension_error("elementwise shape mismatch: " + shape_str(a.shape()) + " vs " +
                                  shape_str(b.shape()));
        }
        const std::size_t last = a.ndim() ? a.dim(a.ndim() - 1) : 1;
        const auto bindex = [bc, last](std::size_t i) -> std::size_t {
            switch (bc) {
                case Bc::none: return i;
                case Bc::scalar: return 0;
                default: return i % last;
            }
        };
        Tensor out(a.shape());
        const auto& av = a.values();
        const auto& bv = b.values();
        auto& ov = out.values();
        switch (op) {
            case BinOp::add:
                for (std::size_t i = 0; i < av.size(); ++i) ov[i] = av[i] + bv[bindex(i)];
                break;
            case BinOp::sub:
                for (std::size_t i = 0; i < av.size(); ++i) ov[i] = av[i] - bv[bindex(i)];
                break;
            case BinOp::mul:
                for (std::size_t i = 0; i < av.size(); ++i) ov[i] = av[i] * bv[bindex(i)];
                break;
        }
        if (a.requires_grad() || b.requires_grad()) {
            out.set_requires_grad(true);
            push([an = a.shared_node(), bn = b.shared_node(), on = out.shared_node(), op,
                  bindex] {
                if (on->grad.empty()) return;
                const auto& g = on->grad;
                if (an->requires_grad || !an->grad.empty()) {
                    auto& ga = detail::ensure_grad(an);
                    switch (op) {
                        case BinOp::add:
                        case BinOp::sub:
                            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
                            break;
                        case BinOp::mul:
                            for (std::size_t i = 0; i < ga.size(); ++i)
                                ga[i] += g[i] * bn->data[bindex(i)];
                            break;
                    }
                }
                if (bn->requires_grad || !bn->grad.empty()) {
                    auto& gb = detail::ensure_grad(bn);
                    switch (op) {
                        case BinOp::add:
                            for (std::size_t i = 0; i < g.size(); ++i) gb[bindex(i)] += g[i];
                            break;
                        case BinOp::sub:
                            for (std::size_t i = 0; i < g.size(); ++i) gb[bindex(i)] -= g[i];
                            break;
                        case BinOp::mul:
                            for (std::size_t i = 0; i < g.size(); ++i)
                                gb[bindex(i)] += g[i] * an->data[i];
                            break;
                    }
                }
            });
        }
        return out;
    }

    void push(std::function<void()> fn) { records_.push_back(std::move(fn)); }

    std::vector<std::function<void()>> records_;
};

}  // namespace voxgene
