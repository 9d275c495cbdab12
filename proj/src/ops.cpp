#include "divae/ops.hpp"

#include <algorithm>
#include <cmath>

#include "divae/blas.hpp"
#include "divae/errors.hpp"

namespace divae {
namespace ops {

static void check_same_shape(const Var& a, const Var& b, const char* what) {
    if (!a.value().same_shape(b.value()))
        throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

static bool wants_grad(const std::shared_ptr<Node>& p) { return p->requires_grad; }

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Var add(const Var& a, const Var& b) {
    check_same_shape(a, b, "add");
    Tensor out = a.value().clone();
    out.add_(b.value());
    return make_op(std::move(out), {a, b}, [](Node& n) {
        for (int k = 0; k < 2; ++k)
            if (wants_grad(n.parents[k])) n.parents[k]->ensure_grad().add_(n.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    check_same_shape(a, b, "sub");
    Tensor out = a.value().clone();
    out.add_(b.value(), -1.0);
    return make_op(std::move(out), {a, b}, [](Node& n) {
        if (wants_grad(n.parents[0])) n.parents[0]->ensure_grad().add_(n.grad);
        if (wants_grad(n.parents[1])) n.parents[1]->ensure_grad().add_(n.grad, -1.0);
    });
}

Var mul(const Var& a, const Var& b) {
    check_same_shape(a, b, "mul");
    Tensor out(a.shape());
    const double* pa = a.value().data();
    const double* pb = b.value().data();
    double* po = out.data();
    for (int64_t i = 0; i < out.size(); ++i) po[i] = pa[i] * pb[i];
    Tensor av = a.value(), bv = b.value();
    return make_op(std::move(out), {a, b}, [av, bv](Node& n) {
        const double* g = n.grad.data();
        if (wants_grad(n.parents[0])) {
            double* da = n.parents[0]->ensure_grad().data();
            const double* pb = bv.data();
            for (int64_t i = 0; i < n.grad.size(); ++i) da[i] += g[i] * pb[i];
        }
        if (wants_grad(n.parents[1])) {
            double* db = n.parents[1]->ensure_grad().data();
            const double* pa = av.data();
            for (int64_t i = 0; i < n.grad.size(); ++i) db[i] += g[i] * pa[i];
        }
    });
}

Var div(const Var& a, const Var& b) {
    check_same_shape(a, b, "div");
    Tensor out(a.shape());
    const double* pa = a.value().data();
    const double* pb = b.value().data();
    double* po = out.data();
    for (int64_t i = 0; i < out.size(); ++i) po[i] = pa[i] / pb[i];
    Tensor av = a.value(), bv = b.value();
    return make_op(std::move(out), {a, b}, [av, bv](Node& n) {
        const double* g = n.grad.data();
        const double* pa = av.data();
        const double* pb = bv.data();
        if (wants_grad(n.parents[0])) {
            double* da = n.parents[0]->ensure_grad().data();
            for (int64_t i = 0; i < n.grad.size(); ++i) da[i] += g[i] / pb[i];
        }
        if (wants_grad(n.parents[1])) {
            double* db = n.parents[1]->ensure_grad().data();
            for (int64_t i = 0; i < n.grad.size(); ++i) db[i] -= g[i] * pa[i] / (pb[i] * pb[i]);
        }
    });
}

Var add_scalar(const Var& a, double s) {
    Tensor out = a.value().clone();
    double* po = out.data();
    for (int64_t i = 0; i < out.size(); ++i) po[i] += s;
    return make_op(std::move(out), {a}, [](Node& n) {
        if (wants_grad(n.parents[0])) n.parents[0]->ensure_grad().add_(n.grad);
    });
}

Var mul_scalar(const Var& a, double s) {
    Tensor out = a.value().clone();
    out.mul_(s);
    return make_op(std::move(out), {a}, [s](Node& n) {
        if (wants_grad(n.parents[0])) n.parents[0]->ensure_grad().add_(n.grad, s);
    });
}

Var square(const Var& a) { return mul(a, a); }

// generic unary op: out = f(x), dx += g * dfdx(x, out)
template <typename F, typename DF>
static Var unary(const Var& x, F f, DF dfdx) {
    Tensor out(x.shape());
    const double* px = x.value().data();
    double* po = out.data();
    for (int64_t i = 0; i < out.size(); ++i) po[i] = f(px[i]);
    Tensor xv = x.value(), ov = out;
    return make_op(std::move(out), {x}, [xv, ov, dfdx](Node& n) {
        if (!wants_grad(n.parents[0])) return;
        double* dx = n.parents[0]->ensure_grad().data();
        const double* g = n.grad.data();
        const double* px = xv.data();
        const double* po = ov.data();
        for (int64_t i = 0; i < n.grad.size(); ++i) dx[i] += g[i] * dfdx(px[i], po[i]);
    });
}

static double sigmoid_d(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Var silu(const Var& x) {
    return unary(
        x, [](double v) { return v * sigmoid_d(v); },
        [](double v, double) {
            double s = sigmoid_d(v);
            return s * (1.0 + v * (1.0 - s));
        });
}

Var sigmoid(const Var& x) {
    return unary(
        x, [](double v) { return sigmoid_d(v); },
        [](double, double y) { return y * (1.0 - y); });
}

Var gelu(const Var& x) {
    return unary(
        x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2)); },
        [](double v, double) {
            double phi = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
            double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * M_PI);
            return phi + v * pdf;
        });
}

Var exp(const Var& x) {
    return unary(
        x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var log(const Var& x) {
    return unary(
        x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Var sqrt(const Var& x) {
    return unary(
        x, [](double v) { return std::sqrt(v); },
        [](double, double y) { return 0.5 / y; });
}

Var erf(const Var& x) {
    return unary(
        x, [](double v) { return std::erf(v); },
        [](double v, double) { return 2.0 / std::sqrt(M_PI) * std::exp(-v * v); });
}

Var clamp_min(const Var& x, double lo) {
    return unary(
        x, [lo](double v) { return v < lo ? lo : v; },
        [lo](double v, double) { return v < lo ? 0.0 : 1.0; });
}

Var detach(const Var& x) { return Var::constant(x.value()); }

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

Var sum_all(const Var& x) {
    Tensor out({1});
    double s = 0.0;
    const double* px = x.value().data();
    for (int64_t i = 0; i < x.size(); ++i) s += px[i];
    out.at(0) = s;
    return make_op(std::move(out), {x}, [](Node& n) {
        if (!wants_grad(n.parents[0])) return;
        double g = n.grad.at(0);
        double* dx = n.parents[0]->ensure_grad().data();
        int64_t m = n.parents[0]->value.size();
        for (int64_t i = 0; i < m; ++i) dx[i] += g;
    });
}

Var mean_all(const Var& x) {
    return mul_scalar(sum_all(x), 1.0 / static_cast<double>(x.size()));
}

// ---------------------------------------------------------------------------
// structure
// ---------------------------------------------------------------------------

Var reshape(const Var& x, Shape shape) {
    Tensor out = x.value().reshaped(std::move(shape));
    Shape orig = x.shape();
    return make_op(std::move(out), {x}, [orig](Node& n) {
        if (!wants_grad(n.parents[0])) return;
        n.parents[0]->ensure_grad().add_(n.grad.reshaped(orig));
    });
}

Var concat_channels(const Var& a, const Var& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() != 4 || sb.size() != 4 || sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3])
        throw ShapeError("concat_channels: incompatible shapes " + shape_str(sa) + " and " +
                         shape_str(sb));
    int64_t n = sa[0], ca = sa[1], cb = sb[1], hw = sa[2] * sa[3];
    Tensor out({n, ca + cb, sa[2], sa[3]});
    const double* pa = a.value().data();
    const double* pb = b.value().data();
    double* po = out.data();
    for (int64_t i = 0; i < n; ++i) {
        std::copy(pa + i * ca * hw, pa + (i + 1) * ca * hw, po + i * (ca + cb) * hw);
        std::copy(pb + i * cb * hw, pb + (i + 1) * cb * hw, po + i * (ca + cb) * hw + ca * hw);
    }
    return make_op(std::move(out), {a, b}, [n, ca, cb, hw](Node& nd) {
        const double* g = nd.grad.data();
        if (wants_grad(nd.parents[0])) {
            double* da = nd.parents[0]->ensure_grad().data();
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < ca * hw; ++j) da[i * ca * hw + j] += g[i * (ca + cb) * hw + j];
        }
        if (wants_grad(nd.parents[1])) {
            double* db = nd.parents[1]->ensure_grad().data();
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < cb * hw; ++j)
                    db[i * cb * hw + j] += g[i * (ca + cb) * hw + ca * hw + j];
        }
    });
}

Var slice_channels(const Var& x, int64_t c0, int64_t c1) {
    const Shape& s = x.shape();
    if (s.size() != 4 || c0 < 0 || c1 > s[1] || c0 >= c1)
        throw ShapeError("slice_channels: bad slice");
    int64_t n = s[0], c = s[1], hw = s[2] * s[3], cs = c1 - c0;
    Tensor out({n, cs, s[2], s[3]});
    const double* px = x.value().data();
    double* po = out.data();
    for (int64_t i = 0; i < n; ++i)
        std::copy(px + (i * c + c0) * hw, px + (i * c + c1) * hw, po + i * cs * hw);
    return make_op(std::move(out), {x}, [n, c, c0, cs, hw](Node& nd) {
        if (!wants_grad(nd.parents[0])) return;
        double* dx = nd.parents[0]->ensure_grad().data();
        const double* g = nd.grad.data();
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < cs * hw; ++j) dx[(i * c + c0) * hw + j] += g[i * cs * hw + j];
    });
}

Var gather_batch(const Var& x, const std::vector<int>& rows) {
    const Shape& s = x.shape();
    if (s.empty()) throw ShapeError("gather_batch: scalar input");
    int64_t stride = x.size() / s[0];
    Shape os = s;
    os[0] = static_cast<int64_t>(rows.size());
    Tensor out(os);
    const double* px = x.value().data();
    double* po = out.data();
    for (size_t r = 0; r < rows.size(); ++r) {
        if (rows[r] < 0 || rows[r] >= s[0]) throw IndexError("gather_batch: row out of range");
        std::copy(px + rows[r] * stride, px + (rows[r] + 1) * stride,
                  po + static_cast<int64_t>(r) * stride);
    }
    auto rows_copy = rows;
    return make_op(std::move(out), {x}, [rows_copy, stride](Node& nd) {
        if (!wants_grad(nd.parents[0])) return;
        double* dx = nd.parents[0]->ensure_grad().data();
        const double* g = nd.grad.data();
        for (size_t r = 0; r < rows_copy.size(); ++r)
            for (int64_t j = 0; j < stride; ++j)
                dx[rows_copy[r] * stride + j] += g[static_cast<int64_t>(r) * stride + j];
    });
}

Var nchw_to_tokens(const Var& x) {
    const Shape& s = x.shape();
    if (s.size() != 4) throw ShapeError("nchw_to_tokens: expected 4-d input");
    int64_t n = s[0], c = s[1], hw = s[2] * s[3];
    Tensor out({n, hw, c});
    const double* px = x.value().data();
    double* po = out.data();
    for (int64_t i = 0; i < n; ++i)
        for (int64_t ch = 0; ch < c; ++ch)
            for (int64_t p = 0; p < hw; ++p)
                po[(i * hw + p) * c + ch] = px[(i * c + ch) * hw + p];
    return make_op(std::move(out), {x}, [n, c, hw](Node& nd) {
        if (!wants_grad(nd.parents[0])) return;
        double* dx = nd.parents[0]->ensure_grad().data();
        const double* g = nd.grad.data();
        for (int64_t i = 0; i < n; ++i)
            for (int64_t ch = 0; ch < c; ++ch)
                for (int64_t p = 0; p < hw; ++p)
                    dx[(i * c + ch) * hw + p] += g[(i * hw + p) * c + ch];
    });
}

Var tokens_to_nchw(const Var& x, int64_t h, int64_t w) {
    const Shape& s = x.shape();
    if (s.size() != 3 || s[1] != h * w) throw ShapeError("tokens_to_nchw: bad token count");
    int64_t n = s[0], c = s[2], hw = h * w;
    Tensor out({n, c, h, w});
    const double* px = x.value().data();
    double* po = out.data();
    for (int64_t i = 0; i < n; ++i)
        for (int64_t p = 0; p < hw; ++p)
            for (int64_t ch = 0; ch < c; ++ch)
                po[(i * c + ch) * hw + p] = px[(i * hw + p) * c + ch];
    return make_op(std::move(out), {x}, [n, c, hw](Node& nd) {
        if (!wants_grad(nd.parents[0])) return;
        double* dx = nd.parents[0]->ensure_grad().data();
        const double* g = nd.grad.data();
        for (int64_t i = 0; i < n; ++i)
            for (int64_t p = 0; p < hw; ++p)
                for (int64_t ch = 0; ch < c; ++ch)
                    dx[(i * hw + p) * c + ch] += g[(i * c + ch) * hw + p];
    });
}

Var nearest_resize(const Var& x, int64_t out_h, int64_t out_w) {
    const Shape& s = x.shape();
    if (s.size() != 4) throw ShapeError("nearest_resize: expected 4-d input");
    int64_t n = s[0], c = s[1], ih = s[2], iw = s[3];
    if (out_h <= 0 || out_w <= 0) throw ShapeError("nearest_resize: bad target size");
    Tensor out({n, c, out_h, out_w});
    const double* px = x.value().data();
    double* po = out.data();
    for (int64_t i = 0; i < n * c; ++i)
        for (int64_t oy = 0; oy < out_h; ++oy) {
            int64_t sy = oy * ih / out_h;
            for (int64_t ox = 0; ox < out_w; ++ox) {
                int64_t sx = ox * iw / out_w;
                po[(i * out_h + oy) * out_w + ox] = px[(i * ih + sy) * iw + sx];
            }
        }
    return make_op(std::move(out), {x}, [n, c, ih, iw, out_h, out_w](Node& nd) {
        if (!wants_grad(nd.parents[0])) return;
        double* dx = nd.parents[0]->ensure_grad().data();
        const double* g = nd.grad.data();
        for (int64_t i = 0; i < n * c; ++i)
            for (int64_t oy = 0; oy < out_h; ++oy) {
                int64_t sy = oy * ih / out_h;
                for (int64_t ox = 0; ox < out_w; ++ox) {
                    int64_t sx = ox * iw / out_w;
                    dx[(i * ih + sy) * iw + sx] += g[(i * out_h + oy) * out_w + ox];
                }
            }
    });
}

Var affine_per_sample(const Var& x, const std::vector<double>& a, const std::vector<double>& b) {
    const Shape& s = x.shape();
    if (s.empty() || s[0] != static_cast<int64_t>(a.size()) ||
        (!b.empty() && b.size() != a.size()))
        throw ShapeError("affine_per_sample: coefficient count must match batch");
    int64_t stride = x.size() / s[0];
    Tensor out(s);
    const double* px = x.value().data();
    double* po = out.data();
    for (int64_t i = 0; i < s[0]; ++i) {
        double bi = b.empty() ? 0.0 : b[static_cast<size_t>(i)];
        for (int64_t j = 0; j < stride; ++j)
            po[i * stride + j] = a[static_cast<size_t>(i)] * px[i * stride + j] + bi;
    }
    auto ac = a;
    return make_op(std::move(out), {x}, [ac, stride](Node& nd) {
        if (!wants_grad(nd.parents[0])) return;
        double* dx = nd.parents[0]->ensure_grad().data();
        const double* g = nd.grad.data();
        for (size_t i = 0; i < ac.size(); ++i)
            for (int64_t j = 0; j < stride; ++j)
                dx[static_cast<int64_t>(i) * stride + j] += ac[i] * g[static_cast<int64_t>(i) * stride + j];
    });
}

// ---------------------------------------------------------------------------
// conv2d (im2col + gemm)
// ---------------------------------------------------------------------------

static void im2col(const double* x, int64_t c, int64_t h, int64_t w, int64_t kh, int64_t kw,
                   int stride, int pad, int64_t oh, int64_t ow, double* col) {
    // col is [c*kh*kw, oh*ow]
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t ki = 0; ki < kh; ++ki)
            for (int64_t kj = 0; kj < kw; ++kj) {
                double* row = col + ((ch * kh + ki) * kw + kj) * oh * ow;
                for (int64_t oy = 0; oy < oh; ++oy) {
                    int64_t iy = oy * stride - pad + ki;
                    if (iy < 0 || iy >= h) {
                        std::fill(row + oy * ow, row + (oy + 1) * ow, 0.0);
                        continue;
                    }
                    for (int64_t ox = 0; ox < ow; ++ox) {
                        int64_t ix = ox * stride - pad + kj;
                        row[oy * ow + ox] = (ix < 0 || ix >= w) ? 0.0 : x[(ch * h + iy) * w + ix];
                    }
                }
            }
}

static void col2im(const double* col, int64_t c, int64_t h, int64_t w, int64_t kh, int64_t kw,
                   int stride, int pad, int64_t oh, int64_t ow, double* x) {
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t ki = 0; ki < kh; ++ki)
            for (int64_t kj = 0; kj < kw; ++kj) {
                const double* row = col + ((ch * kh + ki) * kw + kj) * oh * ow;
                for (int64_t oy = 0; oy < oh; ++oy) {
                    int64_t iy = oy * stride - pad + ki;
                    if (iy < 0 || iy >= h) continue;
                    for (int64_t ox = 0; ox < ow; ++ox) {
                        int64_t ix = ox * stride - pad + kj;
                        if (ix < 0 || ix >= w) continue;
                        x[(ch * h + iy) * w + ix] += row[oy * ow + ox];
                    }
                }
            }
}

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    const Shape& xs = x.shape();
    const Shape& ws = w.shape();
    if (xs.size() != 4 || ws.size() != 4)
        throw ShapeError("conv2d: expected 4-d input and weight");
    if (xs[1] != ws[1])
        throw ShapeError("conv2d: input channels " + std::to_string(xs[1]) +
                         " != weight channels " + std::to_string(ws[1]));
    int64_t n = xs[0], cin = xs[1], h = xs[2], wdt = xs[3];
    int64_t cout = ws[0], kh = ws[2], kw = ws[3];
    int64_t oh = (h + 2 * pad - kh) / stride + 1;
    int64_t ow = (wdt + 2 * pad - kw) / stride + 1;
    if (oh <= 0 || ow <= 0) throw ShapeError("conv2d: output would be empty");
    if (b.defined() && (b.shape().size() != 1 || b.dim(0) != cout))
        throw ShapeError("conv2d: bias shape mismatch");

    int64_t k = cin * kh * kw, op = oh * ow;
    Tensor out({n, cout, oh, ow});
    std::vector<double> col(static_cast<size_t>(k * op));
    const double* px = x.value().data();
    const double* pw = w.value().data();
    double* po = out.data();
    for (int64_t i = 0; i < n; ++i) {
        im2col(px + i * cin * h * wdt, cin, h, wdt, kh, kw, stride, pad, oh, ow, col.data());
        matmul(false, false, cout, op, k, pw, col.data(), po + i * cout * op);
        if (b.defined()) {
            const double* pb = b.value().data();
            for (int64_t ch = 0; ch < cout; ++ch) {
                double bias = pb[ch];
                double* dst = po + (i * cout + ch) * op;
                for (int64_t j = 0; j < op; ++j) dst[j] += bias;
            }
        }
    }

    bool has_bias = b.defined();
    std::vector<Var> parents = has_bias ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
    Tensor xv = x.value(), wv = w.value();
    auto bw = [=](Node& nd) {
        const double* g = nd.grad.data();
        std::vector<double> colbuf(static_cast<size_t>(k * op));
        bool need_dx = wants_grad(nd.parents[0]);
        bool need_dw = wants_grad(nd.parents[1]);
        bool need_db = has_bias && wants_grad(nd.parents[2]);
        double* dx = need_dx ? nd.parents[0]->ensure_grad().data() : nullptr;
        double* dw = need_dw ? nd.parents[1]->ensure_grad().data() : nullptr;
        double* db = need_db ? nd.parents[2]->ensure_grad().data() : nullptr;
        std::vector<double> dcol(need_dx ? static_cast<size_t>(k * op) : 0);
        const double* pxl = xv.data();
        const double* pwl = wv.data();
        for (int64_t i = 0; i < n; ++i) {
            const double* gi = g + i * cout * op;
            if (need_dw) {
                im2col(pxl + i * cin * h * wdt, cin, h, wdt, kh, kw, stride, pad, oh, ow,
                       colbuf.data());
                // dW += gi [cout,op] * col^T [op,k]
                matmul(false, true, cout, k, op, gi, colbuf.data(), dw, 1.0, 1.0);
            }
            if (need_db) {
                for (int64_t ch = 0; ch < cout; ++ch) {
                    double s = 0.0;
                    const double* src = gi + ch * op;
                    for (int64_t j = 0; j < op; ++j) s += src[j];
                    db[ch] += s;
                }
            }
            if (need_dx) {
                // dcol = W^T [k,cout] * gi [cout,op]
                matmul(true, false, k, op, cout, pwl, gi, dcol.data());
                col2im(dcol.data(), cin, h, wdt, kh, kw, stride, pad, oh, ow,
                       dx + i * cin * h * wdt);
            }
        }
    };
    return make_op(std::move(out), std::move(parents), std::move(bw));
}

// ---------------------------------------------------------------------------
// linear / embedding
// ---------------------------------------------------------------------------

Var linear_rows(const Var& x, const Var& w, const Var& b) {
    const Shape& xs = x.shape();
    const Shape& ws = w.shape();
    if (xs.size() != 2 || ws.size() != 2 || xs[1] != ws[0])
        throw ShapeError("linear_rows: [N,K]x[K,F] expected, got " + shape_str(xs) + " x " +
                         shape_str(ws));
    int64_t n = xs[0], k = xs[1], f = ws[1];
    if (b.defined() && (b.shape().size() != 1 || b.dim(0) != f))
        throw ShapeError("linear_rows: bias shape mismatch");
    Tensor out({n, f});
    matmul(false, false, n, f, k, x.value().data(), w.value().data(), out.data());
    if (b.defined()) {
        const double* pb = b.value().data();
        double* po = out.data();
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < f; ++j) po[i * f + j] += pb[j];
    }
    bool has_bias = b.defined();
    std::vector<Var> parents = has_bias ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
    Tensor xv = x.value(), wv = w.value();
    return make_op(std::move(out), std::move(parents), [=](Node& nd) {
        const double* g = nd.grad.data();
        if (wants_grad(nd.parents[0]))
            matmul(false, true, n, k, f, g, wv.data(), nd.parents[0]->ensure_grad().data(), 1.0,
                   1.0);
        if (wants_grad(nd.parents[1]))
            matmul(true, false, k, f, n, xv.data(), g, nd.parents[1]->ensure_grad().data(), 1.0,
                   1.0);
        if (has_bias && wants_grad(nd.parents[2])) {
            double* db = nd.parents[2]->ensure_grad().data();
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < f; ++j) db[j] += g[i * f + j];
        }
    });
}

Var embedding(const Var& table, const std::vector<int>& ids) {
    const Shape& ts = table.shape();
    if (ts.size() != 2) throw ShapeError("embedding: table must be [V,D]");
    int64_t v = ts[0], d = ts[1];
    int64_t n = static_cast<int64_t>(ids.size());
    Tensor out({n, d});
    const double* pt = table.value().data();
    double* po = out.data();
    for (int64_t i = 0; i < n; ++i) {
        int id = ids[static_cast<size_t>(i)];
        if (id < 0 || id >= v)
            throw IndexError("embedding: id " + std::to_string(id) + " out of range [0," +
                             std::to_string(v) + ")");
        std::copy(pt + id * d, pt + (id + 1) * d, po + i * d);
    }
    auto ids_copy = ids;
    return make_op(std::move(out), {table}, [ids_copy, d](Node& nd) {
        if (!wants_grad(nd.parents[0])) return;
        double* dt = nd.parents[0]->ensure_grad().data();
        const double* g = nd.grad.data();
        for (size_t i = 0; i < ids_copy.size(); ++i)
            for (int64_t j = 0; j < d; ++j)
                dt[ids_copy[i] * d + j] += g[static_cast<int64_t>(i) * d + j];
    });
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

Var norm_all(const Var& x, double eps) {
    const Shape& s = x.shape();
    if (s.empty()) throw ShapeError("norm_all: scalar input");
    int64_t n = s[0], d = x.size() / s[0];
    Tensor out(s);
    std::vector<double> inv_std(static_cast<size_t>(n));
    const double* px = x.value().data();
    double* po = out.data();
    for (int64_t i = 0; i < n; ++i) {
        const double* xi = px + i * d;
        double mu = 0.0;
        for (int64_t j = 0; j < d; ++j) mu += xi[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (int64_t j = 0; j < d; ++j) var += (xi[j] - mu) * (xi[j] - mu);
        var /= static_cast<double>(d);
        double is = 1.0 / std::sqrt(var + eps);
        inv_std[static_cast<size_t>(i)] = is;
        for (int64_t j = 0; j < d; ++j) po[i * d + j] = (xi[j] - mu) * is;
    }
    Tensor ov = out;
    return make_op(std::move(out), {x}, [n, d, inv_std, ov](Node& nd) {
        if (!wants_grad(nd.parents[0])) return;
        double* dx = nd.parents[0]->ensure_grad().data();
        const double* g = nd.grad.data();
        const double* y = ov.data();
        for (int64_t i = 0; i < n; ++i) {
            const double* gi = g + i * d;
            const double* yi = y + i * d;
            double mg = 0.0, mgy = 0.0;
            for (int64_t j = 0; j < d; ++j) {
                mg += gi[j];
                mgy += gi[j] * yi[j];
            }
            mg /= static_cast<double>(d);
            mgy /= static_cast<double>(d);
            double is = inv_std[static_cast<size_t>(i)];
            for (int64_t j = 0; j < d; ++j) dx[i * d + j] += is * (gi[j] - mg - yi[j] * mgy);
        }
    });
}

Var layernorm_lastdim(const Var& x, const Var& gamma, const Var& beta, double eps) {
    const Shape& s = x.shape();
    if (s.empty()) throw ShapeError("layernorm_lastdim: scalar input");
    int64_t c = s.back(), rows = x.size() / c;
    if (gamma.size() != c || beta.size() != c)
        throw ShapeError("layernorm_lastdim: affine params must have last-dim size");
    Tensor xhat(s);
    std::vector<double> inv_std(static_cast<size_t>(rows));
    const double* px = x.value().data();
    double* ph = xhat.data();
    for (int64_t i = 0; i < rows; ++i) {
        const double* xi = px + i * c;
        double mu = 0.0;
        for (int64_t j = 0; j < c; ++j) mu += xi[j];
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (int64_t j = 0; j < c; ++j) var += (xi[j] - mu) * (xi[j] - mu);
        var /= static_cast<double>(c);
        double is = 1.0 / std::sqrt(var + eps);
        inv_std[static_cast<size_t>(i)] = is;
        for (int64_t j = 0; j < c; ++j) ph[i * c + j] = (xi[j] - mu) * is;
    }
    Tensor out(s);
    const double* pg = gamma.value().data();
    const double* pb = beta.value().data();
    double* po = out.data();
    for (int64_t i = 0; i < rows; ++i)
        for (int64_t j = 0; j < c; ++j) po[i * c + j] = ph[i * c + j] * pg[j] + pb[j];
    Tensor gv = gamma.value();
    return make_op(std::move(out), {x, gamma, beta}, [rows, c, inv_std, xhat, gv](Node& nd) {
        const double* g = nd.grad.data();
        const double* xh = xhat.data();
        const double* pg = gv.data();
        if (wants_grad(nd.parents[1])) {
            double* dgm = nd.parents[1]->ensure_grad().data();
            for (int64_t i = 0; i < rows; ++i)
                for (int64_t j = 0; j < c; ++j) dgm[j] += g[i * c + j] * xh[i * c + j];
        }
        if (wants_grad(nd.parents[2])) {
            double* dbt = nd.parents[2]->ensure_grad().data();
            for (int64_t i = 0; i < rows; ++i)
                for (int64_t j = 0; j < c; ++j) dbt[j] += g[i * c + j];
        }
        if (wants_grad(nd.parents[0])) {
            double* dx = nd.parents[0]->ensure_grad().data();
            for (int64_t i = 0; i < rows; ++i) {
                double mg = 0.0, mgy = 0.0;
                for (int64_t j = 0; j < c; ++j) {
                    double gh = g[i * c + j] * pg[j];
                    mg += gh;
                    mgy += gh * xh[i * c + j];
                }
                mg /= static_cast<double>(c);
                mgy /= static_cast<double>(c);
                double is = inv_std[static_cast<size_t>(i)];
                for (int64_t j = 0; j < c; ++j) {
                    double gh = g[i * c + j] * pg[j];
                    dx[i * c + j] += is * (gh - mg - xh[i * c + j] * mgy);
                }
            }
        }
    });
}

Var channel_affine(const Var& x, const Var& gamma, const Var& beta) {
    const Shape& s = x.shape();
    if (s.size() != 4) throw ShapeError("channel_affine: expected 4-d input");
    int64_t n = s[0], c = s[1], hw = s[2] * s[3];
    if (gamma.size() != c || beta.size() != c)
        throw ShapeError("channel_affine: param size must equal channel count");
    Tensor out(s);
    const double* px = x.value().data();
    const double* pg = gamma.value().data();
    const double* pb = beta.value().data();
    double* po = out.data();
    for (int64_t i = 0; i < n; ++i)
        for (int64_t ch = 0; ch < c; ++ch) {
            double gch = pg[ch], bch = pb[ch];
            const double* xi = px + (i * c + ch) * hw;
            double* oi = po + (i * c + ch) * hw;
            for (int64_t j = 0; j < hw; ++j) oi[j] = gch * xi[j] + bch;
        }
    Tensor xv = x.value(), gv = gamma.value();
    return make_op(std::move(out), {x, gamma, beta}, [n, c, hw, xv, gv](Node& nd) {
        const double* g = nd.grad.data();
        if (wants_grad(nd.parents[0])) {
            double* dx = nd.parents[0]->ensure_grad().data();
            const double* pg = gv.data();
            for (int64_t i = 0; i < n; ++i)
                for (int64_t ch = 0; ch < c; ++ch) {
                    double gch = pg[ch];
                    for (int64_t j = 0; j < hw; ++j)
                        dx[(i * c + ch) * hw + j] += gch * g[(i * c + ch) * hw + j];
                }
        }
        if (wants_grad(nd.parents[1])) {
            double* dgm = nd.parents[1]->ensure_grad().data();
            const double* px = xv.data();
            for (int64_t i = 0; i < n; ++i)
                for (int64_t ch = 0; ch < c; ++ch) {
                    double s2 = 0.0;
                    for (int64_t j = 0; j < hw; ++j)
                        s2 += g[(i * c + ch) * hw + j] * px[(i * c + ch) * hw + j];
                    dgm[ch] += s2;
                }
        }
        if (wants_grad(nd.parents[2])) {
            double* dbt = nd.parents[2]->ensure_grad().data();
            for (int64_t i = 0; i < n; ++i)
                for (int64_t ch = 0; ch < c; ++ch) {
                    double s2 = 0.0;
                    for (int64_t j = 0; j < hw; ++j) s2 += g[(i * c + ch) * hw + j];
                    dbt[ch] += s2;
                }
        }
    });
}

Var modulate_channels(const Var& x, const Var& scale, const Var& shift) {
    const Shape& s = x.shape();
    if (s.size() != 4) throw ShapeError("modulate_channels: expected 4-d input");
    int64_t n = s[0], c = s[1], hw = s[2] * s[3];
    if (scale.shape() != Shape{n, c} || shift.shape() != Shape{n, c})
        throw ShapeError("modulate_channels: scale/shift must be [N,C]");
    Tensor out(s);
    const double* px = x.value().data();
    const double* pa = scale.value().data();
    const double* pb = shift.value().data();
    double* po = out.data();
    for (int64_t i = 0; i < n; ++i)
        for (int64_t ch = 0; ch < c; ++ch) {
            double a = pa[i * c + ch], b = pb[i * c + ch];
            const double* xi = px + (i * c + ch) * hw;
            double* oi = po + (i * c + ch) * hw;
            for (int64_t j = 0; j < hw; ++j) oi[j] = a * xi[j] + b;
        }
    Tensor xv = x.value(), av = scale.value();
    return make_op(std::move(out), {x, scale, shift}, [n, c, hw, xv, av](Node& nd) {
        const double* g = nd.grad.data();
        if (wants_grad(nd.parents[0])) {
            double* dx = nd.parents[0]->ensure_grad().data();
            const double* pa = av.data();
            for (int64_t i = 0; i < n; ++i)
                for (int64_t ch = 0; ch < c; ++ch) {
                    double a = pa[i * c + ch];
                    for (int64_t j = 0; j < hw; ++j)
                        dx[(i * c + ch) * hw + j] += a * g[(i * c + ch) * hw + j];
                }
        }
        if (wants_grad(nd.parents[1])) {
            double* da = nd.parents[1]->ensure_grad().data();
            const double* px = xv.data();
            for (int64_t i = 0; i < n; ++i)
                for (int64_t ch = 0; ch < c; ++ch) {
                    double s2 = 0.0;
                    for (int64_t j = 0; j < hw; ++j)
                        s2 += g[(i * c + ch) * hw + j] * px[(i * c + ch) * hw + j];
                    da[i * c + ch] += s2;
                }
        }
        if (wants_grad(nd.parents[2])) {
            double* db = nd.parents[2]->ensure_grad().data();
            for (int64_t i = 0; i < n; ++i)
                for (int64_t ch = 0; ch < c; ++ch) {
                    double s2 = 0.0;
                    for (int64_t j = 0; j < hw; ++j) s2 += g[(i * c + ch) * hw + j];
                    db[i * c + ch] += s2;
                }
        }
    });
}

Var add_broadcast_rows(const Var& x, const Var& p) {
    const Shape& xs = x.shape();
    const Shape& ps = p.shape();
    if (xs.size() != 3 || ps.size() != 2 || xs[1] != ps[0] || xs[2] != ps[1])
        throw ShapeError("add_broadcast_rows: [N,T,C] + [T,C] expected");
    int64_t n = xs[0], tc = ps[0] * ps[1];
    Tensor out = x.value().clone();
    double* po = out.data();
    const double* pp = p.value().data();
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < tc; ++j) po[i * tc + j] += pp[j];
    return make_op(std::move(out), {x, p}, [n, tc](Node& nd) {
        const double* g = nd.grad.data();
        if (wants_grad(nd.parents[0])) nd.parents[0]->ensure_grad().add_(nd.grad);
        if (wants_grad(nd.parents[1])) {
            double* dp = nd.parents[1]->ensure_grad().data();
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < tc; ++j) dp[j] += g[i * tc + j];
        }
    });
}

// ---------------------------------------------------------------------------
// attention
// ---------------------------------------------------------------------------

Var multihead_attention(const Var& q, const Var& k, const Var& v, int heads, bool causal) {
    const Shape& qs = q.shape();
    const Shape& ks = k.shape();
    const Shape& vs = v.shape();
    if (qs.size() != 3 || ks.size() != 3 || vs.size() != 3)
        throw ShapeError("attention: expected [N,T,C] inputs");
    if (qs[0] != ks[0] || ks != vs || qs[2] != ks[2])
        throw ShapeError("attention: q/k/v shapes incompatible");
    int64_t n = qs[0], tq = qs[1], tk = ks[1], c = qs[2];
    if (c % heads != 0) throw ConfigError("attention: heads must divide channels");
    if (causal && tq != tk) throw ShapeError("attention: causal requires Tq == Tk");
    int64_t dk = c / heads;
    double scale = 1.0 / std::sqrt(static_cast<double>(dk));

    Tensor out({n, tq, c});
    // probabilities saved for backward: [n, heads, tq, tk]
    Tensor probs({n, static_cast<int64_t>(heads), tq, tk});
    std::vector<double> qh(static_cast<size_t>(tq * dk)), kh(static_cast<size_t>(tk * dk)),
        vh(static_cast<size_t>(tk * dk)), oh(static_cast<size_t>(tq * dk));
    const double* pq = q.value().data();
    const double* pk = k.value().data();
    const double* pv = v.value().data();
    double* po = out.data();
    double* pp = probs.data();

    auto pack = [](const double* src, double* dst, int64_t t, int64_t c_full, int64_t col0,
                   int64_t dk2) {
        for (int64_t i = 0; i < t; ++i)
            std::copy(src + i * c_full + col0, src + i * c_full + col0 + dk2, dst + i * dk2);
    };

    for (int64_t b = 0; b < n; ++b)
        for (int h = 0; h < heads; ++h) {
            int64_t col0 = static_cast<int64_t>(h) * dk;
            pack(pq + b * tq * c, qh.data(), tq, c, col0, dk);
            pack(pk + b * tk * c, kh.data(), tk, c, col0, dk);
            pack(pv + b * tk * c, vh.data(), tk, c, col0, dk);
            double* s = pp + ((b * heads + h) * tq) * tk;
            matmul(false, true, tq, tk, dk, qh.data(), kh.data(), s, scale);
            for (int64_t i = 0; i < tq; ++i) {
                double* row = s + i * tk;
                int64_t lim = causal ? i + 1 : tk;
                double mx = row[0];
                for (int64_t j = 1; j < lim; ++j) mx = std::max(mx, row[j]);
                double z = 0.0;
                for (int64_t j = 0; j < lim; ++j) {
                    row[j] = std::exp(row[j] - mx);
                    z += row[j];
                }
                for (int64_t j = 0; j < lim; ++j) row[j] /= z;
                for (int64_t j = lim; j < tk; ++j) row[j] = 0.0;
            }
            matmul(false, false, tq, dk, tk, s, vh.data(), oh.data());
            for (int64_t i = 0; i < tq; ++i)
                std::copy(oh.begin() + i * dk, oh.begin() + (i + 1) * dk,
                          po + (b * tq + i) * c + col0);
        }

    Tensor qv = q.value(), kv = k.value(), vv = v.value();
    int64_t heads64 = heads;
    return make_op(std::move(out), {q, k, v}, [=](Node& nd) {
        bool ndq = wants_grad(nd.parents[0]);
        bool ndk = wants_grad(nd.parents[1]);
        bool ndv = wants_grad(nd.parents[2]);
        if (!ndq && !ndk && !ndv) return;
        double* dq = ndq ? nd.parents[0]->ensure_grad().data() : nullptr;
        double* dkp = ndk ? nd.parents[1]->ensure_grad().data() : nullptr;
        double* dvp = ndv ? nd.parents[2]->ensure_grad().data() : nullptr;
        const double* g = nd.grad.data();
        const double* pp2 = probs.data();
        std::vector<double> qh2(static_cast<size_t>(tq * dk)), kh2(static_cast<size_t>(tk * dk)),
            vh2(static_cast<size_t>(tk * dk)), goh(static_cast<size_t>(tq * dk)),
            dp(static_cast<size_t>(tq * tk)), ds(static_cast<size_t>(tq * tk)),
            tmp(static_cast<size_t>(std::max(tq, tk) * dk));
        auto pack2 = [](const double* src, double* dst, int64_t t, int64_t c_full, int64_t col0,
                        int64_t dk2) {
            for (int64_t i = 0; i < t; ++i)
                std::copy(src + i * c_full + col0, src + i * c_full + col0 + dk2, dst + i * dk2);
        };
        auto unpack_add = [](const double* src, double* dst, int64_t t, int64_t c_full,
                             int64_t col0, int64_t dk2) {
            for (int64_t i = 0; i < t; ++i)
                for (int64_t j = 0; j < dk2; ++j) dst[i * c_full + col0 + j] += src[i * dk2 + j];
        };
        for (int64_t b = 0; b < n; ++b)
            for (int64_t h = 0; h < heads64; ++h) {
                int64_t col0 = h * dk;
                const double* s = pp2 + ((b * heads64 + h) * tq) * tk;
                pack2(g + b * tq * c, goh.data(), tq, c, col0, dk);
                pack2(kv.data() + b * tk * c, kh2.data(), tk, c, col0, dk);
                pack2(vv.data() + b * tk * c, vh2.data(), tk, c, col0, dk);
                pack2(qv.data() + b * tq * c, qh2.data(), tq, c, col0, dk);
                if (ndv) {
                    // dV = P^T * dO
                    matmul(true, false, tk, dk, tq, s, goh.data(), tmp.data());
                    unpack_add(tmp.data(), dvp + b * tk * c, tk, c, col0, dk);
                }
                // dP = dO * V^T
                matmul(false, true, tq, tk, dk, goh.data(), vh2.data(), dp.data());
                // dS = P o (dP - rowsum(dP o P))
                for (int64_t i = 0; i < tq; ++i) {
                    double dot = 0.0;
                    for (int64_t j = 0; j < tk; ++j) dot += dp[i * tk + j] * s[i * tk + j];
                    for (int64_t j = 0; j < tk; ++j)
                        ds[i * tk + j] = s[i * tk + j] * (dp[i * tk + j] - dot);
                }
                if (ndq) {
                    matmul(false, false, tq, dk, tk, ds.data(), kh2.data(), tmp.data(), scale);
                    unpack_add(tmp.data(), dq + b * tq * c, tq, c, col0, dk);
                }
                if (ndk) {
                    matmul(true, false, tk, dk, tq, ds.data(), qh2.data(), tmp.data(), scale);
                    unpack_add(tmp.data(), dkp + b * tk * c, tk, c, col0, dk);
                }
            }
    });
}

// ---------------------------------------------------------------------------
// cross entropy
// ---------------------------------------------------------------------------

Var cross_entropy_rows(const Var& logits, const std::vector<int>& targets) {
    const Shape& s = logits.shape();
    if (s.size() != 2) throw ShapeError("cross_entropy_rows: logits must be [N,V]");
    int64_t n = s[0], v = s[1];
    if (static_cast<int64_t>(targets.size()) != n)
        throw ShapeError("cross_entropy_rows: target count mismatch");
    Tensor out({1});
    Tensor softmax({n, v});
    const double* pl = logits.value().data();
    double* ps = softmax.data();
    double loss = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        int t = targets[static_cast<size_t>(i)];
        if (t < 0 || t >= v) throw IndexError("cross_entropy_rows: target out of range");
        const double* row = pl + i * v;
        double mx = row[0];
        for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int64_t j = 0; j < v; ++j) z += std::exp(row[j] - mx);
        double logz = std::log(z) + mx;
        loss += logz - row[t];
        for (int64_t j = 0; j < v; ++j) ps[i * v + j] = std::exp(row[j] - logz);
    }
    out.at(0) = loss / static_cast<double>(n);
    auto tcopy = targets;
    return make_op(std::move(out), {logits}, [n, v, softmax, tcopy](Node& nd) {
        if (!wants_grad(nd.parents[0])) return;
        double g = nd.grad.at(0) / static_cast<double>(n);
        double* dl = nd.parents[0]->ensure_grad().data();
        const double* ps = softmax.data();
        for (int64_t i = 0; i < n; ++i) {
            for (int64_t j = 0; j < v; ++j) dl[i * v + j] += g * ps[i * v + j];
            dl[i * v + tcopy[static_cast<size_t>(i)]] -= g;
        }
    });
}

}  // namespace ops
}  // namespace divae
