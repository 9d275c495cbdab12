#pragma once

#include <vector>

#include "divae/autodiff.hpp"

namespace divae {
namespace ops {

// ---- elementwise arithmetic (same shape unless noted) ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var add_scalar(const Var& a, double s);
Var mul_scalar(const Var& a, double s);
Var square(const Var& a);

Var silu(const Var& x);
Var sigmoid(const Var& x);
Var gelu(const Var& x);
Var exp(const Var& x);
Var log(const Var& x);
Var sqrt(const Var& x);
Var erf(const Var& x);
Var clamp_min(const Var& x, double lo);  // zero gradient where clamped

Var detach(const Var& x);

// ---- reductions ----
Var sum_all(const Var& x);
Var mean_all(const Var& x);

// ---- structure ----
Var reshape(const Var& x, Shape shape);
Var concat_channels(const Var& a, const Var& b);        // [N,Ca,H,W]+[N,Cb,H,W]
Var slice_channels(const Var& x, int64_t c0, int64_t c1);
Var gather_batch(const Var& x, const std::vector<int>& rows);
Var nchw_to_tokens(const Var& x);                       // [N,C,H,W] -> [N,H*W,C]
Var tokens_to_nchw(const Var& x, int64_t h, int64_t w); // inverse
Var nearest_resize(const Var& x, int64_t out_h, int64_t out_w);

// y[n,...] = a[n] * x[n,...] + b[n]; a and b are per-sample constants.
Var affine_per_sample(const Var& x, const std::vector<double>& a, const std::vector<double>& b);

// ---- neural net primitives ----
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
Var linear_rows(const Var& x, const Var& w, const Var& b);  // [N,K]x[K,F](+[F])
Var embedding(const Var& table, const std::vector<int>& ids);

Var norm_all(const Var& x, double eps = 1e-5);  // per-sample over all non-batch dims
Var layernorm_lastdim(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var channel_affine(const Var& x, const Var& gamma, const Var& beta);
Var modulate_channels(const Var& x, const Var& scale, const Var& shift);  // scale,shift [N,C]
Var add_broadcast_rows(const Var& x, const Var& p);  // [N,T,C] + [T,C]

// Multi-head scaled-dot-product attention. q: [N,Tq,C], k,v: [N,Tk,C].
// causal masks position i from attending to j > i (requires Tq == Tk).
Var multihead_attention(const Var& q, const Var& k, const Var& v, int heads, bool causal);

// mean over rows of (logsumexp(logits_row) - logits_row[target])
Var cross_entropy_rows(const Var& logits, const std::vector<int>& targets);

}  // namespace ops
}  // namespace divae
