#pragma once

// Differentiable tensor operations. Every function records a backward closure
// when any input requires a gradient (see make_result). Layouts are row-major:
// images NCHW, token sequences [batch, tokens, features].

#include "wsrtl/autograd.hpp"

#include <vector>

namespace wsrtl::ops {

template <typename Scalar>
Var<Scalar> constant(Tensor<Scalar> value) {
  return Var<Scalar>(std::move(value), false);
}

// Elementwise arithmetic on equal shapes.
template <typename Scalar> Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar> Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar> Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar> Var<Scalar> scale(const Var<Scalar>& a, Scalar factor);
/// Elementwise max; the gradient goes to the larger input (first on ties).
template <typename Scalar> Var<Scalar> maximum(const Var<Scalar>& a, const Var<Scalar>& b);

template <typename Scalar> Var<Scalar> relu(const Var<Scalar>& a);
template <typename Scalar> Var<Scalar> leaky_relu(const Var<Scalar>& a, Scalar slope);
template <typename Scalar> Var<Scalar> sigmoid(const Var<Scalar>& a);

template <typename Scalar> Var<Scalar> reshape(const Var<Scalar>& a, Shape shape);
template <typename Scalar> Var<Scalar> sum(const Var<Scalar>& a);
template <typename Scalar> Var<Scalar> mean(const Var<Scalar>& a);

// Batch-dimension (dim 0) plumbing.
template <typename Scalar> Var<Scalar> concat0(const std::vector<Var<Scalar>>& parts);
template <typename Scalar> Var<Scalar> slice0(const Var<Scalar>& a, int begin, int end);
template <typename Scalar> Var<Scalar> select0(const Var<Scalar>& a, const std::vector<int>& rows);
/// [...] -> [count, ...], gradient summed over the copies.
template <typename Scalar> Var<Scalar> broadcast0(const Var<Scalar>& a, int count);

/// x[..., in] * W[out, in]^T + b[out]. Bias may be undefined.
template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias);
/// x[B, T, d], W[T, d], b[T] -> [B, T]; token t uses its own weight row.
template <typename Scalar>
Var<Scalar> per_token_linear(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias);
/// T tensors of shape [M, d] -> [M, T, d].
template <typename Scalar> Var<Scalar> stack1(const std::vector<Var<Scalar>>& tokens);
/// x[M, T, d] -> [M, d], row m taking token index[m].
template <typename Scalar> Var<Scalar> gather_tokens(const Var<Scalar>& x, const std::vector<int>& index);

/// Batched product: a[B, m, k] * b[B, k, n], or a * b^T when b is [B, n, k].
template <typename Scalar>
Var<Scalar> bmm(const Var<Scalar>& a, const Var<Scalar>& b, bool transpose_b = false);
template <typename Scalar> Var<Scalar> softmax_last(const Var<Scalar>& x);
template <typename Scalar>
Var<Scalar> layer_norm_last(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                            Scalar eps);
/// [B, T, heads*dh] -> [B*heads, T, dh].
template <typename Scalar> Var<Scalar> split_heads(const Var<Scalar>& x, int heads);
/// Inverse of split_heads.
template <typename Scalar> Var<Scalar> merge_heads(const Var<Scalar>& x, int heads);

/// x[N, C, H, W], weight[O, C, kh, kw], bias[O] (optional).
template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias, int stride,
                   int pad);
/// x[N, Cin, H, W], weight[Cin, Cout, kh, kw]; output (H-1)*stride - 2*pad + kh.
template <typename Scalar>
Var<Scalar> conv_transpose2d(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias,
                             int stride, int pad);
/// Training mode normalizes with batch statistics and updates the running
/// buffers in place; evaluation mode uses the buffers.
template <typename Scalar>
Var<Scalar> batch_norm2d(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                         Tensor<Scalar>& running_mean, Tensor<Scalar>& running_var, bool training,
                         Scalar momentum, Scalar eps);
template <typename Scalar>
Var<Scalar> max_pool2d(const Var<Scalar>& x, int kernel, int stride, int pad);
/// [N, C, H, W] -> [N, C].
template <typename Scalar> Var<Scalar> global_avg_pool(const Var<Scalar>& x);
/// Half-pixel-centered bilinear resize (align_corners = false).
template <typename Scalar> Var<Scalar> upsample_bilinear(const Var<Scalar>& x, int out_h, int out_w);

struct Window {
  int sample;
  int y0;
  int x0;
};
/// Crops fixed-size windows; each window must lie inside its source map.
template <typename Scalar>
Var<Scalar> crop_windows(const Var<Scalar>& x, const std::vector<Window>& windows, int height, int width);

// Loss reductions, all returning shape [1].

/// Mean binary cross-entropy of probabilities against (soft) targets over the
/// entries where mask != 0. An empty mask selects everything. Probabilities
/// are clipped to [eps, 1 - eps]; an all-masked input yields 0.
template <typename Scalar>
Var<Scalar> bce(const Var<Scalar>& probs, const Tensor<Scalar>& targets, const Tensor<Scalar>& mask,
                Scalar eps = Scalar(1e-7));
/// Mean absolute difference.
template <typename Scalar> Var<Scalar> l1_mean(const Var<Scalar>& a, const Var<Scalar>& b);
/// Mean squared difference against a fixed target.
template <typename Scalar> Var<Scalar> mse_mean(const Var<Scalar>& a, const Tensor<Scalar>& target);
/// mean(log(clip(p))).
template <typename Scalar> Var<Scalar> mean_log(const Var<Scalar>& p, Scalar eps = Scalar(1e-7));
/// mean(log(1 - clip(p))).
template <typename Scalar> Var<Scalar> mean_log1m(const Var<Scalar>& p, Scalar eps = Scalar(1e-7));

}  // namespace wsrtl::ops
