#pragma once

#include <vector>

#include "prat/tape.hpp"
#include "prat/tensor.hpp"

namespace prat::ops {

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
Tensor add_scalar(const Tensor& a, float s);
Tensor neg(const Tensor& a);

// x[B,...] + p[...] broadcast over the leading batch dimension only
Tensor add_broadcast_batch(const Tensor& x, const Tensor& p);

// ---- activations ----
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);  // tanh approximation
Tensor sigmoid(const Tensor& a);
Tensor tanh_act(const Tensor& a);
Tensor clamp(const Tensor& a, float lo, float hi);

// ---- reductions (double accumulation) ----
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor mse_mean(const Tensor& a, const Tensor& b);
Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int>& labels);

// ---- shape ----
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat_channels(const Tensor& a, const Tensor& b);   // N,C,H,W along C
Tensor slice_channels(const Tensor& x, int c0, int c1);

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);             // [M,K]x[K,N]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);  // [...,D]x[D,E]+bias
Tensor bmm(const Tensor& a, const Tensor& b);                // [B,M,K]x[B,K,N]
Tensor bmm_nt(const Tensor& a, const Tensor& b);             // [B,M,K]x[B,N,K]^T

// ---- softmax family (last dim) ----
Tensor softmax_lastdim(const Tensor& a);
Tensor log_softmax_lastdim(const Tensor& a);

// ---- convolution & spatial ----
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int padding);
Tensor avg_pool2d(const Tensor& x, int k);                   // stride == k
Tensor global_avg_pool(const Tensor& x);                     // [N,C,H,W] -> [N,C]
Tensor upsample_nearest(const Tensor& x, int factor);

// y[n,c,h,w] = a[c] * x[n,c,h,w] + b[c]; a and b are fixed constants
// (input normalization), gradients flow to x only.
Tensor channel_affine(const Tensor& x, const Tensor& a, const Tensor& b);

// ---- normalization ----
Tensor layer_norm_lastdim(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                          float eps = 1e-5f);
Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    Tensor& running_mean, Tensor& running_var, float momentum,
                    float eps, bool training);

// ---- tokens / patches ----
Tensor patch_extract(const Tensor& x, int P);                // [N,C,H,W] -> [N,T,C*P*P]
Tensor tokens_to_grid(const Tensor& t, int hp, int wp);      // [B,T,D] -> [B,D,hp,wp]
Tensor split_heads(const Tensor& x, int heads);              // [B,T,D] -> [B*h,T,D/h]
Tensor merge_heads(const Tensor& x, int heads);              // [B*h,T,dh] -> [B,T,dh*h]

struct AttentionOut {
  Tensor out;    // same shape as tokens
  Tensor probs;  // [B*heads, T, T] row-stochastic attention weights
};

// softmax(Q K^T / sqrt(d_head)) V with learned projections; tokens may be
// [T,D] or batched [B,T,D].
AttentionOut multi_head_attention(const Tensor& tokens, int heads, const Tensor& wq,
                                  const Tensor& bq, const Tensor& wk, const Tensor& bk,
                                  const Tensor& wv, const Tensor& bv, const Tensor& wo,
                                  const Tensor& bo);

}  // namespace prat::ops
