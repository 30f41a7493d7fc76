#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "m1lab/tensor.hpp"

namespace m1lab {

using TokenId = std::uint32_t;

// Range [begin, end) of key rows a query row may attend to.
struct KeySpan {
  std::uint32_t begin = 0;
  std::uint32_t end = 0;
};

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor silu(const Tensor& a);

// [m,k] x [k,n] -> [m,n]
Tensor matmul(const Tensor& a, const Tensor& b);

// Softmax over the last axis, stabilised by subtracting the row maximum.
Tensor softmax(const Tensor& x);

// gain * x / sqrt(mean(x^2) + eps) over the last axis.
Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps);

// (silu(x W_gate) * (x W_up)) W_down over the last axis of x.
Tensor swiglu_ffn(const Tensor& x, const Tensor& w_gate, const Tensor& w_up, const Tensor& w_down);

// Depthwise causal convolution along axis 0 with k-1 zeros of left padding:
//   y[i] = sum_j kernel[j] * x[i - k + 1 + j].
// x is [t, ...] and is treated as [t, d]; kernel is [k, d]. When sample_ids is
// given, taps that reach into a different sample read zero.
Tensor causal_conv1d(const Tensor& x, const Tensor& kernel,
                     std::span<const std::uint16_t> sample_ids = {});

// Rotary embedding on [t, heads, head_dim]; adjacent pairs (2i, 2i+1) rotate by
// pos * base^(-2i/head_dim) with pos = row + position_offset.
Tensor rope_apply(const Tensor& x, double base, std::size_t position_offset);
// Same, with one explicit position per row.
Tensor rope_apply(const Tensor& x, double base, std::span<const std::size_t> positions);

// Row gather from a [V, d] table.
Tensor embedding(const Tensor& table, std::span<const TokenId> ids);

// Scaled dot-product attention on [t, heads, head_dim] inputs. Query row i
// attends to key rows spans[i]; the score scale is 1/sqrt(head_dim).
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::span<const KeySpan> spans);

// Mean over rows of -log softmax(logits)[target].
Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets);

inline constexpr std::int32_t kIgnoreTarget = -1;

// Like cross_entropy, but rows whose target is kIgnoreTarget are skipped and
// the mean runs over the remaining rows. All-ignored input yields 0.
Tensor masked_cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets);

}  // namespace m1lab
