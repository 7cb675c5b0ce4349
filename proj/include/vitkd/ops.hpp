#pragma once

#include <cstdint>
#include <span>

#include "vitkd/tensor.hpp"

// Differentiable tensor operations. Every op records its backward rule on
// the current thread's tape when an input requires grad and recording is
// enabled. Ops with a "rows" notion treat all leading dims as rows and the
// last dim as the feature axis.
namespace vitkd {

// a[m×k] · b[k×n]
Tensor matmul(const Tensor& a, const Tensor& b);
// x[...×in] · weight[in×out] + bias[out]; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
// a[g×m×k] · b[g×k×n], or a · bᵀ for b[g×n×k] when transpose_b.
Tensor batched_matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float factor);
// y's shape must equal a suffix of x's shape; y is repeated over the rest.
Tensor add_broadcast(const Tensor& x, const Tensor& y);

Tensor relu(const Tensor& x);
// tanh approximation.
Tensor gelu(const Tensor& x);

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-6f);

// Max-subtracted softmax over the last dim.
Tensor softmax_rows(const Tensor& x);
// x[g×q×s]. Slice g may only attend to keys j with allowed[(g / group_repeat)·s + j] != 0;
// disallowed entries come out as exact zeros. A slice without any allowed
// key throws DegenerateAttentionError.
Tensor masked_softmax_rows(const Tensor& x, std::span<const std::uint8_t> allowed,
                           std::size_t group_repeat);

// Same data, new shape of equal element count.
Tensor reshape(const Tensor& x, Shape shape);
// [...×m×n] -> [...×n×m]
Tensor transpose_last2(const Tensor& x);
// [b×t×(h·d)] -> [(b·h)×t×d]
Tensor split_heads(const Tensor& x, std::size_t heads);
// [(b·h)×t×d] -> [b×t×(h·d)]
Tensor merge_heads(const Tensor& x, std::size_t heads);

// x[b×n×d], token[d] -> [b×(n+1)×d] with the token at position 0.
Tensor prepend_token(const Tensor& x, const Tensor& token);
// x[b×t×d] -> x[:, start:start+count, :]
Tensor slice_tokens(const Tensor& x, std::size_t start, std::size_t count);
// x[...×d]; rows whose mask entry is nonzero are replaced by token[d].
Tensor replace_rows(const Tensor& x, std::span<const std::uint8_t> mask, const Tensor& token);
// Row-wise choice between two same-shaped tensors.
Tensor select_rows(std::span<const std::uint8_t> mask, const Tensor& if_set, const Tensor& otherwise);

// Zero padding 1, stride 1. x is [c_in×h×w] or [b×c_in×h×w];
// kernel [c_out×c_in×3×3]; bias [c_out] (may be undefined).
Tensor conv3x3(const Tensor& x, const Tensor& kernel, const Tensor& bias);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// Σ_rows w_r · Σ_j (pred − target)² accumulated in double. `target` is a
// constant: no gradient ever flows into it. Empty weights mean all ones.
Tensor squared_error(const Tensor& pred, const Tensor& target, std::span<const float> row_weights = {});

// Batch-mean cross entropy of logits[b×c] against integer labels with
// label smoothing: target = (1 − s)·onehot + s / c.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels, float smoothing = 0.0f);

// T² · batch-mean KL(softmax(teacher/T) ‖ softmax(student/T)). Teacher is a
// constant.
Tensor kd_kl_divergence(const Tensor& student_logits, const Tensor& teacher_logits, float temperature);

}  // namespace vitkd
