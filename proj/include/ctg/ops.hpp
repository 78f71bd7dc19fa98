#pragma once

#include <span>
#include <vector>

#include "ctg/tape.hpp"
#include "ctg/tensor.hpp"

// Differentiable operation set. Every op records itself on the tape of its
// first tape-attached input; remaining detached inputs are lifted as
// constants. Shape mismatches are rejected with a diagnostic naming the op
// and the offending shapes.
namespace ctg::autodiff::ops {

// argmax with ties broken toward the lowest index
std::size_t argmax(std::span<const double> v);

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
// scale by a scalar tensor; gradient also flows into the scalar
Tensor scale_by(const Tensor& a, const Tensor& s);
// min(a, cap); subgradient is 0 above the cap, 1 at and below it
Tensor clamp_max(const Tensor& a, double cap);
Tensor gelu(const Tensor& a);  // tanh approximation

// ---- linear algebra (2-D) ----
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, std::size_t lo, std::size_t hi);

// ---- rowwise ----
Tensor softmax(const Tensor& a);      // over the last axis; rowwise for 2-D
Tensor log_softmax(const Tensor& a);
// square score matrix; row i is a softmax over columns 0..i, zero above
Tensor causal_softmax(const Tensor& a);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);
Tensor row_max(const Tensor& a);   // T x n -> T x 1, grad to the (lowest) argmax
Tensor mean_rows(const Tensor& a); // T x n -> 1 x n

// ---- reductions ----
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);

// ---- model-specific ----
// gather rows of a table by fixed indices (embedding lookup for id inputs)
Tensor embed_rows(const Tensor& table, const std::vector<int>& ids);
// mean token-level negative log-likelihood of targets under rowwise logits
Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int>& targets);
// forward: exact one-hot at argmax (ties -> lowest index);
// backward: identity, the upstream gradient passes through unchanged
Tensor ste_one_hot(const Tensor& logits);
// CTRL-style adjustment: for masked entries, positive logits are divided by
// `penalty` and non-positive logits multiplied by it
Tensor repetition_penalty(const Tensor& logits, const std::vector<char>& mask,
                          double penalty);

}  // namespace ctg::autodiff::ops
