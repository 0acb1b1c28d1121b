#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "schedlab/autodiff/tape.hpp"
#include "schedlab/autodiff/tensor.hpp"
#include "schedlab/util/rng.hpp"

// Differentiable primitives. Every op computes its forward value eagerly,
// rejects non-finite results, and records a backward closure on the tape
// when any input requires a gradient. Matrices are row-major [rows, cols].
namespace schedlab::ad::ops {

// --- elementwise and structural ------------------------------------------

template <typename T> Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(Tape<T>& tape, const Tensor<T>& a, T factor);
/// x[n,m] + bias[m] broadcast over rows.
template <typename T> Tensor<T> add_row(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& bias);
template <typename T> Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& x, Shape shape);
template <typename T> Tensor<T> transpose(Tape<T>& tape, const Tensor<T>& x);
template <typename T>
Tensor<T> slice_rows(Tape<T>& tape, const Tensor<T>& x, std::size_t begin, std::size_t count);
template <typename T>
Tensor<T> slice_cols(Tape<T>& tape, const Tensor<T>& x, std::size_t begin, std::size_t count);
template <typename T> Tensor<T> concat_rows(Tape<T>& tape, const std::vector<Tensor<T>>& parts);
template <typename T> Tensor<T> concat_cols(Tape<T>& tape, const std::vector<Tensor<T>>& parts);
/// Embedding gather: out[i] = table[index[i]].
template <typename T>
Tensor<T> gather_rows(Tape<T>& tape, const Tensor<T>& table, std::span<const std::size_t> index);
/// out[i][j] = x[i][index[i * k + j]] for a row-major [n, k] index.
template <typename T>
Tensor<T> gather_per_row(Tape<T>& tape, const Tensor<T>& x, std::span<const std::size_t> index,
                         std::size_t k);
/// Copy of x[n,d] with the listed rows replaced by fill[d].
template <typename T>
Tensor<T> replace_rows(Tape<T>& tape, const Tensor<T>& x, std::span<const std::size_t> rows,
                       const Tensor<T>& fill);

// --- reductions ------------------------------------------------------------

template <typename T> Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x);
template <typename T> Tensor<T> mean(Tape<T>& tape, const Tensor<T>& x);
/// [n,d] -> [d]
template <typename T> Tensor<T> sum_rows(Tape<T>& tape, const Tensor<T>& x);
template <typename T> Tensor<T> mean_rows(Tape<T>& tape, const Tensor<T>& x);

// --- nonlinearities ------------------------------------------------------

template <typename T> Tensor<T> relu(Tape<T>& tape, const Tensor<T>& x);
/// Exact (erf) GELU.
template <typename T> Tensor<T> gelu(Tape<T>& tape, const Tensor<T>& x);
template <typename T> Tensor<T> exp(Tape<T>& tape, const Tensor<T>& x);
/// Natural log; inputs must be strictly positive.
template <typename T> Tensor<T> log(Tape<T>& tape, const Tensor<T>& x);
template <typename T> Tensor<T> softmax_rows(Tape<T>& tape, const Tensor<T>& x);
template <typename T>
Tensor<T> layer_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps = T(1e-5));
template <typename T>
Tensor<T> l2_normalize_rows(Tape<T>& tape, const Tensor<T>& x, T eps = T(1e-12));
/// [n,d] x [m,d] -> [n,m] of row cosines.
template <typename T>
Tensor<T> cosine_similarity(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b,
                            T eps = T(1e-8));
/// Shannon entropy (nats) of each row of a probability matrix.
template <typename T> Tensor<T> entropy_rows(Tape<T>& tape, const Tensor<T>& p);
/// Mean over rows of -log softmax(logits[i])[target[i]], restricted per row to
/// columns with keep[i * m + j] != 0 (empty keep = all columns). The target
/// column is always kept.
template <typename T>
Tensor<T> cross_entropy_rows(Tape<T>& tape, const Tensor<T>& logits,
                             std::span<const std::size_t> target,
                             std::span<const std::uint8_t> keep = {});
template <typename T>
Tensor<T> dropout(Tape<T>& tape, const Tensor<T>& x, double rate, Rng& rng);

// --- linear algebra ------------------------------------------------------

template <typename T> Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);
/// x[n,in] * w[in,out] + b[out]
template <typename T>
Tensor<T> linear(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

struct Conv1dGeometry {
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t pad_left = 0;
  std::size_t out_len = 0;

  /// "same" padding: out_len = ceil(in_len / stride).
  static Conv1dGeometry same(std::size_t in_len, std::size_t kernel, std::size_t stride);
};

/// x[c_in, t] with w[c_out, c_in, k] and b[c_out] -> [c_out, out_len].
/// Out-of-range taps read zero.
template <typename T>
Tensor<T> conv1d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 const Conv1dGeometry& geom);
/// Non-overlapping mean pooling along time of x[c, t]; the last window may be
/// partial, giving ceil(t / window) outputs.
template <typename T>
Tensor<T> avg_pool1d(Tape<T>& tape, const Tensor<T>& x, std::size_t window);

/// Scaled dot-product attention with `heads` column-blocks.
/// q[t,d], k[s,d], v[s,d] -> [t,d].
template <typename T>
Tensor<T> multi_head_attention(Tape<T>& tape, const Tensor<T>& q, const Tensor<T>& k,
                               const Tensor<T>& v, std::size_t heads);

// --- quantization ----------------------------------------------------------

template <typename T>
struct GumbelOutput {
  /// One-hot per group in the forward pass (soft gradients), [n, groups*entries].
  Tensor<T> codes;
  /// Noised, tempered soft assignment, [n, groups*entries].
  Tensor<T> soft;
  /// Argmax entry per (row, group), row-major [n, groups].
  std::vector<std::size_t> choice;
};

/// Straight-through Gumbel-softmax over `groups` blocks of `entries` logits.
/// With hard = false the forward value is the soft assignment itself.
/// A null rng disables the Gumbel noise.
template <typename T>
GumbelOutput<T> gumbel_softmax_st(Tape<T>& tape, const Tensor<T>& logits, std::size_t groups,
                                  std::size_t entries, double temperature, Rng* rng,
                                  bool hard = true);

/// Throws NonFiniteError naming `op` if any value is NaN or infinite.
template <typename T> void check_finite(const Tensor<T>& t, const char* op);

}  // namespace schedlab::ad::ops
