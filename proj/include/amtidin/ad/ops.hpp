#pragma once

#include <cstdint>
#include <vector>

#include "amtidin/ad/tape.hpp"

namespace amtidin::ad {

// ---- elementwise and linear ---------------------------------------------------

template <typename S>
Var<S> add(Var<S> a, Var<S> b);
template <typename S>
Var<S> sub(Var<S> a, Var<S> b);
template <typename S>
Var<S> mul(Var<S> a, Var<S> b);
template <typename S>
Var<S> scale(Var<S> a, S c);
// x (R x C) plus a column vector b (R) broadcast over columns.
template <typename S>
Var<S> add_bias(Var<S> x, Var<S> b);
template <typename S>
Var<S> matmul(Var<S> a, Var<S> b);
// W (out x in) times x (in x B) plus optional bias (out). Pass an invalid Var for no bias.
template <typename S>
Var<S> linear(Var<S> W, Var<S> x, Var<S> b);
// Column-wise concatenation of 2-D nodes with equal row counts.
template <typename S>
Var<S> concat(const std::vector<Var<S>>& parts);
template <typename S>
Var<S> slice_cols(Var<S> x, Eigen::Index start, Eigen::Index count);
// Scalar mean and sum over all entries.
template <typename S>
Var<S> mean(Var<S> a);
template <typename S>
Var<S> sum(Var<S> a);
// sum_k w_k * s_k over scalar nodes.
template <typename S>
Var<S> weighted_sum(const std::vector<Var<S>>& scalars, const std::vector<S>& weights);

// ---- layers -------------------------------------------------------------------

// x {C_in, B, L}, weight {C_out, C_in, K}, bias {C_out} (optional). Stride 1,
// zero padding p, cross-correlation. Output {C_out, B, L + 2p - K + 1}.
template <typename S>
Var<S> conv1d(Var<S> x, Var<S> weight, Var<S> bias, int padding);

template <typename S>
struct BatchNormState {
  Vec<S> running_mean;
  Vec<S> running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  explicit BatchNormState(int channels = 0)
      : running_mean(Vec<S>::Zero(channels)), running_var(Vec<S>::Ones(channels)) {}
};

// Per-channel normalization of x {C, B} or {C, B, L} over all B*L positions. Training
// mode uses batch statistics (biased variance) and updates the running statistics
// with the unbiased variance; requires B >= 2. Eval mode uses the running statistics.
template <typename S>
Var<S> batchnorm1d(Var<S> x, Var<S> gamma, Var<S> beta, BatchNormState<S>& state, bool training);

template <typename S>
Var<S> gelu(Var<S> x);
template <typename S>
Var<S> elu(Var<S> x, S alpha = S(1));
template <typename S>
Var<S> sigmoid(Var<S> x);

// Mean over columns of -log softmax(logits)[label]; logits is classes x B.
template <typename S>
Var<S> softmax_cross_entropy(Var<S> logits, const std::vector<int>& labels);

// Inverted dropout; identity when !training or p == 0.
template <typename S>
Var<S> dropout(Var<S> x, double p, bool training, std::uint64_t seed);

// {C, B, L} -> {C, B}, mean over L.
template <typename S>
Var<S> adaptive_avg_pool1d(Var<S> x);

// Identity forward, exact negation backward.
template <typename S>
Var<S> grad_reverse(Var<S> x);

template <typename S>
struct SpectralNormState {
  Vec<S> u;  // left singular vector estimate, persisted across calls
  Vec<S> v;
  S sigma = S(0);
  std::uint64_t seed = 0;
};

// W / sigma_hat with sigma_hat = u^T W v after `power_iters` power-iteration steps
// on the persisted state. u and v are constants for differentiation. Throws
// NumericError for a zero matrix.
template <typename S>
Var<S> spectral_normalize(Var<S> W, SpectralNormState<S>& state, int power_iters = 1);

// ---- non-differentiable helpers -----------------------------------------------

template <typename S>
Mat<S> softmax_columns(const Mat<S>& logits);
// Column argmax; ties resolve to the lowest index.
template <typename S>
std::vector<int> argmax_columns(const Mat<S>& logits);

}  // namespace amtidin::ad
