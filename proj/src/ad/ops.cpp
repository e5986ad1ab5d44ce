#include "amtidin/ad/ops.hpp"

#include <unsupported/Eigen/SpecialFunctions>

#include <algorithm>
#include <cmath>
#include <memory>
#include <random>

namespace amtidin::ad {

namespace {

template <typename S>
void require_same(const char* op, Var<S> a, Var<S> b) {
  if (a.tape != b.tape) throw std::invalid_argument(std::string(op) + ": operands live on different tapes");
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

Shape mat_shape(Eigen::Index r, Eigen::Index c) { return {static_cast<int>(r), static_cast<int>(c)}; }

}  // namespace

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  require_same("add", a, b);
  Tape<S>& t = *a.tape;
  return t.push(a.value() + b.value(), a.shape(), {a.id, b.id}, [ia = a.id, ib = b.id](Tape<S>& tp, int self) {
    const auto& g = tp.node(self).grad;
    tp.accumulate(ia, g);
    tp.accumulate(ib, g);
  });
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
  require_same("sub", a, b);
  Tape<S>& t = *a.tape;
  return t.push(a.value() - b.value(), a.shape(), {a.id, b.id}, [ia = a.id, ib = b.id](Tape<S>& tp, int self) {
    const auto& g = tp.node(self).grad;
    tp.accumulate(ia, g);
    tp.accumulate(ib, -g);
  });
}

template <typename S>
Var<S> mul(Var<S> a, Var<S> b) {
  require_same("mul", a, b);
  Tape<S>& t = *a.tape;
  Mat<S> y = a.value().cwiseProduct(b.value());
  return t.push(std::move(y), a.shape(), {a.id, b.id}, [ia = a.id, ib = b.id](Tape<S>& tp, int self) {
    const auto& g = tp.node(self).grad;
    if (tp.requires_grad(ia)) tp.accumulate(ia, g.cwiseProduct(tp.node(ib).value));
    if (tp.requires_grad(ib)) tp.accumulate(ib, g.cwiseProduct(tp.node(ia).value));
  });
}

template <typename S>
Var<S> scale(Var<S> a, S c) {
  Tape<S>& t = *a.tape;
  return t.push(a.value() * c, a.shape(), {a.id},
                [ia = a.id, c](Tape<S>& tp, int self) { tp.accumulate(ia, tp.node(self).grad * c); });
}

template <typename S>
Var<S> add_bias(Var<S> x, Var<S> b) {
  if (b.cols() != 1 || b.rows() != x.rows())
    throw ShapeError("add_bias: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(b.shape()));
  Tape<S>& t = *x.tape;
  Mat<S> y = x.value();
  y.colwise() += b.value().col(0);
  return t.push(std::move(y), x.shape(), {x.id, b.id}, [ix = x.id, ib = b.id](Tape<S>& tp, int self) {
    const auto& g = tp.node(self).grad;
    tp.accumulate(ix, g);
    if (tp.requires_grad(ib)) tp.accumulate(ib, g.rowwise().sum());
  });
}

template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
  if (a.cols() != b.rows())
    throw ShapeError("matmul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tape<S>& t = *a.tape;
  Mat<S> y = a.value() * b.value();
  auto shape = mat_shape(y.rows(), y.cols());
  return t.push(std::move(y), std::move(shape), {a.id, b.id}, [ia = a.id, ib = b.id](Tape<S>& tp, int self) {
    const auto& g = tp.node(self).grad;
    if (tp.requires_grad(ia)) tp.grad_buffer(ia).noalias() += g * tp.node(ib).value.transpose();
    if (tp.requires_grad(ib)) tp.grad_buffer(ib).noalias() += tp.node(ia).value.transpose() * g;
  });
}

template <typename S>
Var<S> linear(Var<S> W, Var<S> x, Var<S> b) {
  if (W.cols() != x.rows())
    throw ShapeError("linear: weight " + shape_str(W.shape()) + " incompatible with input " + shape_str(x.shape()));
  if (b.valid() && (b.rows() != W.rows() || b.cols() != 1))
    throw ShapeError("linear: bias " + shape_str(b.shape()) + " incompatible with weight " + shape_str(W.shape()));
  Tape<S>& t = *x.tape;
  Mat<S> y(W.rows(), x.cols());
  y.noalias() = W.value() * x.value();
  if (b.valid()) y.colwise() += b.value().col(0);
  std::vector<int> parents{W.id, x.id};
  if (b.valid()) parents.push_back(b.id);
  auto shape = mat_shape(y.rows(), y.cols());
  return t.push(std::move(y), std::move(shape), std::move(parents),
                [iw = W.id, ix = x.id, ib = b.valid() ? b.id : -1](Tape<S>& tp, int self) {
                  const auto& g = tp.node(self).grad;
                  if (tp.requires_grad(iw)) tp.grad_buffer(iw).noalias() += g * tp.node(ix).value.transpose();
                  if (tp.requires_grad(ix)) tp.grad_buffer(ix).noalias() += tp.node(iw).value.transpose() * g;
                  if (ib >= 0 && tp.requires_grad(ib)) tp.accumulate(ib, g.rowwise().sum());
                });
}

template <typename S>
Var<S> concat(const std::vector<Var<S>>& parts) {
  if (parts.empty()) throw ShapeError("concat: no operands");
  Eigen::Index rows = parts[0].rows(), cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows)
      throw ShapeError("concat: shape mismatch " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
    cols += p.cols();
  }
  Mat<S> y(rows, cols);
  std::vector<int> ids;
  std::vector<Eigen::Index> offsets;
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    y.middleCols(off, p.cols()) = p.value();
    ids.push_back(p.id);
    offsets.push_back(off);
    off += p.cols();
  }
  Tape<S>& t = *parts[0].tape;
  return t.push(std::move(y), mat_shape(rows, cols), ids, [ids, offsets](Tape<S>& tp, int self) {
    const auto& g = tp.node(self).grad;
    for (std::size_t k = 0; k < ids.size(); ++k)
      tp.accumulate(ids[k], g.middleCols(offsets[k], tp.node(ids[k]).value.cols()));
  });
}

template <typename S>
Var<S> slice_cols(Var<S> x, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > x.cols())
    throw ShapeError("slice_cols: range [" + std::to_string(start) + "," + std::to_string(start + count) +
                     ") outside " + shape_str(x.shape()));
  Tape<S>& t = *x.tape;
  Mat<S> y = x.value().middleCols(start, count);
  return t.push(std::move(y), mat_shape(x.rows(), count), {x.id}, [ix = x.id, start, count](Tape<S>& tp, int self) {
    if (!tp.requires_grad(ix)) return;
    tp.grad_buffer(ix).middleCols(start, count) += tp.node(self).grad;
  });
}

template <typename S>
Var<S> mean(Var<S> a) {
  Tape<S>& t = *a.tape;
  const auto n = a.value().size();
  if (n == 0) throw ShapeError("mean: empty operand");
  Mat<S> y(1, 1);
  y(0, 0) = a.value().mean();
  return t.push(std::move(y), {1, 1}, {a.id}, [ia = a.id, n](Tape<S>& tp, int self) {
    const S g = tp.node(self).grad(0, 0) / static_cast<S>(n);
    tp.grad_buffer(ia).array() += g;
  });
}

template <typename S>
Var<S> sum(Var<S> a) {
  Tape<S>& t = *a.tape;
  Mat<S> y(1, 1);
  y(0, 0) = a.value().sum();
  return t.push(std::move(y), {1, 1}, {a.id}, [ia = a.id](Tape<S>& tp, int self) {
    const S g = tp.node(self).grad(0, 0);
    tp.grad_buffer(ia).array() += g;
  });
}

template <typename S>
Var<S> weighted_sum(const std::vector<Var<S>>& scalars, const std::vector<S>& weights) {
  if (scalars.empty() || scalars.size() != weights.size())
    throw ShapeError("weighted_sum: " + std::to_string(scalars.size()) + " terms vs " +
                     std::to_string(weights.size()) + " weights");
  Mat<S> y = Mat<S>::Zero(1, 1);
  std::vector<int> ids;
  for (std::size_t k = 0; k < scalars.size(); ++k) {
    y(0, 0) += weights[k] * scalars[k].item();
    ids.push_back(scalars[k].id);
  }
  Tape<S>& t = *scalars[0].tape;
  return t.push(std::move(y), {1, 1}, ids, [ids, weights](Tape<S>& tp, int self) {
    const S g = tp.node(self).grad(0, 0);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!tp.requires_grad(ids[k])) continue;
      tp.grad_buffer(ids[k])(0, 0) += g * weights[k];
    }
  });
}

// ---- conv1d -------------------------------------------------------------------

namespace {

struct ConvGeom {
  Eigen::Index cin, cout, k, b, l, lout, pad;
};

// Reorders a {C_out, C_in, K} weight (column c*K + j) to tap-major columns j*C_in + c.
template <typename S>
Mat<S> tap_major(const Mat<S>& w, const ConvGeom& g) {
  Mat<S> p(g.cout, g.k * g.cin);
  for (Eigen::Index c = 0; c < g.cin; ++c)
    for (Eigen::Index j = 0; j < g.k; ++j) p.col(j * g.cin + c) = w.col(c * g.k + j);
  return p;
}

// Valid output range [lo, hi) for tap j: input index l + j - pad inside [0, L).
inline void tap_range(const ConvGeom& g, Eigen::Index j, Eigen::Index& lo, Eigen::Index& hi) {
  lo = std::max<Eigen::Index>(0, g.pad - j);
  hi = std::min<Eigen::Index>(g.lout, g.l + g.pad - j);
}

template <typename S>
void im2col(const Mat<S>& x, const ConvGeom& g, Eigen::Index b0, Eigen::Index nb, Mat<S>& col) {
  col.setZero(g.k * g.cin, nb * g.lout);
  for (Eigen::Index b = 0; b < nb; ++b)
    for (Eigen::Index j = 0; j < g.k; ++j) {
      Eigen::Index lo, hi;
      tap_range(g, j, lo, hi);
      if (hi <= lo) continue;
      col.block(j * g.cin, b * g.lout + lo, g.cin, hi - lo) =
          x.block(0, (b0 + b) * g.l + lo + j - g.pad, g.cin, hi - lo);
    }
}

inline Eigen::Index conv_chunk(const ConvGeom& g) {
  constexpr Eigen::Index kMaxColEntries = Eigen::Index(1) << 22;
  const Eigen::Index per_sample = std::max<Eigen::Index>(1, g.k * g.cin * g.lout);
  return std::clamp<Eigen::Index>(kMaxColEntries / per_sample, 1, g.b);
}

}  // namespace

template <typename S>
Var<S> conv1d(Var<S> x, Var<S> weight, Var<S> bias, int padding) {
  const auto& xs = x.shape();
  const auto& ws = weight.shape();
  if (xs.size() != 3) throw ShapeError("conv1d: input must be {C,B,L}, got " + shape_str(xs));
  if (ws.size() != 3) throw ShapeError("conv1d: weight must be {C_out,C_in,K}, got " + shape_str(ws));
  if (ws[1] != xs[0]) throw ShapeError("conv1d: weight " + shape_str(ws) + " incompatible with input " + shape_str(xs));
  if (padding < 0) throw ShapeError("conv1d: negative padding");
  ConvGeom g{xs[0], ws[0], ws[2], xs[1], xs[2], xs[2] + 2 * padding - ws[2] + 1, padding};
  if (g.lout < 1) throw ShapeError("conv1d: kernel " + shape_str(ws) + " longer than padded input " + shape_str(xs));
  if (bias.valid() && (bias.rows() != g.cout || bias.cols() != 1))
    throw ShapeError("conv1d: bias " + shape_str(bias.shape()) + " incompatible with weight " + shape_str(ws));

  const Mat<S> wp = tap_major(weight.value(), g);
  const Eigen::Index chunk = conv_chunk(g);
  Mat<S> y(g.cout, g.b * g.lout);
  Mat<S> col;
  for (Eigen::Index b0 = 0; b0 < g.b; b0 += chunk) {
    const Eigen::Index nb = std::min(chunk, g.b - b0);
    im2col(x.value(), g, b0, nb, col);
    y.middleCols(b0 * g.lout, nb * g.lout).noalias() = wp * col;
  }
  if (bias.valid()) y.colwise() += bias.value().col(0);

  std::vector<int> parents{x.id, weight.id};
  if (bias.valid()) parents.push_back(bias.id);
  Shape out_shape{static_cast<int>(g.cout), static_cast<int>(g.b), static_cast<int>(g.lout)};
  return x.tape->push(
      std::move(y), std::move(out_shape), std::move(parents),
      [g, ix = x.id, iw = weight.id, ib = bias.valid() ? bias.id : -1](Tape<S>& tp, int self) {
        const Mat<S>& gy = tp.node(self).grad;
        const bool need_x = tp.requires_grad(ix), need_w = tp.requires_grad(iw);
        if (ib >= 0 && tp.requires_grad(ib)) tp.accumulate(ib, gy.rowwise().sum());
        if (!need_x && !need_w) return;
        const Mat<S> wp = tap_major(tp.node(iw).value, g);
        Mat<S> dwp;
        if (need_w) dwp = Mat<S>::Zero(g.cout, g.k * g.cin);
        Mat<S>* dx = need_x ? &tp.grad_buffer(ix) : nullptr;
        const Eigen::Index chunk = conv_chunk(g);
        Mat<S> col, dcol;
        for (Eigen::Index b0 = 0; b0 < g.b; b0 += chunk) {
          const Eigen::Index nb = std::min(chunk, g.b - b0);
          const auto gyc = gy.middleCols(b0 * g.lout, nb * g.lout);
          if (need_w) {
            im2col(tp.node(ix).value, g, b0, nb, col);
            dwp.noalias() += gyc * col.transpose();
          }
          if (need_x) {
            dcol.noalias() = wp.transpose() * gyc;
            for (Eigen::Index b = 0; b < nb; ++b)
              for (Eigen::Index j = 0; j < g.k; ++j) {
                Eigen::Index lo, hi;
                tap_range(g, j, lo, hi);
                if (hi <= lo) continue;
                dx->block(0, (b0 + b) * g.l + lo + j - g.pad, g.cin, hi - lo) +=
                    dcol.block(j * g.cin, b * g.lout + lo, g.cin, hi - lo);
              }
          }
        }
        if (need_w) {
          Mat<S>& dw = tp.grad_buffer(iw);
          for (Eigen::Index c = 0; c < g.cin; ++c)
            for (Eigen::Index j = 0; j < g.k; ++j) dw.col(c * g.k + j) += dwp.col(j * g.cin + c);
        }
      });
}

// ---- batchnorm ----------------------------------------------------------------

template <typename S>
Var<S> batchnorm1d(Var<S> x, Var<S> gamma, Var<S> beta, BatchNormState<S>& state, bool training) {
  const auto& xs = x.shape();
  if (xs.size() != 2 && xs.size() != 3) throw ShapeError("batchnorm1d: input must be {C,B} or {C,B,L}, got " + shape_str(xs));
  const Eigen::Index C = xs[0];
  if (gamma.rows() != C || beta.rows() != C || gamma.cols() != 1 || beta.cols() != 1 ||
      state.running_mean.size() != C || state.running_var.size() != C)
    throw ShapeError("batchnorm1d: affine/statistics size does not match input " + shape_str(xs));
  const Eigen::Index M = x.cols();
  const Mat<S>& X = x.value();

  auto xhat = std::make_shared<Mat<S>>();
  Vec<S> invstd(C);
  if (training) {
    if (xs[1] < 2) throw ShapeError("batchnorm1d: training mode needs batch >= 2, got " + shape_str(xs));
    const Vec<S> mu = X.rowwise().mean();
    *xhat = X.colwise() - mu;
    const Vec<S> var = xhat->array().square().rowwise().mean();
    invstd = (var.array() + static_cast<S>(state.eps)).rsqrt();
    xhat->array().colwise() *= invstd.array();
    const S m = static_cast<S>(state.momentum);
    const S unbias = static_cast<S>(M) / static_cast<S>(M - 1);
    state.running_mean = (S(1) - m) * state.running_mean + m * mu;
    state.running_var = (S(1) - m) * state.running_var + m * unbias * var;
  } else {
    invstd = (state.running_var.array() + static_cast<S>(state.eps)).rsqrt();
    *xhat = X.colwise() - state.running_mean;
    xhat->array().colwise() *= invstd.array();
  }
  Mat<S> y = xhat->array().colwise() * gamma.value().col(0).array();
  y.colwise() += beta.value().col(0);

  return x.tape->push(
      std::move(y), xs, {x.id, gamma.id, beta.id},
      [xhat, invstd, training, M, ix = x.id, ig = gamma.id, ib = beta.id](Tape<S>& tp, int self) {
        const Mat<S>& g = tp.node(self).grad;
        if (tp.requires_grad(ib)) tp.accumulate(ib, g.rowwise().sum());
        if (tp.requires_grad(ig)) tp.accumulate(ig, g.cwiseProduct(*xhat).rowwise().sum());
        if (!tp.requires_grad(ix)) return;
        const Vec<S> gam = tp.node(ig).value.col(0);
        Mat<S>& dx = tp.grad_buffer(ix);
        if (!training) {
          dx.array() += g.array().colwise() * (gam.array() * invstd.array());
          return;
        }
        // dx = invstd/M * (M*dxhat - sum(dxhat) - xhat * sum(dxhat * xhat)), dxhat = g * gamma
        const Vec<S> sg = g.rowwise().sum();
        const Vec<S> sgx = g.cwiseProduct(*xhat).rowwise().sum();
        const S invM = S(1) / static_cast<S>(M);
        const Vec<S> k = gam.array() * invstd.array();
        const Vec<S> a = (k.array() * sg.array() * invM);
        const Vec<S> c = (k.array() * sgx.array() * invM);
        dx.array() += (g.array().colwise() * k.array()).colwise() - a.array();
        dx.array() -= xhat->array().colwise() * c.array();
      });
}

// ---- activations --------------------------------------------------------------

template <typename S>
Var<S> gelu(Var<S> x) {
  const S r2 = static_cast<S>(M_SQRT1_2);
  Mat<S> y = (x.value().array() * S(0.5) * (S(1) + (x.value().array() * r2).erf())).matrix();
  return x.tape->push(std::move(y), x.shape(), {x.id}, [ix = x.id](Tape<S>& tp, int self) {
    const S r2 = static_cast<S>(M_SQRT1_2);
    const S inv_sqrt_2pi = static_cast<S>(0.3989422804014327);
    const auto& X = tp.node(ix).value.array();
    const auto& g = tp.node(self).grad.array();
    tp.grad_buffer(ix).array() +=
        g * (S(0.5) * (S(1) + (X * r2).erf()) + X * inv_sqrt_2pi * (S(-0.5) * X.square()).exp());
  });
}

template <typename S>
Var<S> elu(Var<S> x, S alpha) {
  Mat<S> y = (x.value().array() > S(0)).select(x.value().array(), alpha * (x.value().array().exp() - S(1))).matrix();
  return x.tape->push(std::move(y), x.shape(), {x.id}, [ix = x.id, alpha](Tape<S>& tp, int self) {
    const auto& X = tp.node(ix).value.array();
    const auto& g = tp.node(self).grad.array();
    tp.grad_buffer(ix).array() += g * (X > S(0)).select(Eigen::Array<S, Eigen::Dynamic, Eigen::Dynamic>::Ones(X.rows(), X.cols()), alpha * X.exp());
  });
}

template <typename S>
Var<S> sigmoid(Var<S> x) {
  Mat<S> y = (S(1) / (S(1) + (-x.value().array()).exp())).matrix();
  return x.tape->push(std::move(y), x.shape(), {x.id}, [ix = x.id](Tape<S>& tp, int self) {
    const auto& Y = tp.node(self).value.array();
    tp.grad_buffer(ix).array() += tp.node(self).grad.array() * Y * (S(1) - Y);
  });
}

template <typename S>
Mat<S> softmax_columns(const Mat<S>& logits) {
  Mat<S> p = logits.rowwise() - logits.colwise().maxCoeff();
  p = p.array().exp().matrix();
  p.array().rowwise() /= p.colwise().sum().array();
  return p;
}

template <typename S>
std::vector<int> argmax_columns(const Mat<S>& logits) {
  std::vector<int> out(static_cast<std::size_t>(logits.cols()));
  for (Eigen::Index b = 0; b < logits.cols(); ++b) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < logits.rows(); ++c)
      if (logits(c, b) > logits(best, b)) best = c;
    out[static_cast<std::size_t>(b)] = static_cast<int>(best);
  }
  return out;
}

template <typename S>
Var<S> softmax_cross_entropy(Var<S> logits, const std::vector<int>& labels) {
  const Mat<S>& Z = logits.value();
  const Eigen::Index C = Z.rows(), B = Z.cols();
  if (static_cast<Eigen::Index>(labels.size()) != B)
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                     shape_str(logits.shape()));
  if (B == 0) throw ShapeError("softmax_cross_entropy: empty batch");
  for (int y : labels)
    if (y < 0 || y >= C)
      throw ShapeError("softmax_cross_entropy: label " + std::to_string(y) + " outside " + std::to_string(C) +
                       " classes");
  const auto zmax = Z.colwise().maxCoeff();
  const Mat<S> shifted = Z.rowwise() - zmax;
  const auto lse = shifted.array().exp().colwise().sum().log();
  double total = 0.0;
  for (Eigen::Index b = 0; b < B; ++b) total += static_cast<double>(lse(b) - shifted(labels[b], b));
  Mat<S> y(1, 1);
  y(0, 0) = static_cast<S>(total / static_cast<double>(B));
  return logits.tape->push(std::move(y), {1, 1}, {logits.id}, [labels, iz = logits.id](Tape<S>& tp, int self) {
    const S g = tp.node(self).grad(0, 0);
    Mat<S> p = softmax_columns<S>(tp.node(iz).value);
    for (std::size_t b = 0; b < labels.size(); ++b) p(labels[b], static_cast<Eigen::Index>(b)) -= S(1);
    tp.grad_buffer(iz).noalias() += p * (g / static_cast<S>(labels.size()));
  });
}

template <typename S>
Var<S> dropout(Var<S> x, double p, bool training, std::uint64_t seed) {
  if (!(p >= 0.0 && p < 1.0)) throw std::invalid_argument("dropout: p must lie in [0,1)");
  if (!training || p == 0.0) {
    return x.tape->push(x.value(), x.shape(), {x.id},
                        [ix = x.id](Tape<S>& tp, int self) { tp.accumulate(ix, tp.node(self).grad); });
  }
  auto mask = std::make_shared<Mat<S>>(x.rows(), x.cols());
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution keep(1.0 - p);
  const S inv = static_cast<S>(1.0 / (1.0 - p));
  for (Eigen::Index k = 0; k < mask->size(); ++k) (*mask)(k) = keep(rng) ? inv : S(0);
  Mat<S> y = x.value().cwiseProduct(*mask);
  return x.tape->push(std::move(y), x.shape(), {x.id}, [mask, ix = x.id](Tape<S>& tp, int self) {
    tp.accumulate(ix, tp.node(self).grad.cwiseProduct(*mask));
  });
}

template <typename S>
Var<S> adaptive_avg_pool1d(Var<S> x) {
  const auto& xs = x.shape();
  if (xs.size() != 3) throw ShapeError("adaptive_avg_pool1d: input must be {C,B,L}, got " + shape_str(xs));
  const Eigen::Index C = xs[0], B = xs[1], L = xs[2];
  Mat<S> y(C, B);
  for (Eigen::Index b = 0; b < B; ++b) y.col(b) = x.value().middleCols(b * L, L).rowwise().mean();
  return x.tape->push(std::move(y), {xs[0], xs[1]}, {x.id}, [ix = x.id, B, L](Tape<S>& tp, int self) {
    const Mat<S>& g = tp.node(self).grad;
    Mat<S>& dx = tp.grad_buffer(ix);
    const S inv = S(1) / static_cast<S>(L);
    for (Eigen::Index b = 0; b < B; ++b) dx.middleCols(b * L, L).colwise() += g.col(b) * inv;
  });
}

template <typename S>
Var<S> grad_reverse(Var<S> x) {
  return x.tape->push(x.value(), x.shape(), {x.id},
                      [ix = x.id](Tape<S>& tp, int self) { tp.accumulate(ix, -tp.node(self).grad); });
}

template <typename S>
Var<S> spectral_normalize(Var<S> W, SpectralNormState<S>& st, int power_iters) {
  const Mat<S>& w = W.value();
  if (W.shape().size() != 2) throw ShapeError("spectral_normalize: weight must be 2-D, got " + shape_str(W.shape()));
  if (w.norm() == S(0)) throw NumericError("spectral_normalize: zero matrix");
  if (st.u.size() != w.rows()) {
    std::mt19937_64 rng(st.seed);
    std::normal_distribution<double> nd;
    st.u.resize(w.rows());
    for (Eigen::Index k = 0; k < st.u.size(); ++k) st.u(k) = static_cast<S>(nd(rng));
    st.u.normalize();
    st.v.resize(0);
  }
  if (st.v.size() != w.cols()) power_iters = std::max(power_iters, 1);
  for (int it = 0; it < power_iters; ++it) {
    Vec<S> v = w.transpose() * st.u;
    const S nv = v.norm();
    if (!(nv > S(0))) throw NumericError("spectral_normalize: power iteration collapsed");
    st.v = v / nv;
    Vec<S> u = w * st.v;
    const S nu = u.norm();
    if (!(nu > S(0))) throw NumericError("spectral_normalize: power iteration collapsed");
    st.u = u / nu;
  }
  const S sigma = st.u.dot(w * st.v);
  if (!(sigma > S(0))) throw NumericError("spectral_normalize: non-positive singular value estimate");
  st.sigma = sigma;
  Mat<S> y = w / sigma;
  return W.tape->push(std::move(y), W.shape(), {W.id},
                      [iw = W.id, sigma, u = st.u, v = st.v](Tape<S>& tp, int self) {
                        const Mat<S>& g = tp.node(self).grad;
                        const S gw = g.cwiseProduct(tp.node(iw).value).sum();
                        Mat<S>& dw = tp.grad_buffer(iw);
                        dw += g / sigma;
                        dw.noalias() -= (gw / (sigma * sigma)) * (u * v.transpose());
                      });
}

#define AMTIDIN_INSTANTIATE_OPS(S)                                                          \
  template Var<S> add(Var<S>, Var<S>);                                                      \
  template Var<S> sub(Var<S>, Var<S>);                                                      \
  template Var<S> mul(Var<S>, Var<S>);                                                      \
  template Var<S> scale(Var<S>, S);                                                         \
  template Var<S> add_bias(Var<S>, Var<S>);                                                 \
  template Var<S> matmul(Var<S>, Var<S>);                                                   \
  template Var<S> linear(Var<S>, Var<S>, Var<S>);                                           \
  template Var<S> concat(const std::vector<Var<S>>&);                                       \
  template Var<S> slice_cols(Var<S>, Eigen::Index, Eigen::Index);                           \
  template Var<S> mean(Var<S>);                                                             \
  template Var<S> sum(Var<S>);                                                              \
  template Var<S> weighted_sum(const std::vector<Var<S>>&, const std::vector<S>&);          \
  template Var<S> conv1d(Var<S>, Var<S>, Var<S>, int);                                      \
  template Var<S> batchnorm1d(Var<S>, Var<S>, Var<S>, BatchNormState<S>&, bool);            \
  template Var<S> gelu(Var<S>);                                                             \
  template Var<S> elu(Var<S>, S);                                                           \
  template Var<S> sigmoid(Var<S>);                                                          \
  template Var<S> softmax_cross_entropy(Var<S>, const std::vector<int>&);                   \
  template Var<S> dropout(Var<S>, double, bool, std::uint64_t);                             \
  template Var<S> adaptive_avg_pool1d(Var<S>);                                              \
  template Var<S> grad_reverse(Var<S>);                                                     \
  template Var<S> spectral_normalize(Var<S>, SpectralNormState<S>&, int);                   \
  template Mat<S> softmax_columns(const Mat<S>&);                                           \
  template std::vector<int> argmax_columns(const Mat<S>&);

AMTIDIN_INSTANTIATE_OPS(float)
AMTIDIN_INSTANTIATE_OPS(double)

}  // namespace amtidin::ad
