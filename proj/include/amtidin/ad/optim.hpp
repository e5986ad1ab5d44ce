#pragma once

#include <limits>
#include <vector>

#include "amtidin/ad/tape.hpp"

namespace amtidin::ad {

template <typename S>
struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  std::vector<Mat<S>> m;  // first moments, one per parameter
  std::vector<Mat<S>> v;  // second moments
};

// One bias-corrected Adam update from the accumulated parameter gradients.
// Moments are allocated on the first call.
template <typename S>
void adam_step(const std::vector<Parameter<S>*>& params, AdamState<S>& state);

template <typename S>
void zero_grad(const std::vector<Parameter<S>*>& params);

// Global L2 norm of all gradients.
template <typename S>
double grad_norm(const std::vector<Parameter<S>*>& params);

// Rescales gradients so the global norm is at most max_norm. Returns the norm
// before clipping.
template <typename S>
double clip_grad_norm(const std::vector<Parameter<S>*>& params, double max_norm);

// Reduce-on-plateau for a minimized metric. An epoch counts as an improvement when
// metric < best - threshold * |best|. After `patience` consecutive non-improving epochs
// the rate drops to max(lr * factor, min_lr) and the counter restarts.
struct PlateauScheduler {
  double lr = 1e-3;
  double factor = 0.1;
  int patience = 8;
  double min_lr = 1e-7;
  double threshold = 1e-4;
  double best = std::numeric_limits<double>::infinity();
  int bad_epochs = 0;

  // Returns true when the rate was reduced.
  bool step(double metric);
};

}  // namespace amtidin::ad
