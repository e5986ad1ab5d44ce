#pragma once

#include <Eigen/Core>

#include <array>
#include <string>

#include "amtidin/model.hpp"

namespace amtidin::objective {

// Rows indexed by task t; each row lies on the probability simplex.
using TaskRelationMatrix = Eigen::Matrix3d;

TaskRelationMatrix identity_alpha();
// Max deviation of any row from the simplex (negative entries or |sum - 1|).
double simplex_violation(const TaskRelationMatrix& alpha);

struct PgdConfig {
  int max_iters = 500;
  double step = 1e-2;
  double tol = 1e-9;
};

struct ObjectiveConfig {
  // Task weights on the simplex; the default is (0.05, 0.85, 0.15) rescaled to sum 1.
  std::array<double, 3> lambda{0.05 / 1.05, 0.85 / 1.05, 0.15 / 1.05};
  double rho = 1.0;
  double c1 = 0.0;
  std::array<double, 3> beta{1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0};
  PgdConfig pgd;
  // Discriminator output used for the adversarial terms.
  model::AdvOutputMode adv_mode = model::AdvOutputMode::Sigmoid;

  void validate() const;
};

// mean(d_t) - mean(d_i). Minimizing it through the GRL trains the discriminator to
// raise its outputs on stream i relative to stream t while the extractor works to
// close the gap.
template <typename S>
ad::Var<S> adversarial_pair_loss(ad::Var<S> d_t, ad::Var<S> d_i);

// sum_i alpha_t[i] * CE(z^{t,i}, y^i) over the heads present in `out`.
template <typename S>
ad::Var<S> alpha_weighted_loss(const model::ForwardTrainOutput<S>& out, const dataio::TaskBatch& batch,
                               const Eigen::Vector3d& alpha_t, Task t);

// Per-batch loss terms.
template <typename S>
struct LossTerms {
  std::array<std::array<ad::Var<S>, 3>, 3> ce;  // CE of head (t,i) on stream i
  std::array<ad::Var<S>, 3> adv;                // adversarial_pair_loss per kTaskPairs entry
};

template <typename S>
LossTerms<S> loss_terms(const model::ForwardTrainOutput<S>& out, const dataio::TaskBatch& batch,
                        model::AdvOutputMode mode);

// Weight on the adversarial loss of pair p: rho * (lambda_a alpha_ab + lambda_b alpha_ba).
double pair_weight(const TaskRelationMatrix& alpha, const ObjectiveConfig& cfg, int p);

// sum_t lambda_t sum_i alpha_ti CE_ti + rho sum_t lambda_t sum_{i != t} alpha_ti L_d(pair(t,i)).
// Both orders of a pair share the same oriented pair loss. Missing terms (inactive
// streams or modules) are skipped.
template <typename S>
ad::Var<S> total_objective(const LossTerms<S>& terms, const TaskRelationMatrix& alpha, const ObjectiveConfig& cfg);

template <typename S>
ad::Var<S> total_objective(const model::ForwardTrainOutput<S>& out, const dataio::TaskBatch& batch,
                           const TaskRelationMatrix& alpha, const ObjectiveConfig& cfg);

// Same objective evaluated on plain numbers (ce[t][i], w1[p] = -L_d of pair p).
// NaN entries are skipped.
double objective_value(const std::array<std::array<double, 3>, 3>& ce, const std::array<double, 3>& adv_loss,
                       const TaskRelationMatrix& alpha, const ObjectiveConfig& cfg);

// Euclidean projection onto the probability simplex (sort-threshold algorithm).
Eigen::VectorXd project_simplex(const Eigen::VectorXd& v);

// phi(alpha) = sum_i alpha_i a_i + rho sum_i alpha_i w_i + C1 sqrt(sum_i alpha_i^2 / beta_i).
double phi(const Eigen::Vector3d& alpha, const Eigen::Vector3d& a, const Eigen::Vector3d& w, double rho, double c1,
           const std::array<double, 3>& beta);

struct AlphaSolution {
  Eigen::Vector3d alpha;
  double objective = 0.0;
  int iterations = 0;
  bool converged = false;
};

// Projected gradient descent with backtracking from warm_start (projected first).
// Throws NumericError on non-finite inputs.
AlphaSolution solve_alpha(const Eigen::Vector3d& a, const Eigen::Vector3d& w, const ObjectiveConfig& cfg,
                          const Eigen::Vector3d& warm_start);

// 2 sqrt(2 (d ln(2em/d) + ln(16T/delta)) / m).
double compute_c1(double d, double m, int T, double delta);

struct SimilarityReport {
  Eigen::Matrix3d w1_logit = Eigen::Matrix3d::Zero();
  Eigen::Matrix3d w1_sigmoid = Eigen::Matrix3d::Zero();
  TaskRelationMatrix alpha = identity_alpha();
  std::size_t count_id = 0, count_present = 0;

  std::string matrix_csv(const Eigen::Matrix3d& m) const;
  std::string to_json() const;
};

// W1 per pair = mean d(f^b) - mean d(f^a) over the evaluation streams (ID: all
// records, MI/II: present records), in eval mode, in both output modes. The value
// equals minus the pair loss emitted during training.
SimilarityReport estimate_w1_matrix(model::AmtidinModel<float>& m, const dataio::Dataset& eval_set,
                                    const TaskRelationMatrix& alpha, int chunk = 256);

}  // namespace amtidin::objective
