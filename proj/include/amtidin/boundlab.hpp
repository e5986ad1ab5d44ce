#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <string>
#include <vector>

namespace amtidin::boundlab {

// Exact W1 between two empirical samples: the integral of |F_a - F_b|.
// Equal sizes reduce to the mean absolute difference of sorted samples.
double exact_w1_empirical_1d(std::vector<double> a, std::vector<double> b);
// Exact W1 between two weighted discrete distributions (weights summing to 1).
double exact_w1_discrete_1d(const std::vector<double>& xa, const std::vector<double>& wa,
                            const std::vector<double>& xb, const std::vector<double>& wb);

// Clipped-linear map clip(k (x - theta), 0, 1).
inline double clipped_linear(double k, double theta, double x) {
  const double v = k * (x - theta);
  return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
}

struct ToyTask {
  double mu = 0.0;
  double sigma = 1.0;
  // Labeling function f(x) = clip(label_slope (x - label_theta), 0, 1); an infinite
  // slope gives the threshold 1[x >= label_theta].
  double label_slope = 1.0;
  double label_theta = 0.0;
  int m = 100;

  double label(double x) const;
  void validate() const;
};

struct ToyHypothesisClass {
  double k = 1.0;  // Lipschitz constant K
  std::vector<double> thetas;

  static ToyHypothesisClass grid(double k, double lo, double hi, double step);
  double eval(std::size_t j, double x) const { return clipped_linear(k, thetas[j], x); }
};

// Expected absolute loss E|h_theta(X) - f(X)| for X ~ N(mu, sigma) by composite
// Simpson quadrature over mu +- 12 sigma.
double expected_loss(const ToyTask& task, double k, double theta, int intervals = 8000);

struct BoundInputs {
  int T = 2;
  std::vector<double> lambda;
  Eigen::MatrixXd alpha;            // T x T, rows on the simplex
  std::vector<double> m;            // per-task sample sizes
  double delta = 0.1;
  double K = 1.0;
  double s = 2.0;
  std::vector<double> A;            // per-task concentration constants
  double d = 1.0;                   // pseudo-dimension
  Eigen::MatrixXd xi;               // xi(t, i)
  Eigen::MatrixXd emp_loss;         // emp_loss(t, i) = empirical loss of h_t on task i
  Eigen::MatrixXd w1;               // empirical W1 between task input samples (symmetric)

  void validate() const;
};

struct BoundTerms {
  double weighted_empirical = 0.0;
  double coefficient_regularization = 0.0;
  double wasserstein = 0.0;
  double complexity = 0.0;  // C2
  double optimal_loss = 0.0;
  double c1 = 0.0;
  double total = 0.0;
};

double gamma_it(const BoundInputs& b, int i, int t);
BoundTerms bound_rhs(const BoundInputs& b);

struct ToyFamily {
  std::vector<ToyTask> tasks;
  std::vector<double> lambda;
  Eigen::MatrixXd alpha;
  ToyHypothesisClass hypotheses;
  double s = 2.0;
  double A = 1.0;
  double d = 1.0;  // pseudo-dimension of the clipped-linear family

  static ToyFamily default_family();
  static ToyFamily identical_tasks();
};

struct McReport {
  int trials = 0;
  int violations = 0;
  double min_margin = 0.0;
  double mean_margin = 0.0;
  double lhs_mean = 0.0, lhs_min = 0.0, lhs_max = 0.0;
  BoundTerms rhs_mean;
  Eigen::MatrixXd xi;
  std::vector<std::string> warnings;

  std::string to_json() const;
};

// Draws m_t samples per task per trial, picks h_t by minimizing the alpha-weighted
// empirical loss over the grid, and compares the oracle LHS against bound_rhs.
McReport mc_bound_check(const ToyFamily& fam, int trials, double delta, std::uint64_t seed);

struct LemmaReport {
  int cases = 0;
  int violations = 0;
  double max_violation = 0.0;  // max(LHS - RHS), <= 0 when the lemma holds
  double min_slack = 0.0;      // min(RHS - LHS)
};

// Triangle inequality for the absolute loss on random discrete distributions and
// random [0,1]-valued functions, in exact rational arithmetic.
LemmaReport lemma1_check(int cases, std::uint64_t seed);
// Transfer bound for random K-Lipschitz clipped-linear pairs on random discrete
// distributions, with the exact 1-D W1. Tolerance 1e-12.
LemmaReport lemma2_check(int cases, std::uint64_t seed);

struct CriticConfig {
  int steps = 200;
  int batch = 256;
  double lr = 5e-3;
  int hidden = 64;
  int power_iters = 1;
  std::uint64_t seed = 0;
};

// Trains a spectrally normalized critic (SN-linear -> ELU -> SN-linear, logit output)
// to maximize mean d(b) - mean d(a) on the training columns, then returns that gap on
// the evaluation columns. Columns are samples.
double critic_w1_estimate(const Eigen::MatrixXd& train_a, const Eigen::MatrixXd& train_b,
                          const Eigen::MatrixXd& eval_a, const Eigen::MatrixXd& eval_b, const CriticConfig& cfg);

}  // namespace amtidin::boundlab
