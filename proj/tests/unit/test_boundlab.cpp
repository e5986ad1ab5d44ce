#include <doctest.h>

#include <random>

#include "amtidin/boundlab.hpp"
#include "amtidin/objective.hpp"

using namespace amtidin;
using namespace amtidin::boundlab;

namespace {

std::vector<double> gaussian(int n, double mu, double sigma, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(mu, sigma);
  std::vector<double> v(n);
  for (auto& x : v) x = nd(rng);
  return v;
}

BoundInputs random_inputs(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  BoundInputs b;
  b.T = 3;
  b.lambda = {0.2, 0.5, 0.3};
  b.alpha = Eigen::MatrixXd(3, 3);
  for (int t = 0; t < 3; ++t) {
    Eigen::Vector3d r(u(rng), u(rng), u(rng));
    b.alpha.row(t) = (r / r.sum()).transpose();
  }
  b.m = {120, 300, 80};
  b.A = {1.0, 1.0, 1.0};
  b.xi = Eigen::MatrixXd::NullaryExpr(3, 3, [&]() { return u(rng); });
  b.emp_loss = Eigen::MatrixXd::NullaryExpr(3, 3, [&]() { return u(rng); });
  Eigen::MatrixXd w = Eigen::MatrixXd::NullaryExpr(3, 3, [&]() { return u(rng); });
  b.w1 = w + w.transpose();
  b.w1.diagonal().setZero();
  return b;
}

}  // namespace

TEST_SUITE("boundlab") {

TEST_CASE("exact empirical W1 examples") {
  CHECK(exact_w1_empirical_1d({0, 0}, {1, 1}) == 1.0);
  CHECK(exact_w1_empirical_1d({3, 1, 2}, {2, 3, 1}) == 0.0);
  CHECK(exact_w1_empirical_1d({0}, {0, 2}) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(exact_w1_empirical_1d({0, 1, 2, 3}, {1.5}) == doctest::Approx(1.0).epsilon(1e-15));
  const double w = exact_w1_empirical_1d(gaussian(100000, 0, 1, 1), gaussian(100000, 2, 1, 2));
  CHECK(std::abs(w - 2.0) <= 0.02);
  CHECK(exact_w1_discrete_1d({0, 1}, {0.5, 0.5}, {0, 1}, {0.25, 0.75}) == doctest::Approx(0.25).epsilon(1e-15));
  CHECK_THROWS(exact_w1_empirical_1d({}, {1.0}));
}

TEST_CASE("exact empirical W1 is a metric on samples") {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> size(1, 40);
  std::normal_distribution<double> nd(0.0, 2.0);
  auto draw = [&]() {
    std::vector<double> v(size(rng));
    for (auto& x : v) x = nd(rng);
    return v;
  };
  for (int k = 0; k < 500; ++k) {
    const auto a = draw(), b = draw(), c = draw();
    const double ab = exact_w1_empirical_1d(a, b), ba = exact_w1_empirical_1d(b, a);
    CHECK(std::abs(ab - ba) <= 1e-12);
    CHECK(exact_w1_empirical_1d(a, a) <= 1e-12);
    CHECK(ab <= exact_w1_empirical_1d(a, c) + exact_w1_empirical_1d(c, b) + 1e-12);
    CHECK(ab >= 0.0);
  }
}

TEST_CASE("expected loss by quadrature") {
  ToyTask t{0.0, 1.0, 1.0, 0.0, 10};
  CHECK(expected_loss(t, 1.0, 0.0) == doctest::Approx(0.0).epsilon(1e-12));
  // f = 1[x >= 0], h = 1[x >= 1] via a steep slope: loss = P(0 <= X < 1)
  ToyTask thr{0.0, 1.0, std::numeric_limits<double>::infinity(), 0.0, 10};
  CHECK(std::abs(expected_loss(thr, 1e6, 1.0) - 0.3413447460685429) <= 2e-3);
}

TEST_CASE("bound_rhs: collapse, zero W1 and additivity") {
  BoundInputs one;
  one.T = 1;
  one.lambda = {1.0};
  one.alpha = Eigen::MatrixXd::Ones(1, 1);
  one.m = {500};
  one.A = {1.0};
  one.xi = Eigen::MatrixXd::Constant(1, 1, 0.1);
  one.emp_loss = Eigen::MatrixXd::Constant(1, 1, 0.3);
  one.w1 = Eigen::MatrixXd::Zero(1, 1);
  const auto r = bound_rhs(one);
  const double c1 = objective::compute_c1(1.0, 500, 1, 0.1);
  CHECK(r.c1 == c1);
  CHECK(r.coefficient_regularization == doctest::Approx(c1).epsilon(1e-15));
  CHECK(r.wasserstein == 0.0);
  CHECK(r.total == doctest::Approx(0.3 + c1 + 2.0 * gamma_it(one, 0, 0) + 0.1).epsilon(1e-14));

  const double g = 2.0 / std::sqrt(500.0) + std::sqrt(0.5 * std::log(4.0 / 0.1)) * 2.0 / std::sqrt(500.0);
  CHECK(gamma_it(one, 0, 0) == doctest::Approx(g).epsilon(1e-14));

  auto b = random_inputs(3);
  b.w1.setZero();
  CHECK(bound_rhs(b).wasserstein == 0.0);

  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto rr = bound_rhs(random_inputs(s));
    const double sum = rr.weighted_empirical + rr.coefficient_regularization + rr.wasserstein + rr.complexity +
                       rr.optimal_loss;
    CHECK(std::abs(sum - rr.total) <= 1e-12);
  }

  auto bad = random_inputs(1);
  bad.alpha(0, 0) += 0.5;
  CHECK_THROWS_AS(bound_rhs(bad), ConfigError);
}

TEST_CASE("Monte Carlo bound check on the default family") {
  const auto fam = ToyFamily::default_family();
  const auto rep = mc_bound_check(fam, 40, 0.1, 7);
  CHECK(rep.trials == 40);
  CHECK(rep.violations == 0);
  CHECK(rep.min_margin > 0.0);
  CHECK(rep.warnings.empty());
  for (int t = 0; t < 2; ++t) {
    double best = std::numeric_limits<double>::infinity();
    for (double th : fam.hypotheses.thetas) best = std::min(best, expected_loss(fam.tasks[t], fam.hypotheses.k, th));
    CHECK(rep.xi(t, t) == doctest::Approx(2.0 * best).epsilon(1e-9));
  }
  CHECK(rep.to_json().find("violations") != std::string::npos);
}

TEST_CASE("identical tasks have near-zero W1 terms") {
  const auto rep = mc_bound_check(ToyFamily::identical_tasks(), 20, 0.1, 3);
  CHECK(rep.violations == 0);
  CHECK(rep.rhs_mean.wasserstein < 0.3);
  CHECK(rep.rhs_mean.wasserstein < rep.rhs_mean.complexity);
}

TEST_CASE("coarse grids are flagged") {
  auto fam = ToyFamily::default_family();
  fam.hypotheses = ToyHypothesisClass::grid(1.0, -3.0, 3.0, 0.5);
  const auto rep = mc_bound_check(fam, 2, 0.1, 1);
  CHECK_FALSE(rep.warnings.empty());
}

TEST_CASE("lemma audits") {
  const auto l1 = lemma1_check(2000, 1);
  CHECK(l1.cases == 2000);
  CHECK(l1.violations == 0);
  CHECK(l1.max_violation <= 0.0);
  const auto l2 = lemma2_check(2000, 2);
  CHECK(l2.violations == 0);
  CHECK(l2.min_slack >= -1e-12);
}

TEST_CASE("critic W1 estimate grows with the mean shift") {
  const int dim = 16, n = 4096;
  std::mt19937_64 rng(4);
  std::normal_distribution<double> nd;
  auto sample = [&](double shift) {
    Eigen::MatrixXd m(dim, n);
    for (Eigen::Index k = 0; k < m.size(); ++k) m(k) = nd(rng);
    m.array() += shift / std::sqrt(static_cast<double>(dim));
    return m;
  };
  CriticConfig cfg;
  cfg.steps = 150;
  cfg.hidden = 32;
  std::vector<double> est;
  for (double s : {0.25, 1.0, 2.0}) {
    const auto ta = sample(0.0), tb = sample(s), ea = sample(0.0), eb = sample(s);
    est.push_back(critic_w1_estimate(ta, tb, ea, eb, cfg));
  }
  CHECK(est[0] < est[1]);
  CHECK(est[1] < est[2]);
  CHECK(est[2] <= 2.0 * (1.0 + 1e-3) + 0.2);
  const auto a = sample(0.0), b = sample(0.0), c = sample(0.0), d = sample(0.0);
  CHECK(std::abs(critic_w1_estimate(a, b, c, d, cfg)) <= 0.05);
}

}  // TEST_SUITE
