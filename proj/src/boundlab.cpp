#include "amtidin/boundlab.hpp"

#include <boost/multiprecision/cpp_int.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "amtidin/ad/ops.hpp"
#include "amtidin/ad/optim.hpp"
#include "amtidin/common.hpp"
#include "amtidin/objective.hpp"

namespace amtidin::boundlab {

namespace {

// Integral of |F_a - F_b| for two weighted point sets already sorted by location.
double cdf_gap_integral(const std::vector<std::pair<double, double>>& a, const std::vector<std::pair<double, double>>& b) {
  std::size_t ia = 0, ib = 0;
  double fa = 0.0, fb = 0.0, total = 0.0;
  double prev = std::min(a.front().first, b.front().first);
  while (ia < a.size() || ib < b.size()) {
    const double xa = ia < a.size() ? a[ia].first : std::numeric_limits<double>::infinity();
    const double xb = ib < b.size() ? b[ib].first : std::numeric_limits<double>::infinity();
    const double x = std::min(xa, xb);
    total += std::abs(fa - fb) * (x - prev);
    while (ia < a.size() && a[ia].first == x) fa += a[ia++].second;
    while (ib < b.size() && b[ib].first == x) fb += b[ib++].second;
    prev = x;
  }
  return total;
}

}  // namespace

double exact_w1_empirical_1d(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw ConfigError("exact_w1_empirical_1d: empty sample set");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  if (a.size() == b.size()) {
    double s = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) s += std::abs(a[k] - b[k]);
    return s / static_cast<double>(a.size());
  }
  std::vector<std::pair<double, double>> pa, pb;
  for (double x : a) pa.emplace_back(x, 1.0 / static_cast<double>(a.size()));
  for (double x : b) pb.emplace_back(x, 1.0 / static_cast<double>(b.size()));
  return cdf_gap_integral(pa, pb);
}

double exact_w1_discrete_1d(const std::vector<double>& xa, const std::vector<double>& wa,
                            const std::vector<double>& xb, const std::vector<double>& wb) {
  if (xa.empty() || xb.empty() || xa.size() != wa.size() || xb.size() != wb.size())
    throw ConfigError("exact_w1_discrete_1d: empty or mismatched support/weights");
  std::vector<std::pair<double, double>> pa, pb;
  for (std::size_t k = 0; k < xa.size(); ++k) pa.emplace_back(xa[k], wa[k]);
  for (std::size_t k = 0; k < xb.size(); ++k) pb.emplace_back(xb[k], wb[k]);
  std::sort(pa.begin(), pa.end());
  std::sort(pb.begin(), pb.end());
  return cdf_gap_integral(pa, pb);
}

double ToyTask::label(double x) const {
  if (std::isinf(label_slope)) return x >= label_theta ? 1.0 : 0.0;
  return clipped_linear(label_slope, label_theta, x);
}

void ToyTask::validate() const {
  if (!(sigma > 0.0)) throw ConfigError("ToyTask: sigma must be > 0");
  if (m < 2) throw ConfigError("ToyTask: m must be >= 2");
}

ToyHypothesisClass ToyHypothesisClass::grid(double k, double lo, double hi, double step) {
  if (!(k > 0.0) || !(hi > lo) || !(step > 0.0)) throw ConfigError("ToyHypothesisClass: invalid grid");
  ToyHypothesisClass h;
  h.k = k;
  const auto n = static_cast<int>(std::floor((hi - lo) / step + 1e-9)) + 1;
  for (int j = 0; j < n; ++j) h.thetas.push_back(lo + step * j);
  return h;
}

double expected_loss(const ToyTask& task, double k, double theta, int intervals) {
  if (intervals % 2) ++intervals;
  const double lo = task.mu - 12.0 * task.sigma, hi = task.mu + 12.0 * task.sigma;
  const double h = (hi - lo) / intervals;
  const double norm = 1.0 / (task.sigma * std::sqrt(2.0 * M_PI));
  auto g = [&](double x) {
    const double z = (x - task.mu) / task.sigma;
    return std::abs(clipped_linear(k, theta, x) - task.label(x)) * norm * std::exp(-0.5 * z * z);
  };
  double s = g(lo) + g(hi);
  for (int j = 1; j < intervals; ++j) s += (j % 2 ? 4.0 : 2.0) * g(lo + h * j);
  return s * h / 3.0;
}

void BoundInputs::validate() const {
  const auto t = static_cast<Eigen::Index>(T);
  if (T < 1 || lambda.size() != static_cast<std::size_t>(T) || m.size() != static_cast<std::size_t>(T) ||
      A.size() != static_cast<std::size_t>(T) || alpha.rows() != t || alpha.cols() != t || xi.rows() != t ||
      xi.cols() != t || emp_loss.rows() != t || emp_loss.cols() != t || w1.rows() != t || w1.cols() != t)
    throw ConfigError("BoundInputs: sizes inconsistent with T");
  if (std::abs(std::accumulate(lambda.begin(), lambda.end(), 0.0) - 1.0) > 1e-9 ||
      *std::min_element(lambda.begin(), lambda.end()) < 0.0)
    throw ConfigError("BoundInputs: lambda must lie on the simplex");
  for (Eigen::Index r = 0; r < t; ++r)
    if (std::abs(alpha.row(r).sum() - 1.0) > 1e-9 || alpha.row(r).minCoeff() < 0.0)
      throw ConfigError("BoundInputs: alpha rows must lie on the simplex");
  if (!(delta > 0.0 && delta < 1.0)) throw ConfigError("BoundInputs: delta must lie in (0,1)");
  if (!(K > 0.0) || !(s > 0.0)) throw ConfigError("BoundInputs: K and s must be positive");
  for (double mi : m)
    if (!(mi >= 1.0)) throw ConfigError("BoundInputs: sample sizes must be >= 1");
}

double gamma_it(const BoundInputs& b, int i, int t) {
  const double mi = b.m[static_cast<std::size_t>(i)], mt = b.m[static_cast<std::size_t>(t)];
  return b.A[static_cast<std::size_t>(i)] * std::pow(mi, -1.0 / b.s) +
         b.A[static_cast<std::size_t>(t)] * std::pow(mt, -1.0 / b.s) +
         std::sqrt(0.5 * std::log(4.0 * b.T * b.T / b.delta)) * (std::sqrt(1.0 / mi) + std::sqrt(1.0 / mt));
}

BoundTerms bound_rhs(const BoundInputs& b) {
  b.validate();
  const double m_total = std::accumulate(b.m.begin(), b.m.end(), 0.0);
  BoundTerms r;
  r.c1 = objective::compute_c1(b.d, m_total, b.T, b.delta);
  for (int t = 0; t < b.T; ++t) {
    const double lt = b.lambda[static_cast<std::size_t>(t)];
    double emp = 0.0, reg = 0.0, w = 0.0, g = 0.0, x = 0.0;
    for (int i = 0; i < b.T; ++i) {
      const double a = b.alpha(t, i);
      const double beta_i = b.m[static_cast<std::size_t>(i)] / m_total;
      emp += a * b.emp_loss(t, i);
      reg += a * a / beta_i;
      w += a * b.w1(i, t);
      g += a * gamma_it(b, i, t);
      x += a * b.xi(i, t);
    }
    r.weighted_empirical += lt * emp;
    r.coefficient_regularization += r.c1 * lt * std::sqrt(reg);
    r.wasserstein += 2.0 * b.K * lt * w;
    r.complexity += 2.0 * b.K * lt * g;
    r.optimal_loss += lt * x;
  }
  r.total = r.weighted_empirical + r.coefficient_regularization + r.wasserstein + r.complexity + r.optimal_loss;
  return r;
}

ToyFamily ToyFamily::default_family() {
  ToyFamily f;
  f.tasks = {ToyTask{0.0, 1.0, 1.0, 0.0, 200}, ToyTask{0.5, 1.2, 2.0, 0.4, 100}};
  f.lambda = {0.5, 0.5};
  f.alpha.resize(2, 2);
  f.alpha << 0.8, 0.2, 0.3, 0.7;
  f.hypotheses = ToyHypothesisClass::grid(1.0, -3.0, 3.0, 0.01);
  return f;
}

ToyFamily ToyFamily::identical_tasks() {
  ToyFamily f;
  f.tasks = {ToyTask{0.0, 1.0, 1.0, 0.0, 150}, ToyTask{0.0, 1.0, 1.0, 0.0, 150}};
  f.lambda = {0.5, 0.5};
  f.alpha = Eigen::MatrixXd::Constant(2, 2, 0.5);
  f.hypotheses = ToyHypothesisClass::grid(1.0, -3.0, 3.0, 0.01);
  return f;
}

std::string McReport::to_json() const {
  nlohmann::json j;
  j["trials"] = trials;
  j["violations"] = violations;
  j["min_margin"] = min_margin;
  j["mean_margin"] = mean_margin;
  j["lhs"] = {{"mean", lhs_mean}, {"min", lhs_min}, {"max", lhs_max}};
  j["rhs_mean"] = {{"weighted_empirical", rhs_mean.weighted_empirical},
                   {"coefficient_regularization", rhs_mean.coefficient_regularization},
                   {"wasserstein", rhs_mean.wasserstein},
                   {"complexity", rhs_mean.complexity},
                   {"optimal_loss", rhs_mean.optimal_loss},
                   {"c1", rhs_mean.c1},
                   {"total", rhs_mean.total}};
  nlohmann::json x = nlohmann::json::array();
  for (Eigen::Index r = 0; r < xi.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < xi.cols(); ++c) row.push_back(xi(r, c));
    x.push_back(row);
  }
  j["xi"] = x;
  j["warnings"] = warnings;
  return j.dump(2);
}

McReport mc_bound_check(const ToyFamily& fam, int trials, double delta, std::uint64_t seed) {
  const int T = static_cast<int>(fam.tasks.size());
  if (T < 1 || trials < 1) throw ConfigError("mc_bound_check: need at least one task and one trial");
  for (const auto& t : fam.tasks) t.validate();
  const auto& H = fam.hypotheses;
  const std::size_t G = H.thetas.size();
  if (G == 0) throw ConfigError("mc_bound_check: empty hypothesis grid");

  McReport rep;
  rep.trials = trials;
  double min_sigma = std::numeric_limits<double>::infinity();
  for (const auto& t : fam.tasks) min_sigma = std::min(min_sigma, t.sigma);
  if (G > 1 && H.thetas[1] - H.thetas[0] > 0.05 * min_sigma)
    rep.warnings.push_back("hypothesis grid step exceeds 0.05 sigma; ERM may be unstable");

  // Oracle expected losses per (task, theta) and the joint minimal losses.
  Eigen::MatrixXd L(T, static_cast<Eigen::Index>(G));
  for (int t = 0; t < T; ++t)
    for (std::size_t j = 0; j < G; ++j) L(t, static_cast<Eigen::Index>(j)) = expected_loss(fam.tasks[t], H.k, H.thetas[j]);
  rep.xi.resize(T, T);
  for (int t = 0; t < T; ++t)
    for (int i = 0; i < T; ++i) rep.xi(t, i) = (L.row(t) + L.row(i)).minCoeff();

  BoundInputs b;
  b.T = T;
  b.lambda = fam.lambda;
  b.alpha = fam.alpha;
  b.delta = delta;
  b.K = H.k;
  b.s = fam.s;
  b.d = fam.d;
  b.A.assign(static_cast<std::size_t>(T), fam.A);
  b.xi = rep.xi;
  for (const auto& t : fam.tasks) b.m.push_back(t.m);

  double margin_sum = 0.0, lhs_sum = 0.0;
  rep.min_margin = std::numeric_limits<double>::infinity();
  rep.lhs_min = std::numeric_limits<double>::infinity();
  rep.lhs_max = -std::numeric_limits<double>::infinity();
  for (int trial = 0; trial < trials; ++trial) {
    std::vector<std::vector<double>> xs(static_cast<std::size_t>(T));
    Eigen::MatrixXd Lhat(T, static_cast<Eigen::Index>(G));
    for (int t = 0; t < T; ++t) {
      const auto& task = fam.tasks[t];
      std::mt19937_64 rng(derive_seed(seed, {static_cast<std::uint64_t>(trial), static_cast<std::uint64_t>(t)}));
      std::normal_distribution<double> nd(task.mu, task.sigma);
      auto& x = xs[static_cast<std::size_t>(t)];
      x.resize(static_cast<std::size_t>(task.m));
      for (auto& v : x) v = nd(rng);
      for (std::size_t j = 0; j < G; ++j) {
        double s = 0.0;
        for (double v : x) s += std::abs(H.eval(j, v) - task.label(v));
        Lhat(t, static_cast<Eigen::Index>(j)) = s / static_cast<double>(x.size());
      }
    }
    b.emp_loss.resize(T, T);
    b.w1.setZero(T, T);
    double lhs = 0.0;
    for (int t = 0; t < T; ++t) {
      Eigen::RowVectorXd weighted = fam.alpha.row(t) * Lhat;
      Eigen::Index best = 0;
      weighted.minCoeff(&best);
      for (int i = 0; i < T; ++i) b.emp_loss(t, i) = Lhat(i, best);
      lhs += fam.lambda[static_cast<std::size_t>(t)] * L(t, best);
      for (int i = t + 1; i < T; ++i)
        b.w1(t, i) = b.w1(i, t) = exact_w1_empirical_1d(xs[static_cast<std::size_t>(t)], xs[static_cast<std::size_t>(i)]);
    }
    const BoundTerms r = bound_rhs(b);
    const double margin = r.total - lhs;
    if (!(lhs <= r.total)) ++rep.violations;
    rep.min_margin = std::min(rep.min_margin, margin);
    margin_sum += margin;
    lhs_sum += lhs;
    rep.lhs_min = std::min(rep.lhs_min, lhs);
    rep.lhs_max = std::max(rep.lhs_max, lhs);
    rep.rhs_mean.weighted_empirical += r.weighted_empirical / trials;
    rep.rhs_mean.coefficient_regularization += r.coefficient_regularization / trials;
    rep.rhs_mean.wasserstein += r.wasserstein / trials;
    rep.rhs_mean.complexity += r.complexity / trials;
    rep.rhs_mean.optimal_loss += r.optimal_loss / trials;
    rep.rhs_mean.c1 = r.c1;
    rep.rhs_mean.total += r.total / trials;
  }
  rep.mean_margin = margin_sum / trials;
  rep.lhs_mean = lhs_sum / trials;
  return rep;
}

LemmaReport lemma1_check(int cases, std::uint64_t seed) {
  using boost::multiprecision::cpp_rational;
  LemmaReport rep;
  rep.cases = cases;
  rep.max_violation = -std::numeric_limits<double>::infinity();
  rep.min_slack = std::numeric_limits<double>::infinity();
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> size_d(1, 8), weight_d(1, 100), value_d(0, 1000);
  for (int c = 0; c < cases; ++c) {
    const int n = size_d(rng);
    std::vector<cpp_rational> p(static_cast<std::size_t>(n)), h(p.size()), hs(p.size()), f(p.size());
    cpp_rational total = 0;
    for (auto& w : p) {
      w = weight_d(rng);
      total += w;
    }
    for (std::size_t k = 0; k < p.size(); ++k) {
      p[k] /= total;
      h[k] = cpp_rational(value_d(rng), 1000);
      hs[k] = cpp_rational(value_d(rng), 1000);
      f[k] = cpp_rational(value_d(rng), 1000);
    }
    cpp_rational l_h = 0, l_hhs = 0, l_hs = 0;
    for (std::size_t k = 0; k < p.size(); ++k) {
      l_h += p[k] * abs(h[k] - f[k]);
      l_hhs += p[k] * abs(h[k] - hs[k]);
      l_hs += p[k] * abs(hs[k] - f[k]);
    }
    const cpp_rational lhs = abs(l_h - l_hhs);
    const cpp_rational slack = l_hs - lhs;
    if (slack < 0) ++rep.violations;
    const double sd = static_cast<double>(slack);
    rep.min_slack = std::min(rep.min_slack, sd);
    rep.max_violation = std::max(rep.max_violation, -sd);
  }
  return rep;
}

LemmaReport lemma2_check(int cases, std::uint64_t seed) {
  LemmaReport rep;
  rep.cases = cases;
  rep.max_violation = -std::numeric_limits<double>::infinity();
  rep.min_slack = std::numeric_limits<double>::infinity();
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> size_d(1, 10);
  std::uniform_real_distribution<double> loc(-2.0, 2.0), w01(0.01, 1.0), kd(0.1, 3.0), unit(-1.0, 1.0);
  auto draw = [&](std::vector<double>& x, std::vector<double>& w) {
    const int n = size_d(rng);
    x.resize(static_cast<std::size_t>(n));
    w.resize(x.size());
    double s = 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) {
      x[k] = loc(rng);
      w[k] = w01(rng);
      s += w[k];
    }
    for (auto& v : w) v /= s;
  };
  for (int c = 0; c < cases; ++c) {
    std::vector<double> xt, wt, xi, wi;
    draw(xt, wt);
    draw(xi, wi);
    const double K = kd(rng);
    const double k1 = K * unit(rng), k2 = K * unit(rng);
    const double th1 = loc(rng), th2 = loc(rng);
    auto gap = [&](double x) { return std::abs(clipped_linear(k1, th1, x) - clipped_linear(k2, th2, x)); };
    double li = 0.0, lt = 0.0;
    for (std::size_t k = 0; k < xi.size(); ++k) li += wi[k] * gap(xi[k]);
    for (std::size_t k = 0; k < xt.size(); ++k) lt += wt[k] * gap(xt[k]);
    const double rhs = lt + 2.0 * K * exact_w1_discrete_1d(xt, wt, xi, wi);
    const double slack = rhs - li;
    if (slack < -1e-12) ++rep.violations;
    rep.min_slack = std::min(rep.min_slack, slack);
    rep.max_violation = std::max(rep.max_violation, -slack);
  }
  return rep;
}

double critic_w1_estimate(const Eigen::MatrixXd& train_a, const Eigen::MatrixXd& train_b,
                          const Eigen::MatrixXd& eval_a, const Eigen::MatrixXd& eval_b, const CriticConfig& cfg) {
  const Eigen::Index dim = train_a.rows();
  if (train_b.rows() != dim || eval_a.rows() != dim || eval_b.rows() != dim)
    throw ShapeError("critic_w1_estimate: feature dimensions differ");
  if (train_a.cols() == 0 || train_b.cols() == 0 || eval_a.cols() == 0 || eval_b.cols() == 0)
    throw ConfigError("critic_w1_estimate: empty sample set");
  using ad::Parameter;
  Parameter<double> w1("critic.l1.weight", {cfg.hidden, static_cast<int>(dim)}), b1("critic.l1.bias", {cfg.hidden});
  Parameter<double> w2("critic.l2.weight", {1, cfg.hidden}), b2("critic.l2.bias", {1});
  {
    std::mt19937_64 rng(derive_seed(cfg.seed, {hash_string("critic.init")}));
    std::uniform_real_distribution<double> u1(-std::sqrt(6.0 / dim), std::sqrt(6.0 / dim));
    std::uniform_real_distribution<double> u2(-std::sqrt(6.0 / cfg.hidden), std::sqrt(6.0 / cfg.hidden));
    for (Eigen::Index k = 0; k < w1.value.size(); ++k) w1.value(k) = u1(rng);
    for (Eigen::Index k = 0; k < w2.value.size(); ++k) w2.value(k) = u2(rng);
  }
  ad::SpectralNormState<double> sn1, sn2;
  sn1.seed = derive_seed(cfg.seed, {hash_string("critic.sn1")});
  sn2.seed = derive_seed(cfg.seed, {hash_string("critic.sn2")});
  std::vector<Parameter<double>*> params{&w1, &b1, &w2, &b2};
  ad::AdamState<double> adam;
  adam.lr = cfg.lr;

  auto critic = [&](ad::Tape<double>& tape, const Eigen::MatrixXd& x, int iters) {
    auto W1 = ad::spectral_normalize(tape.param(w1), sn1, iters);
    auto W2 = ad::spectral_normalize(tape.param(w2), sn2, iters);
    auto h = ad::elu(ad::linear(W1, tape.constant(x), tape.param(b1)));
    return ad::linear(W2, h, tape.param(b2));
  };
  std::mt19937_64 rng(derive_seed(cfg.seed, {hash_string("critic.batches")}));
  std::uniform_int_distribution<Eigen::Index> ia(0, train_a.cols() - 1), ib(0, train_b.cols() - 1);
  Eigen::MatrixXd xa(dim, cfg.batch), xb(dim, cfg.batch);
  for (int step = 0; step < cfg.steps; ++step) {
    for (int k = 0; k < cfg.batch; ++k) {
      xa.col(k) = train_a.col(ia(rng));
      xb.col(k) = train_b.col(ib(rng));
    }
    ad::Tape<double> tape;
    auto da = critic(tape, xa, cfg.power_iters);
    auto db = critic(tape, xb, 0);
    auto loss = ad::sub(ad::mean(da), ad::mean(db));
    ad::zero_grad(params);
    tape.backward(loss);
    ad::adam_step(params, adam);
  }
  ad::Tape<double> tape;
  tape.set_grad_enabled(false);
  const double ea = critic(tape, eval_a, 0).value().mean();
  const double eb = critic(tape, eval_b, 0).value().mean();
  return eb - ea;
}

}  // namespace amtidin::boundlab
