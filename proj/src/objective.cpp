#include "amtidin/objective.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

namespace amtidin::objective {

TaskRelationMatrix identity_alpha() { return TaskRelationMatrix::Identity(); }

double simplex_violation(const TaskRelationMatrix& alpha) {
  double v = 0.0;
  for (int t = 0; t < 3; ++t) {
    v = std::max(v, std::abs(alpha.row(t).sum() - 1.0));
    v = std::max(v, -alpha.row(t).minCoeff());
  }
  return v;
}

void ObjectiveConfig::validate() const {
  double ls = 0.0, bs = 0.0;
  for (double l : lambda) {
    if (!(l >= 0.0)) throw ConfigError("ObjectiveConfig: lambda entries must be >= 0");
    ls += l;
  }
  if (std::abs(ls - 1.0) > 1e-9) throw ConfigError("ObjectiveConfig: lambda must sum to 1");
  if (!(rho >= 0.0)) throw ConfigError("ObjectiveConfig: rho must be >= 0");
  if (!(c1 >= 0.0)) throw ConfigError("ObjectiveConfig: C1 must be >= 0");
  for (double b : beta) {
    if (!(b > 0.0)) throw ConfigError("ObjectiveConfig: beta entries must be > 0");
    bs += b;
  }
  if (std::abs(bs - 1.0) > 1e-9) throw ConfigError("ObjectiveConfig: beta must sum to 1");
  if (pgd.max_iters < 1 || !(pgd.step > 0.0) || !(pgd.tol > 0.0)) throw ConfigError("ObjectiveConfig: invalid PGD settings");
}

template <typename S>
ad::Var<S> adversarial_pair_loss(ad::Var<S> d_t, ad::Var<S> d_i) {
  if (d_t.value().size() == 0 || d_i.value().size() == 0) throw ShapeError("adversarial_pair_loss: empty batch");
  return ad::sub(ad::mean(d_t), ad::mean(d_i));
}

template <typename S>
ad::Var<S> alpha_weighted_loss(const model::ForwardTrainOutput<S>& out, const dataio::TaskBatch& batch,
                               const Eigen::Vector3d& alpha_t, Task t) {
  std::vector<ad::Var<S>> terms;
  std::vector<S> weights;
  for (int i = 0; i < 3; ++i) {
    const auto& z = out.logits[index(t)][i];
    if (!z.valid()) continue;
    terms.push_back(ad::softmax_cross_entropy(z, batch.y[i]));
    weights.push_back(static_cast<S>(alpha_t(i)));
  }
  if (terms.empty()) throw ConfigError("alpha_weighted_loss: no heads for task " + std::string(task_name(t)));
  return ad::weighted_sum(terms, weights);
}

template <typename S>
LossTerms<S> loss_terms(const model::ForwardTrainOutput<S>& out, const dataio::TaskBatch& batch,
                        model::AdvOutputMode mode) {
  LossTerms<S> lt;
  for (int t = 0; t < 3; ++t)
    for (int i = 0; i < 3; ++i)
      if (out.logits[t][i].valid()) lt.ce[t][i] = ad::softmax_cross_entropy(out.logits[t][i], batch.y[i]);
  const bool sig = mode == model::AdvOutputMode::Sigmoid;
  for (int p = 0; p < 3; ++p) {
    const auto& da = sig ? out.d_a_sigmoid[p] : out.d_a_logit[p];
    const auto& db = sig ? out.d_b_sigmoid[p] : out.d_b_logit[p];
    if (da.valid() && db.valid()) lt.adv[p] = adversarial_pair_loss(da, db);
  }
  return lt;
}

double pair_weight(const TaskRelationMatrix& alpha, const ObjectiveConfig& cfg, int p) {
  const int a = kTaskPairs[p][0], b = kTaskPairs[p][1];
  return cfg.rho * (cfg.lambda[a] * alpha(a, b) + cfg.lambda[b] * alpha(b, a));
}

template <typename S>
ad::Var<S> total_objective(const LossTerms<S>& lt, const TaskRelationMatrix& alpha, const ObjectiveConfig& cfg) {
  std::vector<ad::Var<S>> terms;
  std::vector<S> weights;
  for (int t = 0; t < 3; ++t)
    for (int i = 0; i < 3; ++i) {
      if (!lt.ce[t][i].valid()) continue;
      terms.push_back(lt.ce[t][i]);
      weights.push_back(static_cast<S>(cfg.lambda[t] * alpha(t, i)));
    }
  for (int p = 0; p < 3; ++p) {
    if (!lt.adv[p].valid()) continue;
    terms.push_back(lt.adv[p]);
    weights.push_back(static_cast<S>(pair_weight(alpha, cfg, p)));
  }
  if (terms.empty()) throw ConfigError("total_objective: no loss terms");
  return ad::weighted_sum(terms, weights);
}

template <typename S>
ad::Var<S> total_objective(const model::ForwardTrainOutput<S>& out, const dataio::TaskBatch& batch,
                           const TaskRelationMatrix& alpha, const ObjectiveConfig& cfg) {
  return total_objective(loss_terms(out, batch, cfg.adv_mode), alpha, cfg);
}

double objective_value(const std::array<std::array<double, 3>, 3>& ce, const std::array<double, 3>& adv_loss,
                       const TaskRelationMatrix& alpha, const ObjectiveConfig& cfg) {
  double v = 0.0;
  for (int t = 0; t < 3; ++t)
    for (int i = 0; i < 3; ++i)
      if (!std::isnan(ce[t][i])) v += cfg.lambda[t] * alpha(t, i) * ce[t][i];
  for (int p = 0; p < 3; ++p)
    if (!std::isnan(adv_loss[p])) v += pair_weight(alpha, cfg, p) * adv_loss[p];
  return v;
}

Eigen::VectorXd project_simplex(const Eigen::VectorXd& v) {
  const Eigen::Index n = v.size();
  if (n == 0) throw ShapeError("project_simplex: empty vector");
  if (!v.allFinite()) throw NumericError("project_simplex: non-finite input");
  std::vector<double> u(v.data(), v.data() + n);
  std::sort(u.begin(), u.end(), std::greater<>());
  double css = 0.0, theta = 0.0;
  for (Eigen::Index j = 0; j < n; ++j) {
    css += u[static_cast<std::size_t>(j)];
    const double t = (css - 1.0) / static_cast<double>(j + 1);
    if (u[static_cast<std::size_t>(j)] - t > 0.0) theta = t;
  }
  return (v.array() - theta).max(0.0).matrix();
}

double phi(const Eigen::Vector3d& alpha, const Eigen::Vector3d& a, const Eigen::Vector3d& w, double rho, double c1,
           const std::array<double, 3>& beta) {
  double q = 0.0;
  for (int i = 0; i < 3; ++i) q += alpha(i) * alpha(i) / beta[i];
  return alpha.dot(a) + rho * alpha.dot(w) + c1 * std::sqrt(q);
}

AlphaSolution solve_alpha(const Eigen::Vector3d& a, const Eigen::Vector3d& w, const ObjectiveConfig& cfg,
                          const Eigen::Vector3d& warm_start) {
  if (!a.allFinite() || !w.allFinite() || !warm_start.allFinite()) throw NumericError("solve_alpha: non-finite input");
  cfg.validate();
  const Eigen::Vector3d c = a + cfg.rho * w;
  const Eigen::Array3d inv_beta(1.0 / cfg.beta[0], 1.0 / cfg.beta[1], 1.0 / cfg.beta[2]);
  auto f = [&](const Eigen::Vector3d& x) { return phi(x, a, w, cfg.rho, cfg.c1, cfg.beta); };
  auto grad = [&](const Eigen::Vector3d& x) -> Eigen::Vector3d {
    Eigen::Vector3d g = c;
    if (cfg.c1 > 0.0) {
      const double q = (x.array().square() * inv_beta).sum();
      g += (cfg.c1 / std::sqrt(q)) * (x.array() * inv_beta).matrix();
    }
    return g;
  };

  AlphaSolution sol;
  sol.alpha = project_simplex(warm_start);
  sol.objective = f(sol.alpha);
  double eta = cfg.pgd.step;
  for (int it = 1; it <= cfg.pgd.max_iters; ++it) {
    sol.iterations = it;
    const Eigen::Vector3d g = grad(sol.alpha);
    Eigen::Vector3d cand, d;
    double fc = 0.0;
    for (;;) {
      cand = project_simplex(sol.alpha - eta * g);
      d = cand - sol.alpha;
      fc = f(cand);
      if (fc <= sol.objective + g.dot(d) + d.squaredNorm() / (2.0 * eta) + 1e-15 || eta < 1e-20) break;
      eta *= 0.5;
    }
    const double move = d.cwiseAbs().maxCoeff();
    if (fc <= sol.objective) {
      sol.alpha = cand;
      sol.objective = fc;
    }
    if (move <= cfg.pgd.tol) {
      sol.converged = true;
      break;
    }
    eta = std::min(eta * 2.0, 1e8);
  }
  return sol;
}

double compute_c1(double d, double m, int T, double delta) {
  if (!(d >= 1.0)) throw ConfigError("compute_c1: pseudo-dimension must be >= 1");
  if (!(m > d)) throw ConfigError("compute_c1: sample count must exceed the pseudo-dimension");
  if (T < 1) throw ConfigError("compute_c1: T must be >= 1");
  if (!(delta > 0.0 && delta < 1.0)) throw ConfigError("compute_c1: delta must lie in (0,1)");
  return 2.0 * std::sqrt(2.0 * (d * std::log(2.0 * std::exp(1.0) * m / d) + std::log(16.0 * T / delta)) / m);
}

std::string SimilarityReport::matrix_csv(const Eigen::Matrix3d& m) const {
  std::ostringstream os;
  os.imbue(std::locale::classic());
  os << "task,ID,MI,II\n" << std::setprecision(9);
  for (int r = 0; r < 3; ++r) {
    os << task_name(static_cast<Task>(r));
    for (int c = 0; c < 3; ++c) os << "," << m(r, c);
    os << "\n";
  }
  return os.str();
}

std::string SimilarityReport::to_json() const {
  auto mat = [](const Eigen::Matrix3d& m) {
    nlohmann::json j = nlohmann::json::array();
    for (int r = 0; r < 3; ++r) j.push_back({m(r, 0), m(r, 1), m(r, 2)});
    return j;
  };
  nlohmann::json j;
  j["tasks"] = {"ID", "MI", "II"};
  j["w1_logit"] = mat(w1_logit);
  j["w1_sigmoid"] = mat(w1_sigmoid);
  j["alpha"] = mat(alpha);
  j["count_id"] = count_id;
  j["count_present"] = count_present;
  return j.dump(2);
}

SimilarityReport estimate_w1_matrix(model::AmtidinModel<float>& m, const dataio::Dataset& eval_set,
                                    const TaskRelationMatrix& alpha, int chunk) {
  std::vector<std::size_t> all(eval_set.records.size()), present;
  std::iota(all.begin(), all.end(), std::size_t{0});
  for (auto k : all)
    if (eval_set.records[k].present) present.push_back(k);
  if (all.empty() || present.empty()) throw ConfigError("estimate_w1_matrix: empty evaluation stream");
  SimilarityReport rep;
  rep.alpha = alpha;
  rep.count_id = all.size();
  rep.count_present = present.size();
  if (!m.layout().discriminators) return rep;

  // Eval-mode features depend only on the record, so compute them once.
  const model::Mat<float> F = model::eval_features(m, eval_set, all, chunk);
  model::Mat<float> Fp(F.rows(), static_cast<Eigen::Index>(present.size()));
  for (std::size_t k = 0; k < present.size(); ++k) Fp.col(static_cast<Eigen::Index>(k)) = F.col(static_cast<Eigen::Index>(present[k]));
  for (int p = 0; p < 3; ++p) {
    const int a = kTaskPairs[p][0], b = kTaskPairs[p][1];
    const auto& Fa = a == 0 ? F : Fp;
    const auto& Fb = b == 0 ? F : Fp;
    const model::Mat<float> la = model::eval_disc_logits(m, p, Fa);
    const model::Mat<float> lb = model::eval_disc_logits(m, p, Fb);
    auto mean_d = [](const model::Mat<float>& l) { return l.cast<double>().mean(); };
    auto mean_s = [](const model::Mat<float>& l) {
      return (1.0 / (1.0 + (-l.cast<double>().array()).exp())).mean();
    };
    const double wl = mean_d(lb) - mean_d(la);
    const double ws = mean_s(lb) - mean_s(la);
    rep.w1_logit(a, b) = rep.w1_logit(b, a) = wl;
    rep.w1_sigmoid(a, b) = rep.w1_sigmoid(b, a) = ws;
  }
  return rep;
}

#define AMTIDIN_INSTANTIATE_OBJECTIVE(S)                                                                         \
  template ad::Var<S> adversarial_pair_loss(ad::Var<S>, ad::Var<S>);                                             \
  template ad::Var<S> alpha_weighted_loss(const model::ForwardTrainOutput<S>&, const dataio::TaskBatch&,         \
                                          const Eigen::Vector3d&, Task);                                         \
  template LossTerms<S> loss_terms(const model::ForwardTrainOutput<S>&, const dataio::TaskBatch&,                \
                                   model::AdvOutputMode);                                                        \
  template ad::Var<S> total_objective(const LossTerms<S>&, const TaskRelationMatrix&, const ObjectiveConfig&);   \
  template ad::Var<S> total_objective(const model::ForwardTrainOutput<S>&, const dataio::TaskBatch&,             \
                                      const TaskRelationMatrix&, const ObjectiveConfig&);

AMTIDIN_INSTANTIATE_OBJECTIVE(float)
AMTIDIN_INSTANTIATE_OBJECTIVE(double)

}  // namespace amtidin::objective
