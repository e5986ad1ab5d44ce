#include "amtidin/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <random>
#include <sstream>

#include "amtidin/ad/ops.hpp"
#include "amtidin/common.hpp"
#include "amtidin/model.hpp"
#include "amtidin/objective.hpp"

namespace amtidin::gradcheck {

using ad::Mat;
using ad::Shape;
using ad::Tape;
using ad::Var;

namespace {

double rel_err(double a, double n) { return std::abs(a - n) / std::max({std::abs(a), std::abs(n), kRelFloor}); }

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}
  Mat<double> mat(Eigen::Index r, Eigen::Index c, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Mat<double> m(r, c);
    for (Eigen::Index k = 0; k < m.size(); ++k) m(k) = u(gen_);
    return m;
  }
  std::vector<int> labels(int n, int classes) {
    std::uniform_int_distribution<int> u(0, classes - 1);
    std::vector<int> y(static_cast<std::size_t>(n));
    for (auto& v : y) v = u(gen_);
    return y;
  }
  std::mt19937_64& gen() { return gen_; }

 private:
  std::mt19937_64 gen_;
};

// Scalar probe sum(R .* y) with a fixed random R, so every output entry matters.
Var<double> probe(Tape<double>& tape, Var<double> y, std::uint64_t seed) {
  Rng r(seed);
  return ad::sum(ad::mul(y, tape.constant(r.mat(y.value().rows(), y.value().cols()), y.shape())));
}

}  // namespace

GradcheckResult check_function(const std::string& name, const std::vector<Mat<double>>& leaves,
                               const std::vector<Shape>& shapes, const LossFn& f, double tolerance, double eps,
                               double numeric_sign) {
  GradcheckResult r;
  r.name = name;
  r.tolerance = tolerance;
  std::vector<Mat<double>> analytic;
  {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (std::size_t k = 0; k < leaves.size(); ++k) vars.push_back(tape.input(leaves[k], shapes[k]));
    auto loss = f(tape, vars);
    tape.backward(loss);
    for (auto& v : vars) analytic.push_back(v.grad());
  }
  auto eval = [&](const std::vector<Mat<double>>& vals) {
    Tape<double> tape;
    tape.set_grad_enabled(false);
    std::vector<Var<double>> vars;
    for (std::size_t k = 0; k < vals.size(); ++k) vars.push_back(tape.constant(vals[k], shapes[k]));
    return f(tape, vars).item();
  };
  std::vector<Mat<double>> work = leaves;
  for (std::size_t k = 0; k < leaves.size(); ++k)
    for (Eigen::Index j = 0; j < leaves[k].size(); ++j) {
      const double x0 = work[k](j);
      work[k](j) = x0 + eps;
      const double fp = eval(work);
      work[k](j) = x0 - eps;
      const double fm = eval(work);
      work[k](j) = x0;
      const double numeric = numeric_sign * (fp - fm) / (2.0 * eps);
      r.max_rel_err = std::max(r.max_rel_err, rel_err(analytic[k](j), numeric));
      ++r.coordinates;
    }
  r.pass = r.max_rel_err <= tolerance;
  return r;
}

std::vector<GradcheckResult> op_suite(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<GradcheckResult> out;
  const std::uint64_t ps = derive_seed(seed, {hash_string("probe")});
  auto unary = [&](const std::string& name, Mat<double> x, Shape s, std::function<Var<double>(Var<double>)> op) {
    out.push_back(check_function(name, {std::move(x)}, {std::move(s)},
                                 [&](Tape<double>& t, const std::vector<Var<double>>& v) { return probe(t, op(v[0]), ps); }));
  };
  auto binary = [&](const std::string& name, Mat<double> a, Shape sa, Mat<double> b, Shape sb,
                    std::function<Var<double>(Var<double>, Var<double>)> op) {
    out.push_back(check_function(name, {std::move(a), std::move(b)}, {std::move(sa), std::move(sb)},
                                 [&](Tape<double>& t, const std::vector<Var<double>>& v) { return probe(t, op(v[0], v[1]), ps); }));
  };

  binary("add", rng.mat(3, 4), {3, 4}, rng.mat(3, 4), {3, 4}, [](auto a, auto b) { return ad::add(a, b); });
  binary("sub", rng.mat(3, 4), {3, 4}, rng.mat(3, 4), {3, 4}, [](auto a, auto b) { return ad::sub(a, b); });
  binary("mul", rng.mat(3, 4), {3, 4}, rng.mat(3, 4), {3, 4}, [](auto a, auto b) { return ad::mul(a, b); });
  unary("scale", rng.mat(3, 4), {3, 4}, [](auto a) { return ad::scale(a, -1.7); });
  binary("add_bias", rng.mat(4, 5), {4, 5}, rng.mat(4, 1), {4}, [](auto x, auto b) { return ad::add_bias(x, b); });
  binary("matmul", rng.mat(3, 4), {3, 4}, rng.mat(4, 5), {4, 5}, [](auto a, auto b) { return ad::matmul(a, b); });
  out.push_back(check_function("linear", {rng.mat(3, 4), rng.mat(4, 5), rng.mat(3, 1)}, {{3, 4}, {4, 5}, {3}},
                               [&](Tape<double>& t, const std::vector<Var<double>>& v) {
                                 return probe(t, ad::linear(v[0], v[1], v[2]), ps);
                               }));
  binary("concat", rng.mat(3, 2), {3, 2}, rng.mat(3, 4), {3, 4},
         [](auto a, auto b) { return ad::concat<double>({a, b}); });
  unary("slice_cols", rng.mat(3, 6), {3, 6}, [](auto a) { return ad::slice_cols(a, 1, 3); });
  unary("mean", rng.mat(3, 4), {3, 4}, [](auto a) { return ad::mean(a); });
  unary("sum", rng.mat(3, 4), {3, 4}, [](auto a) { return ad::sum(a); });
  binary("weighted_sum", rng.mat(1, 1), {}, rng.mat(1, 1), {},
         [](auto a, auto b) { return ad::weighted_sum<double>({a, b}, {0.3, -1.25}); });
  out.push_back(check_function("conv1d", {rng.mat(2, 2 * 9), rng.mat(3, 2 * 3), rng.mat(3, 1)}, {{2, 2, 9}, {3, 2, 3}, {3}},
                               [&](Tape<double>& t, const std::vector<Var<double>>& v) {
                                 return probe(t, ad::conv1d(v[0], v[1], v[2], 1), ps);
                               }));
  out.push_back(check_function("conv1d_nopad", {rng.mat(2, 3 * 8), rng.mat(2, 2 * 5)}, {{2, 3, 8}, {2, 2, 5}},
                               [&](Tape<double>& t, const std::vector<Var<double>>& v) {
                                 return probe(t, ad::conv1d(v[0], v[1], Var<double>{}, 0), ps);
                               }));
  {
    const ad::BatchNormState<double> base(3);
    auto bn = [&](bool training) {
      return [&, training](Tape<double>& t, const std::vector<Var<double>>& v) {
        auto st = base;
        return probe(t, ad::batchnorm1d(v[0], v[1], v[2], st, training), ps);
      };
    };
    out.push_back(check_function("batchnorm1d_train", {rng.mat(3, 4 * 5), rng.mat(3, 1, 0.5, 1.5), rng.mat(3, 1)},
                                 {{3, 4, 5}, {3}, {3}}, bn(true)));
    out.push_back(check_function("batchnorm1d_eval", {rng.mat(3, 4 * 5), rng.mat(3, 1, 0.5, 1.5), rng.mat(3, 1)},
                                 {{3, 4, 5}, {3}, {3}}, bn(false)));
    out.push_back(check_function("batchnorm1d_2d", {rng.mat(4, 6), rng.mat(4, 1, 0.5, 1.5), rng.mat(4, 1)}, {{4, 6}, {4}, {4}},
                                 [&](Tape<double>& t, const std::vector<Var<double>>& v) {
                                   ad::BatchNormState<double> st(4);
                                   return probe(t, ad::batchnorm1d(v[0], v[1], v[2], st, true), ps);
                                 }));
  }
  unary("gelu", rng.mat(4, 5, -3.0, 3.0), {4, 5}, [](auto a) { return ad::gelu(a); });
  // Keep ELU inputs away from its kink at zero.
  {
    Mat<double> x = rng.mat(4, 5, -3.0, 3.0);
    for (Eigen::Index k = 0; k < x.size(); ++k)
      if (std::abs(x(k)) < 1e-3) x(k) = 0.5;
    unary("elu", x, {4, 5}, [](auto a) { return ad::elu(a, 0.8); });
  }
  unary("sigmoid", rng.mat(4, 5, -4.0, 4.0), {4, 5}, [](auto a) { return ad::sigmoid(a); });
  {
    const auto y = rng.labels(6, 5);
    out.push_back(check_function("softmax_cross_entropy", {rng.mat(5, 6, -3.0, 3.0)}, {{5, 6}},
                                 [&](Tape<double>&, const std::vector<Var<double>>& v) {
                                   return ad::softmax_cross_entropy(v[0], y);
                                 }));
  }
  unary("dropout", rng.mat(4, 6), {4, 6}, [&](auto a) { return ad::dropout(a, 0.3, true, seed); });
  unary("adaptive_avg_pool1d", rng.mat(3, 2 * 7), {3, 2, 7}, [](auto a) { return ad::adaptive_avg_pool1d(a); });
  out.push_back(check_function("grad_reverse", {rng.mat(3, 4)}, {{3, 4}},
                               [&](Tape<double>& t, const std::vector<Var<double>>& v) {
                                 return probe(t, ad::grad_reverse(v[0]), ps);
                               },
                               kOpTolerance, 1e-6, -1.0));
  unary("grad_reverse_twice", rng.mat(3, 4), {3, 4}, [](auto a) { return ad::grad_reverse(ad::grad_reverse(a)); });
  {
    // Converge u, v first so the frozen-vector derivative is the full derivative.
    const Mat<double> W = rng.mat(5, 4);
    ad::SpectralNormState<double> primed;
    primed.seed = derive_seed(seed, {hash_string("sn")});
    {
      Tape<double> t;
      ad::spectral_normalize(t.constant(W, {5, 4}), primed, 500);
    }
    out.push_back(check_function("spectral_normalize", {W}, {{5, 4}},
                                 [&](Tape<double>& t, const std::vector<Var<double>>& v) {
                                   auto st = primed;
                                   return probe(t, ad::spectral_normalize(v[0], st, 0), ps);
                                 }));
  }
  return out;
}

GradcheckResult end_to_end(std::uint64_t seed, int coords, const std::string& mode) {
  model::ArchConfig arch;
  arch.n = 24;
  arch.m_classes = 4;
  arch.i_classes = 3;
  arch.feature_dim = 12;
  arch.hyp_hidden = 10;
  arch.hyp_out = 6;
  arch.dropout = 0.2;
  arch.adv_output_mode = model::adv_mode_from_name(mode);
  model::AmtidinModel<double> base = model::build<double>(arch, seed);
  // Non-trivial BN affine and biases so every path carries gradient.
  Rng rng(derive_seed(seed, {hash_string("e2e")}));
  for (auto* p : base.parameters())
    if (p->name.find(".bias") != std::string::npos || p->name.find("bn") != std::string::npos)
      p->value += rng.mat(p->value.rows(), p->value.cols(), -0.2, 0.2);
  for (auto& d : base.disc) {
    Tape<double> t;
    ad::spectral_normalize(t.param(d->w1), d->sn1, 500);
    ad::spectral_normalize(t.param(d->w2), d->sn2, 500);
  }

  const int B = 3;
  dataio::TaskBatch batch;
  batch.n = arch.n;
  for (Task t : kAllTasks) {
    batch.x[index(t)] = rng.mat(2, B * arch.n).cast<float>();
    batch.y[index(t)] = rng.labels(B, arch.classes(t));
  }
  objective::ObjectiveConfig ocfg;
  ocfg.adv_mode = arch.adv_output_mode;
  objective::TaskRelationMatrix alpha;
  alpha << 0.6, 0.3, 0.1, 0.2, 0.5, 0.3, 0.25, 0.25, 0.5;

  auto loss_of = [&](model::AmtidinModel<double>& m, Tape<double>& tape, const objective::ObjectiveConfig& oc) {
    model::ForwardOptions fo;
    fo.training = true;
    fo.dropout_seed = seed;
    auto out = model::forward_train(m, tape, batch, fo);
    return objective::total_objective(out, batch, alpha, oc);
  };
  objective::ObjectiveConfig ce_only = ocfg;
  ce_only.rho = 0.0;

  model::AmtidinModel<double> work = base;
  auto params = work.parameters();
  for (auto* p : params) p->zero_grad();
  {
    Tape<double> tape;
    auto l = loss_of(work, tape, ocfg);
    tape.backward(l);
  }
  std::vector<std::pair<std::size_t, Eigen::Index>> picks;
  std::size_t total = 0;
  for (auto* p : params) total += static_cast<std::size_t>(p->size());
  std::uniform_int_distribution<std::size_t> pick(0, total - 1);
  for (int c = 0; c < coords; ++c) {
    std::size_t flat = pick(rng.gen());
    for (std::size_t k = 0; k < params.size(); ++k) {
      const auto sz = static_cast<std::size_t>(params[k]->size());
      if (flat < sz) {
        picks.emplace_back(k, static_cast<Eigen::Index>(flat));
        break;
      }
      flat -= sz;
    }
  }

  GradcheckResult r;
  r.name = "end_to_end_" + mode;
  r.tolerance = kEndToEndTolerance;
  const double eps = 1e-6;
  for (const auto& [k, j] : picks) {
    auto value_at = [&](double delta, const objective::ObjectiveConfig& oc) {
      model::AmtidinModel<double> m = base;
      m.parameters()[k]->value(j) += delta;
      Tape<double> tape;
      tape.set_grad_enabled(false);
      return loss_of(m, tape, oc).item();
    };
    const double d_total = (value_at(eps, ocfg) - value_at(-eps, ocfg)) / (2.0 * eps);
    const double d_ce = (value_at(eps, ce_only) - value_at(-eps, ce_only)) / (2.0 * eps);
    const bool disc_param = params[k]->name.rfind("disc.", 0) == 0;
    const double numeric = d_ce + (disc_param ? 1.0 : -1.0) * (d_total - d_ce);
    r.max_rel_err = std::max(r.max_rel_err, rel_err(params[k]->grad(j), numeric));
    ++r.coordinates;
  }
  r.pass = r.max_rel_err <= r.tolerance;
  return r;
}

std::string SuiteReport::to_text() const {
  std::ostringstream os;
  os << std::scientific << std::setprecision(3);
  for (const auto& r : results)
    os << (r.pass ? "PASS " : "FAIL ") << std::left << std::setw(26) << r.name << " max_rel_err=" << r.max_rel_err
       << " tol=" << r.tolerance << " coords=" << r.coordinates << "\n";
  os << "max op rel err " << max_op_err << ", max end-to-end rel err " << max_end_to_end_err << "\n";
  return os.str();
}

SuiteReport run_suite(std::uint64_t seed) {
  SuiteReport rep;
  rep.results = op_suite(seed);
  for (const auto& r : rep.results) rep.max_op_err = std::max(rep.max_op_err, r.max_rel_err);
  for (const char* mode : {"sigmoid", "logit"}) {
    rep.results.push_back(end_to_end(seed, 16, mode));
    rep.max_end_to_end_err = std::max(rep.max_end_to_end_err, rep.results.back().max_rel_err);
  }
  rep.all_pass = std::all_of(rep.results.begin(), rep.results.end(), [](const auto& r) { return r.pass; });
  return rep;
}

}  // namespace amtidin::gradcheck
