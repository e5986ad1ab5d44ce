#include "amtidin/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace amtidin::model {

namespace {

constexpr std::array<std::string_view, 6> kVariantNames{"AMTIDIN", "STL_ID", "STL_MI", "STL_II", "MTL_Vanilla",
                                                        "MTL_NonAdv"};
constexpr std::array<int, 3> kConvChannels{32, 64, 0};  // last = feature_dim
constexpr std::array<int, 3> kConvKernels{3, 5, 7};

std::string pair_name(int p) {
  return std::string(task_name(static_cast<Task>(kTaskPairs[p][0]))) + "_" +
         std::string(task_name(static_cast<Task>(kTaskPairs[p][1])));
}

template <typename S>
void kaiming_uniform(Parameter<S>& w, Parameter<S>& b, int fan_in, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> u(-bound, bound);
  for (Eigen::Index k = 0; k < w.value.size(); ++k) w.value(k) = static_cast<S>(u(rng));
  b.value.setZero();
}

template <typename S>
void init_linear(Parameter<S>& w, Parameter<S>& b, const std::string& name, int out, int in, std::uint64_t seed) {
  w = Parameter<S>(name + ".weight", {out, in});
  b = Parameter<S>(name + ".bias", {out});
  kaiming_uniform(w, b, in, derive_seed(seed, {hash_string(name)}));
}

template <typename S>
Var<S> lin(Tape<S>& tape, Parameter<S>& w, Parameter<S>& b, Var<S> x) {
  return ad::linear(tape.param(w), x, tape.param(b));
}

}  // namespace

std::string_view variant_name(Variant v) { return kVariantNames.at(static_cast<std::size_t>(v)); }

Variant variant_from_name(std::string_view s) {
  for (std::size_t k = 0; k < kVariantNames.size(); ++k)
    if (kVariantNames[k] == s) return static_cast<Variant>(k);
  throw ConfigError("unknown variant '" + std::string(s) + "'");
}

std::string_view adv_mode_name(AdvOutputMode m) { return m == AdvOutputMode::Sigmoid ? "sigmoid" : "logit"; }

AdvOutputMode adv_mode_from_name(std::string_view s) {
  if (s == "sigmoid") return AdvOutputMode::Sigmoid;
  if (s == "logit") return AdvOutputMode::Logit;
  throw ConfigError("unknown adversarial output mode '" + std::string(s) + "'");
}

int ArchConfig::classes(Task t) const {
  switch (t) {
    case Task::ID:
      return 2;
    case Task::MI:
      return m_classes;
    case Task::II:
      return i_classes;
  }
  return 0;
}

void ArchConfig::validate() const {
  if (n < 1 || m_classes < 1 || i_classes < 1 || feature_dim < 1 || hyp_hidden < 1 || hyp_out < 1)
    throw ConfigError("ArchConfig: dimensions must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("ArchConfig: dropout must lie in [0,1)");
  if (sn_power_iters < 1) throw ConfigError("ArchConfig: sn_power_iters must be >= 1");
}

std::array<bool, 3> VariantLayout::streams() const {
  std::array<bool, 3> s{};
  for (int t = 0; t < 3; ++t)
    for (int i = 0; i < 3; ++i)
      if (heads[t][i]) s[i] = true;
  return s;
}

VariantLayout layout_for(Variant v) {
  VariantLayout l;
  switch (v) {
    case Variant::AMTIDIN:
    case Variant::MTL_NonAdv:
      l.hypotheses = {true, true, true};
      for (auto& row : l.heads) row = {true, true, true};
      l.discriminators = v == Variant::AMTIDIN;
      l.learns_alpha = true;
      break;
    case Variant::MTL_Vanilla:
      l.hypotheses = {true, true, true};
      for (int t = 0; t < 3; ++t) l.heads[t][t] = true;
      break;
    case Variant::STL_ID:
    case Variant::STL_MI:
    case Variant::STL_II: {
      const int t = index(*stl_task(v));
      l.hypotheses[t] = true;
      l.heads[t][t] = true;
      break;
    }
  }
  return l;
}

std::optional<Task> stl_task(Variant v) {
  switch (v) {
    case Variant::STL_ID:
      return Task::ID;
    case Variant::STL_MI:
      return Task::MI;
    case Variant::STL_II:
      return Task::II;
    default:
      return std::nullopt;
  }
}

template <typename S>
std::vector<Parameter<S>*> AmtidinModel<S>::parameters() {
  std::vector<Parameter<S>*> out;
  for (auto& c : conv)
    for (auto* p : {&c.weight, &c.bias, &c.gamma, &c.beta}) out.push_back(p);
  for (auto& h : hyp)
    if (h)
      for (auto* p : {&h->res_w, &h->res_b, &h->skip_w, &h->skip_b, &h->l2_w, &h->l2_b, &h->l3_w, &h->l3_b})
        out.push_back(p);
  for (auto& row : heads)
    for (auto& h : row)
      if (h)
        for (auto* p : {&h->w, &h->b}) out.push_back(p);
  for (auto& d : disc)
    if (d)
      for (auto* p : {&d->w1, &d->b1, &d->w2, &d->b2}) out.push_back(p);
  return out;
}

template <typename S>
std::vector<const Parameter<S>*> AmtidinModel<S>::parameters() const {
  auto ps = const_cast<AmtidinModel<S>*>(this)->parameters();
  return {ps.begin(), ps.end()};
}

template <typename S>
std::size_t AmtidinModel<S>::num_parameters() const {
  std::size_t n = 0;
  for (const auto* p : parameters()) n += static_cast<std::size_t>(p->size());
  return n;
}

template <typename S>
std::size_t AmtidinModel<S>::num_discriminator_parameters() const {
  std::size_t n = 0;
  for (const auto& d : disc)
    if (d) n += static_cast<std::size_t>(d->w1.size() + d->b1.size() + d->w2.size() + d->b2.size());
  return n;
}

template <typename S>
AmtidinModel<S> build(const ArchConfig& arch, std::uint64_t seed) {
  arch.validate();
  AmtidinModel<S> m;
  m.arch = arch;
  const auto lay = layout_for(arch.variant);
  int cin = 2;
  for (int k = 0; k < 3; ++k) {
    const int cout = k == 2 ? arch.feature_dim : kConvChannels[k];
    const int ks = kConvKernels[k];
    const std::string name = "extractor.conv" + std::to_string(k);
    auto& c = m.conv[k];
    c.weight = Parameter<S>(name + ".weight", {cout, cin, ks});
    c.bias = Parameter<S>(name + ".bias", {cout});
    kaiming_uniform(c.weight, c.bias, cin * ks, derive_seed(seed, {hash_string(name)}));
    c.gamma = Parameter<S>("extractor.bn" + std::to_string(k) + ".weight", {cout});
    c.gamma.value.setOnes();
    c.beta = Parameter<S>("extractor.bn" + std::to_string(k) + ".bias", {cout});
    c.bn = ad::BatchNormState<S>(cout);
    c.padding = ks / 2;
    cin = cout;
  }
  for (Task t : kAllTasks) {
    const int ti = index(t);
    if (!lay.hypotheses[ti]) continue;
    const std::string base = "hyp." + std::string(task_name(t));
    auto& h = m.hyp[ti].emplace();
    init_linear(h.res_w, h.res_b, base + ".res", arch.hyp_hidden, arch.feature_dim, seed);
    init_linear(h.skip_w, h.skip_b, base + ".skip", arch.hyp_hidden, arch.feature_dim, seed);
    init_linear(h.l2_w, h.l2_b, base + ".l2", arch.feature_dim, arch.hyp_hidden, seed);
    init_linear(h.l3_w, h.l3_b, base + ".l3", arch.hyp_out, arch.feature_dim, seed);
  }
  for (Task t : kAllTasks)
    for (Task i : kAllTasks) {
      if (!lay.heads[index(t)][index(i)]) continue;
      auto& h = m.heads[index(t)][index(i)].emplace();
      init_linear(h.w, h.b, "head." + std::string(task_name(t)) + "." + std::string(task_name(i)), arch.classes(i),
                  arch.hyp_out, seed);
    }
  if (lay.discriminators) {
    for (int p = 0; p < 3; ++p) {
      const std::string base = "disc." + pair_name(p);
      auto& d = m.disc[p].emplace();
      init_linear(d.w1, d.b1, base + ".l1", 64, arch.feature_dim, seed);
      init_linear(d.w2, d.b2, base + ".l2", 1, 64, seed);
      d.sn1.seed = derive_seed(seed, {hash_string(base + ".l1.sn")});
      d.sn2.seed = derive_seed(seed, {hash_string(base + ".l2.sn")});
    }
  }
  return m;
}

template <typename S>
AmtidinModel<S> build_baseline(Variant v, ArchConfig arch, std::uint64_t seed) {
  arch.variant = v;
  return build<S>(arch, seed);
}

std::size_t expected_parameter_count(const ArchConfig& a) {
  const auto lay = layout_for(a.variant);
  auto linear = [](std::size_t out, std::size_t in) { return out * in + out; };
  std::size_t n = 0;
  n += 32 * 2 * 3 + 32 + 2 * 32;
  n += 64 * 32 * 5 + 64 + 2 * 64;
  n += static_cast<std::size_t>(a.feature_dim) * 64 * 7 + 3 * static_cast<std::size_t>(a.feature_dim);
  const std::size_t hyp = 2 * linear(a.hyp_hidden, a.feature_dim) + linear(a.feature_dim, a.hyp_hidden) +
                          linear(a.hyp_out, a.feature_dim);
  for (int t = 0; t < 3; ++t) {
    if (lay.hypotheses[t]) n += hyp;
    for (int i = 0; i < 3; ++i)
      if (lay.heads[t][i]) n += linear(a.classes(static_cast<Task>(i)), a.hyp_out);
  }
  if (lay.discriminators) n += 3 * (linear(64, a.feature_dim) + linear(1, 64));
  return n;
}

template <typename T, typename S>
AmtidinModel<T> cast_model(const AmtidinModel<S>& src) {
  AmtidinModel<T> dst = build<T>(src.arch, 0);
  auto sp = src.parameters();
  auto dp = dst.parameters();
  for (std::size_t k = 0; k < sp.size(); ++k) dp[k]->value = sp[k]->value.template cast<T>();
  for (int k = 0; k < 3; ++k) {
    dst.conv[k].bn.running_mean = src.conv[k].bn.running_mean.template cast<T>();
    dst.conv[k].bn.running_var = src.conv[k].bn.running_var.template cast<T>();
    dst.conv[k].bn.momentum = src.conv[k].bn.momentum;
    dst.conv[k].bn.eps = src.conv[k].bn.eps;
  }
  for (int p = 0; p < 3; ++p) {
    if (!src.disc[p]) continue;
    auto cp = [](const ad::SpectralNormState<S>& a, ad::SpectralNormState<T>& b) {
      b.u = a.u.template cast<T>();
      b.v = a.v.template cast<T>();
      b.sigma = static_cast<T>(a.sigma);
      b.seed = a.seed;
    };
    cp(src.disc[p]->sn1, dst.disc[p]->sn1);
    cp(src.disc[p]->sn2, dst.disc[p]->sn2);
  }
  return dst;
}

template <typename S>
Var<S> extract(AmtidinModel<S>& m, Tape<S>& tape, const Mat<S>& x, int batch, bool training) {
  if (x.rows() != 2 || batch < 1 || x.cols() != static_cast<Eigen::Index>(batch) * m.arch.n)
    throw ShapeError("extract: input block " + std::to_string(x.rows()) + "x" + std::to_string(x.cols()) +
                     " does not hold " + std::to_string(batch) + " records of length " + std::to_string(m.arch.n));
  Var<S> h = tape.constant(x, {2, batch, m.arch.n});
  for (auto& c : m.conv) {
    h = ad::conv1d(h, tape.param(c.weight), tape.param(c.bias), c.padding);
    h = ad::batchnorm1d(h, tape.param(c.gamma), tape.param(c.beta), c.bn, training);
    h = ad::gelu(h);
  }
  return ad::adaptive_avg_pool1d(h);
}

template <typename S>
Var<S> apply_hypothesis(AmtidinModel<S>& m, Tape<S>& tape, Task t, Var<S> f, bool training, std::uint64_t seed) {
  auto& hp = m.hyp[index(t)];
  if (!hp) throw ConfigError("apply_hypothesis: variant has no hypothesis for " + std::string(task_name(t)));
  auto& h = *hp;
  Var<S> main = ad::dropout(ad::gelu(lin(tape, h.res_w, h.res_b, f)), m.arch.dropout, training, seed);
  Var<S> r = ad::add(main, lin(tape, h.skip_w, h.skip_b, f));
  r = ad::gelu(lin(tape, h.l2_w, h.l2_b, r));
  return ad::gelu(lin(tape, h.l3_w, h.l3_b, r));
}

template <typename S>
Var<S> apply_head(AmtidinModel<S>& m, Tape<S>& tape, Task t, Task i, Var<S> h) {
  auto& hd = m.heads[index(t)][index(i)];
  if (!hd) throw ConfigError("apply_head: variant has no head (" + std::string(task_name(t)) + "," +
                             std::string(task_name(i)) + ")");
  return lin(tape, hd->w, hd->b, h);
}

template <typename S>
DiscWeights<S> discriminator_weights(AmtidinModel<S>& m, Tape<S>& tape, int p, bool training) {
  auto& dp = m.disc.at(static_cast<std::size_t>(p));
  if (!dp) throw ConfigError("discriminator_weights: variant has no discriminators");
  const int iters = training ? m.arch.sn_power_iters : 0;
  // In eval mode an all-zero weight is the zero map; its normalization is undefined.
  auto normalized = [&](Parameter<S>& p, ad::SpectralNormState<S>& st) {
    if (!training && p.value.isZero()) return tape.constant(p.value, p.shape);
    return ad::spectral_normalize(tape.param(p), st, iters);
  };
  DiscWeights<S> w;
  w.w1 = normalized(dp->w1, dp->sn1);
  w.b1 = tape.param(dp->b1);
  w.w2 = normalized(dp->w2, dp->sn2);
  w.b2 = tape.param(dp->b2);
  return w;
}

template <typename S>
Var<S> discriminator_logit(Tape<S>&, const DiscWeights<S>& w, Var<S> f) {
  Var<S> h = ad::grad_reverse(f);
  h = ad::elu(ad::linear(w.w1, h, w.b1));
  return ad::linear(w.w2, h, w.b2);
}

template <typename S>
ForwardTrainOutput<S> forward_train(AmtidinModel<S>& m, Tape<S>& tape, const dataio::TaskBatch& batch,
                                    const ForwardOptions& opt) {
  if (batch.n != m.arch.n)
    throw ShapeError("forward_train: batch length " + std::to_string(batch.n) + " differs from model length " +
                     std::to_string(m.arch.n));
  const auto lay = m.layout();
  const auto used = lay.streams();
  std::array<bool, 3> on{};
  for (int i = 0; i < 3; ++i) on[i] = used[i] && opt.streams[i] && !batch.y[i].empty();

  ForwardTrainOutput<S> out;
  for (int i = 0; i < 3; ++i) {
    if (!on[i]) continue;
    const int b = batch.batch_size(static_cast<Task>(i));
    if constexpr (std::is_same_v<S, float>)
      out.features[i] = extract(m, tape, batch.x[i], b, opt.training);
    else
      out.features[i] = extract(m, tape, Mat<S>(batch.x[i].template cast<S>()), b, opt.training);
  }
  for (int t = 0; t < 3; ++t) {
    if (!lay.hypotheses[t]) continue;
    for (int i = 0; i < 3; ++i) {
      if (!lay.heads[t][i] || !on[i]) continue;
      const auto seed = derive_seed(opt.dropout_seed, {static_cast<std::uint64_t>(t), static_cast<std::uint64_t>(i)});
      Var<S> h = apply_hypothesis(m, tape, static_cast<Task>(t), out.features[i], opt.training, seed);
      out.logits[t][i] = apply_head(m, tape, static_cast<Task>(t), static_cast<Task>(i), h);
    }
  }
  if (lay.discriminators) {
    for (int p = 0; p < 3; ++p) {
      const int a = kTaskPairs[p][0], b = kTaskPairs[p][1];
      if (!on[a] || !on[b]) continue;
      const auto w = discriminator_weights(m, tape, p, opt.training);
      out.d_a_logit[p] = discriminator_logit(tape, w, out.features[a]);
      out.d_b_logit[p] = discriminator_logit(tape, w, out.features[b]);
      out.d_a_sigmoid[p] = ad::sigmoid(out.d_a_logit[p]);
      out.d_b_sigmoid[p] = ad::sigmoid(out.d_b_logit[p]);
    }
  }
  return out;
}

template <typename S>
Predictions predict(AmtidinModel<S>& m, const Mat<S>& x, int batch) {
  Tape<S> tape;
  tape.set_grad_enabled(false);
  const auto lay = m.layout();
  Var<S> f = extract(m, tape, x, batch, false);
  Predictions out;
  for (Task t : kAllTasks) {
    if (!lay.heads[index(t)][index(t)]) continue;
    Var<S> h = apply_hypothesis(m, tape, t, f, false, 0);
    out.labels[index(t)] = ad::argmax_columns<S>(apply_head(m, tape, t, t, h).value());
  }
  return out;
}

Mat<float> eval_features(AmtidinModel<float>& m, const dataio::Dataset& ds, const std::vector<std::size_t>& indices,
                         int chunk) {
  if (chunk < 1) throw ConfigError("eval_features: chunk must be >= 1");
  if (ds.n != m.arch.n)
    throw ShapeError("eval_features: dataset length " + std::to_string(ds.n) + " differs from model length " +
                     std::to_string(m.arch.n));
  Mat<float> F(m.arch.feature_dim, static_cast<Eigen::Index>(indices.size()));
  for (std::size_t s = 0; s < indices.size(); s += static_cast<std::size_t>(chunk)) {
    const std::size_t e = std::min(indices.size(), s + static_cast<std::size_t>(chunk));
    std::vector<std::size_t> part(indices.begin() + static_cast<std::ptrdiff_t>(s),
                                  indices.begin() + static_cast<std::ptrdiff_t>(e));
    Tape<float> tape;
    tape.set_grad_enabled(false);
    const auto x = dataio::pack_inputs(ds, part);
    F.middleCols(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(e - s)) =
        extract(m, tape, x, static_cast<int>(e - s), false).value();
  }
  return F;
}

Mat<float> eval_logits(AmtidinModel<float>& m, Task t, Task i, const Mat<float>& F) {
  Tape<float> tape;
  tape.set_grad_enabled(false);
  Var<float> f = tape.constant(F);
  return apply_head(m, tape, t, i, apply_hypothesis(m, tape, t, f, false, 0)).value();
}

Mat<float> eval_disc_logits(AmtidinModel<float>& m, int p, const Mat<float>& F) {
  Tape<float> tape;
  tape.set_grad_enabled(false);
  const auto w = discriminator_weights(m, tape, p, false);
  return discriminator_logit(tape, w, tape.constant(F)).value();
}

#define AMTIDIN_INSTANTIATE_MODEL(S)                                                                         \
  template class AmtidinModel<S>;                                                                            \
  template AmtidinModel<S> build<S>(const ArchConfig&, std::uint64_t);                                       \
  template AmtidinModel<S> build_baseline<S>(Variant, ArchConfig, std::uint64_t);                            \
  template Var<S> extract(AmtidinModel<S>&, Tape<S>&, const Mat<S>&, int, bool);                             \
  template Var<S> apply_hypothesis(AmtidinModel<S>&, Tape<S>&, Task, Var<S>, bool, std::uint64_t);           \
  template Var<S> apply_head(AmtidinModel<S>&, Tape<S>&, Task, Task, Var<S>);                                \
  template DiscWeights<S> discriminator_weights(AmtidinModel<S>&, Tape<S>&, int, bool);                      \
  template Var<S> discriminator_logit(Tape<S>&, const DiscWeights<S>&, Var<S>);                              \
  template ForwardTrainOutput<S> forward_train(AmtidinModel<S>&, Tape<S>&, const dataio::TaskBatch&,         \
                                               const ForwardOptions&);                                       \
  template Predictions predict(AmtidinModel<S>&, const Mat<S>&, int);

AMTIDIN_INSTANTIATE_MODEL(float)
AMTIDIN_INSTANTIATE_MODEL(double)

template AmtidinModel<double> cast_model<double, float>(const AmtidinModel<float>&);
template AmtidinModel<float> cast_model<float, double>(const AmtidinModel<double>&);

}  // namespace amtidin::model
