#include "amtidin/trainer.hpp"

#include <json.hpp>

#include <cmath>
#include <iomanip>
#include <locale>
#include <numeric>
#include <set>
#include <sstream>

#include "amtidin/ad/optim.hpp"

namespace amtidin::trainer {

using nlohmann::json;

namespace {

json num(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }
double num_from(const json& j) { return j.is_null() ? kMissing : j.get<double>(); }

json arr3(const std::array<double, 3>& a) { return json::array({num(a[0]), num(a[1]), num(a[2])}); }
std::array<double, 3> arr3_from(const json& j) { return {num_from(j.at(0)), num_from(j.at(1)), num_from(j.at(2))}; }
json grid_json(const Grid3& g) { return json::array({arr3(g[0]), arr3(g[1]), arr3(g[2])}); }
Grid3 grid_from(const json& j) { return {arr3_from(j.at(0)), arr3_from(j.at(1)), arr3_from(j.at(2))}; }
json alpha_json(const objective::TaskRelationMatrix& a) {
  json j = json::array();
  for (int r = 0; r < 3; ++r) j.push_back({a(r, 0), a(r, 1), a(r, 2)});
  return j;
}
objective::TaskRelationMatrix alpha_from(const json& j) {
  objective::TaskRelationMatrix a;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) a(r, c) = j.at(r).at(c).get<double>();
  return a;
}

Grid3 nan_grid() {
  Grid3 g;
  for (auto& r : g) r.fill(kMissing);
  return g;
}

std::array<double, 3> nan3() { return {kMissing, kMissing, kMissing}; }

std::string pair_name(int p) {
  return std::string(task_name(static_cast<Task>(kTaskPairs[p][0]))) + "_" +
         std::string(task_name(static_cast<Task>(kTaskPairs[p][1])));
}

std::string head_name(int t, int i) {
  return std::string(task_name(static_cast<Task>(t))) + "_" + std::string(task_name(static_cast<Task>(i)));
}

// Mean cross-entropy of logits (classes x n) against labels, in double.
double mean_ce(const model::Mat<float>& logits, const std::vector<int>& y) {
  double s = 0.0;
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    const auto col = logits.col(j).cast<double>();
    const double mx = col.maxCoeff();
    s += mx + std::log((col.array() - mx).exp().sum()) - col(y[static_cast<std::size_t>(j)]);
  }
  return s / static_cast<double>(logits.cols());
}

}  // namespace

void TrainConfig::validate() const {
  double ls = 0.0;
  for (double l : lambda) {
    if (!(l >= 0.0)) throw ConfigError("train config: lambda entries must be >= 0");
    ls += l;
  }
  if (!(ls > 0.0) || !std::isfinite(ls)) throw ConfigError("train config: lambda must have a positive finite sum");
  if (!(rho >= 0.0)) throw ConfigError("train config: rho must be >= 0");
  if (batch_size < 2) throw ConfigError("train config: batch_size must be >= 2");
  if (epochs < 1) throw ConfigError("train config: epochs must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("train config: lr must be > 0");
  if (!(lr_factor > 0.0 && lr_factor < 1.0)) throw ConfigError("train config: lr_factor must lie in (0,1)");
  if (lr_patience < 0) throw ConfigError("train config: lr_patience must be >= 0");
  if (!(min_lr >= 0.0)) throw ConfigError("train config: min_lr must be >= 0");
  if (c1 && !(*c1 >= 0.0)) throw ConfigError("train config: c1 must be >= 0");
  if (!(pseudo_dim >= 1.0)) throw ConfigError("train config: pseudo_dim must be >= 1");
  if (!(delta > 0.0 && delta < 1.0)) throw ConfigError("train config: delta must lie in (0,1)");
  if (!(clip_norm > 0.0)) throw ConfigError("train config: clip_norm must be > 0");
  if (max_batches < 0) throw ConfigError("train config: max_batches must be >= 0");
  if (pgd.max_iters < 1 || !(pgd.step > 0.0) || !(pgd.tol > 0.0)) throw ConfigError("train config: invalid pgd settings");
}

std::string TrainConfig::to_json() const {
  json j;
  j["lambda"] = lambda;
  j["rho"] = rho;
  j["batch_size"] = batch_size;
  j["epochs"] = epochs;
  j["lr"] = lr;
  j["lr_factor"] = lr_factor;
  j["lr_patience"] = lr_patience;
  j["min_lr"] = min_lr;
  j["c1"] = c1 ? json(*c1) : json(nullptr);
  j["pseudo_dim"] = pseudo_dim;
  j["delta"] = delta;
  j["seed"] = seed;
  j["variant"] = std::string(model::variant_name(variant));
  j["adv_mode"] = std::string(model::adv_mode_name(adv_mode));
  j["clip_grad"] = clip_grad;
  j["clip_norm"] = clip_norm;
  j["freeze_alpha"] = freeze_alpha;
  j["max_batches"] = max_batches;
  j["pgd"] = {{"max_iters", pgd.max_iters}, {"step", pgd.step}, {"tol", pgd.tol}};
  return j.dump();
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  static const std::set<std::string> known{"lambda",   "rho",        "batch_size", "epochs",  "lr",
                                           "lr_factor", "lr_patience", "min_lr",    "c1",      "pseudo_dim",
                                           "delta",    "seed",       "variant",    "adv_mode", "clip_grad",
                                           "clip_norm", "freeze_alpha", "max_batches", "pgd"};
  TrainConfig c;
  try {
    const json j = json::parse(text);
    if (!j.is_object()) throw ConfigError("train config: expected a JSON object");
    for (const auto& [k, v] : j.items())
      if (!known.count(k)) throw ConfigError("train config: unknown key '" + k + "'");
    if (j.contains("lambda")) c.lambda = j["lambda"].get<std::array<double, 3>>();
    c.rho = j.value("rho", c.rho);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.lr = j.value("lr", c.lr);
    c.lr_factor = j.value("lr_factor", c.lr_factor);
    c.lr_patience = j.value("lr_patience", c.lr_patience);
    c.min_lr = j.value("min_lr", c.min_lr);
    if (j.contains("c1") && !j["c1"].is_null()) c.c1 = j["c1"].get<double>();
    c.pseudo_dim = j.value("pseudo_dim", c.pseudo_dim);
    c.delta = j.value("delta", c.delta);
    c.seed = j.value("seed", c.seed);
    if (j.contains("variant")) c.variant = model::variant_from_name(j["variant"].get<std::string>());
    if (j.contains("adv_mode")) c.adv_mode = model::adv_mode_from_name(j["adv_mode"].get<std::string>());
    c.clip_grad = j.value("clip_grad", c.clip_grad);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.freeze_alpha = j.value("freeze_alpha", c.freeze_alpha);
    c.max_batches = j.value("max_batches", c.max_batches);
    if (j.contains("pgd")) {
      const auto& p = j["pgd"];
      c.pgd.max_iters = p.value("max_iters", c.pgd.max_iters);
      c.pgd.step = p.value("step", c.pgd.step);
      c.pgd.tol = p.value("tol", c.pgd.tol);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

std::array<double, 3> effective_lambda(const TrainConfig& cfg) {
  if (auto t = model::stl_task(cfg.variant)) {
    std::array<double, 3> l{0.0, 0.0, 0.0};
    l[static_cast<std::size_t>(index(*t))] = 1.0;
    return l;
  }
  const double s = cfg.lambda[0] + cfg.lambda[1] + cfg.lambda[2];
  return {cfg.lambda[0] / s, cfg.lambda[1] / s, cfg.lambda[2] / s};
}

objective::ObjectiveConfig objective_config(const TrainConfig& cfg, std::size_t m_train) {
  objective::ObjectiveConfig o;
  o.lambda = effective_lambda(cfg);
  o.rho = cfg.rho;
  o.c1 = cfg.c1 ? *cfg.c1 : objective::compute_c1(cfg.pseudo_dim, static_cast<double>(m_train), kNumTasks, cfg.delta);
  o.pgd = cfg.pgd;
  o.adv_mode = cfg.adv_mode;
  o.validate();
  return o;
}

ValidationMetrics validation_metrics(model::AmtidinModel<float>& m, const dataio::Dataset& ds,
                                     const objective::TaskRelationMatrix& alpha, const objective::ObjectiveConfig& ocfg) {
  ValidationMetrics v{nan_grid(), nan3(), nan3(), kMissing};
  const auto lay = m.layout();
  const auto streams = lay.streams();
  std::vector<std::size_t> all(ds.size()), present;
  std::iota(all.begin(), all.end(), std::size_t{0});
  for (auto k : all)
    if (ds.records[k].present) present.push_back(k);
  if (all.empty()) throw ConfigError("validation_metrics: empty dataset");

  const model::Mat<float> F = model::eval_features(m, ds, all);
  model::Mat<float> Fp(F.rows(), static_cast<Eigen::Index>(present.size()));
  for (std::size_t k = 0; k < present.size(); ++k) Fp.col(static_cast<Eigen::Index>(k)) = F.col(static_cast<Eigen::Index>(present[k]));
  auto stream_features = [&](int i) -> const model::Mat<float>& { return i == 0 ? F : Fp; };
  std::array<std::vector<int>, 3> y;
  for (int i = 0; i < 3; ++i)
    for (auto k : (i == 0 ? all : present)) y[i].push_back(dataio::task_label(ds, k, static_cast<Task>(i)));

  for (int t = 0; t < 3; ++t)
    for (int i = 0; i < 3; ++i) {
      if (!lay.heads[t][i] || !streams[i] || y[i].empty()) continue;
      const auto L = model::eval_logits(m, static_cast<Task>(t), static_cast<Task>(i), stream_features(i));
      v.ce[t][i] = mean_ce(L, y[i]);
      if (t == i) {
        const auto pred = ad::argmax_columns<float>(L);
        std::size_t hit = 0;
        for (std::size_t k = 0; k < pred.size(); ++k) hit += pred[k] == y[i][k];
        v.acc[t] = 100.0 * static_cast<double>(hit) / static_cast<double>(pred.size());
      }
    }
  if (lay.discriminators && !present.empty()) {
    const bool sig = ocfg.adv_mode == model::AdvOutputMode::Sigmoid;
    auto mean_out = [&](const model::Mat<float>& l) {
      const auto d = l.cast<double>().array();
      return sig ? (1.0 / (1.0 + (-d).exp())).mean() : d.mean();
    };
    for (int p = 0; p < 3; ++p) {
      const int a = kTaskPairs[p][0], b = kTaskPairs[p][1];
      v.adv[p] = mean_out(model::eval_disc_logits(m, p, stream_features(a))) -
                 mean_out(model::eval_disc_logits(m, p, stream_features(b)));
    }
  }
  v.total = objective::objective_value(v.ce, v.adv, alpha, ocfg);
  return v;
}

std::string TrainLog::to_csv() const {
  std::ostringstream os;
  os.imbue(std::locale::classic());
  os << "epoch,lr,batches,train_total,grad_norm";
  for (int t = 0; t < 3; ++t)
    for (int i = 0; i < 3; ++i) os << ",ce_" << head_name(t, i);
  for (int p = 0; p < 3; ++p) os << ",adv_" << pair_name(p);
  for (int p = 0; p < 3; ++p) os << ",w1_" << pair_name(p);
  os << ",val_total";
  for (int t = 0; t < 3; ++t)
    for (int i = 0; i < 3; ++i) os << ",val_ce_" << head_name(t, i);
  for (int p = 0; p < 3; ++p) os << ",val_adv_" << pair_name(p);
  for (int t = 0; t < 3; ++t) os << ",val_acc_" << task_name(static_cast<Task>(t));
  for (int t = 0; t < 3; ++t)
    for (int i = 0; i < 3; ++i) os << ",alpha_" << head_name(t, i);
  os << "\n" << std::setprecision(10);
  auto cell = [&](double v) {
    os << ",";
    if (std::isfinite(v)) os << v;
  };
  for (const auto& e : epochs) {
    os << e.epoch;
    cell(e.lr);
    os << "," << e.batches;
    cell(e.train_total);
    cell(e.grad_norm);
    for (const auto& r : e.train_ce)
      for (double v : r) cell(v);
    for (double v : e.train_adv) cell(v);
    for (double v : e.w1) cell(v);
    cell(e.val.total);
    for (const auto& r : e.val.ce)
      for (double v : r) cell(v);
    for (double v : e.val.adv) cell(v);
    for (double v : e.val.acc) cell(v);
    for (int t = 0; t < 3; ++t)
      for (int i = 0; i < 3; ++i) cell(e.alpha(t, i));
    os << "\n";
  }
  return os.str();
}

std::string TrainLog::to_json() const {
  json j;
  j["best_epoch"] = best_epoch;
  j["best_val"] = num(best_val);
  j["diverged"] = diverged;
  j["divergence"] = divergence;
  json es = json::array();
  for (const auto& e : epochs) {
    es.push_back({{"epoch", e.epoch},
                  {"lr", e.lr},
                  {"batches", e.batches},
                  {"train_ce", grid_json(e.train_ce)},
                  {"train_adv", arr3(e.train_adv)},
                  {"w1", arr3(e.w1)},
                  {"train_total", num(e.train_total)},
                  {"grad_norm", num(e.grad_norm)},
                  {"val_ce", grid_json(e.val.ce)},
                  {"val_adv", arr3(e.val.adv)},
                  {"val_acc", arr3(e.val.acc)},
                  {"val_total", num(e.val.total)},
                  {"alpha", alpha_json(e.alpha)},
                  {"alpha_iters", e.alpha_iters}});
  }
  j["epochs"] = es;
  return j.dump();
}

TrainLog TrainLog::from_json(const std::string& text) {
  TrainLog log;
  try {
    const json j = json::parse(text);
    if (j.is_array()) return log;  // empty log placeholder
    log.best_epoch = j.at("best_epoch").get<int>();
    log.best_val = j.at("best_val").is_null() ? std::numeric_limits<double>::infinity() : j["best_val"].get<double>();
    log.diverged = j.at("diverged").get<bool>();
    log.divergence = j.at("divergence").get<std::string>();
    for (const auto& x : j.at("epochs")) {
      EpochRecord e;
      e.epoch = x.at("epoch").get<int>();
      e.lr = x.at("lr").get<double>();
      e.batches = x.at("batches").get<int>();
      e.train_ce = grid_from(x.at("train_ce"));
      e.train_adv = arr3_from(x.at("train_adv"));
      e.w1 = arr3_from(x.at("w1"));
      e.train_total = num_from(x.at("train_total"));
      e.grad_norm = num_from(x.at("grad_norm"));
      e.val.ce = grid_from(x.at("val_ce"));
      e.val.adv = arr3_from(x.at("val_adv"));
      e.val.acc = arr3_from(x.at("val_acc"));
      e.val.total = num_from(x.at("val_total"));
      e.alpha = alpha_from(x.at("alpha"));
      e.alpha_iters = x.at("alpha_iters").get<std::array<int, 3>>();
      log.epochs.push_back(e);
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("train log: ") + e.what());
  }
  return log;
}

TrainResult train(model::AmtidinModel<float> m, const dataio::Dataset& train_set, const dataio::Dataset& val_set,
                  const TrainConfig& cfg, const TrainOptions& opt) {
  cfg.validate();
  if (m.arch.variant != cfg.variant)
    throw ConfigError("train: model variant " + std::string(model::variant_name(m.arch.variant)) +
                      " differs from configured variant " + std::string(model::variant_name(cfg.variant)));
  if (train_set.n != m.arch.n || val_set.n != m.arch.n) throw ConfigError("train: dataset length differs from the model");
  if (train_set.labels.m_classes() != m.arch.m_classes || train_set.labels.i_classes() != m.arch.i_classes)
    throw ConfigError("train: dataset label maps differ from the model class counts");
  const auto lay = m.layout();
  const auto streams = lay.streams();
  const auto ocfg = objective_config(cfg, train_set.size());

  TrainResult res{m, m, {}, {}};
  auto& model = res.model;
  auto& st = res.state;
  auto& log = res.log;
  if (opt.resume) {
    st = *opt.resume;
    log = TrainLog::from_json(st.log_json);
    if (!opt.checkpoint_dir.empty() && std::filesystem::exists(opt.checkpoint_dir / "best.ckpt"))
      res.best_model = checkpoint::load_checkpoint(opt.checkpoint_dir / "best.ckpt").model;
  } else {
    st.adam.lr = cfg.lr;
    st.scheduler.lr = cfg.lr;
    st.scheduler.factor = cfg.lr_factor;
    st.scheduler.patience = cfg.lr_patience;
    st.scheduler.min_lr = cfg.min_lr;
    st.alpha = objective::identity_alpha();
    st.log_json = log.to_json();
  }
  st.config_json = cfg.to_json();
  if (!opt.checkpoint_dir.empty()) std::filesystem::create_directories(opt.checkpoint_dir);

  auto params = model.parameters();
  const int end_epoch = opt.stop_after > 0 ? std::min(opt.stop_after, cfg.epochs) : cfg.epochs;
  const auto epoch_tag = hash_string("epoch");
  const auto dropout_tag = hash_string("dropout");

  for (int e = st.epoch; e < end_epoch; ++e) {
    const model::AmtidinModel<float> last_good = model;
    const checkpoint::TrainingState last_state = st;

    auto it = dataio::make_task_batches(train_set, cfg.batch_size, derive_seed(cfg.seed, {epoch_tag, static_cast<std::uint64_t>(e)}),
                                        streams);
    Grid3 ce_sum{};
    std::array<double, 3> adv_sum{0.0, 0.0, 0.0};
    double total_sum = 0.0, gn_sum = 0.0;
    int step = 0;
    std::string failure;
    while (it.has_next() && (cfg.max_batches == 0 || step < cfg.max_batches)) {
      const auto batch = it.next();
      ad::Tape<float> tape;
      model::ForwardOptions fo;
      fo.training = true;
      fo.dropout_seed = derive_seed(cfg.seed, {dropout_tag, static_cast<std::uint64_t>(e), static_cast<std::uint64_t>(step)});
      fo.streams = streams;
      const auto out = model::forward_train(model, tape, batch, fo);
      const auto terms = objective::loss_terms(out, batch, ocfg.adv_mode);
      auto loss = objective::total_objective(terms, st.alpha, ocfg);
      const double lv = loss.item();
      if (!std::isfinite(lv)) {
        failure = "non-finite loss at epoch " + std::to_string(e + 1) + " batch " + std::to_string(step);
        break;
      }
      ad::zero_grad(params);
      tape.backward(loss);
      const double gn = cfg.clip_grad ? ad::clip_grad_norm(params, cfg.clip_norm) : ad::grad_norm(params);
      if (!std::isfinite(gn)) {
        failure = "non-finite gradient at epoch " + std::to_string(e + 1) + " batch " + std::to_string(step);
        break;
      }
      st.adam.lr = st.scheduler.lr;
      ad::adam_step(params, st.adam);
      for (int t = 0; t < 3; ++t)
        for (int i = 0; i < 3; ++i)
          if (terms.ce[t][i].valid()) ce_sum[t][i] += terms.ce[t][i].item();
      for (int p = 0; p < 3; ++p)
        if (terms.adv[p].valid()) adv_sum[p] += terms.adv[p].item();
      total_sum += lv;
      gn_sum += gn;
      ++step;
    }
    if (failure.empty() && step == 0) failure = "epoch " + std::to_string(e + 1) + " produced no batches";
    if (!failure.empty()) {
      model = last_good;
      st = last_state;
      log.diverged = true;
      log.divergence = failure;
      st.log_json = log.to_json();
      break;
    }

    EpochRecord rec;
    rec.epoch = e + 1;
    rec.lr = st.scheduler.lr;
    rec.batches = step;
    rec.train_ce = nan_grid();
    rec.train_adv = nan3();
    rec.w1 = nan3();
    for (int t = 0; t < 3; ++t)
      for (int i = 0; i < 3; ++i)
        if (lay.heads[t][i] && streams[i]) rec.train_ce[t][i] = ce_sum[t][i] / step;
    if (lay.discriminators)
      for (int p = 0; p < 3; ++p) {
        rec.train_adv[p] = adv_sum[p] / step;
        rec.w1[p] = -rec.train_adv[p];
      }
    rec.train_total = total_sum / step;
    rec.grad_norm = gn_sum / step;

    if (lay.learns_alpha && !cfg.freeze_alpha) {
      for (int t = 0; t < 3; ++t) {
        if (!lay.hypotheses[t]) continue;
        Eigen::Vector3d a, w;
        for (int i = 0; i < 3; ++i) {
          a(i) = rec.train_ce[t][i];
          w(i) = (i == t || !lay.discriminators) ? 0.0 : rec.w1[pair_index(t, i)];
        }
        const auto sol = objective::solve_alpha(a, w, ocfg, st.alpha.row(t).transpose());
        st.alpha.row(t) = sol.alpha.transpose();
        rec.alpha_iters[t] = sol.iterations;
      }
    }
    rec.alpha = st.alpha;

    rec.val = validation_metrics(model, val_set, st.alpha, ocfg);
    st.scheduler.step(rec.val.total);
    st.adam.lr = st.scheduler.lr;
    st.epoch = e + 1;
    if (rec.val.total < st.best_val) {
      st.best_val = rec.val.total;
      st.best_epoch = rec.epoch;
      res.best_model = model;
    }
    log.best_epoch = st.best_epoch;
    log.best_val = st.best_val;
    log.epochs.push_back(rec);
    st.log_json = log.to_json();
    if (!opt.checkpoint_dir.empty() && st.best_epoch == rec.epoch)
      checkpoint::save_checkpoint(opt.checkpoint_dir / "best.ckpt", model, &st);
    if (!opt.checkpoint_dir.empty()) checkpoint::save_checkpoint(opt.checkpoint_dir / "last.ckpt", model, &st);
    if (opt.on_epoch) opt.on_epoch(rec);
  }
  return res;
}

}  // namespace amtidin::trainer
