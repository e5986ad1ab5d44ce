#include "amtidin/eval.hpp"

#include <json.hpp>

#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <iomanip>
#include <locale>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include "amtidin/checkpoint.hpp"

namespace amtidin::eval {

using nlohmann::json;

double accuracy_percent(const std::vector<int>& predicted, const std::vector<int>& truth) {
  if (predicted.empty() || predicted.size() != truth.size())
    throw ConfigError("accuracy_percent: empty or mismatched label vectors");
  std::size_t hit = 0;
  for (std::size_t k = 0; k < truth.size(); ++k) hit += predicted[k] == truth[k];
  return 100.0 * static_cast<double>(hit) / static_cast<double>(truth.size());
}

double EvalReport::snr_accuracy(Task t, double snr) const {
  const auto& m = per_snr[index(t)];
  auto it = m.find(snr);
  if (it == m.end() || it->second.second == 0) return std::numeric_limits<double>::quiet_NaN();
  return 100.0 * static_cast<double>(it->second.first) / static_cast<double>(it->second.second);
}

std::string EvalReport::to_json() const {
  json j;
  for (Task t : kAllTasks) {
    const int k = index(t);
    json tj;
    tj["accuracy"] = std::isfinite(accuracy[k]) ? json(accuracy[k]) : json(nullptr);
    tj["count"] = count[k];
    json snr = json::array();
    for (const auto& [s, ct] : per_snr[k])
      snr.push_back({{"snr_db", s}, {"correct", ct.first}, {"total", ct.second}, {"accuracy", snr_accuracy(t, s)}});
    tj["per_snr"] = snr;
    json cm = json::array();
    for (Eigen::Index r = 0; r < confusion[k].rows(); ++r) {
      json row = json::array();
      for (Eigen::Index c = 0; c < confusion[k].cols(); ++c) row.push_back(confusion[k](r, c));
      cm.push_back(row);
    }
    tj["confusion"] = cm;
    j[std::string(task_name(t))] = tj;
  }
  return j.dump(2);
}

std::string EvalReport::per_snr_csv() const {
  std::set<double> snrs;
  for (const auto& m : per_snr)
    for (const auto& [s, ct] : m) snrs.insert(s);
  std::ostringstream os;
  os.imbue(std::locale::classic());
  os << "snr_db,acc_ID,acc_MI,acc_II\n" << std::setprecision(10);
  for (double s : snrs) {
    os << s;
    for (Task t : kAllTasks) {
      os << ",";
      const double a = snr_accuracy(t, s);
      if (std::isfinite(a)) os << a;
    }
    os << "\n";
  }
  return os.str();
}

EvalReport evaluate(model::AmtidinModel<float>& m, const dataio::Dataset& test, int chunk) {
  if (test.size() == 0) throw ConfigError("evaluate: empty test set");
  EvalReport rep;
  rep.accuracy.fill(std::numeric_limits<double>::quiet_NaN());
  const auto lay = m.layout();
  std::vector<std::size_t> all(test.size()), present;
  std::iota(all.begin(), all.end(), std::size_t{0});
  for (auto k : all)
    if (test.records[k].present) present.push_back(k);
  const model::Mat<float> F = model::eval_features(m, test, all, chunk);
  for (Task t : kAllTasks) {
    const int k = index(t);
    rep.confusion[k] = Eigen::MatrixXi::Zero(m.arch.classes(t), m.arch.classes(t));
    if (!lay.heads[k][k]) continue;
    const auto& idx = t == Task::ID ? all : present;
    rep.count[k] = idx.size();
    if (idx.empty()) continue;
    model::Mat<float> Ft(F.rows(), static_cast<Eigen::Index>(idx.size()));
    for (std::size_t c = 0; c < idx.size(); ++c) Ft.col(static_cast<Eigen::Index>(c)) = F.col(static_cast<Eigen::Index>(idx[c]));
    const auto pred = ad::argmax_columns<float>(model::eval_logits(m, t, t, Ft));
    std::vector<int> truth;
    for (std::size_t c = 0; c < idx.size(); ++c) {
      const int y = dataio::task_label(test, idx[c], t);
      truth.push_back(y);
      rep.confusion[k](y, pred[c]) += 1;
      auto& cell = rep.per_snr[k][static_cast<double>(test.records[idx[c]].snr_db)];
      cell.first += pred[c] == y;
      cell.second += 1;
    }
    rep.accuracy[k] = accuracy_percent(pred, truth);
  }
  return rep;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw ConfigError("cannot open '" + tmp.string() + "' for writing");
    f << content;
    if (!f) throw ConfigError("write to '" + tmp.string() + "' failed");
  }
  std::filesystem::rename(tmp, path);
}

model::ArchConfig arch_for(const dataio::Dataset& ds, const model::ArchConfig& base, model::Variant v,
                           model::AdvOutputMode mode) {
  model::ArchConfig a = base;
  a.n = ds.n;
  a.m_classes = ds.labels.m_classes();
  a.i_classes = ds.labels.i_classes();
  a.variant = v;
  a.adv_output_mode = mode;
  a.validate();
  return a;
}

TrialResult run_trial(const dataio::Split& split, const model::ArchConfig& base_arch, const trainer::TrainConfig& cfg,
                      std::uint64_t model_seed) {
  auto m = model::build<float>(arch_for(split.train, base_arch, cfg.variant, cfg.adv_mode), model_seed);
  auto res = trainer::train(std::move(m), split.train, split.val, cfg);
  TrialResult out{res.log, {}, {}, std::move(res.best_model)};
  out.test = evaluate(out.best_model, split.test);
  objective::TaskRelationMatrix alpha = objective::identity_alpha();
  if (out.log.best_epoch >= 1) alpha = out.log.epochs[static_cast<std::size_t>(out.log.best_epoch - 1)].alpha;
  out.similarity = objective::estimate_w1_matrix(out.best_model, split.test, alpha);
  return out;
}

std::string_view axis_name(SweepAxis a) {
  switch (a) {
    case SweepAxis::Snr:
      return "snr";
    case SweepAxis::SampleSize:
      return "sample_size";
    case SweepAxis::SignalLength:
      return "signal_length";
  }
  return "?";
}

SweepAxis axis_from_name(std::string_view s) {
  for (auto a : {SweepAxis::Snr, SweepAxis::SampleSize, SweepAxis::SignalLength})
    if (axis_name(a) == s) return a;
  throw ConfigError("unknown sweep axis '" + std::string(s) + "'");
}

void SweepSpec::validate() const {
  if (values.empty()) throw ConfigError("sweep: values must be non-empty");
  if (repetitions < 1) throw ConfigError("sweep: repetitions must be >= 1");
  if (variants.empty()) throw ConfigError("sweep: variants must be non-empty");
  for (double v : values) {
    if (!std::isfinite(v)) throw ConfigError("sweep: values must be finite");
    if (axis != SweepAxis::Snr && (v < 1.0 || v != std::floor(v)))
      throw ConfigError("sweep: " + std::string(axis_name(axis)) + " values must be positive integers");
  }
  split.validate();
  train.validate();
  gen.validate();
}

SweepSpec SweepSpec::from_json(const std::string& text) {
  static const std::set<std::string> known{"axis", "values", "repetitions", "variants", "gen", "split", "train", "arch"};
  SweepSpec s;
  try {
    const json j = json::parse(text);
    if (!j.is_object()) throw ConfigError("sweep: expected a JSON object");
    for (const auto& [k, v] : j.items())
      if (!known.count(k)) throw ConfigError("sweep: unknown key '" + k + "'");
    s.axis = axis_from_name(j.at("axis").get<std::string>());
    s.values = j.at("values").get<std::vector<double>>();
    s.repetitions = j.value("repetitions", s.repetitions);
    if (j.contains("variants")) {
      s.variants.clear();
      for (const auto& v : j["variants"]) s.variants.push_back(model::variant_from_name(v.get<std::string>()));
    }
    if (j.contains("gen")) s.gen = siggen::gen_config_from_json(j["gen"].dump());
    if (j.contains("split")) {
      const auto& sp = j["split"];
      if (sp.contains("fractions")) s.split.fractions = sp["fractions"].get<std::array<double, 3>>();
      s.split.seed = sp.value("seed", s.split.seed);
    }
    if (j.contains("train")) s.train = trainer::TrainConfig::from_json(j["train"].dump());
    if (j.contains("arch")) s.arch = checkpoint::arch_from_json(j["arch"].dump());
  } catch (const json::exception& e) {
    throw ConfigError(std::string("sweep: ") + e.what());
  }
  s.validate();
  return s;
}

std::vector<SweepRow> run_sweep(const SweepSpec& spec, int threads, const std::function<void(const std::string&)>& progress) {
  spec.validate();
  const std::size_t V = spec.values.size(), R = static_cast<std::size_t>(spec.repetitions), K = spec.variants.size();
  // acc[(v * R + r) * K + k]; empty note means success.
  std::vector<std::array<double, 3>> acc(V * R * K);
  std::vector<std::string> notes(V * R);
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex mu;

  auto work = [&] {
    for (;;) {
      const std::size_t item = next.fetch_add(1);
      if (item >= V * R) return;
      const std::size_t v = item / R, r = item % R;
      try {
        siggen::GenConfig g = spec.gen;
        const double x = spec.values[v];
        switch (spec.axis) {
          case SweepAxis::Snr:
            g.snr_list_db = {x};
            break;
          case SweepAxis::SampleSize:
            g.samples_per_class = static_cast<int>(x);
            break;
          case SweepAxis::SignalLength:
            g.n = static_cast<int>(x);
            break;
        }
        g.master_seed = spec.gen.master_seed + r;
        const auto ds = siggen::generate_dataset(g, 1);
        dataio::SplitSpec sp = spec.split;
        sp.seed = spec.split.seed + r;
        dataio::Split split;
        try {
          split = dataio::stratified_split(ds, sp);
        } catch (const ConfigError& e) {
          std::lock_guard<std::mutex> lock(mu);
          notes[item] = std::string("skipped: ") + e.what();
          continue;
        }
        for (std::size_t k = 0; k < K; ++k) {
          trainer::TrainConfig tc = spec.train;
          tc.variant = spec.variants[k];
          tc.seed = spec.train.seed + r;
          const auto res = run_trial(split, spec.arch, tc, tc.seed);
          acc[item * K + k] = res.test.accuracy;
          if (progress) {
            std::lock_guard<std::mutex> lock(mu);
            std::ostringstream os;
            os << axis_name(spec.axis) << "=" << x << " rep=" << r << " " << model::variant_name(tc.variant)
               << " acc=" << res.test.accuracy[0] << "/" << res.test.accuracy[1] << "/" << res.test.accuracy[2];
            progress(os.str());
          }
        }
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!failure) failure = std::current_exception();
        next = V * R;
        return;
      }
    }
  };
  const int n = std::max(1, std::min<int>(threads, static_cast<int>(V * R)));
  if (n == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int k = 0; k < n; ++k) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  std::vector<SweepRow> rows;
  for (std::size_t v = 0; v < V; ++v)
    for (std::size_t k = 0; k < K; ++k) {
      SweepRow row;
      row.value = spec.values[v];
      row.variant = spec.variants[k];
      for (std::size_t r = 0; r < R; ++r)
        if (!notes[v * R + r].empty() && row.note.empty()) row.note = notes[v * R + r];
      if (!row.note.empty()) {
        row.mean.fill(std::numeric_limits<double>::quiet_NaN());
        row.stddev.fill(std::numeric_limits<double>::quiet_NaN());
        rows.push_back(row);
        continue;
      }
      row.runs = static_cast<int>(R);
      for (int t = 0; t < 3; ++t) {
        double s = 0.0;
        for (std::size_t r = 0; r < R; ++r) s += acc[(v * R + r) * K + k][t];
        const double mean = s / static_cast<double>(R);
        double ss = 0.0;
        for (std::size_t r = 0; r < R; ++r) ss += std::pow(acc[(v * R + r) * K + k][t] - mean, 2);
        row.mean[t] = mean;
        row.stddev[t] = R > 1 ? std::sqrt(ss / static_cast<double>(R - 1)) : (std::isfinite(mean) ? 0.0 : mean);
      }
      rows.push_back(row);
    }
  return rows;
}

std::string sweep_csv(const SweepSpec& spec, const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os.imbue(std::locale::classic());
  os << "axis,value,variant,runs,acc_ID_mean,acc_ID_std,acc_MI_mean,acc_MI_std,acc_II_mean,acc_II_std,note\n"
     << std::setprecision(10);
  for (const auto& r : rows) {
    os << axis_name(spec.axis) << "," << r.value << "," << model::variant_name(r.variant) << "," << r.runs;
    for (int t = 0; t < 3; ++t) {
      os << ",";
      if (std::isfinite(r.mean[t])) os << r.mean[t];
      os << ",";
      if (std::isfinite(r.stddev[t])) os << r.stddev[t];
    }
    std::string note = r.note;
    for (auto& c : note)
      if (c == ',' || c == '\n' || c == '"') c = ';';
    os << "," << note << "\n";
  }
  return os.str();
}

SimilarityFiles similarity_cmd(model::AmtidinModel<float>& m, const objective::TaskRelationMatrix& alpha,
                               const dataio::Dataset& eval_set, const std::filesystem::path& out_dir, bool per_snr) {
  SimilarityFiles files;
  files.overall = objective::estimate_w1_matrix(m, eval_set, alpha);
  auto emit = [&](const objective::SimilarityReport& r, const std::string& suffix) {
    write_file_atomic(out_dir / ("W1_logit" + suffix + ".csv"), r.matrix_csv(r.w1_logit));
    write_file_atomic(out_dir / ("W1_sigmoid" + suffix + ".csv"), r.matrix_csv(r.w1_sigmoid));
    write_file_atomic(out_dir / ("alpha" + suffix + ".csv"), r.matrix_csv(r.alpha));
    write_file_atomic(out_dir / ("similarity" + suffix + ".json"), r.to_json());
  };
  emit(files.overall, "");
  if (per_snr) {
    std::map<double, std::vector<std::size_t>> by_snr;
    for (std::size_t k = 0; k < eval_set.size(); ++k) by_snr[eval_set.records[k].snr_db].push_back(k);
    for (const auto& [snr, idx] : by_snr) {
      const auto sub = dataio::subset(eval_set, idx);
      const bool has_present =
          std::any_of(sub.records.begin(), sub.records.end(), [](const auto& r) { return r.present; });
      if (!has_present) continue;
      auto rep = objective::estimate_w1_matrix(m, sub, alpha);
      std::ostringstream tag;
      tag.imbue(std::locale::classic());
      tag << "_snr" << snr;
      emit(rep, tag.str());
      files.per_snr.emplace(snr, std::move(rep));
    }
  }
  return files;
}

}  // namespace amtidin::eval
