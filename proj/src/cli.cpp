#include "amtidin/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "amtidin/boundlab.hpp"
#include "amtidin/checkpoint.hpp"
#include "amtidin/dataio.hpp"
#include "amtidin/eval.hpp"
#include "amtidin/gradcheck.hpp"
#include "amtidin/siggen.hpp"
#include "amtidin/trainer.hpp"

namespace amtidin::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string read_text(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw ConfigError("cannot open '" + p.string() + "'");
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

json read_json(const std::string& path) {
  if (path.empty()) return json::object();
  try {
    return json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw ConfigError("'" + path + "': " + e.what());
  }
}

struct Common {
  std::string config, out, variant;
  std::optional<std::uint64_t> seed;
  int threads = 1;
};

void add_common(CLI::App* sub, Common& c, bool out_required) {
  sub->add_option("--config", c.config, "JSON configuration file")->check(CLI::ExistingFile);
  auto* o = sub->add_option("--out", c.out, "Output path");
  if (out_required) o->required();
  sub->add_option("--seed", c.seed, "Seed override");
  sub->add_option("--threads", c.threads, "Worker threads")->check(CLI::PositiveNumber);
}

void print_eval(const eval::EvalReport& r) {
  for (Task t : kAllTasks) {
    const int k = index(t);
    if (!std::isfinite(r.accuracy[k])) continue;
    std::cout << task_name(t) << " accuracy " << r.accuracy[k] << "% over " << r.count[k] << " records\n";
  }
}

int run_gen(const Common& c) {
  auto g = siggen::gen_config_from_json(read_json(c.config).dump());
  if (c.seed) g.master_seed = *c.seed;
  const auto ds = siggen::generate_dataset(g, c.threads);
  dataio::save_dataset(ds, c.out);
  std::cout << "wrote " << ds.size() << " records to " << c.out << "\n";
  return kExitOk;
}

int run_split(const Common& c, const std::string& data) {
  const json j = read_json(c.config);
  dataio::SplitSpec s;
  try {
    if (j.contains("fractions")) s.fractions = j["fractions"].get<std::array<double, 3>>();
    s.seed = j.value("seed", s.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("split config: ") + e.what());
  }
  if (c.seed) s.seed = *c.seed;
  const auto split = dataio::stratified_split(dataio::load_dataset(data), s);
  fs::create_directories(c.out);
  dataio::save_dataset(split.train, fs::path(c.out) / "train.sigd");
  dataio::save_dataset(split.val, fs::path(c.out) / "val.sigd");
  dataio::save_dataset(split.test, fs::path(c.out) / "test.sigd");
  std::cout << "train " << split.train.size() << ", val " << split.val.size() << ", test " << split.test.size() << "\n";
  return kExitOk;
}

int run_train(const Common& c, const std::string& data, const std::string& val, const std::string& resume) {
  json j = read_json(c.config);
  model::ArchConfig arch_base;
  if (j.contains("arch")) {
    arch_base = checkpoint::arch_from_json(j["arch"].dump());
    j.erase("arch");
  }
  auto cfg = trainer::TrainConfig::from_json(j.dump());
  if (c.seed) cfg.seed = *c.seed;
  if (!c.variant.empty()) cfg.variant = model::variant_from_name(c.variant);
  cfg.validate();
  const auto train_set = dataio::load_dataset(data);
  const auto val_set = dataio::load_dataset(val);

  trainer::TrainOptions opt;
  opt.checkpoint_dir = c.out;
  opt.on_epoch = [](const trainer::EpochRecord& e) {
    std::cout << "epoch " << e.epoch << " lr " << e.lr << " train " << e.train_total << " val " << e.val.total
              << " acc " << e.val.acc[0] << "/" << e.val.acc[1] << "/" << e.val.acc[2] << std::endl;
  };
  model::AmtidinModel<float> m;
  if (!resume.empty()) {
    auto ck = checkpoint::load_checkpoint(resume);
    if (!ck.state) throw ConfigError("'" + resume + "' holds no training state");
    m = std::move(ck.model);
    opt.resume = std::move(ck.state);
  } else {
    m = model::build<float>(eval::arch_for(train_set, arch_base, cfg.variant, cfg.adv_mode), cfg.seed);
  }
  const auto res = trainer::train(std::move(m), train_set, val_set, cfg, opt);
  eval::write_file_atomic(fs::path(c.out) / "train_log.csv", res.log.to_csv());
  eval::write_file_atomic(fs::path(c.out) / "train_log.json", res.log.to_json());
  if (res.log.diverged) {
    std::cerr << "error: training diverged (" << res.log.divergence << "); last good state kept in " << c.out << "\n";
    return kExitInternal;
  }
  std::cout << "best epoch " << res.log.best_epoch << " val " << res.log.best_val << "\n";
  return kExitOk;
}

int run_eval(const Common& c, const std::string& model_path, const std::string& data) {
  auto ck = checkpoint::load_checkpoint(model_path);
  const auto ds = dataio::load_dataset(data);
  const auto rep = eval::evaluate(ck.model, ds);
  print_eval(rep);
  if (!c.out.empty()) {
    eval::write_file_atomic(c.out, rep.to_json());
    eval::write_file_atomic(fs::path(c.out).replace_extension(".snr.csv"), rep.per_snr_csv());
  }
  return kExitOk;
}

int run_sweep_cmd(const Common& c) {
  if (c.config.empty()) throw ConfigError("sweep requires --config");
  auto spec = eval::SweepSpec::from_json(read_text(c.config));
  if (c.seed) spec.train.seed = *c.seed;
  if (!c.variant.empty()) spec.variants = {model::variant_from_name(c.variant)};
  const auto rows = eval::run_sweep(spec, c.threads, [](const std::string& s) { std::cout << s << std::endl; });
  eval::write_file_atomic(c.out, eval::sweep_csv(spec, rows));
  for (const auto& r : rows)
    if (!r.note.empty()) std::cerr << "warning: " << eval::axis_name(spec.axis) << "=" << r.value << ": " << r.note << "\n";
  return kExitOk;
}

int run_similarity(const Common& c, const std::string& model_path, const std::string& data, bool per_snr) {
  auto ck = checkpoint::load_checkpoint(model_path);
  const auto alpha = ck.state ? ck.state->alpha : objective::identity_alpha();
  const auto files = eval::similarity_cmd(ck.model, alpha, dataio::load_dataset(data), c.out, per_snr);
  std::cout << "W1 (logit)\n" << files.overall.matrix_csv(files.overall.w1_logit);
  std::cout << "W1 (sigmoid)\n" << files.overall.matrix_csv(files.overall.w1_sigmoid);
  std::cout << "alpha\n" << files.overall.matrix_csv(files.overall.alpha);
  return kExitOk;
}

int run_bound_check(const Common& c) {
  const json j = read_json(c.config);
  int trials = 200, cases = 10000;
  double delta = 0.1;
  std::string family = "default";
  try {
    trials = j.value("trials", trials);
    cases = j.value("lemma_cases", cases);
    delta = j.value("delta", delta);
    family = j.value("family", family);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bound-check config: ") + e.what());
  }
  if (trials < 1 || cases < 1) throw ConfigError("bound-check: trials and lemma_cases must be >= 1");
  if (family != "default" && family != "identical") throw ConfigError("bound-check: family must be default or identical");
  const std::uint64_t seed = c.seed.value_or(0);
  const auto fam = family == "default" ? boundlab::ToyFamily::default_family() : boundlab::ToyFamily::identical_tasks();
  const auto mc = boundlab::mc_bound_check(fam, trials, delta, seed);
  const auto l1 = boundlab::lemma1_check(cases, derive_seed(seed, {1}));
  const auto l2 = boundlab::lemma2_check(cases, derive_seed(seed, {2}));
  std::cout << "bound: " << mc.violations << " violations in " << mc.trials << " trials, min margin " << mc.min_margin
            << "\nlemma1: " << l1.violations << " violations in " << l1.cases << " cases, min slack " << l1.min_slack
            << "\nlemma2: " << l2.violations << " violations in " << l2.cases << " cases, min slack " << l2.min_slack << "\n";
  for (const auto& w : mc.warnings) std::cerr << "warning: " << w << "\n";
  if (!c.out.empty()) {
    json r = json::parse(mc.to_json());
    r["lemma1"] = {{"cases", l1.cases}, {"violations", l1.violations}, {"max_violation", l1.max_violation}, {"min_slack", l1.min_slack}};
    r["lemma2"] = {{"cases", l2.cases}, {"violations", l2.violations}, {"max_violation", l2.max_violation}, {"min_slack", l2.min_slack}};
    eval::write_file_atomic(c.out, r.dump(2));
  }
  return kExitOk;
}

int run_gradcheck(const Common& c) {
  const auto rep = gradcheck::run_suite(c.seed.value_or(0));
  std::cout << rep.to_text();
  return rep.all_pass ? kExitOk : kExitInternal;
}

}  // namespace

int cli_main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return cli_main(args);
}

int cli_main(const std::vector<std::string>& args) {
  CLI::App app{"Synthetic interference datasets, multi-task training and bound checks", "amtidin"};
  app.require_subcommand(1);

  Common gen_c, split_c, train_c, eval_c, sweep_c, sim_c, bound_c, grad_c;
  std::string split_data, train_data, train_val, train_resume, eval_model, eval_data, sim_model, sim_data;
  bool per_snr = false;

  auto* gen = app.add_subcommand("gen", "Generate a dataset");
  add_common(gen, gen_c, true);
  auto* split = app.add_subcommand("split", "Stratified train/val/test split");
  add_common(split, split_c, true);
  split->add_option("--data", split_data, "Input dataset")->required()->check(CLI::ExistingFile);
  auto* train = app.add_subcommand("train", "Train a model");
  add_common(train, train_c, true);
  train->add_option("--variant", train_c.variant, "Model variant");
  train->add_option("--data", train_data, "Training dataset")->required()->check(CLI::ExistingFile);
  train->add_option("--val", train_val, "Validation dataset")->required()->check(CLI::ExistingFile);
  train->add_option("--resume", train_resume, "Checkpoint with training state")->check(CLI::ExistingFile);
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  add_common(ev, eval_c, false);
  ev->add_option("--model", eval_model, "Checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", eval_data, "Test dataset")->required()->check(CLI::ExistingFile);
  auto* sweep = app.add_subcommand("sweep", "Run an accuracy sweep");
  add_common(sweep, sweep_c, true);
  sweep->add_option("--variant", sweep_c.variant, "Restrict to one variant");
  auto* sim = app.add_subcommand("similarity", "Task similarity report");
  add_common(sim, sim_c, true);
  sim->add_option("--model", sim_model, "Checkpoint")->required()->check(CLI::ExistingFile);
  sim->add_option("--data", sim_data, "Evaluation dataset")->required()->check(CLI::ExistingFile);
  sim->add_flag("--per-snr", per_snr, "Also write per-SNR reports");
  auto* bound = app.add_subcommand("bound-check", "Monte Carlo bound and lemma audits");
  add_common(bound, bound_c, false);
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  add_common(grad, grad_c, false);

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend() - 1);
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return kExitUser;
  }

  try {
    if (*gen) return run_gen(gen_c);
    if (*split) return run_split(split_c, split_data);
    if (*train) return run_train(train_c, train_data, train_val, train_resume);
    if (*ev) return run_eval(eval_c, eval_model, eval_data);
    if (*sweep) return run_sweep_cmd(sweep_c);
    if (*sim) return run_similarity(sim_c, sim_model, sim_data, per_snr);
    if (*bound) return run_bound_check(bound_c);
    if (*grad) return run_gradcheck(grad_c);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUser;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUser;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kExitInternal;
  }
  std::cerr << app.help();
  return kExitUser;
}

}  // namespace amtidin::cli
