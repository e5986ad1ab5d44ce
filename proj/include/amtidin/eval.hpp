#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "amtidin/dataio.hpp"
#include "amtidin/model.hpp"
#include "amtidin/objective.hpp"
#include "amtidin/trainer.hpp"

namespace amtidin::eval {

// 100 * correct / total; throws ConfigError on empty or mismatched inputs.
double accuracy_percent(const std::vector<int>& predicted, const std::vector<int>& truth);

// Random-guess accuracy in percent for a task with the given class count.
inline double chance_percent(int classes) { return 100.0 / classes; }

struct EvalReport {
  // Per task; ID over all records, MI/II over interference-present records. NaN
  // for tasks the variant does not predict.
  std::array<double, 3> accuracy{};
  std::array<std::size_t, 3> count{};
  // snr_db -> (correct, total) per task.
  std::array<std::map<double, std::pair<std::size_t, std::size_t>>, 3> per_snr;
  // Rows = true class, columns = predicted class.
  std::array<Eigen::MatrixXi, 3> confusion;

  double snr_accuracy(Task t, double snr) const;
  std::string to_json() const;
  std::string per_snr_csv() const;
};

EvalReport evaluate(model::AmtidinModel<float>& m, const dataio::Dataset& test, int chunk = 256);

// Writes to path.tmp then renames, so readers never see a partial file.
void write_file_atomic(const std::filesystem::path& path, const std::string& content);

// ---- one generate / split / train / evaluate run ------------------------------------

struct TrialResult {
  trainer::TrainLog log;
  EvalReport test;
  objective::SimilarityReport similarity;  // on the test split, best model
  model::AmtidinModel<float> best_model;
};

// Builds a model for the dataset's label maps and trains the given variant.
model::ArchConfig arch_for(const dataio::Dataset& ds, const model::ArchConfig& base, model::Variant v,
                           model::AdvOutputMode mode);
TrialResult run_trial(const dataio::Split& split, const model::ArchConfig& base_arch, const trainer::TrainConfig& cfg,
                      std::uint64_t model_seed);

// ---- sweeps ---------------------------------------------------------------------

enum class SweepAxis { Snr, SampleSize, SignalLength };
std::string_view axis_name(SweepAxis a);
SweepAxis axis_from_name(std::string_view s);

struct SweepSpec {
  SweepAxis axis = SweepAxis::Snr;
  std::vector<double> values;
  int repetitions = 5;
  std::vector<model::Variant> variants{model::Variant::AMTIDIN};
  siggen::GenConfig gen;
  dataio::SplitSpec split;
  trainer::TrainConfig train;
  model::ArchConfig arch;

  void validate() const;
  static SweepSpec from_json(const std::string& text);
};

struct SweepRow {
  double value = 0.0;
  model::Variant variant = model::Variant::AMTIDIN;
  int runs = 0;
  std::array<double, 3> mean{};
  std::array<double, 3> stddev{};  // sample standard deviation, 0 for a single run
  std::string note;                // non-empty for skipped points
};

// Rows ordered by (value, variant) as listed in the SweepSpec. Repetition r uses data
// seed gen.master_seed + r, split seed split.seed + r and training seed train.seed + r.
std::vector<SweepRow> run_sweep(const SweepSpec& spec, int threads = 1,
                                const std::function<void(const std::string&)>& progress = {});
std::string sweep_csv(const SweepSpec& spec, const std::vector<SweepRow>& rows);

// ---- similarity ------------------------------------------------------------------

struct SimilarityFiles {
  objective::SimilarityReport overall;
  std::map<double, objective::SimilarityReport> per_snr;
};

// Writes W1_logit.csv, W1_sigmoid.csv, alpha.csv and similarity.json into out_dir,
// plus per-SNR copies suffixed _snr<value> when requested.
SimilarityFiles similarity_cmd(model::AmtidinModel<float>& m, const objective::TaskRelationMatrix& alpha,
                               const dataio::Dataset& eval_set, const std::filesystem::path& out_dir, bool per_snr);

}  // namespace amtidin::eval
