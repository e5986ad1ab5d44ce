#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "amtidin/checkpoint.hpp"
#include "amtidin/dataio.hpp"
#include "amtidin/model.hpp"
#include "amtidin/objective.hpp"

namespace amtidin::trainer {

struct TrainConfig {
  // Relative task weights; any non-negative triple with a positive sum, rescaled to
  // the simplex before use.
  std::array<double, 3> lambda{0.05, 0.85, 0.15};
  double rho = 1.0;
  int batch_size = 256;
  int epochs = 100;
  double lr = 1e-3;
  double lr_factor = 0.1;
  int lr_patience = 8;
  double min_lr = 1e-7;
  // Either a fixed C1 or the (pseudo-dimension, delta) pair it is derived from with
  // m = number of training records.
  std::optional<double> c1;
  double pseudo_dim = 100.0;
  double delta = 0.1;
  std::uint64_t seed = 0;
  model::Variant variant = model::Variant::AMTIDIN;
  model::AdvOutputMode adv_mode = model::AdvOutputMode::Sigmoid;
  bool clip_grad = true;
  double clip_norm = 5.0;
  // Keep alpha at its initial value even for variants that learn it.
  bool freeze_alpha = false;
  // Limits the batches per epoch; 0 means the full epoch.
  int max_batches = 0;
  objective::PgdConfig pgd;

  void validate() const;
  std::string to_json() const;
  static TrainConfig from_json(const std::string& text);
};

// Lambda actually used: the configured weights rescaled to sum 1, or all weight on
// the task of an STL variant.
std::array<double, 3> effective_lambda(const TrainConfig& cfg);
// Objective configuration for a training set of m_train records.
objective::ObjectiveConfig objective_config(const TrainConfig& cfg, std::size_t m_train);

inline constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();
using Grid3 = std::array<std::array<double, 3>, 3>;

// Loss terms and accuracies on a dataset, in eval mode. Entries the variant lacks
// are NaN.
struct ValidationMetrics {
  Grid3 ce;                     // CE of head (t,i) on stream i
  std::array<double, 3> adv;    // pair loss per kTaskPairs entry
  std::array<double, 3> acc;    // diagonal-head accuracy in percent
  double total = kMissing;
};

ValidationMetrics validation_metrics(model::AmtidinModel<float>& m, const dataio::Dataset& ds,
                                     const objective::TaskRelationMatrix& alpha, const objective::ObjectiveConfig& ocfg);

struct EpochRecord {
  int epoch = 0;  // 1-based
  double lr = 0.0;
  int batches = 0;
  Grid3 train_ce;                 // epoch-mean CE per head
  std::array<double, 3> train_adv;  // epoch-mean pair loss
  std::array<double, 3> w1;         // epoch-mean W1 estimate per pair (= -train_adv)
  double train_total = kMissing;
  double grad_norm = kMissing;      // epoch-mean pre-clip gradient norm
  ValidationMetrics val;
  objective::TaskRelationMatrix alpha = objective::identity_alpha();  // after this epoch's update
  std::array<int, 3> alpha_iters{0, 0, 0};
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  int best_epoch = -1;
  double best_val = std::numeric_limits<double>::infinity();
  bool diverged = false;
  std::string divergence;

  std::string to_csv() const;
  std::string to_json() const;
  static TrainLog from_json(const std::string& text);
};

struct TrainOptions {
  // Resumes from this state; the model passed to train must be the checkpointed one.
  std::optional<checkpoint::TrainingState> resume;
  // Stop after this many completed epochs in total (0 = cfg.epochs).
  int stop_after = 0;
  // When set, last.ckpt (with training state) and best.ckpt are written here.
  std::filesystem::path checkpoint_dir;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
  model::AmtidinModel<float> model;       // state after the last completed epoch
  model::AmtidinModel<float> best_model;  // lowest validation total objective
  TrainLog log;
  checkpoint::TrainingState state;
};

// Alternates Adam updates of the total objective at fixed alpha with per-epoch
// alpha updates. A non-finite batch loss ends training with log.diverged set and
// the model restored to the last completed epoch.
TrainResult train(model::AmtidinModel<float> m, const dataio::Dataset& train_set, const dataio::Dataset& val_set,
                  const TrainConfig& cfg, const TrainOptions& opt = {});

}  // namespace amtidin::trainer
