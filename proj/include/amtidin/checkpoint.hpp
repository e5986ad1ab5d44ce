#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "amtidin/ad/optim.hpp"
#include "amtidin/model.hpp"
#include "amtidin/objective.hpp"

namespace amtidin::checkpoint {

std::string arch_to_json(const model::ArchConfig& arch);
model::ArchConfig arch_from_json(const std::string& text);

// Everything beyond the model needed to continue training bit-identically.
struct TrainingState {
  objective::TaskRelationMatrix alpha = objective::identity_alpha();
  ad::AdamState<float> adam;
  ad::PlateauScheduler scheduler;
  int epoch = 0;  // completed epochs
  double best_val = std::numeric_limits<double>::infinity();
  int best_epoch = -1;
  std::string log_json = "[]";    // per-epoch log entries so far
  std::string config_json = "{}"; // training configuration echo
};

struct Checkpoint {
  model::AmtidinModel<float> model;
  std::optional<TrainingState> state;
};

// "AMCK" | u32 version | u64 manifest_len | JSON manifest | raw little-endian f32
// blobs. The manifest lists every blob with name, shape, byte offset and CRC32.
std::vector<std::uint8_t> serialize_checkpoint(const model::AmtidinModel<float>& m, const TrainingState* state);
Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::filesystem::path& path, const model::AmtidinModel<float>& m,
                     const TrainingState* state = nullptr);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace amtidin::checkpoint
