#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "amtidin/siggen.hpp"

namespace amtidin::dataio {

using siggen::Dataset;

// SIGD v1: "SIGD" | u32 version | u64 header_len | JSON header | records | u32 CRC32
// of the record region. All integers and floats little-endian.
std::vector<std::uint8_t> serialize_dataset(const Dataset& ds);
Dataset deserialize_dataset(const std::vector<std::uint8_t>& bytes);
void save_dataset(const Dataset& ds, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

struct SplitSpec {
  std::array<double, 3> fractions{0.6, 0.2, 0.2};
  std::uint64_t seed = 0;
  void validate() const;
};

struct Split {
  Dataset train, val, test;
};

// Per-stratum (modulation, interference, snr, presence) seeded split. Records keep
// their original relative order inside each part.
Split stratified_split(const Dataset& ds, const SplitSpec& spec);
// Original indices assigned to each part.
std::array<std::vector<std::size_t>, 3> stratified_split_indices(const Dataset& ds, const SplitSpec& spec);

Dataset subset(const Dataset& ds, const std::vector<std::size_t>& indices);

// Input block in the layout the network consumes: 2 x (B*N), column b*N + k holds
// sample k of record b.
using InputBlock = Eigen::MatrixXf;

struct TaskBatch {
  std::array<InputBlock, 3> x;                  // indexed by Task
  std::array<std::vector<int>, 3> y;            // class labels per task stream
  std::array<std::vector<std::size_t>, 3> idx;  // source record indices
  int n = 0;
  int batch_size(Task t) const { return static_cast<int>(y[index(t)].size()); }
};

// Class label of a record for a task (ID: presence; MI/II: compact class index).
int task_label(const Dataset& ds, std::size_t record, Task t);

// Packs records into an input block.
InputBlock pack_inputs(const Dataset& ds, const std::vector<std::size_t>& indices);

// Three independently shuffled streams (ID over all records, MI/II over
// interference-present records). An epoch ends when the longest active stream is
// exhausted; shorter streams wrap around. Every batch holds exactly B records per
// active stream.
class TaskBatchIterator {
 public:
  TaskBatchIterator(const Dataset& ds, int batch_size, std::uint64_t epoch_seed,
                    std::array<bool, 3> active = {true, true, true});

  int batches_per_epoch() const { return num_batches_; }
  bool has_next() const { return cursor_ < num_batches_; }
  TaskBatch next();
  const std::vector<std::size_t>& stream(Task t) const { return order_[index(t)]; }

 private:
  const Dataset* ds_;
  int batch_size_;
  std::array<bool, 3> active_;
  std::array<std::vector<std::size_t>, 3> order_;
  int num_batches_ = 0;
  int cursor_ = 0;
};

TaskBatchIterator make_task_batches(const Dataset& train, int batch_size, std::uint64_t epoch_seed,
                                    std::array<bool, 3> active = {true, true, true});

}  // namespace amtidin::dataio
