#include <doctest.h>

#include <algorithm>
#include <cstring>
#include <fstream>
#include <map>
#include <set>

#include "amtidin/dataio.hpp"
#include "helpers.hpp"

using namespace amtidin;
using namespace amtidin::dataio;
using siggen::Dataset;

namespace {

std::string error_of(const std::vector<std::uint8_t>& bytes) {
  try {
    deserialize_dataset(bytes);
  } catch (const FormatError& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST_SUITE("dataio") {

TEST_CASE("SIGD round-trip preserves every field and re-saves byte-identically") {
  const auto ds = siggen::generate_dataset(testutil::small_gen(50));
  REQUIRE(ds.size() == 300);
  const auto bytes = serialize_dataset(ds);
  const auto back = deserialize_dataset(bytes);
  CHECK(back == ds);
  CHECK(serialize_dataset(back) == bytes);
  for (std::size_t k = 0; k < ds.size(); ++k)
    CHECK(std::memcmp(back.records[k].iq.data(), ds.records[k].iq.data(), sizeof(float) * 2 * ds.n) == 0);
}

TEST_CASE("SIGD layout: magic, version and per-record size") {
  const auto ds = siggen::generate_dataset(testutil::small_gen(5));
  const auto bytes = serialize_dataset(ds);
  CHECK(std::memcmp(bytes.data(), "SIGD", 4) == 0);
  std::uint32_t version = 0;
  std::memcpy(&version, bytes.data() + 4, 4);
  CHECK(version == 1);
  std::uint64_t header_len = 0;
  std::memcpy(&header_len, bytes.data() + 8, 8);
  const std::size_t rec_bytes = 1 + 2 + 2 + 4 + 4 + 4 + 8 + 4 * 2 * ds.n;
  CHECK(bytes.size() == 16 + header_len + ds.size() * rec_bytes + 4);
}

TEST_CASE("empty dataset round-trips") {
  Dataset ds;
  ds.n = 128;
  ds.labels = siggen::label_maps_for(testutil::small_gen());
  const auto back = deserialize_dataset(serialize_dataset(ds));
  CHECK(back == ds);
  CHECK(back.size() == 0);
}

TEST_CASE("corrupted files are rejected") {
  const auto ds = siggen::generate_dataset(testutil::small_gen(5));
  const auto bytes = serialize_dataset(ds);

  auto bad = bytes;
  bad[0] = 'X';
  CHECK(error_of(bad).find("bad magic") != std::string::npos);

  bad = bytes;
  bad[bytes.size() - 40] ^= 0x01;
  CHECK(error_of(bad).find("checksum failure") != std::string::npos);

  bad = bytes;
  bad.resize(bytes.size() - 100);
  CHECK(error_of(bad).find("truncated") != std::string::npos);

  bad = bytes;
  bad[4] = 2;
  CHECK(error_of(bad).find("version") != std::string::npos);
}

TEST_CASE("save and load through the filesystem") {
  const auto dir = testutil::temp_dir("dataio");
  const auto ds = siggen::generate_dataset(testutil::small_gen(10));
  save_dataset(ds, dir / "d.sigd");
  CHECK(load_dataset(dir / "d.sigd") == ds);
  CHECK_THROWS_AS(load_dataset(dir / "missing.sigd"), ConfigError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("100-record strata split 60/20/20 exactly") {
  auto cfg = testutil::small_gen(100);
  const auto ds = siggen::generate_dataset(cfg);
  const auto parts = stratified_split_indices(ds, {{0.6, 0.2, 0.2}, 3});
  using Key = std::tuple<int, int, bool>;
  std::array<std::map<Key, int>, 3> per;
  for (int p = 0; p < 3; ++p)
    for (auto k : parts[p]) {
      const auto& r = ds.records[k];
      ++per[p][{static_cast<int>(r.modulation), r.interference, r.present}];
    }
  for (const auto& [key, c] : per[0]) {
    if (std::get<2>(key)) {
      CHECK(c == 60);
      CHECK(per[1][key] == 20);
      CHECK(per[2][key] == 20);
    } else {
      CHECK(c == 180);
    }
  }
}

TEST_CASE("splits are disjoint, exhaustive, stratum-proportional and seeded") {
  auto cfg = testutil::small_gen(23);
  cfg.snr_list_db = {0.0, 10.0};
  const auto ds = siggen::generate_dataset(cfg);
  const SplitSpec spec{{0.6, 0.2, 0.2}, 9};
  const auto parts = stratified_split_indices(ds, spec);
  std::multiset<std::size_t> all;
  for (const auto& p : parts) all.insert(p.begin(), p.end());
  CHECK(all.size() == ds.size());
  CHECK(std::set<std::size_t>(all.begin(), all.end()).size() == ds.size());

  using Key = std::tuple<int, int, float, bool>;
  std::map<Key, int> total;
  std::array<std::map<Key, int>, 3> per;
  for (std::size_t k = 0; k < ds.size(); ++k) {
    const auto& r = ds.records[k];
    ++total[{static_cast<int>(r.modulation), r.interference, r.snr_db, r.present}];
  }
  for (int p = 0; p < 3; ++p)
    for (auto k : parts[p]) {
      const auto& r = ds.records[k];
      ++per[p][{static_cast<int>(r.modulation), r.interference, r.snr_db, r.present}];
    }
  for (const auto& [key, m] : total)
    for (int p = 0; p < 3; ++p) CHECK(std::abs(per[p][key] - spec.fractions[p] * m) <= 1.0);

  CHECK(stratified_split_indices(ds, spec) == parts);
  CHECK_FALSE(stratified_split_indices(ds, {{0.6, 0.2, 0.2}, 10}) == parts);

  const auto split = stratified_split(ds, spec);
  CHECK(split.train.size() == parts[0].size());
  CHECK(split.val.records.front() == ds.records[parts[1].front()]);
  CHECK(split.test.labels == ds.labels);
}

TEST_CASE("small strata are reported") {
  const auto ds = siggen::generate_dataset(testutil::small_gen(3));
  try {
    stratified_split(ds, {});
    FAIL("expected an error");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("strata smaller than 5") != std::string::npos);
    CHECK(msg.find("CWI") != std::string::npos);
  }
  CHECK_THROWS_AS((SplitSpec{{0.5, 0.2, 0.2}, 0}.validate()), ConfigError);
  CHECK_THROWS_AS((SplitSpec{{1.2, -0.1, -0.1}, 0}.validate()), ConfigError);
}

TEST_CASE("batch iterator counts and stream contents") {
  auto cfg = testutil::small_gen(64);
  cfg.interference_types = {siggen::Interference::CWI, siggen::Interference::NNI};
  const auto ds = siggen::generate_dataset(cfg);
  REQUIRE(ds.size() == 256);
  auto it = make_task_batches(ds, 64, 1);
  CHECK(it.batches_per_epoch() == 4);
  std::set<std::size_t> seen_id;
  int batches = 0;
  while (it.has_next()) {
    const auto b = it.next();
    ++batches;
    for (Task t : kAllTasks) {
      CHECK(b.batch_size(t) == 64);
      CHECK(b.x[index(t)].cols() == 64 * ds.n);
      CHECK(b.x[index(t)].rows() == 2);
    }
    for (std::size_t k = 0; k < b.idx[0].size(); ++k) {
      seen_id.insert(b.idx[0][k]);
      CHECK(b.y[0][k] == task_label(ds, b.idx[0][k], Task::ID));
      CHECK(b.x[0].middleCols(static_cast<Eigen::Index>(k) * ds.n, ds.n) == ds.records[b.idx[0][k]].iq);
    }
    for (int t : {1, 2})
      for (auto r : b.idx[t]) CHECK(ds.records[r].present);
  }
  CHECK(batches == 4);
  CHECK(seen_id.size() == ds.size());
  CHECK_THROWS_AS(it.next(), std::out_of_range);
}

TEST_CASE("512 records with B=256 give two batches, shorter streams wrap") {
  auto cfg = testutil::small_gen(128);
  cfg.interference_types = {siggen::Interference::CWI, siggen::Interference::NNI};
  const auto ds = siggen::generate_dataset(cfg);
  REQUIRE(ds.size() == 512);
  auto it = make_task_batches(ds, 256, 4);
  CHECK(it.batches_per_epoch() == 2);
  auto small = siggen::generate_dataset(testutil::small_gen(10));
  auto it2 = make_task_batches(small, 16, 4);
  CHECK(it2.batches_per_epoch() == 4);
  std::map<std::size_t, int> uses;
  while (it2.has_next()) {
    const auto b = it2.next();
    for (auto r : b.idx[1]) ++uses[r];
  }
  const auto present = static_cast<std::size_t>(
      std::count_if(small.records.begin(), small.records.end(), [](const auto& r) { return r.present; }));
  CHECK(uses.size() == present);
  for (const auto& [r, n] : uses) CHECK(small.records[r].present);
}

TEST_CASE("batch sequence is determined by the epoch seed") {
  const auto ds = siggen::generate_dataset(testutil::small_gen(20));
  auto a = make_task_batches(ds, 8, 5), b = make_task_batches(ds, 8, 5), c = make_task_batches(ds, 8, 6);
  for (Task t : kAllTasks) {
    CHECK(a.stream(t) == b.stream(t));
    CHECK_FALSE(a.stream(t) == c.stream(t));
  }
  CHECK_THROWS_AS(make_task_batches(ds, 1, 0), ConfigError);
}

TEST_CASE("inactive streams and datasets without positives") {
  const auto ds = siggen::generate_dataset(testutil::small_gen(20));
  auto it = make_task_batches(ds, 8, 1, {false, false, true});
  const auto b = it.next();
  CHECK(b.batch_size(Task::ID) == 0);
  CHECK(b.batch_size(Task::II) == 8);
  std::vector<std::size_t> negatives;
  for (std::size_t k = 0; k < ds.size(); ++k)
    if (!ds.records[k].present) negatives.push_back(k);
  const auto neg = subset(ds, negatives);
  CHECK_THROWS_AS(make_task_batches(neg, 8, 1), ConfigError);
  CHECK_NOTHROW(make_task_batches(neg, 8, 1, {true, false, false}));
}

TEST_CASE("task labels use compact class indices") {
  const auto ds = siggen::generate_dataset(testutil::small_gen(5));
  for (std::size_t k = 0; k < ds.size(); ++k) {
    const auto& r = ds.records[k];
    CHECK(task_label(ds, k, Task::ID) == (r.present ? 1 : 0));
    if (r.present) {
      const int m = task_label(ds, k, Task::MI), i = task_label(ds, k, Task::II);
      CHECK(ds.labels.modulations.at(m) == r.modulation);
      CHECK(ds.labels.interferences.at(i) == r.interference_type());
    }
  }
}

}  // TEST_SUITE
