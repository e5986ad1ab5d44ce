#include "amtidin/dataio.hpp"

#include <json.hpp>
#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <tuple>

namespace amtidin::dataio {

using nlohmann::json;
using siggen::SignalRecord;

namespace {

constexpr char kMagic[4] = {'S', 'I', 'G', 'D'};

class ByteWriter {
 public:
  explicit ByteWriter(std::vector<std::uint8_t>& out) : out_(out) {}
  template <typename T>
  void put(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    std::array<std::uint8_t, sizeof(T)> buf;
    std::memcpy(buf.data(), &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf.begin(), buf.end());
    out_.insert(out_.end(), buf.begin(), buf.end());
  }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }

 private:
  std::vector<std::uint8_t>& out_;
};

class ByteReader {
 public:
  ByteReader(const std::vector<std::uint8_t>& in, std::size_t pos = 0) : in_(in), pos_(pos) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    std::array<std::uint8_t, sizeof(T)> buf;
    std::memcpy(buf.data(), in_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf.begin(), buf.end());
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, buf.data(), sizeof(T));
    return v;
  }
  std::string string(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  void need(std::size_t n) const {
    if (pos_ + n > in_.size()) throw FormatError("SIGD: truncated payload");
  }

 private:
  const std::vector<std::uint8_t>& in_;
  std::size_t pos_;
};

std::uint32_t crc32_of(const std::uint8_t* p, std::size_t n) {
  uLong c = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed large regions in pieces.
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    c = crc32(c, p, chunk);
    p += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(c);
}

json header_json(const Dataset& ds) {
  json h;
  h["version"] = Dataset::kSchemaVersion;
  h["n"] = ds.n;
  h["count"] = ds.records.size();
  h["m_classes"] = ds.labels.m_classes();
  h["i_classes"] = ds.labels.i_classes();
  json mods = json::array(), ints = json::array();
  for (auto m : ds.labels.modulations) mods.push_back(std::string(siggen::name(m)));
  for (auto i : ds.labels.interferences) ints.push_back(std::string(siggen::name(i)));
  h["modulation_labels"] = mods;
  h["interference_labels"] = ints;
  h["gen_config"] = ds.gen_config_json.empty() ? json(nullptr) : json::parse(ds.gen_config_json);
  return h;
}

}  // namespace

std::vector<std::uint8_t> serialize_dataset(const Dataset& ds) {
  for (const auto& r : ds.records)
    if (r.iq.cols() != ds.n) throw FormatError("SIGD: record length differs from dataset n");
  const std::string header = header_json(ds).dump();
  std::vector<std::uint8_t> out;
  const std::size_t rec_bytes = 1 + 2 + 2 + 4 * 3 + 8 + 8 * static_cast<std::size_t>(ds.n);
  out.reserve(4 + 4 + 8 + header.size() + ds.records.size() * rec_bytes + 4);
  ByteWriter w(out);
  w.bytes(kMagic, 4);
  w.put<std::uint32_t>(Dataset::kSchemaVersion);
  w.put<std::uint64_t>(header.size());
  w.bytes(header.data(), header.size());
  const std::size_t region_start = out.size();
  for (const auto& r : ds.records) {
    w.put<std::uint8_t>(r.present ? 1 : 0);
    w.put<std::uint16_t>(static_cast<std::uint16_t>(r.modulation));
    w.put<std::uint16_t>(r.interference);
    w.put<float>(r.snr_db);
    w.put<float>(r.realized_signal_power);
    w.put<float>(r.noise_variance);
    w.put<std::uint64_t>(r.seed);
    for (int row = 0; row < 2; ++row)
      for (Eigen::Index k = 0; k < r.iq.cols(); ++k) w.put<float>(r.iq(row, k));
  }
  const std::uint32_t crc = crc32_of(out.data() + region_start, out.size() - region_start);
  w.put<std::uint32_t>(crc);
  return out;
}

Dataset deserialize_dataset(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("SIGD: bad magic");
  ByteReader rd(bytes, 4);
  const auto version = rd.get<std::uint32_t>();
  if (version != Dataset::kSchemaVersion) throw FormatError("SIGD: unsupported version " + std::to_string(version));
  const auto header_len = rd.get<std::uint64_t>();
  if (header_len > bytes.size()) throw FormatError("SIGD: truncated payload");
  json h;
  try {
    h = json::parse(rd.string(header_len));
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("SIGD: malformed header: ") + e.what());
  }
  Dataset ds;
  std::size_t count = 0;
  try {
    ds.n = h.at("n").get<int>();
    count = h.at("count").get<std::size_t>();
    for (const auto& s : h.at("modulation_labels")) ds.labels.modulations.push_back(siggen::modulation_from_name(s.get<std::string>()));
    for (const auto& s : h.at("interference_labels")) ds.labels.interferences.push_back(siggen::interference_from_name(s.get<std::string>()));
    if (!h.at("gen_config").is_null()) ds.gen_config_json = h.at("gen_config").dump();
  } catch (const json::exception& e) {
    throw FormatError(std::string("SIGD: malformed header: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("SIGD: malformed header: ") + e.what());
  }
  if (ds.n < 0) throw FormatError("SIGD: negative signal length");
  {
    std::set<siggen::Modulation> um(ds.labels.modulations.begin(), ds.labels.modulations.end());
    std::set<siggen::Interference> ui(ds.labels.interferences.begin(), ds.labels.interferences.end());
    if (um.size() != ds.labels.modulations.size() || ui.size() != ds.labels.interferences.size())
      throw FormatError("SIGD: label maps are not bijective");
  }
  const std::size_t rec_bytes = 1 + 2 + 2 + 4 * 3 + 8 + 8 * static_cast<std::size_t>(ds.n);
  const std::size_t region_start = rd.pos();
  if (bytes.size() < region_start + 4 || (bytes.size() - region_start - 4) / rec_bytes < count)
    throw FormatError("SIGD: truncated payload");
  if (bytes.size() != region_start + count * rec_bytes + 4) throw FormatError("SIGD: trailing bytes after records");
  const std::uint32_t stored_crc = ByteReader(bytes, region_start + count * rec_bytes).get<std::uint32_t>();
  if (crc32_of(bytes.data() + region_start, count * rec_bytes) != stored_crc) throw FormatError("SIGD: checksum failure");
  ds.records.resize(count);
  for (auto& r : ds.records) {
    r.present = rd.get<std::uint8_t>() != 0;
    r.modulation = static_cast<siggen::Modulation>(rd.get<std::uint16_t>());
    r.interference = rd.get<std::uint16_t>();
    r.snr_db = rd.get<float>();
    r.realized_signal_power = rd.get<float>();
    r.noise_variance = rd.get<float>();
    r.seed = rd.get<std::uint64_t>();
    r.iq.resize(2, ds.n);
    for (int row = 0; row < 2; ++row)
      for (int k = 0; k < ds.n; ++k) r.iq(row, k) = rd.get<float>();
    if (static_cast<int>(r.modulation) >= siggen::kNumModulations) throw FormatError("SIGD: invalid modulation code");
  }
  return ds;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  const auto bytes = serialize_dataset(ds);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw ConfigError("cannot open '" + tmp.string() + "' for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw ConfigError("write to '" + tmp.string() + "' failed");
  }
  std::filesystem::rename(tmp, path);
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_dataset(bytes);
}

void SplitSpec::validate() const {
  double sum = 0.0;
  for (double f : fractions) {
    if (!(f >= 0.0 && f <= 1.0)) throw ConfigError("SplitSpec: fractions must lie in [0,1]");
    sum += f;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("SplitSpec: fractions must sum to 1");
}

Dataset subset(const Dataset& ds, const std::vector<std::size_t>& indices) {
  Dataset out;
  out.n = ds.n;
  out.labels = ds.labels;
  out.gen_config_json = ds.gen_config_json;
  out.records.reserve(indices.size());
  for (auto i : indices) out.records.push_back(ds.records.at(i));
  return out;
}

std::array<std::vector<std::size_t>, 3> stratified_split_indices(const Dataset& ds, const SplitSpec& spec) {
  spec.validate();
  using Key = std::tuple<int, int, float, bool>;
  std::map<Key, std::vector<std::size_t>> strata;
  for (std::size_t k = 0; k < ds.records.size(); ++k) {
    const auto& r = ds.records[k];
    strata[{static_cast<int>(r.modulation), static_cast<int>(r.interference), r.snr_db, r.present}].push_back(k);
  }
  double min_positive = 1.0;
  for (double f : spec.fractions)
    if (f > 0.0) min_positive = std::min(min_positive, f);
  const auto min_size = static_cast<std::size_t>(std::ceil(1.0 / min_positive - 1e-9));

  std::string offenders;
  for (const auto& [key, members] : strata) {
    if (members.size() < min_size) {
      const auto& r = ds.records[members.front()];
      std::ostringstream os;
      os << (offenders.empty() ? "" : ", ") << "(" << siggen::name(r.modulation) << ","
         << (r.present ? std::string(siggen::name(r.interference_type())) : std::string("none")) << "," << r.snr_db
         << "dB," << (r.present ? "present" : "absent") << "):" << members.size();
      offenders += os.str();
    }
  }
  if (!offenders.empty())
    throw ConfigError("stratified_split: strata smaller than " + std::to_string(min_size) + " records: " + offenders);

  std::array<std::vector<std::size_t>, 3> parts;
  for (const auto& [key, members] : strata) {
    const auto& [mod, intf, snr, present] = key;
    std::uint64_t snr_bits = 0;
    std::memcpy(&snr_bits, &snr, sizeof(float));
    std::mt19937_64 rng(derive_seed(spec.seed, {static_cast<std::uint64_t>(mod), static_cast<std::uint64_t>(intf),
                                                snr_bits, static_cast<std::uint64_t>(present)}));
    std::vector<std::size_t> shuffled = members;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    // Largest-remainder apportionment: each part within one record of its target.
    const std::size_t m = members.size();
    std::array<std::size_t, 3> counts{};
    std::array<double, 3> rem{};
    std::size_t used = 0;
    for (int p = 0; p < 3; ++p) {
      const double exact = spec.fractions[p] * static_cast<double>(m);
      counts[p] = static_cast<std::size_t>(std::floor(exact + 1e-9));
      rem[p] = exact - static_cast<double>(counts[p]);
      used += counts[p];
    }
    while (used < m) {
      int best = 0;
      for (int p = 1; p < 3; ++p)
        if (rem[p] > rem[best] + 1e-12) best = p;
      ++counts[best];
      rem[best] = -1.0;
      ++used;
    }
    std::size_t pos = 0;
    for (int p = 0; p < 3; ++p)
      for (std::size_t c = 0; c < counts[p]; ++c) parts[p].push_back(shuffled[pos++]);
  }
  for (auto& p : parts) std::sort(p.begin(), p.end());
  return parts;
}

Split stratified_split(const Dataset& ds, const SplitSpec& spec) {
  const auto parts = stratified_split_indices(ds, spec);
  return {subset(ds, parts[0]), subset(ds, parts[1]), subset(ds, parts[2])};
}

int task_label(const Dataset& ds, std::size_t record, Task t) {
  const auto& r = ds.records[record];
  switch (t) {
    case Task::ID:
      return r.present ? 1 : 0;
    case Task::MI:
      return ds.labels.modulation_class(r.modulation);
    case Task::II:
      return ds.labels.interference_class(r.interference_type());
  }
  return -1;
}

InputBlock pack_inputs(const Dataset& ds, const std::vector<std::size_t>& indices) {
  InputBlock x(2, static_cast<Eigen::Index>(indices.size()) * ds.n);
  for (std::size_t b = 0; b < indices.size(); ++b)
    x.middleCols(static_cast<Eigen::Index>(b) * ds.n, ds.n) = ds.records[indices[b]].iq;
  return x;
}

TaskBatchIterator::TaskBatchIterator(const Dataset& ds, int batch_size, std::uint64_t epoch_seed,
                                     std::array<bool, 3> active)
    : ds_(&ds), batch_size_(batch_size), active_(active) {
  if (batch_size < 2) throw ConfigError("make_task_batches: batch size must be >= 2");
  std::vector<std::size_t> all(ds.records.size()), present;
  std::iota(all.begin(), all.end(), std::size_t{0});
  for (auto k : all)
    if (ds.records[k].present) present.push_back(k);
  if (present.empty() && (active[1] || active[2])) throw ConfigError("make_task_batches: no interference-present records");
  if (all.empty()) throw ConfigError("make_task_batches: empty dataset");
  std::size_t longest = 0;
  for (Task t : kAllTasks) {
    const int ti = index(t);
    if (!active[ti]) continue;
    order_[ti] = t == Task::ID ? all : present;
    std::mt19937_64 rng(derive_seed(epoch_seed, {static_cast<std::uint64_t>(ti)}));
    std::shuffle(order_[ti].begin(), order_[ti].end(), rng);
    longest = std::max(longest, order_[ti].size());
  }
  if (longest == 0) throw ConfigError("make_task_batches: no active streams");
  num_batches_ = static_cast<int>((longest + batch_size - 1) / batch_size);
}

TaskBatch TaskBatchIterator::next() {
  if (!has_next()) throw std::out_of_range("TaskBatchIterator exhausted");
  TaskBatch b;
  b.n = ds_->n;
  for (Task t : kAllTasks) {
    const int ti = index(t);
    if (!active_[ti]) continue;
    const auto& ord = order_[ti];
    auto& idx = b.idx[ti];
    idx.reserve(batch_size_);
    for (int k = 0; k < batch_size_; ++k)
      idx.push_back(ord[(static_cast<std::size_t>(cursor_) * batch_size_ + k) % ord.size()]);
    b.x[ti] = pack_inputs(*ds_, idx);
    b.y[ti].reserve(idx.size());
    for (auto r : idx) b.y[ti].push_back(task_label(*ds_, r, t));
  }
  ++cursor_;
  return b;
}

TaskBatchIterator make_task_batches(const Dataset& train, int batch_size, std::uint64_t epoch_seed,
                                    std::array<bool, 3> active) {
  return TaskBatchIterator(train, batch_size, epoch_seed, active);
}

}  // namespace amtidin::dataio
