#include "amtidin/siggen.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <random>
#include <thread>

namespace amtidin {

std::string_view task_name(Task t) {
  switch (t) {
    case Task::ID:
      return "ID";
    case Task::MI:
      return "MI";
    case Task::II:
      return "II";
  }
  return "?";
}

Task task_from_name(std::string_view name) {
  for (Task t : kAllTasks)
    if (task_name(t) == name) return t;
  throw ConfigError("unknown task '" + std::string(name) + "'");
}

int pair_index(int t, int i) {
  const int a = std::min(t, i), b = std::max(t, i);
  for (int p = 0; p < 3; ++p)
    if (kTaskPairs[p][0] == a && kTaskPairs[p][1] == b) return p;
  throw std::out_of_range("pair_index: tasks must differ");
}

std::uint64_t hash_string(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return mix64(h);
}

}  // namespace amtidin

namespace amtidin::siggen {

using nlohmann::json;

namespace {

constexpr std::array<std::string_view, kNumModulations> kModNames{
    "UNMOD", "BPSK", "QPSK", "PSK8", "QAM16", "QAM64", "PAM4", "GFSK", "CPFSK", "WBFM", "AMDSB", "AMSSB", "NAM", "PM"};
constexpr std::array<std::string_view, kNumInterferences> kIntNames{"CWI", "NNI", "MTI", "LFMI", "DMI", "AMI"};

void add_noise(ComplexVector& x, double variance, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, std::sqrt(variance / 2.0));
  for (Eigen::Index k = 0; k < x.size(); ++k) x[k] += std::complex<double>(g(rng), g(rng));
}

IqMatrix to_iq(const ComplexVector& r) {
  IqMatrix iq(2, r.size());
  for (Eigen::Index k = 0; k < r.size(); ++k) {
    iq(0, k) = static_cast<float>(r[k].real());
    iq(1, k) = static_cast<float>(r[k].imag());
  }
  return iq;
}

// Seeds of the independent random streams used for one positive record.
struct RecordSeeds {
  std::uint64_t waveform, channel, noise;
};
RecordSeeds split_seed(std::uint64_t s) { return {derive_seed(s, {1}), derive_seed(s, {2}), derive_seed(s, {3})}; }

}  // namespace

std::string_view name(Modulation m) { return kModNames.at(static_cast<std::size_t>(m)); }
std::string_view name(Interference i) { return kIntNames.at(static_cast<std::size_t>(i)); }

std::string_view name(ChannelKind k) {
  switch (k) {
    case ChannelKind::AWGN:
      return "AWGN";
    case ChannelKind::Rayleigh:
      return "Rayleigh";
    case ChannelKind::Rician:
      return "Rician";
  }
  return "?";
}

Modulation modulation_from_name(std::string_view s) {
  for (int k = 0; k < kNumModulations; ++k)
    if (kModNames[k] == s) return static_cast<Modulation>(k);
  throw ConfigError("unknown modulation '" + std::string(s) + "'");
}

Interference interference_from_name(std::string_view s) {
  for (int k = 0; k < kNumInterferences; ++k)
    if (kIntNames[k] == s) return static_cast<Interference>(k);
  throw ConfigError("unknown interference type '" + std::string(s) + "'");
}

Interference SignalRecord::interference_type() const {
  if (!present || interference >= kNumInterferences) throw ConfigError("record carries no interference label");
  return static_cast<Interference>(interference);
}

Pairing default_pairing() {
  using M = Modulation;
  Pairing p;
  for (auto i : {Interference::CWI, Interference::NNI, Interference::MTI, Interference::LFMI}) p[i] = {M::UNMOD};
  p[Interference::DMI] = {M::BPSK, M::QPSK, M::PSK8, M::QAM16, M::QAM64, M::PAM4, M::GFSK, M::CPFSK};
  p[Interference::AMI] = {M::WBFM, M::AMDSB, M::AMSSB, M::NAM, M::PM};
  return p;
}

void GenConfig::validate() const {
  if (n < 64) throw ConfigError("GenConfig: n must be >= 64");
  if (samples_per_class < 1) throw ConfigError("GenConfig: samples_per_class must be >= 1");
  if (snr_list_db.empty()) throw ConfigError("GenConfig: snr_list_db must be non-empty");
  for (double s : snr_list_db)
    if (!std::isfinite(s)) throw ConfigError("GenConfig: non-finite SNR");
  if (sps < 2) throw ConfigError("GenConfig: sps must be >= 2");
  if (!(rrc_rolloff > 0.0 && rrc_rolloff <= 1.0)) throw ConfigError("GenConfig: rrc_rolloff must lie in (0,1]");
  if (mti_tones < 1) throw ConfigError("GenConfig: mti_tones must be >= 1");
  if (!(nni_bandwidth_frac > 0.0 && nni_bandwidth_frac <= 1.0)) throw ConfigError("GenConfig: nni_bandwidth_frac in (0,1]");
  if (!(lfmi_sweep_frac > 0.0 && lfmi_sweep_frac <= 0.9)) throw ConfigError("GenConfig: lfmi_sweep_frac in (0,0.9]");
  if (!(cwi_freq_frac_range[0] > -0.4 - 1e-12 && cwi_freq_frac_range[1] < 0.4 + 1e-12 &&
        cwi_freq_frac_range[0] < cwi_freq_frac_range[1]))
    throw ConfigError("GenConfig: cwi_freq_frac_range must be an interval within (-0.4, 0.4)");
  if (!(rician_k > 0.0)) throw ConfigError("GenConfig: rician_k must be > 0");
  double mix = 0.0;
  for (double c : channel_mix) {
    if (c < 0.0) throw ConfigError("GenConfig: channel_mix entries must be non-negative");
    mix += c;
  }
  if (std::abs(mix - 1.0) > 1e-9) throw ConfigError("GenConfig: channel_mix must sum to 1");
  for (int k = 0; k < kNumInterferences; ++k)
    if (!pairing.contains(static_cast<Interference>(k)))
      throw ConfigError("GenConfig: pairing must cover " + std::string(name(static_cast<Interference>(k))));
  if (interference_types.empty()) throw ConfigError("GenConfig: no interference types selected");
  for (auto i : interference_types) {
    const auto& allowed = pairing.at(i);
    if (allowed.empty()) throw ConfigError("GenConfig: empty pairing stratum for " + std::string(name(i)));
    const bool unmod_family = i == Interference::CWI || i == Interference::NNI || i == Interference::MTI ||
                              i == Interference::LFMI;
    for (auto m : allowed) {
      if (unmod_family != (m == Modulation::UNMOD))
        throw ConfigError("GenConfig: pairing " + std::string(name(i)) + "/" + std::string(name(m)) + " is invalid");
    }
  }
  std::set<Interference> uniq(interference_types.begin(), interference_types.end());
  if (uniq.size() != interference_types.size()) throw ConfigError("GenConfig: duplicate interference types");
}

ChannelOutput apply_channel(const ComplexVector& x, const ChannelModel& ch, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, std::sqrt(0.5));
  std::complex<double> gain(1.0, 0.0);
  switch (ch.kind) {
    case ChannelKind::AWGN:
      break;
    case ChannelKind::Rayleigh:
      gain = {g(rng), g(rng)};
      break;
    case ChannelKind::Rician: {
      const double k = ch.rician_k;
      const std::complex<double> scatter(g(rng), g(rng));
      gain = std::sqrt(k / (k + 1.0)) + std::sqrt(1.0 / (k + 1.0)) * scatter;
      break;
    }
  }
  if (ch.kind == ChannelKind::AWGN) return {x, gain};
  return {x * gain, gain};
}

NoisyOutput scale_to_snr(const ComplexVector& y, double snr_db, std::uint64_t seed) {
  const double p = mean_power(y);
  if (!(p > 0.0)) throw NumericError("scale_to_snr: input has zero power");
  const double variance = p / std::pow(10.0, snr_db / 10.0);
  std::mt19937_64 rng(seed);
  ComplexVector r = y;
  add_noise(r, variance, rng);
  return {std::move(r), variance};
}

int LabelMaps::modulation_class(Modulation m) const {
  const auto it = std::find(modulations.begin(), modulations.end(), m);
  return it == modulations.end() ? -1 : static_cast<int>(it - modulations.begin());
}

int LabelMaps::interference_class(Interference i) const {
  const auto it = std::find(interferences.begin(), interferences.end(), i);
  return it == interferences.end() ? -1 : static_cast<int>(it - interferences.begin());
}

LabelMaps label_maps_for(const GenConfig& cfg) {
  std::set<Modulation> mods;
  std::set<Interference> ints(cfg.interference_types.begin(), cfg.interference_types.end());
  for (auto i : ints) mods.insert(cfg.pairing.at(i).begin(), cfg.pairing.at(i).end());
  return {{mods.begin(), mods.end()}, {ints.begin(), ints.end()}};
}

std::vector<Stratum> enumerate_strata(const GenConfig& cfg) {
  std::vector<Interference> ints = cfg.interference_types;
  std::sort(ints.begin(), ints.end());
  std::vector<Stratum> out;
  for (auto i : ints) {
    const auto it = cfg.pairing.find(i);
    if (it == cfg.pairing.end() || it->second.empty())
      throw ConfigError("generate_dataset: empty pairing stratum for " + std::string(name(i)));
    for (auto m : it->second)
      for (double snr : cfg.snr_list_db) out.push_back({i, m, snr});
  }
  return out;
}

std::vector<ChannelKind> assign_channels(const std::array<double, 3>& mix, int count) {
  std::array<int, 3> quota{};
  std::array<double, 3> rem{};
  int used = 0;
  for (int k = 0; k < 3; ++k) {
    const double exact = mix[k] * count;
    quota[k] = static_cast<int>(std::floor(exact + 1e-9));
    rem[k] = exact - quota[k];
    used += quota[k];
  }
  while (used < count) {
    int best = 0;
    for (int k = 1; k < 3; ++k)
      if (rem[k] > rem[best] + 1e-12) best = k;
    ++quota[best];
    rem[best] = -1.0;
    ++used;
  }
  std::vector<ChannelKind> out;
  out.reserve(count);
  std::array<int, 3> assigned{};
  for (int j = 0; j < count; ++j) {
    int best = -1;
    double best_deficit = -1e300;
    for (int k = 0; k < 3; ++k) {
      if (assigned[k] >= quota[k]) continue;
      const double deficit = static_cast<double>(quota[k]) * (j + 1) / count - assigned[k];
      if (deficit > best_deficit + 1e-12) {
        best_deficit = deficit;
        best = k;
      }
    }
    ++assigned[best];
    out.push_back(static_cast<ChannelKind>(best));
  }
  return out;
}

std::uint64_t record_seed(std::uint64_t master_seed, std::uint64_t stratum_index, std::uint64_t record_index) {
  return derive_seed(master_seed, {stratum_index, record_index});
}

RecordSynthesis synthesize_positive(const GenConfig& cfg, const Stratum& s, ChannelKind channel, std::uint64_t seed) {
  const auto seeds = split_seed(seed);
  RecordSynthesis out;
  out.clean = synth_interference(s.interference, s.modulation, cfg.n, cfg, seeds.waveform);
  auto ch = apply_channel(out.clean, {channel, cfg.rician_k}, seeds.channel);
  out.faded = std::move(ch.y);
  out.gain = ch.gain;
  out.channel = channel;
  auto noisy = scale_to_snr(out.faded, s.snr_db, seeds.noise);
  out.received = std::move(noisy.r);
  out.noise_variance = noisy.noise_variance;
  return out;
}

Dataset generate_dataset(const GenConfig& cfg, int threads) {
  cfg.validate();
  const auto strata = enumerate_strata(cfg);
  const int spc = cfg.samples_per_class;
  const auto channels = assign_channels(cfg.channel_mix, spc);

  struct Job {
    std::size_t stratum;  // index into strata, or strata.size() + snr index for noise
    int record;
  };
  std::vector<Job> jobs;
  for (std::size_t s = 0; s < strata.size(); ++s)
    for (int j = 0; j < spc; ++j) jobs.push_back({s, j});
  // Pure-noise negatives, matched to the positive count at every SNR.
  for (std::size_t q = 0; q < cfg.snr_list_db.size(); ++q) {
    int positives = 0;
    for (const auto& st : strata)
      if (st.snr_db == cfg.snr_list_db[q]) positives += spc;
    for (int j = 0; j < positives; ++j) jobs.push_back({strata.size() + q, j});
  }

  Dataset ds;
  ds.n = cfg.n;
  ds.labels = label_maps_for(cfg);
  ds.gen_config_json = gen_config_to_json(cfg);
  ds.records.resize(jobs.size());

  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t k = begin; k < end; ++k) {
      const Job& job = jobs[k];
      SignalRecord& rec = ds.records[k];
      const std::uint64_t seed = record_seed(cfg.master_seed, job.stratum, static_cast<std::uint64_t>(job.record));
      rec.seed = seed;
      if (job.stratum < strata.size()) {
        const Stratum& st = strata[job.stratum];
        const auto syn = synthesize_positive(cfg, st, channels[job.record], seed);
        rec.iq = to_iq(syn.received);
        rec.present = true;
        rec.modulation = st.modulation;
        rec.interference = static_cast<std::uint16_t>(st.interference);
        rec.snr_db = static_cast<float>(st.snr_db);
        rec.realized_signal_power = static_cast<float>(mean_power(syn.faded));
        rec.noise_variance = static_cast<float>(syn.noise_variance);
      } else {
        std::mt19937_64 rng(seed);
        ComplexVector r = ComplexVector::Zero(cfg.n);
        add_noise(r, 1.0, rng);
        rec.iq = to_iq(r);
        rec.present = false;
        rec.modulation = Modulation::UNMOD;
        rec.interference = kNoInterference;
        rec.snr_db = static_cast<float>(cfg.snr_list_db[job.stratum - strata.size()]);
        rec.realized_signal_power = 0.0f;
        rec.noise_variance = 1.0f;
      }
    }
  };

  const std::size_t nthreads = static_cast<std::size_t>(std::max(1, threads));
  if (nthreads == 1 || jobs.size() < 64) {
    work(0, jobs.size());
  } else {
    std::vector<std::jthread> pool;
    const std::size_t chunk = (jobs.size() + nthreads - 1) / nthreads;
    for (std::size_t t = 0; t < nthreads; ++t) {
      const std::size_t b = t * chunk, e = std::min(jobs.size(), b + chunk);
      if (b < e) pool.emplace_back(work, b, e);
    }
  }
  return ds;
}

AuditReport audit_record(const SignalRecord& rec, double bound_db) {
  if (!rec.present) throw ConfigError("audit_record: record has no interference present");
  if (!(rec.noise_variance > 0.0f)) throw NumericError("audit_record: noise variance is zero");
  if (!(rec.realized_signal_power > 0.0f)) throw NumericError("audit_record: signal power is zero");
  AuditReport a;
  a.labeled_snr_db = rec.snr_db;
  const double p = rec.realized_signal_power;
  const double var = rec.noise_variance;
  a.audit_snr_db = 10.0 * std::log10(p / var);
  const Eigen::ArrayXd mag2 = rec.iq.cast<double>().colwise().squaredNorm().transpose().array();
  a.measured_power = mag2.mean();
  a.expected_power = p + var;
  a.peak_amplitude = std::sqrt(mag2.maxCoeff());
  a.papr_db = a.measured_power > 0.0 ? 10.0 * std::log10(mag2.maxCoeff() / a.measured_power) : 0.0;
  a.within_bound = std::abs(a.audit_snr_db - a.labeled_snr_db) <= bound_db;
  return a;
}

std::string gen_config_to_json(const GenConfig& cfg) {
  json j;
  j["n"] = cfg.n;
  j["samples_per_class"] = cfg.samples_per_class;
  j["snr_list_db"] = cfg.snr_list_db;
  j["sps"] = cfg.sps;
  j["rrc_rolloff"] = cfg.rrc_rolloff;
  j["mti_tones"] = cfg.mti_tones;
  j["nni_bandwidth_frac"] = cfg.nni_bandwidth_frac;
  j["lfmi_sweep_frac"] = cfg.lfmi_sweep_frac;
  j["cwi_freq_frac_range"] = cfg.cwi_freq_frac_range;
  j["rician_k"] = cfg.rician_k;
  j["channel_mix"] = cfg.channel_mix;
  json types = json::array();
  for (auto i : cfg.interference_types) types.push_back(std::string(name(i)));
  j["interference_types"] = types;
  json pairing = json::object();
  for (const auto& [i, mods] : cfg.pairing) {
    json arr = json::array();
    for (auto m : mods) arr.push_back(std::string(name(m)));
    pairing[std::string(name(i))] = arr;
  }
  j["pairing"] = pairing;
  j["master_seed"] = cfg.master_seed;
  return j.dump();
}

GenConfig gen_config_from_json(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("GenConfig JSON: ") + e.what());
  }
  GenConfig cfg;
  try {
    if (j.contains("n")) cfg.n = j["n"].get<int>();
    if (j.contains("samples_per_class")) cfg.samples_per_class = j["samples_per_class"].get<int>();
    if (j.contains("snr_list_db")) cfg.snr_list_db = j["snr_list_db"].get<std::vector<double>>();
    if (j.contains("sps")) cfg.sps = j["sps"].get<int>();
    if (j.contains("rrc_rolloff")) cfg.rrc_rolloff = j["rrc_rolloff"].get<double>();
    if (j.contains("mti_tones")) cfg.mti_tones = j["mti_tones"].get<int>();
    if (j.contains("nni_bandwidth_frac")) cfg.nni_bandwidth_frac = j["nni_bandwidth_frac"].get<double>();
    if (j.contains("lfmi_sweep_frac")) cfg.lfmi_sweep_frac = j["lfmi_sweep_frac"].get<double>();
    if (j.contains("cwi_freq_frac_range")) cfg.cwi_freq_frac_range = j["cwi_freq_frac_range"].get<std::array<double, 2>>();
    if (j.contains("rician_k")) cfg.rician_k = j["rician_k"].get<double>();
    if (j.contains("channel_mix")) cfg.channel_mix = j["channel_mix"].get<std::array<double, 3>>();
    if (j.contains("interference_types")) {
      cfg.interference_types.clear();
      for (const auto& s : j["interference_types"]) cfg.interference_types.push_back(interference_from_name(s.get<std::string>()));
    }
    if (j.contains("pairing")) {
      for (const auto& [key, arr] : j["pairing"].items()) {
        std::set<Modulation> mods;
        for (const auto& s : arr) mods.insert(modulation_from_name(s.get<std::string>()));
        cfg.pairing[interference_from_name(key)] = mods;
      }
    }
    if (j.contains("master_seed")) cfg.master_seed = j["master_seed"].get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("GenConfig JSON: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

}  // namespace amtidin::siggen
