#pragma once

#include <Eigen/Core>

#include <array>
#include <complex>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "amtidin/common.hpp"

namespace amtidin::siggen {

enum class Modulation : std::uint16_t {
  UNMOD = 0,
  BPSK,
  QPSK,
  PSK8,
  QAM16,
  QAM64,
  PAM4,
  GFSK,
  CPFSK,
  WBFM,
  AMDSB,
  AMSSB,
  NAM,
  PM
};
inline constexpr int kNumModulations = 14;

enum class Interference : std::uint16_t { CWI = 0, NNI, MTI, LFMI, DMI, AMI };
inline constexpr int kNumInterferences = 6;
// Stored in place of an interference label when no interference is present.
inline constexpr std::uint16_t kNoInterference = 0xFFFF;

std::string_view name(Modulation m);
std::string_view name(Interference i);
Modulation modulation_from_name(std::string_view s);
Interference interference_from_name(std::string_view s);
bool is_linear(Modulation m);

enum class ChannelKind : std::uint8_t { AWGN = 0, Rayleigh, Rician };
std::string_view name(ChannelKind k);

struct ChannelModel {
  ChannelKind kind = ChannelKind::AWGN;
  double rician_k = 4.0;
};

using ComplexVector = Eigen::VectorXcd;
using IqMatrix = Eigen::Matrix<float, 2, Eigen::Dynamic>;

struct SignalRecord {
  IqMatrix iq;  // row 0 = I, row 1 = Q
  bool present = false;
  Modulation modulation = Modulation::UNMOD;
  std::uint16_t interference = kNoInterference;  // Interference value when present
  float snr_db = 0.0f;
  float realized_signal_power = 0.0f;
  float noise_variance = 0.0f;
  std::uint64_t seed = 0;

  Interference interference_type() const;
  bool operator==(const SignalRecord&) const = default;
};

using Pairing = std::map<Interference, std::set<Modulation>>;
Pairing default_pairing();

struct GenConfig {
  int n = 256;
  int samples_per_class = 100;
  std::vector<double> snr_list_db{10.0};
  int sps = 8;
  double rrc_rolloff = 0.35;
  int mti_tones = 5;
  double nni_bandwidth_frac = 0.1;
  double lfmi_sweep_frac = 0.4;
  std::array<double, 2> cwi_freq_frac_range{-0.4, 0.4};
  double rician_k = 4.0;
  std::array<double, 3> channel_mix{1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0};
  // Interference families that are generated; each needs a non-empty pairing entry.
  std::vector<Interference> interference_types{Interference::CWI, Interference::NNI, Interference::MTI,
                                               Interference::LFMI, Interference::DMI, Interference::AMI};
  Pairing pairing = default_pairing();
  std::uint64_t master_seed = 0;

  // Throws ConfigError on any violated invariant.
  void validate() const;
};

// ---- waveform synthesis -------------------------------------------------------

// Gray-mapped, unit-average-energy constellation for a linear modulation.
std::vector<std::complex<double>> constellation(Modulation m);
// Maps symbol indices (Gray-coded order) to constellation points.
ComplexVector map_symbols(Modulation m, const std::vector<int>& symbol_indices);
// Root-raised-cosine taps spanning `span` symbols, unit energy.
Eigen::VectorXd rrc_taps(int sps, double rolloff, int span);
// Upsamples and RRC-filters a symbol stream; returns n samples normalized to unit power.
ComplexVector shape_symbols(const ComplexVector& symbols, int n, const GenConfig& cfg);

ComplexVector synth_modulated(Modulation m, int n, const GenConfig& cfg, std::uint64_t seed);
ComplexVector synth_interference(Interference i, Modulation m, int n, const GenConfig& cfg, std::uint64_t seed);

struct ChannelOutput {
  ComplexVector y;
  std::complex<double> gain;
};
ChannelOutput apply_channel(const ComplexVector& x, const ChannelModel& ch, std::uint64_t seed);

struct NoisyOutput {
  ComplexVector r;
  double noise_variance = 0.0;
};
NoisyOutput scale_to_snr(const ComplexVector& y, double snr_db, std::uint64_t seed);

double mean_power(const ComplexVector& x);

// ---- dataset generation -------------------------------------------------------

struct LabelMaps {
  std::vector<Modulation> modulations;      // class index -> modulation
  std::vector<Interference> interferences;  // class index -> interference

  int modulation_class(Modulation m) const;
  int interference_class(Interference i) const;
  int m_classes() const { return static_cast<int>(modulations.size()); }
  int i_classes() const { return static_cast<int>(interferences.size()); }
  bool operator==(const LabelMaps&) const = default;
};
LabelMaps label_maps_for(const GenConfig& cfg);

struct Dataset {
  static constexpr std::uint32_t kSchemaVersion = 1;
  int n = 0;
  LabelMaps labels;
  std::string gen_config_json;  // canonical JSON echo of the generating config
  std::vector<SignalRecord> records;

  std::size_t size() const { return records.size(); }
  bool operator==(const Dataset&) const = default;
};

// One (interference, modulation, snr) cell of the generation grid.
struct Stratum {
  Interference interference;
  Modulation modulation;
  double snr_db;
};
std::vector<Stratum> enumerate_strata(const GenConfig& cfg);

// Channel assignment for records 0..count-1 of a stratum: exact largest-remainder
// counts, interleaved so that prefixes stay close to channel_mix.
std::vector<ChannelKind> assign_channels(const std::array<double, 3>& mix, int count);

// Clean (pre-noise) and received signal of one positive record, exposed so tests can
// check the noise injection against the clean reference.
struct RecordSynthesis {
  ComplexVector clean;     // unit-power interference waveform
  ComplexVector faded;     // after the channel gain
  ComplexVector received;  // after noise injection
  std::complex<double> gain;
  ChannelKind channel;
  double noise_variance;
};
RecordSynthesis synthesize_positive(const GenConfig& cfg, const Stratum& s, ChannelKind channel, std::uint64_t seed);

std::uint64_t record_seed(std::uint64_t master_seed, std::uint64_t stratum_index, std::uint64_t record_index);

Dataset generate_dataset(const GenConfig& cfg, int threads = 1);

struct AuditReport {
  double labeled_snr_db = 0.0;
  double audit_snr_db = 0.0;       // 10 log10(P / sigma^2) from stored metadata
  double measured_power = 0.0;     // mean |iq|^2 of the stored samples
  double expected_power = 0.0;     // P + sigma^2
  double peak_amplitude = 0.0;
  double papr_db = 0.0;
  bool within_bound = false;
};
// Throws ConfigError for absent records and NumericError for zero noise variance.
AuditReport audit_record(const SignalRecord& rec, double bound_db = 0.3);

std::string gen_config_to_json(const GenConfig& cfg);
GenConfig gen_config_from_json(const std::string& json_text);

}  // namespace amtidin::siggen
