#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "amtidin/siggen.hpp"

namespace amtidin::siggen {

namespace {

using cd = std::complex<double>;
constexpr double kPi = std::numbers::pi;

// Fixed waveform constants not exposed through GenConfig.
constexpr int kRrcSpanSymbols = 8;
constexpr double kFskModIndex = 0.5;
constexpr double kGfskBt = 0.35;
constexpr double kAnalogMessageBw = 0.05;  // fraction of Nyquist
constexpr double kNamNoiseBw = 0.5;
constexpr double kWbfmDeviation = 0.08;  // cycles/sample per unit message
constexpr double kAmDepth = 0.5;
constexpr double kPmDeviation = kPi / 2.0;

void normalize_power(ComplexVector& x) {
  const double p = mean_power(x);
  if (!(p > 0.0)) throw NumericError("waveform has zero power");
  x /= std::sqrt(p);
}

// Gray code for k-bit index.
int gray(int v) { return v ^ (v >> 1); }

// Band-limited real Gaussian process, zero mean and unit variance, bandwidth given as a
// fraction of Nyquist (two-sided support |f| <= bw/2 cycles/sample).
Eigen::VectorXd bandlimited_gaussian(int n, double bw_frac, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<cd> time(n);
  for (auto& v : time) v = cd(g(rng), 0.0);
  Eigen::FFT<double> fft;
  std::vector<cd> freq;
  fft.fwd(freq, time);
  const double cutoff = 0.5 * bw_frac;
  for (int k = 0; k < n; ++k) {
    const double f = (k <= n / 2 ? k : k - n) / static_cast<double>(n);
    if (std::abs(f) > cutoff + 1e-12) freq[k] = 0.0;
  }
  freq[0] = 0.0;
  fft.inv(time, freq);
  Eigen::VectorXd m(n);
  for (int k = 0; k < n; ++k) m[k] = time[k].real();
  const double sd = std::sqrt((m.array() - m.mean()).square().mean());
  if (sd > 0.0) m = (m.array() - m.mean()) / sd;
  return m;
}

// Integer FFT bins whose frequency lies within a fraction-of-Nyquist interval.
std::pair<int, int> bin_range(int n, const std::array<double, 2>& frac_range) {
  const int lo = static_cast<int>(std::ceil(frac_range[0] * 0.5 * n));
  const int hi = static_cast<int>(std::floor(frac_range[1] * 0.5 * n));
  return {lo, hi};
}

ComplexVector tone_sum(int n, const std::vector<int>& bins, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> phase(0.0, 2.0 * kPi);
  ComplexVector x = ComplexVector::Zero(n);
  for (int b : bins) {
    const double phi = phase(rng);
    for (int k = 0; k < n; ++k) x[k] += std::polar(1.0, 2.0 * kPi * b * k / n + phi);
  }
  return x;
}

ComplexVector synth_fsk(Modulation m, int n, const GenConfig& cfg, std::mt19937_64& rng) {
  const int sps = cfg.sps;
  const int nsym = n / sps + 2 * kRrcSpanSymbols;
  std::bernoulli_distribution bit(0.5);
  Eigen::VectorXd freq = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(nsym) * sps);
  for (int s = 0; s < nsym; ++s) freq.segment(static_cast<Eigen::Index>(s) * sps, sps).setConstant(bit(rng) ? 1.0 : -1.0);
  if (m == Modulation::GFSK) {
    // Gaussian frequency pulse: sigma in symbols = sqrt(ln 2) / (2 pi BT).
    const double sigma = std::sqrt(std::log(2.0)) / (2.0 * kPi * kGfskBt) * sps;
    const int half = static_cast<int>(std::ceil(3.0 * sigma));
    Eigen::VectorXd taps(2 * half + 1);
    for (int k = -half; k <= half; ++k) taps[k + half] = std::exp(-0.5 * k * k / (sigma * sigma));
    taps /= taps.sum();
    Eigen::VectorXd smooth = Eigen::VectorXd::Zero(freq.size());
    for (Eigen::Index k = 0; k < freq.size(); ++k) {
      double acc = 0.0;
      for (int j = -half; j <= half; ++j) {
        const Eigen::Index idx = std::clamp<Eigen::Index>(k - j, 0, freq.size() - 1);
        acc += taps[j + half] * freq[idx];
      }
      smooth[k] = acc;
    }
    freq = smooth;
  }
  std::uniform_real_distribution<double> phase0(0.0, 2.0 * kPi);
  double phi = phase0(rng);
  ComplexVector x(n);
  const Eigen::Index offset = static_cast<Eigen::Index>(kRrcSpanSymbols) * sps;
  for (Eigen::Index k = 0; k < offset; ++k) phi += kPi * kFskModIndex * freq[k] / sps;
  for (int k = 0; k < n; ++k) {
    phi += kPi * kFskModIndex * freq[offset + k] / sps;
    x[k] = std::polar(1.0, std::remainder(phi, 2.0 * kPi));
  }
  return x;
}

ComplexVector synth_analog(Modulation m, int n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> phase0(0.0, 2.0 * kPi);
  const double phi0 = phase0(rng);
  ComplexVector x(n);
  switch (m) {
    case Modulation::WBFM: {
      const Eigen::VectorXd msg = bandlimited_gaussian(n, kAnalogMessageBw, rng);
      double phi = phi0;
      for (int k = 0; k < n; ++k) {
        phi += 2.0 * kPi * kWbfmDeviation * msg[k];
        x[k] = std::polar(1.0, std::remainder(phi, 2.0 * kPi));
      }
      break;
    }
    case Modulation::AMDSB: {
      const Eigen::VectorXd msg = bandlimited_gaussian(n, kAnalogMessageBw, rng);
      for (int k = 0; k < n; ++k) x[k] = std::polar(1.0 + kAmDepth * msg[k], phi0);
      break;
    }
    case Modulation::AMSSB: {
      const Eigen::VectorXd msg = bandlimited_gaussian(n, kAnalogMessageBw * 2.0, rng);
      std::vector<cd> time(n), freq;
      for (int k = 0; k < n; ++k) time[k] = msg[k];
      Eigen::FFT<double> fft;
      fft.fwd(freq, time);
      for (int k = 1; k < n; ++k) {
        if (k < (n + 1) / 2) freq[k] *= 2.0;
        else if (!(n % 2 == 0 && k == n / 2)) freq[k] = 0.0;
      }
      fft.inv(time, freq);
      for (int k = 0; k < n; ++k) x[k] = time[k] * std::polar(1.0, phi0);
      break;
    }
    case Modulation::NAM: {
      const Eigen::VectorXd noise = bandlimited_gaussian(n, kNamNoiseBw, rng);
      for (int k = 0; k < n; ++k) x[k] = std::polar(1.0 + kAmDepth * noise[k], phi0);
      break;
    }
    case Modulation::PM: {
      const Eigen::VectorXd msg = bandlimited_gaussian(n, kAnalogMessageBw, rng);
      for (int k = 0; k < n; ++k) x[k] = std::polar(1.0, phi0 + kPmDeviation * msg[k]);
      break;
    }
    default:
      throw ConfigError("not an analog modulation");
  }
  return x;
}

}  // namespace

double mean_power(const ComplexVector& x) {
  if (x.size() == 0) return 0.0;
  return x.squaredNorm() / static_cast<double>(x.size());
}

bool is_linear(Modulation m) {
  switch (m) {
    case Modulation::BPSK:
    case Modulation::QPSK:
    case Modulation::PSK8:
    case Modulation::QAM16:
    case Modulation::QAM64:
    case Modulation::PAM4:
      return true;
    default:
      return false;
  }
}

std::vector<cd> constellation(Modulation m) {
  std::vector<cd> pts;
  auto psk = [&pts](int order, double offset) {
    pts.resize(order);
    for (int v = 0; v < order; ++v) pts[gray(v)] = std::polar(1.0, 2.0 * kPi * v / order + offset);
  };
  auto pam_levels = [](int order) {
    // Gray-coded index -> amplitude level
    std::vector<double> lv(order);
    for (int v = 0; v < order; ++v) lv[gray(v)] = 2.0 * v - (order - 1);
    return lv;
  };
  switch (m) {
    case Modulation::BPSK:
      pts = {cd(1.0, 0.0), cd(-1.0, 0.0)};
      break;
    case Modulation::QPSK:
      psk(4, kPi / 4.0);
      break;
    case Modulation::PSK8:
      psk(8, 0.0);
      break;
    case Modulation::PAM4: {
      for (double a : pam_levels(4)) pts.emplace_back(a, 0.0);
      break;
    }
    case Modulation::QAM16:
    case Modulation::QAM64: {
      const int side = m == Modulation::QAM16 ? 4 : 8;
      const int bits = m == Modulation::QAM16 ? 2 : 3;
      const auto lv = pam_levels(side);
      pts.resize(static_cast<std::size_t>(side) * side);
      for (int i = 0; i < side; ++i)
        for (int q = 0; q < side; ++q) pts[(static_cast<std::size_t>(i) << bits) | q] = cd(lv[i], lv[q]);
      break;
    }
    default:
      throw ConfigError("constellation: " + std::string(name(m)) + " is not a linear modulation");
  }
  double energy = 0.0;
  for (const auto& p : pts) energy += std::norm(p);
  energy /= static_cast<double>(pts.size());
  for (auto& p : pts) p /= std::sqrt(energy);
  return pts;
}

ComplexVector map_symbols(Modulation m, const std::vector<int>& symbol_indices) {
  const auto pts = constellation(m);
  ComplexVector out(static_cast<Eigen::Index>(symbol_indices.size()));
  for (std::size_t k = 0; k < symbol_indices.size(); ++k) {
    const int s = symbol_indices[k];
    if (s < 0 || s >= static_cast<int>(pts.size())) throw ConfigError("symbol index out of range");
    out[static_cast<Eigen::Index>(k)] = pts[s];
  }
  return out;
}

Eigen::VectorXd rrc_taps(int sps, double rolloff, int span) {
  const int ntaps = span * sps + 1;
  const double b = rolloff;
  Eigen::VectorXd h(ntaps);
  for (int k = 0; k < ntaps; ++k) {
    const double t = (k - (ntaps - 1) / 2.0) / sps;
    double v;
    if (std::abs(t) < 1e-12) {
      v = 1.0 - b + 4.0 * b / kPi;
    } else if (b > 0.0 && std::abs(std::abs(t) - 1.0 / (4.0 * b)) < 1e-9) {
      v = b / std::sqrt(2.0) *
          ((1.0 + 2.0 / kPi) * std::sin(kPi / (4.0 * b)) + (1.0 - 2.0 / kPi) * std::cos(kPi / (4.0 * b)));
    } else {
      v = (std::sin(kPi * t * (1.0 - b)) + 4.0 * b * t * std::cos(kPi * t * (1.0 + b))) /
          (kPi * t * (1.0 - (4.0 * b * t) * (4.0 * b * t)));
    }
    h[k] = v;
  }
  return h / h.norm();
}

ComplexVector shape_symbols(const ComplexVector& symbols, int n, const GenConfig& cfg) {
  const int sps = cfg.sps;
  const Eigen::VectorXd h = rrc_taps(sps, cfg.rrc_rolloff, kRrcSpanSymbols);
  const Eigen::Index ntaps = h.size();
  const Eigen::Index start = ntaps - 1;  // first fully-overlapped output
  if (symbols.size() * sps < start + n) throw ConfigError("shape_symbols: not enough symbols for requested length");
  ComplexVector out(n);
  for (int k = 0; k < n; ++k) {
    const Eigen::Index pos = start + k;
    cd acc = 0.0;
    // Only taps that land on symbol instants (multiples of sps) contribute.
    for (Eigen::Index j = pos % sps; j < ntaps; j += sps) {
      const Eigen::Index sym = (pos - j) / sps;
      if (sym >= 0 && sym < symbols.size()) acc += h[j] * symbols[sym];
    }
    out[k] = acc;
  }
  normalize_power(out);
  return out;
}

ComplexVector synth_modulated(Modulation m, int n, const GenConfig& cfg, std::uint64_t seed) {
  if (m == Modulation::UNMOD) throw ConfigError("synth_modulated: UNMOD has no modulated waveform");
  if (n < cfg.sps) throw ConfigError("synth_modulated: n must be at least sps");
  std::mt19937_64 rng(seed);
  ComplexVector x;
  if (is_linear(m)) {
    const int order = static_cast<int>(constellation(m).size());
    const int nsym = (n + cfg.sps - 1) / cfg.sps + 2 * kRrcSpanSymbols + 1;
    std::uniform_int_distribution<int> pick(0, order - 1);
    std::vector<int> idx(nsym);
    for (auto& s : idx) s = pick(rng);
    x = shape_symbols(map_symbols(m, idx), n, cfg);
    std::uniform_real_distribution<double> phase0(0.0, 2.0 * kPi);
    x *= std::polar(1.0, phase0(rng));
  } else if (m == Modulation::GFSK || m == Modulation::CPFSK) {
    x = synth_fsk(m, n, cfg, rng);
  } else {
    x = synth_analog(m, n, rng);
  }
  normalize_power(x);
  return x;
}

ComplexVector synth_interference(Interference i, Modulation m, int n, const GenConfig& cfg, std::uint64_t seed) {
  const auto it = cfg.pairing.find(i);
  if (it == cfg.pairing.end() || !it->second.contains(m))
    throw ConfigError("synth_interference: pairing " + std::string(name(i)) + "/" + std::string(name(m)) +
                      " not allowed");
  std::mt19937_64 rng(seed);
  ComplexVector x;
  switch (i) {
    case Interference::CWI: {
      const auto [lo, hi] = bin_range(n, cfg.cwi_freq_frac_range);
      std::uniform_int_distribution<int> pick(lo, hi);
      x = tone_sum(n, {pick(rng)}, rng);
      break;
    }
    case Interference::MTI: {
      const auto [lo, hi] = bin_range(n, cfg.cwi_freq_frac_range);
      std::vector<int> candidates;
      for (int b = lo; b <= hi; ++b) candidates.push_back(b);
      std::vector<int> bins;
      // Distinct tones at least two bins apart.
      while (static_cast<int>(bins.size()) < cfg.mti_tones) {
        if (candidates.empty()) throw ConfigError("MTI: not enough frequency bins for requested tone count");
        std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
        const int b = candidates[pick(rng)];
        bins.push_back(b);
        std::erase_if(candidates, [b](int c) { return std::abs(c - b) < 2; });
      }
      x = tone_sum(n, bins, rng);
      break;
    }
    case Interference::NNI: {
      std::normal_distribution<double> g(0.0, std::sqrt(0.5));
      std::vector<cd> time(n), freq;
      for (auto& v : time) v = cd(g(rng), g(rng));
      Eigen::FFT<double> fft;
      fft.fwd(freq, time);
      const double half_bw = 0.25 * cfg.nni_bandwidth_frac;
      const double lo = cfg.cwi_freq_frac_range[0] * 0.5 + half_bw;
      const double hi = cfg.cwi_freq_frac_range[1] * 0.5 - half_bw;
      std::uniform_real_distribution<double> centre_dist(std::min(lo, hi), std::max(lo, hi));
      const double centre = centre_dist(rng);
      const double min_half = 0.5 / n;  // keep at least one bin
      for (int k = 0; k < n; ++k) {
        const double f = (k <= n / 2 ? k : k - n) / static_cast<double>(n);
        if (std::abs(f - centre) > std::max(half_bw, min_half) + 1e-12) freq[k] = 0.0;
      }
      fft.inv(time, freq);
      x = Eigen::Map<ComplexVector>(time.data(), n);
      break;
    }
    case Interference::LFMI: {
      const double width = 0.5 * cfg.lfmi_sweep_frac;
      std::uniform_real_distribution<double> start_dist(-0.45, std::max(-0.45, 0.45 - width));
      std::uniform_real_distribution<double> phase0(0.0, 2.0 * kPi);
      std::bernoulli_distribution up(0.5);
      double f0 = start_dist(rng);
      double rate = width / n;
      if (!up(rng)) {
        f0 += width;
        rate = -rate;
      }
      const double phi0 = phase0(rng);
      x.resize(n);
      for (int k = 0; k < n; ++k) {
        const double kk = static_cast<double>(k);
        const double cycles = f0 * kk + 0.5 * rate * kk * kk;
        x[k] = std::polar(1.0, phi0 + 2.0 * kPi * (cycles - std::floor(cycles)));
      }
      break;
    }
    case Interference::DMI:
    case Interference::AMI:
      return synth_modulated(m, n, cfg, seed);
  }
  normalize_power(x);
  return x;
}

}  // namespace amtidin::siggen
