#pragma once

#include <unsupported/Eigen/FFT>

#include <cmath>
#include <complex>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "amtidin/dataio.hpp"
#include "amtidin/siggen.hpp"

namespace testutil {

using amtidin::siggen::GenConfig;
using amtidin::siggen::Interference;
using amtidin::siggen::Modulation;

// Two interference families, three modulation classes, one SNR: small enough to
// generate and train in seconds.
inline GenConfig small_gen(int per_class = 20, int n = 64, std::uint64_t seed = 7) {
  GenConfig g;
  g.n = n;
  g.samples_per_class = per_class;
  g.snr_list_db = {10.0};
  g.interference_types = {Interference::CWI, Interference::DMI};
  g.pairing[Interference::DMI] = {Modulation::BPSK, Modulation::QPSK};
  g.master_seed = seed;
  return g;
}

inline std::vector<double> magnitude_spectrum(const amtidin::siggen::ComplexVector& x) {
  std::vector<std::complex<double>> t(x.data(), x.data() + x.size()), f;
  Eigen::FFT<double> fft;
  fft.fwd(f, t);
  std::vector<double> mag(f.size());
  for (std::size_t k = 0; k < f.size(); ++k) mag[k] = std::abs(f[k]);
  return mag;
}

// Asymptotic Kolmogorov distribution tail with the Stephens small-sample correction.
inline double ks_pvalue(double d, std::size_t n) {
  const double sn = std::sqrt(static_cast<double>(n));
  const double lam = (sn + 0.12 + 0.11 / sn) * d;
  double p = 0.0;
  for (int k = 1; k <= 100; ++k) {
    const double term = std::exp(-2.0 * k * k * lam * lam);
    p += (k % 2 == 1 ? 2.0 : -2.0) * term;
    if (term < 1e-16) break;
  }
  return std::clamp(p, 0.0, 1.0);
}

inline std::filesystem::path temp_dir(const std::string& tag) {
  auto dir = std::filesystem::temp_directory_path() /
             ("amtidin_test_" + tag + "_" + std::to_string(std::random_device{}()));
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testutil
