#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <map>
#include <numeric>

#include "amtidin/siggen.hpp"
#include "helpers.hpp"

using namespace amtidin;
using namespace amtidin::siggen;

namespace {

double realized_snr_db(const ComplexVector& clean, const ComplexVector& noisy) {
  return 10.0 * std::log10(mean_power(clean) / mean_power(noisy - clean));
}

}  // namespace

TEST_SUITE("siggen") {

TEST_CASE("constellations have unit average energy and distinct points") {
  for (auto m : {Modulation::BPSK, Modulation::QPSK, Modulation::PSK8, Modulation::QAM16, Modulation::QAM64,
                 Modulation::PAM4}) {
    const auto pts = constellation(m);
    double e = 0.0;
    for (auto p : pts) e += std::norm(p);
    CHECK(e / pts.size() == doctest::Approx(1.0).epsilon(1e-12));
    for (std::size_t a = 0; a < pts.size(); ++a)
      for (std::size_t b = a + 1; b < pts.size(); ++b) CHECK(std::abs(pts[a] - pts[b]) > 1e-6);
  }
}

TEST_CASE("Gray mapping: neighbouring QAM16 points differ in one bit") {
  const auto pts = constellation(Modulation::QAM16);
  const double dmin = 2.0 / std::sqrt(10.0);
  for (int a = 0; a < 16; ++a)
    for (int b = a + 1; b < 16; ++b)
      if (std::abs(std::abs(pts[a] - pts[b]) - dmin) < 1e-9) CHECK(std::popcount(static_cast<unsigned>(a ^ b)) == 1);
}

TEST_CASE("RRC taps have unit energy and are symmetric") {
  const auto h = rrc_taps(8, 0.35, 8);
  CHECK(h.squaredNorm() == doctest::Approx(1.0).epsilon(1e-12));
  for (Eigen::Index k = 0; k < h.size(); ++k) CHECK(h[k] == doctest::Approx(h[h.size() - 1 - k]).epsilon(1e-12));
}

TEST_CASE("BPSK with all-zero data is a constant-sign stream of unit power") {
  GenConfig cfg;
  const auto sym = map_symbols(Modulation::BPSK, std::vector<int>(96, 0));
  for (Eigen::Index k = 0; k < sym.size(); ++k) CHECK(sym[k] == sym[0]);
  CHECK(mean_power(sym) == doctest::Approx(1.0).epsilon(1e-6));
  const auto shaped = shape_symbols(sym, 512, cfg);
  CHECK(mean_power(shaped) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("every modulation yields unit power, QAM16 and CPFSK properties") {
  GenConfig cfg;
  for (int k = 1; k < kNumModulations; ++k) {
    const auto x = synth_modulated(static_cast<Modulation>(k), 1024, cfg, 11 + k);
    CHECK(x.allFinite());
    CHECK(mean_power(x) == doctest::Approx(1.0).epsilon(1e-6));
  }
  const auto q = synth_modulated(Modulation::QAM16, 4096, cfg, 5);
  CHECK(std::abs(mean_power(q) - 1.0) <= 0.05);
  const auto c = synth_modulated(Modulation::CPFSK, 2048, cfg, 9);
  double worst = 0.0;
  for (Eigen::Index k = 0; k < c.size(); ++k) worst = std::max(worst, std::abs(std::abs(c[k]) - 1.0));
  CHECK(worst <= 1e-6);
}

TEST_CASE("synth_modulated rejects UNMOD and short lengths") {
  GenConfig cfg;
  CHECK_THROWS_AS(synth_modulated(Modulation::UNMOD, 256, cfg, 1), ConfigError);
  CHECK_THROWS_AS(synth_modulated(Modulation::BPSK, cfg.sps - 1, cfg, 1), ConfigError);
}

TEST_CASE("CWI is a single dominant FFT bin of constant modulus") {
  GenConfig cfg;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto x = synth_interference(Interference::CWI, Modulation::UNMOD, 256, cfg, s);
    auto mag = testutil::magnitude_spectrum(x);
    std::sort(mag.begin(), mag.end(), std::greater<>());
    CHECK(mag[0] >= 10.0 * mag[1]);
    for (Eigen::Index k = 0; k < x.size(); ++k) CHECK(std::abs(x[k]) == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("MTI with three tones has exactly three peaks above -20 dB") {
  GenConfig cfg;
  cfg.mti_tones = 3;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto x = synth_interference(Interference::MTI, Modulation::UNMOD, 256, cfg, s);
    const auto mag = testutil::magnitude_spectrum(x);
    const double top = *std::max_element(mag.begin(), mag.end());
    const auto peaks = std::count_if(mag.begin(), mag.end(), [&](double v) { return v >= 0.1 * top; });
    CHECK(peaks == 3);
    CHECK(mean_power(x) == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("LFMI instantaneous frequency is linear in time") {
  GenConfig cfg;
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto x = synth_interference(Interference::LFMI, Modulation::UNMOD, 512, cfg, s);
    const Eigen::Index n = x.size() - 1;
    Eigen::VectorXd t(n), f(n);
    for (Eigen::Index k = 0; k < n; ++k) {
      t[k] = static_cast<double>(k);
      f[k] = std::arg(x[k + 1] * std::conj(x[k]));
    }
    const double tm = t.mean(), fm = f.mean();
    const double sxy = ((t.array() - tm) * (f.array() - fm)).sum();
    const double sxx = (t.array() - tm).square().sum();
    const double syy = (f.array() - fm).square().sum();
    const double r2 = sxy * sxy / (sxx * syy);
    CHECK(r2 >= 0.99);
  }
}

TEST_CASE("NNI is band-limited noise of unit power") {
  GenConfig cfg;
  const auto x = synth_interference(Interference::NNI, Modulation::UNMOD, 1024, cfg, 3);
  CHECK(mean_power(x) == doctest::Approx(1.0).epsilon(1e-9));
  const auto mag = testutil::magnitude_spectrum(x);
  const auto occupied = std::count_if(mag.begin(), mag.end(), [](double v) { return v > 1e-9; });
  CHECK(occupied <= static_cast<long>(std::ceil(0.5 * cfg.nni_bandwidth_frac * 1024)) + 2);
}

TEST_CASE("DMI delegates to synth_modulated") {
  GenConfig cfg;
  const auto a = synth_interference(Interference::DMI, Modulation::QPSK, 256, cfg, 42);
  const auto b = synth_modulated(Modulation::QPSK, 256, cfg, 42);
  CHECK(a == b);
}

TEST_CASE("pairing violations are configuration errors") {
  GenConfig cfg;
  CHECK_THROWS_AS(synth_interference(Interference::DMI, Modulation::WBFM, 256, cfg, 1), ConfigError);
  CHECK_THROWS_AS(synth_interference(Interference::CWI, Modulation::BPSK, 256, cfg, 1), ConfigError);
}

TEST_CASE("AWGN channel is the identity") {
  GenConfig cfg;
  const auto x = synth_modulated(Modulation::QPSK, 256, cfg, 1);
  const auto out = apply_channel(x, {ChannelKind::AWGN, 4.0}, 99);
  CHECK(out.gain == std::complex<double>(1.0, 0.0));
  CHECK(out.y == x);
}

TEST_CASE("fading gains have unit mean power and a Rayleigh envelope") {
  const ComplexVector one = ComplexVector::Ones(1);
  constexpr int kDraws = 100000;
  std::vector<double> env(kDraws);
  double p_ray = 0.0, p_ric = 0.0;
  for (int k = 0; k < kDraws; ++k) {
    const auto g = apply_channel(one, {ChannelKind::Rayleigh, 4.0}, derive_seed(1, {static_cast<std::uint64_t>(k)})).gain;
    env[k] = std::abs(g);
    p_ray += std::norm(g);
    p_ric += std::norm(apply_channel(one, {ChannelKind::Rician, 4.0}, derive_seed(2, {static_cast<std::uint64_t>(k)})).gain);
  }
  CHECK(std::abs(p_ray / kDraws - 1.0) <= 0.02);
  CHECK(std::abs(p_ric / kDraws - 1.0) <= 0.02);
  std::sort(env.begin(), env.end());
  double d = 0.0;
  for (int k = 0; k < kDraws; ++k) {
    const double F = 1.0 - std::exp(-env[k] * env[k]);
    d = std::max({d, F - static_cast<double>(k) / kDraws, static_cast<double>(k + 1) / kDraws - F});
  }
  CHECK(testutil::ks_pvalue(d, kDraws) > 0.01);
}

TEST_CASE("KS p-value helper rejects a wrong envelope scale") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g(0.0, 0.8);
  constexpr int kDraws = 20000;
  std::vector<double> env(kDraws);
  for (auto& e : env) e = std::hypot(g(rng), g(rng));
  std::sort(env.begin(), env.end());
  double d = 0.0;
  for (int k = 0; k < kDraws; ++k) {
    const double F = 1.0 - std::exp(-env[k] * env[k]);
    d = std::max({d, F - static_cast<double>(k) / kDraws, static_cast<double>(k + 1) / kDraws - F});
  }
  CHECK(testutil::ks_pvalue(d, kDraws) < 1e-6);
}

TEST_CASE("scale_to_snr sets the noise variance and the realized SNR") {
  ComplexVector y = ComplexVector::Ones(4096);
  CHECK(scale_to_snr(y, 0.0, 1).noise_variance == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(scale_to_snr(y, 10.0, 1).noise_variance == doctest::Approx(0.1).epsilon(1e-15));
  GenConfig cfg;
  const auto x = synth_modulated(Modulation::QAM16, 4096, cfg, 8);
  for (double snr : {-10.0, -5.0, 0.0, 5.0, 15.0, 25.0}) {
    const auto r = scale_to_snr(x, snr, 77).r;
    CHECK(std::abs(realized_snr_db(x, r) - snr) <= 0.3);
  }
  CHECK_THROWS_AS(scale_to_snr(ComplexVector::Zero(16), 0.0, 1), NumericError);
}

TEST_CASE("GenConfig validation") {
  GenConfig ok;
  CHECK_NOTHROW(ok.validate());
  auto bad = ok;
  bad.n = 32;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = ok;
  bad.snr_list_db.clear();
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = ok;
  bad.channel_mix = {0.5, 0.5, 0.1};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = ok;
  bad.pairing.erase(Interference::LFMI);
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = ok;
  bad.pairing[Interference::DMI] = {};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("GenConfig JSON round-trip") {
  auto cfg = testutil::small_gen();
  cfg.snr_list_db = {-5.0, 5.0};
  cfg.rician_k = 2.5;
  const auto back = gen_config_from_json(gen_config_to_json(cfg));
  CHECK(gen_config_to_json(back) == gen_config_to_json(cfg));
  CHECK(back.pairing == cfg.pairing);
  CHECK(back.interference_types == cfg.interference_types);
  CHECK_THROWS_AS(gen_config_from_json("{not json"), ConfigError);
}

TEST_CASE("assign_channels gives exact equal proportions") {
  const auto ch = assign_channels({1.0 / 3, 1.0 / 3, 1.0 / 3}, 300);
  std::array<int, 3> count{};
  for (auto c : ch) ++count[static_cast<int>(c)];
  CHECK(count == std::array<int, 3>{100, 100, 100});
  const auto uneven = assign_channels({0.5, 0.25, 0.25}, 7);
  count = {};
  for (auto c : uneven) ++count[static_cast<int>(c)];
  CHECK(count[0] + count[1] + count[2] == 7);
  CHECK(count[0] >= 3);
}

TEST_CASE("dataset counts, balance and labels") {
  GenConfig cfg = testutil::small_gen(100);
  cfg.pairing[Interference::DMI] = {Modulation::BPSK};
  const auto ds = generate_dataset(cfg);
  std::size_t pos = 0, neg = 0;
  for (const auto& r : ds.records) {
    CHECK(r.iq.allFinite());
    CHECK(r.iq.cols() == cfg.n);
    if (r.present) {
      ++pos;
      CHECK(r.realized_signal_power > 0.0f);
    } else {
      ++neg;
      CHECK(r.modulation == Modulation::UNMOD);
      CHECK(r.interference == kNoInterference);
    }
  }
  CHECK(pos == 200);
  CHECK(neg == 200);
  CHECK(ds.labels.m_classes() == 2);
  CHECK(ds.labels.i_classes() == 2);
}

TEST_CASE("balance holds per SNR and channels per stratum") {
  GenConfig cfg = testutil::small_gen(30);
  cfg.snr_list_db = {-5.0, 5.0, 15.0};
  cfg.interference_types = {Interference::CWI, Interference::NNI, Interference::MTI, Interference::LFMI,
                            Interference::DMI, Interference::AMI};
  const auto ds = generate_dataset(cfg);
  std::map<float, std::pair<int, int>> by_snr;
  std::map<std::tuple<int, int, float>, int> strata;
  for (const auto& r : ds.records) {
    auto& [p, n] = by_snr[r.snr_db];
    (r.present ? p : n) += 1;
    if (r.present) ++strata[{r.interference, static_cast<int>(r.modulation), r.snr_db}];
  }
  CHECK(by_snr.size() == 3);
  for (const auto& [snr, pn] : by_snr) CHECK(pn.first == pn.second);
  for (const auto& [key, count] : strata) CHECK(count == 30);
}

TEST_CASE("regeneration is byte-identical and thread-count independent") {
  GenConfig cfg = testutil::small_gen(40);
  const auto a = generate_dataset(cfg, 1);
  const auto b = generate_dataset(cfg, 1);
  const auto c = generate_dataset(cfg, 3);
  CHECK(a == b);
  CHECK(a == c);
  cfg.master_seed += 1;
  CHECK_FALSE(generate_dataset(cfg) == a);
}

TEST_CASE("record seeds depend only on their coordinates") {
  CHECK(record_seed(5, 2, 7) == record_seed(5, 2, 7));
  CHECK(record_seed(5, 2, 7) != record_seed(5, 7, 2));
  CHECK(record_seed(5, 2, 7) != record_seed(6, 2, 7));
}

TEST_CASE("positive records have unit pre-noise power and the configured SNR") {
  GenConfig cfg;
  cfg.n = 4096;
  const auto strata = enumerate_strata(cfg);
  for (std::size_t s = 0; s < strata.size(); s += 3) {
    for (auto ch : {ChannelKind::AWGN, ChannelKind::Rayleigh, ChannelKind::Rician}) {
      const auto syn = synthesize_positive(cfg, strata[s], ch, record_seed(1, s, static_cast<int>(ch)));
      CHECK(mean_power(syn.clean) == doctest::Approx(1.0).epsilon(1e-6));
      CHECK(std::abs(realized_snr_db(syn.faded, syn.received) - strata[s].snr_db) <= 0.3);
    }
  }
}

TEST_CASE("audit_record") {
  GenConfig cfg = testutil::small_gen(6, 1024);
  cfg.snr_list_db = {-5.0, 15.0};
  const auto ds = generate_dataset(cfg);
  for (const auto& r : ds.records) {
    if (!r.present) {
      CHECK_THROWS_AS(audit_record(r), ConfigError);
      continue;
    }
    const auto a = audit_record(r);
    CHECK(a.within_bound);
    CHECK(std::abs(a.audit_snr_db - r.snr_db) <= 0.3);
    CHECK(a.measured_power == doctest::Approx(a.expected_power).epsilon(0.25));
  }
  SignalRecord rec = ds.records.front();
  REQUIRE(rec.present);
  rec.noise_variance = 0.0f;
  CHECK_THROWS_AS(audit_record(rec), NumericError);

  SignalRecord clean;
  clean.present = true;
  clean.interference = 0;
  clean.iq = IqMatrix::Ones(2, 64) * std::sqrt(0.5f);
  clean.realized_signal_power = 1.0f;
  clean.noise_variance = 0.25f;
  clean.snr_db = 6.0f;
  const auto a = audit_record(clean);
  CHECK(a.audit_snr_db == doctest::Approx(10.0 * std::log10(4.0)).epsilon(1e-6));
}

TEST_CASE("names round-trip") {
  for (int k = 0; k < kNumModulations; ++k)
    CHECK(modulation_from_name(name(static_cast<Modulation>(k))) == static_cast<Modulation>(k));
  for (int k = 0; k < kNumInterferences; ++k)
    CHECK(interference_from_name(name(static_cast<Interference>(k))) == static_cast<Interference>(k));
  CHECK_THROWS_AS(modulation_from_name("OOK"), ConfigError);
}

}  // TEST_SUITE
