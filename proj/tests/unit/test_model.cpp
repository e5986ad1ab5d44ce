#include <doctest.h>

#include <cstring>
#include <random>

#include "amtidin/checkpoint.hpp"
#include "amtidin/model.hpp"
#include "helpers.hpp"

using namespace amtidin;
using namespace amtidin::model;

namespace {

dataio::TaskBatch random_batch(const ArchConfig& a, int B, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> nd;
  dataio::TaskBatch b;
  b.n = a.n;
  for (Task t : kAllTasks) {
    const int ti = index(t);
    b.x[ti] = dataio::InputBlock(2, static_cast<Eigen::Index>(B) * a.n);
    for (Eigen::Index k = 0; k < b.x[ti].size(); ++k) b.x[ti](k) = nd(rng);
    std::uniform_int_distribution<int> lab(0, a.classes(t) - 1);
    for (int k = 0; k < B; ++k) b.y[ti].push_back(lab(rng));
  }
  return b;
}

template <typename S>
bool same_parameters(const AmtidinModel<S>& a, const AmtidinModel<S>& b) {
  const auto pa = a.parameters(), pb = b.parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t k = 0; k < pa.size(); ++k)
    if (pa[k]->name != pb[k]->name || pa[k]->value != pb[k]->value) return false;
  return true;
}

// Layer-by-layer count for the default architecture with 14 modulation and 6
// interference classes.
constexpr std::size_t kDefaultParameterCount =
    (2 * 32 * 3 + 32 + 2 * 32) + (32 * 64 * 5 + 64 + 2 * 64) + (64 * 128 * 7 + 128 + 2 * 128) +
    3 * ((128 * 256 + 256) * 2 + (256 * 128 + 128) + (128 * 64 + 64)) + 3 * (65 * 2 + 65 * 14 + 65 * 6) +
    3 * ((128 * 64 + 64) + (64 + 1));

}  // namespace

TEST_SUITE("model") {

TEST_CASE("parameter count of the default architecture") {
  static_assert(kDefaultParameterCount == 419301);
  ArchConfig a;
  CHECK(expected_parameter_count(a) == 419301);
  CHECK(build<float>(a, 1).num_parameters() == 419301);
  CHECK(build<float>(a, 1).num_discriminator_parameters() == 3 * 8321);
}

TEST_CASE("variants instantiate the documented modules") {
  ArchConfig a;
  a.n = 128;
  const auto full = build<float>(a, 3);
  for (auto v : {Variant::STL_ID, Variant::STL_MI, Variant::STL_II, Variant::MTL_Vanilla, Variant::MTL_NonAdv}) {
    auto m = build_baseline<float>(v, a, 3);
    auto av = a;
    av.variant = v;
    CHECK(m.num_parameters() == expected_parameter_count(av));
    CHECK(m.num_parameters() < full.num_parameters());
    if (v != Variant::AMTIDIN) CHECK(m.num_discriminator_parameters() == 0);
  }
  const auto nonadv = build_baseline<float>(Variant::MTL_NonAdv, a, 3);
  int heads = 0;
  for (auto& row : nonadv.heads)
    for (auto& h : row) heads += h.has_value();
  CHECK(heads == 9);
  const auto vanilla = build_baseline<float>(Variant::MTL_Vanilla, a, 3);
  heads = 0;
  for (int t = 0; t < 3; ++t)
    for (int i = 0; i < 3; ++i) {
      heads += vanilla.heads[t][i].has_value();
      if (vanilla.heads[t][i]) CHECK(t == i);
    }
  CHECK(heads == 3);
  CHECK_FALSE(layout_for(Variant::MTL_Vanilla).learns_alpha);
  CHECK(layout_for(Variant::MTL_NonAdv).learns_alpha);
  CHECK(stl_task(Variant::STL_MI) == Task::MI);
  CHECK_FALSE(stl_task(Variant::AMTIDIN).has_value());
}

TEST_CASE("build is deterministic and modules are shared across variants") {
  ArchConfig a;
  a.n = 128;
  auto x = build<float>(a, 9), y = build<float>(a, 9), z = build<float>(a, 10);
  CHECK(same_parameters(x, y));
  CHECK_FALSE(same_parameters(x, z));
  auto vanilla = build_baseline<float>(Variant::MTL_Vanilla, a, 9);
  CHECK(vanilla.conv[2].weight.value == x.conv[2].weight.value);
  CHECK(vanilla.hyp[1]->l3_w.value == x.hyp[1]->l3_w.value);
  CHECK(vanilla.heads[2][2]->w.value == x.heads[2][2]->w.value);
  for (int k = 0; k < 3; ++k) {
    CHECK(x.conv[k].bias.value.isZero());
    CHECK((x.conv[k].gamma.value.array() == 1.0f).all());
    CHECK(x.conv[k].beta.value.isZero());
  }
  // Kaiming-uniform bound sqrt(6 / fan_in) for the first convolution (fan_in = 2 * 3).
  CHECK(x.conv[0].weight.value.cwiseAbs().maxCoeff() <= std::sqrt(6.0f / 6.0f));
}

TEST_CASE("feature_dim changes propagate to hypotheses and discriminators") {
  ArchConfig a;
  a.n = 128;
  a.feature_dim = 32;
  auto m = build<float>(a, 1);
  CHECK(m.disc[0]->w1.shape == ad::Shape{64, 32});
  CHECK(m.hyp[0]->res_w.shape == ad::Shape{256, 32});
  CHECK(m.num_parameters() == expected_parameter_count(a));
  Tape<float> t;
  auto out = forward_train(m, t, random_batch(a, 3, 1), {});
  CHECK(out.features[0].rows() == 32);
}

TEST_CASE("shape chain at every supported length") {
  for (int n : {128, 256, 512, 1024}) {
    ArchConfig a;
    a.n = n;
    auto m = build<float>(a, 2);
    const int B = 3;
    const auto batch = random_batch(a, B, n);
    Tape<float> t;
    auto f = extract(m, t, batch.x[0], B, false);
    CHECK(f.shape() == ad::Shape{128, B});
    auto h = apply_hypothesis(m, t, Task::MI, f, false, 0);
    CHECK(h.rows() == 64);
    CHECK(h.cols() == B);
    auto out = forward_train(m, t, batch, {});
    for (int tt = 0; tt < 3; ++tt)
      for (int i = 0; i < 3; ++i) {
        CHECK(out.logits[tt][i].rows() == a.classes(static_cast<Task>(i)));
        CHECK(out.logits[tt][i].cols() == B);
      }
    for (int p = 0; p < 3; ++p) {
      CHECK(out.d_a_logit[p].cols() == B);
      CHECK(out.d_b_sigmoid[p].rows() == 1);
      CHECK((out.d_a_sigmoid[p].value().array() > 0.0f).all());
      CHECK((out.d_a_sigmoid[p].value().array() < 1.0f).all());
    }
  }
}

TEST_CASE("length mismatch is rejected") {
  ArchConfig a;
  a.n = 128;
  auto m = build<float>(a, 2);
  auto other = a;
  other.n = 256;
  Tape<float> t;
  CHECK_THROWS_AS(forward_train(m, t, random_batch(other, 2, 1), {}), ShapeError);
  CHECK_THROWS_AS(predict(m, Mat<float>(Mat<float>::Zero(2, 200)), 1), ShapeError);
}

TEST_CASE("eval-mode forward is repeatable, training dropout depends on the seed") {
  ArchConfig a;
  a.n = 128;
  auto m = build<float>(a, 5);
  const auto batch = random_batch(a, 4, 3);
  ForwardOptions eval{false, 0, {true, true, true}};
  Tape<float> t1, t2;
  auto o1 = forward_train(m, t1, batch, eval);
  auto o2 = forward_train(m, t2, batch, {false, 99, {true, true, true}});
  CHECK(o1.logits[1][2].value() == o2.logits[1][2].value());
  auto mt = build<float>(a, 5);
  Tape<float> t3, t4;
  auto o3 = forward_train(mt, t3, batch, {true, 1, {true, true, true}});
  auto o4 = forward_train(mt, t4, batch, {true, 2, {true, true, true}});
  CHECK_FALSE(o3.logits[1][1].value() == o4.logits[1][1].value());
}

TEST_CASE("predict: batch equals single, ties go to the lowest index, heads isolated") {
  ArchConfig a;
  a.n = 128;
  auto m = build<float>(a, 8);
  const auto batch = random_batch(a, 5, 4);
  const auto all = predict(m, batch.x[0], 5);
  for (int b = 0; b < 5; ++b) {
    const Mat<float> xb = batch.x[0].middleCols(static_cast<Eigen::Index>(b) * a.n, a.n);
    const auto one = predict(m, xb, 1);
    for (int t = 0; t < 3; ++t) CHECK(one.labels[t][0] == all.labels[t][b]);
  }

  auto perturbed = build<float>(a, 8);
  for (int t = 0; t < 3; ++t)
    for (int i = 0; i < 3; ++i)
      if (t != i) perturbed.heads[t][i]->w.value.setConstant(7.0f);
  for (auto& d : perturbed.disc) d->w1.value.setRandom();
  CHECK(predict(perturbed, batch.x[0], 5).labels == all.labels);

  for (int t = 0; t < 3; ++t) {
    m.heads[t][t]->w.value.setZero();
    m.heads[t][t]->b.value.setZero();
  }
  const auto tied = predict(m, batch.x[0], 5);
  for (int t = 0; t < 3; ++t)
    for (int v : tied.labels[t]) CHECK(v == 0);

  Mat<float> z(3, 2);
  z << 1, 2, 5, 2, 5, 0;
  CHECK(ad::argmax_columns(z) == std::vector<int>{1, 0});
  const auto sm = ad::softmax_columns(z);
  CHECK(ad::argmax_columns(sm) == ad::argmax_columns(z));
}

TEST_CASE("STL predicts only its own task") {
  ArchConfig a;
  a.n = 128;
  auto m = build_baseline<float>(Variant::STL_II, a, 1);
  const auto p = predict(m, random_batch(a, 2, 1).x[2], 2);
  CHECK(p.labels[0].empty());
  CHECK(p.labels[1].empty());
  CHECK(p.labels[2].size() == 2);
}

TEST_CASE("discriminator in logit mode is 1-Lipschitz once the norm estimate converges") {
  ArchConfig a;
  a.n = 128;
  a.sn_power_iters = 200;
  a.adv_output_mode = AdvOutputMode::Logit;
  auto m = build<float>(a, 12);
  for (int p = 0; p < 3; ++p) {
    Tape<float> t;
    discriminator_weights(m, t, p, true);
  }
  std::mt19937_64 rng(1);
  std::normal_distribution<float> nd;
  for (int p = 0; p < 3; ++p) {
    Mat<float> A(128, 500), B(128, 500);
    for (Eigen::Index k = 0; k < A.size(); ++k) {
      A(k) = nd(rng);
      B(k) = A(k) + 0.3f * nd(rng);
    }
    const auto da = eval_disc_logits(m, p, A), db = eval_disc_logits(m, p, B);
    for (Eigen::Index c = 0; c < A.cols(); ++c)
      CHECK(std::abs(da(0, c) - db(0, c)) <= (1.0f + 1e-3f) * (A.col(c) - B.col(c)).norm());
  }
}

TEST_CASE("float and double models agree") {
  ArchConfig a;
  a.n = 128;
  auto mf = build<float>(a, 4);
  auto md = cast_model<double>(mf);
  const auto batch = random_batch(a, 2, 9);
  Tape<float> tf;
  Tape<double> td;
  const auto ff = extract(mf, tf, batch.x[0], 2, false).value();
  const auto fd = extract(md, td, Mat<double>(batch.x[0].cast<double>()), 2, false).value();
  CHECK((ff.cast<double>() - fd).cwiseAbs().maxCoeff() <= 1e-4);
}

TEST_CASE("checkpoint round-trip and corruption") {
  ArchConfig a;
  a.n = 128;
  a.adv_output_mode = AdvOutputMode::Logit;
  auto m = build<float>(a, 6);
  {
    Tape<float> t;
    forward_train(m, t, random_batch(a, 4, 2), {});  // moves BN and SN state
  }
  checkpoint::TrainingState st;
  st.epoch = 3;
  st.alpha(0, 0) = 0.5;
  st.alpha(0, 1) = 0.5;
  st.scheduler.lr = 1e-4;
  const auto bytes = checkpoint::serialize_checkpoint(m, &st);
  auto ck = checkpoint::deserialize_checkpoint(bytes);
  CHECK(same_parameters(ck.model, m));
  CHECK(ck.model.arch.adv_output_mode == AdvOutputMode::Logit);
  CHECK(ck.model.conv[1].bn.running_mean == m.conv[1].bn.running_mean);
  CHECK(ck.model.disc[2]->sn1.u == m.disc[2]->sn1.u);
  REQUIRE(ck.state.has_value());
  CHECK(ck.state->epoch == 3);
  CHECK(ck.state->alpha == st.alpha);
  CHECK(ck.state->scheduler.lr == 1e-4);
  CHECK(checkpoint::serialize_checkpoint(ck.model, &*ck.state) == bytes);

  auto bad = bytes;
  bad[bad.size() - 10] ^= 0x40;
  try {
    checkpoint::deserialize_checkpoint(bad);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("checksum failure") != std::string::npos);
  }
  bad = bytes;
  bad[1] = 'x';
  CHECK_THROWS_AS(checkpoint::deserialize_checkpoint(bad), FormatError);

  const auto dir = testutil::temp_dir("ckpt");
  checkpoint::save_checkpoint(dir / "m.ckpt", m);
  const auto loaded = checkpoint::load_checkpoint(dir / "m.ckpt");
  CHECK_FALSE(loaded.state.has_value());
  CHECK(same_parameters(loaded.model, m));
  std::filesystem::remove_all(dir);
}

TEST_CASE("architecture validation and names") {
  ArchConfig a;
  a.hyp_out = 0;
  CHECK_THROWS_AS(a.validate(), ConfigError);
  for (auto v : {Variant::AMTIDIN, Variant::STL_ID, Variant::STL_MI, Variant::STL_II, Variant::MTL_Vanilla,
                 Variant::MTL_NonAdv})
    CHECK(variant_from_name(variant_name(v)) == v);
  CHECK(adv_mode_from_name("logit") == AdvOutputMode::Logit);
  CHECK_THROWS_AS(variant_from_name("MMoE"), ConfigError);
}

}  // TEST_SUITE
