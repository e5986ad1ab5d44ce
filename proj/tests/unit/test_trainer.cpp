#include <doctest.h>

#include <algorithm>
#include <fstream>

#include "amtidin/checkpoint.hpp"
#include "amtidin/eval.hpp"
#include "amtidin/trainer.hpp"
#include "helpers.hpp"

using namespace amtidin;
using namespace amtidin::trainer;

namespace {

// 3 strata x 40 positives + 120 negatives; 144 training records.
const dataio::Split& tiny_split() {
  static const dataio::Split s = [] {
    auto g = testutil::small_gen(40, 64, 21);
    return dataio::stratified_split(siggen::generate_dataset(g), {{0.6, 0.2, 0.2}, 3});
  }();
  return s;
}

model::ArchConfig small_arch(model::Variant v, model::AdvOutputMode mode = model::AdvOutputMode::Sigmoid) {
  model::ArchConfig base;
  base.feature_dim = 32;
  base.hyp_hidden = 48;
  base.hyp_out = 16;
  return eval::arch_for(tiny_split().train, base, v, mode);
}

TrainConfig quick_cfg(model::Variant v = model::Variant::AMTIDIN) {
  TrainConfig c;
  c.variant = v;
  c.batch_size = 32;
  c.epochs = 4;
  c.lr = 3e-3;
  c.seed = 5;
  return c;
}

TrainResult run(const TrainConfig& c, std::uint64_t model_seed = 1, const TrainOptions& opt = {}) {
  return train(model::build<float>(small_arch(c.variant, c.adv_mode), model_seed), tiny_split().train,
               tiny_split().val, c, opt);
}

bool same_parameters(const model::AmtidinModel<float>& a, const model::AmtidinModel<float>& b) {
  const auto pa = a.parameters(), pb = b.parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t k = 0; k < pa.size(); ++k)
    if (pa[k]->value != pb[k]->value) return false;
  return true;
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("a fixed seed gives byte-identical logs and models") {
  const auto a = run(quick_cfg()), b = run(quick_cfg());
  CHECK(a.log.to_json() == b.log.to_json());
  CHECK(a.log.to_csv() == b.log.to_csv());
  CHECK(same_parameters(a.model, b.model));
  auto other = quick_cfg();
  other.seed = 6;
  CHECK(run(other).log.to_json() != a.log.to_json());
}

TEST_CASE("log structure, alpha on the simplex and best-epoch bookkeeping") {
  const auto r = run(quick_cfg());
  REQUIRE(r.log.epochs.size() == 4);
  CHECK_FALSE(r.log.diverged);
  double best = std::numeric_limits<double>::infinity();
  int best_epoch = -1;
  for (const auto& e : r.log.epochs) {
    CHECK(objective::simplex_violation(e.alpha) <= 1e-8);
    CHECK(std::isfinite(e.val.total));
    CHECK(e.batches > 0);
    for (int p = 0; p < 3; ++p) CHECK(e.w1[p] == -e.train_adv[p]);
    if (e.val.total < best) {
      best = e.val.total;
      best_epoch = e.epoch;
    }
  }
  CHECK(r.log.best_val == best);
  CHECK(r.log.best_epoch == best_epoch);
  // The retained model reproduces the best validation objective.
  auto bm = r.best_model;
  const auto& alpha = r.log.epochs[static_cast<std::size_t>(best_epoch - 1)].alpha;
  const auto ocfg = objective_config(quick_cfg(), tiny_split().train.size());
  CHECK(validation_metrics(bm, tiny_split().val, alpha, ocfg).total == doctest::Approx(best).epsilon(1e-9));

  const auto csv = r.log.to_csv();
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
  const auto back = TrainLog::from_json(r.log.to_json());
  CHECK(back.to_json() == r.log.to_json());
}

TEST_CASE("resuming from a checkpoint continues bit-identically") {
  const auto full = run(quick_cfg());
  TrainOptions first;
  first.stop_after = 2;
  const auto half = run(quick_cfg(), 1, first);
  REQUIRE(half.log.epochs.size() == 2);
  const auto bytes = checkpoint::serialize_checkpoint(half.model, &half.state);
  auto ck = checkpoint::deserialize_checkpoint(bytes);
  REQUIRE(ck.state.has_value());
  CHECK(objective::simplex_violation(ck.state->alpha) <= 1e-8);
  TrainOptions resume;
  resume.resume = *ck.state;
  const auto rest = train(std::move(ck.model), tiny_split().train, tiny_split().val, quick_cfg(), resume);
  CHECK(rest.log.to_json() == full.log.to_json());
  CHECK(same_parameters(rest.model, full.model));
  CHECK(same_parameters(rest.best_model, full.best_model));
}

TEST_CASE("checkpoint files are written") {
  const auto dir = testutil::temp_dir("trainer");
  TrainOptions opt;
  opt.checkpoint_dir = dir;
  int calls = 0;
  opt.on_epoch = [&](const EpochRecord&) { ++calls; };
  auto c = quick_cfg();
  c.epochs = 2;
  const auto r = run(c, 1, opt);
  CHECK(calls == 2);
  CHECK(std::filesystem::exists(dir / "best.ckpt"));
  const auto last = checkpoint::load_checkpoint(dir / "last.ckpt");
  REQUIRE(last.state.has_value());
  CHECK(last.state->epoch == 2);
  CHECK(same_parameters(last.model, r.model));
  std::filesystem::remove_all(dir);
}

TEST_CASE("MTL_Vanilla keeps alpha at the identity, MTL_NonAdv learns it") {
  const auto v = run(quick_cfg(model::Variant::MTL_Vanilla));
  for (const auto& e : v.log.epochs) CHECK(e.alpha == objective::identity_alpha());
  const auto n = run(quick_cfg(model::Variant::MTL_NonAdv));
  bool moved = false;
  for (const auto& e : n.log.epochs) {
    moved = moved || !(e.alpha == objective::identity_alpha());
    for (int p = 0; p < 3; ++p) CHECK(std::isnan(e.train_adv[p]));
  }
  CHECK(moved);
}

TEST_CASE("rho = 0 with frozen identity alpha reproduces MTL_Vanilla exactly") {
  auto c = quick_cfg();
  c.rho = 0.0;
  c.freeze_alpha = true;
  const auto amt = run(c);
  const auto van = run(quick_cfg(model::Variant::MTL_Vanilla));
  REQUIRE(amt.log.epochs.size() == van.log.epochs.size());
  for (std::size_t e = 0; e < amt.log.epochs.size(); ++e) {
    const auto &x = amt.log.epochs[e], &y = van.log.epochs[e];
    CHECK(x.train_total == y.train_total);
    for (int t = 0; t < 3; ++t) {
      CHECK(x.train_ce[t][t] == y.train_ce[t][t]);
      CHECK(x.val.acc[t] == y.val.acc[t]);
    }
    CHECK(x.val.total == y.val.total);
    CHECK(x.lr == y.lr);
    CHECK(x.alpha == objective::identity_alpha());
  }
  CHECK(amt.model.conv[2].weight.value == van.model.conv[2].weight.value);
  CHECK(amt.model.heads[1][1]->w.value == van.model.heads[1][1]->w.value);
}

TEST_CASE("STL trains only its own task") {
  const auto r = run(quick_cfg(model::Variant::STL_II));
  for (const auto& e : r.log.epochs) {
    CHECK(std::isnan(e.val.acc[0]));
    CHECK(std::isnan(e.val.acc[1]));
    CHECK(std::isfinite(e.val.acc[2]));
  }
  CHECK(effective_lambda(quick_cfg(model::Variant::STL_II)) == std::array<double, 3>{0, 0, 1});
}

TEST_CASE("a non-finite loss aborts with the last good model") {
  auto c = quick_cfg();
  c.lr = 1e30;
  c.clip_grad = false;
  const auto r = run(c);
  CHECK(r.log.diverged);
  CHECK_FALSE(r.log.divergence.empty());
  for (const auto* p : r.model.parameters()) CHECK(p->value.allFinite());
}

TEST_CASE("lambda normalization and configuration JSON") {
  TrainConfig c;
  const auto l = effective_lambda(c);
  CHECK(l[0] == doctest::Approx(0.05 / 1.05).epsilon(1e-15));
  CHECK(l[1] == doctest::Approx(0.85 / 1.05).epsilon(1e-15));
  CHECK(l[0] + l[1] + l[2] == doctest::Approx(1.0).epsilon(1e-15));
  const auto o = objective_config(c, 2040);
  CHECK(o.c1 == doctest::Approx(objective::compute_c1(100, 2040, 3, 0.1)).epsilon(1e-15));
  c.c1 = 0.25;
  CHECK(objective_config(c, 10).c1 == 0.25);

  c.rho = 0.3;
  c.variant = model::Variant::MTL_NonAdv;
  c.adv_mode = model::AdvOutputMode::Logit;
  const auto back = TrainConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK(back.rho == 0.3);
  CHECK(*back.c1 == 0.25);
  CHECK(TrainConfig::from_json(R"({"epochs": 7})").epochs == 7);
  CHECK_THROWS_AS(TrainConfig::from_json(R"({"epoch": 7})"), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json(R"({"lambda": [0, 0, 0]})"), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json(R"({"batch_size": 1})"), ConfigError);
}

TEST_CASE("mismatched model and data are rejected") {
  auto c = quick_cfg();
  auto m = model::build<float>(small_arch(model::Variant::MTL_Vanilla), 1);
  CHECK_THROWS_AS(train(std::move(m), tiny_split().train, tiny_split().val, c), ConfigError);
}

}  // TEST_SUITE
