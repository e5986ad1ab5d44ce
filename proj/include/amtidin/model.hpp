#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "amtidin/ad/ops.hpp"
#include "amtidin/dataio.hpp"

namespace amtidin::model {

using ad::Mat;
using ad::Parameter;
using ad::Tape;
using ad::Var;

enum class Variant { AMTIDIN, STL_ID, STL_MI, STL_II, MTL_Vanilla, MTL_NonAdv };
std::string_view variant_name(Variant v);
Variant variant_from_name(std::string_view s);

enum class AdvOutputMode { Sigmoid, Logit };
std::string_view adv_mode_name(AdvOutputMode m);
AdvOutputMode adv_mode_from_name(std::string_view s);

struct ArchConfig {
  int n = 256;
  int m_classes = 14;
  int i_classes = 6;
  int feature_dim = 128;
  int hyp_hidden = 256;
  int hyp_out = 64;
  double dropout = 0.1;
  AdvOutputMode adv_output_mode = AdvOutputMode::Sigmoid;
  Variant variant = Variant::AMTIDIN;
  int sn_power_iters = 1;  // per training forward

  int classes(Task t) const;
  void validate() const;
};

// Which modules a variant instantiates.
struct VariantLayout {
  std::array<bool, 3> hypotheses{};         // indexed by task
  std::array<std::array<bool, 3>, 3> heads{};  // heads[t][i]
  bool discriminators = false;
  bool learns_alpha = false;
  // Task streams the variant consumes.
  std::array<bool, 3> streams() const;
};
VariantLayout layout_for(Variant v);
// Single trained task of an STL variant.
std::optional<Task> stl_task(Variant v);

template <typename S>
struct ConvBlock {
  Parameter<S> weight, bias, gamma, beta;
  ad::BatchNormState<S> bn;
  int padding = 0;
};

template <typename S>
struct Hypothesis {
  Parameter<S> res_w, res_b;    // main path 128 -> 256
  Parameter<S> skip_w, skip_b;  // projection 128 -> 256
  Parameter<S> l2_w, l2_b;      // 256 -> 128
  Parameter<S> l3_w, l3_b;      // 128 -> 64
};

template <typename S>
struct Head {
  Parameter<S> w, b;
};

template <typename S>
struct Discriminator {
  Parameter<S> w1, b1, w2, b2;
  ad::SpectralNormState<S> sn1, sn2;
};

template <typename S>
class AmtidinModel {
 public:
  ArchConfig arch;
  std::array<ConvBlock<S>, 3> conv;
  std::array<std::optional<Hypothesis<S>>, 3> hyp;
  std::array<std::array<std::optional<Head<S>>, 3>, 3> heads;  // heads[t][i]
  std::array<std::optional<Discriminator<S>>, 3> disc;         // indexed by kTaskPairs

  // Trainable parameters in a fixed order (extractor, hypotheses, heads, discriminators).
  std::vector<Parameter<S>*> parameters();
  std::vector<const Parameter<S>*> parameters() const;
  std::size_t num_parameters() const;
  std::size_t num_discriminator_parameters() const;
  VariantLayout layout() const { return layout_for(arch.variant); }
};

// Kaiming-uniform weights, zero biases, unit/zero BN affine. Every module draws from
// its own seed derived from (seed, module name), so modules shared between variants
// start identical.
template <typename S>
AmtidinModel<S> build(const ArchConfig& arch, std::uint64_t seed);
// Same as build with arch.variant = v.
template <typename S>
AmtidinModel<S> build_baseline(Variant v, ArchConfig arch, std::uint64_t seed);

// Trainable parameter count of the full model, summed from the layer shapes.
std::size_t expected_parameter_count(const ArchConfig& arch);

template <typename T, typename S>
AmtidinModel<T> cast_model(const AmtidinModel<S>& m);

template <typename S>
struct ForwardTrainOutput {
  std::array<Var<S>, 3> features;                 // f^i, feature_dim x B_i
  std::array<std::array<Var<S>, 3>, 3> logits;    // z^{t,i}: head (t,i) on h_t(f^i)
  // Per discriminator pair (a, b) = kTaskPairs[p]: outputs on f^a and f^b, 1 x B.
  std::array<Var<S>, 3> d_a_logit, d_b_logit, d_a_sigmoid, d_b_sigmoid;
};

struct ForwardOptions {
  bool training = true;
  std::uint64_t dropout_seed = 0;
  // Streams to evaluate; inactive variant streams are skipped regardless.
  std::array<bool, 3> streams{true, true, true};
};

// Input block 2 x (B*N) to pooled features feature_dim x B.
template <typename S>
Var<S> extract(AmtidinModel<S>& m, Tape<S>& tape, const Mat<S>& x, int batch, bool training);
template <typename S>
Var<S> apply_hypothesis(AmtidinModel<S>& m, Tape<S>& tape, Task t, Var<S> f, bool training, std::uint64_t seed);
template <typename S>
Var<S> apply_head(AmtidinModel<S>& m, Tape<S>& tape, Task t, Task i, Var<S> h);

template <typename S>
struct DiscWeights {
  Var<S> w1, b1, w2, b2;  // w1, w2 spectrally normalized
};
// Normalized weights of discriminator p; power iteration only in training mode.
template <typename S>
DiscWeights<S> discriminator_weights(AmtidinModel<S>& m, Tape<S>& tape, int p, bool training);
// GRL -> SN-linear -> ELU -> SN-linear; returns the 1 x B logit.
template <typename S>
Var<S> discriminator_logit(Tape<S>& tape, const DiscWeights<S>& w, Var<S> f);

// Each active stream passes the extractor once; hypothesis t runs on every stream i
// with a head (t,i); discriminators run on GRL-wrapped features of both streams.
template <typename S>
ForwardTrainOutput<S> forward_train(AmtidinModel<S>& m, Tape<S>& tape, const dataio::TaskBatch& batch,
                                    const ForwardOptions& opt);

struct Predictions {
  std::array<std::vector<int>, 3> labels;  // empty for tasks the variant lacks
};
// Eval-mode inference via the diagonal heads; x is 2 x (B*N). Ties go to the lowest
// class index.
template <typename S>
Predictions predict(AmtidinModel<S>& m, const Mat<S>& x, int batch);

// ---- eval-mode helpers over whole datasets (no gradients) -----------------------

// Pooled features (feature_dim x |indices|) of the listed records, in chunks.
Mat<float> eval_features(AmtidinModel<float>& m, const dataio::Dataset& ds, const std::vector<std::size_t>& indices,
                         int chunk = 256);
// Head (t,i) logits on hypothesis t applied to feature columns F.
Mat<float> eval_logits(AmtidinModel<float>& m, Task t, Task i, const Mat<float>& F);
// Discriminator p logits (1 x cols) on feature columns F, using the stored SN state.
Mat<float> eval_disc_logits(AmtidinModel<float>& m, int p, const Mat<float>& F);

}  // namespace amtidin::model
