// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "pixelpost/models.hpp"
#include "pixelpost/schedule.hpp"

namespace pixelpost {

// Weights shared by the composite objectives. lambda scales the pixel term of
// the supervised objective, mu scales the pixel term of the preference
// objective, beta is the preference temperature inside -log sigmoid.
struct LossConfig {
  float lambda = 8.0f;
  float mu = 8.0f;
  float beta_dpo = 500.0f;
  // Preference pairs normally draw independent winner/loser noise; sharing
  // one draw across the pair is exposed for sensitivity checks.
  bool shared_pair_noise = false;
  void validate() const;
};

// Which preference terms make up the combined reward objective.
enum class RewardMode { kDpoOnly, kDpoDpoPixel, kDpoSimpoPixel, kSimpoSimpoPixel };
const char* reward_mode_name(RewardMode mode);
RewardMode reward_mode_from_name(const std::string& name);

// One supervised batch: clean latents plus their conditioning labels.
struct SftBatch {
  Tensor z0;                // [N, c, h, w]
  std::vector<int> labels;  // N entries in [0, num_classes]
};

// One preference batch: winner and loser latents per pair, one label each.
struct PairBatch {
  Tensor zw, zl;            // [N, c, h, w] each
  std::vector<int> labels;  // N
};

// Timesteps and Gaussian noise for one supervised batch.
struct NoiseDraw {
  std::vector<int> ts;  // one timestep per sample
  Tensor eps;           // shaped like the batch latents
};

// Timesteps and noise for one preference batch; the pair shares its timestep,
// winner and loser noise are independent draws (or aliases when shared).
struct PairDraw {
  std::vector<int> ts;   // one timestep per pair
  Tensor eps_w, eps_l;   // shaped like the pair latents
};

NoiseDraw draw_noise(const NoiseSchedule& schedule, const std::vector<int>& shape,
                     Rng& rng);
PairDraw draw_pair_noise(const NoiseSchedule& schedule, const std::vector<int>& shape,
                         Rng& rng, bool shared_noise);

// A computed loss: the scalar value, named diagnostics for the metrics
// stream, and the finished trace whose param leaves are the trainable
// parameters (policy store order) for the optimizer's reverse sweep.
struct LossResult {
  float value = 0.0f;
  std::vector<std::pair<std::string, float>> diagnostics;
  TraceT<float> trace;
  std::vector<std::string> param_names;  // one per trace param leaf
};

// Looks up one diagnostic by name; throws ValueError when absent.
float diagnostic(const LossResult& result, const std::string& name);

// Pixel losses decode through the bundle's decoder by default. The override
// substitutes any other decode map (identity, a fixed linear probe) to
// isolate the latent-to-pixel algebra from the learned decoder.
template <typename S>
using DecodeFnT = std::function<int32_t(TapeT<S>&, int32_t)>;
using DecodeFn = DecodeFnT<float>;

// --- Graph cores -----------------------------------------------------------
// Templated single-source builders for every objective; the double
// instantiations exist for the finite-difference oracle. Data tensors are
// float and lifted onto the tape as constants; predictions come from the
// denoiser params in `dn` (and `ref` for the reference-based objectives).

template <typename S>
int32_t sft_latent_node(TapeT<S>& tape, const DenoiserConfig& cfg,
                        const NamedIds<S>& dn, const NoiseSchedule& schedule,
                        const SftBatch& batch, const NoiseDraw& draw);
template <typename S>
int32_t sft_pixel_node(TapeT<S>& tape, const DenoiserConfig& cfg,
                       const NamedIds<S>& dn, const NoiseSchedule& schedule,
                       const SftBatch& batch, const NoiseDraw& draw,
                       const DecodeFnT<S>& decode);
// margins: [N] per-pair preference margins; returns -mean log sigmoid(-beta*margins).
template <typename S>
int32_t preference_nll_node(TapeT<S>& tape, int32_t margins, double beta);

// Node ids of a built preference objective, kept so callers can read margins
// and per-side terms off the tape for diagnostics. win_term/lose_term are the
// per-pair [N] quantities whose difference is the margin (residuals for the
// reference-free objectives, residual deltas for the reference-based ones).
struct PrefIds {
  int32_t loss = -1;
  int32_t margins = -1;
  int32_t win_term = -1;
  int32_t lose_term = -1;
};

template <typename S>
PrefIds dpo_latent_node(TapeT<S>& tape, const DenoiserConfig& cfg,
                        const NamedIds<S>& dn, const NamedIds<S>& ref,
                        const NoiseSchedule& schedule, const PairBatch& batch,
                        const PairDraw& draw, double beta);
template <typename S>
PrefIds simpo_latent_node(TapeT<S>& tape, const DenoiserConfig& cfg,
                          const NamedIds<S>& dn, const NoiseSchedule& schedule,
                          const PairBatch& batch, const PairDraw& draw, double beta);
template <typename S>
PrefIds simpo_pixel_node(TapeT<S>& tape, const DenoiserConfig& cfg,
                         const NamedIds<S>& dn, const NoiseSchedule& schedule,
                         const PairBatch& batch, const PairDraw& draw, double beta,
                         const DecodeFnT<S>& decode);
template <typename S>
PrefIds dpo_pixel_node(TapeT<S>& tape, const DenoiserConfig& cfg,
                       const NamedIds<S>& dn, const NamedIds<S>& ref,
                       const NoiseSchedule& schedule, const PairBatch& batch,
                       const PairDraw& draw, double beta, const DecodeFnT<S>& decode);

// --- Objectives ------------------------------------------------------------
// Each is a pure function of (params, batch, draw); the returned trace's
// param leaves cover the policy denoiser (and the autoencoder if it is not
// frozen, which post-training never does).

// Latent-space noise-prediction error: mean over batch and elements of
// ||eps - eps_theta(z_t, t)||^2.
LossResult sft_latent(const ModelBundle& bundle, const SftBatch& batch,
                      const NoiseDraw& draw, const NoiseSchedule& schedule);

// Pixel-space variant: both sides of the error are decoded; the first decode
// argument is exactly z_t, the second swaps the drawn noise for the
// prediction. Gradients flow through the (frozen) decoder into the denoiser.
LossResult sft_pixel(const ModelBundle& bundle, const SftBatch& batch,
                     const NoiseDraw& draw, const NoiseSchedule& schedule,
                     const DecodeFn& decode_override = {});

// latent + lambda * pixel on one shared draw and one shared prediction.
LossResult sft_combined(const ModelBundle& bundle, const SftBatch& batch,
                        const NoiseDraw& draw, const NoiseSchedule& schedule,
                        const LossConfig& cfg, const DecodeFn& decode_override = {});

// Preference objectives: -E log sigmoid(-beta * margin) with per-pair margins
// built from per-sample mean-squared residuals.
LossResult dpo_latent(const ModelBundle& bundle, const ModelBundle& ref,
                      const PairBatch& batch, const PairDraw& draw,
                      const NoiseSchedule& schedule, const LossConfig& cfg);
LossResult simpo_latent(const ModelBundle& bundle, const PairBatch& batch,
                        const PairDraw& draw, const NoiseSchedule& schedule,
                        const LossConfig& cfg);
LossResult simpo_pixel(const ModelBundle& bundle, const PairBatch& batch,
                       const PairDraw& draw, const NoiseSchedule& schedule,
                       const LossConfig& cfg, const DecodeFn& decode_override = {});
LossResult dpo_pixel(const ModelBundle& bundle, const ModelBundle& ref,
                     const PairBatch& batch, const PairDraw& draw,
                     const NoiseSchedule& schedule, const LossConfig& cfg,
                     const DecodeFn& decode_override = {});

// Combined preference objective; `ref` is required exactly when the mode
// contains a reference-based term.
LossResult reward_combined(const ModelBundle& bundle, const ModelBundle* ref,
                           const PairBatch& batch, const PairDraw& draw,
                           const NoiseSchedule& schedule, const LossConfig& cfg,
                           RewardMode mode, const DecodeFn& decode_override = {});

// Inverts the forward process around a noise estimate:
// (z_t - sqrt(1 - alpha_bar) * eps_hat) / sqrt(alpha_bar). Refuses schedules
// noised past recovery (alpha_bar < 1e-8).
Tensor invert_forward(const Tensor& z_t, const Tensor& eps_hat, int t,
                      const NoiseSchedule& schedule);

// Alternative decode path used only by the decoding-methodology ablation:
// invert the forward process around the predicted noise, then decode.
// Labels default to the null class when omitted.
Tensor x0_decode(const ModelBundle& bundle, const Tensor& z_t, int t,
                 const NoiseSchedule& schedule, std::vector<int> labels = {});

}  // namespace pixelpost
