// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "pixelpost/models.hpp"
#include "pixelpost/schedule.hpp"
#include "pixelpost/tensor.hpp"

namespace pixelpost {

// Deterministic DDIM sampling with classifier-free guidance.
struct SamplerConfig {
  int num_steps = 50;
  float guidance_scale = 3.0f;
  // Stochasticity knob of generalized DDIM, pinned to zero: sampling must be
  // a pure function of (bundle, seed, label, config).
  float eta = 0.0f;

  void validate(int T) const;
};

// The timestep subsequence walked by the sampler: strictly decreasing uniform
// stride over 1..T, entry k = ceil(T * (num_steps - k) / num_steps); starts
// at T, ends at ceil(T / num_steps).
std::vector<int> ddim_timesteps(int T, int num_steps);

// Classifier-free guidance combination
//   eps_u + s * (eps_c - eps_u)
// of the unconditional (null-class) and conditional predictions. The
// endpoint scales skip the extrapolation entirely: s = 0 returns the
// unconditional prediction bit-exactly with a single model call, s = 1 the
// conditional one. z_t may be a batch; the label applies to every row.
Tensor cfg_predict(const ModelBundle& bundle, const Tensor& z_t, int t, int label,
                   float s);

// Noise-prediction seam for oracle tests: (z_t, t) -> eps_hat shaped like
// z_t. When empty, the bundle's guided prediction is used.
using GuidedPredictor = std::function<Tensor(const Tensor& z_t, int t)>;

// Starting noise for sample index i is drawn from
// Rng::derive(seed, kSampleInitStream, i); part of the public contract so
// callers can reconstruct or parallelize any individual sample.
inline constexpr uint64_t kSampleInitStream = 0xdd1f;

// Runs the eta = 0 DDIM chain from z_T ~ N(0, I) down the subsequence:
//   z0_hat  = (z_t - sqrt(1 - abar_t) * eps_hat) / sqrt(abar_t)
//   z_next  = sqrt(abar_next) * z0_hat + sqrt(1 - abar_next) * eps_hat
// with abar = 1 past the final step, so the chain ends on z0_hat itself.
// Returns the final latent [1, c, h, w].
Tensor ddim_sample_latent(const ModelBundle& bundle, const NoiseSchedule& schedule,
                          const SamplerConfig& cfg, int label, uint64_t seed,
                          const GuidedPredictor& predictor = {});

// Full pipeline: latent DDIM then decode. Returns one image [3, H, W].
Tensor ddim_sample(const ModelBundle& bundle, const NoiseSchedule& schedule,
                   const SamplerConfig& cfg, int label, uint64_t seed);

// One image per label, each from its own derived init stream
// (index = first_index + row), stepped as one batch. The network treats
// batch rows independently, so row i is bit-identical to a single-sample
// call covering the same stream index; any sample can be regenerated alone
// via sample_batch(bundle, schedule, cfg, {label}, seed, index).
std::vector<Tensor> sample_batch(const ModelBundle& bundle,
                                 const NoiseSchedule& schedule,
                                 const SamplerConfig& cfg,
                                 const std::vector<int>& labels, uint64_t seed,
                                 uint64_t first_index = 0);

// Canonical artifact name for one sampled image:
// "<run_id>_seed<seed>_label<label>_steps<num_steps>.ppm".
std::string sample_filename(const std::string& run_id, uint64_t seed, int label,
                            int num_steps);

}  // namespace pixelpost
