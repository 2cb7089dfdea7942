// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "pixelpost/rng.hpp"
#include "pixelpost/tensor.hpp"

namespace pixelpost {

// Discrete-time forward-diffusion schedule. Tables are computed and stored in
// double so that the cumulative product stays accurate out to large step
// counts; callers take float-cast coefficients at the point of use.
//
// Timesteps are 1-indexed: t runs over {1..T}, and beta(1) is the first noise
// increment. There is no t = 0 entry; "no noise" is the limit alpha_bar -> 1.
struct NoiseSchedule {
  int T = 0;
  std::vector<double> betas;       // beta_t, index t-1
  std::vector<double> alphas;      // 1 - beta_t
  std::vector<double> alpha_bars;  // prod_{i<=t} alpha_i

  double beta(int t) const { return betas[check(t)]; }
  double alpha(int t) const { return alphas[check(t)]; }
  double alpha_bar(int t) const { return alpha_bars[check(t)]; }
  double sqrt_alpha_bar(int t) const;
  double sqrt_one_minus_alpha_bar(int t) const;

 private:
  // Validates 1 <= t <= T and converts to a table index.
  int check(int t) const;
};

// Derives the alpha and alpha_bar tables from an explicit beta sequence.
// Requires at least one entry, each in (0, 1). Serialization round-trips a
// schedule through its betas alone via this builder.
NoiseSchedule schedule_from_betas(std::vector<double> betas);

// Linearly spaced betas, endpoints inclusive (T = 1 uses beta_start).
// Requires T >= 1 and 0 < beta_start <= beta_end < 1.
NoiseSchedule linear_schedule(int T = 1000, double beta_start = 1e-4,
                              double beta_end = 0.02);

// Forward process: z_t = sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * eps.
Tensor q_sample(const NoiseSchedule& schedule, const Tensor& z0, int t,
                const Tensor& eps);

// Batch form with one timestep per leading-dimension sample. z0 is [N, ...];
// ts.size() must equal N.
Tensor q_sample_batch(const NoiseSchedule& schedule, const Tensor& z0,
                      const std::vector<int>& ts, const Tensor& eps);

// Uniform draw over {1..T} for training.
int sample_timestep(const NoiseSchedule& schedule, Rng& rng);

}  // namespace pixelpost
