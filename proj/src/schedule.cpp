// SPDX-License-Identifier: Apache-2.0
#include "pixelpost/schedule.hpp"

#include <cmath>
#include <string>

namespace pixelpost {

int NoiseSchedule::check(int t) const {
  if (t < 1 || t > T) {
    throw ValueError("timestep " + std::to_string(t) + " outside [1, " +
                     std::to_string(T) + "]");
  }
  return t - 1;
}

double NoiseSchedule::sqrt_alpha_bar(int t) const {
  return std::sqrt(alpha_bar(t));
}

double NoiseSchedule::sqrt_one_minus_alpha_bar(int t) const {
  return std::sqrt(1.0 - alpha_bar(t));
}

NoiseSchedule schedule_from_betas(std::vector<double> betas) {
  if (betas.empty()) throw ValueError("schedule_from_betas: need at least one beta");
  for (double b : betas) {
    if (!(b > 0.0 && b < 1.0)) {
      throw ValueError("schedule_from_betas: betas must lie in (0, 1)");
    }
  }
  NoiseSchedule s;
  s.T = static_cast<int>(betas.size());
  s.betas = std::move(betas);
  s.alphas.resize(s.T);
  s.alpha_bars.resize(s.T);
  double prod = 1.0;
  for (int i = 0; i < s.T; ++i) {
    s.alphas[i] = 1.0 - s.betas[i];
    prod *= s.alphas[i];
    s.alpha_bars[i] = prod;
  }
  return s;
}

NoiseSchedule linear_schedule(int T, double beta_start, double beta_end) {
  if (T < 1) throw ValueError("linear_schedule: T must be >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw ValueError("linear_schedule: need 0 < beta_start <= beta_end < 1");
  }
  std::vector<double> betas(T);
  for (int i = 0; i < T; ++i) {
    const double frac = (T == 1) ? 0.0 : static_cast<double>(i) / (T - 1);
    betas[i] = beta_start + (beta_end - beta_start) * frac;
  }
  return schedule_from_betas(std::move(betas));
}

Tensor q_sample(const NoiseSchedule& schedule, const Tensor& z0, int t,
                const Tensor& eps) {
  if (!z0.same_shape(eps)) {
    throw ShapeError("q_sample: eps shape " + Tensor::shape_str(eps.shape) +
                     " does not match z0 shape " + Tensor::shape_str(z0.shape));
  }
  const float a = static_cast<float>(schedule.sqrt_alpha_bar(t));
  const float b = static_cast<float>(schedule.sqrt_one_minus_alpha_bar(t));
  Tensor out = Tensor::zeros(z0.shape);
  for (int64_t i = 0; i < z0.numel(); ++i) out[i] = a * z0[i] + b * eps[i];
  return out;
}

Tensor q_sample_batch(const NoiseSchedule& schedule, const Tensor& z0,
                      const std::vector<int>& ts, const Tensor& eps) {
  if (z0.rank() < 1) throw ShapeError("q_sample_batch: z0 must have a batch dim");
  const int N = z0.shape[0];
  if (static_cast<int>(ts.size()) != N) {
    throw ShapeError("q_sample_batch: got " + std::to_string(ts.size()) +
                     " timesteps for batch of " + std::to_string(N));
  }
  if (!z0.same_shape(eps)) {
    throw ShapeError("q_sample_batch: eps shape " + Tensor::shape_str(eps.shape) +
                     " does not match z0 shape " + Tensor::shape_str(z0.shape));
  }
  const int64_t stride = z0.numel() / N;
  Tensor out = Tensor::zeros(z0.shape);
  for (int n = 0; n < N; ++n) {
    const float a = static_cast<float>(schedule.sqrt_alpha_bar(ts[n]));
    const float b = static_cast<float>(schedule.sqrt_one_minus_alpha_bar(ts[n]));
    for (int64_t i = n * stride; i < (n + 1) * stride; ++i) {
      out[i] = a * z0[i] + b * eps[i];
    }
  }
  return out;
}

int sample_timestep(const NoiseSchedule& schedule, Rng& rng) {
  return 1 + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(schedule.T)));
}

}  // namespace pixelpost
