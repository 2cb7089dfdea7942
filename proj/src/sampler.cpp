// SPDX-License-Identifier: Apache-2.0
#include "pixelpost/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace pixelpost {

void SamplerConfig::validate(int T) const {
  if (num_steps < 1 || num_steps > T) {
    throw ValueError("num_steps must be in [1, T], got " + std::to_string(num_steps) +
                     " for T = " + std::to_string(T));
  }
  if (eta != 0.0f) {
    throw ValueError("only the deterministic eta = 0 sampler is supported");
  }
}

std::vector<int> ddim_timesteps(int T, int num_steps) {
  if (T < 1) throw ValueError("T must be >= 1");
  if (num_steps < 1 || num_steps > T) {
    throw ValueError("num_steps must be in [1, T]");
  }
  std::vector<int> ts(num_steps);
  for (int k = 0; k < num_steps; ++k) {
    // ceil(T * (num_steps - k) / num_steps); consecutive values differ by at
    // least one whenever num_steps <= T, so the sequence is strictly
    // decreasing from T down to ceil(T / num_steps).
    ts[k] = static_cast<int>((static_cast<int64_t>(T) * (num_steps - k) +
                              num_steps - 1) /
                             num_steps);
  }
  return ts;
}

namespace {

// Guidance with one label per batch row.
Tensor guided_eps(const ModelBundle& bundle, const Tensor& z_t, int t,
                  const std::vector<int>& labels, float s) {
  const std::vector<int> ts(labels.size(), t);
  const std::vector<int> nulls(labels.size(), bundle.dn_config.null_class());
  if (s == 0.0f) return predict_noise(bundle, z_t, ts, nulls);
  if (s == 1.0f) return predict_noise(bundle, z_t, ts, labels);
  Tensor eps_u = predict_noise(bundle, z_t, ts, nulls);
  const Tensor eps_c = predict_noise(bundle, z_t, ts, labels);
  for (int64_t i = 0; i < eps_u.numel(); ++i) {
    eps_u[i] = eps_u[i] + s * (eps_c[i] - eps_u[i]);
  }
  return eps_u;
}

// The batched eta = 0 DDIM chain; returns final latents [N, c, h, w].
Tensor ddim_chain(const ModelBundle& bundle, const NoiseSchedule& schedule,
                  const SamplerConfig& cfg, const std::vector<int>& labels,
                  uint64_t seed, uint64_t first_index,
                  const GuidedPredictor& predictor) {
  cfg.validate(schedule.T);
  for (int label : labels) {
    if (label < 0 || label > bundle.dn_config.num_classes) {
      throw ValueError("label " + std::to_string(label) + " out of range [0, " +
                       std::to_string(bundle.dn_config.num_classes) + "]");
    }
  }
  const int n = static_cast<int>(labels.size());
  const int c = bundle.dn_config.latent_channels;
  const int hw = bundle.dn_config.latent_size;
  Tensor z({n, c, hw, hw});
  const int64_t stride = static_cast<int64_t>(c) * hw * hw;
  for (int i = 0; i < n; ++i) {
    Rng rng = Rng::derive(seed, kSampleInitStream, first_index + i);
    Tensor row({c, hw, hw});
    rng.fill_normal(row);
    std::copy(row.data.begin(), row.data.end(), z.data.begin() + i * stride);
  }

  const std::vector<int> ts = ddim_timesteps(schedule.T, cfg.num_steps);
  for (size_t k = 0; k < ts.size(); ++k) {
    const int t = ts[k];
    const Tensor eps =
        predictor ? predictor(z, t) : guided_eps(bundle, z, t, labels, cfg.guidance_scale);
    if (!eps.same_shape(z)) {
      throw ShapeError("noise prediction shape " + Tensor::shape_str(eps.shape) +
                       " does not match latents " + Tensor::shape_str(z.shape));
    }
    const double sab = schedule.sqrt_alpha_bar(t);
    const double somb = schedule.sqrt_one_minus_alpha_bar(t);
    // Past the final step alpha_bar is 1 by convention: the chain ends on
    // the clean estimate itself.
    const double sab_next = k + 1 < ts.size() ? schedule.sqrt_alpha_bar(ts[k + 1]) : 1.0;
    const double somb_next =
        k + 1 < ts.size() ? schedule.sqrt_one_minus_alpha_bar(ts[k + 1]) : 0.0;
    for (int64_t i = 0; i < z.numel(); ++i) {
      const double z0_hat = (z[i] - somb * eps[i]) / sab;
      z[i] = static_cast<float>(sab_next * z0_hat + somb_next * eps[i]);
    }
  }
  return z;
}

}  // namespace

Tensor cfg_predict(const ModelBundle& bundle, const Tensor& z_t, int t, int label,
                   float s) {
  if (z_t.shape.size() != 4) {
    throw ShapeError("cfg_predict wants [N, c, h, w] latents, got " +
                     Tensor::shape_str(z_t.shape));
  }
  if (label < 0 || label > bundle.dn_config.num_classes) {
    throw ValueError("label " + std::to_string(label) + " out of range [0, " +
                     std::to_string(bundle.dn_config.num_classes) + "]");
  }
  return guided_eps(bundle, z_t, t, std::vector<int>(z_t.shape[0], label), s);
}

Tensor ddim_sample_latent(const ModelBundle& bundle, const NoiseSchedule& schedule,
                          const SamplerConfig& cfg, int label, uint64_t seed,
                          const GuidedPredictor& predictor) {
  return ddim_chain(bundle, schedule, cfg, {label}, seed, 0, predictor);
}

Tensor ddim_sample(const ModelBundle& bundle, const NoiseSchedule& schedule,
                   const SamplerConfig& cfg, int label, uint64_t seed) {
  Tensor image = decode(bundle, ddim_sample_latent(bundle, schedule, cfg, label, seed));
  image.shape.erase(image.shape.begin());  // [1, 3, H, W] -> [3, H, W]
  return image;
}

std::vector<Tensor> sample_batch(const ModelBundle& bundle,
                                 const NoiseSchedule& schedule,
                                 const SamplerConfig& cfg,
                                 const std::vector<int>& labels, uint64_t seed,
                                 uint64_t first_index) {
  if (labels.empty()) throw ValueError("sample_batch needs at least one label");
  const Tensor z = ddim_chain(bundle, schedule, cfg, labels, seed, first_index, {});
  const Tensor images = decode(bundle, z);
  std::vector<Tensor> out;
  const int n = images.shape[0];
  const std::vector<int> shape(images.shape.begin() + 1, images.shape.end());
  const int64_t stride = images.numel() / n;
  for (int i = 0; i < n; ++i) {
    Tensor img(shape);
    std::copy(images.data.begin() + i * stride, images.data.begin() + (i + 1) * stride,
              img.data.begin());
    out.push_back(std::move(img));
  }
  return out;
}

std::string sample_filename(const std::string& run_id, uint64_t seed, int label,
                            int num_steps) {
  char buf[96];
  std::snprintf(buf, sizeof(buf), "_seed%llu_label%d_steps%d.ppm",
                static_cast<unsigned long long>(seed), label, num_steps);
  return run_id + buf;
}

}  // namespace pixelpost
