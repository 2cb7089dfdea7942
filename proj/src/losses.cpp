// SPDX-License-Identifier: Apache-2.0
//
// The eight training objectives. Every objective is assembled from the same
// mid-level pieces (prediction, per-sample residual, decode pair, preference
// margin), templated on the scalar so the finite-difference oracle can replay
// the identical graph in double.
#include "pixelpost/losses.hpp"

#include <cmath>
#include <string>
#include <utility>

namespace pixelpost {

void LossConfig::validate() const {
  if (lambda < 0.0f || mu < 0.0f) throw ValueError("loss weights must be >= 0");
  if (!(beta_dpo > 0.0f)) throw ValueError("preference temperature must be > 0");
}

const char* reward_mode_name(RewardMode mode) {
  switch (mode) {
    case RewardMode::kDpoOnly: return "dpo";
    case RewardMode::kDpoDpoPixel: return "dpo+dpoPix";
    case RewardMode::kDpoSimpoPixel: return "dpo+simpoPix";
    case RewardMode::kSimpoSimpoPixel: return "simpo+simpoPix";
  }
  return "?";
}

RewardMode reward_mode_from_name(const std::string& name) {
  for (RewardMode m : {RewardMode::kDpoOnly, RewardMode::kDpoDpoPixel,
                       RewardMode::kDpoSimpoPixel, RewardMode::kSimpoSimpoPixel}) {
    if (name == reward_mode_name(m)) return m;
  }
  throw ValueError("unknown reward mode name '" + name + "'");
}

float diagnostic(const LossResult& result, const std::string& name) {
  for (const auto& [key, value] : result.diagnostics) {
    if (key == name) return value;
  }
  throw ValueError("no diagnostic named " + name);
}

NoiseDraw draw_noise(const NoiseSchedule& schedule, const std::vector<int>& shape,
                     Rng& rng) {
  NoiseDraw d;
  const int n = shape.at(0);
  d.ts.reserve(n);
  for (int i = 0; i < n; ++i) d.ts.push_back(sample_timestep(schedule, rng));
  d.eps = rng.normal_tensor(shape);
  return d;
}

PairDraw draw_pair_noise(const NoiseSchedule& schedule, const std::vector<int>& shape,
                         Rng& rng, bool shared_noise) {
  PairDraw d;
  const int n = shape.at(0);
  d.ts.reserve(n);
  for (int i = 0; i < n; ++i) d.ts.push_back(sample_timestep(schedule, rng));
  d.eps_w = rng.normal_tensor(shape);
  d.eps_l = shared_noise ? d.eps_w : rng.normal_tensor(shape);
  return d;
}

namespace {

void check_sft(const SftBatch& batch, const NoiseDraw& draw) {
  if (batch.z0.rank() != 4) throw ShapeError("latent batch must be [N,c,h,w]");
  const int n = batch.z0.shape[0];
  if (static_cast<int>(batch.labels.size()) != n ||
      static_cast<int>(draw.ts.size()) != n) {
    throw ShapeError("need one label and one timestep per sample");
  }
  if (!batch.z0.same_shape(draw.eps)) {
    throw ShapeError("noise draw shape does not match the latent batch");
  }
}

void check_pair(const PairBatch& batch, const PairDraw& draw) {
  if (batch.zw.rank() != 4) throw ShapeError("pair batch must be [N,c,h,w]");
  if (!batch.zw.same_shape(batch.zl)) {
    throw ShapeError("winner and loser latents must share a shape");
  }
  const int n = batch.zw.shape[0];
  if (static_cast<int>(batch.labels.size()) != n ||
      static_cast<int>(draw.ts.size()) != n) {
    throw ShapeError("need one label and one timestep per pair");
  }
  if (!batch.zw.same_shape(draw.eps_w) || !batch.zw.same_shape(draw.eps_l)) {
    throw ShapeError("pair noise draws must match the latent shape");
  }
}

// Per-sample coefficient broadcast to the full latent shape, e.g. the
// sqrt(1-alpha_bar_t) factor that scales each sample's prediction.
Tensor per_sample_fill(const std::vector<int>& shape, const std::vector<double>& c) {
  Tensor out = Tensor::zeros(shape);
  const int n = shape[0];
  const int64_t stride = out.numel() / n;
  for (int i = 0; i < n; ++i) {
    const float v = static_cast<float>(c[i]);
    for (int64_t j = i * stride; j < (i + 1) * stride; ++j) out[j] = v;
  }
  return out;
}

Tensor scale_per_sample(const Tensor& x, const std::vector<double>& c) {
  Tensor out = x;
  const int n = x.shape[0];
  const int64_t stride = x.numel() / n;
  for (int i = 0; i < n; ++i) {
    const float v = static_cast<float>(c[i]);
    for (int64_t j = i * stride; j < (i + 1) * stride; ++j) out[j] *= v;
  }
  return out;
}

template <typename S>
int32_t lift(TapeT<S>& tape, const Tensor& t) {
  return tape.constant(to_scalar<S>(t));
}

// Both decoder inputs of a pixel objective: the exact forward-noised latent
// z_t, and the same expression with the drawn noise replaced by the model's
// prediction (a graph value, so gradients flow through the decode).
template <typename S>
std::pair<int32_t, int32_t> pixel_decode_pair(TapeT<S>& tape,
                                              const NoiseSchedule& schedule,
                                              const Tensor& z0, const Tensor& eps,
                                              const std::vector<int>& ts, int32_t pred,
                                              const DecodeFnT<S>& decode) {
  const int n = z0.shape[0];
  std::vector<double> a(n), b(n);
  for (int i = 0; i < n; ++i) {
    a[i] = schedule.sqrt_alpha_bar(ts[i]);
    b[i] = schedule.sqrt_one_minus_alpha_bar(ts[i]);
  }
  const Tensor zt = q_sample_batch(schedule, z0, ts, eps);
  const int32_t clean = decode(tape, lift(tape, zt));
  const int32_t signal = lift(tape, scale_per_sample(z0, a));
  const int32_t noise_w = lift(tape, per_sample_fill(z0.shape, b));
  const int32_t predicted =
      decode(tape, tape.add(signal, tape.mul(pred, noise_w)));
  return {clean, predicted};
}

}  // namespace

template <typename S>
int32_t sft_latent_node(TapeT<S>& tape, const DenoiserConfig& cfg,
                        const NamedIds<S>& dn, const NoiseSchedule& schedule,
                        const SftBatch& batch, const NoiseDraw& draw) {
  check_sft(batch, draw);
  const Tensor zt = q_sample_batch(schedule, batch.z0, draw.ts, draw.eps);
  const int32_t pred =
      denoiser_graph(tape, cfg, lift(tape, zt), draw.ts, batch.labels, dn);
  return tape.mse(lift(tape, draw.eps), pred);
}

template <typename S>
int32_t sft_pixel_node(TapeT<S>& tape, const DenoiserConfig& cfg,
                       const NamedIds<S>& dn, const NoiseSchedule& schedule,
                       const SftBatch& batch, const NoiseDraw& draw,
                       const DecodeFnT<S>& decode) {
  check_sft(batch, draw);
  const Tensor zt = q_sample_batch(schedule, batch.z0, draw.ts, draw.eps);
  const int32_t pred =
      denoiser_graph(tape, cfg, lift(tape, zt), draw.ts, batch.labels, dn);
  auto [clean, predicted] =
      pixel_decode_pair(tape, schedule, batch.z0, draw.eps, draw.ts, pred, decode);
  return tape.mse(clean, predicted);
}

template <typename S>
int32_t preference_nll_node(TapeT<S>& tape, int32_t margins, double beta) {
  const int32_t args = tape.scale(margins, -beta);
  return tape.scale(tape.mean_all(tape.log_sigmoid(args)), -1.0);
}

namespace {

// Latent residuals of one side of a pair batch: [N] per-sample mean of
// (eps - prediction)^2 at the shared pair timesteps.
template <typename S>
int32_t latent_residual(TapeT<S>& tape, const DenoiserConfig& cfg,
                        const NamedIds<S>& who, const NoiseSchedule& schedule,
                        const Tensor& z0, const Tensor& eps,
                        const std::vector<int>& ts, const std::vector<int>& labels) {
  const Tensor zt = q_sample_batch(schedule, z0, ts, eps);
  const int32_t pred = denoiser_graph(tape, cfg, lift(tape, zt), ts, labels, who);
  return tape.mse_per_sample(lift(tape, eps), pred);
}

// Pixel residuals of one side: [N] per-sample mean of the decoded difference.
template <typename S>
int32_t pixel_residual(TapeT<S>& tape, const DenoiserConfig& cfg,
                       const NamedIds<S>& who, const NoiseSchedule& schedule,
                       const Tensor& z0, const Tensor& eps, const std::vector<int>& ts,
                       const std::vector<int>& labels, const DecodeFnT<S>& decode) {
  const Tensor zt = q_sample_batch(schedule, z0, ts, eps);
  const int32_t pred = denoiser_graph(tape, cfg, lift(tape, zt), ts, labels, who);
  auto [clean, predicted] = pixel_decode_pair(tape, schedule, z0, eps, ts, pred, decode);
  return tape.mse_per_sample(clean, predicted);
}

template <typename S>
PrefIds margin_to_pref(TapeT<S>& tape, int32_t win_term, int32_t lose_term,
                       double beta) {
  PrefIds ids;
  ids.win_term = win_term;
  ids.lose_term = lose_term;
  ids.margins = tape.sub(win_term, lose_term);
  ids.loss = preference_nll_node(tape, ids.margins, beta);
  return ids;
}

}  // namespace

template <typename S>
PrefIds dpo_latent_node(TapeT<S>& tape, const DenoiserConfig& cfg,
                        const NamedIds<S>& dn, const NamedIds<S>& ref,
                        const NoiseSchedule& schedule, const PairBatch& batch,
                        const PairDraw& draw, double beta) {
  check_pair(batch, draw);
  const int32_t dw = tape.sub(
      latent_residual(tape, cfg, dn, schedule, batch.zw, draw.eps_w, draw.ts, batch.labels),
      latent_residual(tape, cfg, ref, schedule, batch.zw, draw.eps_w, draw.ts, batch.labels));
  const int32_t dl = tape.sub(
      latent_residual(tape, cfg, dn, schedule, batch.zl, draw.eps_l, draw.ts, batch.labels),
      latent_residual(tape, cfg, ref, schedule, batch.zl, draw.eps_l, draw.ts, batch.labels));
  return margin_to_pref(tape, dw, dl, beta);
}

template <typename S>
PrefIds simpo_latent_node(TapeT<S>& tape, const DenoiserConfig& cfg,
                          const NamedIds<S>& dn, const NoiseSchedule& schedule,
                          const PairBatch& batch, const PairDraw& draw, double beta) {
  check_pair(batch, draw);
  const int32_t rw = latent_residual(tape, cfg, dn, schedule, batch.zw, draw.eps_w,
                                     draw.ts, batch.labels);
  const int32_t rl = latent_residual(tape, cfg, dn, schedule, batch.zl, draw.eps_l,
                                     draw.ts, batch.labels);
  return margin_to_pref(tape, rw, rl, beta);
}

template <typename S>
PrefIds simpo_pixel_node(TapeT<S>& tape, const DenoiserConfig& cfg,
                         const NamedIds<S>& dn, const NoiseSchedule& schedule,
                         const PairBatch& batch, const PairDraw& draw, double beta,
                         const DecodeFnT<S>& decode) {
  check_pair(batch, draw);
  const int32_t pw = pixel_residual(tape, cfg, dn, schedule, batch.zw, draw.eps_w,
                                    draw.ts, batch.labels, decode);
  const int32_t pl = pixel_residual(tape, cfg, dn, schedule, batch.zl, draw.eps_l,
                                    draw.ts, batch.labels, decode);
  return margin_to_pref(tape, pw, pl, beta);
}

template <typename S>
PrefIds dpo_pixel_node(TapeT<S>& tape, const DenoiserConfig& cfg,
                       const NamedIds<S>& dn, const NamedIds<S>& ref,
                       const NoiseSchedule& schedule, const PairBatch& batch,
                       const PairDraw& draw, double beta, const DecodeFnT<S>& decode) {
  check_pair(batch, draw);
  const int32_t dw = tape.sub(
      pixel_residual(tape, cfg, dn, schedule, batch.zw, draw.eps_w, draw.ts,
                     batch.labels, decode),
      pixel_residual(tape, cfg, ref, schedule, batch.zw, draw.eps_w, draw.ts,
                     batch.labels, decode));
  const int32_t dl = tape.sub(
      pixel_residual(tape, cfg, dn, schedule, batch.zl, draw.eps_l, draw.ts,
                     batch.labels, decode),
      pixel_residual(tape, cfg, ref, schedule, batch.zl, draw.eps_l, draw.ts,
                     batch.labels, decode));
  return margin_to_pref(tape, dw, dl, beta);
}

// --- Public float objectives ----------------------------------------------

namespace {

// Everything the float wrappers share: the tape, uploaded stores, the real
// decoder closure, and the trainable-parameter name list.
struct Assembly {
  TapeT<float> tape;
  NamedIds<float> dn, ae, ref;
  DecodeFn decode;
  std::vector<std::string> param_names;
};

// Uploads the policy denoiser (trainable unless frozen), and optionally the
// autoencoder and reference denoiser. Upload order fixes the gradient layout:
// policy denoiser slots first, then autoencoder slots if trainable.
Assembly assemble(const ModelBundle& bundle, bool want_decoder,
                  const ModelBundle* ref, const DecodeFn& decode_override) {
  Assembly a;
  a.dn = upload_store(a.tape, bundle.dn, /*trainable=*/!bundle.dn_frozen);
  if (!bundle.dn_frozen) {
    for (int s = 0; s < bundle.dn.size(); ++s) {
      a.param_names.push_back("dn:" + bundle.dn.name(s));
    }
  }
  if (want_decoder) {
    if (decode_override) {
      a.decode = decode_override;
    } else {
      a.ae = upload_store(a.tape, bundle.ae, /*trainable=*/!bundle.ae_frozen);
      if (!bundle.ae_frozen) {
        for (int s = 0; s < bundle.ae.size(); ++s) {
          a.param_names.push_back("ae:" + bundle.ae.name(s));
        }
      }
      a.decode = [cfg = bundle.ae_config, ids = a.ae](TapeT<float>& t, int32_t z) {
        return decoder_graph(t, cfg, z, ids);
      };
    }
  }
  if (ref != nullptr) {
    if (!ref->dn_frozen) throw ValueError("reference bundle must be frozen");
    a.ref = upload_store(a.tape, ref->dn, /*trainable=*/false);
  }
  return a;
}

LossResult seal(Assembly& a, int32_t loss_id,
                std::vector<std::pair<std::string, float>> diags) {
  LossResult r;
  r.value = a.tape.val(loss_id)[0];
  diags.emplace_back("loss", r.value);
  r.diagnostics = std::move(diags);
  r.param_names = std::move(a.param_names);
  r.trace = a.tape.finish(loss_id);
  return r;
}

float mean_of(const TapeT<float>& tape, int32_t id) {
  const Tensor& v = tape.val(id);
  double s = 0.0;
  for (float x : v.data) s += x;
  return v.numel() ? static_cast<float>(s / static_cast<double>(v.numel())) : 0.0f;
}

std::vector<std::pair<std::string, float>> pref_diags(const TapeT<float>& tape,
                                                      const PrefIds& ids, float beta) {
  const float margin = mean_of(tape, ids.margins);
  return {{"margin_mean", margin},
          {"win_term_mean", mean_of(tape, ids.win_term)},
          {"lose_term_mean", mean_of(tape, ids.lose_term)},
          {"sigma_arg_mean", -beta * margin},
          {"beta", beta}};
}

}  // namespace

LossResult sft_latent(const ModelBundle& bundle, const SftBatch& batch,
                      const NoiseDraw& draw, const NoiseSchedule& schedule) {
  Assembly a = assemble(bundle, /*want_decoder=*/false, nullptr, {});
  const int32_t loss =
      sft_latent_node(a.tape, bundle.dn_config, a.dn, schedule, batch, draw);
  return seal(a, loss, {});
}

LossResult sft_pixel(const ModelBundle& bundle, const SftBatch& batch,
                     const NoiseDraw& draw, const NoiseSchedule& schedule,
                     const DecodeFn& decode_override) {
  Assembly a = assemble(bundle, /*want_decoder=*/true, nullptr, decode_override);
  const int32_t loss = sft_pixel_node(a.tape, bundle.dn_config, a.dn, schedule, batch,
                                      draw, a.decode);
  return seal(a, loss, {});
}

LossResult sft_combined(const ModelBundle& bundle, const SftBatch& batch,
                        const NoiseDraw& draw, const NoiseSchedule& schedule,
                        const LossConfig& cfg, const DecodeFn& decode_override) {
  cfg.validate();
  if (cfg.lambda == 0.0f) {
    // Exact reduction to the latent objective: same graph, same bits, and the
    // same diagnostics, so downstream loss logs are literally identical.
    return sft_latent(bundle, batch, draw, schedule);
  }
  Assembly a = assemble(bundle, /*want_decoder=*/true, nullptr, decode_override);
  check_sft(batch, draw);
  // One prediction serves both terms.
  const Tensor zt = q_sample_batch(schedule, batch.z0, draw.ts, draw.eps);
  const int32_t pred = denoiser_graph(a.tape, bundle.dn_config,
                                      a.tape.constant(zt), draw.ts, batch.labels, a.dn);
  const int32_t latent = a.tape.mse(a.tape.constant(draw.eps), pred);
  auto [clean, predicted] =
      pixel_decode_pair(a.tape, schedule, batch.z0, draw.eps, draw.ts, pred, a.decode);
  const int32_t pixel = a.tape.mse(clean, predicted);
  const int32_t loss = a.tape.add(latent, a.tape.scale(pixel, cfg.lambda));
  return seal(a, loss,
              {{"latent", a.tape.val(latent)[0]},
               {"pixel", a.tape.val(pixel)[0]},
               {"lambda", cfg.lambda}});
}

LossResult dpo_latent(const ModelBundle& bundle, const ModelBundle& ref,
                      const PairBatch& batch, const PairDraw& draw,
                      const NoiseSchedule& schedule, const LossConfig& cfg) {
  cfg.validate();
  Assembly a = assemble(bundle, /*want_decoder=*/false, &ref, {});
  const PrefIds ids = dpo_latent_node(a.tape, bundle.dn_config, a.dn, a.ref, schedule,
                                      batch, draw, cfg.beta_dpo);
  return seal(a, ids.loss, pref_diags(a.tape, ids, cfg.beta_dpo));
}

LossResult simpo_latent(const ModelBundle& bundle, const PairBatch& batch,
                        const PairDraw& draw, const NoiseSchedule& schedule,
                        const LossConfig& cfg) {
  cfg.validate();
  Assembly a = assemble(bundle, /*want_decoder=*/false, nullptr, {});
  const PrefIds ids = simpo_latent_node(a.tape, bundle.dn_config, a.dn, schedule,
                                        batch, draw, cfg.beta_dpo);
  return seal(a, ids.loss, pref_diags(a.tape, ids, cfg.beta_dpo));
}

LossResult simpo_pixel(const ModelBundle& bundle, const PairBatch& batch,
                       const PairDraw& draw, const NoiseSchedule& schedule,
                       const LossConfig& cfg, const DecodeFn& decode_override) {
  cfg.validate();
  Assembly a = assemble(bundle, /*want_decoder=*/true, nullptr, decode_override);
  const PrefIds ids = simpo_pixel_node(a.tape, bundle.dn_config, a.dn, schedule, batch,
                                       draw, cfg.beta_dpo, a.decode);
  return seal(a, ids.loss, pref_diags(a.tape, ids, cfg.beta_dpo));
}

LossResult dpo_pixel(const ModelBundle& bundle, const ModelBundle& ref,
                     const PairBatch& batch, const PairDraw& draw,
                     const NoiseSchedule& schedule, const LossConfig& cfg,
                     const DecodeFn& decode_override) {
  cfg.validate();
  Assembly a = assemble(bundle, /*want_decoder=*/true, &ref, decode_override);
  const PrefIds ids = dpo_pixel_node(a.tape, bundle.dn_config, a.dn, a.ref, schedule,
                                     batch, draw, cfg.beta_dpo, a.decode);
  return seal(a, ids.loss, pref_diags(a.tape, ids, cfg.beta_dpo));
}

LossResult reward_combined(const ModelBundle& bundle, const ModelBundle* ref,
                           const PairBatch& batch, const PairDraw& draw,
                           const NoiseSchedule& schedule, const LossConfig& cfg,
                           RewardMode mode, const DecodeFn& decode_override) {
  cfg.validate();
  const bool wants_ref =
      mode == RewardMode::kDpoOnly || mode == RewardMode::kDpoDpoPixel ||
      mode == RewardMode::kDpoSimpoPixel;
  if (wants_ref && ref == nullptr) {
    throw ValueError(std::string("reward mode ") + reward_mode_name(mode) +
                     " needs a reference bundle");
  }

  auto tag = [&](LossResult r, float latent, float pixel) {
    r.diagnostics.emplace_back("latent", latent);
    r.diagnostics.emplace_back("pixel", pixel);
    r.diagnostics.emplace_back("mu", cfg.mu);
    return r;
  };

  // Zero pixel weight (or a latent-only mode) reduces to the latent
  // objective exactly: same graph, same bits.
  if (mode == RewardMode::kDpoOnly || cfg.mu == 0.0f) {
    LossResult r = wants_ref ? dpo_latent(bundle, *ref, batch, draw, schedule, cfg)
                             : simpo_latent(bundle, batch, draw, schedule, cfg);
    const float latent_value = r.value;
    return tag(std::move(r), latent_value, 0.0f);
  }

  Assembly a = assemble(bundle, /*want_decoder=*/true, ref, decode_override);
  const DenoiserConfig& dcfg = bundle.dn_config;
  PrefIds latent_ids;
  PrefIds pixel_ids;
  switch (mode) {
    case RewardMode::kDpoDpoPixel:
      latent_ids = dpo_latent_node(a.tape, dcfg, a.dn, a.ref, schedule, batch, draw,
                                   cfg.beta_dpo);
      pixel_ids = dpo_pixel_node(a.tape, dcfg, a.dn, a.ref, schedule, batch, draw,
                                 cfg.beta_dpo, a.decode);
      break;
    case RewardMode::kDpoSimpoPixel:
      latent_ids = dpo_latent_node(a.tape, dcfg, a.dn, a.ref, schedule, batch, draw,
                                   cfg.beta_dpo);
      pixel_ids = simpo_pixel_node(a.tape, dcfg, a.dn, schedule, batch, draw,
                                   cfg.beta_dpo, a.decode);
      break;
    case RewardMode::kSimpoSimpoPixel:
      latent_ids = simpo_latent_node(a.tape, dcfg, a.dn, schedule, batch, draw,
                                     cfg.beta_dpo);
      pixel_ids = simpo_pixel_node(a.tape, dcfg, a.dn, schedule, batch, draw,
                                   cfg.beta_dpo, a.decode);
      break;
    case RewardMode::kDpoOnly:
      break;  // handled above
  }
  const int32_t loss =
      a.tape.add(latent_ids.loss, a.tape.scale(pixel_ids.loss, cfg.mu));
  auto diags = pref_diags(a.tape, latent_ids, cfg.beta_dpo);
  diags.emplace_back("latent", a.tape.val(latent_ids.loss)[0]);
  diags.emplace_back("pixel", a.tape.val(pixel_ids.loss)[0]);
  diags.emplace_back("pixel_margin_mean", mean_of(a.tape, pixel_ids.margins));
  diags.emplace_back("mu", cfg.mu);
  return seal(a, loss, std::move(diags));
}

Tensor invert_forward(const Tensor& z_t, const Tensor& eps_hat, int t,
                      const NoiseSchedule& schedule) {
  const double ab = schedule.alpha_bar(t);
  if (ab < 1e-8) {
    throw ValueError("alpha_bar too small to invert the forward process");
  }
  if (eps_hat.shape != z_t.shape) {
    throw ShapeError("noise prediction " + Tensor::shape_str(eps_hat.shape) +
                     " vs z_t " + Tensor::shape_str(z_t.shape));
  }
  const float a = static_cast<float>(std::sqrt(ab));
  const float b = static_cast<float>(std::sqrt(1.0 - ab));
  Tensor z0 = Tensor::zeros(z_t.shape);
  for (int64_t i = 0; i < z_t.numel(); ++i) z0[i] = (z_t[i] - b * eps_hat[i]) / a;
  return z0;
}

Tensor x0_decode(const ModelBundle& bundle, const Tensor& z_t, int t,
                 const NoiseSchedule& schedule, std::vector<int> labels) {
  const int n = z_t.shape.at(0);
  if (labels.empty()) labels.assign(n, bundle.dn_config.null_class());
  const std::vector<int> ts(n, t);
  const Tensor eps_hat = predict_noise(bundle, z_t, ts, labels);
  return decode(bundle, invert_forward(z_t, eps_hat, t, schedule));
}

// --- Instantiations for the finite-difference oracle ------------------------

#define PIXELPOST_INSTANTIATE_LOSS_CORES(S)                                          \
  template int32_t sft_latent_node<S>(TapeT<S>&, const DenoiserConfig&,              \
                                      const NamedIds<S>&, const NoiseSchedule&,      \
                                      const SftBatch&, const NoiseDraw&);            \
  template int32_t sft_pixel_node<S>(TapeT<S>&, const DenoiserConfig&,               \
                                     const NamedIds<S>&, const NoiseSchedule&,       \
                                     const SftBatch&, const NoiseDraw&,              \
                                     const DecodeFnT<S>&);                           \
  template int32_t preference_nll_node<S>(TapeT<S>&, int32_t, double);               \
  template PrefIds dpo_latent_node<S>(TapeT<S>&, const DenoiserConfig&,              \
                                      const NamedIds<S>&, const NamedIds<S>&,        \
                                      const NoiseSchedule&, const PairBatch&,        \
                                      const PairDraw&, double);                      \
  template PrefIds simpo_latent_node<S>(TapeT<S>&, const DenoiserConfig&,            \
                                        const NamedIds<S>&, const NoiseSchedule&,    \
                                        const PairBatch&, const PairDraw&, double);  \
  template PrefIds simpo_pixel_node<S>(TapeT<S>&, const DenoiserConfig&,             \
                                       const NamedIds<S>&, const NoiseSchedule&,     \
                                       const PairBatch&, const PairDraw&, double,    \
                                       const DecodeFnT<S>&);                         \
  template PrefIds dpo_pixel_node<S>(TapeT<S>&, const DenoiserConfig&,               \
                                     const NamedIds<S>&, const NamedIds<S>&,         \
                                     const NoiseSchedule&, const PairBatch&,         \
                                     const PairDraw&, double, const DecodeFnT<S>&);

PIXELPOST_INSTANTIATE_LOSS_CORES(float)
PIXELPOST_INSTANTIATE_LOSS_CORES(double)
#undef PIXELPOST_INSTANTIATE_LOSS_CORES

}  // namespace pixelpost
