// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <string>
#include <vector>

#include "doctest.h"
#include "pixelpost/gradcheck.hpp"
#include "pixelpost/losses.hpp"
#include "test_util.hpp"

using namespace pixelpost;
using namespace pixelpost::testutil;

namespace {

constexpr double kLn2 = 0.6931471805599453;

// Tiny geometry shared by the loss tests: 16x16 images, 2x2x4 latents.
AutoencoderConfig loss_ae_cfg() {
  AutoencoderConfig cfg;
  cfg.image_size = 16;
  cfg.base_width = 8;
  return cfg;
}

DenoiserConfig loss_dn_cfg() {
  DenoiserConfig cfg;
  cfg.latent_channels = 4;
  cfg.latent_size = 2;
  cfg.num_classes = 3;
  cfg.time_embed_dim = 8;
  cfg.depth = 2;
  cfg.width = 16;
  cfg.heads = 2;
  return cfg;
}

void perturb(ParamStore& store, Rng& rng, float std) {
  for (int s = 0; s < store.size(); ++s) {
    for (auto& v : store.at(s).data) v += std * static_cast<float>(rng.normal());
  }
}

// A bundle in the post-training configuration: frozen autoencoder, trainable
// denoiser. perturb_std > 0 gives the zero-initialized output head real
// weights so predictions are non-trivial.
ModelBundle make_loss_bundle(uint64_t seed, float perturb_std) {
  ModelBundle b = make_bundle(loss_ae_cfg(), loss_dn_cfg(), linear_schedule(), seed);
  b.ae_frozen = true;
  if (perturb_std > 0.0f) {
    Rng rng(seed ^ 0x9e3779b97f4a7c15ull);
    perturb(b.dn, rng, perturb_std);
  }
  return b;
}

SftBatch make_sft_batch(Rng& rng, int n, float scale = 1.0f) {
  SftBatch batch;
  batch.z0 = rand_tensor(rng, {n, 4, 2, 2}, scale);
  for (int i = 0; i < n; ++i) batch.labels.push_back(static_cast<int>(rng.uniform_int(4)));
  return batch;
}

PairBatch make_pair_batch(Rng& rng, int n, float scale = 1.0f) {
  PairBatch batch;
  batch.zw = rand_tensor(rng, {n, 4, 2, 2}, scale);
  batch.zl = rand_tensor(rng, {n, 4, 2, 2}, scale);
  for (int i = 0; i < n; ++i) batch.labels.push_back(static_cast<int>(rng.uniform_int(4)));
  return batch;
}

// Elementwise mean of (a-b)^2 accumulated in double: the reference reduction
// used by the straight-line oracles.
double manual_mse(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    s += (static_cast<double>(a[i]) - b[i]) * (static_cast<double>(a[i]) - b[i]);
  }
  return s / static_cast<double>(a.numel());
}

// -log sigmoid(-beta * margin) in double.
double manual_pref_nll(double margin, double beta) {
  return std::log1p(std::exp(beta * margin));
}

const DecodeFn kIdentityDecode = [](TapeT<float>& tape, int32_t z) {
  (void)tape;
  return z;
};

}  // namespace

// --------------------------------------------------------------------------
// Latent supervised objective.

TEST_CASE("latent sft loss vanishes when the prediction equals the noise") {
  // A fresh denoiser has a zero-initialized head, so its prediction is the
  // zero tensor; a zero noise draw then makes prediction and noise agree
  // exactly and the loss must be exactly zero.
  ModelBundle b = make_loss_bundle(1, 0.0f);
  Rng rng(2);
  SftBatch batch = make_sft_batch(rng, 2);
  NoiseDraw draw{{100, 700}, Tensor::zeros({2, 4, 2, 2})};
  LossResult r = sft_latent(b, batch, draw, b.schedule);
  CHECK(r.value == 0.0f);
}

TEST_CASE("latent sft loss against a zero predictor is the noise power") {
  ModelBundle b = make_loss_bundle(3, 0.0f);
  Rng rng(4);
  SftBatch batch = make_sft_batch(rng, 16);
  NoiseDraw draw = draw_noise(b.schedule, batch.z0.shape, rng);
  LossResult r = sft_latent(b, batch, draw, b.schedule);
  const double pw = manual_mse(draw.eps, Tensor::zeros(draw.eps.shape));
  CHECK(r.value == doctest::Approx(pw).epsilon(1e-6));
  CHECK(r.value == doctest::Approx(1.0).epsilon(0.15));  // unit-variance noise
}

TEST_CASE("latent sft loss matches a straight-line reimplementation") {
  ModelBundle b = make_loss_bundle(5, 0.05f);
  Rng rng(6);
  SftBatch batch = make_sft_batch(rng, 1);
  NoiseDraw draw = draw_noise(b.schedule, batch.z0.shape, rng);
  LossResult r = sft_latent(b, batch, draw, b.schedule);

  const Tensor zt = q_sample_batch(b.schedule, batch.z0, draw.ts, draw.eps);
  const Tensor pred = predict_noise(b, zt, draw.ts, batch.labels);
  CHECK(r.value == doctest::Approx(manual_mse(draw.eps, pred)).epsilon(1e-6));
}

// --------------------------------------------------------------------------
// Pixel supervised objective.

TEST_CASE("pixel sft loss vanishes when both decoder inputs coincide") {
  ModelBundle b = make_loss_bundle(7, 0.0f);
  Rng rng(8);
  SftBatch batch = make_sft_batch(rng, 2);
  NoiseDraw draw{{50, 300}, Tensor::zeros({2, 4, 2, 2})};
  LossResult r = sft_pixel(b, batch, draw, b.schedule);
  CHECK(r.value == 0.0f);
}

TEST_CASE("identity decoder turns the pixel sft loss into a scaled latent loss") {
  ModelBundle b = make_loss_bundle(9, 0.05f);
  Rng rng(10);
  SftBatch batch = make_sft_batch(rng, 2);
  const int t = 400;
  NoiseDraw draw{{t, t}, rng.normal_tensor({2, 4, 2, 2})};

  LossResult pixel = sft_pixel(b, batch, draw, b.schedule, kIdentityDecode);
  LossResult latent = sft_latent(b, batch, draw, b.schedule);
  const double want = (1.0 - b.schedule.alpha_bar(t)) * latent.value;
  CHECK(pixel.value == doctest::Approx(want).epsilon(1e-5));
}

TEST_CASE("linear decoder pixel sft loss matches the direct channel-mix formula") {
  ModelBundle b = make_loss_bundle(11, 0.05f);
  Rng rng(12);
  SftBatch batch = make_sft_batch(rng, 1);
  const int t = 250;
  NoiseDraw draw{{t}, rng.normal_tensor({1, 4, 2, 2})};

  // Fixed 1x1-conv channel mix: out[f] = sum_c A[f][c] * in[c] per position.
  Tensor aw = rand_tensor(rng, {3, 4, 1, 1});
  DecodeFn linear = [aw](TapeT<float>& tape, int32_t z) {
    return tape.conv2d(z, tape.constant(aw), tape.constant(Tensor::zeros({3})), 1, 0);
  };
  LossResult r = sft_pixel(b, batch, draw, b.schedule, linear);

  const Tensor zt = q_sample_batch(b.schedule, batch.z0, draw.ts, draw.eps);
  const Tensor pred = predict_noise(b, zt, draw.ts, batch.labels);
  // Direct formula: (1 - alpha_bar) * mean over mixed channels of
  // (A (eps - pred))^2, evaluated without any graph machinery.
  const double one_minus_ab = 1.0 - b.schedule.alpha_bar(t);
  double acc = 0.0;
  for (int f = 0; f < 3; ++f) {
    for (int h = 0; h < 2; ++h) {
      for (int w = 0; w < 2; ++w) {
        double mix = 0.0;
        for (int c = 0; c < 4; ++c) {
          const int64_t i = (c * 2 + h) * 2 + w;
          mix += static_cast<double>(aw[f * 4 + c]) * (draw.eps[i] - pred[i]);
        }
        acc += one_minus_ab * mix * mix;
      }
    }
  }
  const double want = acc / (3.0 * 2.0 * 2.0);
  CHECK(r.value == doctest::Approx(want).epsilon(1e-5));
}

// --------------------------------------------------------------------------
// Combined supervised objective.

TEST_CASE("zero pixel weight reduces the combined sft loss to the latent one") {
  ModelBundle b = make_loss_bundle(13, 0.05f);
  Rng rng(14);
  SftBatch batch = make_sft_batch(rng, 2);
  NoiseDraw draw = draw_noise(b.schedule, batch.z0.shape, rng);
  LossConfig cfg;
  cfg.lambda = 0.0f;
  LossResult combined = sft_combined(b, batch, draw, b.schedule, cfg);
  LossResult latent = sft_latent(b, batch, draw, b.schedule);
  CHECK(combined.value == latent.value);  // bit-level
}

TEST_CASE("combined sft loss is the weighted sum with additive gradients") {
  ModelBundle b = make_loss_bundle(15, 0.05f);
  Rng rng(16);
  SftBatch batch = make_sft_batch(rng, 2);
  NoiseDraw draw = draw_noise(b.schedule, batch.z0.shape, rng);
  LossConfig cfg;  // lambda = 8 default

  LossResult combined = sft_combined(b, batch, draw, b.schedule, cfg);
  LossResult latent = sft_latent(b, batch, draw, b.schedule);
  LossResult pixel = sft_pixel(b, batch, draw, b.schedule);
  CHECK(combined.value ==
        doctest::Approx(latent.value + 8.0 * pixel.value).epsilon(1e-6));
  CHECK(diagnostic(combined, "latent") == doctest::Approx(latent.value).epsilon(1e-6));
  CHECK(diagnostic(combined, "pixel") == doctest::Approx(pixel.value).epsilon(1e-6));

  const Tensor seed = Tensor::full({1}, 1.0f);
  std::vector<Tensor> gc = gradient(combined.trace, seed);
  std::vector<Tensor> gl = gradient(latent.trace, seed);
  std::vector<Tensor> gp = gradient(pixel.trace, seed);
  REQUIRE(gc.size() == gl.size());
  REQUIRE(gc.size() == gp.size());
  double gmax = 0.0;
  for (const Tensor& g : gc) {
    for (float v : g.data) gmax = std::max(gmax, static_cast<double>(std::abs(v)));
  }
  for (size_t i = 0; i < gc.size(); ++i) {
    for (int64_t j = 0; j < gc[i].numel(); ++j) {
      const double want = static_cast<double>(gl[i][j]) + 8.0 * gp[i][j];
      const double got = gc[i][j];
      const double tol = 1e-5 * std::max({std::abs(got), std::abs(want), 1e-2 * gmax});
      REQUIRE(std::abs(got - want) <= tol);
    }
  }
}

// --------------------------------------------------------------------------
// Preference objectives: closed forms and equivalences.

TEST_CASE("preference losses sit at ln 2 when the margin is exactly zero") {
  ModelBundle b = make_loss_bundle(17, 0.05f);
  ModelBundle ref = clone_frozen(b);
  Rng rng(18);
  PairBatch batch = make_pair_batch(rng, 3);
  PairDraw draw = draw_pair_noise(b.schedule, batch.zw.shape, rng, false);
  LossConfig cfg;  // beta = 500 default

  // Reference equal to the policy: both deltas vanish identically.
  LossResult dpo = dpo_latent(b, ref, batch, draw, b.schedule, cfg);
  CHECK(dpo.value == doctest::Approx(kLn2).epsilon(1e-6));
  LossResult dpp = dpo_pixel(b, ref, batch, draw, b.schedule, cfg);
  CHECK(dpp.value == doctest::Approx(kLn2).epsilon(1e-6));

  // Identical winner and loser inputs: zero margin without any reference.
  PairBatch same = batch;
  same.zl = same.zw;
  PairDraw same_draw = draw;
  same_draw.eps_l = same_draw.eps_w;
  LossResult simpo = simpo_latent(b, same, same_draw, b.schedule, cfg);
  CHECK(simpo.value == doctest::Approx(kLn2).epsilon(1e-6));
  LossResult spp = simpo_pixel(b, same, same_draw, b.schedule, cfg);
  CHECK(spp.value == doctest::Approx(kLn2).epsilon(1e-6));
}

TEST_CASE("vanishing temperature flattens the dpo loss to ln 2") {
  ModelBundle b = make_loss_bundle(19, 0.1f);
  ModelBundle ref = make_loss_bundle(20, 0.1f);  // a genuinely different model
  ref = clone_frozen(ref);
  Rng rng(21);
  PairBatch batch = make_pair_batch(rng, 2);
  PairDraw draw = draw_pair_noise(b.schedule, batch.zw.shape, rng, false);
  LossConfig cfg;
  cfg.beta_dpo = 1e-9f;
  LossResult r = dpo_latent(b, ref, batch, draw, b.schedule, cfg);
  CHECK(r.value == doctest::Approx(kLn2).epsilon(1e-5));
}

TEST_CASE("hand-built unit margin reproduces the dpo closed form") {
  // Latents with two elements make every residual mean exact in float:
  // policy predicts 0 (zero head), the reference predicts 1 (bias-only head).
  // Winner noise {0,0}: delta_w = 0 - 1 = -1. Loser noise {1,0}: residuals
  // 0.5 both -> delta_l = 0. Margin -1 at beta=1 gives -log sigma(1).
  DenoiserConfig dcfg = loss_dn_cfg();
  dcfg.latent_channels = 2;
  dcfg.latent_size = 1;
  AutoencoderConfig acfg = loss_ae_cfg();
  ModelBundle b = make_bundle(acfg, dcfg, linear_schedule(), 22);
  b.ae_frozen = true;
  ModelBundle ref = clone_frozen(b);
  for (auto& v : ref.dn.at("dit.out.b").data) v = 1.0f;

  PairBatch batch;
  Rng rng(23);
  batch.zw = rand_tensor(rng, {1, 2, 1, 1});
  batch.zl = rand_tensor(rng, {1, 2, 1, 1});
  batch.labels = {0};
  PairDraw draw;
  draw.ts = {5};
  draw.eps_w = Tensor::from_vector({1, 2, 1, 1}, {0.0f, 0.0f});
  draw.eps_l = Tensor::from_vector({1, 2, 1, 1}, {1.0f, 0.0f});
  LossConfig cfg;
  cfg.beta_dpo = 1.0f;

  LossResult r = dpo_latent(b, ref, batch, draw, b.schedule, cfg);
  CHECK(diagnostic(r, "margin_mean") == doctest::Approx(-1.0).epsilon(1e-7));
  CHECK(r.value == doctest::Approx(std::log1p(std::exp(-1.0))).epsilon(1e-6));
}

TEST_CASE("a reference with matched side residuals makes dpo equal simpo") {
  // Zero-output reference gives reference residuals mean(eps^2); choosing the
  // loser noise as a permutation of the winner noise makes those equal, so
  // the reference contribution cancels out of the margin.
  DenoiserConfig dcfg = loss_dn_cfg();
  dcfg.latent_channels = 2;
  dcfg.latent_size = 1;
  ModelBundle b = make_bundle(loss_ae_cfg(), dcfg, linear_schedule(), 24);
  b.ae_frozen = true;
  Rng rng(25);
  perturb(b.dn, rng, 0.05f);
  ModelBundle ref = make_bundle(loss_ae_cfg(), dcfg, linear_schedule(), 26);
  ref = clone_frozen(ref);  // fresh init: exact zero output

  PairBatch batch;
  batch.zw = rand_tensor(rng, {1, 2, 1, 1});
  batch.zl = rand_tensor(rng, {1, 2, 1, 1});
  batch.labels = {1};
  PairDraw draw;
  draw.ts = {40};
  draw.eps_w = Tensor::from_vector({1, 2, 1, 1}, {0.7f, -1.3f});
  draw.eps_l = Tensor::from_vector({1, 2, 1, 1}, {-1.3f, 0.7f});
  LossConfig cfg;
  cfg.beta_dpo = 3.0f;

  LossResult dpo = dpo_latent(b, ref, batch, draw, b.schedule, cfg);
  LossResult simpo = simpo_latent(b, batch, draw, b.schedule, cfg);
  CHECK(dpo.value == doctest::Approx(simpo.value).epsilon(1e-6));
}

TEST_CASE("shrinking the winner residual strictly lowers the simpo loss") {
  ModelBundle b = make_loss_bundle(27, 0.0f);  // zero predictor
  Rng rng(28);
  PairBatch batch = make_pair_batch(rng, 1);
  PairDraw small, big;
  small.ts = big.ts = {300};
  small.eps_l = big.eps_l = rng.normal_tensor({1, 4, 2, 2});
  Tensor base = rng.normal_tensor({1, 4, 2, 2});
  small.eps_w = base;
  for (auto& v : small.eps_w.data) v *= 0.5f;
  big.eps_w = base;
  LossConfig cfg;
  cfg.beta_dpo = 2.0f;
  LossResult lo = simpo_latent(b, batch, small, b.schedule, cfg);
  LossResult hi = simpo_latent(b, batch, big, b.schedule, cfg);
  CHECK(lo.value < hi.value);
}

TEST_CASE("identity decoder relates the pixel and latent preference losses") {
  // With decode = identity each pixel residual is (1 - alpha_bar_t) times the
  // latent residual, so the pixel loss at temperature beta equals the latent
  // loss at temperature beta * (1 - alpha_bar_t) when pairs share t.
  ModelBundle b = make_loss_bundle(29, 0.08f);
  ModelBundle ref = make_loss_bundle(30, 0.08f);
  ref = clone_frozen(ref);
  Rng rng(31);
  PairBatch batch = make_pair_batch(rng, 2);
  const int t = 350;
  PairDraw draw;
  draw.ts = {t, t};
  draw.eps_w = rng.normal_tensor({2, 4, 2, 2});
  draw.eps_l = rng.normal_tensor({2, 4, 2, 2});

  LossConfig pix_cfg;
  pix_cfg.beta_dpo = 4.0f;
  LossConfig lat_cfg;
  lat_cfg.beta_dpo =
      static_cast<float>(4.0 * (1.0 - b.schedule.alpha_bar(t)));

  LossResult sp = simpo_pixel(b, batch, draw, b.schedule, pix_cfg, kIdentityDecode);
  LossResult sl = simpo_latent(b, batch, draw, b.schedule, lat_cfg);
  CHECK(sp.value == doctest::Approx(sl.value).epsilon(1e-5));

  LossResult dp = dpo_pixel(b, ref, batch, draw, b.schedule, pix_cfg, kIdentityDecode);
  LossResult dl = dpo_latent(b, ref, batch, draw, b.schedule, lat_cfg);
  CHECK(dp.value == doctest::Approx(dl.value).epsilon(1e-5));
}

TEST_CASE("pixel preference losses match straight-line reimplementations") {
  ModelBundle b = make_loss_bundle(33, 0.08f);
  ModelBundle ref = make_loss_bundle(34, 0.08f);
  ref = clone_frozen(ref);
  Rng rng(35);
  PairBatch batch = make_pair_batch(rng, 1);
  const int t = 500;
  PairDraw draw;
  draw.ts = {t};
  draw.eps_w = rng.normal_tensor({1, 4, 2, 2});
  draw.eps_l = rng.normal_tensor({1, 4, 2, 2});
  LossConfig cfg;
  cfg.beta_dpo = 6.0f;

  // Pixel residual of one side for one model, assembled step by step through
  // the public inference functions only.
  auto side = [&](const ModelBundle& model, const Tensor& z, const Tensor& eps) {
    const Tensor zt = q_sample(b.schedule, z, t, eps);
    const Tensor pred = predict_noise(model, zt, {t}, batch.labels);
    const float a = static_cast<float>(b.schedule.sqrt_alpha_bar(t));
    const float bb = static_cast<float>(b.schedule.sqrt_one_minus_alpha_bar(t));
    Tensor swapped = Tensor::zeros(z.shape);
    for (int64_t i = 0; i < z.numel(); ++i) swapped[i] = a * z[i] + bb * pred[i];
    return manual_mse(decode(b, zt), decode(b, swapped));
  };

  const double pw = side(b, batch.zw, draw.eps_w);
  const double pl = side(b, batch.zl, draw.eps_l);
  LossResult sp = simpo_pixel(b, batch, draw, b.schedule, cfg);
  CHECK(sp.value == doctest::Approx(manual_pref_nll(pw - pl, 6.0)).epsilon(1e-6));

  const double rw = side(ref, batch.zw, draw.eps_w);
  const double rl = side(ref, batch.zl, draw.eps_l);
  LossResult dp = dpo_pixel(b, ref, batch, draw, b.schedule, cfg);
  CHECK(dp.value ==
        doctest::Approx(manual_pref_nll((pw - rw) - (pl - rl), 6.0)).epsilon(1e-6));
}

// --------------------------------------------------------------------------
// Combined preference objective.

TEST_CASE("reward modes reduce, combine, and reject as specified") {
  ModelBundle b = make_loss_bundle(37, 0.08f);
  ModelBundle ref = make_loss_bundle(38, 0.08f);
  ref = clone_frozen(ref);
  Rng rng(39);
  PairBatch batch = make_pair_batch(rng, 2);
  PairDraw draw = draw_pair_noise(b.schedule, batch.zw.shape, rng, false);
  LossConfig cfg;
  cfg.beta_dpo = 4.0f;

  // mu = 0 reduces to the latent term bit for bit.
  LossConfig mu0 = cfg;
  mu0.mu = 0.0f;
  CHECK(reward_combined(b, nullptr, batch, draw, b.schedule, mu0,
                        RewardMode::kSimpoSimpoPixel)
            .value == simpo_latent(b, batch, draw, b.schedule, mu0).value);

  // dpoOnly ignores the pixel weight entirely.
  CHECK(reward_combined(b, &ref, batch, draw, b.schedule, cfg, RewardMode::kDpoOnly)
            .value == dpo_latent(b, ref, batch, draw, b.schedule, cfg).value);

  // The mixed mode is the weighted sum of its two published parts.
  LossResult mixed = reward_combined(b, &ref, batch, draw, b.schedule, cfg,
                                     RewardMode::kDpoSimpoPixel);
  const float want = dpo_latent(b, ref, batch, draw, b.schedule, cfg).value +
                     cfg.mu * simpo_pixel(b, batch, draw, b.schedule, cfg).value;
  CHECK(mixed.value == doctest::Approx(want).epsilon(1e-6));

  LossResult both = reward_combined(b, &ref, batch, draw, b.schedule, cfg,
                                    RewardMode::kDpoDpoPixel);
  const float want2 = dpo_latent(b, ref, batch, draw, b.schedule, cfg).value +
                      cfg.mu * dpo_pixel(b, ref, batch, draw, b.schedule, cfg).value;
  CHECK(both.value == doctest::Approx(want2).epsilon(1e-6));

  // Reference-based modes demand a reference.
  for (RewardMode mode : {RewardMode::kDpoOnly, RewardMode::kDpoDpoPixel,
                          RewardMode::kDpoSimpoPixel}) {
    CHECK_THROWS_AS(reward_combined(b, nullptr, batch, draw, b.schedule, cfg, mode),
                    ValueError);
  }
}

TEST_CASE("combined reward gradients are the weighted sum of the parts") {
  ModelBundle b = make_loss_bundle(41, 0.08f);
  Rng rng(42);
  PairBatch batch = make_pair_batch(rng, 1);
  PairDraw draw = draw_pair_noise(b.schedule, batch.zw.shape, rng, false);
  LossConfig cfg;
  cfg.beta_dpo = 2.0f;
  cfg.mu = 8.0f;

  LossResult combined = reward_combined(b, nullptr, batch, draw, b.schedule, cfg,
                                        RewardMode::kSimpoSimpoPixel);
  LossResult latent = simpo_latent(b, batch, draw, b.schedule, cfg);
  LossResult pixel = simpo_pixel(b, batch, draw, b.schedule, cfg);
  const Tensor seed = Tensor::full({1}, 1.0f);
  std::vector<Tensor> gc = gradient(combined.trace, seed);
  std::vector<Tensor> gl = gradient(latent.trace, seed);
  std::vector<Tensor> gp = gradient(pixel.trace, seed);
  REQUIRE(gc.size() == gl.size());
  REQUIRE(gc.size() == gp.size());
  double gmax = 0.0;
  for (const Tensor& g : gc) {
    for (float v : g.data) gmax = std::max(gmax, static_cast<double>(std::abs(v)));
  }
  for (size_t i = 0; i < gc.size(); ++i) {
    for (int64_t j = 0; j < gc[i].numel(); ++j) {
      const double want = static_cast<double>(gl[i][j]) + 8.0 * gp[i][j];
      const double got = gc[i][j];
      const double tol = 1e-5 * std::max({std::abs(got), std::abs(want), 1e-2 * gmax});
      REQUIRE(std::abs(got - want) <= tol);
    }
  }
}

// --------------------------------------------------------------------------
// Inversion-based decode path.

TEST_CASE("decoding the inverted forward process recovers the clean decode") {
  // Zero predictor and zero noise: z_t = sqrt(alpha_bar) z0 and the inversion
  // divides the factor back out, so the result is decode(z0) up to rounding.
  ModelBundle b = make_loss_bundle(43, 0.0f);
  Rng rng(44);
  Tensor z0 = rand_tensor(rng, {1, 4, 2, 2});
  const int t = 600;
  const Tensor zt = q_sample(b.schedule, z0, t, Tensor::zeros(z0.shape));
  Tensor direct = decode(b, z0);
  Tensor inverted = x0_decode(b, zt, t, b.schedule);
  REQUIRE(inverted.shape == direct.shape);
  for (int64_t i = 0; i < direct.numel(); ++i) {
    REQUIRE(inverted[i] == doctest::Approx(direct[i]).epsilon(1e-4));
  }
}

TEST_CASE("at tiny timesteps the inverted decode approaches the plain decode") {
  ModelBundle b = make_loss_bundle(45, 0.05f);
  Rng rng(46);
  Tensor zt = rand_tensor(rng, {1, 4, 2, 2});
  Tensor a = x0_decode(b, zt, 1, b.schedule);
  Tensor d = decode(b, zt);
  double max_diff = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    max_diff = std::max(max_diff, std::abs(static_cast<double>(a[i]) - d[i]));
  }
  CHECK(max_diff <= 1e-2);
}

TEST_CASE("the inversion guard rejects schedules noised past recovery") {
  ModelBundle b = make_loss_bundle(47, 0.0f);
  NoiseSchedule deep = linear_schedule(3000, 1e-4, 0.02);
  Tensor zt = Tensor::zeros({1, 4, 2, 2});
  CHECK(deep.alpha_bar(3000) < 1e-8);
  CHECK_THROWS_AS(x0_decode(b, zt, 3000, deep), ValueError);
  CHECK_NOTHROW(x0_decode(b, zt, 1000, deep));
}

TEST_CASE("inverted-decode variance across noise draws grows with the timestep") {
  ModelBundle b = make_loss_bundle(49, 0.05f);
  Rng rng(50);
  Tensor z0 = rand_tensor(rng, {1, 4, 2, 2});
  const std::vector<int> ts = {100, 200, 300, 400, 500, 600, 700, 800, 900};
  const int kDraws = 100;

  std::vector<double> variances;
  for (int t : ts) {
    // Pooled per-pixel variance of the decoded estimate across draws.
    std::vector<Tensor> decoded;
    decoded.reserve(kDraws);
    for (int d = 0; d < kDraws; ++d) {
      Rng draw_rng = Rng::derive(0xd0e, static_cast<uint64_t>(t), static_cast<uint64_t>(d));
      Tensor eps = draw_rng.normal_tensor(z0.shape);
      decoded.push_back(x0_decode(b, q_sample(b.schedule, z0, t, eps), t, b.schedule));
    }
    const int64_t n = decoded[0].numel();
    double pooled = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      double mean = 0.0, sq = 0.0;
      for (const Tensor& img : decoded) {
        mean += img[i];
        sq += static_cast<double>(img[i]) * img[i];
      }
      mean /= kDraws;
      pooled += sq / kDraws - mean * mean;
    }
    variances.push_back(pooled / static_cast<double>(n));
  }

  // Spearman rank correlation against the timestep order.
  auto ranks = [](const std::vector<double>& v) {
    std::vector<double> r(v.size());
    for (size_t i = 0; i < v.size(); ++i) {
      for (size_t j = 0; j < v.size(); ++j) {
        if (v[j] < v[i]) r[i] += 1.0;
      }
    }
    return r;
  };
  const std::vector<double> rv = ranks(variances);
  double d2 = 0.0;
  for (size_t i = 0; i < rv.size(); ++i) {
    const double d = rv[i] - static_cast<double>(i);
    d2 += d * d;
  }
  const double n = static_cast<double>(rv.size());
  const double rho = 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
  CHECK_MESSAGE(rho > 0.9, "rank correlation " << rho);
}

// --------------------------------------------------------------------------
// Cross-cutting invariants.

TEST_CASE("losses are non-negative and deterministic on random inputs") {
  ModelBundle b = make_loss_bundle(51, 0.1f);
  ModelBundle ref = make_loss_bundle(52, 0.1f);
  ref = clone_frozen(ref);
  Rng rng(53);
  SftBatch sft = make_sft_batch(rng, 2);
  NoiseDraw nd = draw_noise(b.schedule, sft.z0.shape, rng);
  PairBatch pair = make_pair_batch(rng, 2);
  PairDraw pd = draw_pair_noise(b.schedule, pair.zw.shape, rng, false);
  LossConfig cfg;
  cfg.beta_dpo = 3.0f;

  auto values = [&]() {
    return std::vector<float>{
        sft_latent(b, sft, nd, b.schedule).value,
        sft_pixel(b, sft, nd, b.schedule).value,
        sft_combined(b, sft, nd, b.schedule, cfg).value,
        dpo_latent(b, ref, pair, pd, b.schedule, cfg).value,
        simpo_latent(b, pair, pd, b.schedule, cfg).value,
        simpo_pixel(b, pair, pd, b.schedule, cfg).value,
        dpo_pixel(b, ref, pair, pd, b.schedule, cfg).value,
        reward_combined(b, &ref, pair, pd, b.schedule, cfg, RewardMode::kDpoSimpoPixel)
            .value,
    };
  };
  const std::vector<float> first = values();
  for (size_t i = 0; i < 3; ++i) CHECK(first[i] >= 0.0f);
  for (size_t i = 3; i < first.size(); ++i) CHECK(first[i] > 0.0f);
  CHECK(first == values());  // bitwise determinism
}

TEST_CASE("pair draws share noise only when asked to") {
  NoiseSchedule s = linear_schedule(50, 0.01, 0.1);
  Rng rng(54);
  PairDraw indep = draw_pair_noise(s, {2, 4, 2, 2}, rng, false);
  CHECK_FALSE(bits_equal(indep.eps_w, indep.eps_l));
  PairDraw shared = draw_pair_noise(s, {2, 4, 2, 2}, rng, true);
  CHECK(bits_equal(shared.eps_w, shared.eps_l));
}

TEST_CASE("batch and draw mismatches are rejected") {
  ModelBundle b = make_loss_bundle(55, 0.0f);
  Rng rng(56);
  SftBatch batch = make_sft_batch(rng, 2);
  NoiseDraw draw = draw_noise(b.schedule, batch.z0.shape, rng);

  NoiseDraw bad_eps = draw;
  bad_eps.eps = Tensor::zeros({2, 4, 2, 3});
  CHECK_THROWS_AS(sft_latent(b, batch, bad_eps, b.schedule), ShapeError);
  NoiseDraw bad_ts = draw;
  bad_ts.ts = {1};
  CHECK_THROWS_AS(sft_latent(b, batch, bad_ts, b.schedule), ShapeError);

  PairBatch pair = make_pair_batch(rng, 2);
  PairDraw pd = draw_pair_noise(b.schedule, pair.zw.shape, rng, false);
  PairBatch bad_pair = pair;
  bad_pair.zl = Tensor::zeros({2, 4, 1, 2});
  LossConfig cfg;
  CHECK_THROWS_AS(simpo_latent(b, bad_pair, pd, b.schedule, cfg), ShapeError);

  LossConfig bad_cfg;
  bad_cfg.beta_dpo = 0.0f;
  CHECK_THROWS_AS(simpo_latent(b, pair, pd, b.schedule, bad_cfg), ValueError);
  bad_cfg = LossConfig{};
  bad_cfg.lambda = -1.0f;
  CHECK_THROWS_AS(sft_combined(b, batch, draw, b.schedule, bad_cfg), ValueError);
}

// --------------------------------------------------------------------------
// Finite-difference audits of every objective's gradient.

namespace {

struct LossGradCase {
  const char* name;
  std::function<GradCheckReport()> run;
};

}  // namespace

TEST_CASE("every objective's gradient passes the finite-difference oracle") {
  const AutoencoderConfig acfg = loss_ae_cfg();
  const DenoiserConfig dcfg = loss_dn_cfg();
  const NoiseSchedule sched = linear_schedule(100, 1e-3, 0.02);
  Rng rng(61);
  ParamStore dn = init_denoiser(dcfg, rng);
  perturb(dn, rng, 0.08f);
  Rng ref_rng(62);
  ParamStore ref_store = init_denoiser(dcfg, ref_rng);
  {
    Rng r2(63);
    perturb(ref_store, r2, 0.08f);
  }
  ParamStore ae = init_autoencoder(acfg, rng);

  SftBatch sft;
  sft.z0 = rand_tensor(rng, {2, 4, 2, 2});
  sft.labels = {1, 3};
  NoiseDraw nd;
  nd.ts = {20, 77};
  nd.eps = rng.normal_tensor({2, 4, 2, 2});
  PairBatch pair;
  pair.zw = rand_tensor(rng, {1, 4, 2, 2});
  pair.zl = rand_tensor(rng, {1, 4, 2, 2});
  pair.labels = {2};
  PairDraw pd;
  pd.ts = {35};
  pd.eps_w = rng.normal_tensor({1, 4, 2, 2});
  pd.eps_l = rng.normal_tensor({1, 4, 2, 2});
  const double beta = 2.0;
  const double mu = 4.0;

  std::vector<Tensor> params;
  for (int s = 0; s < dn.size(); ++s) params.push_back(dn.at(s));

  // Builds the real-decoder closure for the tape at hand.
  auto real_decode = [&](auto& tape) {
    using S = typename std::decay_t<decltype(tape)>::Scalar;
    NamedIds<S> ids = upload_store(tape, ae, /*trainable=*/false);
    return DecodeFnT<S>([&acfg, ids](TapeT<S>& t, int32_t z) {
      return decoder_graph(t, acfg, z, ids);
    });
  };

  std::vector<LossGradCase> cases;
  auto add_case = [&](const char* name, auto build) {
    auto fn = [&dn, build](auto& tape, const auto&, const auto& ids) {
      using S = typename std::decay_t<decltype(tape)>::Scalar;
      NamedIds<S> p{&dn, ids};
      return build(tape, p);
    };
    cases.push_back({name, [fn, &params]() {
                       return check_gradients(fn, fn, {}, params, 1e-4,
                                              /*samples_per_tensor=*/2);
                     }});
  };

  add_case("sft_latent", [&](auto& tape, const auto& p) {
    return sft_latent_node(tape, dcfg, p, sched, sft, nd);
  });
  add_case("sft_pixel", [&](auto& tape, const auto& p) {
    return sft_pixel_node(tape, dcfg, p, sched, sft, nd, real_decode(tape));
  });
  add_case("sft_combined", [&](auto& tape, const auto& p) {
    const int32_t latent = sft_latent_node(tape, dcfg, p, sched, sft, nd);
    const int32_t pixel = sft_pixel_node(tape, dcfg, p, sched, sft, nd, real_decode(tape));
    return tape.add(latent, tape.scale(pixel, 8.0));
  });
  add_case("dpo_latent", [&](auto& tape, const auto& p) {
    using S = typename std::decay_t<decltype(tape)>::Scalar;
    NamedIds<S> r = upload_store(tape, ref_store, false);
    return dpo_latent_node(tape, dcfg, p, r, sched, pair, pd, beta).loss;
  });
  add_case("simpo_latent", [&](auto& tape, const auto& p) {
    return simpo_latent_node(tape, dcfg, p, sched, pair, pd, beta).loss;
  });
  add_case("simpo_pixel", [&](auto& tape, const auto& p) {
    return simpo_pixel_node(tape, dcfg, p, sched, pair, pd, beta, real_decode(tape)).loss;
  });
  add_case("dpo_pixel", [&](auto& tape, const auto& p) {
    using S = typename std::decay_t<decltype(tape)>::Scalar;
    NamedIds<S> r = upload_store(tape, ref_store, false);
    return dpo_pixel_node(tape, dcfg, p, r, sched, pair, pd, beta, real_decode(tape)).loss;
  });
  add_case("reward_combined", [&](auto& tape, const auto& p) {
    using S = typename std::decay_t<decltype(tape)>::Scalar;
    NamedIds<S> r = upload_store(tape, ref_store, false);
    auto dec = real_decode(tape);
    const int32_t latent = dpo_latent_node(tape, dcfg, p, r, sched, pair, pd, beta).loss;
    const int32_t pixel =
        simpo_pixel_node(tape, dcfg, p, sched, pair, pd, beta, dec).loss;
    return tape.add(latent, tape.scale(pixel, mu));
  });

  for (const auto& c : cases) {
    const std::string label(c.name);
    CAPTURE(label);
    GradCheckReport rep = c.run();
    CHECK_MESSAGE(rep.ok(1e-3), label << ": max rel err " << rep.max_rel_err << " at "
                                      << rep.worst);
  }
}
