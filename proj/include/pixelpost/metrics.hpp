// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "pixelpost/data.hpp"
#include "pixelpost/models.hpp"
#include "pixelpost/sampler.hpp"
#include "pixelpost/tensor.hpp"

namespace pixelpost {

// Machine-checkable proxies for perceptual judgments: spectral
// high-frequency retention for "visual detail", reference MSE for "visual
// flaws", template classification for conditioning fidelity, and the
// variance profile of the inversion-based decode path.

// --- Radial power spectrum --------------------------------------------------

// Per-channel 2-D FFT after mean removal, magnitude squared, binned by
// integer radius in the signed frequency plane and averaged over channels.
// Bins 0..N/2 partition the Nyquist range; energy beyond the Nyquist radius
// (the square plane's corners) lands in the last bin.
struct SpectrumReport {
  std::vector<double> power;    // per-bin mean squared magnitude
  double total_energy = 0.0;    // sum |F|^2 / N^2 == pixel energy after mean removal
  double hf_energy_ratio = 0.0; // energy in the top third of bins / total energy
};

// First bin of the high-frequency band: the top floor(bins / 3) bins count
// as "high frequency". Fixed and documented; used only directionally.
int hf_band_start(int bins);

// image: [C, H, W] or [H, W], square. Throws ShapeError otherwise.
SpectrumReport radial_spectrum(const Tensor& image);

// Pooled spectrum over a set of same-sized images: per-bin mean of the
// per-image spectra, ratio computed from the pooled energies.
SpectrumReport aggregate_spectrum(const std::vector<Tensor>& images);

// Mean of the per-image hf_energy_ratio values.
double mean_hf_ratio(const std::vector<Tensor>& images);

// --- Template classification -------------------------------------------------

// Fixed nearest-template classifier over the pattern families: every
// template is one rendered pattern from the corpus parameter grids
// (mean-removed, unit-normalized grayscale). An image is assigned the family
// of the template with the largest absolute cosine similarity, which makes
// the classifier exact on pristine generator output (half-period shifts only
// flip the pattern's sign).
class TemplateBank {
 public:
  explicit TemplateBank(const CorpusSpec& spec);

  // pixels: [3, H, W] or [H, W]. Returns the best-matching family id.
  int classify(const Tensor& pixels) const;
  // The similarity score behind classify(), for diagnostics.
  double best_score(const Tensor& pixels) const;
  // Flaw proxy: per-pixel squared error between the unit-RMS grayscale and
  // its least-squares projection onto the family's closest template, i.e.
  // 1 - cos^2 of the best match. Scale-free, so palette and contrast do not
  // register as flaws while blur, noise, and pattern collapse do; a constant
  // image scores the maximal 1.0. Throws ValueError for an unknown family.
  double template_mse(const Tensor& pixels, int family) const;
  int size() const { return static_cast<int>(templates_.size()); }

 private:
  struct Entry {
    int family;
    Tensor gray;  // [H, W], mean-removed, L2-normalized
  };
  int match(const Tensor& pixels, double* score) const;

  int image_size_;
  std::vector<Entry> templates_;
};

// Fraction of images whose classified family equals the paired label.
double conditioning_accuracy(const TemplateBank& bank, const std::vector<Tensor>& images,
                             const std::vector<int>& labels);

// End-to-end conditioning fidelity: samples n_per_class images for every
// family with the deterministic sampler (derived per-sample seeds), then
// classifies them against the bank. Values below chance + 10 points signal
// an untrained or collapsed model; that is a reporting flag for callers, not
// an error here.
double conditioning_accuracy(const ModelBundle& bundle, const NoiseSchedule& schedule,
                             const SamplerConfig& sampler_cfg, const TemplateBank& bank,
                             int n_per_class, uint64_t seed);

// --- Inversion-decode variance profile ---------------------------------------

// Optional stand-in for the bundle's noise prediction; receives the drawn
// noise as well so exact-inversion references can echo it back.
using NoisePredictor = std::function<Tensor(const Tensor& z_t, int t, const Tensor& eps)>;

struct VarianceCurveRow {
  int t = 0;
  double mean_err = 0.0;  // mean over latents and draws of per-pixel MSE to decode(z0)
  double variance = 0.0;  // variance of that per-draw MSE statistic
};

// For each timestep: noise every latent `draws` times, decode through the
// forward-process inversion, and record the mean and variance of the
// per-pixel squared error against the clean decode. Draw d of latent i at
// timestep t uses the sub-stream (seed, t * 10007 + i, d).
std::vector<VarianceCurveRow> x0_variance_curve(const ModelBundle& bundle,
                                                const std::vector<Tensor>& latents,
                                                const std::vector<int>& ts, int draws,
                                                uint64_t seed,
                                                const NoisePredictor& predictor = {});

// Companion profile for the decode-at-t pathway: the same draws, but the
// error compared is between the decoded noisy latent and its
// prediction-swapped twin (sqrt(abar)*z0 + sqrt(1-abar)*eps_hat), i.e. the
// quantity the pixel-space supervision actually penalizes. Unlike the
// inversion path there is no 1/sqrt(abar) amplification, so the curve stays
// flat in t for any bounded predictor.
std::vector<VarianceCurveRow> decode_error_curve(const ModelBundle& bundle,
                                                 const std::vector<Tensor>& latents,
                                                 const std::vector<int>& ts, int draws,
                                                 uint64_t seed,
                                                 const NoisePredictor& predictor = {});

// Spearman rank correlation between paired observations; NaN-free inputs.
double spearman_rho(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace pixelpost
