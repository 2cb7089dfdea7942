// SPDX-License-Identifier: Apache-2.0
#include "pixelpost/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numeric>
#include <vector>

#include <unsupported/Eigen/FFT>

#include "pixelpost/losses.hpp"
#include "pixelpost/schedule.hpp"

namespace pixelpost {

namespace {

// Channel-mean grayscale view: [C, H, W] -> [H, W]; [H, W] passes through.
Tensor to_gray(const Tensor& image) {
  if (image.shape.size() == 2) return image;
  if (image.shape.size() == 3) {
    const int c = image.shape[0], h = image.shape[1], w = image.shape[2];
    Tensor g = Tensor::zeros({h, w});
    for (int ch = 0; ch < c; ++ch) {
      for (int64_t i = 0; i < static_cast<int64_t>(h) * w; ++i) {
        g[i] += image[ch * h * w + i];
      }
    }
    for (auto& v : g.data) v /= static_cast<float>(c);
    return g;
  }
  throw ShapeError("expected [H, W] or [C, H, W], got " + Tensor::shape_str(image.shape));
}

int square_side(const Tensor& image) {
  const auto& s = image.shape;
  if (s.size() == 2 && s[0] == s[1]) return s[0];
  if (s.size() == 3 && s[1] == s[2]) return s[1];
  throw ShapeError("spectrum wants a square image, got " + Tensor::shape_str(s));
}

// Full 2-D FFT of one mean-removed channel; row pass then column pass.
std::vector<std::complex<double>> fft2(const std::vector<double>& field, int n) {
  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> grid(static_cast<size_t>(n) * n);
  std::vector<std::complex<double>> in(n), out(n);
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) in[x] = field[y * n + x];
    fft.fwd(out, in);
    for (int x = 0; x < n; ++x) grid[y * n + x] = out[x];
  }
  for (int x = 0; x < n; ++x) {
    for (int y = 0; y < n; ++y) in[y] = grid[y * n + x];
    fft.fwd(out, in);
    for (int y = 0; y < n; ++y) grid[y * n + x] = out[y];
  }
  return grid;
}

struct BinnedSpectrum {
  std::vector<double> energy;  // per-bin summed |F|^2
  std::vector<int64_t> cells;  // per-bin cell count (summed over channels)
  double total = 0.0;          // all-bin energy
};

BinnedSpectrum bin_image(const Tensor& image) {
  const int n = square_side(image);
  const int channels = image.shape.size() == 3 ? image.shape[0] : 1;
  const int bins = n / 2 + 1;
  BinnedSpectrum b;
  b.energy.assign(bins, 0.0);
  b.cells.assign(bins, 0);

  for (int ch = 0; ch < channels; ++ch) {
    std::vector<double> field(static_cast<size_t>(n) * n);
    const float* base = image.data.data() +
                        (image.shape.size() == 3 ? static_cast<int64_t>(ch) * n * n : 0);
    double mean = 0.0;
    for (int64_t i = 0; i < static_cast<int64_t>(n) * n; ++i) mean += base[i];
    mean /= static_cast<double>(n) * n;
    for (int64_t i = 0; i < static_cast<int64_t>(n) * n; ++i) field[i] = base[i] - mean;

    const auto grid = fft2(field, n);
    for (int fy = 0; fy < n; ++fy) {
      const int sy = fy <= n / 2 ? fy : fy - n;
      for (int fx = 0; fx < n; ++fx) {
        const int sx = fx <= n / 2 ? fx : fx - n;
        // Integer radius; the square plane's corners clamp into the last bin.
        const int r =
            std::min(bins - 1, static_cast<int>(std::lround(std::hypot(sx, sy))));
        const double p = std::norm(grid[fy * n + fx]);
        b.energy[r] += p;
        b.cells[r] += 1;
        b.total += p;
      }
    }
  }
  // Normalize to pixel-energy units so Parseval reads directly.
  const double scale = 1.0 / (static_cast<double>(n) * n);
  for (auto& e : b.energy) e *= scale;
  b.total *= scale;
  return b;
}

SpectrumReport report_from(const BinnedSpectrum& b) {
  SpectrumReport rep;
  rep.power.resize(b.energy.size());
  for (size_t i = 0; i < b.energy.size(); ++i) {
    rep.power[i] = b.cells[i] > 0 ? b.energy[i] / static_cast<double>(b.cells[i]) : 0.0;
  }
  rep.total_energy = b.total;
  double hf = 0.0;
  for (size_t i = hf_band_start(static_cast<int>(b.energy.size())); i < b.energy.size();
       ++i) {
    hf += b.energy[i];
  }
  rep.hf_energy_ratio = b.total > 0.0 ? hf / b.total : 0.0;
  return rep;
}

}  // namespace

int hf_band_start(int bins) { return bins - bins / 3; }

SpectrumReport radial_spectrum(const Tensor& image) { return report_from(bin_image(image)); }

SpectrumReport aggregate_spectrum(const std::vector<Tensor>& images) {
  if (images.empty()) throw ValueError("aggregate_spectrum over an empty set");
  BinnedSpectrum pooled = bin_image(images[0]);
  for (size_t i = 1; i < images.size(); ++i) {
    BinnedSpectrum b = bin_image(images[i]);
    if (b.energy.size() != pooled.energy.size()) {
      throw ShapeError("aggregate_spectrum over mixed image sizes");
    }
    for (size_t k = 0; k < b.energy.size(); ++k) {
      pooled.energy[k] += b.energy[k];
      pooled.cells[k] += b.cells[k];
    }
    pooled.total += b.total;
  }
  return report_from(pooled);
}

double mean_hf_ratio(const std::vector<Tensor>& images) {
  if (images.empty()) throw ValueError("mean_hf_ratio over an empty set");
  double acc = 0.0;
  for (const Tensor& img : images) acc += radial_spectrum(img).hf_energy_ratio;
  return acc / static_cast<double>(images.size());
}

// --- Template classification -------------------------------------------------

TemplateBank::TemplateBank(const CorpusSpec& spec) : image_size_(spec.image_size) {
  spec.validate();
  auto add = [this](const GeneratorParams& p) {
    Tensor g = render_pattern(p, image_size_);
    double mean = 0.0;
    for (float v : g.data) mean += v;
    mean /= static_cast<double>(g.numel());
    double norm = 0.0;
    for (auto& v : g.data) {
      v -= static_cast<float>(mean);
      norm += static_cast<double>(v) * v;
    }
    if (norm <= 1e-12) return;  // degenerate (cannot happen for valid params)
    const float inv = static_cast<float>(1.0 / std::sqrt(norm));
    for (auto& v : g.data) v *= inv;
    templates_.push_back({p.family, std::move(g)});
  };

  for (int period = spec.period_min + (spec.period_min % 2); period <= spec.period_max;
       period += 2) {
    GeneratorParams p;
    p.period = period;
    p.contrast = 1.0f;
    // Checkerboard: every phase modulo the full period.  The shading ramp is
    // phase-independent, so a half-period shift is not a pure sign flip and
    // each phase needs its own template.
    p.family = kFamilyCheckerboard;
    for (int px = 0; px < period; ++px) {
      for (int py = 0; py < period; ++py) {
        p.phase_x = px;
        p.phase_y = py;
        add(p);
      }
    }
    p.phase_x = p.phase_y = 0;
    // Stripes: both orientations, every phase modulo the full period.
    p.family = kFamilyStripes;
    for (int orient = 0; orient < 2; ++orient) {
      p.orientation = orient;
      for (int ph = 0; ph < period; ++ph) {
        p.phase_x = orient == 1 ? ph : 0;
        p.phase_y = orient == 0 ? ph : 0;
        add(p);
      }
    }
    p.phase_x = p.phase_y = 0;
    p.orientation = 0;
    // Rings: the fixed center grid.
    p.family = kFamilyRings;
    for (int c = 0; c < kRingCenterCount; ++c) {
      p.center_dx = kRingCenterOffsets[c].first;
      p.center_dy = kRingCenterOffsets[c].second;
      add(p);
    }
    p.center_dx = p.center_dy = 0;
    // Gradient blobs: every fixed layout at this scale.
    p.family = kFamilyGradientBlobs;
    for (int layout = 0; layout < kBlobLayouts; ++layout) {
      p.layout = layout;
      add(p);
    }
  }
}

int TemplateBank::match(const Tensor& pixels, double* score) const {
  Tensor g = to_gray(pixels);
  if (g.shape[0] != image_size_ || g.shape[1] != image_size_) {
    throw ShapeError("classify wants " + std::to_string(image_size_) + "x" +
                     std::to_string(image_size_) + " images, got " +
                     Tensor::shape_str(pixels.shape));
  }
  double mean = 0.0;
  for (float v : g.data) mean += v;
  mean /= static_cast<double>(g.numel());
  double norm = 0.0;
  for (auto& v : g.data) {
    v -= static_cast<float>(mean);
    norm += static_cast<double>(v) * v;
  }
  if (norm <= 1e-12) {
    // A constant image matches nothing; report family 0 with zero confidence.
    if (score != nullptr) *score = 0.0;
    return 0;
  }
  const double inv = 1.0 / std::sqrt(norm);
  int best_family = 0;
  double best = -1.0;
  for (const Entry& e : templates_) {
    double dot = 0.0;
    for (int64_t i = 0; i < g.numel(); ++i) {
      dot += static_cast<double>(g[i]) * e.gray[i];
    }
    const double similarity = std::abs(dot) * inv;
    if (similarity > best) {
      best = similarity;
      best_family = e.family;
    }
  }
  if (score != nullptr) *score = best;
  return best_family;
}

int TemplateBank::classify(const Tensor& pixels) const { return match(pixels, nullptr); }

double TemplateBank::best_score(const Tensor& pixels) const {
  double score = 0.0;
  match(pixels, &score);
  return score;
}

double TemplateBank::template_mse(const Tensor& pixels, int family) const {
  Tensor g = to_gray(pixels);
  if (g.shape[0] != image_size_ || g.shape[1] != image_size_) {
    throw ShapeError("template_mse wants " + std::to_string(image_size_) + "x" +
                     std::to_string(image_size_) + " images, got " +
                     Tensor::shape_str(pixels.shape));
  }
  double mean = 0.0;
  for (float v : g.data) mean += v;
  mean /= static_cast<double>(g.numel());
  double norm = 0.0;
  for (auto& v : g.data) {
    v -= static_cast<float>(mean);
    norm += static_cast<double>(v) * v;
  }
  bool seen = false;
  double best_cos = 0.0;
  for (const Entry& e : templates_) {
    if (e.family != family) continue;
    seen = true;
    if (norm <= 1e-12) continue;  // flat image: no direction to project
    double dot = 0.0;
    for (int64_t i = 0; i < g.numel(); ++i) {
      dot += static_cast<double>(g[i]) * e.gray[i];
    }
    best_cos = std::max(best_cos, std::abs(dot) / std::sqrt(norm));
  }
  if (!seen) {
    throw ValueError("template_mse: no templates for family " + std::to_string(family));
  }
  return 1.0 - best_cos * best_cos;
}

double conditioning_accuracy(const TemplateBank& bank, const std::vector<Tensor>& images,
                             const std::vector<int>& labels) {
  if (images.size() != labels.size()) {
    throw ShapeError("conditioning_accuracy: images and labels disagree in length");
  }
  if (images.empty()) throw ValueError("conditioning_accuracy over an empty set");
  int hits = 0;
  for (size_t i = 0; i < images.size(); ++i) {
    if (bank.classify(images[i]) == labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(images.size());
}

double conditioning_accuracy(const ModelBundle& bundle, const NoiseSchedule& schedule,
                             const SamplerConfig& sampler_cfg, const TemplateBank& bank,
                             int n_per_class, uint64_t seed) {
  if (n_per_class < 1) throw ValueError("n_per_class must be >= 1");
  std::vector<int> labels;
  for (int family = 0; family < bundle.dn_config.num_classes; ++family) {
    for (int i = 0; i < n_per_class; ++i) labels.push_back(family);
  }
  const std::vector<Tensor> images =
      sample_batch(bundle, schedule, sampler_cfg, labels, seed);
  return conditioning_accuracy(bank, images, labels);
}

// --- Inversion-decode variance profile ---------------------------------------

std::vector<VarianceCurveRow> x0_variance_curve(const ModelBundle& bundle,
                                                const std::vector<Tensor>& latents,
                                                const std::vector<int>& ts, int draws,
                                                uint64_t seed,
                                                const NoisePredictor& predictor) {
  if (latents.empty()) throw ValueError("x0_variance_curve needs at least one latent");
  if (draws < 2) throw ValueError("x0_variance_curve needs at least two draws");

  // Normalize each latent to a batch of one and cache its clean decode.
  std::vector<Tensor> z0s;
  std::vector<Tensor> baselines;
  for (const Tensor& z : latents) {
    Tensor z0 = z;
    if (z0.shape.size() == 3) {
      z0.shape.insert(z0.shape.begin(), 1);
    }
    if (z0.shape.size() != 4 || z0.shape[0] != 1) {
      throw ShapeError("latents must be [C, H, W] or [1, C, H, W], got " +
                       Tensor::shape_str(z.shape));
    }
    baselines.push_back(decode(bundle, z0));
    z0s.push_back(std::move(z0));
  }

  const std::vector<int> null_label(1, bundle.dn_config.null_class());
  std::vector<VarianceCurveRow> rows;
  for (int t : ts) {
    std::vector<double> errs;
    errs.reserve(z0s.size() * static_cast<size_t>(draws));
    for (size_t i = 0; i < z0s.size(); ++i) {
      for (int d = 0; d < draws; ++d) {
        Rng rng = Rng::derive(seed, static_cast<uint64_t>(t) * 10007 + i,
                              static_cast<uint64_t>(d));
        const Tensor eps = rng.normal_tensor(z0s[i].shape);
        const Tensor z_t = q_sample(bundle.schedule, z0s[i], t, eps);
        const Tensor pred = predictor ? predictor(z_t, t, eps)
                                      : predict_noise(bundle, z_t, {t}, null_label);
        const Tensor decoded =
            decode(bundle, invert_forward(z_t, pred, t, bundle.schedule));
        double mse = 0.0;
        for (int64_t j = 0; j < decoded.numel(); ++j) {
          const double diff = static_cast<double>(decoded[j]) - baselines[i][j];
          mse += diff * diff;
        }
        errs.push_back(mse / static_cast<double>(decoded.numel()));
      }
    }
    VarianceCurveRow row;
    row.t = t;
    const double n = static_cast<double>(errs.size());
    for (double e : errs) row.mean_err += e;
    row.mean_err /= n;
    for (double e : errs) row.variance += (e - row.mean_err) * (e - row.mean_err);
    row.variance /= n;
    rows.push_back(row);
  }
  return rows;
}

std::vector<VarianceCurveRow> decode_error_curve(const ModelBundle& bundle,
                                                 const std::vector<Tensor>& latents,
                                                 const std::vector<int>& ts, int draws,
                                                 uint64_t seed,
                                                 const NoisePredictor& predictor) {
  if (latents.empty()) throw ValueError("decode_error_curve needs at least one latent");
  if (draws < 2) throw ValueError("decode_error_curve needs at least two draws");

  std::vector<Tensor> z0s;
  for (const Tensor& z : latents) {
    Tensor z0 = z;
    if (z0.shape.size() == 3) {
      z0.shape.insert(z0.shape.begin(), 1);
    }
    if (z0.shape.size() != 4 || z0.shape[0] != 1) {
      throw ShapeError("latents must be [C, H, W] or [1, C, H, W], got " +
                       Tensor::shape_str(z.shape));
    }
    z0s.push_back(std::move(z0));
  }

  const std::vector<int> null_label(1, bundle.dn_config.null_class());
  std::vector<VarianceCurveRow> rows;
  for (int t : ts) {
    std::vector<double> errs;
    errs.reserve(z0s.size() * static_cast<size_t>(draws));
    for (size_t i = 0; i < z0s.size(); ++i) {
      for (int d = 0; d < draws; ++d) {
        // Same sub-stream plan as x0_variance_curve so the two profiles see
        // identical noise when run side by side.
        Rng rng = Rng::derive(seed, static_cast<uint64_t>(t) * 10007 + i,
                              static_cast<uint64_t>(d));
        const Tensor eps = rng.normal_tensor(z0s[i].shape);
        const Tensor z_t = q_sample(bundle.schedule, z0s[i], t, eps);
        const Tensor pred = predictor ? predictor(z_t, t, eps)
                                      : predict_noise(bundle, z_t, {t}, null_label);
        const Tensor z_t_hat = q_sample(bundle.schedule, z0s[i], t, pred);
        const Tensor a = decode(bundle, z_t);
        const Tensor b = decode(bundle, z_t_hat);
        double mse = 0.0;
        for (int64_t j = 0; j < a.numel(); ++j) {
          const double diff = static_cast<double>(a[j]) - b[j];
          mse += diff * diff;
        }
        errs.push_back(mse / static_cast<double>(a.numel()));
      }
    }
    VarianceCurveRow row;
    row.t = t;
    const double n = static_cast<double>(errs.size());
    for (double e : errs) row.mean_err += e;
    row.mean_err /= n;
    for (double e : errs) row.variance += (e - row.mean_err) * (e - row.mean_err);
    row.variance /= n;
    rows.push_back(row);
  }
  return rows;
}

double spearman_rho(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) {
    throw ValueError("spearman_rho wants two equal-length series of >= 2 points");
  }
  auto ranks = [](const std::vector<double>& v) {
    const size_t n = v.size();
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(),
              [&v](size_t i, size_t j) { return v[i] < v[j]; });
    std::vector<double> r(n, 0.0);
    size_t i = 0;
    while (i < n) {
      size_t j = i;
      while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
      const double avg = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
      for (size_t k = i; k <= j; ++k) r[order[k]] = avg;  // ties share the mean rank
      i = j + 1;
    }
    return r;
  };
  const std::vector<double> ra = ranks(a);
  const std::vector<double> rb = ranks(b);
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (size_t i = 0; i < ra.size(); ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= n;
  mb /= n;
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (size_t i = 0; i < ra.size(); ++i) {
    cov += (ra[i] - ma) * (rb[i] - mb);
    va += (ra[i] - ma) * (ra[i] - ma);
    vb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (va <= 0.0 || vb <= 0.0) return 0.0;  // a constant series has no ranking
  return cov / std::sqrt(va * vb);
}

}  // namespace pixelpost
