// SPDX-License-Identifier: Apache-2.0
#include "pixelpost/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "pixelpost/metrics.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace pixelpost {

namespace {

constexpr float kTints[][3] = {
    {1.0f, 1.0f, 1.0f},  {1.0f, 0.85f, 0.85f}, {0.85f, 1.0f, 0.85f},
    {0.85f, 0.85f, 1.0f}, {1.0f, 1.0f, 0.8f},
};
constexpr int kTintCount = static_cast<int>(sizeof(kTints) / sizeof(kTints[0]));
constexpr float kContrastGrid[] = {0.6f, 0.8f, 1.0f};
// Mixing weights for the two-level structure and the diagonal shading ramp in
// render_pattern; they sum to one so the contrast band stays exact.
constexpr float kStructureWeight = 0.75f;
constexpr float kShadeWeight = 0.25f;

void check_params(const GeneratorParams& p, int image_size) {
  if (p.family < 0 || p.family >= kNumFamilies) {
    throw ValueError("unknown pattern family " + std::to_string(p.family));
  }
  if (p.period < 2 || p.period % 2 != 0 || p.period > image_size / 2) {
    throw ValueError("pattern period must be even and in [2, size/2], got " +
                     std::to_string(p.period));
  }
  if (!(p.contrast > 0.0f) || p.contrast > 1.0f) {
    throw ValueError("pattern contrast must be in (0, 1]");
  }
  if (p.phase_x < 0 || p.phase_y < 0) throw ValueError("pattern phase must be >= 0");
  if (p.palette < 0 || p.palette >= kTintCount) {
    throw ValueError("palette index out of range");
  }
  if (p.family == kFamilyGradientBlobs &&
      (p.layout < 0 || p.layout >= kBlobLayouts)) {
    throw ValueError("blob layout out of range");
  }
}

}  // namespace

const char* tier_name(Tier tier) {
  return tier == Tier::kBase ? "base" : "high_quality";
}

Tier tier_from_name(const std::string& name) {
  if (name == "base") return Tier::kBase;
  if (name == "high_quality") return Tier::kHighQuality;
  throw ValueError("unknown tier name '" + name + "'");
}

int palette_count() { return kTintCount; }

Tensor render_pattern(const GeneratorParams& p, int image_size) {
  check_params(p, image_size);
  // Each family paints a crisp two-level structure which is then mixed with a
  // fixed diagonal shading ramp.  The ramp guarantees that every sample holds
  // both low-frequency energy (the ramp) and genuine broadband energy (the
  // structure edges plus ramp-modulated sidebands), so spectral statistics
  // never collapse onto a single tone.  The weights sum to one, keeping the
  // output exactly inside [0.5 - contrast/2, 0.5 + contrast/2].
  std::vector<int> sgn(static_cast<size_t>(image_size) * image_size, 1);
  auto s_at = [&](int y, int x) -> int& { return sgn[y * image_size + x]; };

  switch (p.family) {
    case kFamilyCheckerboard: {
      const int cell = p.period / 2;
      for (int y = 0; y < image_size; ++y) {
        for (int x = 0; x < image_size; ++x) {
          const int bit = ((x + p.phase_x) / cell + (y + p.phase_y) / cell) & 1;
          s_at(y, x) = bit ? 1 : -1;
        }
      }
      break;
    }
    case kFamilyStripes: {
      for (int y = 0; y < image_size; ++y) {
        for (int x = 0; x < image_size; ++x) {
          const int a = p.orientation == 0 ? y + p.phase_y : x + p.phase_x;
          s_at(y, x) = (a % p.period) < p.period / 2 ? 1 : -1;
        }
      }
      break;
    }
    case kFamilyRings: {
      const double cx = 0.5 * (image_size - 1) + p.center_dx;
      const double cy = 0.5 * (image_size - 1) + p.center_dy;
      for (int y = 0; y < image_size; ++y) {
        for (int x = 0; x < image_size; ++x) {
          const double r = std::hypot(x - cx, y - cy);
          const int band = static_cast<int>(std::floor(2.0 * r / p.period)) & 1;
          s_at(y, x) = band ? 1 : -1;
        }
      }
      break;
    }
    case kFamilyGradientBlobs: {
      // Blob shapes are the sign of a field of signed Gaussian bumps;
      // (layout, period) fully determines the field so the template bank can
      // re-render it.  Distances wrap around the image so blob size stays
      // uniform near the borders, and the first/last bump signs are pinned to
      // opposite values so the field always has a zero crossing.
      Rng lr = Rng::derive(0xb10b, static_cast<uint64_t>(p.layout),
                          static_cast<uint64_t>(p.period));
      const double sigma = static_cast<double>(p.period);
      struct Bump {
        double x, y, s;
      };
      std::array<Bump, 5> bumps;
      for (size_t i = 0; i < bumps.size(); ++i) {
        Bump& b = bumps[i];
        b.x = static_cast<double>(lr.uniform_int(static_cast<uint64_t>(image_size)));
        b.y = static_cast<double>(lr.uniform_int(static_cast<uint64_t>(image_size)));
        const uint64_t coin = lr.uniform_int(2);
        b.s = i == 0 ? 1.0 : i + 1 == bumps.size() ? -1.0 : (coin ? 1.0 : -1.0);
      }
      auto wrap_dist = [image_size](double d) {
        d = std::abs(d);
        return std::min(d, image_size - d);
      };
      for (int y = 0; y < image_size; ++y) {
        for (int x = 0; x < image_size; ++x) {
          double v = 0.0;
          for (const auto& b : bumps) {
            const double dx = wrap_dist(x - b.x), dy = wrap_dist(y - b.y);
            v += b.s * std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
          }
          s_at(y, x) = v > 0.0 ? 1 : -1;
        }
      }
      break;
    }
    default:
      throw ValueError("unknown pattern family");
  }

  Tensor g = Tensor::zeros({image_size, image_size});
  const float ramp_scale = 1.0f / (2.0f * static_cast<float>(image_size - 1));
  for (int y = 0; y < image_size; ++y) {
    for (int x = 0; x < image_size; ++x) {
      const float ramp = static_cast<float>(x + y) * ramp_scale - 0.5f;  // [-1/2, 1/2]
      g[y * image_size + x] =
          0.5f + p.contrast * (0.5f * kStructureWeight * static_cast<float>(s_at(y, x)) +
                               kShadeWeight * ramp);
    }
  }
  return g;
}

Tensor tint_pattern(const Tensor& gray, int palette) {
  if (gray.shape.size() != 2) {
    throw ShapeError("tint_pattern wants [H, W], got " + Tensor::shape_str(gray.shape));
  }
  if (palette < 0 || palette >= kTintCount) throw ValueError("palette index out of range");
  const int h = gray.shape[0], w = gray.shape[1];
  Tensor out = Tensor::zeros({3, h, w});
  for (int c = 0; c < 3; ++c) {
    const float gain = kTints[palette][c];
    for (int64_t i = 0; i < static_cast<int64_t>(h) * w; ++i) {
      out[c * h * w + i] = gain * gray[i];
    }
  }
  return out;
}

namespace {

std::vector<int> even_periods(int lo, int hi) {
  std::vector<int> out;
  for (int p = lo + (lo % 2); p <= hi; p += 2) out.push_back(p);
  return out;
}

}  // namespace

void CorpusSpec::validate() const {
  if (image_size < 8 || image_size % 2 != 0) {
    throw ValueError("image_size must be even and >= 8");
  }
  if (num_classes < 1 || num_classes > kNumFamilies) {
    throw ValueError("num_classes must be in [1, " + std::to_string(kNumFamilies) + "]");
  }
  if (n_train < 0 || n_sft < 0 || n_eval < 0 || n_pairs < 0) {
    throw ValueError("split sizes must be >= 0");
  }
  if (period_min < 2 || period_min > period_max || period_max > image_size / 2) {
    throw ValueError("period range must satisfy 2 <= min <= max <= size/2");
  }
  if (even_periods(period_min, period_max).empty()) {
    throw ValueError("period range contains no even period");
  }
  if (even_periods(period_min, std::min(4, period_max)).empty()) {
    throw ValueError("period range leaves the high-quality band (period <= 4) empty");
  }
  if (!(blur_min >= 0.5f) || !(blur_max >= blur_min) || !(blur_max <= 2.0f)) {
    throw ValueError("blur range must satisfy 0.5 <= min <= max <= 2.0");
  }
  if (!(noise_max >= 0.0f) || noise_max > 0.5f) {
    throw ValueError("noise_max must be in [0, 0.5]");
  }
}

ImageSample generate_sample(const CorpusSpec& spec, Tier tier, int family, Rng& rng) {
  spec.validate();
  if (family < 0 || family >= spec.num_classes) {
    throw ValueError("family out of range for this corpus");
  }
  const bool hq = tier == Tier::kHighQuality;
  // The high-quality band is the sharpest corner of the grid: smallest
  // periods, full contrast.
  const std::vector<int> periods =
      even_periods(spec.period_min, hq ? std::min(4, spec.period_max) : spec.period_max);

  GeneratorParams p;
  p.family = family;
  p.period = periods[rng.uniform_int(periods.size())];
  p.contrast = hq ? 1.0f : kContrastGrid[rng.uniform_int(3)];
  switch (family) {
    case kFamilyCheckerboard:
      p.phase_x = static_cast<int>(rng.uniform_int(p.period));
      p.phase_y = static_cast<int>(rng.uniform_int(p.period));
      break;
    case kFamilyStripes:
      p.orientation = static_cast<int>(rng.uniform_int(2));
      p.phase_x = static_cast<int>(rng.uniform_int(p.period));
      p.phase_y = static_cast<int>(rng.uniform_int(p.period));
      break;
    case kFamilyRings: {
      const auto& off = kRingCenterOffsets[rng.uniform_int(kRingCenterCount)];
      p.center_dx = off.first;
      p.center_dy = off.second;
      break;
    }
    case kFamilyGradientBlobs:
      p.layout = static_cast<int>(rng.uniform_int(kBlobLayouts));
      break;
    default:
      break;
  }
  p.palette = static_cast<int>(rng.uniform_int(kTintCount));

  ImageSample s;
  s.pixels = tint_pattern(render_pattern(p, spec.image_size), p.palette);
  s.label = family;
  s.tier = tier;
  s.params = p;
  return s;
}

Corpus generate_corpus(const CorpusSpec& spec) {
  spec.validate();
  Corpus corpus;
  auto fill = [&spec](std::vector<ImageSample>& split, int count, Tier tier,
                      uint64_t purpose) {
    split.reserve(count);
    for (int i = 0; i < count; ++i) {
      Rng rng = Rng::derive(spec.seed, purpose, static_cast<uint64_t>(i));
      split.push_back(generate_sample(spec, tier, i % spec.num_classes, rng));
    }
  };
  fill(corpus.train, spec.n_train, Tier::kBase, kTrainStream);
  fill(corpus.sft, spec.n_sft, Tier::kHighQuality, kSftStream);
  fill(corpus.eval, spec.n_eval, Tier::kBase, kEvalStream);
  return corpus;
}

void Degradation::validate(int image_size) const {
  const bool active = blur_sigma > 0.0f || noise_std > 0.0f || block > 0;
  if (!active) throw ValueError("degradation must alter the image");
  if (blur_sigma != 0.0f && (blur_sigma < 0.5f || blur_sigma > 2.0f)) {
    throw ValueError("blur_sigma must be 0 or in [0.5, 2.0]");
  }
  if (noise_std < 0.0f || noise_std > 0.5f) {
    throw ValueError("noise_std must be in [0, 0.5]");
  }
  if (block != 0 && (block < 2 || image_size % block != 0)) {
    throw ValueError("block size must divide the image size");
  }
}

namespace {

int wrap_index(int i, int n) { return ((i % n) + n) % n; }

// Separable Gaussian with circular (wrap-around) boundaries.  Circular
// convolution acts on the discrete spectrum as a pure per-frequency
// attenuation, so blurring can never add energy to any radial bin — the
// property the pair-ordering checks rely on.  Reflective padding does not give
// that guarantee: its boundary handling leaks broadband energy that can swamp
// the faint high-frequency tail of a smooth image.
Tensor gaussian_blur(const Tensor& x, float sigma) {
  const int c = x.shape[0], h = x.shape[1], w = x.shape[2];
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(2 * radius + 1);
  double norm = 0.0;
  for (int k = -radius; k <= radius; ++k) {
    kernel[k + radius] = std::exp(-0.5 * k * k / (sigma * sigma));
    norm += kernel[k + radius];
  }
  for (auto& v : kernel) v /= norm;

  Tensor tmp = Tensor::zeros(x.shape);
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < h; ++y) {
      for (int xx = 0; xx < w; ++xx) {
        double acc = 0.0;
        for (int k = -radius; k <= radius; ++k) {
          acc += kernel[k + radius] * x[(ch * h + y) * w + wrap_index(xx + k, w)];
        }
        tmp[(ch * h + y) * w + xx] = static_cast<float>(acc);
      }
    }
  }
  Tensor out = Tensor::zeros(x.shape);
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < h; ++y) {
      for (int xx = 0; xx < w; ++xx) {
        double acc = 0.0;
        for (int k = -radius; k <= radius; ++k) {
          acc += kernel[k + radius] * tmp[(ch * h + wrap_index(y + k, h)) * w + xx];
        }
        out[(ch * h + y) * w + xx] = static_cast<float>(acc);
      }
    }
  }
  return out;
}

Tensor block_average(const Tensor& x, int block) {
  const int c = x.shape[0], h = x.shape[1], w = x.shape[2];
  Tensor out = Tensor::zeros(x.shape);
  for (int ch = 0; ch < c; ++ch) {
    for (int by = 0; by < h; by += block) {
      for (int bx = 0; bx < w; bx += block) {
        double acc = 0.0;
        for (int y = 0; y < block; ++y) {
          for (int xx = 0; xx < block; ++xx) {
            acc += x[(ch * h + by + y) * w + bx + xx];
          }
        }
        const float mean = static_cast<float>(acc / (block * block));
        for (int y = 0; y < block; ++y) {
          for (int xx = 0; xx < block; ++xx) {
            out[(ch * h + by + y) * w + bx + xx] = mean;
          }
        }
      }
    }
  }
  return out;
}

}  // namespace

Tensor apply_degradation(const Tensor& pixels, const Degradation& d, Rng& rng) {
  if (pixels.shape.size() != 3 || pixels.shape[0] != 3 ||
      pixels.shape[1] != pixels.shape[2]) {
    throw ShapeError("apply_degradation wants [3, N, N], got " +
                     Tensor::shape_str(pixels.shape));
  }
  d.validate(pixels.shape[1]);
  Tensor out = pixels;
  if (d.blur_sigma > 0.0f) out = gaussian_blur(out, d.blur_sigma);
  if (d.block > 0) out = block_average(out, d.block);
  if (d.noise_std > 0.0f) {
    for (auto& v : out.data) v += d.noise_std * static_cast<float>(rng.normal());
  }
  for (auto& v : out.data) v = std::clamp(v, 0.0f, 1.0f);
  return out;
}

std::vector<PreferencePair> generate_pairs(const CorpusSpec& spec) {
  spec.validate();
  std::vector<PreferencePair> pairs;
  pairs.reserve(spec.n_pairs);
  for (int i = 0; i < spec.n_pairs; ++i) {
    Rng rng = Rng::derive(spec.seed, kPairStream, static_cast<uint64_t>(i));
    PreferencePair pair;
    pair.winner = generate_sample(spec, Tier::kHighQuality, i % spec.num_classes, rng);
    const double winner_hf = radial_spectrum(pair.winner.pixels).hf_energy_ratio;

    // Draw degradations until the pair orders correctly under both flaw
    // proxies; blur is always present, so only degenerate interactions
    // (e.g. block averaging aligned with a matching pattern period) retry.
    bool ok = false;
    for (int attempt = 0; attempt < 8 && !ok; ++attempt) {
      Degradation d;
      d.blur_sigma =
          spec.blur_min + static_cast<float>(rng.uniform()) * (spec.blur_max - spec.blur_min);
      if (spec.noise_max > 0.0f && rng.uniform() < 0.3) {
        d.noise_std =
            0.02f + static_cast<float>(rng.uniform()) * (spec.noise_max - 0.02f);
      }
      if (rng.uniform() < 0.2) d.block = rng.uniform_int(2) ? 4 : 2;
      d.validate(spec.image_size);

      Tensor degraded = apply_degradation(pair.winner.pixels, d, rng);
      double mse = 0.0;
      for (int64_t j = 0; j < degraded.numel(); ++j) {
        const double diff = static_cast<double>(degraded[j]) - pair.winner.pixels[j];
        mse += diff * diff;
      }
      mse /= static_cast<double>(degraded.numel());
      const double loser_hf = radial_spectrum(degraded).hf_energy_ratio;
      if (mse > 0.0 && loser_hf < winner_hf) {
        pair.loser = pair.winner;
        pair.loser.pixels = std::move(degraded);
        pair.degradation = d;
        ok = true;
      }
    }
    if (!ok) {
      throw ValueError("could not construct an ordered preference pair for index " +
                       std::to_string(i));
    }
    pairs.push_back(std::move(pair));
  }
  return pairs;
}

// --- Persistence ------------------------------------------------------------

void write_ppm(const std::string& path, const Tensor& pixels) {
  if (pixels.shape.size() != 3 || pixels.shape[0] != 3) {
    throw ShapeError("write_ppm wants [3, H, W], got " + Tensor::shape_str(pixels.shape));
  }
  const int h = pixels.shape[1], w = pixels.shape[2];
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f << "P6\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> row(static_cast<size_t>(w) * 3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        const float v = pixels[(c * h + y) * w + x];
        const int q = static_cast<int>(std::lround(v * 255.0f));
        row[x * 3 + c] = static_cast<unsigned char>(std::clamp(q, 0, 255));
      }
    }
    f.write(reinterpret_cast<const char*>(row.data()), row.size());
  }
  if (!f) throw IoError("short write to " + path);
}

namespace {

// Reads one whitespace-delimited PPM header token, skipping '#' comments.
std::string ppm_token(std::istream& in) {
  std::string tok;
  int c = in.get();
  while (c != EOF && (std::isspace(c) || c == '#')) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
    }
    c = in.get();
  }
  while (c != EOF && !std::isspace(c)) {
    tok.push_back(static_cast<char>(c));
    c = in.get();
  }
  return tok;
}

}  // namespace

Tensor read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  if (ppm_token(f) != "P6") throw IoError(path + ": not a binary PPM");
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(ppm_token(f));
    h = std::stoi(ppm_token(f));
    maxval = std::stoi(ppm_token(f));
  } catch (const std::exception&) {
    throw IoError(path + ": malformed PPM header");
  }
  if (w <= 0 || h <= 0 || maxval != 255) throw IoError(path + ": unsupported PPM");
  std::vector<unsigned char> raw(static_cast<size_t>(w) * h * 3);
  f.read(reinterpret_cast<char*>(raw.data()), raw.size());
  if (f.gcount() != static_cast<std::streamsize>(raw.size())) {
    throw IoError(path + ": truncated pixel data");
  }
  Tensor out = Tensor::zeros({3, h, w});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        out[(c * h + y) * w + x] = raw[(y * w + x) * 3 + c] / 255.0f;
      }
    }
  }
  return out;
}

namespace {

json params_to_json(const GeneratorParams& p) {
  return json{{"family", p.family},        {"period", p.period},
              {"contrast", p.contrast},    {"phase_x", p.phase_x},
              {"phase_y", p.phase_y},      {"orientation", p.orientation},
              {"center_dx", p.center_dx},  {"center_dy", p.center_dy},
              {"layout", p.layout},        {"palette", p.palette}};
}

GeneratorParams params_from_json(const json& j) {
  GeneratorParams p;
  p.family = j.at("family").get<int>();
  p.period = j.at("period").get<int>();
  p.contrast = j.at("contrast").get<float>();
  p.phase_x = j.at("phase_x").get<int>();
  p.phase_y = j.at("phase_y").get<int>();
  p.orientation = j.at("orientation").get<int>();
  p.center_dx = j.at("center_dx").get<int>();
  p.center_dy = j.at("center_dy").get<int>();
  p.layout = j.at("layout").get<int>();
  p.palette = j.at("palette").get<int>();
  return p;
}

std::string indexed_name(const char* stem, int i, const char* suffix = "") {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s_%05d%s.ppm", stem, i, suffix);
  return buf;
}

}  // namespace

void save_corpus(const std::string& dir, const CorpusSpec& spec, const Corpus& corpus,
                 const std::vector<PreferencePair>& pairs) {
  spec.validate();
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());

  json manifest;
  manifest["spec"] = json{{"image_size", spec.image_size},
                          {"num_classes", spec.num_classes},
                          {"n_train", spec.n_train},
                          {"n_sft", spec.n_sft},
                          {"n_eval", spec.n_eval},
                          {"n_pairs", spec.n_pairs},
                          {"seed", spec.seed},
                          {"period_min", spec.period_min},
                          {"period_max", spec.period_max},
                          {"blur_min", spec.blur_min},
                          {"blur_max", spec.blur_max},
                          {"noise_max", spec.noise_max}};
  manifest["images"] = json::array();
  manifest["pairs"] = json::array();

  auto dump_split = [&](const std::vector<ImageSample>& split, const char* stem) {
    for (size_t i = 0; i < split.size(); ++i) {
      const std::string file = indexed_name(stem, static_cast<int>(i));
      write_ppm((fs::path(dir) / file).string(), split[i].pixels);
      manifest["images"].push_back(json{{"file", file},
                                        {"split", stem},
                                        {"label", split[i].label},
                                        {"tier", tier_name(split[i].tier)},
                                        {"params", params_to_json(split[i].params)}});
    }
  };
  dump_split(corpus.train, "train");
  dump_split(corpus.sft, "sft");
  dump_split(corpus.eval, "eval");

  for (size_t i = 0; i < pairs.size(); ++i) {
    const std::string wf = indexed_name("pair", static_cast<int>(i), "_w");
    const std::string lf = indexed_name("pair", static_cast<int>(i), "_l");
    write_ppm((fs::path(dir) / wf).string(), pairs[i].winner.pixels);
    write_ppm((fs::path(dir) / lf).string(), pairs[i].loser.pixels);
    const Degradation& d = pairs[i].degradation;
    manifest["pairs"].push_back(
        json{{"winner", wf},
             {"loser", lf},
             {"label", pairs[i].winner.label},
             {"tier", tier_name(pairs[i].winner.tier)},
             {"params", params_to_json(pairs[i].winner.params)},
             {"degradation", json{{"blur_sigma", d.blur_sigma},
                                  {"noise_std", d.noise_std},
                                  {"block", d.block}}}});
  }

  std::ofstream f((fs::path(dir) / "manifest.json").string());
  if (!f) throw IoError("cannot write manifest in " + dir);
  f << manifest.dump(2) << "\n";
  if (!f) throw IoError("short write to manifest in " + dir);
}

LoadedCorpus load_corpus(const std::string& dir) {
  std::ifstream f((fs::path(dir) / "manifest.json").string());
  if (!f) throw IoError("no manifest.json in " + dir);
  json manifest;
  try {
    f >> manifest;
  } catch (const json::exception& e) {
    throw IoError("malformed manifest in " + dir + ": " + e.what());
  }

  LoadedCorpus out;
  try {
    const json& s = manifest.at("spec");
    out.spec.image_size = s.at("image_size").get<int>();
    out.spec.num_classes = s.at("num_classes").get<int>();
    out.spec.n_train = s.at("n_train").get<int>();
    out.spec.n_sft = s.at("n_sft").get<int>();
    out.spec.n_eval = s.at("n_eval").get<int>();
    out.spec.n_pairs = s.at("n_pairs").get<int>();
    out.spec.seed = s.at("seed").get<uint64_t>();
    out.spec.period_min = s.at("period_min").get<int>();
    out.spec.period_max = s.at("period_max").get<int>();
    out.spec.blur_min = s.at("blur_min").get<float>();
    out.spec.blur_max = s.at("blur_max").get<float>();
    out.spec.noise_max = s.at("noise_max").get<float>();

    for (const json& e : manifest.at("images")) {
      ImageSample sample;
      sample.pixels = read_ppm((fs::path(dir) / e.at("file").get<std::string>()).string());
      sample.label = e.at("label").get<int>();
      sample.tier = tier_from_name(e.at("tier").get<std::string>());
      sample.params = params_from_json(e.at("params"));
      const std::string split = e.at("split").get<std::string>();
      if (split == "train") {
        out.corpus.train.push_back(std::move(sample));
      } else if (split == "sft") {
        out.corpus.sft.push_back(std::move(sample));
      } else if (split == "eval") {
        out.corpus.eval.push_back(std::move(sample));
      } else {
        throw IoError("unknown split '" + split + "' in manifest");
      }
    }

    for (const json& e : manifest.at("pairs")) {
      PreferencePair pair;
      pair.winner.pixels =
          read_ppm((fs::path(dir) / e.at("winner").get<std::string>()).string());
      pair.loser.pixels =
          read_ppm((fs::path(dir) / e.at("loser").get<std::string>()).string());
      pair.winner.label = pair.loser.label = e.at("label").get<int>();
      pair.winner.tier = pair.loser.tier = tier_from_name(e.at("tier").get<std::string>());
      pair.winner.params = pair.loser.params = params_from_json(e.at("params"));
      const json& d = e.at("degradation");
      pair.degradation.blur_sigma = d.at("blur_sigma").get<float>();
      pair.degradation.noise_std = d.at("noise_std").get<float>();
      pair.degradation.block = d.at("block").get<int>();
      out.pairs.push_back(std::move(pair));
    }
  } catch (const json::exception& e) {
    throw IoError("malformed manifest in " + dir + ": " + e.what());
  }
  return out;
}

}  // namespace pixelpost
