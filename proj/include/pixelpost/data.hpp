// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pixelpost/rng.hpp"
#include "pixelpost/tensor.hpp"

namespace pixelpost {

// Procedural image corpus: four pattern families with controllable
// high-frequency content stand in for curated photographic data. Every
// sample is reproducible from its recorded generator parameters, and every
// preference pair is a pristine sample plus a recorded degradation of it.

// Class ids. The family doubles as the conditioning label.
inline constexpr int kFamilyCheckerboard = 0;
inline constexpr int kFamilyStripes = 1;
inline constexpr int kFamilyRings = 2;
inline constexpr int kFamilyGradientBlobs = 3;
inline constexpr int kNumFamilies = 4;

enum class Tier { kBase, kHighQuality };

const char* tier_name(Tier tier);
Tier tier_from_name(const std::string& name);

// Discrete grids shared between the generators and the fixed template bank.
inline constexpr int kBlobLayouts = 8;
inline constexpr std::pair<int, int> kRingCenterOffsets[] = {
    {0, 0}, {2, -1}, {-3, 2}, {1, 3}};
inline constexpr int kRingCenterCount = 4;

// Sub-stream purposes: sample i of a split draws from
// Rng::derive(spec.seed, purpose, i), which keeps splits seed-disjoint.
inline constexpr uint64_t kTrainStream = 0x71a1;
inline constexpr uint64_t kSftStream = 0x5f70;
inline constexpr uint64_t kEvalStream = 0xe7a1;
inline constexpr uint64_t kPairStream = 0xba17;

// Everything needed to re-render a sample exactly. All values live on small
// discrete grids so a fixed template bank can enumerate them.
struct GeneratorParams {
  int family = kFamilyCheckerboard;
  int period = 4;          // spatial period in pixels, even, in [2, 8]
  float contrast = 1.0f;   // peak-to-peak pattern amplitude, in (0, 1]
  int phase_x = 0;         // checkerboard / stripes pixel offsets
  int phase_y = 0;
  int orientation = 0;     // stripes: 0 = horizontal bands, 1 = vertical
  int center_dx = 0;       // rings: center offset from the image center
  int center_dy = 0;
  int layout = 0;          // gradient blobs: which fixed bump arrangement
  int palette = 0;         // color tint index
};

struct ImageSample {
  Tensor pixels;  // [3, H, W] in [0, 1]
  int label = 0;  // == params.family
  Tier tier = Tier::kBase;
  GeneratorParams params;
};

// A corruption applied to a winner to manufacture its loser. Blur is the
// primary flaw (it removes exactly the high-frequency content the corpus is
// built around); noise and block averaging are optional extras.
struct Degradation {
  float blur_sigma = 0.0f;  // Gaussian blur, [0.5, 2.0] when active
  float noise_std = 0.0f;   // additive Gaussian pixel noise, (0, 0.5] when active
  int block = 0;            // block-averaging size, divides the image when active
  // Throws ValueError unless at least one component is active and all active
  // components are in range.
  void validate(int image_size) const;
};

struct PreferencePair {
  ImageSample winner;
  ImageSample loser;  // winner's pixels with `degradation` applied
  Degradation degradation;
};

struct CorpusSpec {
  int image_size = 32;
  int num_classes = kNumFamilies;
  int n_train = 512;
  int n_sft = 256;
  int n_eval = 64;
  int n_pairs = 256;
  uint64_t seed = 0;
  // Pattern frequency band: even spatial periods in [period_min, period_max].
  int period_min = 2;
  int period_max = 8;
  // Degradation menu bounds.
  float blur_min = 0.5f;
  float blur_max = 1.5f;
  float noise_max = 0.1f;

  void validate() const;
};

struct Corpus {
  std::vector<ImageSample> train;  // base tier
  std::vector<ImageSample> sft;    // high-quality tier: sharpest band only
  std::vector<ImageSample> eval;   // base tier, held out
};

// Renders the grayscale pattern for one parameter record: [H, W] values in
// [0.5 - contrast/2, 0.5 + contrast/2]. Deterministic, closed-form.
Tensor render_pattern(const GeneratorParams& params, int image_size);

// Applies a palette tint: [3, H, W] with per-channel gains, still in [0, 1].
Tensor tint_pattern(const Tensor& gray, int palette);

int palette_count();

// Draws one sample's parameters from the discrete grids and renders it. The
// high-quality tier is restricted to the sharpest band: period <= 4 and
// full contrast. All randomness comes from `rng`.
ImageSample generate_sample(const CorpusSpec& spec, Tier tier, int family, Rng& rng);

// Deterministic corpus: sample i of each split derives its own stream from
// (spec.seed, split, i), so the three splits are seed-disjoint and parallel
// generation would agree with serial. Labels are assigned round-robin, which
// keeps class counts within one sample of each other.
Corpus generate_corpus(const CorpusSpec& spec);

// Winner/loser pairs: the winner is a pristine high-quality sample, the loser
// is the same image with a drawn degradation applied. Every emitted pair is
// verified to order correctly: the loser has strictly lower high-frequency
// energy than the winner and strictly positive distance from it.
std::vector<PreferencePair> generate_pairs(const CorpusSpec& spec);

// Applies a validated degradation: blur, then block averaging, then noise,
// then a clamp back to [0, 1]. Noise consumes draws from `rng`.
Tensor apply_degradation(const Tensor& pixels, const Degradation& d, Rng& rng);

// --- Persistence ------------------------------------------------------------
// A corpus directory holds one binary PPM (P6, 8-bit) per image plus a JSON
// manifest mapping sample ids to their label, tier, generator parameters, and
// (for pairs) the degradation record.

void write_ppm(const std::string& path, const Tensor& pixels);
Tensor read_ppm(const std::string& path);

void save_corpus(const std::string& dir, const CorpusSpec& spec, const Corpus& corpus,
                 const std::vector<PreferencePair>& pairs);

struct LoadedCorpus {
  CorpusSpec spec;
  Corpus corpus;
  std::vector<PreferencePair> pairs;
};

// Reads back what save_corpus wrote. Pixels round-trip through 8-bit
// quantization; metadata round-trips exactly.
LoadedCorpus load_corpus(const std::string& dir);

}  // namespace pixelpost
