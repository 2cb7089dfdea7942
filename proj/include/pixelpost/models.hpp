// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "pixelpost/graph.hpp"
#include "pixelpost/rng.hpp"
#include "pixelpost/schedule.hpp"
#include "pixelpost/tensor.hpp"

namespace pixelpost {

// Ordered, name-addressed parameter container. Slot order is the canonical
// order everywhere: tape uploads, gradient vectors, optimizer state, and
// checkpoints all index parameters by store slot.
class ParamStore {
 public:
  int add(const std::string& name, Tensor value);
  bool has(const std::string& name) const { return index_.count(name) > 0; }
  int slot(const std::string& name) const;
  const std::string& name(int slot) const { return names_.at(slot); }
  Tensor& at(const std::string& name) { return values_[slot(name)]; }
  const Tensor& at(const std::string& name) const { return values_[slot(name)]; }
  Tensor& at(int s) { return values_.at(s); }
  const Tensor& at(int s) const { return values_.at(s); }
  int size() const { return static_cast<int>(values_.size()); }
  int64_t total_elements() const;
  // FNV-1a over every value's bit pattern; used to assert that frozen
  // parameters are never written.
  uint64_t checksum() const;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
  std::unordered_map<std::string, int> index_;
};

// Convolutional autoencoder geometry. Three stride-2 stages fix the spatial
// compression at 8x; with the default 32x32x3 -> 4x4x4 the element-count
// compression ratio is (32*32*3)/(4*4*4) = 48.
struct AutoencoderConfig {
  int image_size = 32;
  int image_channels = 3;
  int latent_channels = 4;
  int base_width = 32;
  static constexpr int kDownsampleFactor = 8;

  int latent_size() const { return image_size / kDownsampleFactor; }
  void validate() const;
};

enum class DenoiserVariant { kDit, kUnet };

// Noise-prediction backbone. Either a small transformer over latent patches
// or a two-level convolutional U-Net; both take (z_t, t, label) and return a
// tensor shaped like z_t. Labels live in [0, num_classes] where index
// num_classes is the reserved always-present null slot used for
// classifier-free guidance; it is never a dataset label.
struct DenoiserConfig {
  DenoiserVariant variant = DenoiserVariant::kDit;
  int latent_channels = 4;
  int latent_size = 4;
  int num_classes = 4;
  int time_embed_dim = 64;
  // Transformer shape.
  int patch = 1;
  int depth = 4;
  int width = 128;
  int heads = 4;
  // U-Net shape (two resolution levels).
  int unet_base = 64;
  int unet_groups = 8;

  int null_class() const { return num_classes; }
  void validate() const;
};

// One complete model: frozen-or-trainable autoencoder and denoiser parameter
// stores plus the schedule they were trained against.
struct ModelBundle {
  AutoencoderConfig ae_config;
  DenoiserConfig dn_config;
  NoiseSchedule schedule;
  ParamStore ae;
  ParamStore dn;
  bool ae_frozen = false;
  bool dn_frozen = false;
};

// Deterministic parameter initialization (He-style fan-in scaling for conv
// and dense weights, zero-initialized output heads).
ParamStore init_autoencoder(const AutoencoderConfig& cfg, Rng& rng);
ParamStore init_denoiser(const DenoiserConfig& cfg, Rng& rng);
ModelBundle make_bundle(const AutoencoderConfig& ae_cfg, const DenoiserConfig& dn_cfg,
                        const NoiseSchedule& schedule, uint64_t seed);

// Tape ids for one uploaded store, addressed by parameter name. Ids are in
// store-slot order, so when uploaded as trainable params the gradient vector
// from the tape aligns with store slots one-to-one.
template <typename S>
struct NamedIds {
  const ParamStore* store = nullptr;
  std::vector<int32_t> ids;
  int32_t operator()(const std::string& name) const { return ids[store->slot(name)]; }
};

// Uploads every parameter onto the tape, as gradient targets when trainable
// and as constants when frozen (gradients still flow through constants to
// anything trainable upstream; they are just not reported or stepped).
template <typename S>
NamedIds<S> upload_store(TapeT<S>& tape, const ParamStore& store, bool trainable);

// Graph builders. These record the full forward computation onto the caller's
// tape so losses can compose models freely and the reverse sweep sees one
// connected graph.
template <typename S>
int32_t encoder_graph(TapeT<S>& tape, const AutoencoderConfig& cfg, int32_t x,
                      const NamedIds<S>& p);
template <typename S>
int32_t decoder_graph(TapeT<S>& tape, const AutoencoderConfig& cfg, int32_t z,
                      const NamedIds<S>& p);
template <typename S>
int32_t denoiser_graph(TapeT<S>& tape, const DenoiserConfig& cfg, int32_t z_t,
                       const std::vector<int>& ts, const std::vector<int>& labels,
                       const NamedIds<S>& p);

// Sinusoidal timestep features, [ts.size(), dim] with interleaved sin/cos and
// geometrically spaced frequencies. dim must be even.
Tensor time_features(const std::vector<int>& ts, int dim);

// Convenience inference wrappers: build a throwaway graph with all parameters
// frozen and return the value. Deterministic for fixed inputs.
Tensor encode(const ModelBundle& bundle, const Tensor& x);
Tensor decode(const ModelBundle& bundle, const Tensor& z);
Tensor predict_noise(const ModelBundle& bundle, const Tensor& z_t,
                     const std::vector<int>& ts, const std::vector<int>& labels);

// Deep copy with every sub-model marked frozen; the optimizer refuses to step
// frozen stores, so the copy's outputs stay bit-identical over time.
ModelBundle clone_frozen(const ModelBundle& bundle);

// Rescales the latent space per channel: encoder outputs are multiplied by
// inv_scale[c] and the decoder input weights absorb the inverse, so
// decode(encode(x)) is preserved while latents move to the new scale.
void fold_latent_scale(ParamStore& ae, const AutoencoderConfig& cfg,
                       const std::vector<float>& inv_scale);

}  // namespace pixelpost
