// SPDX-License-Identifier: Apache-2.0
#include "pixelpost/models.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <string>

namespace pixelpost {

int ParamStore::add(const std::string& name, Tensor value) {
  if (index_.count(name)) throw ValueError("duplicate parameter name: " + name);
  const int slot = static_cast<int>(values_.size());
  index_.emplace(name, slot);
  names_.push_back(name);
  values_.push_back(std::move(value));
  return slot;
}

int ParamStore::slot(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ValueError("unknown parameter name: " + name);
  return it->second;
}

int64_t ParamStore::total_elements() const {
  int64_t n = 0;
  for (const Tensor& t : values_) n += t.numel();
  return n;
}

uint64_t ParamStore::checksum() const {
  uint64_t h = 14695981039346656037ull;
  auto mix = [&h](const void* p, size_t len) {
    const unsigned char* bytes = static_cast<const unsigned char*>(p);
    for (size_t i = 0; i < len; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ull;
    }
  };
  for (const Tensor& t : values_) {
    if (!t.data.empty()) mix(t.data.data(), t.data.size() * sizeof(float));
  }
  return h;
}

void AutoencoderConfig::validate() const {
  if (image_size <= 0 || image_channels <= 0 || latent_channels <= 0 || base_width <= 0) {
    throw ValueError("autoencoder config fields must be positive");
  }
  if (image_size % kDownsampleFactor != 0) {
    throw ValueError("image_size " + std::to_string(image_size) +
                     " is not divisible by the fixed downsample factor 8");
  }
}

void DenoiserConfig::validate() const {
  if (latent_channels <= 0 || latent_size <= 0 || num_classes < 1) {
    throw ValueError("denoiser config fields must be positive");
  }
  if (time_embed_dim <= 0 || time_embed_dim % 2 != 0) {
    throw ValueError("time_embed_dim must be positive and even");
  }
  if (variant == DenoiserVariant::kDit) {
    if (patch <= 0 || latent_size % patch != 0) {
      throw ValueError("patch size must divide the latent grid");
    }
    if (depth < 1 || width <= 0 || heads <= 0 || width % heads != 0) {
      throw ValueError("transformer width must be a positive multiple of heads");
    }
  } else {
    if (latent_size % 2 != 0) {
      throw ValueError("u-net needs an even latent grid for its downsample");
    }
    if (unet_base <= 0 || unet_groups <= 0 || unet_base % unet_groups != 0 ||
        (2 * unet_base) % unet_groups != 0) {
      throw ValueError("u-net group count must divide both level widths");
    }
    if ((2 * unet_base) % heads != 0) {
      throw ValueError("u-net attention width must be a multiple of heads");
    }
  }
}

namespace {

Tensor he_conv(Rng& rng, int out_c, int in_c, int k) {
  Tensor w = rng.normal_tensor({out_c, in_c, k, k});
  const float std = std::sqrt(2.0f / static_cast<float>(in_c * k * k));
  for (auto& v : w.data) v *= std;
  return w;
}

Tensor he_dense(Rng& rng, int in_dim, int out_dim, float gain = 2.0f) {
  Tensor w = rng.normal_tensor({in_dim, out_dim});
  const float std = std::sqrt(gain / static_cast<float>(in_dim));
  for (auto& v : w.data) v *= std;
  return w;
}

Tensor small_normal(Rng& rng, std::vector<int> shape, float std = 0.02f) {
  Tensor t = rng.normal_tensor(std::move(shape));
  for (auto& v : t.data) v *= std;
  return t;
}

void add_norm(ParamStore& s, const std::string& prefix, int c) {
  s.add(prefix + ".g", Tensor::full({c}, 1.0f));
  s.add(prefix + ".b", Tensor::zeros({c}));
}

void add_conv(ParamStore& s, Rng& rng, const std::string& prefix, int out_c, int in_c,
              int k) {
  s.add(prefix + ".w", he_conv(rng, out_c, in_c, k));
  s.add(prefix + ".b", Tensor::zeros({out_c}));
}

void add_dense(ParamStore& s, Rng& rng, const std::string& prefix, int in_dim,
               int out_dim, float gain = 2.0f) {
  s.add(prefix + ".w", he_dense(rng, in_dim, out_dim, gain));
  s.add(prefix + ".b", Tensor::zeros({out_dim}));
}

void add_resblock(ParamStore& s, Rng& rng, const std::string& prefix, int in_c,
                  int out_c, int cond_dim) {
  add_norm(s, prefix + ".gn1", in_c);
  add_conv(s, rng, prefix + ".conv1", out_c, in_c, 3);
  add_dense(s, rng, prefix + ".cond", cond_dim, out_c);
  add_norm(s, prefix + ".gn2", out_c);
  add_conv(s, rng, prefix + ".conv2", out_c, out_c, 3);
  if (in_c != out_c) add_conv(s, rng, prefix + ".skip", out_c, in_c, 1);
}

}  // namespace

ParamStore init_autoencoder(const AutoencoderConfig& cfg, Rng& rng) {
  cfg.validate();
  ParamStore s;
  const int w = cfg.base_width, c = cfg.latent_channels;
  add_conv(s, rng, "enc.conv0", w, cfg.image_channels, 3);
  add_conv(s, rng, "enc.conv1", w, w, 3);       // stride 2
  add_conv(s, rng, "enc.conv2", 2 * w, w, 3);   // stride 2
  add_conv(s, rng, "enc.conv3", 2 * w, 2 * w, 3);  // stride 2
  add_conv(s, rng, "enc.out", c, 2 * w, 3);
  add_conv(s, rng, "dec.in", 2 * w, c, 3);
  add_conv(s, rng, "dec.conv0", 2 * w, 2 * w, 3);
  add_conv(s, rng, "dec.conv1", w, 2 * w, 3);
  add_conv(s, rng, "dec.conv2", w, w, 3);
  add_conv(s, rng, "dec.out", cfg.image_channels, w, 3);
  return s;
}

ParamStore init_denoiser(const DenoiserConfig& cfg, Rng& rng) {
  cfg.validate();
  ParamStore s;
  const int vocab = cfg.num_classes + 1;  // final row is the null class
  if (cfg.variant == DenoiserVariant::kDit) {
    const int d = cfg.width;
    const int tokens = (cfg.latent_size / cfg.patch) * (cfg.latent_size / cfg.patch);
    const int feat = cfg.latent_channels * cfg.patch * cfg.patch;
    add_dense(s, rng, "dit.patch", feat, d);
    s.add("dit.pos", small_normal(rng, {tokens, d}));
    add_dense(s, rng, "dit.time0", cfg.time_embed_dim, d);
    add_dense(s, rng, "dit.time1", d, d);
    s.add("dit.label", small_normal(rng, {vocab, d}));
    for (int b = 0; b < cfg.depth; ++b) {
      const std::string pre = "dit.blk" + std::to_string(b);
      add_norm(s, pre + ".ln1", d);
      add_dense(s, rng, pre + ".q", d, d, 1.0f);
      add_dense(s, rng, pre + ".k", d, d, 1.0f);
      add_dense(s, rng, pre + ".v", d, d, 1.0f);
      add_dense(s, rng, pre + ".proj", d, d, 1.0f);
      add_norm(s, pre + ".ln2", d);
      add_dense(s, rng, pre + ".mlp0", d, 4 * d);
      add_dense(s, rng, pre + ".mlp1", 4 * d, d);
    }
    add_norm(s, "dit.lnf", d);
    // Zero-initialized head: the denoiser starts as the zero map, which keeps
    // early training stable without special-casing any downstream code.
    s.add("dit.out.w", Tensor::zeros({d, feat}));
    s.add("dit.out.b", Tensor::zeros({feat}));
  } else {
    const int u = cfg.unet_base, dt = cfg.time_embed_dim;
    add_dense(s, rng, "unet.time0", dt, dt);
    add_dense(s, rng, "unet.time1", dt, dt);
    s.add("unet.label", small_normal(rng, {vocab, dt}));
    add_conv(s, rng, "unet.in", u, cfg.latent_channels, 3);
    add_resblock(s, rng, "unet.rb0", u, u, dt);
    add_conv(s, rng, "unet.down", 2 * u, u, 3);  // stride 2
    add_resblock(s, rng, "unet.rb1", 2 * u, 2 * u, dt);
    add_norm(s, "unet.attn.ln", 2 * u);
    add_dense(s, rng, "unet.attn.q", 2 * u, 2 * u, 1.0f);
    add_dense(s, rng, "unet.attn.k", 2 * u, 2 * u, 1.0f);
    add_dense(s, rng, "unet.attn.v", 2 * u, 2 * u, 1.0f);
    add_dense(s, rng, "unet.attn.proj", 2 * u, 2 * u, 1.0f);
    add_resblock(s, rng, "unet.rb2", 2 * u, 2 * u, dt);
    add_conv(s, rng, "unet.up", u, 2 * u, 3);
    add_resblock(s, rng, "unet.rb3", 2 * u, u, dt);
    add_norm(s, "unet.gnf", u);
    s.add("unet.out.w", Tensor::zeros({cfg.latent_channels, u, 3, 3}));
    s.add("unet.out.b", Tensor::zeros({cfg.latent_channels}));
  }
  return s;
}

ModelBundle make_bundle(const AutoencoderConfig& ae_cfg, const DenoiserConfig& dn_cfg,
                        const NoiseSchedule& schedule, uint64_t seed) {
  ModelBundle b;
  b.ae_config = ae_cfg;
  b.dn_config = dn_cfg;
  b.schedule = schedule;
  Rng ae_rng = Rng::derive(seed, /*purpose=*/0xae, 0);
  Rng dn_rng = Rng::derive(seed, /*purpose=*/0xd0, 0);
  b.ae = init_autoencoder(ae_cfg, ae_rng);
  b.dn = init_denoiser(dn_cfg, dn_rng);
  return b;
}

Tensor time_features(const std::vector<int>& ts, int dim) {
  if (dim <= 0 || dim % 2 != 0) throw ValueError("time feature dim must be even");
  const int n = static_cast<int>(ts.size());
  const int half = dim / 2;
  Tensor out = Tensor::zeros({n, dim});
  for (int i = 0; i < n; ++i) {
    if (ts[i] < 1) throw ValueError("timestep must be >= 1");
    for (int j = 0; j < half; ++j) {
      const double freq = std::exp(-std::log(10000.0) * j / half);
      const double ang = static_cast<double>(ts[i]) * freq;
      out[i * dim + 2 * j] = static_cast<float>(std::sin(ang));
      out[i * dim + 2 * j + 1] = static_cast<float>(std::cos(ang));
    }
  }
  return out;
}

Tensor encode(const ModelBundle& bundle, const Tensor& x) {
  TapeT<float> tape;
  NamedIds<float> p = upload_store(tape, bundle.ae, /*trainable=*/false);
  const int32_t out = encoder_graph(tape, bundle.ae_config, tape.constant(x), p);
  return tape.val(out);
}

Tensor decode(const ModelBundle& bundle, const Tensor& z) {
  TapeT<float> tape;
  NamedIds<float> p = upload_store(tape, bundle.ae, /*trainable=*/false);
  const int32_t out = decoder_graph(tape, bundle.ae_config, tape.constant(z), p);
  return tape.val(out);
}

Tensor predict_noise(const ModelBundle& bundle, const Tensor& z_t,
                     const std::vector<int>& ts, const std::vector<int>& labels) {
  for (int t : ts) {
    if (t < 1 || t > bundle.schedule.T) {
      throw ValueError("timestep " + std::to_string(t) + " outside [1, " +
                       std::to_string(bundle.schedule.T) + "]");
    }
  }
  TapeT<float> tape;
  NamedIds<float> p = upload_store(tape, bundle.dn, /*trainable=*/false);
  const int32_t out =
      denoiser_graph(tape, bundle.dn_config, tape.constant(z_t), ts, labels, p);
  return tape.val(out);
}

ModelBundle clone_frozen(const ModelBundle& bundle) {
  ModelBundle copy = bundle;
  copy.ae_frozen = true;
  copy.dn_frozen = true;
  return copy;
}

void fold_latent_scale(ParamStore& ae, const AutoencoderConfig& cfg,
                       const std::vector<float>& inv_scale) {
  const int c = cfg.latent_channels;
  if (static_cast<int>(inv_scale.size()) != c) {
    throw ShapeError("fold_latent_scale: expected one factor per latent channel");
  }
  for (float f : inv_scale) {
    if (!(f > 0.0f) || !std::isfinite(f)) {
      throw ValueError("fold_latent_scale: factors must be positive and finite");
    }
  }
  Tensor& ew = ae.at("enc.out.w");  // [c, mid, k, k]
  Tensor& eb = ae.at("enc.out.b");  // [c]
  const int64_t eslice = ew.numel() / c;
  for (int ci = 0; ci < c; ++ci) {
    for (int64_t i = 0; i < eslice; ++i) ew[ci * eslice + i] *= inv_scale[ci];
    eb[ci] *= inv_scale[ci];
  }
  // The decoder absorbs the inverse along its input-channel axis, so the
  // composite decode(encode(x)) map is unchanged up to rounding.
  Tensor& dw = ae.at("dec.in.w");  // [mid, c, k, k]
  const int mid = dw.shape[0];
  const int64_t k2 = static_cast<int64_t>(dw.shape[2]) * dw.shape[3];
  for (int f = 0; f < mid; ++f) {
    for (int ci = 0; ci < c; ++ci) {
      for (int64_t i = 0; i < k2; ++i) {
        dw[(static_cast<int64_t>(f) * c + ci) * k2 + i] /= inv_scale[ci];
      }
    }
  }
}

}  // namespace pixelpost
