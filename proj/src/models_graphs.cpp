// SPDX-License-Identifier: Apache-2.0
//
// Graph builders for the autoencoder and both denoiser backbones. Everything
// here records onto a caller-owned tape so that losses can stitch several
// model invocations (policy, reference, decoder) into one differentiable
// graph.
#include <string>
#include <vector>

#include "pixelpost/models.hpp"

namespace pixelpost {

template <typename S>
NamedIds<S> upload_store(TapeT<S>& tape, const ParamStore& store, bool trainable) {
  NamedIds<S> out;
  out.store = &store;
  out.ids.reserve(store.size());
  for (int s = 0; s < store.size(); ++s) {
    const TensorT<S> v = to_scalar<S>(store.at(s));
    out.ids.push_back(trainable ? tape.param(v) : tape.constant(v));
  }
  return out;
}

namespace {

template <typename S>
void expect_image(const TapeT<S>& tape, int32_t x, int channels, int size,
                  const char* who) {
  const auto& shp = tape.val(x).shape;
  if (shp.size() != 4 || shp[1] != channels || shp[2] != size || shp[3] != size) {
    throw ShapeError(std::string(who) + ": expected [N," + std::to_string(channels) +
                     "," + std::to_string(size) + "," + std::to_string(size) +
                     "], got " + Tensor::shape_str(shp));
  }
}

// gn -> silu -> conv, the repeated convolutional unit.
template <typename S>
int32_t norm_act_conv(TapeT<S>& tape, const NamedIds<S>& p, const std::string& norm,
                      const std::string& conv, int groups, int32_t x, int stride) {
  const int32_t n = tape.group_norm(x, p(norm + ".g"), p(norm + ".b"), groups);
  return tape.conv2d(tape.silu(n), p(conv + ".w"), p(conv + ".b"), stride, 1);
}

template <typename S>
int32_t resblock(TapeT<S>& tape, const NamedIds<S>& p, const std::string& pre,
                 int groups, int32_t x, int32_t cond) {
  int32_t h = norm_act_conv(tape, p, pre + ".gn1", pre + ".conv1", groups, x, 1);
  const int32_t shift =
      tape.dense(tape.silu(cond), p(pre + ".cond.w"), p(pre + ".cond.b"));
  h = tape.add_rows_spatial(h, shift);
  h = norm_act_conv(tape, p, pre + ".gn2", pre + ".conv2", groups, h, 1);
  const int32_t skip = p.store->has(pre + ".skip.w")
                           ? tape.conv2d(x, p(pre + ".skip.w"), p(pre + ".skip.b"), 1, 0)
                           : x;
  return tape.add(skip, h);
}

// Token-space self-attention with pre-norm and a residual, shared by the
// transformer blocks and the u-net's mid attention.
template <typename S>
int32_t attention_block(TapeT<S>& tape, const NamedIds<S>& p, const std::string& ln,
                        const std::string& pre, int heads, int32_t x) {
  const int32_t a = tape.layer_norm(x, p(ln + ".g"), p(ln + ".b"));
  const int32_t q = tape.dense(a, p(pre + ".q.w"), p(pre + ".q.b"));
  const int32_t k = tape.dense(a, p(pre + ".k.w"), p(pre + ".k.b"));
  const int32_t v = tape.dense(a, p(pre + ".v.w"), p(pre + ".v.b"));
  const int32_t att = tape.attention(q, k, v, heads);
  return tape.add(x, tape.dense(att, p(pre + ".proj.w"), p(pre + ".proj.b")));
}

}  // namespace

template <typename S>
int32_t encoder_graph(TapeT<S>& tape, const AutoencoderConfig& cfg, int32_t x,
                      const NamedIds<S>& p) {
  cfg.validate();
  expect_image(tape, x, cfg.image_channels, cfg.image_size, "encode");
  int32_t h = tape.silu(tape.conv2d(x, p("enc.conv0.w"), p("enc.conv0.b"), 1, 1));
  h = tape.silu(tape.conv2d(h, p("enc.conv1.w"), p("enc.conv1.b"), 2, 1));
  h = tape.silu(tape.conv2d(h, p("enc.conv2.w"), p("enc.conv2.b"), 2, 1));
  h = tape.silu(tape.conv2d(h, p("enc.conv3.w"), p("enc.conv3.b"), 2, 1));
  return tape.conv2d(h, p("enc.out.w"), p("enc.out.b"), 1, 1);
}

template <typename S>
int32_t decoder_graph(TapeT<S>& tape, const AutoencoderConfig& cfg, int32_t z,
                      const NamedIds<S>& p) {
  cfg.validate();
  expect_image(tape, z, cfg.latent_channels, cfg.latent_size(), "decode");
  int32_t h = tape.silu(tape.conv2d(z, p("dec.in.w"), p("dec.in.b"), 1, 1));
  h = tape.upsample_nearest_2x(h);
  h = tape.silu(tape.conv2d(h, p("dec.conv0.w"), p("dec.conv0.b"), 1, 1));
  h = tape.upsample_nearest_2x(h);
  h = tape.silu(tape.conv2d(h, p("dec.conv1.w"), p("dec.conv1.b"), 1, 1));
  h = tape.upsample_nearest_2x(h);
  h = tape.silu(tape.conv2d(h, p("dec.conv2.w"), p("dec.conv2.b"), 1, 1));
  h = tape.conv2d(h, p("dec.out.w"), p("dec.out.b"), 1, 1);
  // Squash to (-1, 1), then map affinely onto the pixel range (0, 1).
  return tape.add_const(tape.scale(tape.tanh_(h), 0.5), 0.5);
}

namespace {

// Shared conditioning vector: mlp(time features) + label embedding. Width of
// the result is the mlp's output dimension.
template <typename S>
int32_t conditioning(TapeT<S>& tape, const NamedIds<S>& p, const std::string& prefix,
                     const DenoiserConfig& cfg, const std::vector<int>& ts,
                     const std::vector<int>& labels) {
  for (int lab : labels) {
    if (lab < 0 || lab > cfg.num_classes) {
      throw ValueError("label " + std::to_string(lab) + " outside [0, " +
                       std::to_string(cfg.num_classes) + "] (last slot is the null class)");
    }
  }
  const int32_t tfeat =
      tape.constant(to_scalar<S>(time_features(ts, cfg.time_embed_dim)));
  int32_t t = tape.dense(tfeat, p(prefix + ".time0.w"), p(prefix + ".time0.b"));
  t = tape.dense(tape.silu(t), p(prefix + ".time1.w"), p(prefix + ".time1.b"));
  const int32_t lab = tape.embedding(p(prefix + ".label"), labels);
  return tape.add(t, lab);
}

template <typename S>
int32_t dit_graph(TapeT<S>& tape, const DenoiserConfig& cfg, int32_t z_t,
                  const std::vector<int>& ts, const std::vector<int>& labels,
                  const NamedIds<S>& p) {
  int32_t x = tape.patchify(z_t, cfg.patch);
  x = tape.dense(x, p("dit.patch.w"), p("dit.patch.b"));
  x = tape.add_positional(x, p("dit.pos"));
  x = tape.add_rows_tokens(x, conditioning(tape, p, "dit", cfg, ts, labels));
  for (int b = 0; b < cfg.depth; ++b) {
    const std::string pre = "dit.blk" + std::to_string(b);
    x = attention_block(tape, p, pre + ".ln1", pre, cfg.heads, x);
    const int32_t m = tape.layer_norm(x, p(pre + ".ln2.g"), p(pre + ".ln2.b"));
    const int32_t m1 = tape.gelu(tape.dense(m, p(pre + ".mlp0.w"), p(pre + ".mlp0.b")));
    x = tape.add(x, tape.dense(m1, p(pre + ".mlp1.w"), p(pre + ".mlp1.b")));
  }
  x = tape.layer_norm(x, p("dit.lnf.g"), p("dit.lnf.b"));
  x = tape.dense(x, p("dit.out.w"), p("dit.out.b"));
  return tape.unpatchify(x, cfg.patch, cfg.latent_channels, cfg.latent_size,
                         cfg.latent_size);
}

template <typename S>
int32_t unet_graph(TapeT<S>& tape, const DenoiserConfig& cfg, int32_t z_t,
                   const std::vector<int>& ts, const std::vector<int>& labels,
                   const NamedIds<S>& p) {
  const int g = cfg.unet_groups;
  const int32_t cond = conditioning(tape, p, "unet", cfg, ts, labels);
  int32_t h = tape.conv2d(z_t, p("unet.in.w"), p("unet.in.b"), 1, 1);
  const int32_t l1 = resblock(tape, p, "unet.rb0", g, h, cond);
  h = tape.conv2d(l1, p("unet.down.w"), p("unet.down.b"), 2, 1);
  h = resblock(tape, p, "unet.rb1", g, h, cond);
  // Mid attention treats each low-resolution pixel as a token.
  {
    const int32_t tok = tape.patchify(h, 1);
    const int32_t att = attention_block(tape, p, "unet.attn.ln", "unet.attn",
                                         cfg.heads, tok);
    const auto& shp = tape.val(h).shape;
    h = tape.unpatchify(att, 1, shp[1], shp[2], shp[3]);
  }
  h = resblock(tape, p, "unet.rb2", g, h, cond);
  h = tape.upsample_nearest_2x(h);
  h = tape.conv2d(h, p("unet.up.w"), p("unet.up.b"), 1, 1);
  h = tape.concat_channels(h, l1);
  h = resblock(tape, p, "unet.rb3", g, h, cond);
  h = tape.group_norm(h, p("unet.gnf.g"), p("unet.gnf.b"), g);
  return tape.conv2d(tape.silu(h), p("unet.out.w"), p("unet.out.b"), 1, 1);
}

}  // namespace

template <typename S>
int32_t denoiser_graph(TapeT<S>& tape, const DenoiserConfig& cfg, int32_t z_t,
                       const std::vector<int>& ts, const std::vector<int>& labels,
                       const NamedIds<S>& p) {
  cfg.validate();
  expect_image(tape, z_t, cfg.latent_channels, cfg.latent_size, "predict_noise");
  const int n = tape.val(z_t).shape[0];
  if (static_cast<int>(ts.size()) != n || static_cast<int>(labels.size()) != n) {
    throw ShapeError("predict_noise: need one timestep and one label per sample");
  }
  return cfg.variant == DenoiserVariant::kDit
             ? dit_graph(tape, cfg, z_t, ts, labels, p)
             : unet_graph(tape, cfg, z_t, ts, labels, p);
}

// The double instantiations exist for the finite-difference oracle, which
// re-runs these forward graphs in double to sidestep the float noise floor.
template NamedIds<float> upload_store(TapeT<float>&, const ParamStore&, bool);
template NamedIds<double> upload_store(TapeT<double>&, const ParamStore&, bool);
template int32_t encoder_graph(TapeT<float>&, const AutoencoderConfig&, int32_t,
                               const NamedIds<float>&);
template int32_t encoder_graph(TapeT<double>&, const AutoencoderConfig&, int32_t,
                               const NamedIds<double>&);
template int32_t decoder_graph(TapeT<float>&, const AutoencoderConfig&, int32_t,
                               const NamedIds<float>&);
template int32_t decoder_graph(TapeT<double>&, const AutoencoderConfig&, int32_t,
                               const NamedIds<double>&);
template int32_t denoiser_graph(TapeT<float>&, const DenoiserConfig&, int32_t,
                                const std::vector<int>&, const std::vector<int>&,
                                const NamedIds<float>&);
template int32_t denoiser_graph(TapeT<double>&, const DenoiserConfig&, int32_t,
                                const std::vector<int>&, const std::vector<int>&,
                                const NamedIds<double>&);

}  // namespace pixelpost
