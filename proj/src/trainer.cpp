// SPDX-License-Identifier: Apache-2.0
#include "pixelpost/trainer.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace pixelpost {

namespace {

// Sub-stream purposes. Every random decision in a run is drawn from
// Rng::derive(seed, purpose, index), so a run's randomness is a pure function
// of (config, epoch, batch) and resume needs no raw generator state.
constexpr uint64_t kShuffleStream = 0x50f1;
constexpr uint64_t kBatchStream = 0xba7c;
constexpr uint64_t kEvalNoiseStream = 0xe0a1;
// Batches per epoch are namespaced under one derive() index.
constexpr uint64_t kEpochStride = 1000003;

std::string fmt_float(float v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(v));
  return buf;
}

}  // namespace

void adam_step(OptimizerState& opt, ParamStore& params, bool frozen,
               const std::vector<Tensor>& grads) {
  if (frozen) throw ValueError("adam_step: refusing to update a frozen parameter store");
  if (static_cast<int>(grads.size()) != params.size()) {
    throw ShapeError("adam_step: " + std::to_string(grads.size()) + " gradients for " +
                     std::to_string(params.size()) + " parameters");
  }
  if (opt.m.empty() && params.size() > 0) {
    for (int s = 0; s < params.size(); ++s) {
      opt.m.push_back(Tensor::zeros(params.at(s).shape));
      opt.v.push_back(Tensor::zeros(params.at(s).shape));
    }
  }
  if (static_cast<int>(opt.m.size()) != params.size() ||
      static_cast<int>(opt.v.size()) != params.size()) {
    throw ShapeError("adam_step: moment count does not match the parameter store");
  }
  ++opt.step;
  const float bc1 = 1.0f - static_cast<float>(std::pow(opt.beta1, opt.step));
  const float bc2 = 1.0f - static_cast<float>(std::pow(opt.beta2, opt.step));
  const float decay = 1.0f - opt.lr * opt.weight_decay;
  for (int s = 0; s < params.size(); ++s) {
    Tensor& p = params.at(s);
    const Tensor& g = grads[s];
    Tensor& m = opt.m[s];
    Tensor& v = opt.v[s];
    if (!p.same_shape(g) || !p.same_shape(m) || !p.same_shape(v)) {
      throw ShapeError("adam_step: shape mismatch at parameter '" + params.name(s) + "'");
    }
    for (int64_t i = 0; i < p.numel(); ++i) {
      m[i] = opt.beta1 * m[i] + (1.0f - opt.beta1) * g[i];
      v[i] = opt.beta2 * v[i] + (1.0f - opt.beta2) * g[i] * g[i];
      const float mhat = m[i] / bc1;
      const float vhat = v[i] / bc2;
      p[i] -= opt.lr * mhat / (std::sqrt(vhat) + opt.epsilon);
      p[i] *= decay;
    }
  }
}

const char* phase_name(Phase phase) {
  switch (phase) {
    case Phase::kPretrainAe: return "pretrain_ae";
    case Phase::kPretrainDiffusion: return "pretrain_diffusion";
    case Phase::kSft: return "sft";
    case Phase::kPreference: return "preference";
  }
  throw ValueError("unknown phase");
}

Phase phase_from_name(const std::string& name) {
  if (name == "pretrain_ae") return Phase::kPretrainAe;
  if (name == "pretrain_diffusion") return Phase::kPretrainDiffusion;
  if (name == "sft") return Phase::kSft;
  if (name == "preference") return Phase::kPreference;
  throw ValueError("unknown phase name '" + name + "'");
}

const char* sft_objective_name(SftObjective objective) {
  switch (objective) {
    case SftObjective::kLatent: return "latent";
    case SftObjective::kPixel: return "pixel";
    case SftObjective::kCombined: return "combined";
  }
  throw ValueError("unknown sft objective");
}

SftObjective sft_objective_from_name(const std::string& name) {
  if (name == "latent") return SftObjective::kLatent;
  if (name == "pixel") return SftObjective::kPixel;
  if (name == "combined") return SftObjective::kCombined;
  throw ValueError("unknown sft objective name '" + name + "'");
}

int RunConfig::resolved_epochs() const {
  if (epochs >= 0) return epochs;
  switch (phase) {
    case Phase::kPretrainAe: return 30;
    case Phase::kPretrainDiffusion: return 60;
    case Phase::kSft: return 140;
    case Phase::kPreference: return 100;
  }
  throw ValueError("unknown phase");
}

void RunConfig::validate() const {
  loss.validate();
  if (epochs < -1) throw ValueError("epochs must be >= 0 (or -1 for the phase default)");
  if (batch_size < 1) throw ValueError("batch_size must be >= 1");
  if (!(lr > 0.0f)) throw ValueError("learning rate must be positive");
  if (weight_decay < 0.0f) throw ValueError("weight_decay must be >= 0");
  if (cond_dropout < 0.0f || cond_dropout >= 1.0f) {
    throw ValueError("cond_dropout must be in [0, 1)");
  }
  if (eval_every < 0 || checkpoint_every < 0) {
    throw ValueError("eval/checkpoint cadences must be >= 0");
  }
}

// --- run_phase internals ----------------------------------------------------

namespace {

// [items[idx[0]], ...] stacked into one [N, ...] batch.
Tensor stack_rows(const std::vector<Tensor>& items, const std::vector<int>& idx) {
  const Tensor& first = items.at(idx.at(0));
  std::vector<int> shape = first.shape;
  shape.insert(shape.begin(), static_cast<int>(idx.size()));
  Tensor out(std::move(shape));
  const int64_t stride = first.numel();
  for (size_t n = 0; n < idx.size(); ++n) {
    const Tensor& src = items[idx[n]];
    std::copy(src.data.begin(), src.data.end(), out.data.begin() + n * stride);
  }
  return out;
}

// Encodes every sample of a split once; the autoencoder is frozen for all
// diffusion-facing phases, so cached latents stay valid for the whole run.
std::vector<Tensor> encode_split(const ModelBundle& bundle,
                                 const std::vector<ImageSample>& split) {
  std::vector<Tensor> out;
  out.reserve(split.size());
  for (const ImageSample& s : split) {
    Tensor x = s.pixels;
    x.shape.insert(x.shape.begin(), 1);
    Tensor z = encode(bundle, x);
    z.shape.erase(z.shape.begin());
    out.push_back(std::move(z));
  }
  return out;
}

json tensor_dump(const Tensor& t) {
  json j;
  j["shape"] = t.shape;
  j["data"] = t.data;
  return j;
}

double wall_since(const std::chrono::steady_clock::time_point& start) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                   start)
      .count();
}

// Append-only CSV with a lazy header: columns are step, phase, loss, the
// component keys of the first record, then wall_ms. On resume the existing
// header wins so appended rows stay aligned.
class MetricsCsv {
 public:
  void open(const std::string& path, int64_t keep_rows) {
    path_ = path;
    std::vector<std::string> kept;
    {
      std::ifstream in(path_);
      std::string line;
      if (in && std::getline(in, line)) {
        header_ = line;
        for (int64_t i = 0; i < keep_rows && std::getline(in, line); ++i) {
          kept.push_back(line);
        }
        if (static_cast<int64_t>(kept.size()) < keep_rows) {
          throw IoError("metrics CSV at " + path_ + " is shorter than the checkpoint cursor");
        }
      }
    }
    std::ofstream out(path_, std::ios::trunc);
    if (!out) throw IoError("cannot open " + path_ + " for writing");
    if (!header_.empty()) {
      out << header_ << "\n";
      parse_header();
    }
    for (const std::string& line : kept) out << line << "\n";
    out.close();
    f_.open(path_, std::ios::app);
    if (!f_) throw IoError("cannot append to " + path_);
  }

  void append(const StepRecord& r) {
    if (!f_.is_open()) return;
    if (header_.empty()) {
      std::ostringstream h;
      h << "step,phase,loss";
      for (const auto& [k, v] : r.components) {
        (void)v;
        keys_.push_back(k);
        h << "," << k;
      }
      h << ",wall_ms";
      header_ = h.str();
      f_ << header_ << "\n";
    }
    f_ << r.step << "," << r.phase << "," << fmt_float(r.loss);
    for (const std::string& k : keys_) {
      f_ << ",";
      for (const auto& [name, value] : r.components) {
        if (name == k) {
          f_ << fmt_float(value);
          break;
        }
      }
    }
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.3f", r.wall_ms);
    f_ << "," << buf << "\n";
    f_.flush();
  }

 private:
  void parse_header() {
    keys_.clear();
    std::stringstream ss(header_);
    std::string col;
    std::vector<std::string> cols;
    while (std::getline(ss, col, ',')) cols.push_back(col);
    // step, phase, loss, <keys...>, wall_ms
    for (size_t i = 3; i + 1 < cols.size(); ++i) keys_.push_back(cols[i]);
  }

  std::string path_;
  std::string header_;
  std::vector<std::string> keys_;
  std::ofstream f_;
};

// JSON marshalling shared by checkpoints and run manifests.

json ae_config_json(const AutoencoderConfig& c) {
  return json{{"image_size", c.image_size},
              {"image_channels", c.image_channels},
              {"latent_channels", c.latent_channels},
              {"base_width", c.base_width}};
}

AutoencoderConfig ae_config_from(const json& j) {
  AutoencoderConfig c;
  c.image_size = j.at("image_size").get<int>();
  c.image_channels = j.at("image_channels").get<int>();
  c.latent_channels = j.at("latent_channels").get<int>();
  c.base_width = j.at("base_width").get<int>();
  return c;
}

json dn_config_json(const DenoiserConfig& c) {
  return json{{"variant", c.variant == DenoiserVariant::kDit ? "dit" : "unet"},
              {"latent_channels", c.latent_channels},
              {"latent_size", c.latent_size},
              {"num_classes", c.num_classes},
              {"time_embed_dim", c.time_embed_dim},
              {"patch", c.patch},
              {"depth", c.depth},
              {"width", c.width},
              {"heads", c.heads},
              {"unet_base", c.unet_base},
              {"unet_groups", c.unet_groups}};
}

DenoiserConfig dn_config_from(const json& j) {
  DenoiserConfig c;
  const std::string variant = j.at("variant").get<std::string>();
  if (variant == "dit") {
    c.variant = DenoiserVariant::kDit;
  } else if (variant == "unet") {
    c.variant = DenoiserVariant::kUnet;
  } else {
    throw IoError("unknown denoiser variant '" + variant + "' in checkpoint");
  }
  c.latent_channels = j.at("latent_channels").get<int>();
  c.latent_size = j.at("latent_size").get<int>();
  c.num_classes = j.at("num_classes").get<int>();
  c.time_embed_dim = j.at("time_embed_dim").get<int>();
  c.patch = j.at("patch").get<int>();
  c.depth = j.at("depth").get<int>();
  c.width = j.at("width").get<int>();
  c.heads = j.at("heads").get<int>();
  c.unet_base = j.at("unet_base").get<int>();
  c.unet_groups = j.at("unet_groups").get<int>();
  return c;
}

json run_config_json(const RunConfig& c) {
  return json{{"phase", phase_name(c.phase)},
              {"sft_objective", sft_objective_name(c.sft_objective)},
              {"reward_mode", reward_mode_name(c.reward_mode)},
              {"lambda", c.loss.lambda},
              {"mu", c.loss.mu},
              {"beta_dpo", c.loss.beta_dpo},
              {"shared_pair_noise", c.loss.shared_pair_noise},
              {"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"lr", c.lr},
              {"weight_decay", c.weight_decay},
              {"seed", c.seed},
              {"cond_dropout", c.cond_dropout},
              {"out_dir", c.out_dir},
              {"init_checkpoint", c.init_checkpoint},
              {"eval_every", c.eval_every},
              {"checkpoint_every", c.checkpoint_every}};
}

RunConfig run_config_from(const json& j) {
  RunConfig c;
  c.phase = phase_from_name(j.at("phase").get<std::string>());
  c.sft_objective = sft_objective_from_name(j.at("sft_objective").get<std::string>());
  c.reward_mode = reward_mode_from_name(j.at("reward_mode").get<std::string>());
  c.loss.lambda = j.at("lambda").get<float>();
  c.loss.mu = j.at("mu").get<float>();
  c.loss.beta_dpo = j.at("beta_dpo").get<float>();
  c.loss.shared_pair_noise = j.at("shared_pair_noise").get<bool>();
  c.epochs = j.at("epochs").get<int>();
  c.batch_size = j.at("batch_size").get<int>();
  c.lr = j.at("lr").get<float>();
  c.weight_decay = j.at("weight_decay").get<float>();
  c.seed = j.at("seed").get<uint64_t>();
  c.cond_dropout = j.at("cond_dropout").get<float>();
  c.out_dir = j.at("out_dir").get<std::string>();
  c.init_checkpoint = j.at("init_checkpoint").get<std::string>();
  c.eval_every = j.at("eval_every").get<int>();
  c.checkpoint_every = j.at("checkpoint_every").get<int>();
  return c;
}

}  // namespace

RunReport run_phase(const RunConfig& config, ModelBundle& bundle,
                    const LoadedCorpus& data, TrainState* state_in) {
  config.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const int total_epochs = config.resolved_epochs();
  TrainState local_state;
  TrainState& st = state_in ? *state_in : local_state;
  if (st.cursor.epoch > total_epochs) {
    throw ValueError("checkpoint cursor is past the configured epoch count");
  }
  st.opt.lr = config.lr;
  st.opt.weight_decay = config.weight_decay;

  // Phase wiring: which store trains, which data feeds it, whether a frozen
  // reference is needed.
  const bool trains_ae = config.phase == Phase::kPretrainAe;
  if (trains_ae) {
    if (bundle.ae_frozen) throw ValueError("pretrain_ae requires a trainable autoencoder");
    if (data.corpus.train.empty()) throw ValueError("pretrain_ae requires a train split");
  } else {
    if (!bundle.ae_frozen) {
      throw ValueError("diffusion phases require the autoencoder to be frozen");
    }
    if (bundle.dn_frozen) throw ValueError("cannot train a frozen denoiser");
  }
  if (config.phase == Phase::kPretrainDiffusion && data.corpus.train.empty()) {
    throw ValueError("pretrain_diffusion requires a train split");
  }
  if (config.phase == Phase::kSft && data.corpus.sft.empty()) {
    throw ValueError("sft requires a curated split");
  }
  if (config.phase == Phase::kPreference && data.pairs.empty()) {
    throw ValueError("the preference phase requires a pair dataset");
  }
  const bool needs_ref = config.phase == Phase::kPreference &&
                         config.reward_mode != RewardMode::kSimpoSimpoPixel;
  if (needs_ref) {
    if (st.cursor.epoch == 0) {
      st.ref = clone_frozen(bundle);
      st.has_ref = true;
    } else if (!st.has_ref) {
      throw ValueError("resuming a reference-based preference run requires the "
                       "reference snapshot from its checkpoint");
    }
  }
  ParamStore& trained = trains_ae ? bundle.ae : bundle.dn;

  // Immutable latent caches: the frozen encoder maps each split once.
  std::vector<Tensor> latents;      // train or sft split, by phase
  std::vector<Tensor> eval_latents;
  std::vector<Tensor> pair_w, pair_l;
  std::vector<Tensor> pixels;       // raw train pixels, autoencoder phase only
  std::vector<int> labels, eval_labels, pair_labels;
  int dataset_size = 0;
  switch (config.phase) {
    case Phase::kPretrainAe:
      for (const ImageSample& s : data.corpus.train) pixels.push_back(s.pixels);
      dataset_size = static_cast<int>(pixels.size());
      break;
    case Phase::kPretrainDiffusion:
      latents = encode_split(bundle, data.corpus.train);
      for (const ImageSample& s : data.corpus.train) labels.push_back(s.label);
      dataset_size = static_cast<int>(latents.size());
      break;
    case Phase::kSft:
      latents = encode_split(bundle, data.corpus.sft);
      for (const ImageSample& s : data.corpus.sft) labels.push_back(s.label);
      dataset_size = static_cast<int>(latents.size());
      break;
    case Phase::kPreference: {
      std::vector<ImageSample> winners, losers;
      for (const PreferencePair& p : data.pairs) {
        winners.push_back(p.winner);
        losers.push_back(p.loser);
        pair_labels.push_back(p.winner.label);
      }
      pair_w = encode_split(bundle, winners);
      pair_l = encode_split(bundle, losers);
      dataset_size = static_cast<int>(pair_w.size());
      break;
    }
  }
  const bool wants_eval = config.eval_every > 0;
  if (wants_eval && config.phase != Phase::kPreference) {
    if (data.corpus.eval.empty()) {
      throw ValueError("eval cadence requires a non-empty eval split");
    }
    if (config.phase != Phase::kPretrainAe) {
      eval_latents = encode_split(bundle, data.corpus.eval);
      for (const ImageSample& s : data.corpus.eval) eval_labels.push_back(s.label);
    }
  }

  // Frozen stores must hold their exact bytes for the whole phase.
  const uint64_t ae_sum = bundle.ae.checksum();
  const uint64_t ref_sum = st.has_ref ? st.ref.dn.checksum() : 0;

  RunReport report;
  const bool to_disk = !config.out_dir.empty();
  MetricsCsv csv;
  if (to_disk) {
    fs::create_directories(config.out_dir);
    report.metrics_path = (fs::path(config.out_dir) / "metrics.csv").string();
    csv.open(report.metrics_path, st.cursor.metrics_rows);
    if (st.cursor.epoch == 0) {
      json manifest;
      manifest["build"] = PIXELPOST_BUILD_ID;
      manifest["config"] = run_config_json(config);
      manifest["resolved_epochs"] = total_epochs;
      manifest["corpus"] = json{{"seed", data.spec.seed},
                                {"image_size", data.spec.image_size},
                                {"n_train", data.corpus.train.size()},
                                {"n_sft", data.corpus.sft.size()},
                                {"n_eval", data.corpus.eval.size()},
                                {"n_pairs", data.pairs.size()}};
      std::ofstream mf(fs::path(config.out_dir) / "manifest.json");
      if (!mf) throw IoError("cannot write the run manifest in " + config.out_dir);
      mf << manifest.dump(2) << "\n";
    }
  }

  auto emit = [&](const StepRecord& r) {
    report.records.push_back(r);
    if (to_disk) {
      csv.append(r);
      ++st.cursor.metrics_rows;
    }
  };

  // One training batch: assemble data, draw noise, build the objective.
  // `dump` is filled with a replayable serialization when requested.
  auto train_batch = [&](const std::vector<int>& idx, Rng& rng,
                         json* dump) -> LossResult {
    if (config.phase == Phase::kPretrainAe) {
      Tensor x = stack_rows(pixels, idx);
      Tape tape;
      auto ids = upload_store<float>(tape, bundle.ae, /*trainable=*/true);
      const int32_t xc = tape.constant(x);
      const int32_t z = encoder_graph(tape, bundle.ae_config, xc, ids);
      const int32_t recon = decoder_graph(tape, bundle.ae_config, z, ids);
      const int32_t loss = tape.mse(recon, xc);
      LossResult res;
      res.trace = tape.finish(loss);
      res.value = res.trace.values[loss][0];
      res.diagnostics = {{"recon_mse", res.value}};
      for (int s = 0; s < bundle.ae.size(); ++s) {
        res.param_names.push_back("ae:" + bundle.ae.name(s));
      }
      if (dump) (*dump)["x"] = tensor_dump(x);
      return res;
    }
    if (config.phase == Phase::kPreference) {
      PairBatch batch;
      batch.zw = stack_rows(pair_w, idx);
      batch.zl = stack_rows(pair_l, idx);
      for (int i : idx) batch.labels.push_back(pair_labels[i]);
      PairDraw draw = draw_pair_noise(bundle.schedule, batch.zw.shape, rng,
                                      config.loss.shared_pair_noise);
      if (dump) {
        (*dump)["zw"] = tensor_dump(batch.zw);
        (*dump)["zl"] = tensor_dump(batch.zl);
        (*dump)["labels"] = batch.labels;
        (*dump)["ts"] = draw.ts;
        (*dump)["eps_w"] = tensor_dump(draw.eps_w);
        (*dump)["eps_l"] = tensor_dump(draw.eps_l);
      }
      return reward_combined(bundle, st.has_ref ? &st.ref : nullptr, batch, draw,
                             bundle.schedule, config.loss, config.reward_mode);
    }
    // Diffusion pretraining and SFT share the supervised batch shape.
    SftBatch batch;
    batch.z0 = stack_rows(latents, idx);
    for (int i : idx) batch.labels.push_back(labels[i]);
    if (config.phase == Phase::kPretrainDiffusion && config.cond_dropout > 0.0f) {
      for (int& label : batch.labels) {
        if (rng.uniform() < config.cond_dropout) label = bundle.dn_config.null_class();
      }
    }
    NoiseDraw draw = draw_noise(bundle.schedule, batch.z0.shape, rng);
    if (dump) {
      (*dump)["z0"] = tensor_dump(batch.z0);
      (*dump)["labels"] = batch.labels;
      (*dump)["ts"] = draw.ts;
      (*dump)["eps"] = tensor_dump(draw.eps);
    }
    if (config.phase == Phase::kPretrainDiffusion ||
        config.sft_objective == SftObjective::kLatent) {
      return sft_latent(bundle, batch, draw, bundle.schedule);
    }
    if (config.sft_objective == SftObjective::kPixel) {
      return sft_pixel(bundle, batch, draw, bundle.schedule);
    }
    return sft_combined(bundle, batch, draw, bundle.schedule, config.loss);
  };

  // Held-out evaluation: the same objective over the eval data with a fixed
  // per-epoch noise stream; no gradients, no parameter updates.
  auto run_eval = [&](int epoch) {
    Rng ern = Rng::derive(config.seed, kEvalNoiseStream, static_cast<uint64_t>(epoch));
    double total = 0.0;
    std::vector<std::pair<std::string, double>> comp_acc;
    int64_t count = 0;
    auto accumulate = [&](const LossResult& res, int n) {
      total += static_cast<double>(res.value) * n;
      if (comp_acc.empty()) {
        for (const auto& [k, v] : res.diagnostics) {
          comp_acc.emplace_back(k, static_cast<double>(v) * n);
        }
      } else {
        for (size_t i = 0; i < comp_acc.size(); ++i) {
          comp_acc[i].second += static_cast<double>(res.diagnostics[i].second) * n;
        }
      }
      count += n;
    };
    if (config.phase == Phase::kPretrainAe) {
      double mse = 0.0;
      int64_t elems = 0;
      for (const ImageSample& s : data.corpus.eval) {
        Tensor x = s.pixels;
        x.shape.insert(x.shape.begin(), 1);
        Tensor recon = decode(bundle, encode(bundle, x));
        for (int64_t i = 0; i < x.numel(); ++i) {
          const double d = static_cast<double>(recon[i]) - x[i];
          mse += d * d;
        }
        elems += x.numel();
      }
      const float value = static_cast<float>(mse / static_cast<double>(elems));
      StepRecord r{st.cursor.step, std::string(phase_name(config.phase)) + "_eval",
                   value, {{"recon_mse", value}}, wall_since(t0)};
      emit(r);
      return;
    }
    const auto& pool_w = config.phase == Phase::kPreference ? pair_w : eval_latents;
    const int n_eval = static_cast<int>(pool_w.size());
    for (int start = 0; start < n_eval; start += config.batch_size) {
      std::vector<int> idx;
      for (int i = start; i < std::min(start + config.batch_size, n_eval); ++i) {
        idx.push_back(i);
      }
      if (config.phase == Phase::kPreference) {
        PairBatch batch;
        batch.zw = stack_rows(pair_w, idx);
        batch.zl = stack_rows(pair_l, idx);
        for (int i : idx) batch.labels.push_back(pair_labels[i]);
        PairDraw draw = draw_pair_noise(bundle.schedule, batch.zw.shape, ern,
                                        config.loss.shared_pair_noise);
        accumulate(reward_combined(bundle, st.has_ref ? &st.ref : nullptr, batch,
                                   draw, bundle.schedule, config.loss,
                                   config.reward_mode),
                   static_cast<int>(idx.size()));
      } else {
        SftBatch batch;
        batch.z0 = stack_rows(eval_latents, idx);
        for (int i : idx) batch.labels.push_back(eval_labels[i]);
        NoiseDraw draw = draw_noise(bundle.schedule, batch.z0.shape, ern);
        LossResult res;
        if (config.phase == Phase::kPretrainDiffusion ||
            config.sft_objective == SftObjective::kLatent) {
          res = sft_latent(bundle, batch, draw, bundle.schedule);
        } else if (config.sft_objective == SftObjective::kPixel) {
          res = sft_pixel(bundle, batch, draw, bundle.schedule);
        } else {
          res = sft_combined(bundle, batch, draw, bundle.schedule, config.loss);
        }
        accumulate(res, static_cast<int>(idx.size()));
      }
    }
    StepRecord r;
    r.step = st.cursor.step;
    r.phase = std::string(phase_name(config.phase)) + "_eval";
    r.loss = static_cast<float>(total / static_cast<double>(count));
    for (const auto& [k, acc] : comp_acc) {
      r.components.emplace_back(k, static_cast<float>(acc / static_cast<double>(count)));
    }
    r.wall_ms = wall_since(t0);
    emit(r);
  };

  auto write_ckpt = [&](const std::string& name) {
    const std::string path = (fs::path(config.out_dir) / name).string();
    save_checkpoint(path, bundle, config, st);
    return path;
  };

  for (int epoch = st.cursor.epoch; epoch < total_epochs; ++epoch) {
    // Deterministic per-epoch shuffle.
    std::vector<int> order(dataset_size);
    for (int i = 0; i < dataset_size; ++i) order[i] = i;
    Rng srng = Rng::derive(config.seed, kShuffleStream, static_cast<uint64_t>(epoch));
    for (int i = dataset_size - 1; i > 0; --i) {
      const int j = static_cast<int>(srng.uniform_int(static_cast<uint64_t>(i) + 1));
      std::swap(order[i], order[j]);
    }

    const int num_batches = (dataset_size + config.batch_size - 1) / config.batch_size;
    for (int b = 0; b < num_batches; ++b) {
      std::vector<int> idx(
          order.begin() + static_cast<size_t>(b) * config.batch_size,
          order.begin() + std::min(static_cast<size_t>(b + 1) * config.batch_size,
                                   order.size()));
      Rng brng = Rng::derive(config.seed, kBatchStream,
                             static_cast<uint64_t>(epoch) * kEpochStride +
                                 static_cast<uint64_t>(b));
      LossResult res = train_batch(idx, brng, nullptr);
      if (!std::isfinite(res.value)) {
        std::string where = "(no out_dir; batch dump suppressed)";
        if (to_disk) {
          json dump;
          dump["phase"] = phase_name(config.phase);
          dump["epoch"] = epoch;
          dump["batch"] = b;
          dump["step"] = st.cursor.step;
          dump["indices"] = idx;
          Rng replay = Rng::derive(config.seed, kBatchStream,
                                   static_cast<uint64_t>(epoch) * kEpochStride +
                                       static_cast<uint64_t>(b));
          (void)train_batch(idx, replay, &dump);
          const fs::path p = fs::path(config.out_dir) /
                             ("nan_batch_step_" + std::to_string(st.cursor.step) + ".json");
          std::ofstream df(p);
          df << dump.dump() << "\n";
          where = p.string();
        }
        throw ValueError("non-finite loss at step " + std::to_string(st.cursor.step) +
                         " of phase " + phase_name(config.phase) +
                         "; offending batch: " + where);
      }
      std::vector<Tensor> grads = gradient(res.trace, Tensor::full({1}, 1.0f));
      if (grads.size() != res.param_names.size()) {
        throw ShapeError("gradient count does not match the loss parameter list");
      }
      // Loss parameter names carry an "ae:"/"dn:" store tag; in every phase
      // exactly one store is trainable, so all tags must name it.
      const std::string want_tag = trains_ae ? "ae:" : "dn:";
      std::vector<Tensor> slot_grads(trained.size());
      for (size_t i = 0; i < grads.size(); ++i) {
        const std::string& tagged = res.param_names[i];
        if (tagged.rfind(want_tag, 0) != 0) {
          throw ValueError("gradient for '" + tagged + "' does not belong to the " +
                           (trains_ae ? "autoencoder" : "denoiser"));
        }
        slot_grads[trained.slot(tagged.substr(3))] = std::move(grads[i]);
      }
      adam_step(st.opt, trained, /*frozen=*/false, slot_grads);
      ++st.cursor.step;
      emit(StepRecord{st.cursor.step, phase_name(config.phase), res.value,
                      res.diagnostics, wall_since(t0)});
    }

    st.cursor.epoch = epoch + 1;

    // Frozen stores must not have moved.
    if (!trains_ae && bundle.ae.checksum() != ae_sum) {
      throw ValueError("frozen autoencoder parameters changed during " +
                       std::string(phase_name(config.phase)));
    }
    if (st.has_ref && st.ref.dn.checksum() != ref_sum) {
      throw ValueError("the frozen reference denoiser changed during the preference phase");
    }

    if (wants_eval && st.cursor.epoch % config.eval_every == 0) run_eval(epoch);
    if (to_disk && config.checkpoint_every > 0 &&
        st.cursor.epoch % config.checkpoint_every == 0 &&
        st.cursor.epoch < total_epochs) {
      char name[32];
      std::snprintf(name, sizeof(name), "ckpt_epoch_%04d.ldpx", st.cursor.epoch);
      write_ckpt(name);
    }
  }

  if (to_disk) report.checkpoint_path = write_ckpt("ckpt_final.ldpx");
  report.cursor = st.cursor;
  return report;
}

// --- Checkpoint container ---------------------------------------------------

namespace {

void put_u16(std::string& out, uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct ByteReader {
  const std::string& buf;
  size_t pos = 0;

  void need(size_t n, const char* what) const {
    if (pos + n > buf.size()) {
      throw IoError(std::string("truncated checkpoint while reading ") + what);
    }
  }
  uint8_t u8(const char* what) {
    need(1, what);
    return static_cast<uint8_t>(buf[pos++]);
  }
  uint16_t u16(const char* what) {
    need(2, what);
    uint16_t v = 0;
    for (int i = 0; i < 2; ++i) v |= static_cast<uint16_t>(static_cast<uint8_t>(buf[pos++])) << (8 * i);
    return v;
  }
  uint32_t u32(const char* what) {
    need(4, what);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(buf[pos++])) << (8 * i);
    return v;
  }
  std::string bytes(size_t n, const char* what) {
    need(n, what);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace

void save_checkpoint_file(const std::string& path, const Checkpoint& ck) {
  std::string out;
  out += "LDPX";
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<uint32_t>(ck.tensors.size()));
  for (const auto& [name, tensor] : ck.tensors) {
    if (name.size() > 0xffff) throw ValueError("checkpoint tensor name too long: " + name);
    if (tensor.shape.size() > 0xff) {
      throw ValueError("checkpoint tensor rank too large for " + name);
    }
    put_u16(out, static_cast<uint16_t>(name.size()));
    out += name;
    out.push_back(static_cast<char>(tensor.shape.size()));
    for (int d : tensor.shape) {
      if (d < 0) throw ValueError("negative dimension in checkpoint tensor " + name);
      put_u32(out, static_cast<uint32_t>(d));
    }
    for (float v : tensor.data) put_u32(out, std::bit_cast<uint32_t>(v));
  }
  put_u32(out, static_cast<uint32_t>(ck.config_json.size()));
  out += ck.config_json;
  const uint32_t crc = static_cast<uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(out.data()), static_cast<uInt>(out.size())));
  put_u32(out, crc);

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("short write to " + path);
}

Checkpoint load_checkpoint_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  const std::string buf = ss.str();
  if (buf.size() < 16) throw IoError("truncated checkpoint " + path);

  const std::string body = buf.substr(0, buf.size() - 4);
  uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) {
    stored |= static_cast<uint32_t>(static_cast<uint8_t>(buf[buf.size() - 4 + i])) << (8 * i);
  }
  const uint32_t computed = static_cast<uint32_t>(crc32(
      0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size())));
  if (stored != computed) throw IoError("checkpoint checksum mismatch in " + path);

  ByteReader r{body};
  if (r.bytes(4, "magic") != "LDPX") throw IoError(path + " is not a checkpoint file");
  const uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version) + " in " + path);
  }
  const uint32_t count = r.u32("tensor count");
  Checkpoint ck;
  ck.tensors.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    const uint16_t name_len = r.u16("tensor name length");
    std::string name = r.bytes(name_len, "tensor name");
    const uint8_t ndim = r.u8("tensor rank");
    std::vector<int> shape(ndim);
    int64_t numel = 1;
    for (int d = 0; d < ndim; ++d) {
      shape[d] = static_cast<int>(r.u32("tensor dims"));
      numel *= shape[d];
    }
    Tensor t(std::move(shape));
    if (t.numel() != numel) throw IoError("inconsistent tensor header in " + path);
    for (int64_t e = 0; e < numel; ++e) {
      t[e] = std::bit_cast<float>(r.u32("tensor payload"));
    }
    ck.tensors.emplace_back(std::move(name), std::move(t));
  }
  const uint32_t json_len = r.u32("config length");
  ck.config_json = r.bytes(json_len, "config block");
  if (r.pos != body.size()) throw IoError("trailing bytes after the config block in " + path);
  return ck;
}

void save_checkpoint(const std::string& path, const ModelBundle& bundle,
                     const RunConfig& config, const TrainState& state) {
  Checkpoint ck;
  for (int s = 0; s < bundle.ae.size(); ++s) {
    ck.tensors.emplace_back("ae/" + bundle.ae.name(s), bundle.ae.at(s));
  }
  for (int s = 0; s < bundle.dn.size(); ++s) {
    ck.tensors.emplace_back("dn/" + bundle.dn.name(s), bundle.dn.at(s));
  }
  if (state.has_ref) {
    for (int s = 0; s < state.ref.dn.size(); ++s) {
      ck.tensors.emplace_back("ref/" + state.ref.dn.name(s), state.ref.dn.at(s));
    }
  }
  const ParamStore& trained =
      config.phase == Phase::kPretrainAe ? bundle.ae : bundle.dn;
  const bool has_moments = !state.opt.m.empty();
  if (has_moments) {
    if (static_cast<int>(state.opt.m.size()) != trained.size()) {
      throw ValueError("optimizer moments do not match the trained store");
    }
    for (int s = 0; s < trained.size(); ++s) {
      ck.tensors.emplace_back("opt/m/" + trained.name(s), state.opt.m[s]);
    }
    for (int s = 0; s < trained.size(); ++s) {
      ck.tensors.emplace_back("opt/v/" + trained.name(s), state.opt.v[s]);
    }
  }

  json j;
  j["ae_config"] = ae_config_json(bundle.ae_config);
  j["dn_config"] = dn_config_json(bundle.dn_config);
  j["schedule_betas"] = bundle.schedule.betas;
  j["run_config"] = run_config_json(config);
  j["cursor"] = json{{"epoch", state.cursor.epoch},
                     {"step", state.cursor.step},
                     {"metrics_rows", state.cursor.metrics_rows}};
  j["opt"] = json{{"lr", state.opt.lr},
                  {"beta1", state.opt.beta1},
                  {"beta2", state.opt.beta2},
                  {"epsilon", state.opt.epsilon},
                  {"weight_decay", state.opt.weight_decay},
                  {"step", state.opt.step},
                  {"has_moments", has_moments}};
  j["ae_frozen"] = bundle.ae_frozen;
  j["dn_frozen"] = bundle.dn_frozen;
  j["has_ref"] = state.has_ref;
  // The stream position equivalent to a raw generator state: all randomness
  // derives from (seed, epoch, batch), so the next batch's stream pins it.
  j["rng_state"] = Rng::derive(config.seed, kBatchStream,
                               static_cast<uint64_t>(state.cursor.epoch) * kEpochStride)
                       .state_hex();
  ck.config_json = j.dump();
  save_checkpoint_file(path, ck);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  Checkpoint ck = load_checkpoint_file(path);
  json j;
  try {
    j = json::parse(ck.config_json);
  } catch (const json::exception& e) {
    throw IoError("malformed checkpoint config block in " + path + ": " + e.what());
  }
  LoadedCheckpoint out;
  try {
    out.bundle.ae_config = ae_config_from(j.at("ae_config"));
    out.bundle.dn_config = dn_config_from(j.at("dn_config"));
    out.bundle.schedule =
        schedule_from_betas(j.at("schedule_betas").get<std::vector<double>>());
    out.config = run_config_from(j.at("run_config"));
    out.state.cursor.epoch = j.at("cursor").at("epoch").get<int>();
    out.state.cursor.step = j.at("cursor").at("step").get<int64_t>();
    out.state.cursor.metrics_rows = j.at("cursor").at("metrics_rows").get<int64_t>();
    out.state.opt.lr = j.at("opt").at("lr").get<float>();
    out.state.opt.beta1 = j.at("opt").at("beta1").get<float>();
    out.state.opt.beta2 = j.at("opt").at("beta2").get<float>();
    out.state.opt.epsilon = j.at("opt").at("epsilon").get<float>();
    out.state.opt.weight_decay = j.at("opt").at("weight_decay").get<float>();
    out.state.opt.step = j.at("opt").at("step").get<int64_t>();
    out.bundle.ae_frozen = j.at("ae_frozen").get<bool>();
    out.bundle.dn_frozen = j.at("dn_frozen").get<bool>();
    out.state.has_ref = j.at("has_ref").get<bool>();
  } catch (const json::exception& e) {
    throw IoError("missing checkpoint config field in " + path + ": " + e.what());
  }
  const bool has_moments = j.at("opt").at("has_moments").get<bool>();

  ParamStore ref_dn;
  for (auto& [name, tensor] : ck.tensors) {
    if (name.rfind("ae/", 0) == 0) {
      out.bundle.ae.add(name.substr(3), std::move(tensor));
    } else if (name.rfind("dn/", 0) == 0) {
      out.bundle.dn.add(name.substr(3), std::move(tensor));
    } else if (name.rfind("ref/", 0) == 0) {
      ref_dn.add(name.substr(4), std::move(tensor));
    } else if (name.rfind("opt/m/", 0) == 0) {
      out.state.opt.m.push_back(std::move(tensor));
    } else if (name.rfind("opt/v/", 0) == 0) {
      out.state.opt.v.push_back(std::move(tensor));
    } else {
      throw IoError("unknown tensor group for '" + name + "' in " + path);
    }
  }
  if (out.state.has_ref) {
    if (ref_dn.size() == 0) {
      throw IoError("checkpoint " + path + " claims a reference snapshot but has none");
    }
    out.state.ref.ae_config = out.bundle.ae_config;
    out.state.ref.dn_config = out.bundle.dn_config;
    out.state.ref.schedule = out.bundle.schedule;
    out.state.ref.ae = out.bundle.ae;
    out.state.ref.dn = std::move(ref_dn);
    out.state.ref.ae_frozen = true;
    out.state.ref.dn_frozen = true;
  } else if (ref_dn.size() != 0) {
    throw IoError("checkpoint " + path + " has reference tensors but no reference flag");
  }
  if (has_moments) {
    const ParamStore& trained =
        out.config.phase == Phase::kPretrainAe ? out.bundle.ae : out.bundle.dn;
    if (static_cast<int>(out.state.opt.m.size()) != trained.size() ||
        static_cast<int>(out.state.opt.v.size()) != trained.size()) {
      throw IoError("optimizer moments in " + path + " do not match the trained store");
    }
  } else if (!out.state.opt.m.empty() || !out.state.opt.v.empty()) {
    throw IoError("unexpected optimizer tensors in " + path);
  }
  return out;
}

}  // namespace pixelpost
