// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: nine subcommands covering corpus generation, the
// four training stages, sampling, evaluation, preset experiment plans, and
// report aggregation. Flag values resolve as defaults < config file <
// PIXELPOST_* environment < command line, every invocation writes a manifest
// of the fully resolved configuration, and every error is a single
// machine-parsable line on stderr.

#include <cctype>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"

#include "pixelpost/experiment.hpp"

namespace {

using namespace pixelpost;

std::string single_line(std::string s) {
  for (char& c : s) {
    if (c == '\n' || c == '\r') c = ';';
  }
  return s;
}

template <typename T>
std::string to_str(const T& v) {
  if constexpr (std::is_same_v<T, std::string>) {
    return v;
  } else if constexpr (std::is_same_v<T, bool>) {
    return v ? "true" : "false";
  } else if constexpr (std::is_floating_point_v<T>) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(v));
    return buf;
  } else {
    return std::to_string(v);
  }
}

// One subcommand's option registry: every option is registered take-last (so
// later duplicates win, which implements the precedence chain), remembers how
// to print its resolved value for the invocation manifest, and is eligible
// for config-file and environment injection by its name.
struct SubCtx {
  CLI::App* cmd = nullptr;
  std::string config_path;
  std::vector<std::pair<std::string, std::function<std::string()>>> resolved;

  void init(CLI::App& app, const std::string& name, const std::string& desc) {
    cmd = app.add_subcommand(name, desc);
    cmd->add_option("--config", config_path,
                    "flat key=value config file; PIXELPOST_* environment and flags override")
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  }

  template <typename T>
  CLI::Option* opt(const std::string& name, T& var, const std::string& help) {
    CLI::Option* o = cmd->add_option("--" + name, var, help)
                         ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    resolved.emplace_back(name, [&var] { return to_str(var); });
    return o;
  }

  std::vector<std::pair<std::string, std::string>> entries() const {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& [name, get] : resolved) out.emplace_back(name, get());
    return out;
  }
};

DenoiserVariant variant_from_name(const std::string& name) {
  if (name == "dit") return DenoiserVariant::kDit;
  if (name == "unet") return DenoiserVariant::kUnet;
  throw ValueError("unknown denoiser variant '" + name + "' (expected dit or unet)");
}

// --- per-command argument bundles --------------------------------------------

struct GenDataArgs {
  std::string out;
  CorpusSpec spec;
};

struct TrainArgs {
  std::string data, out, init, resume;
  int epochs = -1;
  int batch_size = 16;
  float lr = 1e-4f;
  float weight_decay = 5e-6f;
  uint64_t seed = 0;
  int eval_every = 0;
  int checkpoint_every = 0;
  // Autoencoder geometry (image size always follows the corpus).
  int latent_channels = 4;
  int base_width = 32;
  bool whiten = true;
  // Denoiser geometry.
  std::string variant = "dit";
  int time_embed_dim = 64;
  int patch = 1;
  int depth = 4;
  int width = 128;
  int heads = 4;
  int unet_base = 64;
  int unet_groups = 8;
  float cond_dropout = 0.1f;
  // Forward-process schedule.
  int schedule_steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  // Supervised fine-tuning.
  std::string objective = "combined";
  float lambda = 8.0f;
  // Preference fine-tuning.
  std::string mode = "simpo+simpoPix";
  float mu = 8.0f;
  float beta_dpo = 500.0f;
  bool shared_pair_noise = false;
};

struct SampleArgs {
  std::string init, out, run_id = "sample";
  int label = -1;
  int n = 4;
  int num_steps = 50;
  float guidance_scale = 3.0f;
  float eta = 0.0f;
  uint64_t seed = 0;
};

struct EvalArgs {
  std::string init, data, out, run_id;
  int n_per_class = 8;
  int num_steps = 50;
  float guidance_scale = 3.0f;
  float eta = 0.0f;
  uint64_t seed = 0;
  bool curves = false;
  int curve_draws = 100;
  int curve_latents = 8;
};

struct PlanArgs {
  std::string preset = "table5";
  std::string out, data;
  int64_t seed = -1;  // -1: all preset seeds {7, 13, 29, 42}
  int ae_epochs = -1;
  int diffusion_epochs = -1;
  int post_epochs = -1;
  int batch_size = 16;
  float lr = 1e-4f;
  int n_per_class = 8;
  int num_steps = 50;
  float guidance_scale = 3.0f;
  int curve_draws = 100;
  int schedule_steps = 1000;
  // Corpus knobs, used only when the plan generates its own data.
  int image_size = 32;
  int n_train = 512;
  int n_sft = 256;
  int n_eval = 64;
  int n_pairs = 256;
  uint64_t corpus_seed = 0;
  // Model scale.
  int latent_channels = 4;
  int base_width = 32;
  std::string variant = "dit";
  int depth = 4;
  int width = 128;
  int heads = 4;
};

struct ReportArgs {
  std::string runs, out;
};

// --- option registration ------------------------------------------------------

void add_train_common(SubCtx& c, TrainArgs& a) {
  c.opt("data", a.data, "corpus directory")->required();
  c.opt("out", a.out, "run output directory")->required();
  c.opt("resume", a.resume, "mid-run checkpoint to continue");
  c.opt("seed", a.seed, "run seed: init, shuffling, and noise streams");
  c.opt("epochs", a.epochs, "training epochs (-1: phase default)");
  c.opt("batch_size", a.batch_size, "samples per optimizer step");
  c.opt("lr", a.lr, "Adam learning rate");
  c.opt("weight_decay", a.weight_decay, "decoupled weight decay");
  c.opt("eval_every", a.eval_every, "epochs between held-out evaluations (0: off)");
  c.opt("checkpoint_every", a.checkpoint_every, "epochs between mid-run checkpoints (0: final only)");
}

void add_schedule_opts(SubCtx& c, TrainArgs& a) {
  c.opt("schedule_steps", a.schedule_steps, "forward-process timesteps T");
  c.opt("beta_start", a.beta_start, "linear beta schedule start");
  c.opt("beta_end", a.beta_end, "linear beta schedule end");
}

TrainCommand to_command(const TrainArgs& a, Phase phase) {
  TrainCommand c;
  c.data_dir = a.data;
  c.out_dir = a.out;
  c.init_checkpoint = a.init;
  c.resume_checkpoint = a.resume;
  c.run.phase = phase;
  c.run.epochs = a.epochs;
  c.run.batch_size = a.batch_size;
  c.run.lr = a.lr;
  c.run.weight_decay = a.weight_decay;
  c.run.seed = a.seed;
  c.run.eval_every = a.eval_every;
  c.run.checkpoint_every = a.checkpoint_every;
  c.run.cond_dropout = a.cond_dropout;
  c.run.sft_objective = sft_objective_from_name(a.objective);
  c.run.reward_mode = reward_mode_from_name(a.mode);
  c.run.loss.lambda = a.lambda;
  c.run.loss.mu = a.mu;
  c.run.loss.beta_dpo = a.beta_dpo;
  c.run.loss.shared_pair_noise = a.shared_pair_noise;
  c.ae_cfg.latent_channels = a.latent_channels;
  c.ae_cfg.base_width = a.base_width;
  c.dn_cfg.variant = variant_from_name(a.variant);
  c.dn_cfg.time_embed_dim = a.time_embed_dim;
  c.dn_cfg.patch = a.patch;
  c.dn_cfg.depth = a.depth;
  c.dn_cfg.width = a.width;
  c.dn_cfg.heads = a.heads;
  c.dn_cfg.unet_base = a.unet_base;
  c.dn_cfg.unet_groups = a.unet_groups;
  c.schedule_steps = a.schedule_steps;
  c.beta_start = a.beta_start;
  c.beta_end = a.beta_end;
  c.whiten_latents = a.whiten;
  return c;
}

void run_train(const SubCtx& ctx, const TrainArgs& args, Phase phase, const char* cmd_name) {
  TrainCommand cmd = to_command(args, phase);
  RunReport report = run_train_command(cmd);
  write_invocation(cmd.out_dir, cmd_name, ctx.entries());
  std::printf("%s: %d epochs done, %lld optimizer steps\n", cmd_name, report.cursor.epoch,
              static_cast<long long>(report.cursor.step));
  if (!report.metrics_path.empty()) std::printf("metrics: %s\n", report.metrics_path.c_str());
  if (!report.checkpoint_path.empty()) {
    std::printf("checkpoint: %s\n", report.checkpoint_path.c_str());
  }
}

// Pre-parse injection: expand the config file and PIXELPOST_* environment
// into --key=value tokens placed before the user's own flags, so the
// take-last policy resolves precedence.
std::vector<std::string> effective_tokens(int argc, char** argv,
                                          const std::vector<std::pair<std::string, SubCtx*>>& subs) {
  std::vector<std::string> tokens{argv[0]};
  if (argc < 2) return tokens;
  const std::string sub_name = argv[1];
  tokens.push_back(sub_name);
  const SubCtx* ctx = nullptr;
  for (const auto& [name, c] : subs) {
    if (name == sub_name) ctx = c;
  }
  if (ctx == nullptr) {
    // Top-level flag or unknown subcommand: let the parser report it.
    for (int i = 2; i < argc; ++i) tokens.emplace_back(argv[i]);
    return tokens;
  }
  std::string config_path;
  for (int i = 2; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--config" && i + 1 < argc) config_path = argv[i + 1];
    if (arg.rfind("--config=", 0) == 0) config_path = arg.substr(9);
  }
  if (!config_path.empty()) {
    for (const auto& [key, value] : parse_kv_file(config_path)) {
      if (key == "config") {
        throw ValueError(config_path + ": a config file cannot set 'config'");
      }
      tokens.push_back("--" + key + "=" + value);
    }
  }
  for (const auto& [name, get] : ctx->resolved) {
    std::string env_name = "PIXELPOST_";
    for (char c : name) env_name += static_cast<char>(c == '-' ? '_' : std::toupper(c));
    if (const char* value = std::getenv(env_name.c_str())) {
      tokens.push_back("--" + name + "=" + value);
    }
  }
  for (int i = 2; i < argc; ++i) tokens.emplace_back(argv[i]);
  return tokens;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"latent-diffusion post-training laboratory"};
  app.require_subcommand(1);

  SubCtx gen_ctx, pae_ctx, pdiff_ctx, sft_ctx, prefs_ctx, sample_ctx, eval_ctx, plan_ctx,
      report_ctx;
  GenDataArgs gen;
  TrainArgs pae, pdiff, sft, prefs;
  SampleArgs sample;
  EvalArgs eval;
  PlanArgs plan;
  ReportArgs report;

  gen_ctx.init(app, "gen-data", "render a procedural corpus with preference pairs");
  gen_ctx.opt("out", gen.out, "corpus output directory")->required();
  gen_ctx.opt("seed", gen.spec.seed, "corpus seed");
  gen_ctx.opt("image_size", gen.spec.image_size, "square image side in pixels");
  gen_ctx.opt("n_train", gen.spec.n_train, "base-tier training images");
  gen_ctx.opt("n_sft", gen.spec.n_sft, "high-quality-tier images");
  gen_ctx.opt("n_eval", gen.spec.n_eval, "held-out images");
  gen_ctx.opt("n_pairs", gen.spec.n_pairs, "winner/loser preference pairs");
  gen_ctx.opt("period_min", gen.spec.period_min, "smallest pattern period (even pixels)");
  gen_ctx.opt("period_max", gen.spec.period_max, "largest pattern period (even pixels)");
  gen_ctx.opt("blur_min", gen.spec.blur_min, "smallest degradation blur sigma");
  gen_ctx.opt("blur_max", gen.spec.blur_max, "largest degradation blur sigma");
  gen_ctx.opt("noise_max", gen.spec.noise_max, "largest degradation noise std");

  pae_ctx.init(app, "pretrain-ae", "train the autoencoder on the base tier");
  add_train_common(pae_ctx, pae);
  pae_ctx.opt("latent_channels", pae.latent_channels, "latent channels");
  pae_ctx.opt("base_width", pae.base_width, "first-stage conv width");
  pae_ctx.opt("whiten", pae.whiten, "rescale latent channels to unit std afterward");
  add_schedule_opts(pae_ctx, pae);

  pdiff_ctx.init(app, "pretrain-diffusion", "train the denoiser on frozen latents");
  add_train_common(pdiff_ctx, pdiff);
  pdiff_ctx.opt("init", pdiff.init, "autoencoder checkpoint")->required();
  pdiff_ctx.opt("cond_dropout", pdiff.cond_dropout, "label dropout fraction for guidance");
  pdiff_ctx.opt("variant", pdiff.variant, "denoiser backbone: dit or unet");
  pdiff_ctx.opt("time_embed_dim", pdiff.time_embed_dim, "timestep embedding width");
  pdiff_ctx.opt("patch", pdiff.patch, "transformer patch size");
  pdiff_ctx.opt("depth", pdiff.depth, "transformer blocks");
  pdiff_ctx.opt("width", pdiff.width, "transformer width");
  pdiff_ctx.opt("heads", pdiff.heads, "attention heads");
  pdiff_ctx.opt("unet_base", pdiff.unet_base, "u-net base channels");
  pdiff_ctx.opt("unet_groups", pdiff.unet_groups, "u-net norm groups");
  add_schedule_opts(pdiff_ctx, pdiff);

  sft_ctx.init(app, "sft", "supervised fine-tuning on the high-quality tier");
  add_train_common(sft_ctx, sft);
  sft_ctx.opt("init", sft.init, "pretrained diffusion checkpoint")->required();
  sft_ctx.opt("objective", sft.objective, "latent, pixel, or combined");
  sft_ctx.opt("lambda", sft.lambda, "pixel-term weight in the combined objective");

  prefs_ctx.init(app, "prefs", "preference fine-tuning on winner/loser pairs");
  add_train_common(prefs_ctx, prefs);
  prefs_ctx.opt("init", prefs.init, "pretrained diffusion checkpoint")->required();
  prefs_ctx.opt("mode", prefs.mode,
                "reward mode: dpo, dpo+dpoPix, dpo+simpoPix, or simpo+simpoPix");
  prefs_ctx.opt("mu", prefs.mu, "pixel-term weight in the reward objective");
  prefs_ctx.opt("beta_dpo", prefs.beta_dpo, "preference temperature");
  prefs_ctx.opt("shared_pair_noise", prefs.shared_pair_noise,
                "share one noise draw across each winner/loser pair");

  sample_ctx.init(app, "sample", "decode deterministic samples to PPM files");
  sample_ctx.opt("init", sample.init, "checkpoint to sample from")->required();
  sample_ctx.opt("out", sample.out, "output directory")->required();
  sample_ctx.opt("run_id", sample.run_id, "filename prefix");
  sample_ctx.opt("label", sample.label,
                 "class label; -1: every class, the class count itself: unconditional");
  sample_ctx.opt("n", sample.n, "images per label (image j uses seed + j)");
  sample_ctx.opt("num_steps", sample.num_steps, "deterministic solver steps");
  sample_ctx.opt("guidance_scale", sample.guidance_scale, "classifier-free guidance scale");
  sample_ctx.opt("eta", sample.eta, "solver noise weight (deterministic: 0)");
  sample_ctx.opt("seed", sample.seed, "base init-noise seed");

  eval_ctx.init(app, "eval", "score a checkpoint against the corpus");
  eval_ctx.opt("init", eval.init, "checkpoint to evaluate")->required();
  eval_ctx.opt("data", eval.data, "corpus directory")->required();
  eval_ctx.opt("out", eval.out, "directory for eval.csv")->required();
  eval_ctx.opt("run_id", eval.run_id, "report key (default: checkpoint's directory name)");
  eval_ctx.opt("n_per_class", eval.n_per_class, "samples per class for the sample metrics");
  eval_ctx.opt("num_steps", eval.num_steps, "deterministic solver steps");
  eval_ctx.opt("guidance_scale", eval.guidance_scale, "classifier-free guidance scale");
  eval_ctx.opt("eta", eval.eta, "solver noise weight (deterministic: 0)");
  eval_ctx.opt("seed", eval.seed, "sampling and profiling seed");
  eval_ctx.opt("curves", eval.curves, "also profile the two decode pathways over t");
  eval_ctx.opt("curve_draws", eval.curve_draws, "noise draws per timestep");
  eval_ctx.opt("curve_latents", eval.curve_latents, "held-out latents to profile");

  plan_ctx.init(app, "plan", "run a named experiment preset with resumable nodes");
  plan_ctx.opt("preset", plan.preset, "table5, table6, or decode-ablation")->required();
  plan_ctx.opt("out", plan.out, "plan output directory")->required();
  plan_ctx.opt("data", plan.data, "existing corpus (default: generate under <out>/corpus)");
  plan_ctx.opt("seed", plan.seed, "single training seed; -1: the preset's {7, 13, 29, 42}");
  plan_ctx.opt("ae_epochs", plan.ae_epochs, "autoencoder epochs (-1: preset default)");
  plan_ctx.opt("diffusion_epochs", plan.diffusion_epochs, "diffusion epochs (-1: preset default)");
  plan_ctx.opt("post_epochs", plan.post_epochs, "post-training epochs (-1: preset default)");
  plan_ctx.opt("batch_size", plan.batch_size, "samples per optimizer step");
  plan_ctx.opt("lr", plan.lr, "Adam learning rate");
  plan_ctx.opt("n_per_class", plan.n_per_class, "evaluation samples per class");
  plan_ctx.opt("num_steps", plan.num_steps, "evaluation solver steps");
  plan_ctx.opt("guidance_scale", plan.guidance_scale, "evaluation guidance scale");
  plan_ctx.opt("curve_draws", plan.curve_draws, "decode-ablation noise draws per timestep");
  plan_ctx.opt("schedule_steps", plan.schedule_steps, "forward-process timesteps T");
  plan_ctx.opt("image_size", plan.image_size, "generated corpus image side");
  plan_ctx.opt("n_train", plan.n_train, "generated base-tier size");
  plan_ctx.opt("n_sft", plan.n_sft, "generated high-quality-tier size");
  plan_ctx.opt("n_eval", plan.n_eval, "generated held-out size");
  plan_ctx.opt("n_pairs", plan.n_pairs, "generated preference pairs");
  plan_ctx.opt("corpus_seed", plan.corpus_seed, "generated corpus seed");
  plan_ctx.opt("latent_channels", plan.latent_channels, "latent channels");
  plan_ctx.opt("base_width", plan.base_width, "autoencoder first-stage width");
  plan_ctx.opt("variant", plan.variant, "denoiser backbone: dit or unet");
  plan_ctx.opt("depth", plan.depth, "transformer blocks");
  plan_ctx.opt("width", plan.width, "transformer width");
  plan_ctx.opt("heads", plan.heads, "attention heads");

  report_ctx.init(app, "report", "aggregate run CSVs into one comparison table");
  report_ctx.opt("runs", report.runs, "directory tree holding run outputs")->required();
  report_ctx.opt("out", report.out, "write the table here instead of stdout");

  const std::vector<std::pair<std::string, SubCtx*>> subs = {
      {"gen-data", &gen_ctx},   {"pretrain-ae", &pae_ctx}, {"pretrain-diffusion", &pdiff_ctx},
      {"sft", &sft_ctx},        {"prefs", &prefs_ctx},     {"sample", &sample_ctx},
      {"eval", &eval_ctx},      {"plan", &plan_ctx},       {"report", &report_ctx},
  };

  try {
    std::vector<std::string> tokens = effective_tokens(argc, argv, subs);
    std::vector<const char*> ptrs;
    ptrs.reserve(tokens.size());
    for (const std::string& t : tokens) ptrs.push_back(t.c_str());
    try {
      app.parse(static_cast<int>(ptrs.size()), ptrs.data());
    } catch (const CLI::CallForHelp& e) {
      return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
      return app.exit(e);
    } catch (const CLI::ParseError& e) {
      std::fprintf(stderr, "error: usage: %s\n", single_line(e.what()).c_str());
      return 2;
    }

    if (gen_ctx.cmd->parsed()) {
      generate_and_save_corpus(gen.spec, gen.out);
      write_invocation(gen.out, "gen-data", gen_ctx.entries());
      std::printf("wrote corpus to %s (train %d, sft %d, eval %d, pairs %d)\n", gen.out.c_str(),
                  gen.spec.n_train, gen.spec.n_sft, gen.spec.n_eval, gen.spec.n_pairs);
    } else if (pae_ctx.cmd->parsed()) {
      run_train(pae_ctx, pae, Phase::kPretrainAe, "pretrain-ae");
    } else if (pdiff_ctx.cmd->parsed()) {
      run_train(pdiff_ctx, pdiff, Phase::kPretrainDiffusion, "pretrain-diffusion");
    } else if (sft_ctx.cmd->parsed()) {
      run_train(sft_ctx, sft, Phase::kSft, "sft");
    } else if (prefs_ctx.cmd->parsed()) {
      run_train(prefs_ctx, prefs, Phase::kPreference, "prefs");
    } else if (sample_ctx.cmd->parsed()) {
      SampleCommand cmd;
      cmd.init_checkpoint = sample.init;
      cmd.out_dir = sample.out;
      cmd.run_id = sample.run_id;
      cmd.label = sample.label;
      cmd.per_label = sample.n;
      cmd.sampler.num_steps = sample.num_steps;
      cmd.sampler.guidance_scale = sample.guidance_scale;
      cmd.sampler.eta = sample.eta;
      cmd.seed = sample.seed;
      std::vector<std::string> paths = run_sample_command(cmd);
      write_invocation(cmd.out_dir, "sample", sample_ctx.entries());
      for (const std::string& p : paths) std::printf("%s\n", p.c_str());
      std::printf("wrote %zu samples to %s\n", paths.size(), cmd.out_dir.c_str());
    } else if (eval_ctx.cmd->parsed()) {
      EvalCommand cmd;
      cmd.init_checkpoint = eval.init;
      cmd.data_dir = eval.data;
      cmd.out_dir = eval.out;
      cmd.eval.run_id = eval.run_id;
      cmd.eval.n_per_class = eval.n_per_class;
      cmd.eval.sampler.num_steps = eval.num_steps;
      cmd.eval.sampler.guidance_scale = eval.guidance_scale;
      cmd.eval.sampler.eta = eval.eta;
      cmd.eval.seed = eval.seed;
      cmd.eval.curves = eval.curves;
      cmd.eval.curve_draws = eval.curve_draws;
      cmd.eval.curve_latents = eval.curve_latents;
      std::vector<MetricRow> rows = run_eval_command(cmd);
      write_invocation(cmd.out_dir, "eval", eval_ctx.entries());
      for (const MetricRow& r : rows) {
        std::printf("%s %.9g\n", r.metric.c_str(), r.value);
        if (r.metric == "flagged_untrained" && r.value != 0.0) {
          std::fprintf(stderr,
                       "note: conditioning accuracy below chance + 10 points; model flagged "
                       "untrained (diagnostic, not a failure)\n");
        }
      }
      std::printf("wrote %s/eval.csv\n", cmd.out_dir.c_str());
    } else if (plan_ctx.cmd->parsed()) {
      PresetConfig pc;
      pc.preset = plan.preset;
      pc.out_dir = plan.out;
      pc.data_dir = plan.data;
      if (plan.seed >= 0) pc.seeds = {static_cast<uint64_t>(plan.seed)};
      pc.ae_epochs = plan.ae_epochs;
      pc.diffusion_epochs = plan.diffusion_epochs;
      pc.post_epochs = plan.post_epochs;
      pc.batch_size = plan.batch_size;
      pc.lr = plan.lr;
      pc.corpus.image_size = plan.image_size;
      pc.corpus.n_train = plan.n_train;
      pc.corpus.n_sft = plan.n_sft;
      pc.corpus.n_eval = plan.n_eval;
      pc.corpus.n_pairs = plan.n_pairs;
      pc.corpus.seed = plan.corpus_seed;
      pc.ae_cfg.latent_channels = plan.latent_channels;
      pc.ae_cfg.base_width = plan.base_width;
      pc.dn_cfg.variant = variant_from_name(plan.variant);
      pc.dn_cfg.depth = plan.depth;
      pc.dn_cfg.width = plan.width;
      pc.dn_cfg.heads = plan.heads;
      pc.schedule_steps = plan.schedule_steps;
      pc.eval.n_per_class = plan.n_per_class;
      pc.eval.sampler.num_steps = plan.num_steps;
      pc.eval.sampler.guidance_scale = plan.guidance_scale;
      pc.eval.curve_draws = plan.curve_draws;
      ExperimentPlan ep = build_preset(pc);
      PlanOutcome outcome = run_plan(ep, &std::cout);
      write_invocation(pc.out_dir, "plan", plan_ctx.entries());
      std::printf("plan %s: %zu nodes executed, %zu skipped; comparison at %s/comparison.csv\n",
                  pc.preset.c_str(), outcome.executed.size(), outcome.skipped.size(),
                  pc.out_dir.c_str());
    } else if (report_ctx.cmd->parsed()) {
      std::vector<MetricRow> rows = collect_metric_rows(report.runs);
      for (const std::string& run : flagged_runs(rows)) {
        std::fprintf(stderr,
                     "note: %s flagged untrained (conditioning accuracy below chance + 10 "
                     "points; diagnostic, not a failure)\n",
                     run.c_str());
      }
      const std::string table = comparison_table(rows);
      if (report.out.empty()) {
        std::fputs(table.c_str(), stdout);
      } else {
        std::ofstream out(report.out, std::ios::binary | std::ios::trunc);
        if (!out || !(out << table).flush()) {
          throw IoError("cannot write report to '" + report.out + "'");
        }
        std::printf("wrote %s\n", report.out.c_str());
      }
    }
    return 0;
  } catch (const ValueError& e) {
    std::fprintf(stderr, "error: invalid-argument: %s\n", single_line(e.what()).c_str());
    return 2;
  } catch (const ShapeError& e) {
    std::fprintf(stderr, "error: shape: %s\n", single_line(e.what()).c_str());
    return 1;
  } catch (const IoError& e) {
    std::fprintf(stderr, "error: io: %s\n", single_line(e.what()).c_str());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: internal: %s\n", single_line(e.what()).c_str());
    return 1;
  }
}
