// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "pixelpost/data.hpp"
#include "pixelpost/metrics.hpp"
#include "pixelpost/sampler.hpp"
#include "pixelpost/trainer.hpp"

namespace pixelpost {

// Orchestration layer behind the command-line tool: fully resolved commands
// for each pipeline stage, CSV metric reports, and named multi-run experiment
// plans with checksum-verified resumption. Everything here is deterministic
// given its inputs; the CLI only parses flags and forwards.

// Version/compiler/build-type string stamped into manifests.
const std::string& build_id();

// --- Flat key=value configuration --------------------------------------------
// One `key = value` per line; '#' starts a comment; blank lines and
// surrounding whitespace are ignored. Later duplicates of a key win wherever
// the list is applied in order. Throws ValueError naming the offending line.
std::vector<std::pair<std::string, std::string>> parse_kv_text(const std::string& text);
std::vector<std::pair<std::string, std::string>> parse_kv_file(const std::string& path);

// --- Metric reports -----------------------------------------------------------
// The atomic report unit everywhere: one scalar keyed by run and checkpoint
// step. Files hold these as four-column CSV.
struct MetricRow {
  std::string run_id;
  int64_t step = 0;
  std::string metric;
  double value = 0.0;
};

void write_metric_csv(const std::string& path, const std::vector<MetricRow>& rows);
std::vector<MetricRow> read_metric_csv(const std::string& path);

// Recursively collects every eval.csv and curves.csv under `root`, in sorted
// path order. Throws IoError("no runs found ...") when there are none.
std::vector<MetricRow> collect_metric_rows(const std::string& root);

// Long rows -> wide comparison table as CSV text: one row per (run_id, step),
// one column per metric, empty cells where a run lacks a metric.
std::string comparison_table(const std::vector<MetricRow>& rows);

// Run ids whose "flagged_untrained" metric is nonzero: conditioning accuracy
// under chance + 10 points. A reporting flag, never a failure.
std::vector<std::string> flagged_runs(const std::vector<MetricRow>& rows);

// --- Resolved pipeline commands ----------------------------------------------

// One training-stage invocation. `run.phase` selects the stage; fresh runs
// assemble the model from the stage inputs (below), `resume_checkpoint`
// instead continues a saved run and only lets `run.epochs` extend the target.
struct TrainCommand {
  std::string data_dir;
  std::string out_dir;
  std::string init_checkpoint;    // upstream stage's final checkpoint
  std::string resume_checkpoint;  // mid-run checkpoint to continue
  RunConfig run;
  // Fresh-model geometry. The autoencoder's image size always follows the
  // corpus; the denoiser's latent shape always follows the autoencoder.
  AutoencoderConfig ae_cfg;
  DenoiserConfig dn_cfg;
  int schedule_steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  // After autoencoder pretraining, rescale each latent channel to unit
  // standard deviation over the train split (decode(encode(x)) preserved),
  // so the diffusion stage sees latents matched to its unit-variance noise.
  bool whiten_latents = true;
};

RunReport run_train_command(const TrainCommand& cmd);
RunReport run_train_command(const TrainCommand& cmd, const LoadedCorpus& data);

// Deterministic sample sheet: `per_label` images for one class (or every
// class when label is -1; the class count's index is the unconditional null).
// Image j of a label uses seed + j, so every file is reproducible from its
// own name alone.
struct SampleCommand {
  std::string init_checkpoint;
  std::string out_dir;
  std::string run_id = "sample";
  int label = -1;
  int per_label = 1;
  SamplerConfig sampler;
  uint64_t seed = 0;
};

std::vector<std::string> run_sample_command(const SampleCommand& cmd);

// What one evaluation measures. Sample metrics draw n_per_class images per
// family and score spectra, flaws, and conditioning against the corpus;
// curve metrics profile the two decode pathways over a timestep grid.
struct EvalConfig {
  std::string run_id;
  int64_t step = 0;
  bool sample_metrics = true;
  int n_per_class = 8;
  SamplerConfig sampler;
  uint64_t seed = 0;
  bool curves = false;
  int curve_draws = 100;
  int curve_latents = 8;
  std::vector<int> curve_ts;  // empty: nine evenly spaced interior timesteps
};

std::vector<MetricRow> evaluate_bundle(const ModelBundle& bundle, const LoadedCorpus& data,
                                       const EvalConfig& cfg);

struct EvalCommand {
  std::string init_checkpoint;
  std::string data_dir;
  std::string out_dir;
  EvalConfig eval;  // empty run_id: the checkpoint's parent directory name
};

// Loads the checkpoint, evaluates, writes <out_dir>/eval.csv (curve rows go
// to curves.csv when enabled without sample metrics), returns the rows.
std::vector<MetricRow> run_eval_command(const EvalCommand& cmd);

// Renders and persists a corpus directory: images, pairs, manifest.
void generate_and_save_corpus(const CorpusSpec& spec, const std::string& dir);

// --- Experiment plans ---------------------------------------------------------

// One unit of work in a plan. Dependencies must name earlier nodes, which
// keeps the graph acyclic by construction; outputs are the files that must
// exist and verify for the node to count as complete.
struct PlanNode {
  std::string name;
  std::vector<std::string> deps;
  std::vector<std::string> outputs;
  std::function<void()> run;
};

struct ExperimentPlan {
  std::vector<PlanNode> nodes;
  // Unique names, every dependency resolving to an earlier node.
  void validate() const;
  int index_of(const std::string& name) const;  // -1 when absent
};

// True when the file exists and passes its integrity check: checkpoints
// (.ldpx) must load with a valid checksum, anything else must be non-empty.
bool output_verified(const std::string& path);

struct PlanOutcome {
  std::vector<std::string> executed;
  std::vector<std::string> skipped;
};

// Runs nodes in order. A node whose outputs all verify is skipped; otherwise
// its dependencies' outputs are re-checked (missing dependency is an error),
// the node runs, and its outputs are verified before moving on. `log`, when
// given, receives one line per node.
PlanOutcome run_plan(const ExperimentPlan& plan, std::ostream* log = nullptr);

// Shared knobs for the named presets. Epoch fields at -1 resolve to desk
// defaults sized so the full four-seed matrix stays inside the acceptance
// runtime budget; every field can be overridden.
struct PresetConfig {
  std::string preset = "table5";  // table5 | table6 | decode-ablation
  std::string data_dir;           // empty: generate under <out_dir>/corpus
  std::string out_dir;
  std::vector<uint64_t> seeds = {7, 13, 29, 42};
  CorpusSpec corpus;  // used only when generating
  int ae_epochs = -1;
  int diffusion_epochs = -1;
  int post_epochs = -1;
  int batch_size = 16;
  float lr = 1e-4f;
  AutoencoderConfig ae_cfg;
  DenoiserConfig dn_cfg;
  int schedule_steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  EvalConfig eval;
};

// table5: latent / pixel / combined supervised fine-tuning variants.
// table6: the four preference reward modes.
// decode-ablation: inversion-path vs decode-at-t variance profiles.
// Every preset chains corpus (when generating) -> autoencoder -> diffusion
// pretraining per seed, fans out into its variants, evaluates each (plus the
// pretrained baseline), and merges everything into <out_dir>/comparison.csv.
ExperimentPlan build_preset(const PresetConfig& cfg);

// Writes <dir>/invocation_<command>.json: the command, build id, and the
// fully resolved key=value configuration that reproduces the invocation.
void write_invocation(const std::string& dir, const std::string& command,
                      const std::vector<std::pair<std::string, std::string>>& entries);

}  // namespace pixelpost
