// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pixelpost/data.hpp"
#include "pixelpost/losses.hpp"
#include "pixelpost/models.hpp"

namespace pixelpost {

// Adam with decoupled weight decay. Moments are allocated lazily on the first
// step so a default-constructed state can be paired with any store; after
// that, moment shapes must keep mirroring the parameter shapes.
struct OptimizerState {
  float lr = 1e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float epsilon = 1e-8f;
  float weight_decay = 5e-6f;
  int64_t step = 0;
  std::vector<Tensor> m;  // first moments, one per store slot
  std::vector<Tensor> v;  // second moments
};

// One optimizer update: standard bias-corrected Adam, then the decoupled
// decay p <- p * (1 - lr * wd). grads must align with the store slot-for-slot.
// Refuses frozen stores.
void adam_step(OptimizerState& opt, ParamStore& params, bool frozen,
               const std::vector<Tensor>& grads);

// The four optimization phases, in their natural pipeline order.
enum class Phase { kPretrainAe, kPretrainDiffusion, kSft, kPreference };
const char* phase_name(Phase phase);
Phase phase_from_name(const std::string& name);

// Which supervised objective the SFT phase optimizes; the ablation harness
// runs all three.
enum class SftObjective { kLatent, kPixel, kCombined };
const char* sft_objective_name(SftObjective objective);
SftObjective sft_objective_from_name(const std::string& name);

struct RunConfig {
  Phase phase = Phase::kSft;
  SftObjective sft_objective = SftObjective::kCombined;
  RewardMode reward_mode = RewardMode::kSimpoSimpoPixel;
  LossConfig loss;
  // -1 resolves to the phase default: 140 supervised epochs, 100 preference
  // epochs, and shorter pretraining budgets sized for the toy corpus.
  int epochs = -1;
  int batch_size = 16;
  float lr = 1e-4f;
  float weight_decay = 5e-6f;
  uint64_t seed = 0;
  // Fraction of pretraining labels replaced by the null class so the model
  // learns an unconditional mode for guidance.
  float cond_dropout = 0.1f;
  // File outputs (metrics CSV, manifest, checkpoints) land here; empty keeps
  // the run entirely in memory.
  std::string out_dir;
  std::string init_checkpoint;  // informational: where the input bundle came from
  int eval_every = 0;           // epochs between held-out evaluations; 0 = off
  int checkpoint_every = 0;     // epochs between mid-run checkpoints; 0 = final only

  int resolved_epochs() const;
  void validate() const;
};

// One metrics-stream record: a training step or a held-out evaluation.
struct StepRecord {
  int64_t step = 0;
  std::string phase;  // phase name, with an "_eval" suffix for eval records
  float loss = 0.0f;
  std::vector<std::pair<std::string, float>> components;
  double wall_ms = 0.0;
};

// Where a run stands, for checkpointing and resumption. Epochs are the resume
// granularity: every checkpoint sits on an epoch boundary, and all randomness
// is derived from (seed, epoch, batch), so restarting at `epoch` reproduces
// the uninterrupted run exactly.
struct TrainCursor {
  int epoch = 0;             // epochs completed
  int64_t step = 0;          // optimizer steps taken
  int64_t metrics_rows = 0;  // data rows already in the metrics CSV
};

// Mutable run state beyond the bundle itself. Pass a state loaded from a
// checkpoint to resume; pass a fresh one (or nothing) to start from scratch.
struct TrainState {
  OptimizerState opt;
  TrainCursor cursor;
  // Frozen reference snapshot for the reference-based preference objectives;
  // taken automatically at preference-phase start.
  ModelBundle ref;
  bool has_ref = false;
};

struct RunReport {
  std::vector<StepRecord> records;
  std::string checkpoint_path;  // final checkpoint, when out_dir is set
  std::string metrics_path;     // metrics CSV, when out_dir is set
  TrainCursor cursor;           // where the run ended
};

// Executes one training phase over the corpus: epochs x batches of
// (assemble batch, draw noise, build the objective, reverse sweep, Adam).
// Frozen sub-models are checksummed every epoch and any non-finite loss
// aborts with the offending batch serialized for replay. The bundle is
// updated in place; `state`, when given, is updated to the final cursor.
RunReport run_phase(const RunConfig& config, ModelBundle& bundle,
                    const LoadedCorpus& data, TrainState* state = nullptr);

// --- Checkpoint container ---------------------------------------------------
// Binary layout: magic "LDPX"; u32 version; u32 tensor count; per tensor a
// u16-length-prefixed UTF-8 name, u8 ndim, ndim x u32 dims, then the raw
// little-endian f32 payload; a u32-length-prefixed UTF-8 JSON block for
// configs, RNG state, and the metrics cursor; finally the CRC32 of every
// preceding byte. Loading verifies magic, version, and checksum.

constexpr uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::vector<std::pair<std::string, Tensor>> tensors;  // name -> payload
  std::string config_json;
};

void save_checkpoint_file(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint_file(const std::string& path);

// Bundle-level wrappers: serialize model + optimizer + run config + cursor
// (and the preference reference when present) into one file.
void save_checkpoint(const std::string& path, const ModelBundle& bundle,
                     const RunConfig& config, const TrainState& state);

struct LoadedCheckpoint {
  ModelBundle bundle;
  RunConfig config;
  TrainState state;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace pixelpost
