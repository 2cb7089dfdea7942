// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "pixelpost/trainer.hpp"
#include "test_util.hpp"

using namespace pixelpost;
using namespace pixelpost::testutil;
namespace fs = std::filesystem;

namespace {

constexpr double kLn2 = 0.6931471805599453;

// Tiny end-to-end fixture: 16x16 images, 2x2x4 latents, a handful of samples
// per split so a whole phase runs in well under a second.
LoadedCorpus tiny_corpus() {
  CorpusSpec spec;
  spec.image_size = 16;
  spec.n_train = 8;
  spec.n_sft = 8;
  spec.n_eval = 4;
  spec.n_pairs = 4;
  spec.seed = 99;
  LoadedCorpus data;
  data.spec = spec;
  data.corpus = generate_corpus(spec);
  data.pairs = generate_pairs(spec);
  return data;
}

ModelBundle tiny_bundle(uint64_t seed, bool freeze_ae) {
  AutoencoderConfig ae;
  ae.image_size = 16;
  ae.base_width = 8;
  DenoiserConfig dn;
  dn.latent_channels = 4;
  dn.latent_size = 2;
  dn.num_classes = kNumFamilies;
  dn.time_embed_dim = 8;
  dn.depth = 2;
  dn.width = 16;
  dn.heads = 2;
  ModelBundle b = make_bundle(ae, dn, linear_schedule(100, 1e-4, 0.02), seed);
  b.ae_frozen = freeze_ae;
  return b;
}

RunConfig base_config(Phase phase, uint64_t seed) {
  RunConfig cfg;
  cfg.phase = phase;
  cfg.seed = seed;
  cfg.batch_size = 4;
  cfg.epochs = 1;
  return cfg;
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(bool(f));
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// CSV rows with the wall-clock column dropped; everything else in the
// metrics stream is deterministic and must match across identical runs.
std::vector<std::string> csv_without_wall(const std::string& path) {
  std::ifstream f(path);
  REQUIRE(bool(f));
  std::vector<std::string> rows;
  std::string line;
  while (std::getline(f, line)) {
    const size_t cut = line.rfind(',');
    REQUIRE(cut != std::string::npos);
    rows.push_back(line.substr(0, cut));
  }
  return rows;
}

bool stores_equal(const ParamStore& a, const ParamStore& b) {
  if (a.size() != b.size()) return false;
  for (int s = 0; s < a.size(); ++s) {
    if (a.name(s) != b.name(s) || !bits_equal(a.at(s), b.at(s))) return false;
  }
  return true;
}

fs::path fresh_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / "pixelpost_trainer_tests" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("one optimizer step matches the hand-computed update") {
  ParamStore store;
  store.add("w", Tensor::full({1}, 1.0f));
  OptimizerState opt;
  opt.lr = 0.1f;
  opt.beta1 = 0.0f;
  opt.beta2 = 0.0f;
  opt.weight_decay = 0.0f;
  std::vector<Tensor> grads{Tensor::full({1}, 1.0f)};
  adam_step(opt, store, false, grads);
  // With no moment averaging: p -= lr * g / (|g| + eps) = 1 - 0.1.
  CHECK(store.at("w")[0] == doctest::Approx(0.9).epsilon(1e-6));
  CHECK(opt.step == 1);
}

TEST_CASE("a zero gradient leaves parameters bit-identical") {
  Rng rng(5);
  ParamStore store;
  store.add("a", rand_tensor(rng, {3, 2}));
  store.add("b", rand_tensor(rng, {4}));
  const Tensor a0 = store.at("a");
  const Tensor b0 = store.at("b");
  OptimizerState opt;
  opt.weight_decay = 0.0f;
  std::vector<Tensor> grads{Tensor::zeros({3, 2}), Tensor::zeros({4})};
  for (int i = 0; i < 3; ++i) adam_step(opt, store, false, grads);
  CHECK(bits_equal(store.at("a"), a0));
  CHECK(bits_equal(store.at("b"), b0));
}

TEST_CASE("the optimizer drives a quadratic to its minimum") {
  ParamStore store;
  store.add("w", Tensor::full({1}, 9.0f));
  OptimizerState opt;
  opt.lr = 0.1f;
  opt.weight_decay = 0.0f;
  for (int i = 0; i < 500; ++i) {
    const float w = store.at("w")[0];
    std::vector<Tensor> grads{Tensor::full({1}, 2.0f * (w - 3.0f))};
    adam_step(opt, store, false, grads);
  }
  CHECK(std::abs(store.at("w")[0] - 3.0f) < 1e-2f);
}

TEST_CASE("the update matches an independent moment-by-moment replay") {
  Rng rng(11);
  ParamStore store;
  store.add("a", rand_tensor(rng, {5}));
  store.add("b", rand_tensor(rng, {2, 3}));
  // Mirror state, updated with the textbook recurrences.
  std::vector<std::vector<double>> p(2), m(2), v(2);
  for (int s = 0; s < 2; ++s) {
    for (float x : store.at(s).data) {
      p[s].push_back(x);
      m[s].push_back(0.0);
      v[s].push_back(0.0);
    }
  }
  OptimizerState opt;
  opt.lr = 3e-2f;
  opt.weight_decay = 1e-3f;
  Rng grng(12);
  for (int step = 1; step <= 10; ++step) {
    std::vector<Tensor> grads{rand_tensor(grng, {5}), rand_tensor(grng, {2, 3})};
    adam_step(opt, store, false, grads);
    for (int s = 0; s < 2; ++s) {
      for (size_t i = 0; i < p[s].size(); ++i) {
        const double g = grads[s].data[i];
        m[s][i] = 0.9 * m[s][i] + 0.1 * g;
        v[s][i] = 0.999 * v[s][i] + 0.001 * g * g;
        const double mhat = m[s][i] / (1.0 - std::pow(0.9, step));
        const double vhat = v[s][i] / (1.0 - std::pow(0.999, step));
        p[s][i] -= 3e-2 * mhat / (std::sqrt(vhat) + 1e-8);
        p[s][i] *= 1.0 - 3e-2 * 1e-3;
      }
    }
  }
  for (int s = 0; s < 2; ++s) {
    for (size_t i = 0; i < p[s].size(); ++i) {
      CHECK(store.at(s).data[i] == doctest::Approx(p[s][i]).epsilon(1e-5));
    }
  }
}

TEST_CASE("the optimizer refuses frozen stores and mismatched gradients") {
  ParamStore store;
  store.add("w", Tensor::full({2}, 1.0f));
  OptimizerState opt;
  std::vector<Tensor> grads{Tensor::zeros({2})};
  CHECK_THROWS_AS(adam_step(opt, store, true, grads), ValueError);
  std::vector<Tensor> too_many{Tensor::zeros({2}), Tensor::zeros({2})};
  CHECK_THROWS_AS(adam_step(opt, store, false, too_many), ShapeError);
  std::vector<Tensor> wrong_shape{Tensor::zeros({3})};
  CHECK_THROWS_AS(adam_step(opt, store, false, wrong_shape), ShapeError);
}

TEST_CASE("phase names round-trip and defaults resolve per phase") {
  for (Phase p : {Phase::kPretrainAe, Phase::kPretrainDiffusion, Phase::kSft,
                  Phase::kPreference}) {
    CHECK(phase_from_name(phase_name(p)) == p);
  }
  CHECK_THROWS_AS(phase_from_name("warmup"), ValueError);
  for (SftObjective o :
       {SftObjective::kLatent, SftObjective::kPixel, SftObjective::kCombined}) {
    CHECK(sft_objective_from_name(sft_objective_name(o)) == o);
  }
  RunConfig cfg;
  cfg.phase = Phase::kSft;
  CHECK(cfg.resolved_epochs() == 140);
  cfg.phase = Phase::kPreference;
  CHECK(cfg.resolved_epochs() == 100);
  cfg.epochs = 7;
  CHECK(cfg.resolved_epochs() == 7);
}

TEST_CASE("run_phase rejects inconsistent freeze states and empty datasets") {
  LoadedCorpus data = tiny_corpus();
  SUBCASE("autoencoder pretraining needs a trainable autoencoder") {
    ModelBundle b = tiny_bundle(1, /*freeze_ae=*/true);
    CHECK_THROWS_AS(run_phase(base_config(Phase::kPretrainAe, 1), b, data), ValueError);
  }
  SUBCASE("diffusion phases need a frozen autoencoder") {
    ModelBundle b = tiny_bundle(1, /*freeze_ae=*/false);
    CHECK_THROWS_AS(run_phase(base_config(Phase::kSft, 1), b, data), ValueError);
  }
  SUBCASE("a missing split is an error") {
    ModelBundle b = tiny_bundle(1, /*freeze_ae=*/true);
    LoadedCorpus empty = data;
    empty.corpus.sft.clear();
    CHECK_THROWS_AS(run_phase(base_config(Phase::kSft, 1), b, empty), ValueError);
    empty = data;
    empty.pairs.clear();
    CHECK_THROWS_AS(run_phase(base_config(Phase::kPreference, 1), b, empty),
                    ValueError);
  }
  SUBCASE("resuming a reference-based run without its snapshot is an error") {
    ModelBundle b = tiny_bundle(1, /*freeze_ae=*/true);
    RunConfig cfg = base_config(Phase::kPreference, 1);
    cfg.reward_mode = RewardMode::kDpoOnly;
    cfg.epochs = 2;
    TrainState st;
    st.cursor.epoch = 1;
    CHECK_THROWS_AS(run_phase(cfg, b, data, &st), ValueError);
  }
}

TEST_CASE("supervised training makes progress and numbers its steps") {
  LoadedCorpus data = tiny_corpus();
  ModelBundle b = tiny_bundle(21, /*freeze_ae=*/true);
  RunConfig cfg = base_config(Phase::kSft, 21);
  cfg.sft_objective = SftObjective::kLatent;
  cfg.epochs = 4;
  cfg.lr = 1e-3f;
  RunReport rep = run_phase(cfg, b, data);
  // 8 samples / batch 4 = 2 batches per epoch.
  REQUIRE(rep.records.size() == 8);
  for (size_t i = 0; i < rep.records.size(); ++i) {
    CHECK(rep.records[i].step == static_cast<int64_t>(i) + 1);
    CHECK(rep.records[i].phase == "sft");
    CHECK(std::isfinite(rep.records[i].loss));
    CHECK(!rep.records[i].components.empty());
  }
  CHECK(rep.cursor.epoch == 4);
  CHECK(rep.cursor.step == 8);
  // The mean loss over the last epoch must sit below the first epoch's: with
  // a zero-initialized prediction head the first losses are ~E||eps||^2 = 1
  // and even a few steps of Adam lop off a visible margin.
  const float first = (rep.records[0].loss + rep.records[1].loss) / 2.0f;
  const float last = (rep.records[6].loss + rep.records[7].loss) / 2.0f;
  CHECK(last < first);
}

TEST_CASE("a combined objective with zero pixel weight replays the latent run") {
  LoadedCorpus data = tiny_corpus();
  ModelBundle b1 = tiny_bundle(33, /*freeze_ae=*/true);
  ModelBundle b2 = tiny_bundle(33, /*freeze_ae=*/true);
  REQUIRE(stores_equal(b1.dn, b2.dn));

  RunConfig latent = base_config(Phase::kSft, 33);
  latent.sft_objective = SftObjective::kLatent;
  RunConfig combined = base_config(Phase::kSft, 33);
  combined.sft_objective = SftObjective::kCombined;
  combined.loss.lambda = 0.0f;

  RunReport r1 = run_phase(latent, b1, data);
  RunReport r2 = run_phase(combined, b2, data);
  REQUIRE(r1.records.size() == r2.records.size());
  for (size_t i = 0; i < r1.records.size(); ++i) {
    CHECK(r1.records[i].loss == r2.records[i].loss);
    // The whole log line matches, component columns included, so the two
    // runs' metrics streams are indistinguishable.
    CHECK(r1.records[i].components == r2.records[i].components);
    CHECK(r1.records[i].phase == r2.records[i].phase);
  }
  CHECK(stores_equal(b1.dn, b2.dn));
}

TEST_CASE("preference training starts at log 2 and freezes its reference") {
  LoadedCorpus data = tiny_corpus();
  ModelBundle b = tiny_bundle(44, /*freeze_ae=*/true);
  const uint64_t ae_before = b.ae.checksum();
  const uint64_t dn_before = b.dn.checksum();

  RunConfig cfg = base_config(Phase::kPreference, 44);
  cfg.reward_mode = RewardMode::kDpoOnly;
  cfg.lr = 1e-3f;
  TrainState st;
  RunReport rep = run_phase(cfg, b, data, &st);

  // At the first step policy and reference are the same parameters, so every
  // margin vanishes and the loss is exactly -log sigmoid(0) = log 2.
  REQUIRE(!rep.records.empty());
  CHECK(rep.records[0].loss == doctest::Approx(kLn2).epsilon(1e-5));
  // Training moved the policy but neither frozen store.
  CHECK(st.has_ref);
  CHECK(st.ref.dn.checksum() == dn_before);
  CHECK(b.ae.checksum() == ae_before);
  CHECK(b.dn.checksum() != dn_before);
}

TEST_CASE("margin-free initialization anchors each preference term at log 2") {
  // With a zero-initialized prediction head and shared pair noise, winner and
  // loser latent residuals are the same tensor, so the latent margin is
  // exactly zero and its term is exactly -log sigmoid(0). The pixel term's
  // margin passes through the (randomly initialized) decoder, which keeps it
  // near but not exactly zero; the combined value is anchored at
  // (1 + mu) * log 2 rather than log 2 itself.
  LoadedCorpus data = tiny_corpus();
  ModelBundle b = tiny_bundle(47, /*freeze_ae=*/true);
  RunConfig cfg = base_config(Phase::kPreference, 47);
  cfg.reward_mode = RewardMode::kSimpoSimpoPixel;
  cfg.loss.shared_pair_noise = true;
  RunReport rep = run_phase(cfg, b, data);
  REQUIRE(!rep.records.empty());
  float latent = -1.0f, pixel = -1.0f;
  for (const auto& [k, v] : rep.records[0].components) {
    if (k == "latent") latent = v;
    if (k == "pixel") pixel = v;
  }
  CHECK(latent == doctest::Approx(kLn2).epsilon(1e-5));
  CHECK(pixel == doctest::Approx(kLn2).epsilon(0.25));
  CHECK(rep.records[0].loss ==
        doctest::Approx((1.0 + cfg.loss.mu) * kLn2).epsilon(0.25));
}

TEST_CASE("autoencoder pretraining lowers reconstruction error") {
  LoadedCorpus data = tiny_corpus();
  ModelBundle b = tiny_bundle(55, /*freeze_ae=*/false);
  auto recon_mse = [&]() {
    double acc = 0.0;
    int64_t count = 0;
    for (const ImageSample& s : data.corpus.train) {
      Tensor x = s.pixels;
      x.shape.insert(x.shape.begin(), 1);
      Tensor r = decode(b, encode(b, x));
      for (int64_t i = 0; i < x.numel(); ++i) {
        const double d = static_cast<double>(r[i]) - x[i];
        acc += d * d;
      }
      count += x.numel();
    }
    return acc / static_cast<double>(count);
  };
  const double before = recon_mse();
  RunConfig cfg = base_config(Phase::kPretrainAe, 55);
  cfg.epochs = 12;
  cfg.lr = 3e-3f;
  RunReport rep = run_phase(cfg, b, data);
  CHECK(recon_mse() < before);
  CHECK(rep.records.back().loss < rep.records.front().loss);
}

TEST_CASE("label dropout is confined to diffusion pretraining") {
  // With dropout forced to certainty every pretraining label collapses to the
  // null class, which must change the loss stream relative to dropout off;
  // the same knob must be inert during supervised fine-tuning.
  LoadedCorpus data = tiny_corpus();
  auto run_with = [&](Phase phase, float dropout) {
    ModelBundle b = tiny_bundle(66, /*freeze_ae=*/true);
    RunConfig cfg = base_config(phase, 66);
    cfg.cond_dropout = dropout;
    return run_phase(cfg, b, data).records;
  };
  auto pre_off = run_with(Phase::kPretrainDiffusion, 0.0f);
  auto pre_on = run_with(Phase::kPretrainDiffusion, 0.99f);
  bool any_diff = false;
  for (size_t i = 0; i < pre_off.size(); ++i) {
    any_diff = any_diff || pre_off[i].loss != pre_on[i].loss;
  }
  CHECK(any_diff);
  auto sft_off = run_with(Phase::kSft, 0.0f);
  auto sft_on = run_with(Phase::kSft, 0.99f);
  REQUIRE(sft_off.size() == sft_on.size());
  for (size_t i = 0; i < sft_off.size(); ++i) {
    CHECK(sft_off[i].loss == sft_on[i].loss);
  }
}

TEST_CASE("two runs from one seed are bit-identical") {
  LoadedCorpus data = tiny_corpus();
  ModelBundle b1 = tiny_bundle(77, /*freeze_ae=*/true);
  ModelBundle b2 = tiny_bundle(77, /*freeze_ae=*/true);
  RunConfig cfg = base_config(Phase::kSft, 77);
  cfg.epochs = 2;
  RunReport r1 = run_phase(cfg, b1, data);
  RunReport r2 = run_phase(cfg, b2, data);
  REQUIRE(r1.records.size() == r2.records.size());
  for (size_t i = 0; i < r1.records.size(); ++i) {
    CHECK(r1.records[i].loss == r2.records[i].loss);
  }
  CHECK(stores_equal(b1.dn, b2.dn));
}

TEST_CASE("a checkpoint survives a save-load-save round trip byte for byte") {
  LoadedCorpus data = tiny_corpus();
  ModelBundle b = tiny_bundle(88, /*freeze_ae=*/true);
  RunConfig cfg = base_config(Phase::kSft, 88);
  TrainState st;
  run_phase(cfg, b, data, &st);

  const fs::path dir = fresh_dir("roundtrip");
  const std::string p1 = (dir / "a.ldpx").string();
  const std::string p2 = (dir / "b.ldpx").string();
  save_checkpoint(p1, b, cfg, st);
  LoadedCheckpoint lc = load_checkpoint(p1);
  save_checkpoint(p2, lc.bundle, lc.config, lc.state);
  CHECK(slurp(p1) == slurp(p2));

  // The loaded bundle is also semantically identical.
  CHECK(stores_equal(lc.bundle.ae, b.ae));
  CHECK(stores_equal(lc.bundle.dn, b.dn));
  CHECK(lc.bundle.schedule.T == b.schedule.T);
  CHECK(lc.state.cursor.step == st.cursor.step);
  CHECK(lc.state.opt.step == st.opt.step);
  REQUIRE(lc.state.opt.m.size() == st.opt.m.size());
  for (size_t i = 0; i < st.opt.m.size(); ++i) {
    CHECK(bits_equal(lc.state.opt.m[i], st.opt.m[i]));
    CHECK(bits_equal(lc.state.opt.v[i], st.opt.v[i]));
  }
}

TEST_CASE("checkpoint corruption and version skew are rejected") {
  LoadedCorpus data = tiny_corpus();
  ModelBundle b = tiny_bundle(90, /*freeze_ae=*/true);
  RunConfig cfg = base_config(Phase::kSft, 90);
  TrainState st;
  const fs::path dir = fresh_dir("corrupt");
  const std::string path = (dir / "ck.ldpx").string();
  save_checkpoint(path, b, cfg, st);

  SUBCASE("a flipped byte fails the checksum") {
    std::string bytes = slurp(path);
    bytes[bytes.size() / 2] = static_cast<char>(bytes[bytes.size() / 2] ^ 0x40);
    std::ofstream(path, std::ios::binary).write(bytes.data(),
                                                static_cast<std::streamsize>(bytes.size()));
    CHECK_THROWS_AS(load_checkpoint_file(path), IoError);
  }
  SUBCASE("a truncated file fails the checksum") {
    std::string bytes = slurp(path);
    bytes.resize(bytes.size() - 9);
    std::ofstream(path, std::ios::binary | std::ios::trunc)
        .write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    CHECK_THROWS_AS(load_checkpoint_file(path), IoError);
  }
  SUBCASE("an unknown container version is refused even with a valid checksum") {
    std::string bytes = slurp(path);
    bytes[4] = static_cast<char>(kCheckpointVersion + 1);  // little-endian LSB
    // Recompute the trailing checksum so only the version differs.
    std::string body = bytes.substr(0, bytes.size() - 4);
    Checkpoint tmp;  // unused; checksum helper lives inside save, so redo inline
    uint32_t crc = 0xffffffffu;
    // CRC-32 (zlib polynomial), bitwise; tiny file so speed is irrelevant.
    for (unsigned char c : body) {
      crc ^= c;
      for (int k = 0; k < 8; ++k) crc = (crc >> 1) ^ (0xedb88320u & (~(crc & 1u) + 1u));
    }
    crc ^= 0xffffffffu;
    for (int i = 0; i < 4; ++i) {
      body.push_back(static_cast<char>((crc >> (8 * i)) & 0xff));
    }
    std::ofstream(path, std::ios::binary | std::ios::trunc)
        .write(body.data(), static_cast<std::streamsize>(body.size()));
    CHECK_THROWS_WITH_AS(load_checkpoint_file(path),
                         doctest::Contains("unsupported checkpoint version"), IoError);
  }
  SUBCASE("a non-checkpoint file is refused") {
    std::ofstream(path, std::ios::binary | std::ios::trunc) << "definitely not a checkpoint";
    CHECK_THROWS_AS(load_checkpoint_file(path), IoError);
  }
}

TEST_CASE("resuming from a mid-run checkpoint replays the uninterrupted run") {
  LoadedCorpus data = tiny_corpus();

  // Reference run: three epochs straight through, with evaluations.
  const fs::path dir_a = fresh_dir("resume_a");
  ModelBundle ba = tiny_bundle(101, /*freeze_ae=*/true);
  RunConfig cfg = base_config(Phase::kSft, 101);
  cfg.epochs = 3;
  cfg.eval_every = 1;
  cfg.out_dir = dir_a.string();
  TrainState sta;
  RunReport ra = run_phase(cfg, ba, data, &sta);

  // Interrupted run: stop after one epoch, then resume from its checkpoint.
  const fs::path dir_b = fresh_dir("resume_b");
  ModelBundle bb = tiny_bundle(101, /*freeze_ae=*/true);
  RunConfig cfg1 = cfg;
  cfg1.epochs = 1;
  cfg1.out_dir = dir_b.string();
  TrainState stb;
  RunReport rb1 = run_phase(cfg1, bb, data, &stb);
  REQUIRE(fs::exists(rb1.checkpoint_path));

  LoadedCheckpoint lc = load_checkpoint(rb1.checkpoint_path);
  lc.config.epochs = 3;  // extend the budget; epochs already done are kept
  RunReport rb2 = run_phase(lc.config, lc.bundle, data, &lc.state);

  // Parameters land on the same bits as the uninterrupted run.
  CHECK(stores_equal(lc.bundle.dn, ba.dn));
  CHECK(lc.state.cursor.step == sta.cursor.step);
  CHECK(lc.state.opt.step == sta.opt.step);
  REQUIRE(lc.state.opt.m.size() == sta.opt.m.size());
  for (size_t i = 0; i < sta.opt.m.size(); ++i) {
    CHECK(bits_equal(lc.state.opt.m[i], sta.opt.m[i]));
    CHECK(bits_equal(lc.state.opt.v[i], sta.opt.v[i]));
  }

  // The resumed tail reproduces the reference records one for one.
  const size_t head = rb1.records.size();
  REQUIRE(ra.records.size() == head + rb2.records.size());
  for (size_t i = 0; i < rb2.records.size(); ++i) {
    const StepRecord& want = ra.records[head + i];
    const StepRecord& got = rb2.records[i];
    CHECK(got.step == want.step);
    CHECK(got.phase == want.phase);
    CHECK(got.loss == want.loss);
  }

  // And the metrics files agree column for column (wall clock aside), which
  // exercises the resume-time truncation of partially written rows.
  CHECK(csv_without_wall((dir_a / "metrics.csv").string()) ==
        csv_without_wall((dir_b / "metrics.csv").string()));
}

TEST_CASE("a non-finite loss aborts the run and serializes the batch") {
  LoadedCorpus data = tiny_corpus();
  ModelBundle b = tiny_bundle(111, /*freeze_ae=*/true);
  b.dn.at(0)[0] = std::numeric_limits<float>::quiet_NaN();
  const fs::path dir = fresh_dir("nan_abort");
  RunConfig cfg = base_config(Phase::kSft, 111);
  cfg.out_dir = dir.string();
  CHECK_THROWS_WITH_AS(run_phase(cfg, b, data), doctest::Contains("non-finite"),
                       ValueError);
  CHECK(fs::exists(dir / "nan_batch_step_0.json"));
}

TEST_CASE("preference runs checkpoint and restore their reference snapshot") {
  LoadedCorpus data = tiny_corpus();
  ModelBundle b = tiny_bundle(123, /*freeze_ae=*/true);
  const uint64_t dn_init = b.dn.checksum();
  const fs::path dir = fresh_dir("pref_resume");

  RunConfig cfg = base_config(Phase::kPreference, 123);
  cfg.reward_mode = RewardMode::kDpoDpoPixel;
  cfg.epochs = 1;
  cfg.out_dir = dir.string();
  TrainState st;
  RunReport rep = run_phase(cfg, b, data, &st);

  LoadedCheckpoint lc = load_checkpoint(rep.checkpoint_path);
  REQUIRE(lc.state.has_ref);
  // The restored reference is the pre-training policy, bit for bit.
  CHECK(lc.state.ref.dn.checksum() == dn_init);
  CHECK(stores_equal(lc.state.ref.dn, st.ref.dn));
  CHECK(lc.state.ref.dn_frozen);

  // Resuming for one more epoch keeps using that reference without recloning:
  // were the reference recloned from the moved policy, the margins would all
  // collapse to zero again and the first resumed loss would be exactly log 2.
  lc.config.epochs = 2;
  RunReport rep2 = run_phase(lc.config, lc.bundle, data, &lc.state);
  REQUIRE(!rep2.records.empty());
  CHECK(rep2.records[0].loss != doctest::Approx(kLn2).epsilon(1e-9));
  CHECK(lc.state.ref.dn.checksum() == dn_init);
}
