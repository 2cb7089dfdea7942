// SPDX-License-Identifier: Apache-2.0
#include "pixelpost/experiment.hpp"

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>

#include "json.hpp"

#include "pixelpost/schedule.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace pixelpost {

namespace {

std::string fmt_value(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

// [C, H, W] rows stacked into one [N, C, H, W] batch.
Tensor stack_images(const std::vector<const Tensor*>& rows) {
  const Tensor& first = *rows.front();
  std::vector<int> shape = first.shape;
  shape.insert(shape.begin(), static_cast<int>(rows.size()));
  Tensor out = Tensor::zeros(shape);
  const int64_t stride = first.numel();
  for (size_t i = 0; i < rows.size(); ++i) {
    std::copy(rows[i]->data.begin(), rows[i]->data.end(),
              out.data.begin() + static_cast<int64_t>(i) * stride);
  }
  return out;
}

Tensor batch_row(const Tensor& batch, int i) {
  std::vector<int> shape(batch.shape.begin() + 1, batch.shape.end());
  Tensor out = Tensor::zeros(shape);
  const int64_t stride = out.numel();
  std::copy(batch.data.begin() + i * stride, batch.data.begin() + (i + 1) * stride,
            out.data.begin());
  return out;
}

void ensure_dir(const std::string& dir) {
  if (dir.empty()) return;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir + "': " + ec.message());
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() &&
         s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

void check_csv_key(const std::string& key, const char* what) {
  if (key.find_first_of(",\"\n\r") != std::string::npos) {
    throw ValueError(std::string(what) + " must not contain commas, quotes, or newlines: '" +
                     key + "'");
  }
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

// Per-channel standard deviation of the train-split latents, encoded in
// small batches.
std::vector<float> latent_channel_stds(const ModelBundle& bundle,
                                       const std::vector<ImageSample>& train) {
  const int channels = bundle.ae_config.latent_channels;
  std::vector<double> sum(channels, 0.0), sumsq(channels, 0.0);
  int64_t per_channel = 0;
  const int batch = 32;
  for (size_t start = 0; start < train.size(); start += batch) {
    std::vector<const Tensor*> rows;
    for (size_t i = start; i < std::min(train.size(), start + batch); ++i) {
      rows.push_back(&train[i].pixels);
    }
    Tensor z = encode(bundle, stack_images(rows));
    const int n = z.shape[0];
    const int64_t plane = static_cast<int64_t>(z.shape[2]) * z.shape[3];
    for (int i = 0; i < n; ++i) {
      for (int c = 0; c < channels; ++c) {
        const int64_t base = (static_cast<int64_t>(i) * channels + c) * plane;
        for (int64_t k = 0; k < plane; ++k) {
          const double v = z[base + k];
          sum[c] += v;
          sumsq[c] += v * v;
        }
      }
    }
    per_channel += n * plane;
  }
  std::vector<float> stds(channels, 1.0f);
  for (int c = 0; c < channels; ++c) {
    const double mean = sum[c] / static_cast<double>(per_channel);
    const double var = std::max(0.0, sumsq[c] / static_cast<double>(per_channel) - mean * mean);
    stds[c] = static_cast<float>(std::sqrt(var));
  }
  return stds;
}

std::vector<Tensor> tier_pixels(const std::vector<ImageSample>& samples) {
  std::vector<Tensor> out;
  out.reserve(samples.size());
  for (const ImageSample& s : samples) out.push_back(s.pixels);
  return out;
}

// Nine interior timesteps, evenly spaced over [1, T], deduplicated for tiny T.
std::vector<int> default_curve_grid(int T) {
  std::vector<int> ts;
  for (int k = 1; k <= 9; ++k) {
    int t = std::max<int>(1, static_cast<int>(std::llround(k * static_cast<double>(T) / 10.0)));
    t = std::min(t, T);
    if (ts.empty() || ts.back() != t) ts.push_back(t);
  }
  return ts;
}

}  // namespace

const std::string& build_id() {
  static const std::string id = PIXELPOST_BUILD_ID;
  return id;
}

// --- Flat key=value configuration --------------------------------------------

std::vector<std::pair<std::string, std::string>> parse_kv_text(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> entries;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ValueError("config line " + std::to_string(lineno) + ": expected key=value, got '" +
                       line + "'");
    }
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) {
      throw ValueError("config line " + std::to_string(lineno) + ": empty key");
    }
    entries.emplace_back(std::move(key), std::move(value));
  }
  return entries;
}

std::vector<std::pair<std::string, std::string>> parse_kv_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config file '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  try {
    return parse_kv_text(buf.str());
  } catch (const ValueError& e) {
    throw ValueError(path + ": " + e.what());
  }
}

// --- Metric reports -----------------------------------------------------------

void write_metric_csv(const std::string& path, const std::vector<MetricRow>& rows) {
  ensure_dir(fs::path(path).parent_path().string());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open metrics file '" + path + "' for writing");
  out << "run_id,step,metric,value\n";
  for (const MetricRow& r : rows) {
    check_csv_key(r.run_id, "run id");
    check_csv_key(r.metric, "metric name");
    out << r.run_id << ',' << r.step << ',' << r.metric << ',' << fmt_value(r.value) << '\n';
  }
  if (!out.flush()) throw IoError("failed writing metrics file '" + path + "'");
}

std::vector<MetricRow> read_metric_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open metrics file '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || trim(line) != "run_id,step,metric,value") {
    throw IoError(path + ": not a metrics file (bad header)");
  }
  std::vector<MetricRow> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    std::vector<std::string> fields;
    size_t start = 0;
    for (size_t i = 0; i <= line.size(); ++i) {
      if (i == line.size() || line[i] == ',') {
        fields.push_back(line.substr(start, i - start));
        start = i + 1;
      }
    }
    if (fields.size() != 4) {
      throw IoError(path + ": line " + std::to_string(lineno) + " malformed");
    }
    MetricRow r;
    r.run_id = fields[0];
    r.metric = fields[2];
    errno = 0;
    char* end = nullptr;
    r.step = std::strtoll(fields[1].c_str(), &end, 10);
    if (errno != 0 || end == fields[1].c_str() || *end != '\0') {
      throw IoError(path + ": line " + std::to_string(lineno) + " malformed");
    }
    errno = 0;
    r.value = std::strtod(fields[3].c_str(), &end);
    if (errno != 0 || end == fields[3].c_str() || *end != '\0') {
      throw IoError(path + ": line " + std::to_string(lineno) + " malformed");
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<MetricRow> collect_metric_rows(const std::string& root) {
  std::vector<std::string> files;
  std::error_code ec;
  if (fs::is_directory(root, ec)) {
    for (fs::recursive_directory_iterator it(root, ec), end; it != end; it.increment(ec)) {
      if (ec) break;
      if (!it->is_regular_file(ec)) continue;
      const std::string name = it->path().filename().string();
      if (name == "eval.csv" || name == "curves.csv") files.push_back(it->path().string());
    }
  }
  std::sort(files.begin(), files.end());
  std::vector<MetricRow> rows;
  for (const std::string& f : files) {
    std::vector<MetricRow> part = read_metric_csv(f);
    rows.insert(rows.end(), part.begin(), part.end());
  }
  if (rows.empty()) throw IoError("no runs found under '" + root + "'");
  return rows;
}

std::string comparison_table(const std::vector<MetricRow>& rows) {
  std::set<std::string> metrics;
  std::map<std::pair<std::string, int64_t>, std::map<std::string, double>> grouped;
  for (const MetricRow& r : rows) {
    metrics.insert(r.metric);
    grouped[{r.run_id, r.step}][r.metric] = r.value;
  }
  std::ostringstream out;
  out << "run_id,step";
  for (const std::string& m : metrics) out << ',' << m;
  out << '\n';
  for (const auto& [key, cells] : grouped) {
    out << key.first << ',' << key.second;
    for (const std::string& m : metrics) {
      out << ',';
      auto it = cells.find(m);
      if (it != cells.end()) out << fmt_value(it->second);
    }
    out << '\n';
  }
  return out.str();
}

std::vector<std::string> flagged_runs(const std::vector<MetricRow>& rows) {
  std::set<std::string> flagged;
  for (const MetricRow& r : rows) {
    if (r.metric == "flagged_untrained" && r.value != 0.0) flagged.insert(r.run_id);
  }
  return {flagged.begin(), flagged.end()};
}

// --- Training command ---------------------------------------------------------

RunReport run_train_command(const TrainCommand& cmd) {
  if (cmd.data_dir.empty()) throw ValueError("training needs a data directory");
  return run_train_command(cmd, load_corpus(cmd.data_dir));
}

RunReport run_train_command(const TrainCommand& cmd, const LoadedCorpus& data) {
  RunConfig config = cmd.run;
  config.out_dir = cmd.out_dir;
  ModelBundle bundle;
  TrainState state;

  if (!cmd.resume_checkpoint.empty()) {
    LoadedCheckpoint lc = load_checkpoint(cmd.resume_checkpoint);
    if (lc.config.phase != config.phase) {
      throw ValueError(std::string("resume checkpoint is from phase ") +
                       phase_name(lc.config.phase) + ", not " + phase_name(config.phase));
    }
    bundle = std::move(lc.bundle);
    state = std::move(lc.state);
    RunConfig resumed = lc.config;
    if (cmd.run.epochs >= 0) resumed.epochs = cmd.run.epochs;
    if (!cmd.out_dir.empty()) resumed.out_dir = cmd.out_dir;
    config = resumed;
  } else {
    switch (config.phase) {
      case Phase::kPretrainAe: {
        AutoencoderConfig ae_cfg = cmd.ae_cfg;
        ae_cfg.image_size = data.spec.image_size;
        DenoiserConfig dn_cfg = cmd.dn_cfg;
        dn_cfg.latent_channels = ae_cfg.latent_channels;
        dn_cfg.latent_size = ae_cfg.latent_size();
        dn_cfg.num_classes = data.spec.num_classes;
        bundle = make_bundle(ae_cfg, dn_cfg,
                             linear_schedule(cmd.schedule_steps, cmd.beta_start, cmd.beta_end),
                             config.seed);
        bundle.dn_frozen = true;  // untouched at this stage
        break;
      }
      case Phase::kPretrainDiffusion: {
        if (cmd.init_checkpoint.empty()) {
          throw ValueError("pretrain_diffusion needs the autoencoder checkpoint (--init)");
        }
        LoadedCheckpoint lc = load_checkpoint(cmd.init_checkpoint);
        DenoiserConfig dn_cfg = cmd.dn_cfg;
        dn_cfg.latent_channels = lc.bundle.ae_config.latent_channels;
        dn_cfg.latent_size = lc.bundle.ae_config.latent_size();
        dn_cfg.num_classes = data.spec.num_classes;
        bundle = make_bundle(lc.bundle.ae_config, dn_cfg,
                             linear_schedule(cmd.schedule_steps, cmd.beta_start, cmd.beta_end),
                             config.seed);
        bundle.ae = std::move(lc.bundle.ae);  // the trained encoder/decoder
        bundle.ae_frozen = true;
        bundle.dn_frozen = false;
        break;
      }
      case Phase::kSft:
      case Phase::kPreference: {
        if (cmd.init_checkpoint.empty()) {
          throw ValueError(std::string(phase_name(config.phase)) +
                           " needs the pretrained diffusion checkpoint (--init)");
        }
        LoadedCheckpoint lc = load_checkpoint(cmd.init_checkpoint);
        bundle = std::move(lc.bundle);
        bundle.ae_frozen = true;
        bundle.dn_frozen = false;
        break;
      }
    }
    config.init_checkpoint = cmd.init_checkpoint;
  }

  RunReport report = run_phase(config, bundle, data, &state);

  if (config.phase == Phase::kPretrainAe && cmd.whiten_latents) {
    // Move each latent channel to unit train-split standard deviation so the
    // diffusion stage mixes signal with unit-variance noise at the intended
    // ratios. decode(encode(x)) is unchanged; re-save the final checkpoint
    // with the folded weights. Idempotent: a second pass sees std == 1.
    std::vector<float> stds = latent_channel_stds(bundle, data.corpus.train);
    std::vector<float> inv(stds.size());
    for (size_t c = 0; c < stds.size(); ++c) {
      inv[c] = 1.0f / std::max(stds[c], 0.05f);  // floor guards collapsed channels
    }
    fold_latent_scale(bundle.ae, bundle.ae_config, inv);
    if (!report.checkpoint_path.empty()) {
      save_checkpoint(report.checkpoint_path, bundle, config, state);
    }
  }
  return report;
}

// --- Sampling command ---------------------------------------------------------

std::vector<std::string> run_sample_command(const SampleCommand& cmd) {
  if (cmd.init_checkpoint.empty()) throw ValueError("sampling needs a checkpoint (--init)");
  if (cmd.out_dir.empty()) throw ValueError("sampling needs an output directory (--out)");
  if (cmd.per_label < 1) throw ValueError("samples per label must be >= 1");
  LoadedCheckpoint lc = load_checkpoint(cmd.init_checkpoint);
  const int num_classes = lc.bundle.dn_config.num_classes;
  if (cmd.label < -1 || cmd.label > num_classes) {
    throw ValueError("label must be -1 (all classes) or in [0, " + std::to_string(num_classes) +
                     "], got " + std::to_string(cmd.label));
  }
  std::vector<int> labels;
  if (cmd.label == -1) {
    for (int f = 0; f < num_classes; ++f) labels.push_back(f);
  } else {
    labels.push_back(cmd.label);
  }
  ensure_dir(cmd.out_dir);
  std::vector<std::string> paths;
  for (int label : labels) {
    for (int j = 0; j < cmd.per_label; ++j) {
      const uint64_t seed = cmd.seed + static_cast<uint64_t>(j);
      Tensor image = ddim_sample(lc.bundle, lc.bundle.schedule, cmd.sampler, label, seed);
      const std::string path =
          cmd.out_dir + "/" + sample_filename(cmd.run_id, seed, label, cmd.sampler.num_steps);
      write_ppm(path, image);
      paths.push_back(path);
    }
  }
  return paths;
}

// --- Evaluation ---------------------------------------------------------------

std::vector<MetricRow> evaluate_bundle(const ModelBundle& bundle, const LoadedCorpus& data,
                                       const EvalConfig& cfg) {
  if (cfg.n_per_class < 1) throw ValueError("n_per_class must be >= 1");
  std::vector<MetricRow> rows;
  auto add = [&](const std::string& metric, double value) {
    rows.push_back({cfg.run_id, cfg.step, metric, value});
  };

  if (cfg.sample_metrics) {
    const int num_classes = data.spec.num_classes;
    TemplateBank bank(data.spec);
    std::vector<int> labels;
    for (int f = 0; f < num_classes; ++f) {
      labels.insert(labels.end(), cfg.n_per_class, f);
    }
    std::vector<Tensor> images =
        sample_batch(bundle, bundle.schedule, cfg.sampler, labels, cfg.seed);

    const double hf_samples = mean_hf_ratio(images);
    const double hf_sft = mean_hf_ratio(tier_pixels(data.corpus.sft));
    add("hf_ratio_samples", hf_samples);
    add("hf_ratio_base_tier", mean_hf_ratio(tier_pixels(data.corpus.train)));
    add("hf_ratio_sft_tier", hf_sft);
    add("hf_gap_sft_tier", std::fabs(hf_samples - hf_sft));
    if (!data.pairs.empty()) {
      std::vector<Tensor> winners, losers;
      for (const PreferencePair& p : data.pairs) {
        winners.push_back(p.winner.pixels);
        losers.push_back(p.loser.pixels);
      }
      const double hf_winner = mean_hf_ratio(winners);
      add("hf_ratio_winner_tier", hf_winner);
      add("hf_ratio_loser_tier", mean_hf_ratio(losers));
      add("hf_gap_winner_tier", std::fabs(hf_samples - hf_winner));
    }

    double flaw = 0.0;
    for (size_t i = 0; i < images.size(); ++i) {
      flaw += bank.template_mse(images[i], labels[i]);
    }
    add("template_mse", flaw / static_cast<double>(images.size()));

    const double acc = conditioning_accuracy(bank, images, labels);
    const double chance = 1.0 / static_cast<double>(num_classes);
    add("conditioning_accuracy", acc);
    add("conditioning_chance", chance);
    add("flagged_untrained", acc < chance + 0.10 ? 1.0 : 0.0);

    double recon = 0.0;
    int64_t count = 0;
    const int batch = 32;
    const auto& eval_split = data.corpus.eval;
    for (size_t start = 0; start < eval_split.size(); start += batch) {
      std::vector<const Tensor*> batch_rows;
      for (size_t i = start; i < std::min(eval_split.size(), start + batch); ++i) {
        batch_rows.push_back(&eval_split[i].pixels);
      }
      Tensor x = stack_images(batch_rows);
      Tensor r = decode(bundle, encode(bundle, x));
      for (int64_t i = 0; i < x.numel(); ++i) {
        const double d = static_cast<double>(r[i]) - x[i];
        recon += d * d;
      }
      count += x.numel();
    }
    add("recon_mse", recon / static_cast<double>(count));
  }

  if (cfg.curves) {
    const int T = static_cast<int>(bundle.schedule.betas.size());
    std::vector<int> ts = cfg.curve_ts.empty() ? default_curve_grid(T) : cfg.curve_ts;
    const int n_latents =
        std::min<int>(cfg.curve_latents, static_cast<int>(data.corpus.eval.size()));
    if (n_latents < 1) throw ValueError("curve profiling needs a non-empty eval split");
    std::vector<const Tensor*> batch_rows;
    for (int i = 0; i < n_latents; ++i) batch_rows.push_back(&data.corpus.eval[i].pixels);
    Tensor z = encode(bundle, stack_images(batch_rows));
    std::vector<Tensor> latents;
    for (int i = 0; i < n_latents; ++i) latents.push_back(batch_row(z, i));

    std::vector<VarianceCurveRow> inv =
        x0_variance_curve(bundle, latents, ts, cfg.curve_draws, cfg.seed);
    std::vector<VarianceCurveRow> dec =
        decode_error_curve(bundle, latents, ts, cfg.curve_draws, cfg.seed);
    std::vector<double> t_values, inv_vars, inv_means, dec_means;
    for (size_t i = 0; i < ts.size(); ++i) {
      add("x0_err_mean_t" + std::to_string(ts[i]), inv[i].mean_err);
      add("x0_err_var_t" + std::to_string(ts[i]), inv[i].variance);
      add("dec_err_mean_t" + std::to_string(ts[i]), dec[i].mean_err);
      add("dec_err_var_t" + std::to_string(ts[i]), dec[i].variance);
      t_values.push_back(ts[i]);
      inv_vars.push_back(inv[i].variance);
      inv_means.push_back(inv[i].mean_err);
      dec_means.push_back(dec[i].mean_err);
    }
    if (ts.size() > 1) {
      add("x0_var_spearman", spearman_rho(t_values, inv_vars));
      const auto [inv_lo, inv_hi] = std::minmax_element(inv_means.begin(), inv_means.end());
      const auto [dec_lo, dec_hi] = std::minmax_element(dec_means.begin(), dec_means.end());
      add("x0_err_span", *inv_hi / std::max(*inv_lo, 1e-300));
      add("dec_err_span", *dec_hi / std::max(*dec_lo, 1e-300));
    }
  }
  return rows;
}

std::vector<MetricRow> run_eval_command(const EvalCommand& cmd) {
  if (cmd.init_checkpoint.empty()) throw ValueError("evaluation needs a checkpoint (--init)");
  if (cmd.data_dir.empty()) throw ValueError("evaluation needs a data directory (--data)");
  if (cmd.out_dir.empty()) throw ValueError("evaluation needs an output directory (--out)");
  LoadedCheckpoint lc = load_checkpoint(cmd.init_checkpoint);
  LoadedCorpus data = load_corpus(cmd.data_dir);
  EvalConfig cfg = cmd.eval;
  cfg.step = lc.state.cursor.step;
  if (cfg.run_id.empty()) {
    const fs::path parent = fs::path(cmd.init_checkpoint).parent_path();
    cfg.run_id = parent.filename().string();
    if (cfg.run_id.empty()) cfg.run_id = "run";
  }
  std::vector<MetricRow> rows = evaluate_bundle(lc.bundle, data, cfg);
  const char* name = cfg.sample_metrics ? "/eval.csv" : "/curves.csv";
  write_metric_csv(cmd.out_dir + name, rows);
  return rows;
}

void generate_and_save_corpus(const CorpusSpec& spec, const std::string& dir) {
  spec.validate();
  Corpus corpus = generate_corpus(spec);
  std::vector<PreferencePair> pairs = generate_pairs(spec);
  save_corpus(dir, spec, corpus, pairs);
}

// --- Experiment plans ---------------------------------------------------------

int ExperimentPlan::index_of(const std::string& name) const {
  for (size_t i = 0; i < nodes.size(); ++i) {
    if (nodes[i].name == name) return static_cast<int>(i);
  }
  return -1;
}

void ExperimentPlan::validate() const {
  std::set<std::string> seen;
  for (const PlanNode& node : nodes) {
    if (node.name.empty()) throw ValueError("plan node without a name");
    if (!seen.insert(node.name).second) {
      throw ValueError("duplicate plan node '" + node.name + "'");
    }
  }
  for (size_t i = 0; i < nodes.size(); ++i) {
    for (const std::string& dep : nodes[i].deps) {
      const int j = index_of(dep);
      if (j < 0) {
        throw ValueError("unknown dependency '" + dep + "' of plan node '" + nodes[i].name +
                         "'");
      }
      if (static_cast<size_t>(j) >= i) {
        throw ValueError("plan node '" + nodes[i].name + "' depends on later node '" + dep +
                         "' (cycle)");
      }
    }
  }
}

bool output_verified(const std::string& path) {
  std::error_code ec;
  if (!fs::is_regular_file(path, ec)) return false;
  if (ends_with(path, ".ldpx")) {
    try {
      load_checkpoint_file(path);
      return true;
    } catch (...) {
      return false;
    }
  }
  return fs::file_size(path, ec) > 0 && !ec;
}

PlanOutcome run_plan(const ExperimentPlan& plan, std::ostream* log) {
  plan.validate();
  PlanOutcome outcome;
  for (const PlanNode& node : plan.nodes) {
    const bool complete =
        !node.outputs.empty() &&
        std::all_of(node.outputs.begin(), node.outputs.end(),
                    [](const std::string& p) { return output_verified(p); });
    if (complete) {
      if (log) *log << "skip " << node.name << " (outputs verified)\n" << std::flush;
      outcome.skipped.push_back(node.name);
      continue;
    }
    for (const std::string& dep : node.deps) {
      const PlanNode& upstream = plan.nodes[plan.index_of(dep)];
      for (const std::string& out : upstream.outputs) {
        if (!output_verified(out)) {
          throw IoError("missing dependency '" + dep + "' for plan node '" + node.name +
                        "': " + out);
        }
      }
    }
    if (!node.run) throw ValueError("plan node '" + node.name + "' has no runner");
    if (log) *log << "run " << node.name << '\n' << std::flush;
    node.run();
    for (const std::string& out : node.outputs) {
      if (!output_verified(out)) {
        throw IoError("plan node '" + node.name + "' did not produce '" + out + "'");
      }
    }
    outcome.executed.push_back(node.name);
  }
  return outcome;
}

namespace {

std::string mode_slug(RewardMode mode) {
  std::string slug = reward_mode_name(mode);
  std::replace(slug.begin(), slug.end(), '+', '_');
  return slug;
}

int resolved_or(int value, int fallback) { return value >= 0 ? value : fallback; }

}  // namespace

ExperimentPlan build_preset(const PresetConfig& cfg) {
  if (cfg.preset != "table5" && cfg.preset != "table6" && cfg.preset != "decode-ablation") {
    throw ValueError("unknown preset '" + cfg.preset +
                     "' (expected table5, table6, or decode-ablation)");
  }
  if (cfg.out_dir.empty()) throw ValueError("a preset plan needs an output directory");
  if (cfg.seeds.empty()) throw ValueError("a preset plan needs at least one seed");

  // Desk-scale defaults for unset budgets; small enough that the full
  // four-seed matrix fits the acceptance runtime budget.
  const int ae_epochs = resolved_or(cfg.ae_epochs, 20);
  const int diffusion_epochs = resolved_or(cfg.diffusion_epochs, 40);
  const int post_epochs = resolved_or(cfg.post_epochs, 12);

  ExperimentPlan plan;
  std::string data_dir = cfg.data_dir;
  std::vector<std::string> corpus_dep;
  if (data_dir.empty()) {
    data_dir = cfg.out_dir + "/corpus";
    PlanNode corpus_node;
    corpus_node.name = "corpus";
    corpus_node.outputs = {data_dir + "/manifest.json"};
    corpus_node.run = [spec = cfg.corpus, data_dir] { generate_and_save_corpus(spec, data_dir); };
    plan.nodes.push_back(std::move(corpus_node));
    corpus_dep = {"corpus"};
  }

  // Shared lazy corpus load across every node closure.
  auto cache = std::make_shared<std::optional<LoadedCorpus>>();
  auto corpus_of = [cache, data_dir]() -> const LoadedCorpus& {
    if (!cache->has_value()) *cache = load_corpus(data_dir);
    return **cache;
  };

  auto make_train = [&](Phase phase, uint64_t seed, int epochs) {
    TrainCommand cmd;
    cmd.data_dir = data_dir;
    cmd.run.phase = phase;
    cmd.run.seed = seed;
    cmd.run.epochs = epochs;
    cmd.run.batch_size = cfg.batch_size;
    cmd.run.lr = cfg.lr;
    cmd.ae_cfg = cfg.ae_cfg;
    cmd.dn_cfg = cfg.dn_cfg;
    cmd.schedule_steps = cfg.schedule_steps;
    cmd.beta_start = cfg.beta_start;
    cmd.beta_end = cfg.beta_end;
    return cmd;
  };
  auto add_eval_node = [&](const std::string& run_name, const std::string& dep,
                           const std::string& ckpt, const std::string& csv_path,
                           bool curves_only, std::vector<std::string>* all_csvs) {
    PlanNode node;
    node.name = run_name + (curves_only ? "" : "/eval");
    node.deps = {dep};
    node.outputs = {csv_path};
    EvalConfig ecfg = cfg.eval;
    ecfg.run_id = run_name;
    if (curves_only) {
      ecfg.sample_metrics = false;
      ecfg.curves = true;
    }
    node.run = [corpus_of, ckpt, csv_path, ecfg] {
      LoadedCheckpoint lc = load_checkpoint(ckpt);
      EvalConfig resolved = ecfg;
      resolved.step = lc.state.cursor.step;
      write_metric_csv(csv_path, evaluate_bundle(lc.bundle, corpus_of(), resolved));
    };
    plan.nodes.push_back(std::move(node));
    all_csvs->push_back(csv_path);
  };

  std::vector<std::string> comparison_deps;
  std::vector<std::string> comparison_csvs;
  for (uint64_t seed : cfg.seeds) {
    const std::string seed_name = "seed" + std::to_string(seed);
    const std::string seed_dir = cfg.out_dir + "/" + seed_name;

    const std::string ae_name = seed_name + "/pretrain_ae";
    const std::string ae_dir = seed_dir + "/pretrain_ae";
    const std::string ae_ckpt = ae_dir + "/ckpt_final.ldpx";
    {
      PlanNode node;
      node.name = ae_name;
      node.deps = corpus_dep;
      node.outputs = {ae_ckpt};
      TrainCommand cmd = make_train(Phase::kPretrainAe, seed, ae_epochs);
      cmd.out_dir = ae_dir;
      node.run = [corpus_of, cmd] { run_train_command(cmd, corpus_of()); };
      plan.nodes.push_back(std::move(node));
    }

    const std::string diff_name = seed_name + "/pretrain_diffusion";
    const std::string diff_dir = seed_dir + "/pretrain_diffusion";
    const std::string diff_ckpt = diff_dir + "/ckpt_final.ldpx";
    {
      PlanNode node;
      node.name = diff_name;
      node.deps = {ae_name};
      node.outputs = {diff_ckpt};
      TrainCommand cmd = make_train(Phase::kPretrainDiffusion, seed, diffusion_epochs);
      cmd.out_dir = diff_dir;
      cmd.init_checkpoint = ae_ckpt;
      node.run = [corpus_of, cmd] { run_train_command(cmd, corpus_of()); };
      plan.nodes.push_back(std::move(node));
    }

    if (cfg.preset == "decode-ablation") {
      // The two decode pathways profiled on the pretrained model: the
      // inversion path's variance blow-up against the flat decode-at-t path.
      add_eval_node(seed_name + "/decode_ablation", diff_name, diff_ckpt,
                    seed_dir + "/decode_ablation/curves.csv", /*curves_only=*/true,
                    &comparison_csvs);
      comparison_deps.push_back(seed_name + "/decode_ablation");
      continue;
    }

    // The pretrained baseline's own scores anchor the post-training deltas.
    add_eval_node(diff_name, diff_name, diff_ckpt, diff_dir + "/eval.csv",
                  /*curves_only=*/false, &comparison_csvs);
    comparison_deps.push_back(diff_name + "/eval");

    if (cfg.preset == "table5") {
      const std::pair<SftObjective, std::string> variants[] = {
          {SftObjective::kLatent, "sft_latent"},
          {SftObjective::kPixel, "sft_pixel"},
          {SftObjective::kCombined, "sft_combined"},
      };
      for (const auto& [objective, slug] : variants) {
        const std::string run_name = seed_name + "/" + slug;
        const std::string run_dir = seed_dir + "/" + slug;
        const std::string ckpt = run_dir + "/ckpt_final.ldpx";
        PlanNode node;
        node.name = run_name;
        node.deps = {diff_name};
        node.outputs = {ckpt};
        TrainCommand cmd = make_train(Phase::kSft, seed, post_epochs);
        cmd.out_dir = run_dir;
        cmd.init_checkpoint = diff_ckpt;
        cmd.run.sft_objective = objective;
        node.run = [corpus_of, cmd] { run_train_command(cmd, corpus_of()); };
        plan.nodes.push_back(std::move(node));
        add_eval_node(run_name, run_name, ckpt, run_dir + "/eval.csv",
                      /*curves_only=*/false, &comparison_csvs);
        comparison_deps.push_back(run_name + "/eval");
      }
    } else {  // table6
      for (RewardMode mode :
           {RewardMode::kDpoOnly, RewardMode::kDpoDpoPixel, RewardMode::kDpoSimpoPixel,
            RewardMode::kSimpoSimpoPixel}) {
        const std::string slug = "prefs_" + mode_slug(mode);
        const std::string run_name = seed_name + "/" + slug;
        const std::string run_dir = seed_dir + "/" + slug;
        const std::string ckpt = run_dir + "/ckpt_final.ldpx";
        PlanNode node;
        node.name = run_name;
        node.deps = {diff_name};
        node.outputs = {ckpt};
        TrainCommand cmd = make_train(Phase::kPreference, seed, post_epochs);
        cmd.out_dir = run_dir;
        cmd.init_checkpoint = diff_ckpt;
        cmd.run.reward_mode = mode;
        node.run = [corpus_of, cmd] { run_train_command(cmd, corpus_of()); };
        plan.nodes.push_back(std::move(node));
        add_eval_node(run_name, run_name, ckpt, run_dir + "/eval.csv",
                      /*curves_only=*/false, &comparison_csvs);
        comparison_deps.push_back(run_name + "/eval");
      }
    }
  }

  PlanNode merge;
  merge.name = "comparison";
  merge.deps = std::move(comparison_deps);
  merge.outputs = {cfg.out_dir + "/comparison.csv"};
  merge.run = [csvs = comparison_csvs, out = cfg.out_dir + "/comparison.csv"] {
    std::vector<MetricRow> rows;
    for (const std::string& csv : csvs) {
      std::vector<MetricRow> part = read_metric_csv(csv);
      rows.insert(rows.end(), part.begin(), part.end());
    }
    write_metric_csv(out, rows);
  };
  plan.nodes.push_back(std::move(merge));
  return plan;
}

void write_invocation(const std::string& dir, const std::string& command,
                      const std::vector<std::pair<std::string, std::string>>& entries) {
  ensure_dir(dir);
  json config = json::object();
  for (const auto& [key, value] : entries) config[key] = value;
  json j{{"command", command}, {"build", build_id()}, {"config", config}};
  const std::string path = dir + "/invocation_" + command + ".json";
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << j.dump(2) << '\n';
  if (!out.flush()) throw IoError("failed writing '" + path + "'");
}

}  // namespace pixelpost
