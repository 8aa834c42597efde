// mtkws/pipeline.hpp

// Copyright 2026  MT-KWS Authors

// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// THIS CODE IS PROVIDED *AS IS* BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, EITHER EXPRESS OR IMPLIED, INCLUDING WITHOUT LIMITATION ANY IMPLIED
// WARRANTIES OR CONDITIONS OF TITLE, FITNESS FOR A PARTICULAR PURPOSE,
// MERCHANTABLITY OR NON-INFRINGEMENT.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.
//
// Stage drivers wiring corpus -> mixing -> tokenizer -> pretrain -> adapt ->
// evalkit into reproducible experiments under one work directory. Every stage
// writes a provenance stamp consumed by its downstream stages.
//
// Waveforms are RMS-normalized at the door of every feature extraction, so
// absolute signal level never leaks into the model; mixture scale factors
// survive as within-mixture energy ratios.

#ifndef MTKWS_PIPELINE_HPP
#define MTKWS_PIPELINE_HPP

#include <atomic>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <set>
#include <string>
#include <tuple>
#include <unordered_map>
#include <vector>

#include "mtkws/adapt.hpp"
#include "mtkws/backbone.hpp"
#include "mtkws/config.hpp"
#include "mtkws/corpus.hpp"
#include "mtkws/evalkit.hpp"
#include "mtkws/mixing.hpp"
#include "mtkws/pretrain.hpp"
#include "mtkws/tokenizer.hpp"

namespace mtkws {

namespace fs = std::filesystem;

struct StageContext {
  ExperimentConfig cfg;
  fs::path workdir;

  uint64_t hash() const { return config_hash(cfg); }
};

constexpr int kStageVersion = 1;

inline void append_run_log(const StageContext& ctx, const std::string& line) {
  fs::create_directories(ctx.workdir);
  std::ofstream log(ctx.workdir / "run.log", std::ios::app);
  log << line << "\n";
}

inline void write_stamp(const StageContext& ctx, const fs::path& dir, const std::string& stage) {
  std::string s;
  s += "stage\t" + stage + "\n";
  s += "version\t" + std::to_string(kStageVersion) + "\n";
  s += "config_hash\t" + hex64(ctx.hash()) + "\n";
  s += "seed\t" + std::to_string(ctx.cfg.seed) + "\n";
  write_text_file(dir / "stamp.tsv", s);
}

inline void check_stamp(const StageContext& ctx, const fs::path& dir, const std::string& stage) {
  const fs::path path = dir / "stamp.tsv";
  MTKWS_REQUIRE(fs::exists(path), ErrorKind::kPrecondition,
                "missing provenance stamp for stage '" + stage + "' (" + path.string() +
                    "); run `mtkws " + stage + "` first");
  std::map<std::string, std::string> kv;
  for (const auto& raw : split(read_text_file(path), '\n')) {
    auto line = strip(raw);
    if (line.empty()) continue;
    auto fields = split(line, '\t');
    if (fields.size() == 2) kv[fields[0]] = fields[1];
  }
  MTKWS_REQUIRE(kv["stage"] == stage, ErrorKind::kIntegrity,
                "provenance mismatch in " + path.string() + ": stage '" + kv["stage"] +
                    "' where '" + stage + "' was expected");
  MTKWS_REQUIRE(kv["version"] == std::to_string(kStageVersion), ErrorKind::kIntegrity,
                "provenance mismatch: stage version " + kv["version"]);
  MTKWS_REQUIRE(kv["config_hash"] == hex64(ctx.hash()), ErrorKind::kIntegrity,
                "provenance mismatch for stage '" + stage +
                    "': artifacts were built under a different config");
  MTKWS_REQUIRE(kv["seed"] == std::to_string(ctx.cfg.seed), ErrorKind::kIntegrity,
                "provenance mismatch for stage '" + stage +
                    "': artifacts were built under a different seed");
}

// In-memory waveform store keyed by utterance id.
class WaveformCache {
 public:
  explicit WaveformCache(const Manifest& manifest) : manifest_(&manifest) {}

  const Waveform& get(const std::string& id) {
    auto it = cache_.find(id);
    if (it != cache_.end()) return it->second;
    Waveform w = read_wav(manifest_->audio_path(manifest_->by_id(id)));
    return cache_.emplace(id, std::move(w)).first->second;
  }

  WaveformLookup lookup() {
    return [this](const std::string& id) { return get(id); };
  }

 private:
  const Manifest* manifest_;
  std::unordered_map<std::string, Waveform> cache_;
};

inline FeatureMatrix features_for_model(const Waveform& w, const FeatureConfig& cfg,
                                        const std::string& id = "") {
  return extract_features(normalize_rms(w), cfg, id);
}

// --- stage: synth-data -------------------------------------------------------

inline std::string stage_synth_data(const StageContext& ctx) {
  const auto& c = ctx.cfg;
  fs::path corpus_dir = ctx.workdir / "corpus";
  Manifest train = generate_synthetic_corpus(
      c.corpus_n_keywords, c.corpus_train_per_class, c.corpus_duration_s, c.corpus_sample_rate,
      derive_seed(c.seed, {UINT64_C(0x7472)}), corpus_dir / "train", "train");
  Manifest test = generate_synthetic_corpus(
      c.corpus_n_keywords, c.corpus_test_per_class, c.corpus_duration_s, c.corpus_sample_rate,
      derive_seed(c.seed, {UINT64_C(0x7465)}), corpus_dir / "test", "test");
  write_stamp(ctx, corpus_dir, "synth-data");
  std::string summary = "synth-data: " + std::to_string(train.records.size()) + " train + " +
                        std::to_string(test.records.size()) + " test utterances, " +
                        std::to_string(c.corpus_n_keywords) + " keywords";
  append_run_log(ctx, summary);
  return summary;
}

inline Manifest load_train_manifest(const StageContext& ctx) {
  check_stamp(ctx, ctx.workdir / "corpus", "synth-data");
  return load_manifest(ctx.workdir / "corpus" / "train" / "manifest.tsv");
}

inline Manifest load_test_manifest(const StageContext& ctx) {
  check_stamp(ctx, ctx.workdir / "corpus", "synth-data");
  return load_manifest(ctx.workdir / "corpus" / "test" / "manifest.tsv");
}

// --- stage: mix-build --------------------------------------------------------

inline std::string stage_mix_build(const StageContext& ctx) {
  const auto& c = ctx.cfg;
  Manifest train = load_train_manifest(ctx);
  Manifest test = load_test_manifest(ctx);
  fs::path mix_dir = ctx.workdir / "mixtures";
  fs::create_directories(mix_dir);

  auto mixed = build_pretrain_mixture_specs(train, 2, c.mixing_clean_fraction,
                                            c.mixing_pretrain_count,
                                            derive_seed(c.seed, {UINT64_C(0x6d78), 0}));
  write_mixture_manifest(mix_dir / "pretrain_mix.tsv", mixed, train);
  auto clean = build_pretrain_mixture_specs(train, 2, 1.0, c.mixing_pretrain_count,
                                            derive_seed(c.seed, {UINT64_C(0x6d78), 1}));
  write_mixture_manifest(mix_dir / "pretrain_clean.tsv", clean, train);
  auto eval2 = build_eval_mixture_specs(test, 2, c.mixing_eval_count,
                                        derive_seed(c.seed, {UINT64_C(0x6d78), 2}));
  write_mixture_manifest(mix_dir / "eval_2mix.tsv", eval2, test);
  auto eval3 = build_eval_mixture_specs(test, 3, c.mixing_eval_count,
                                        derive_seed(c.seed, {UINT64_C(0x6d78), 3}));
  write_mixture_manifest(mix_dir / "eval_3mix.tsv", eval3, test);

  write_stamp(ctx, mix_dir, "mix-build");
  std::string summary = "mix-build: " + std::to_string(mixed.size()) + " pretrain mixtures (+" +
                        std::to_string(clean.size()) + " clean-only), 2x" +
                        std::to_string(eval2.size()) + " eval mixtures";
  append_run_log(ctx, summary);
  return summary;
}

// --- stage: tokenize ---------------------------------------------------------

inline std::string stage_tokenize(const StageContext& ctx) {
  const auto& c = ctx.cfg;
  Manifest train = load_train_manifest(ctx);
  check_stamp(ctx, ctx.workdir / "mixtures", "mix-build");
  const FeatureConfig feat_cfg = c.feature_config();
  fs::path tok_dir = ctx.workdir / "tokenizer";
  fs::create_directories(tok_dir);

  WaveformCache cache(train);
  std::vector<FeatureMatrix> clean_feats(train.records.size());
  for (size_t i = 0; i < train.records.size(); ++i)
    cache.get(train.records[i].id);  // warm serially; parallel extraction below
  parallel_for(train.records.size(), [&](size_t i) {
    const auto& rec = train.records[i];
    clean_feats[i] = features_for_model(cache.get(rec.id), feat_cfg, rec.id);
  });

  KMeansStats stats;
  Codebook cb = fit_codebook(clean_feats, c.tokenizer_codebook_size, c.tokenizer_kmeans_iters,
                             derive_seed(c.seed, {UINT64_C(0x6b6d65)}), &stats);
  write_codebook(tok_dir / "codebook.txt", cb);

  std::vector<std::pair<std::string, TokenSequence>> clean_tokens(train.records.size());
  parallel_for(train.records.size(), [&](size_t i) {
    clean_tokens[i] = {train.records[i].id, tokenize_frames(clean_feats[i], cb)};
  });
  write_token_file(tok_dir / "clean_tokens.tsv", clean_tokens);
  std::unordered_map<std::string, const TokenSequence*> token_index;
  for (const auto& [id, seq] : clean_tokens) token_index[id] = &seq;

  auto mixed_specs = load_mixture_manifest(ctx.workdir / "mixtures" / "pretrain_mix.tsv");
  std::vector<std::pair<std::string, NHotTargets>> nhot(mixed_specs.size());
  std::vector<std::pair<std::string, TokenSequence>> mix_tokens(mixed_specs.size());
  auto lookup = cache.lookup();
  for (const auto& spec : mixed_specs)
    for (const auto& sid : spec.source_ids) cache.get(sid);  // warm the cache serially
  std::atomic<uint64_t> clipped{0}, total_samples{0};
  parallel_for(mixed_specs.size(), [&](size_t i) {
    const auto& spec = mixed_specs[i];
    MixtureExample ex = realize_mixture(spec, train, lookup, spec_label(spec, train));
    clipped += ex.clipped_samples;
    total_samples += ex.waveform.samples.size();
    FeatureMatrix mix_feat = features_for_model(ex.waveform, feat_cfg, spec.mix_id);
    mix_tokens[i] = {spec.mix_id, make_mixture_targets(mix_feat, cb)};
    std::vector<TokenSequence> per_source;
    for (const auto& sid : spec.source_ids) {
      TokenSequence seq = *token_index.at(sid);
      MTKWS_REQUIRE(static_cast<Eigen::Index>(seq.tokens.size()) >= mix_feat.frames.rows(),
                    ErrorKind::kIntegrity, "source tokens shorter than mixture frames");
      seq.tokens.resize(static_cast<size_t>(mix_feat.frames.rows()));
      per_source.push_back(std::move(seq));
    }
    nhot[i] = {spec.mix_id, make_nhot_targets(per_source, c.tokenizer_codebook_size)};
  });
  write_nhot_file(tok_dir / "nhot.tsv", nhot);
  write_token_file(tok_dir / "mix_tokens.tsv", mix_tokens);

  write_stamp(ctx, tok_dir, "tokenize");
  const double clip_rate =
      total_samples > 0 ? static_cast<double>(clipped) / static_cast<double>(total_samples) : 0.0;
  append_run_log(ctx, "mixture clip rate: " + format_double_exact(clip_rate) + " (" +
                          std::to_string(clipped.load()) + " samples)");
  std::string summary = "tokenize: codebook C=" + std::to_string(cb.size()) + " (" +
                        std::to_string(stats.iterations) + " k-means iters), " +
                        std::to_string(nhot.size()) + " n-hot targets";
  append_run_log(ctx, summary);
  return summary;
}

// --- stage: pretrain ---------------------------------------------------------

inline fs::path pretrain_dir(const StageContext& ctx, PretrainMode mode) {
  return ctx.workdir / "pretrain" / pretrain_mode_name(mode);
}

inline fs::path final_checkpoint_path(const StageContext& ctx, PretrainMode mode) {
  return pretrain_dir(ctx, mode) / ("ckpt_" + std::to_string(ctx.cfg.pretrain_steps)) /
         "model.ckpt";
}

inline void save_model(const fs::path& path, const Backbone& backbone,
                       const PredictionHead& head) {
  auto tensors = const_cast<Backbone&>(backbone).params.tensors();
  auto ht = const_cast<PredictionHead&>(head).tensors();
  tensors.insert(tensors.end(), ht.begin(), ht.end());
  save_checkpoint(path, backbone.config.serialize(), tensors);
}

struct PretrainModel {
  Backbone backbone;
  PredictionHead head;
};

inline PretrainModel load_model(const fs::path& path) {
  MTKWS_REQUIRE(fs::exists(path), ErrorKind::kPrecondition,
                "missing checkpoint: " + path.string() + "; run `mtkws pretrain` first");
  // first pass: shapes come from the embedded config
  std::string buf = read_text_file(path);
  MTKWS_REQUIRE(buf.size() >= 16, ErrorKind::kIo, "truncated checkpoint");
  uint32_t cfg_len;
  std::memcpy(&cfg_len, buf.data() + 12, 4);
  MTKWS_REQUIRE(16 + cfg_len <= buf.size(), ErrorKind::kIo, "truncated checkpoint config");
  BackboneConfig cfg = BackboneConfig::deserialize(buf.substr(16, cfg_len));
  PretrainModel model;
  model.backbone.config = cfg;
  model.backbone.params.init_shapes(cfg);
  model.head.init_shapes(cfg);
  auto tensors = model.backbone.params.tensors();
  auto ht = model.head.tensors();
  tensors.insert(tensors.end(), ht.begin(), ht.end());
  load_checkpoint(path, tensors);
  return model;
}

// Assembles the mode's dataset from mixture manifests and tokenizer artifacts.
inline std::vector<PretrainExample> load_pretrain_dataset(const StageContext& ctx,
                                                          PretrainMode mode) {
  const auto& c = ctx.cfg;
  const FeatureConfig feat_cfg = c.feature_config();
  const fs::path tok_dir = ctx.workdir / "tokenizer";
  const fs::path mix_dir = ctx.workdir / "mixtures";
  // mode-specific dependency checks first, so the failure names what is missing
  if (mode == PretrainMode::kMtBce)
    MTKWS_REQUIRE(fs::exists(tok_dir / "nhot.tsv"), ErrorKind::kPrecondition,
                  "missing n-hot targets (" + (tok_dir / "nhot.tsv").string() +
                      "); run `mtkws tokenize` first");
  if (mode == PretrainMode::kMpcNll)
    MTKWS_REQUIRE(fs::exists(tok_dir / "mix_tokens.tsv"), ErrorKind::kPrecondition,
                  "missing mixture tokens (" + (tok_dir / "mix_tokens.tsv").string() +
                      "); run `mtkws tokenize` first");
  Manifest train = load_train_manifest(ctx);
  check_stamp(ctx, ctx.workdir / "mixtures", "mix-build");
  check_stamp(ctx, ctx.workdir / "tokenizer", "tokenize");

  const bool is_mixture_mode = mode != PretrainMode::kCleanNll;
  const fs::path spec_path = mix_dir / (is_mixture_mode ? "pretrain_mix.tsv" : "pretrain_clean.tsv");
  MTKWS_REQUIRE(fs::exists(spec_path), ErrorKind::kPrecondition,
                "missing mixture manifest " + spec_path.string() + "; run `mtkws mix-build`");
  auto specs = load_mixture_manifest(spec_path);

  std::unordered_map<std::string, TokenSequence> clean_tokens;
  for (auto& [id, seq] : load_token_file(tok_dir / "clean_tokens.tsv"))
    clean_tokens[id] = std::move(seq);
  std::unordered_map<std::string, NHotTargets> nhot;
  std::unordered_map<std::string, TokenSequence> mix_tokens;
  if (mode == PretrainMode::kMtBce) {
    const fs::path nhot_path = tok_dir / "nhot.tsv";
    MTKWS_REQUIRE(fs::exists(nhot_path), ErrorKind::kPrecondition,
                  "missing n-hot targets (" + nhot_path.string() +
                      "); run `mtkws tokenize` first");
    for (auto& [id, t] : load_nhot_file(nhot_path, c.tokenizer_codebook_size))
      nhot[id] = std::move(t);
  } else if (mode == PretrainMode::kMpcNll) {
    const fs::path mt_path = tok_dir / "mix_tokens.tsv";
    MTKWS_REQUIRE(fs::exists(mt_path), ErrorKind::kPrecondition,
                  "missing mixture tokens (" + mt_path.string() +
                      "); run `mtkws tokenize` first");
    for (auto& [id, seq] : load_token_file(mt_path)) mix_tokens[id] = std::move(seq);
  }

  WaveformCache cache(train);
  for (const auto& spec : specs)
    for (const auto& sid : spec.source_ids) cache.get(sid);
  auto lookup = cache.lookup();

  std::vector<PretrainExample> data(specs.size());
  parallel_for(specs.size(), [&](size_t i) {
    const auto& spec = specs[i];
    MixtureExample ex = realize_mixture(spec, train, lookup, spec_label(spec, train));
    FeatureMatrix f = features_for_model(ex.waveform, feat_cfg, spec.mix_id);
    PretrainExample out;
    out.id = spec.mix_id;
    out.features = f.frames;
    if (mode == PretrainMode::kMtBce) {
      out.targets.nhot = nhot.at(spec.mix_id);
    } else if (mode == PretrainMode::kMpcNll) {
      out.targets.tokens = mix_tokens.at(spec.mix_id);
    } else {
      TokenSequence seq = clean_tokens.at(spec.source_ids.at(0));
      seq.tokens.resize(static_cast<size_t>(f.frames.rows()));
      out.targets.tokens = std::move(seq);
    }
    data[i] = std::move(out);
  });
  return data;
}

inline std::string stage_pretrain(const StageContext& ctx, PretrainMode mode) {
  const auto& c = ctx.cfg;
  auto data = load_pretrain_dataset(ctx, mode);
  const fs::path mode_dir = pretrain_dir(ctx, mode);
  fs::create_directories(mode_dir);

  // shared init across modes so the objective is the only difference
  Backbone backbone(c.backbone_config(), derive_seed(c.seed, {UINT64_C(0xbb00)}));
  PredictionHead head;
  Rng head_rng(derive_seed(c.seed, {UINT64_C(0xbd00)}));
  head.init_random(backbone.config, head_rng);

  write_text_file(mode_dir / "config.snapshot", format_config(c));
  std::ofstream log_stream(mode_dir / "train_log.tsv", std::ios::trunc);
  MTKWS_REQUIRE(log_stream.good(), ErrorKind::kIo, "cannot write training log");
  PretrainConfig pcfg = c.pretrain_config(mode);
  auto result = pretrain_run(
      pcfg, data, backbone, head,
      [&](int step) {
        save_model(mode_dir / ("ckpt_" + std::to_string(step)) / "model.ckpt", backbone, head);
      },
      [&](const PretrainStepLog& entry) {
        log_stream << entry.step << '\t' << pretrain_mode_name(mode) << '\t'
                   << format_double_exact(entry.loss) << '\t' << entry.masked_frames << '\t'
                   << format_double_exact(entry.lr) << '\n';
      });
  log_stream.flush();
  write_stamp(ctx, mode_dir, std::string("pretrain:") + pretrain_mode_name(mode));

  double final_loss = result.log.empty() ? 0.0 : result.log.back().loss;
  std::string summary = std::string("pretrain ") + pretrain_mode_name(mode) + ": " +
                        std::to_string(c.pretrain_steps) + " steps, final loss " +
                        format_double(final_loss, 4) + ", " +
                        std::to_string(result.checkpoint_steps.size()) + " checkpoints";
  append_run_log(ctx, summary);
  return summary;
}

// --- stage: adapt ------------------------------------------------------------

inline fs::path head_dir(const StageContext& ctx, PretrainMode mode, AdaptStrategy strategy,
                         int shots, int repeat) {
  return ctx.workdir / "adapt" / pretrain_mode_name(mode) / adapt_strategy_name(strategy) /
         ("shots" + std::to_string(shots) + "_rep" + std::to_string(repeat));
}

inline std::string stage_adapt(const StageContext& ctx, const std::vector<std::string>& strategies,
                               int shots) {
  const auto& c = ctx.cfg;
  Manifest train = load_train_manifest(ctx);
  WaveformCache cache(train);
  auto lookup = cache.lookup();
  auto subsets = sample_few_shot(train, shots, c.adapt_repeats, c.seed);

  int runs = 0;
  for (const auto& mode_name : c.pretrain_modes) {
    PretrainMode mode = parse_pretrain_mode(mode_name);
    check_stamp(ctx, pretrain_dir(ctx, mode), std::string("pretrain:") + mode_name);
    PretrainModel model = load_model(final_checkpoint_path(ctx, mode));
    const uint64_t frozen_hash = tensors_hash(model.backbone.params.tensors());

    for (const auto& strategy_name : strategies) {
      AdaptStrategy strategy = parse_adapt_strategy(strategy_name);
      for (int rep = 0; rep < c.adapt_repeats; ++rep) {
        auto examples = build_adaptation_examples(
            subsets[static_cast<size_t>(rep)], train, strategy, c.adapt_mixup_alpha,
            derive_seed(c.seed, {UINT64_C(0xe6), static_cast<uint64_t>(strategy),
                                 static_cast<uint64_t>(shots), static_cast<uint64_t>(rep)}),
            lookup);
        AdaptConfig acfg = c.adapt_config(strategy, shots, rep);
        auto result = adapt_run(model.backbone, examples, acfg, c.feature_config());
        MTKWS_REQUIRE(tensors_hash(model.backbone.params.tensors()) == frozen_hash,
                      ErrorKind::kIntegrity, "backbone changed during adaptation");
        KwsHead head = average_checkpoints(result.epoch_heads);
        fs::path dir = head_dir(ctx, mode, strategy, shots, rep);
        fs::create_directories(dir);
        save_checkpoint(dir / "head.ckpt", head.serialize_config(), head.tensors());
        std::string meta;
        meta += "pretrain\t" + std::string(mode_name) + "\n";
        meta += "strategy\t" + std::string(strategy_name) + "\n";
        meta += "shots\t" + std::to_string(shots) + "\n";
        meta += "repeat\t" + std::to_string(rep) + "\n";
        meta += "seed\t" + std::to_string(acfg.seed) + "\n";
        meta += "final_train_bce\t" + format_double_exact(result.epoch_losses.back()) + "\n";
        write_text_file(dir / "meta.tsv", meta);
        ++runs;
      }
    }
  }
  write_stamp(ctx, ctx.workdir / "adapt", "adapt");
  std::string summary = "adapt: " + std::to_string(runs) + " head runs (shots=" +
                        std::to_string(shots) + ", repeats=" + std::to_string(c.adapt_repeats) +
                        ")";
  append_run_log(ctx, summary);
  return summary;
}

inline KwsHead load_head(const StageContext& ctx, PretrainMode mode, AdaptStrategy strategy,
                         int shots, int repeat, int model_dim) {
  fs::path path = head_dir(ctx, mode, strategy, shots, repeat) / "head.ckpt";
  MTKWS_REQUIRE(fs::exists(path), ErrorKind::kPrecondition,
                "missing adapted head: " + path.string() + "; run `mtkws adapt` first");
  KwsHead head;
  head.init_shapes(model_dim, ctx.cfg.adapt_hidden_dim, ctx.cfg.corpus_n_keywords);
  load_checkpoint(path, head.tensors());
  return head;
}

// --- stage: eval -------------------------------------------------------------

struct MetricsRow {
  std::string condition;
  std::string pretrain;
  std::string strategy;
  int shots = 0;
  int repeat = 0;
  double acc = 0.0;
  double eer = 0.0;
};

inline fs::path metrics_path(const StageContext& ctx) {
  return ctx.workdir / "eval" / "metrics.tsv";
}

inline std::vector<MetricsRow> read_metrics(const StageContext& ctx) {
  std::vector<MetricsRow> rows;
  if (!fs::exists(metrics_path(ctx))) return rows;
  for (const auto& raw : split(read_text_file(metrics_path(ctx)), '\n')) {
    std::string line = strip(raw);
    if (line.empty() || line[0] == '#') continue;
    auto f = split(line, '\t');
    MTKWS_REQUIRE(f.size() == 7, ErrorKind::kIo, "bad metrics row: " + line);
    rows.push_back({f[0], f[1], f[2], std::stoi(f[3]), std::stoi(f[4]), std::stod(f[5]),
                    std::stod(f[6])});
  }
  return rows;
}

inline void write_metrics(const StageContext& ctx, const std::vector<MetricsRow>& rows) {
  std::string out = "#condition\tpretrain\tstrategy\tshots\trepeat\tacc\teer\n";
  for (const auto& r : rows)
    out += r.condition + '\t' + r.pretrain + '\t' + r.strategy + '\t' + std::to_string(r.shots) +
           '\t' + std::to_string(r.repeat) + '\t' + format_double_exact(r.acc) + '\t' +
           format_double_exact(r.eer) + '\n';
  write_text_file(metrics_path(ctx), out);
}

struct EvalInput {
  std::string utterance_id;
  Eigen::VectorXd embedding;  // filled per backbone
  std::vector<int> truth;
};

// Evaluates every (mode, strategy, repeat) head on one condition and rewrites
// that condition's rows in eval/metrics.tsv.
inline std::string stage_eval(const StageContext& ctx, const std::string& condition, int shots) {
  const auto& c = ctx.cfg;
  MTKWS_REQUIRE(condition == "clean" || condition == "2mix" || condition == "3mix",
                ErrorKind::kValidation, "condition must be clean, 2mix or 3mix");
  Manifest test = load_test_manifest(ctx);
  const FeatureConfig feat_cfg = c.feature_config();
  WaveformCache cache(test);
  auto lookup = cache.lookup();
  const int k_mix = condition == "clean" ? 1 : (condition == "2mix" ? 2 : 3);

  // realize the condition's waveforms once
  std::vector<std::string> ids;
  std::vector<Waveform> waves;
  std::vector<std::vector<int>> truths;
  if (condition == "clean") {
    for (const auto& rec : test.records) {
      ids.push_back(rec.id);
      waves.push_back(cache.get(rec.id));
      truths.push_back({rec.keyword});
    }
  } else {
    check_stamp(ctx, ctx.workdir / "mixtures", "mix-build");
    auto specs = load_mixture_manifest(ctx.workdir / "mixtures" /
                                       ("eval_" + condition + ".tsv"));
    for (const auto& spec : specs) {
      MixtureExample ex = realize_mixture(spec, test, lookup, spec_label(spec, test));
      std::vector<int> truth;
      for (size_t b = 0; b < ex.label.size(); ++b)
        if (ex.label[b]) truth.push_back(static_cast<int>(b));
      ids.push_back(spec.mix_id);
      waves.push_back(std::move(ex.waveform));
      truths.push_back(std::move(truth));
    }
  }

  auto rows = read_metrics(ctx);
  std::erase_if(rows, [&](const MetricsRow& r) {
    return r.condition == condition && r.shots == shots;
  });

  std::string summary;
  for (const auto& mode_name : c.pretrain_modes) {
    PretrainMode mode = parse_pretrain_mode(mode_name);
    PretrainModel model = load_model(final_checkpoint_path(ctx, mode));
    // embeddings for this backbone, shared across heads
    std::vector<Eigen::VectorXd> embeddings(waves.size());
    parallel_for(waves.size(), [&](size_t i) {
      FeatureMatrix f = features_for_model(waves[i], feat_cfg, ids[i]);
      embeddings[i] = embed_features(f.frames, model.backbone);
    });
    for (const auto& strategy_name : c.adapt_strategies) {
      AdaptStrategy strategy = parse_adapt_strategy(strategy_name);
      std::vector<double> accs, eers;
      for (int rep = 0; rep < c.adapt_repeats; ++rep) {
        KwsHead head = load_head(ctx, mode, strategy, shots, rep, c.backbone_model_dim);
        std::vector<ScoredUtterance> batch;
        std::vector<Trial> trials;
        for (size_t i = 0; i < embeddings.size(); ++i) {
          Eigen::VectorXd scores = score_pooled(embeddings[i], head);
          std::set<int> truth_set(truths[i].begin(), truths[i].end());
          for (int kw = 0; kw < c.corpus_n_keywords; ++kw)
            trials.push_back({ids[i], kw, scores(kw), truth_set.count(kw) > 0});
          batch.push_back({std::move(scores), truths[i]});
        }
        double acc = top_k_accuracy(batch, k_mix);
        double eer = compute_eer(trials);
        rows.push_back({condition, mode_name, strategy_name, shots, rep, acc, eer});
        accs.push_back(acc);
        eers.push_back(eer);
      }
      auto acc_agg = aggregate_runs(accs);
      auto eer_agg = aggregate_runs(eers);
      summary += condition + " " + mode_name + "+" + strategy_name + " shots=" +
                 std::to_string(shots) + ": Top-" + std::to_string(k_mix) + " ACC " +
                 format_double(100.0 * acc_agg.mean, 2) + "%, EER " +
                 format_double(100.0 * eer_agg.mean, 2) + "%\n";
    }
  }
  std::sort(rows.begin(), rows.end(), [](const MetricsRow& a, const MetricsRow& b) {
    return std::tie(a.condition, a.pretrain, a.strategy, a.shots, a.repeat) <
           std::tie(b.condition, b.pretrain, b.strategy, b.shots, b.repeat);
  });
  write_metrics(ctx, rows);
  write_stamp(ctx, ctx.workdir / "eval", "eval");
  append_run_log(ctx, "eval " + condition + ": " + std::to_string(rows.size()) + " total rows");
  return summary;
}

// --- stage: report -----------------------------------------------------------

inline std::vector<EvalReport> collect_reports(const StageContext& ctx) {
  auto rows = read_metrics(ctx);
  MTKWS_REQUIRE(!rows.empty(), ErrorKind::kPrecondition,
                "no evaluation metrics found; run `mtkws eval` first");
  std::map<std::tuple<std::string, std::string, std::string, int>, EvalReport> grouped;
  for (const auto& r : rows) {
    auto key = std::make_tuple(r.condition, r.pretrain, r.strategy, r.shots);
    auto& report = grouped[key];
    report.condition = r.condition;
    report.pretrain = r.pretrain;
    report.strategy = r.strategy;
    report.shots = r.shots;
    report.per_repeat.emplace_back(r.acc, r.eer);
  }
  std::vector<EvalReport> reports;
  for (auto& [key, report] : grouped) reports.push_back(std::move(report));
  return reports;
}

inline std::string stage_report(const StageContext& ctx) {
  check_stamp(ctx, ctx.workdir / "eval", "eval");
  auto reports = collect_reports(ctx);
  std::string tsv = emit_report_tsv(reports);
  std::string table = emit_report_table(reports);
  write_text_file(ctx.workdir / "report.tsv", tsv);
  write_text_file(ctx.workdir / "report.txt", table);
  append_run_log(ctx, "report: " + std::to_string(reports.size()) + " rows");
  return table;
}

// --- end-to-end recipe -------------------------------------------------------

// Runs every stage under the context's config. This is the `toy-table1`
// recipe when invoked with the default configuration.
inline std::string run_full_pipeline(const StageContext& ctx,
                                     const std::function<void(const std::string&)>& progress = {}) {
  auto note = [&](const std::string& s) {
    if (progress) progress(s);
  };
  write_text_file(ctx.workdir / "config.effective", format_config(ctx.cfg));
  note(stage_synth_data(ctx));
  note(stage_mix_build(ctx));
  note(stage_tokenize(ctx));
  for (const auto& mode : ctx.cfg.pretrain_modes)
    note(stage_pretrain(ctx, parse_pretrain_mode(mode)));
  note(stage_adapt(ctx, ctx.cfg.adapt_strategies, ctx.cfg.adapt_shots));
  for (const auto& condition : ctx.cfg.eval_conditions)
    note(stage_eval(ctx, condition, ctx.cfg.adapt_shots));
  return stage_report(ctx);
}

}  // namespace mtkws

#endif  // MTKWS_PIPELINE_HPP
