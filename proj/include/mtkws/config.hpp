// mtkws/config.hpp

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
// Experiment configuration: flat key=value text with dotted section keys.
// Unknown keys are rejected; the effective config echoes canonically so a
// round trip is exact.

#ifndef MTKWS_CONFIG_HPP
#define MTKWS_CONFIG_HPP

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "mtkws/adapt.hpp"
#include "mtkws/backbone.hpp"
#include "mtkws/common.hpp"
#include "mtkws/pretrain.hpp"
#include "mtkws/tokenizer.hpp"

namespace mtkws {

struct ExperimentConfig {
  uint64_t seed = 7;

  int corpus_n_keywords = 10;
  int corpus_train_per_class = 20;
  int corpus_test_per_class = 10;
  double corpus_duration_s = 1.0;
  int corpus_sample_rate = 16000;

  size_t mixing_pretrain_count = 640;
  double mixing_clean_fraction = 0.5;
  size_t mixing_eval_count = 200;

  int features_window = 400;
  int features_hop = 160;
  int features_n_mels = 40;

  int tokenizer_codebook_size = 32;
  int tokenizer_kmeans_iters = 50;

  int backbone_model_dim = 64;
  int backbone_layers = 2;
  int backbone_heads = 4;
  int backbone_ffn_dim = 128;
  double backbone_dropout = 0.1;
  double backbone_temperature = 0.1;

  std::vector<std::string> pretrain_modes = {"clean_nll", "mt_bce", "mpc_nll"};
  int pretrain_steps = 2000;
  double pretrain_learning_rate = 5e-4;
  int pretrain_warmup_steps = 200;
  int pretrain_batch_size = 16;
  int pretrain_checkpoint_every = 500;

  std::vector<std::string> adapt_strategies = {"clean", "mixup", "mt"};
  int adapt_shots = 15;
  int adapt_repeats = 5;
  int adapt_epochs = 50;
  double adapt_learning_rate = 0.001;
  double adapt_mixup_alpha = 1.0;
  int adapt_hidden_dim = 256;
  int adapt_batch_size = 32;

  std::vector<std::string> eval_conditions = {"clean", "2mix", "3mix"};

  FeatureConfig feature_config() const {
    FeatureConfig f;
    f.sample_rate = corpus_sample_rate;
    f.window = features_window;
    f.hop = features_hop;
    f.n_mels = features_n_mels;
    return f;
  }

  BackboneConfig backbone_config() const {
    BackboneConfig b;
    b.input_dim = features_n_mels;
    b.model_dim = backbone_model_dim;
    b.layers = backbone_layers;
    b.heads = backbone_heads;
    b.ffn_dim = backbone_ffn_dim;
    b.dropout = backbone_dropout;
    b.temperature = backbone_temperature;
    b.codebook_size = tokenizer_codebook_size;
    return b;
  }

  PretrainConfig pretrain_config(PretrainMode mode) const {
    PretrainConfig p;
    p.mode = mode;
    p.steps = pretrain_steps;
    p.learning_rate = pretrain_learning_rate;
    p.warmup_steps = pretrain_warmup_steps;
    p.batch_size = pretrain_batch_size;
    p.checkpoint_every = pretrain_checkpoint_every;
    p.seed = derive_seed(seed, {UINT64_C(0x5054), static_cast<uint64_t>(mode)});
    return p;
  }

  AdaptConfig adapt_config(AdaptStrategy strategy, int shots, int repeat_index) const {
    AdaptConfig a;
    a.strategy = strategy;
    a.shots = shots;
    a.repeats = adapt_repeats;
    a.epochs = adapt_epochs;
    a.learning_rate = adapt_learning_rate;
    a.mixup_alpha = adapt_mixup_alpha;
    a.hidden_dim = adapt_hidden_dim;
    a.batch_size = adapt_batch_size;
    a.seed = derive_seed(seed, {UINT64_C(0xad58), static_cast<uint64_t>(strategy),
                                static_cast<uint64_t>(shots),
                                static_cast<uint64_t>(repeat_index)});
    return a;
  }
};

namespace config_detail {

inline std::string join_list(const std::vector<std::string>& v) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += v[i];
  }
  return out;
}

inline std::vector<std::string> parse_list(const std::string& v) {
  std::vector<std::string> out;
  for (auto& s : split(v, ','))
    if (!strip(s).empty()) out.push_back(strip(s));
  return out;
}

[[noreturn]] inline void bad_value(const std::string& key, const std::string& constraint) {
  raise(ErrorKind::kValidation, key + ": " + constraint);
}

}  // namespace config_detail

inline void validate_config(const ExperimentConfig& c) {
  using config_detail::bad_value;
  if (c.corpus_n_keywords < 2) bad_value("corpus.n_keywords", "must be at least 2");
  if (c.corpus_train_per_class < 1) bad_value("corpus.train_per_class", "must be positive");
  if (c.corpus_test_per_class < 1) bad_value("corpus.test_per_class", "must be positive");
  if (c.corpus_duration_s <= 0) bad_value("corpus.duration_s", "must be positive");
  if (c.corpus_sample_rate <= 0) bad_value("corpus.sample_rate", "must be positive");
  if (c.mixing_clean_fraction < 0.0 || c.mixing_clean_fraction > 1.0)
    bad_value("mixing.clean_fraction", "must lie in [0, 1]");
  if (c.mixing_pretrain_count < 1) bad_value("mixing.pretrain_count", "must be positive");
  if (c.mixing_eval_count < 1) bad_value("mixing.eval_count", "must be positive");
  if (c.features_window <= 0 || c.features_hop <= 0)
    bad_value("features.window", "window and hop must be positive");
  if (c.features_n_mels < 1) bad_value("features.n_mels", "must be positive");
  if (c.tokenizer_codebook_size < 2) bad_value("tokenizer.codebook_size", "must be at least 2");
  if (c.tokenizer_kmeans_iters < 1) bad_value("tokenizer.kmeans_iters", "must be positive");
  if (c.backbone_model_dim < 1 || c.backbone_heads < 1 ||
      c.backbone_model_dim % c.backbone_heads != 0)
    bad_value("backbone.model_dim", "must be a positive multiple of backbone.heads");
  if (c.backbone_layers < 0) bad_value("backbone.layers", "must be non-negative");
  if (c.backbone_ffn_dim < 1) bad_value("backbone.ffn_dim", "must be positive");
  if (c.backbone_dropout < 0.0 || c.backbone_dropout >= 1.0)
    bad_value("backbone.dropout", "must lie in [0, 1)");
  if (c.backbone_temperature <= 0.0) bad_value("backbone.temperature", "must be positive");
  if (c.pretrain_modes.empty()) bad_value("pretrain.modes", "must name at least one mode");
  for (const auto& m : c.pretrain_modes) parse_pretrain_mode(m);
  if (c.pretrain_steps < 0) bad_value("pretrain.steps", "must be non-negative");
  if (c.pretrain_learning_rate <= 0) bad_value("pretrain.learning_rate", "must be positive");
  if (c.pretrain_warmup_steps < 1) bad_value("pretrain.warmup_steps", "must be positive");
  if (c.pretrain_batch_size < 1) bad_value("pretrain.batch_size", "must be positive");
  if (c.adapt_strategies.empty()) bad_value("adapt.strategies", "must name at least one strategy");
  for (const auto& s : c.adapt_strategies) parse_adapt_strategy(s);
  if (c.adapt_shots < 1) bad_value("adapt.shots", "must be positive");
  if (c.adapt_repeats < 1) bad_value("adapt.repeats", "must be positive");
  if (c.adapt_epochs < 10)
    bad_value("adapt.epochs", "must be at least 10 (checkpoint averaging window)");
  if (c.adapt_learning_rate <= 0) bad_value("adapt.learning_rate", "must be positive");
  if (c.adapt_mixup_alpha <= 0) bad_value("adapt.mixup_alpha", "must be positive");
  if (c.adapt_hidden_dim < 1) bad_value("adapt.hidden_dim", "must be positive");
  if (c.adapt_batch_size < 1) bad_value("adapt.batch_size", "must be positive");
  if (c.eval_conditions.empty()) bad_value("eval.conditions", "must name at least one condition");
  for (const auto& cond : c.eval_conditions)
    if (cond != "clean" && cond != "2mix" && cond != "3mix")
      bad_value("eval.conditions", "entries must be clean, 2mix or 3mix");
}

// Canonical echo: every effective key, fixed order.
inline std::string format_config(const ExperimentConfig& c) {
  using config_detail::join_list;
  std::string s;
  auto kv = [&s](const std::string& k, const std::string& v) { s += k + "=" + v + "\n"; };
  kv("seed", std::to_string(c.seed));
  kv("corpus.n_keywords", std::to_string(c.corpus_n_keywords));
  kv("corpus.train_per_class", std::to_string(c.corpus_train_per_class));
  kv("corpus.test_per_class", std::to_string(c.corpus_test_per_class));
  kv("corpus.duration_s", format_double_exact(c.corpus_duration_s));
  kv("corpus.sample_rate", std::to_string(c.corpus_sample_rate));
  kv("mixing.pretrain_count", std::to_string(c.mixing_pretrain_count));
  kv("mixing.clean_fraction", format_double_exact(c.mixing_clean_fraction));
  kv("mixing.eval_count", std::to_string(c.mixing_eval_count));
  kv("features.window", std::to_string(c.features_window));
  kv("features.hop", std::to_string(c.features_hop));
  kv("features.n_mels", std::to_string(c.features_n_mels));
  kv("tokenizer.codebook_size", std::to_string(c.tokenizer_codebook_size));
  kv("tokenizer.kmeans_iters", std::to_string(c.tokenizer_kmeans_iters));
  kv("backbone.model_dim", std::to_string(c.backbone_model_dim));
  kv("backbone.layers", std::to_string(c.backbone_layers));
  kv("backbone.heads", std::to_string(c.backbone_heads));
  kv("backbone.ffn_dim", std::to_string(c.backbone_ffn_dim));
  kv("backbone.dropout", format_double_exact(c.backbone_dropout));
  kv("backbone.temperature", format_double_exact(c.backbone_temperature));
  kv("pretrain.modes", join_list(c.pretrain_modes));
  kv("pretrain.steps", std::to_string(c.pretrain_steps));
  kv("pretrain.learning_rate", format_double_exact(c.pretrain_learning_rate));
  kv("pretrain.warmup_steps", std::to_string(c.pretrain_warmup_steps));
  kv("pretrain.batch_size", std::to_string(c.pretrain_batch_size));
  kv("pretrain.checkpoint_every", std::to_string(c.pretrain_checkpoint_every));
  kv("adapt.strategies", join_list(c.adapt_strategies));
  kv("adapt.shots", std::to_string(c.adapt_shots));
  kv("adapt.repeats", std::to_string(c.adapt_repeats));
  kv("adapt.epochs", std::to_string(c.adapt_epochs));
  kv("adapt.learning_rate", format_double_exact(c.adapt_learning_rate));
  kv("adapt.mixup_alpha", format_double_exact(c.adapt_mixup_alpha));
  kv("adapt.hidden_dim", std::to_string(c.adapt_hidden_dim));
  kv("adapt.batch_size", std::to_string(c.adapt_batch_size));
  kv("eval.conditions", join_list(c.eval_conditions));
  return s;
}

inline ExperimentConfig parse_config_text(const std::string& text) {
  using config_detail::parse_list;
  ExperimentConfig c;
  size_t lineno = 0;
  for (const auto& raw : split(text, '\n')) {
    ++lineno;
    std::string line = strip(raw);
    if (line.empty() || line[0] == '#') continue;
    auto pos = line.find('=');
    if (pos == std::string::npos)
      raise(ErrorKind::kValidation,
            "config line " + std::to_string(lineno) + ": expected key=value");
    std::string key = strip(line.substr(0, pos));
    std::string val = strip(line.substr(pos + 1));
    try {
      if (key == "seed") c.seed = std::stoull(val);
      else if (key == "corpus.n_keywords") c.corpus_n_keywords = std::stoi(val);
      else if (key == "corpus.train_per_class") c.corpus_train_per_class = std::stoi(val);
      else if (key == "corpus.test_per_class") c.corpus_test_per_class = std::stoi(val);
      else if (key == "corpus.duration_s") c.corpus_duration_s = std::stod(val);
      else if (key == "corpus.sample_rate") c.corpus_sample_rate = std::stoi(val);
      else if (key == "mixing.pretrain_count") c.mixing_pretrain_count = std::stoull(val);
      else if (key == "mixing.clean_fraction") c.mixing_clean_fraction = std::stod(val);
      else if (key == "mixing.eval_count") c.mixing_eval_count = std::stoull(val);
      else if (key == "features.window") c.features_window = std::stoi(val);
      else if (key == "features.hop") c.features_hop = std::stoi(val);
      else if (key == "features.n_mels") c.features_n_mels = std::stoi(val);
      else if (key == "tokenizer.codebook_size") c.tokenizer_codebook_size = std::stoi(val);
      else if (key == "tokenizer.kmeans_iters") c.tokenizer_kmeans_iters = std::stoi(val);
      else if (key == "backbone.model_dim") c.backbone_model_dim = std::stoi(val);
      else if (key == "backbone.layers") c.backbone_layers = std::stoi(val);
      else if (key == "backbone.heads") c.backbone_heads = std::stoi(val);
      else if (key == "backbone.ffn_dim") c.backbone_ffn_dim = std::stoi(val);
      else if (key == "backbone.dropout") c.backbone_dropout = std::stod(val);
      else if (key == "backbone.temperature") c.backbone_temperature = std::stod(val);
      else if (key == "pretrain.modes") c.pretrain_modes = parse_list(val);
      else if (key == "pretrain.steps") c.pretrain_steps = std::stoi(val);
      else if (key == "pretrain.learning_rate") c.pretrain_learning_rate = std::stod(val);
      else if (key == "pretrain.warmup_steps") c.pretrain_warmup_steps = std::stoi(val);
      else if (key == "pretrain.batch_size") c.pretrain_batch_size = std::stoi(val);
      else if (key == "pretrain.checkpoint_every") c.pretrain_checkpoint_every = std::stoi(val);
      else if (key == "adapt.strategies") c.adapt_strategies = parse_list(val);
      else if (key == "adapt.shots") c.adapt_shots = std::stoi(val);
      else if (key == "adapt.repeats") c.adapt_repeats = std::stoi(val);
      else if (key == "adapt.epochs") c.adapt_epochs = std::stoi(val);
      else if (key == "adapt.learning_rate") c.adapt_learning_rate = std::stod(val);
      else if (key == "adapt.mixup_alpha") c.adapt_mixup_alpha = std::stod(val);
      else if (key == "adapt.hidden_dim") c.adapt_hidden_dim = std::stoi(val);
      else if (key == "adapt.batch_size") c.adapt_batch_size = std::stoi(val);
      else if (key == "eval.conditions") c.eval_conditions = parse_list(val);
      else raise(ErrorKind::kValidation, key + ": unknown configuration key");
    } catch (const Error&) {
      throw;
    } catch (const std::exception&) {
      raise(ErrorKind::kValidation, key + ": cannot parse value '" + val + "'");
    }
  }
  validate_config(c);
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  return parse_config_text(read_text_file(path));
}

inline uint64_t config_hash(const ExperimentConfig& c) { return fnv1a64(format_config(c)); }

}  // namespace mtkws

#endif  // MTKWS_CONFIG_HPP
