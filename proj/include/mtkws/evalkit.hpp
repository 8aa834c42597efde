// mtkws/evalkit.hpp

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

#ifndef MTKWS_EVALKIT_HPP
#define MTKWS_EVALKIT_HPP

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "mtkws/common.hpp"

namespace mtkws {

struct Trial {
  std::string utterance_id;
  int keyword = -1;
  double score = 0.0;
  bool present = false;
};

// Pooled presence-detection EER. Thresholds sweep the sorted score set;
// FRR(th) = fraction of present trials with score < th, FAR(th) = fraction of
// absent trials with score >= th. Returns (FAR + FRR) / 2 at the threshold
// minimizing |FAR - FRR|, ties resolved toward the lower threshold.
inline double compute_eer(const std::vector<Trial>& trials) {
  std::vector<double> present, absent;
  for (const auto& t : trials) {
    MTKWS_REQUIRE(std::isfinite(t.score), ErrorKind::kPrecondition, "non-finite trial score");
    (t.present ? present : absent).push_back(t.score);
  }
  MTKWS_REQUIRE(!present.empty() && !absent.empty(), ErrorKind::kUndefinedMetric,
                "EER needs at least one present and one absent trial");
  std::sort(present.begin(), present.end());
  std::sort(absent.begin(), absent.end());
  std::vector<double> thresholds;
  thresholds.reserve(trials.size());
  for (const auto& t : trials) thresholds.push_back(t.score);
  std::sort(thresholds.begin(), thresholds.end());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

  const double p_n = static_cast<double>(present.size());
  const double a_n = static_cast<double>(absent.size());
  double best_gap = std::numeric_limits<double>::infinity();
  double best_eer = 0.0;
  for (double th : thresholds) {
    auto below_p = static_cast<double>(
        std::lower_bound(present.begin(), present.end(), th) - present.begin());
    auto below_a = static_cast<double>(
        std::lower_bound(absent.begin(), absent.end(), th) - absent.begin());
    double frr = below_p / p_n;
    double far = (a_n - below_a) / a_n;
    double gap = std::abs(far - frr);
    if (gap < best_gap) {  // strict: the lowest threshold wins ties
      best_gap = gap;
      best_eer = 0.5 * (far + frr);
    }
  }
  return best_eer;
}

struct ScoredUtterance {
  Eigen::VectorXd scores;   // K presence scores
  std::vector<int> truth;   // true keyword set
};

// Indices of the k highest scores, ties resolved toward the lower index.
inline std::vector<int> top_k_indices(const Eigen::VectorXd& scores, int k) {
  std::vector<int> idx(static_cast<size_t>(scores.size()));
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](int a, int b) {
    if (scores(a) != scores(b)) return scores(a) > scores(b);
    return a < b;
  });
  idx.resize(static_cast<size_t>(k));
  return idx;
}

// An utterance is correct iff the top-k set equals the true keyword set.
// Every utterance in the batch must have exactly k true keywords.
inline double top_k_accuracy(const std::vector<ScoredUtterance>& batch, int k) {
  MTKWS_REQUIRE(!batch.empty(), ErrorKind::kPrecondition, "empty evaluation batch");
  size_t correct = 0;
  for (const auto& u : batch) {
    MTKWS_REQUIRE(static_cast<int>(u.truth.size()) == k, ErrorKind::kPrecondition,
                  "utterance keyword-set size does not match k");
    MTKWS_REQUIRE(k <= u.scores.size(), ErrorKind::kPrecondition, "k exceeds score dimension");
    auto top = top_k_indices(u.scores, k);
    std::set<int> top_set(top.begin(), top.end());
    std::set<int> truth_set(u.truth.begin(), u.truth.end());
    if (top_set == truth_set) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(batch.size());
}

// Optional breakdown: EER restricted to each keyword's trials.
inline std::map<int, double> per_keyword_eer(const std::vector<Trial>& trials) {
  std::map<int, std::vector<Trial>> by_keyword;
  for (const auto& t : trials) by_keyword[t.keyword].push_back(t);
  std::map<int, double> out;
  for (const auto& [kw, group] : by_keyword) out[kw] = compute_eer(group);
  return out;
}

// Secondary diagnostic: fraction of true keywords recovered in the top k,
// averaged over utterances (partial credit, unlike top_k_accuracy).
inline double top_k_partial_recall(const std::vector<ScoredUtterance>& batch, int k);

struct Aggregate {
  double mean = 0.0;
  double dispersion = 0.0;  // sample standard deviation
  bool low_repeat_warning = false;
};

inline Aggregate aggregate_runs(const std::vector<double>& values) {
  MTKWS_REQUIRE(!values.empty(), ErrorKind::kPrecondition, "nothing to aggregate");
  Aggregate out;
  for (double v : values) out.mean += v;
  out.mean /= static_cast<double>(values.size());
  if (values.size() < 2) {
    out.dispersion = 0.0;
    out.low_repeat_warning = true;
    return out;
  }
  double acc = 0.0;
  for (double v : values) acc += (v - out.mean) * (v - out.mean);
  out.dispersion = std::sqrt(acc / static_cast<double>(values.size() - 1));
  return out;
}

inline double top_k_partial_recall(const std::vector<ScoredUtterance>& batch, int k) {
  MTKWS_REQUIRE(!batch.empty(), ErrorKind::kPrecondition, "empty evaluation batch");
  double total = 0.0;
  for (const auto& u : batch) {
    MTKWS_REQUIRE(static_cast<int>(u.truth.size()) == k, ErrorKind::kPrecondition,
                  "utterance keyword-set size does not match k");
    auto top = top_k_indices(u.scores, k);
    std::set<int> top_set(top.begin(), top.end());
    size_t hits = 0;
    for (int kw : u.truth) hits += top_set.count(kw);
    total += static_cast<double>(hits) / static_cast<double>(k);
  }
  return total / static_cast<double>(batch.size());
}

struct EvalReport {
  std::string condition;  // clean | 2mix | 3mix
  std::string pretrain;   // pre-training mode label
  std::string strategy;   // adaptation strategy label
  int shots = 0;
  std::vector<std::pair<double, double>> per_repeat;  // (ACC, EER) fractions

  Aggregate acc() const {
    std::vector<double> v;
    for (auto& p : per_repeat) v.push_back(p.first);
    return aggregate_runs(v);
  }
  Aggregate eer() const {
    std::vector<double> v;
    for (auto& p : per_repeat) v.push_back(p.second);
    return aggregate_runs(v);
  }
};

namespace report_detail {

inline int condition_rank(const std::string& c) {
  if (c == "clean") return 0;
  if (c == "2mix") return 1;
  if (c == "3mix") return 2;
  return 3;
}

inline int pretrain_rank(const std::string& p) {
  if (p == "clean_nll") return 0;
  if (p == "mt_bce") return 1;
  if (p == "mpc_nll") return 2;
  return 3;
}

inline int strategy_rank(const std::string& s) {
  if (s == "clean") return 0;
  if (s == "mixup") return 1;
  if (s == "mt") return 2;
  return 3;
}

inline std::vector<const EvalReport*> sorted_view(const std::vector<EvalReport>& reports) {
  std::vector<const EvalReport*> view;
  for (const auto& r : reports) view.push_back(&r);
  std::sort(view.begin(), view.end(), [](const EvalReport* a, const EvalReport* b) {
    auto key = [](const EvalReport* r) {
      return std::make_tuple(condition_rank(r->condition), r->condition,
                             pretrain_rank(r->pretrain), r->pretrain,
                             strategy_rank(r->strategy), r->strategy, -r->shots);
    };
    return key(a) < key(b);
  });
  return view;
}

inline std::string pct(double v) { return format_double(100.0 * v, 2); }

}  // namespace report_detail

// TSV rows: condition, pretrain, strategy, shots, acc_mean, acc_disp,
// eer_mean, eer_disp -- all metric columns as percentages with 2 decimals.
inline std::string emit_report_tsv(const std::vector<EvalReport>& reports) {
  MTKWS_REQUIRE(!reports.empty(), ErrorKind::kPrecondition, "no reports to emit");
  using report_detail::pct;
  std::string out = "#dispersion:sample-stddev\n";
  out += "#condition\tpretrain\tstrategy\tshots\tacc_mean\tacc_disp\teer_mean\teer_disp\n";
  for (const auto* r : report_detail::sorted_view(reports)) {
    auto acc = r->acc();
    auto eer = r->eer();
    out += r->condition + '\t' + r->pretrain + '\t' + r->strategy + '\t' +
           std::to_string(r->shots) + '\t' + pct(acc.mean) + '\t' + pct(acc.dispersion) + '\t' +
           pct(eer.mean) + '\t' + pct(eer.dispersion) + '\n';
  }
  return out;
}

// Blocked text table mirroring the TSV numbers.
inline std::string emit_report_table(const std::vector<EvalReport>& reports) {
  MTKWS_REQUIRE(!reports.empty(), ErrorKind::kPrecondition, "no reports to emit");
  using report_detail::pct;
  auto view = report_detail::sorted_view(reports);
  std::string out;
  std::string current;
  char line[160];
  for (const auto* r : view) {
    if (r->condition != current) {
      current = r->condition;
      out += "== " + current + " test (ACC% / EER%, mean +- sample-stddev) ==\n";
      std::snprintf(line, sizeof(line), "%-10s %-8s %5s  %18s  %18s\n", "pretrain", "strategy",
                    "shots", "ACC", "EER");
      out += line;
    }
    auto acc = r->acc();
    auto eer = r->eer();
    std::snprintf(line, sizeof(line), "%-10s %-8s %5d  %8s +- %7s  %8s +- %7s\n",
                  r->pretrain.c_str(), r->strategy.c_str(), r->shots, pct(acc.mean).c_str(),
                  pct(acc.dispersion).c_str(), pct(eer.mean).c_str(),
                  pct(eer.dispersion).c_str());
    out += line;
  }
  return out;
}

}  // namespace mtkws

#endif  // MTKWS_EVALKIT_HPP
