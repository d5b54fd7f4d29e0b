#pragma once

// Verification-side pipeline: long-utterance segment averaging, cosine trial
// scoring, adaptive score normalization against a cohort, and the detection
// metrics (interpolated EER, normalized minDCF). All metric math runs in
// double precision.

#include <algorithm>
#include <cmath>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "pcfnat/common.hpp"
#include "pcfnat/tensor.hpp"

namespace pcfnat {

struct Trial {
  int label = 0;  // 1 = target, 0 = nontarget
  std::string enroll;
  std::string test;
  double raw = 0.0;
  double normalized = 0.0;
};
using TrialScoreSet = std::vector<Trial>;

inline std::vector<double> l2_normalized(const std::vector<double>& v) {
  double n2 = 0;
  for (double x : v) n2 += x * x;
  if (n2 <= 0.0) throw contract_error("l2_normalized: zero-norm embedding");
  const double inv = 1.0 / std::sqrt(n2);
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] * inv;
  return out;
}

// Cosine similarity (inner product of length-normalized embeddings).
inline double raw_score(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size())
    throw dim_error(strcat_msg("raw_score: dimension mismatch ", a.size(), " vs ", b.size()));
  const auto an = l2_normalized(a);
  const auto bn = l2_normalized(b);
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += an[i] * bn[i];
  return s;
}

// ---------------------------------------------------------------------------
// Segment averaging
// ---------------------------------------------------------------------------

// Deterministic segmentation rule: utterances up to 8 s embed whole; longer
// ones split into n = ceil(D/6) equal chunks, n reduced until chunks are at
// least 4 s.
inline std::vector<std::pair<index_t, index_t>> segment_plan(double duration_s, index_t frames) {
  if (frames <= 0 || duration_s <= 0.0)
    throw contract_error("segment_plan: empty utterance");
  if (duration_s <= 8.0) return {{0, frames}};
  long n = static_cast<long>(std::ceil(duration_s / 6.0));
  while (n > 1 && duration_s / static_cast<double>(n) < 4.0) --n;
  std::vector<std::pair<index_t, index_t>> plan;
  const index_t base = frames / n;
  const index_t extra = frames % n;
  index_t start = 0;
  for (long i = 0; i < n; ++i) {
    const index_t len = base + (i < extra ? 1 : 0);
    plan.emplace_back(start, len);
    start += len;
  }
  return plan;
}

// Splits a [F,T] feature matrix per the plan, embeds each segment, averages
// the length-normalized segment embeddings.
inline std::vector<double> segment_and_average(
    const Tensor<float>& feats, double duration_s,
    const std::function<std::vector<double>(const Tensor<float>&)>& extractor) {
  if (feats.ndim() != 2) throw dim_error("segment_and_average: features must be [F,T]");
  const auto plan = segment_plan(duration_s, feats.dim(1));
  std::vector<double> acc;
  for (const auto& [start, len] : plan) {
    auto seg = slice(feats, 1, start, len);
    auto e = l2_normalized(extractor(seg));
    if (acc.empty()) acc.assign(e.size(), 0.0);
    for (std::size_t i = 0; i < e.size(); ++i) acc[i] += e[i];
  }
  for (double& v : acc) v /= static_cast<double>(plan.size());
  return acc;
}

// ---------------------------------------------------------------------------
// Adaptive S-norm
// ---------------------------------------------------------------------------

// Speaker-wise averaged, length-normalized cohort embeddings.
struct Cohort {
  std::vector<std::vector<double>> rows;
  int top_n = 300;

  void validate() const {
    for (const auto& r : rows) {
      double n2 = 0;
      for (double v : r) n2 += v * v;
      if (std::abs(std::sqrt(n2) - 1.0) > 1e-6)
        throw contract_error("cohort rows must be length-normalized");
    }
  }
  static Cohort from_embeddings(const std::vector<std::vector<double>>& rows, int top_n) {
    Cohort c;
    c.top_n = top_n;
    for (const auto& r : rows) c.rows.push_back(l2_normalized(r));
    return c;
  }
};

namespace scoring_detail {

struct CohortStats {
  double mean = 0.0;
  double std = 0.0;
};

// Mean/std (population) of the top-N cohort scores of one embedding.
// Ties break deterministically by cohort index.
inline CohortStats topn_stats(const std::vector<double>& emb_unit, const Cohort& cohort,
                              int top_n, int* sigma_floor_warnings) {
  std::vector<std::pair<double, std::size_t>> scored;
  scored.reserve(cohort.rows.size());
  for (std::size_t i = 0; i < cohort.rows.size(); ++i) {
    double s = 0;
    for (std::size_t j = 0; j < emb_unit.size(); ++j) s += emb_unit[j] * cohort.rows[i][j];
    scored.emplace_back(s, i);
  }
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(top_n), scored.size());
  double mean = 0;
  for (std::size_t i = 0; i < n; ++i) mean += scored[i].first;
  mean /= static_cast<double>(n);
  double var = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = scored[i].first - mean;
    var += d * d;
  }
  var /= static_cast<double>(n);
  double sd = std::sqrt(var);
  if (sd < 1e-8) {
    sd = 1e-8;
    if (sigma_floor_warnings) ++(*sigma_floor_warnings);
    std::cerr << "adaptive_snorm: cohort score deviation below 1e-8, flooring\n";
  }
  return {mean, sd};
}

}  // namespace scoring_detail

// Fills the `normalized` field of each trial:
//   s' = 0.5 * ((s - mu_e)/sigma_e + (s - mu_t)/sigma_t)
// with mu/sigma from each side's top-N cohort scores.
inline void adaptive_snorm(TrialScoreSet& trials,
                           const std::map<std::string, std::vector<double>>& embeddings,
                           const Cohort& cohort, int top_n,
                           int* sigma_floor_warnings = nullptr) {
  if (top_n <= 0 || static_cast<std::size_t>(top_n) > cohort.rows.size())
    throw contract_error(strcat_msg("adaptive_snorm: top_n ", top_n, " exceeds cohort size ",
                                    cohort.rows.size()));
  std::map<std::string, scoring_detail::CohortStats> cache;
  auto stats_of = [&](const std::string& id) -> const scoring_detail::CohortStats& {
    auto it = cache.find(id);
    if (it != cache.end()) return it->second;
    auto eit = embeddings.find(id);
    if (eit == embeddings.end())
      throw contract_error("adaptive_snorm: missing embedding for id '" + id + "'");
    auto stats = scoring_detail::topn_stats(l2_normalized(eit->second), cohort, top_n,
                                            sigma_floor_warnings);
    return cache.emplace(id, stats).first->second;
  };
  for (auto& trial : trials) {
    const auto& se = stats_of(trial.enroll);
    const auto& st = stats_of(trial.test);
    trial.normalized = 0.5 * ((trial.raw - se.mean) / se.std + (trial.raw - st.mean) / st.std);
  }
}

// ---------------------------------------------------------------------------
// Detection metrics
// ---------------------------------------------------------------------------

namespace scoring_detail {

struct OperatingPoint {
  long miss = 0;  // targets below threshold
  long fa = 0;    // nontargets at/above threshold
};

// Operating points of the accept-if-score>=threshold rule at every
// threshold position: below all scores, between distinct scores, above all.
inline void sweep_points(const std::vector<double>& scores, const std::vector<int>& labels,
                         std::vector<OperatingPoint>& pts, long& n_target, long& n_nontarget) {
  n_target = 0;
  n_nontarget = 0;
  for (int l : labels) (l ? n_target : n_nontarget)++;
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  pts.clear();
  OperatingPoint cur{0, n_nontarget};  // accept everything
  pts.push_back(cur);
  std::size_t i = 0;
  while (i < order.size()) {
    const double v = scores[order[i]];
    while (i < order.size() && scores[order[i]] == v) {
      if (labels[order[i]])
        ++cur.miss;
      else
        --cur.fa;
      ++i;
    }
    pts.push_back(cur);
  }
}

}  // namespace scoring_detail

// Interpolated equal error rate. Requires at least one trial of each class.
inline double compute_eer(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size() || scores.empty())
    throw contract_error("compute_eer: score/label size mismatch");
  std::vector<scoring_detail::OperatingPoint> pts;
  long nt = 0, nn = 0;
  scoring_detail::sweep_points(scores, labels, pts, nt, nn);
  if (nt == 0 || nn == 0)
    throw contract_error("compute_eer: need at least one target and one nontarget trial");
  double prev_miss = 0, prev_fa = 1;
  for (const auto& p : pts) {
    const double miss = static_cast<double>(p.miss) / static_cast<double>(nt);
    const double fa = static_cast<double>(p.fa) / static_cast<double>(nn);
    if (miss >= fa) {
      const double d_prev = prev_fa - prev_miss;  // >= 0
      const double d_cur = fa - miss;             // <= 0
      const double span = d_prev - d_cur;
      if (span <= 0.0) return miss;  // exact touch
      const double t = d_prev / span;
      return prev_miss + t * (miss - prev_miss);
    }
    prev_miss = miss;
    prev_fa = fa;
  }
  return 1.0;  // unreachable for valid inputs
}

// Normalized minimum detection cost:
//   DCF(t) = c_miss*p_target*Pmiss(t) + c_fa*(1-p_target)*Pfa(t),
// minimized over thresholds, divided by min(c_miss*p_target, c_fa*(1-p_target)).
inline double compute_min_dcf(const std::vector<double>& scores, const std::vector<int>& labels,
                              double p_target, double c_miss = 1.0, double c_fa = 1.0) {
  if (p_target <= 0.0 || p_target >= 1.0)
    throw contract_error(strcat_msg("compute_min_dcf: p_target ", p_target, " outside (0,1)"));
  if (scores.size() != labels.size() || scores.empty())
    throw contract_error("compute_min_dcf: score/label size mismatch");
  std::vector<scoring_detail::OperatingPoint> pts;
  long nt = 0, nn = 0;
  scoring_detail::sweep_points(scores, labels, pts, nt, nn);
  if (nt == 0 || nn == 0)
    throw contract_error("compute_min_dcf: need at least one target and one nontarget trial");
  double best = std::numeric_limits<double>::infinity();
  for (const auto& p : pts) {
    const double miss = static_cast<double>(p.miss) / static_cast<double>(nt);
    const double fa = static_cast<double>(p.fa) / static_cast<double>(nn);
    best = std::min(best, c_miss * p_target * miss + c_fa * (1.0 - p_target) * fa);
  }
  return best / std::min(c_miss * p_target, c_fa * (1.0 - p_target));
}

inline std::vector<double> trial_scores(const TrialScoreSet& trials, bool use_normalized) {
  std::vector<double> s;
  s.reserve(trials.size());
  for (const auto& t : trials) s.push_back(use_normalized ? t.normalized : t.raw);
  return s;
}

inline std::vector<int> trial_labels(const TrialScoreSet& trials) {
  std::vector<int> l;
  l.reserve(trials.size());
  for (const auto& t : trials) l.push_back(t.label);
  return l;
}

inline double compute_eer(const TrialScoreSet& trials, bool use_normalized = false) {
  return compute_eer(trial_scores(trials, use_normalized), trial_labels(trials));
}

inline double compute_min_dcf(const TrialScoreSet& trials, double p_target, double c_miss = 1.0,
                              double c_fa = 1.0, bool use_normalized = false) {
  return compute_min_dcf(trial_scores(trials, use_normalized), trial_labels(trials), p_target,
                         c_miss, c_fa);
}

}  // namespace pcfnat
