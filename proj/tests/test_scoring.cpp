#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <vector>

#include "pcfnat/scoring.hpp"
#include "testutil.hpp"

using namespace pcfnat;

namespace {

// Exhaustive-threshold oracle: recounts miss/fa from scratch at every
// candidate threshold (midpoints between scores plus both extremes).
struct SweepOracle {
  std::vector<double> thresholds;
  SweepOracle(const std::vector<double>& scores) {
    std::vector<double> s = scores;
    std::sort(s.begin(), s.end());
    s.erase(std::unique(s.begin(), s.end()), s.end());
    thresholds.push_back(s.front() - 1.0);
    for (std::size_t i = 0; i + 1 < s.size(); ++i)
      thresholds.push_back(0.5 * (s[i] + s[i + 1]));
    thresholds.push_back(s.back() + 1.0);
  }
  static std::pair<long, long> counts_at(const std::vector<double>& scores,
                                         const std::vector<int>& labels, double thr) {
    long miss = 0, fa = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (labels[i] && scores[i] < thr) ++miss;
      if (!labels[i] && scores[i] >= thr) ++fa;
    }
    return {miss, fa};
  }
};

double oracle_min_dcf(const std::vector<double>& scores, const std::vector<int>& labels,
                      double p_target, double c_miss = 1.0, double c_fa = 1.0) {
  long nt = 0, nn = 0;
  for (int l : labels) (l ? nt : nn)++;
  SweepOracle sweep(scores);
  double best = 1e300;
  for (double thr : sweep.thresholds) {
    auto [miss, fa] = SweepOracle::counts_at(scores, labels, thr);
    const double m = static_cast<double>(miss) / static_cast<double>(nt);
    const double f = static_cast<double>(fa) / static_cast<double>(nn);
    best = std::min(best, c_miss * p_target * m + c_fa * (1.0 - p_target) * f);
  }
  return best / std::min(c_miss * p_target, c_fa * (1.0 - p_target));
}

// Independent EER oracle: dense threshold sweep + linear interpolation of
// the crossing segment.
double oracle_eer(const std::vector<double>& scores, const std::vector<int>& labels) {
  long nt = 0, nn = 0;
  for (int l : labels) (l ? nt : nn)++;
  SweepOracle sweep(scores);
  double pm = 0, pf = 1;
  for (double thr : sweep.thresholds) {
    auto [miss, fa] = SweepOracle::counts_at(scores, labels, thr);
    const double m = static_cast<double>(miss) / static_cast<double>(nt);
    const double f = static_cast<double>(fa) / static_cast<double>(nn);
    if (m >= f) {
      const double num = pf - pm;
      const double den = (pf - pm) - (f - m);
      if (den <= 0) return m;
      const double t = num / den;
      return pm + t * (m - pm);
    }
    pm = m;
    pf = f;
  }
  return 1.0;
}

}  // namespace

TEST_CASE("raw score: cosine identities") {
  std::vector<double> e = {1.0, 2.0, -0.5, 3.0};
  CHECK_THAT(raw_score(e, e), Catch::Matchers::WithinAbs(1.0, 1e-12));
  std::vector<double> ne = {-1.0, -2.0, 0.5, -3.0};
  CHECK_THAT(raw_score(e, ne), Catch::Matchers::WithinAbs(-1.0, 1e-12));

  Rng rng(1);
  for (int i = 0; i < 5; ++i) {
    std::vector<double> a(8), b(8);
    for (auto& v : a) v = rng.normal();
    for (auto& v : b) v = rng.normal();
    CHECK(raw_score(a, b) == raw_score(b, a));  // symmetry, exact
    // scale invariance (cosine)
    std::vector<double> a3(8);
    for (std::size_t j = 0; j < 8; ++j) a3[j] = 3.7 * a[j];
    CHECK_THAT(raw_score(a3, b), Catch::Matchers::WithinAbs(raw_score(a, b), 1e-6));
  }
  CHECK_THROWS_AS(raw_score(std::vector<double>(4, 0.0), e), contract_error);
}

TEST_CASE("segment plan: whole below 8s, 4-6s chunks above") {
  CHECK(segment_plan(6.0, 600).size() == 1);
  CHECK(segment_plan(8.0, 800).size() == 1);
  auto p12 = segment_plan(12.0, 1200);
  CHECK(p12.size() == 2);  // ceil(12/6) = 2 -> 6 s each
  CHECK(p12[0].second + p12[1].second == 1200);
  for (auto& [s, l] : p12) CHECK(l == 600);
  auto p13 = segment_plan(13.0, 1300);
  CHECK(p13.size() == 3);  // 4.33 s each
  auto p9 = segment_plan(9.0, 900);
  CHECK(p9.size() == 2);  // 4.5 s each
  // every plan keeps segments in [4,6]s for D > 8
  for (double d = 8.1; d < 60.0; d += 0.7) {
    auto plan = segment_plan(d, static_cast<index_t>(d * 100));
    for (auto& [s, l] : plan) {
      const double secs = d * static_cast<double>(l) / (d * 100.0);
      CHECK(secs >= 3.99);
      CHECK(secs <= 6.01);
    }
  }
  CHECK_THROWS_AS(segment_plan(0.0, 0), contract_error);
}

TEST_CASE("segment averaging equals direct recomputation") {
  Rng rng(2);
  auto feats = Tensor<float>::randn({6, 1200}, rng);
  // stand-in extractor: column means over a few hand-picked rows
  auto extractor = [](const Tensor<float>& seg) {
    std::vector<double> e(6, 0.0);
    for (index_t c = 0; c < 6; ++c) {
      double acc = 0;
      for (index_t t = 0; t < seg.dim(1); ++t) acc += seg.at({c, t});
      e[static_cast<std::size_t>(c)] = acc / static_cast<double>(seg.dim(1)) + 0.1;
    }
    return e;
  };
  auto got = segment_and_average(feats, 12.0, extractor);

  // oracle: manual two-segment recompute
  auto s1 = slice(feats, 1, 0, 600);
  auto s2 = slice(feats, 1, 600, 600);
  auto e1 = l2_normalized(extractor(s1));
  auto e2 = l2_normalized(extractor(s2));
  for (std::size_t i = 0; i < 6; ++i)
    CHECK_THAT(got[i], Catch::Matchers::WithinAbs(0.5 * (e1[i] + e2[i]), 1e-12));

  // single-segment case: embedding equals the (normalized) extractor output
  auto single = segment_and_average(feats, 6.0, extractor);
  auto whole = l2_normalized(extractor(feats));
  for (std::size_t i = 0; i < 6; ++i)
    CHECK_THAT(single[i], Catch::Matchers::WithinAbs(whole[i], 1e-12));
}

TEST_CASE("adaptive s-norm: hand-computed two-row cohort") {
  // cohort scores for both sides are {0,1} (unit rows aligned/orthogonal)
  Cohort cohort;
  cohort.rows = {{1.0, 0.0}, {0.0, 1.0}};
  std::map<std::string, std::vector<double>> embs = {{"e", {1.0, 0.0}}, {"t", {1.0, 0.0}}};
  TrialScoreSet trials = {{1, "e", "t", 1.0, 0.0}};
  adaptive_snorm(trials, embs, cohort, 2);
  // mu = 0.5, sigma = 0.5 (population), each side term = (1-0.5)/0.5 = 1
  CHECK_THAT(trials[0].normalized, Catch::Matchers::WithinAbs(1.0, 1e-12));
}

TEST_CASE("adaptive s-norm: symmetric under swapping enroll/test") {
  Rng rng(3);
  Cohort cohort;
  for (int i = 0; i < 10; ++i) {
    std::vector<double> r(4);
    for (auto& v : r) v = rng.normal();
    cohort.rows.push_back(l2_normalized(r));
  }
  std::vector<double> a(4), b(4);
  for (auto& v : a) v = rng.normal();
  for (auto& v : b) v = rng.normal();
  std::map<std::string, std::vector<double>> embs = {{"a", a}, {"b", b}};
  const double s = raw_score(a, b);
  TrialScoreSet fwd = {{1, "a", "b", s, 0.0}};
  TrialScoreSet rev = {{1, "b", "a", s, 0.0}};
  adaptive_snorm(fwd, embs, cohort, 5);
  adaptive_snorm(rev, embs, cohort, 5);
  CHECK(fwd[0].normalized == rev[0].normalized);
}

TEST_CASE("adaptive s-norm: speakers below the top-N cutoff do not matter") {
  Rng rng(4);
  std::vector<double> e = l2_normalized({1.0, 0.2, 0.1, 0.0});
  std::vector<double> t = l2_normalized({0.9, 0.3, 0.1, 0.05});
  Cohort cohort;
  for (int i = 0; i < 6; ++i) {
    std::vector<double> r(4);
    for (auto& v : r) v = rng.normal();
    // keep cohort rows loosely aligned so far-away row lands below cutoff
    r[0] = std::abs(r[0]) + 1.0;
    cohort.rows.push_back(l2_normalized(r));
  }
  std::map<std::string, std::vector<double>> embs = {{"e", e}, {"t", t}};
  TrialScoreSet base = {{1, "e", "t", raw_score(e, t), 0.0}};
  adaptive_snorm(base, embs, cohort, 4);

  Cohort bigger = cohort;
  bigger.rows.push_back(l2_normalized({-1.0, -0.5, -0.2, -0.1}));  // opposite direction
  TrialScoreSet with_far = base;
  adaptive_snorm(with_far, embs, bigger, 4);
  CHECK(base[0].normalized == with_far[0].normalized);
}

TEST_CASE("adaptive s-norm: invariant to cohort row order") {
  Rng rng(5);
  Cohort cohort;
  for (int i = 0; i < 8; ++i) {
    std::vector<double> r(4);
    for (auto& v : r) v = rng.normal();
    cohort.rows.push_back(l2_normalized(r));
  }
  std::vector<double> a(4), b(4);
  for (auto& v : a) v = rng.normal();
  for (auto& v : b) v = rng.normal();
  std::map<std::string, std::vector<double>> embs = {{"a", a}, {"b", b}};
  TrialScoreSet t1 = {{1, "a", "b", raw_score(a, b), 0.0}};
  TrialScoreSet t2 = t1;
  adaptive_snorm(t1, embs, cohort, 5);
  Cohort shuffled = cohort;
  std::reverse(shuffled.rows.begin(), shuffled.rows.end());
  adaptive_snorm(t2, embs, shuffled, 5);
  CHECK(t1[0].normalized == t2[0].normalized);
}

TEST_CASE("EER: pinned examples") {
  CHECK(compute_eer({0.9, 0.8, 0.1, 0.2}, {1, 1, 0, 0}) == 0.0);
  CHECK_THAT(compute_eer({0.9, 0.7, 0.3, 0.8, 0.2, 0.1}, {1, 1, 1, 0, 0, 0}),
             Catch::Matchers::WithinAbs(1.0 / 3.0, 1e-12));
  // labels flipped on the separable case
  CHECK(compute_eer({0.9, 0.8, 0.1, 0.2}, {0, 0, 1, 1}) == 1.0);
  CHECK_THROWS_AS(compute_eer({0.5, 0.6}, {1, 1}), contract_error);
}

TEST_CASE("minDCF: pinned examples") {
  CHECK(compute_min_dcf({0.9, 0.8, 0.1, 0.2}, {1, 1, 0, 0}, 0.01) == 0.0);
  // all scores equal: best trivial decision, normalized cost 1
  CHECK(compute_min_dcf({0.5, 0.5, 0.5, 0.5}, {1, 1, 0, 0}, 0.01) == 1.0);
  CHECK_THROWS_AS(compute_min_dcf({0.5, 0.4}, {1, 0}, 1.5), contract_error);
}

TEST_CASE("EER and minDCF match the exhaustive oracle on random sets") {
  Rng rng(6);
  for (int trial = 0; trial < 40; ++trial) {
    const int n = 10 + static_cast<int>(rng.uniform_index(200));
    std::vector<double> scores;
    std::vector<int> labels;
    bool has_t = false, has_n = false;
    for (int i = 0; i < n; ++i) {
      const int label = rng.bernoulli(0.4) ? 1 : 0;
      labels.push_back(label);
      has_t |= label == 1;
      has_n |= label == 0;
      // discretized scores force ties to be handled
      scores.push_back(std::round(rng.normal(label ? 1.0 : -1.0, 1.0) * 20.0) / 20.0);
    }
    if (!has_t || !has_n) continue;
    CHECK(compute_eer(scores, labels) == oracle_eer(scores, labels));
    CHECK(compute_min_dcf(scores, labels, 0.01) == oracle_min_dcf(scores, labels, 0.01));
    CHECK(compute_min_dcf(scores, labels, 0.05) == oracle_min_dcf(scores, labels, 0.05));
  }
}

TEST_CASE("metrics invariant under strictly monotone score transforms") {
  Rng rng(7);
  std::vector<double> scores;
  std::vector<int> labels;
  for (int i = 0; i < 60; ++i) {
    const int label = i % 3 == 0 ? 1 : 0;
    labels.push_back(label);
    scores.push_back(rng.normal(label ? 0.8 : -0.2, 0.7));
  }
  std::vector<double> affine(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) affine[i] = 2.0 * scores[i] + 3.0;
  CHECK_THAT(compute_eer(affine, labels),
             Catch::Matchers::WithinAbs(compute_eer(scores, labels), 1e-12));
  CHECK_THAT(compute_min_dcf(affine, labels, 0.05),
             Catch::Matchers::WithinAbs(compute_min_dcf(scores, labels, 0.05), 1e-12));
}

TEST_CASE("cohort validation rejects unnormalized rows") {
  Cohort c;
  c.rows = {{0.5, 0.5}};
  CHECK_THROWS_AS(c.validate(), contract_error);
  auto ok = Cohort::from_embeddings({{3.0, 4.0}}, 1);
  CHECK_NOTHROW(ok.validate());
}
