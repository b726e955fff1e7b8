#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "oracles.hpp"
#include "suede/metrics.hpp"
#include "suede/rng.hpp"

using namespace suede;

namespace {

ScoredSet make_set(std::vector<double> scores, std::vector<int> attack) {
  ScoredSet s;
  s.scores = std::move(scores);
  s.is_attack.assign(attack.begin(), attack.end());
  return s;
}

ScoredSet random_set(Rng& rng, std::size_t n, bool with_ties = true) {
  ScoredSet s;
  bool seen[2] = {false, false};
  for (std::size_t i = 0; i < n; ++i) {
    double v = rng.uniform();
    if (with_ties && rng.below(4) == 0) v = std::round(v * 8.0) / 8.0;
    bool att = rng.below(2) == 0;
    if (i == n - 2 && !seen[1]) att = true;
    if (i == n - 1 && !seen[0]) att = false;
    seen[att] = true;
    s.scores.push_back(v);
    s.is_attack.push_back(att);
  }
  return s;
}

std::vector<int> attacks_of(const ScoredSet& s) {
  return std::vector<int>(s.is_attack.begin(), s.is_attack.end());
}

}  // namespace

TEST_CASE("roc: perfect separation passes through (0,1)") {
  ScoredSet s = make_set({0.9, 0.8, 0.1, 0.2}, {1, 1, 0, 0});
  auto pts = roc_curve(s);
  bool hit = false;
  for (const auto& p : pts) hit |= (p.fpr == 0.0 && p.tpr == 1.0);
  CHECK(hit);
  // thresholds descending, rates nondecreasing
  for (std::size_t i = 1; i < pts.size(); ++i) {
    CHECK(pts[i].threshold < pts[i - 1].threshold);
    CHECK(pts[i].fpr >= pts[i - 1].fpr);
    CHECK(pts[i].tpr >= pts[i - 1].tpr);
  }
}

TEST_CASE("roc: all-equal scores collapse to the two endpoints") {
  ScoredSet s = make_set({0.5, 0.5, 0.5, 0.5}, {1, 0, 1, 0});
  auto pts = roc_curve(s);
  REQUIRE(pts.size() == 2);
  CHECK(pts[0].fpr == 0.0);
  CHECK(pts[0].tpr == 0.0);
  CHECK(pts[1].fpr == 1.0);
  CHECK(pts[1].tpr == 1.0);
}

TEST_CASE("roc: single-class input is a contract error") {
  CHECK_THROWS_AS(roc_curve(make_set({0.5, 0.6}, {1, 1})), Error);
  CHECK_THROWS_AS(auc(make_set({0.5, 0.6}, {0, 0})), Error);
}

TEST_CASE("roc matches the brute-force sweep on a random set") {
  Rng rng(314);
  ScoredSet s = random_set(rng, 10);
  auto pts = roc_curve(s);
  auto ref = oracles::roc_sweep(s.scores, attacks_of(s));
  REQUIRE(pts.size() == ref.size());
  for (std::size_t i = 0; i < pts.size(); ++i) {
    CHECK(pts[i].fpr == Catch::Approx(ref[i].fpr).margin(1e-12));
    CHECK(pts[i].tpr == Catch::Approx(ref[i].tpr).margin(1e-12));
  }
}

TEST_CASE("auc identities") {
  CHECK(auc(make_set({0.9, 0.8, 0.1, 0.2}, {1, 1, 0, 0})) == 1.0);
  // identical score distributions -> 0.5
  CHECK(auc(make_set({0.3, 0.3, 0.7, 0.7}, {1, 0, 1, 0})) == 0.5);
}

TEST_CASE("auc equals pair counting exactly on random sets") {
  Rng rng(2718);
  for (int rep = 0; rep < 30; ++rep) {
    std::size_t n = 5 + rng.below(196);
    ScoredSet s = random_set(rng, n);
    double ours = auc(s);
    double ref = oracles::auc_pair_count(s.scores, attacks_of(s));
    CHECK(ours == ref);  // exact, including ties
  }
}

TEST_CASE("eer identities and the sweep oracle") {
  CHECK(eer(make_set({0.9, 0.8, 0.1, 0.2}, {1, 1, 0, 0})).eer ==
        Catch::Approx(0.0).margin(1e-12));
  CHECK(eer(make_set({0.5, 0.5, 0.5, 0.5}, {1, 0, 1, 0})).eer ==
        Catch::Approx(0.5).margin(1e-12));

  // constructed 6-sample set with an interpolated crossing
  ScoredSet s = make_set({0.9, 0.7, 0.55, 0.45, 0.3, 0.2}, {1, 1, 0, 1, 0, 0});
  double ref = oracles::eer_sweep(s.scores, attacks_of(s));
  CHECK(eer(s).eer == Catch::Approx(ref).margin(1e-9));

  Rng rng(27);
  for (int rep = 0; rep < 30; ++rep) {
    ScoredSet rs = random_set(rng, 6 + rng.below(60));
    CHECK(eer(rs).eer ==
          Catch::Approx(oracles::eer_sweep(rs.scores, attacks_of(rs)))
              .margin(1e-9));
  }
}

TEST_CASE("eer is symmetric under score/label flips") {
  Rng rng(31);
  for (int rep = 0; rep < 20; ++rep) {
    ScoredSet s = random_set(rng, 12 + rng.below(40));
    ScoredSet flipped;
    for (std::size_t i = 0; i < s.scores.size(); ++i) {
      flipped.scores.push_back(1.0 - s.scores[i]);
      flipped.is_attack.push_back(!s.is_attack[i]);
    }
    CHECK(eer(s).eer == Catch::Approx(eer(flipped).eer).margin(1e-9));
  }
}

TEST_CASE("acer decomposition and boundary rule") {
  ScoredSet perfect = make_set({0.9, 0.8, 0.1, 0.2}, {1, 1, 0, 0});
  AcerResult r = acer(perfect, 0.5);
  CHECK(r.acer == 0.0);
  CHECK(r.apcer == 0.0);
  CHECK(r.bpcer == 0.0);

  // all scores exactly at the threshold: everything classified attack
  ScoredSet flat = make_set({0.5, 0.5, 0.5, 0.5}, {1, 1, 0, 0});
  AcerResult rf = acer(flat, 0.5);
  CHECK(rf.apcer == 0.0);
  CHECK(rf.bpcer == 1.0);
  CHECK(rf.acer == 0.5);
}

TEST_CASE("acer and acc match hand counts on a mixed 8-sample case") {
  //  attacks: .9 .6 .4 .2   bonafide: .7 .45 .3 .1   threshold .5
  ScoredSet s = make_set({0.9, 0.6, 0.4, 0.2, 0.7, 0.45, 0.3, 0.1},
                         {1, 1, 1, 1, 0, 0, 0, 0});
  AcerResult r = acer(s, 0.5);
  CHECK(r.apcer == Catch::Approx(0.5).margin(1e-12));   // .4 and .2 missed
  CHECK(r.bpcer == Catch::Approx(0.25).margin(1e-12));  // .7 rejected
  CHECK(r.acer == Catch::Approx(0.375).margin(1e-12));
  CHECK(acc(s, 0.5) == Catch::Approx(5.0 / 8.0).margin(1e-12));
}

TEST_CASE("threshold metrics are invariant under monotone score maps") {
  Rng rng(37);
  ScoredSet s = random_set(rng, 24);
  double thr = 0.4;
  AcerResult base = acer(s, thr);
  double acc_base = acc(s, thr);

  auto monotone = [](double x) { return x * x * 0.5 + 0.25 * x; };  // rising
  ScoredSet mapped = s;
  for (double& v : mapped.scores) v = monotone(v);
  double thr_m = monotone(thr);
  AcerResult after = acer(mapped, thr_m);
  CHECK(after.acer == Catch::Approx(base.acer).margin(1e-12));
  CHECK(after.apcer == Catch::Approx(base.apcer).margin(1e-12));
  CHECK(acc(mapped, thr_m) == Catch::Approx(acc_base).margin(1e-12));
}

TEST_CASE("tpr@fpr: perfect separation, coin flips, and the sweep oracle") {
  ScoredSet perfect = make_set({0.9, 0.8, 0.1, 0.2}, {1, 1, 0, 0});
  CHECK(tpr_at_fpr(perfect, 0.10) == 1.0);
  CHECK(tpr_at_fpr(perfect, 0.01) == 1.0);

  // AUC-0.5 coin-flip scores concentrate near tpr == fpr_target
  Rng rng(41);
  ScoredSet coin;
  for (int i = 0; i < 1000; ++i) {
    coin.scores.push_back(rng.uniform());
    coin.is_attack.push_back(i % 2 == 0);
  }
  CHECK(tpr_at_fpr(coin, 0.3) == Catch::Approx(0.3).margin(0.1));

  for (int rep = 0; rep < 20; ++rep) {
    ScoredSet s = random_set(rng, 8 + rng.below(100));
    for (double t : {0.10, 0.01, 0.5}) {
      double ref = oracles::tpr_at_fpr_sweep(s.scores, attacks_of(s), t);
      CHECK(tpr_at_fpr(s, t) == Catch::Approx(ref).margin(1e-9));
    }
  }
}

TEST_CASE("aggregate: single report, arithmetic pair, direct formula") {
  MetricReport a = make_report(make_set({0.9, 0.1}, {1, 0}), 0.5);
  AggregateReport single = aggregate({a});
  CHECK(single.auc.mean == a.auc);
  CHECK(single.auc.stddev == 0.0);

  MetricReport r10, r20;
  r10.acer = 10;
  r20.acer = 20;
  r10.tpr_at_fpr["0.10"] = 0.2;
  r20.tpr_at_fpr["0.10"] = 0.6;
  AggregateReport pair = aggregate({r10, r20});
  CHECK(pair.acer.mean == Catch::Approx(15.0).margin(1e-12));
  CHECK(pair.acer.stddev == Catch::Approx(5.0).margin(1e-12));
  CHECK(pair.tpr_at_fpr["0.10"].mean == Catch::Approx(0.4).margin(1e-12));

  MetricReport r3;
  r3.acer = 40;
  r3.tpr_at_fpr["0.10"] = 0.1;
  AggregateReport three = aggregate({r10, r20, r3});
  double mean = (10 + 20 + 40) / 3.0;
  double var = ((10 - mean) * (10 - mean) + (20 - mean) * (20 - mean) +
                (40 - mean) * (40 - mean)) /
               3.0;
  CHECK(three.acer.mean == Catch::Approx(mean).margin(1e-12));
  CHECK(three.acer.stddev == Catch::Approx(std::sqrt(var)).margin(1e-12));

  CHECK_THROWS_AS(aggregate({}), Error);
}
