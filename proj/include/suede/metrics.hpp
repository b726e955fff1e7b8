#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "suede/errors.hpp"

namespace suede {

// Scores are fake-scores in [0,1]; the decision rule everywhere is
// score >= threshold  =>  classified attack.
struct ScoredSet {
  std::vector<double> scores;
  std::vector<bool> is_attack;

  void validate(bool need_both_classes = true) const {
    require(scores.size() == is_attack.size(), ErrorCode::kContract,
            "scores and labels differ in length");
    require(!scores.empty(), ErrorCode::kContract, "empty scored set");
    for (double s : scores)
      require(s >= 0.0 && s <= 1.0, ErrorCode::kContract,
              "score outside [0,1]");
    if (need_both_classes) {
      bool att = false, bon = false;
      for (bool a : is_attack) (a ? att : bon) = true;
      require(att && bon, ErrorCode::kContract,
              "threshold metrics need both classes present");
    }
  }

  std::size_t count(bool attack) const {
    std::size_t n = 0;
    for (bool a : is_attack) n += a == attack ? 1 : 0;
    return n;
  }
};

// One ROC vertex. Rates are kept alongside the exact cumulative counts so
// AUC can be integrated without rounding.
struct RocPoint {
  double fpr = 0.0, tpr = 0.0;
  double threshold = std::numeric_limits<double>::infinity();
  std::size_t fp = 0, tp = 0;
};

// ROC with tie groups flipping atomically: one vertex per distinct score,
// thresholds descending, rates nondecreasing.
inline std::vector<RocPoint> roc_curve(const ScoredSet& set) {
  set.validate();
  std::size_t n = set.scores.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return set.scores[a] > set.scores[b];
  });

  double n_att = static_cast<double>(set.count(true));
  double n_bon = static_cast<double>(set.count(false));

  std::vector<RocPoint> pts;
  pts.push_back({});
  std::size_t tp = 0, fp = 0;
  std::size_t i = 0;
  while (i < n) {
    double s = set.scores[order[i]];
    while (i < n && set.scores[order[i]] == s) {
      if (set.is_attack[order[i]]) ++tp;
      else ++fp;
      ++i;
    }
    RocPoint p;
    p.threshold = s;
    p.tp = tp;
    p.fp = fp;
    p.tpr = static_cast<double>(tp) / n_att;
    p.fpr = static_cast<double>(fp) / n_bon;
    pts.push_back(p);
  }
  return pts;
}

// Area under the tie-grouped ROC by exact trapezoidal integration over the
// vertex counts; algebraically this is the Mann-Whitney statistic
// P(attack > bonafide) + 1/2 P(equal), and matches pair counting exactly.
inline double auc(const ScoredSet& set) {
  std::vector<RocPoint> pts = roc_curve(set);
  double num = 0.0;  // integer halves, exact in double
  for (std::size_t i = 1; i < pts.size(); ++i) {
    double db = static_cast<double>(pts[i].fp - pts[i - 1].fp);
    double da = static_cast<double>(pts[i].tp - pts[i - 1].tp);
    num += db * (static_cast<double>(pts[i - 1].tp) + 0.5 * da);
  }
  double n_att = static_cast<double>(set.count(true));
  double n_bon = static_cast<double>(set.count(false));
  return num / (n_att * n_bon);
}

struct EerResult {
  double eer = 0.0;
  double threshold = 0.5;
};

// Equal error rate: the point on the linearly interpolated ROC where the
// false-acceptance rate (1 - tpr) equals the false-rejection rate (fpr).
inline EerResult eer(const ScoredSet& set) {
  std::vector<RocPoint> pts = roc_curve(set);
  auto gap = [](const RocPoint& p) { return p.fpr + p.tpr - 1.0; };
  for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
    double d0 = gap(pts[i]), d1 = gap(pts[i + 1]);
    if (d0 <= 0.0 && d1 >= 0.0) {
      EerResult r;
      if (d1 == d0) {
        r.eer = pts[i].fpr;
        r.threshold = pts[i + 1].threshold;
        return r;
      }
      double t = -d0 / (d1 - d0);
      r.eer = pts[i].fpr + t * (pts[i + 1].fpr - pts[i].fpr);
      r.threshold = std::isfinite(pts[i].threshold)
                        ? pts[i].threshold +
                              t * (pts[i + 1].threshold - pts[i].threshold)
                        : pts[i + 1].threshold;
      return r;
    }
  }
  return {1.0, 0.0};
}

struct AcerResult {
  double acer = 0.0, apcer = 0.0, bpcer = 0.0;
};

// APCER: attacks accepted as bonafide (score < threshold).
// BPCER: bonafide rejected as attack (score >= threshold).
inline AcerResult acer(const ScoredSet& set, double threshold) {
  set.validate();
  require(threshold >= 0.0 && threshold <= 1.0, ErrorCode::kContract,
          "threshold must lie in [0,1]");
  double att = 0, bon = 0, att_missed = 0, bon_rejected = 0;
  for (std::size_t i = 0; i < set.scores.size(); ++i) {
    if (set.is_attack[i]) {
      ++att;
      if (set.scores[i] < threshold) ++att_missed;
    } else {
      ++bon;
      if (set.scores[i] >= threshold) ++bon_rejected;
    }
  }
  AcerResult r;
  r.apcer = att_missed / att;
  r.bpcer = bon_rejected / bon;
  r.acer = 0.5 * (r.apcer + r.bpcer);
  return r;
}

inline double acc(const ScoredSet& set, double threshold) {
  set.validate();
  double correct = 0;
  for (std::size_t i = 0; i < set.scores.size(); ++i) {
    bool predicted_attack = set.scores[i] >= threshold;
    if (predicted_attack == static_cast<bool>(set.is_attack[i])) ++correct;
  }
  return correct / static_cast<double>(set.scores.size());
}

// TPR at the given FPR, linearly interpolated between ROC vertices.
inline double tpr_at_fpr(const ScoredSet& set, double fpr_target) {
  require(fpr_target > 0.0 && fpr_target < 1.0, ErrorCode::kContract,
          "fpr target must lie in (0,1)");
  std::vector<RocPoint> pts = roc_curve(set);
  for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
    if (pts[i + 1].fpr >= fpr_target) {
      double df = pts[i + 1].fpr - pts[i].fpr;
      if (df == 0.0) return std::max(pts[i].tpr, pts[i + 1].tpr);
      double t = (fpr_target - pts[i].fpr) / df;
      return pts[i].tpr + t * (pts[i + 1].tpr - pts[i].tpr);
    }
  }
  return 1.0;
}

struct MetricReport {
  double acer = 0, apcer = 0, bpcer = 0;
  double acc = 0, auc = 0, eer = 0;
  std::map<std::string, double> tpr_at_fpr;  // key "0.10" -> tpr
  double threshold_used = 0.5;
};

// Full report at the given decision threshold, with TPR@FPR at the
// requested operating points.
inline MetricReport make_report(const ScoredSet& set, double threshold,
                                const std::vector<double>& fpr_targets = {0.10,
                                                                          0.01}) {
  MetricReport r;
  AcerResult a = acer(set, threshold);
  r.acer = a.acer;
  r.apcer = a.apcer;
  r.bpcer = a.bpcer;
  r.acc = acc(set, threshold);
  r.auc = auc(set);
  r.eer = eer(set).eer;
  r.threshold_used = threshold;
  char key[16];
  for (double t : fpr_targets) {
    std::snprintf(key, sizeof(key), "%.2f", t);
    r.tpr_at_fpr[key] = tpr_at_fpr(set, t);
  }
  return r;
}

struct MeanStd {
  double mean = 0, stddev = 0;
};

struct AggregateReport {
  MeanStd acer, apcer, bpcer, acc, auc, eer, threshold_used;
  std::map<std::string, MeanStd> tpr_at_fpr;
};

// Mean +- population std (divide by n) per field, the two-protocol
// aggregation rule.
inline AggregateReport aggregate(const std::vector<MetricReport>& reports) {
  require(!reports.empty(), ErrorCode::kContract,
          "aggregate needs at least one report");
  auto stat = [&](auto field) {
    MeanStd m;
    for (const MetricReport& r : reports) m.mean += field(r);
    m.mean /= static_cast<double>(reports.size());
    for (const MetricReport& r : reports) {
      double d = field(r) - m.mean;
      m.stddev += d * d;
    }
    m.stddev = std::sqrt(m.stddev / static_cast<double>(reports.size()));
    return m;
  };
  AggregateReport out;
  out.acer = stat([](const MetricReport& r) { return r.acer; });
  out.apcer = stat([](const MetricReport& r) { return r.apcer; });
  out.bpcer = stat([](const MetricReport& r) { return r.bpcer; });
  out.acc = stat([](const MetricReport& r) { return r.acc; });
  out.auc = stat([](const MetricReport& r) { return r.auc; });
  out.eer = stat([](const MetricReport& r) { return r.eer; });
  out.threshold_used =
      stat([](const MetricReport& r) { return r.threshold_used; });
  for (const auto& [key, value] : reports.front().tpr_at_fpr) {
    const std::string& k = key;
    out.tpr_at_fpr[k] = stat([&k](const MetricReport& r) {
      auto it = r.tpr_at_fpr.find(k);
      require(it != r.tpr_at_fpr.end(), ErrorCode::kContract,
              "reports disagree on tpr@fpr operating points");
      return it->second;
    });
  }
  return out;
}

}  // namespace suede
