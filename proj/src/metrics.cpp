#include "calseg/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "calseg/errors.hpp"
#include "calseg/features.hpp"

namespace calseg {

Confusion confusion(const MaskMap& pred, const MaskMap& truth) {
  if (pred.height() != truth.height() || pred.width() != truth.width())
    throw ShapeError("confusion: mask shapes differ");
  Confusion c;
  const auto p = pred.values(), t = truth.values();
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] && t[i]) ++c.tp;
    else if (!p[i] && !t[i]) ++c.tn;
    else if (p[i]) ++c.fp;
    else ++c.fn;
  }
  return c;
}

double dice(const Confusion& c) {
  const double denom = double(c.fn) + double(c.fp) + 2.0 * double(c.tp);
  return denom == 0 ? 1.0 : 2.0 * double(c.tp) / denom;
}

double sensitivity(const Confusion& c) {
  const double denom = double(c.fn) + double(c.tp);
  return denom == 0 ? 1.0 : double(c.tp) / denom;
}

double accuracy(const Confusion& c) {
  const double n = double(c.total());
  return n == 0 ? 1.0 : (double(c.tp) + double(c.tn)) / n;
}

double mcc(const Confusion& c) {
  const double n = double(c.total());
  if (n == 0) return 0.0;
  const bool both_classes = c.tp + c.fn > 0 && c.tn + c.fp > 0;
  if (both_classes && c.fp == 0 && c.fn == 0) return 1.0;
  if (both_classes && c.tp == 0 && c.tn == 0) return -1.0;
  const double s = (double(c.tp) + double(c.fn)) / n;
  const double p = (double(c.tp) + double(c.fp)) / n;
  const double denom = p * s * (1 - s) * (1 - p);
  if (denom == 0) return 0.0;
  return (double(c.tp) / n - s * p) / std::sqrt(denom);
}

MetricReport report_from(const Confusion& c) { return {dice(c), accuracy(c), sensitivity(c), mcc(c), c}; }

MetricReport evaluate(const MaskMap& pred, const MaskMap& truth) { return report_from(confusion(pred, truth)); }

MetricReport aggregate(const std::vector<MetricReport>& per_block, Aggregation mode) {
  if (per_block.empty()) throw ShapeError("aggregate: no blocks");
  Confusion pooled;
  MetricReport mean;
  for (const auto& r : per_block) {
    pooled.tp += r.confusion.tp;
    pooled.tn += r.confusion.tn;
    pooled.fp += r.confusion.fp;
    pooled.fn += r.confusion.fn;
    mean.dice += r.dice;
    mean.accuracy += r.accuracy;
    mean.sensitivity += r.sensitivity;
    mean.mcc += r.mcc;
  }
  if (mode == Aggregation::kPooledCounts) return report_from(pooled);
  const double n = double(per_block.size());
  mean.dice /= n;
  mean.accuracy /= n;
  mean.sensitivity /= n;
  mean.mcc /= n;
  mean.confusion = pooled;
  return mean;
}

MetricReport reproducibility_report(const std::vector<MaskMap>& preds_run1, const std::vector<MaskMap>& preds_run2,
                                    Aggregation mode) {
  if (preds_run1.size() != preds_run2.size()) throw ShapeError("reproducibility_report: run lengths differ");
  std::vector<MetricReport> per_block;
  for (std::size_t i = 0; i < preds_run1.size(); ++i) per_block.push_back(evaluate(preds_run2[i], preds_run1[i]));
  return aggregate(per_block, mode);
}

double dice_uncertainty_correlation(const std::vector<std::pair<double, double>>& points) {
  std::vector<double> d, u;
  for (const auto& [dv, uv] : points) {
    d.push_back(dv);
    u.push_back(uv);
  }
  return pearson(std::span<const double>(d), std::span<const double>(u));
}

Json to_json(const Confusion& c) { return Json{{"tp", c.tp}, {"tn", c.tn}, {"fp", c.fp}, {"fn", c.fn}}; }

Json to_json(const MetricReport& r) {
  Json j;
  j["dice"] = r.dice;
  j["accuracy"] = r.accuracy;
  j["sensitivity"] = r.sensitivity;
  j["mcc"] = r.mcc;
  j["confusion"] = to_json(r.confusion);
  return j;
}

}  // namespace calseg
