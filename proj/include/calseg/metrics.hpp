#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "calseg/datastore.hpp"

namespace calseg {

struct Confusion {
  std::uint64_t tp = 0, tn = 0, fp = 0, fn = 0;

  std::uint64_t total() const { return tp + tn + fp + fn; }
  bool operator==(const Confusion&) const = default;
};

struct MetricReport {
  double dice = 0;
  double accuracy = 0;
  double sensitivity = 0;
  double mcc = 0;
  Confusion confusion;
};

/// Throws ShapeError when the masks differ in shape.
Confusion confusion(const MaskMap& pred, const MaskMap& truth);

// Degenerate conventions: dice 1 when both masks are empty, sensitivity 1
// when there are no positives, mcc 0 when any denominator factor is 0.
double dice(const Confusion& c);
double sensitivity(const Confusion& c);
double accuracy(const Confusion& c);
double mcc(const Confusion& c);

MetricReport evaluate(const MaskMap& pred, const MaskMap& truth);
MetricReport report_from(const Confusion& c);

enum class Aggregation {
  kMeanOfBlocks,   // average of per-block metrics
  kPooledCounts,   // metrics of the summed confusion counts
};

/// Aggregate over aligned (pred, truth) pairs. Confusion holds summed counts.
MetricReport aggregate(const std::vector<MetricReport>& per_block, Aggregation mode = Aggregation::kMeanOfBlocks);

/// Agreement between two runs over the same blocks; run 1 is the reference
/// (sensitivity is therefore relative to run 1's foreground).
MetricReport reproducibility_report(const std::vector<MaskMap>& preds_run1, const std::vector<MaskMap>& preds_run2,
                                    Aggregation mode = Aggregation::kMeanOfBlocks);

/// Pearson correlation over per-block (dice, mean uncertainty) pairs.
double dice_uncertainty_correlation(const std::vector<std::pair<double, double>>& points);

Json to_json(const Confusion& c);
Json to_json(const MetricReport& r);

}  // namespace calseg
