#pragma once

// COCO-style average precision and query-level forgetting diagnostics.

#include <limits>
#include <map>
#include <vector>

#include "iaqd/core.hpp"
#include "iaqd/data.hpp"
#include "iaqd/detector.hpp"
#include "iaqd/matcher.hpp"

namespace iaqd {

struct DetectionRecord {
  int scene_id = 0;
  int category_id = 0;
  BoundingBox box;
  double confidence = 0.0;
};

using GroundTruthIndex = std::map<int, AnnotationSet>;

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

/// Normalized-area bounds equivalent to COCO's 32^2 / 96^2 pixel cutoffs on a 640-pixel image.
inline constexpr double kSmallAreaMax = (32.0 / 640.0) * (32.0 / 640.0);
inline constexpr double kMediumAreaMax = (96.0 / 640.0) * (96.0 / 640.0);

struct AreaRange {
  double min = 0.0;
  double max = std::numeric_limits<double>::infinity();
  bool contains(double area) const { return area >= min && area < max; }
};

/// 0.50, 0.55, ..., 0.95
std::vector<double> coco_iou_thresholds();

struct PrecisionRecall {
  std::vector<double> precision;  // raw, one entry per detection in confidence order
  std::vector<double> recall;
  int num_gt = 0;
};

/// Greedy confidence-ordered matching for one category at one IoU threshold.
PrecisionRecall precision_recall(const std::vector<DetectionRecord>& detections, const GroundTruthIndex& gts,
                                 int category, double iou_threshold, const AreaRange& area = {});

/// 101-point interpolated AP; NaN when the category has no ground truth.
double interpolated_ap(const PrecisionRecall& curve);

struct CategoryAP {
  double ap = kNaN;
  double ap50 = kNaN;
  double ap75 = kNaN;
  int num_gt = 0;
};

struct APReport {
  double ap = kNaN;
  double ap50 = kNaN;
  double ap75 = kNaN;
  double ap_small = kNaN;
  double ap_medium = kNaN;
  double ap_large = kNaN;
  std::map<int, CategoryAP> per_category;
  double ap_old = kNaN;
  double ap_new = kNaN;
  double ap_all = kNaN;
};

/// `categories` are the evaluated categories; detections outside them raise
/// InvalidCategory, ground truth outside them is ignored. Aggregates skip
/// categories without ground truth.
APReport compute_ap(const std::vector<DetectionRecord>& detections, const GroundTruthIndex& gts,
                    const CategorySet& categories, const CategorySet& old_categories,
                    const CategorySet& new_categories, const std::vector<double>& iou_thresholds = coco_iou_thresholds());

/// One detection per query: argmax over `categories`, scored by its probability.
std::vector<DetectionRecord> detections_from_output(const DetectorOutput& output, int scene_id,
                                                    const CategorySet& categories);

/// Runs the model over every scene and scores it against the full annotations.
APReport evaluate_model(const FrozenDetector& model, const SceneList& scenes, const CategorySet& categories,
                        const CategorySet& old_categories, const CategorySet& new_categories);

// --- forgetting diagnostics ---------------------------------------------------------

struct MatchRecord {
  long step = 0;
  int image_id = 0;
  int student = 0;
  int teacher = 0;
};

/// Distinct teacher indices paired with each student query over the log
/// (0 for queries that never appear).
std::vector<int> match_churn(const std::vector<MatchRecord>& log, int num_queries);

/// teacher index -> number of pairings for one student query.
std::map<int, long> churn_histogram(const std::vector<MatchRecord>& log, int student_query);

struct RelatedQueries {
  std::map<int, int> per_category;
  int total = 0;
};

struct OverallIoU {
  std::map<int, double> per_category;
  double mean = kNaN;
};

/// Pixel counts of intersection and union of two box unions on a res x res grid
/// (cells count when their centre lies inside a box).
std::pair<long, long> mask_overlap(const std::vector<BoundingBox>& a, const std::vector<BoundingBox>& b,
                                   int resolution);
double mask_iou(const std::vector<BoundingBox>& a, const std::vector<BoundingBox>& b, int resolution);

struct QueryDiagnostics {
  RelatedQueries related;
  OverallIoU overall_iou;
};

/// Hungarian-matches model outputs to each sample's annotations and gathers,
/// per old category, the distinct matched query indices and the rasterized
/// overlap between matched predicted boxes and GT boxes (summed over samples).
QueryDiagnostics diagnose_queries(const FrozenDetector& model, const std::vector<PhaseSample>& samples,
                                  const CategorySet& old_categories, const CostWeights& weights = {},
                                  int raster_resolution = 256);

RelatedQueries related_query_count(const FrozenDetector& model, const std::vector<PhaseSample>& samples,
                                   const CategorySet& old_categories, const CostWeights& weights = {});
OverallIoU overall_iou(const FrozenDetector& model, const std::vector<PhaseSample>& samples,
                       const CategorySet& old_categories, int raster_resolution = 256,
                       const CostWeights& weights = {});

}  // namespace iaqd
