#include "iaqd/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

namespace iaqd {

std::vector<double> coco_iou_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

PrecisionRecall precision_recall(const std::vector<DetectionRecord>& detections, const GroundTruthIndex& gts,
                                 int category, double iou_threshold, const AreaRange& area) {
  struct GtState {
    BoundingBox box;
    bool ignore;
    bool taken;
  };
  std::map<int, std::vector<GtState>> pool;
  PrecisionRecall curve;
  for (const auto& [scene, set] : gts) {
    for (const auto& a : set) {
      if (a.category_id != category) continue;
      const bool ignore = !area.contains(a.box.area());
      pool[scene].push_back({a.box, ignore, false});
      if (!ignore) ++curve.num_gt;
    }
  }

  std::vector<const DetectionRecord*> dets;
  for (const auto& d : detections)
    if (d.category_id == category) dets.push_back(&d);
  std::stable_sort(dets.begin(), dets.end(),
                   [](const DetectionRecord* a, const DetectionRecord* b) { return a->confidence > b->confidence; });

  long tp = 0, fp = 0;
  for (const auto* d : dets) {
    auto it = pool.find(d->scene_id);
    int best = -1;
    bool best_ignored = false;
    if (it != pool.end()) {
      // Prefer regular ground truth; fall back to ignored entries.
      for (int pass = 0; pass < 2 && best < 0; ++pass) {
        double best_iou = iou_threshold;
        for (std::size_t g = 0; g < it->second.size(); ++g) {
          auto& gt = it->second[g];
          if (gt.taken || gt.ignore != (pass == 1)) continue;
          const double iou = box_iou(d->box, gt.box);
          if (iou >= best_iou) {
            best_iou = iou;
            best = static_cast<int>(g);
            best_ignored = pass == 1;
          }
        }
      }
    }
    if (best >= 0) {
      it->second[best].taken = true;
      if (best_ignored) continue;
      ++tp;
    } else {
      if (!area.contains(d->box.area())) continue;
      ++fp;
    }
    curve.precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    curve.recall.push_back(curve.num_gt > 0 ? static_cast<double>(tp) / curve.num_gt : 0.0);
  }
  return curve;
}

double interpolated_ap(const PrecisionRecall& curve) {
  if (curve.num_gt == 0) return kNaN;
  std::vector<double> precision = curve.precision;
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double sum = 0.0;
  for (int k = 0; k <= 100; ++k) {
    const double r = k / 100.0;
    const auto pos = std::lower_bound(curve.recall.begin(), curve.recall.end(), r) - curve.recall.begin();
    if (pos < static_cast<std::ptrdiff_t>(precision.size())) sum += precision[pos];
  }
  return sum / 101.0;
}

namespace {

double nan_mean(const std::vector<double>& values) {
  double sum = 0.0;
  int n = 0;
  for (double v : values)
    if (!std::isnan(v)) {
      sum += v;
      ++n;
    }
  return n ? sum / n : kNaN;
}

double area_ap(const std::vector<DetectionRecord>& detections, const GroundTruthIndex& gts,
               const CategorySet& categories, const std::vector<double>& thresholds, const AreaRange& area) {
  std::vector<double> per_category;
  for (int c : categories) {
    std::vector<double> aps;
    for (double t : thresholds) aps.push_back(interpolated_ap(precision_recall(detections, gts, c, t, area)));
    per_category.push_back(nan_mean(aps));
  }
  return nan_mean(per_category);
}

}  // namespace

APReport compute_ap(const std::vector<DetectionRecord>& detections, const GroundTruthIndex& gts,
                    const CategorySet& categories, const CategorySet& old_categories,
                    const CategorySet& new_categories, const std::vector<double>& iou_thresholds) {
  for (double t : iou_thresholds)
    if (!(t > 0.0 && t < 1.0)) throw InvariantViolation("iou_thresholds", "must lie in (0,1)");
  for (const auto& d : detections)
    if (!categories.contains(d.category_id))
      throw InvalidCategory("detection category " + std::to_string(d.category_id) + " is not evaluated");

  APReport report;
  for (int c : categories) {
    CategoryAP cat;
    std::vector<double> aps;
    for (double t : iou_thresholds) {
      const auto curve = precision_recall(detections, gts, c, t);
      cat.num_gt = curve.num_gt;
      const double ap = interpolated_ap(curve);
      aps.push_back(ap);
      if (std::abs(t - 0.5) < 1e-9) cat.ap50 = ap;
      if (std::abs(t - 0.75) < 1e-9) cat.ap75 = ap;
    }
    cat.ap = nan_mean(aps);
    report.per_category[c] = cat;
  }

  auto slice_mean = [&](const CategorySet& slice, double CategoryAP::*field) {
    std::vector<double> v;
    for (int c : slice)
      if (auto it = report.per_category.find(c); it != report.per_category.end()) v.push_back(it->second.*field);
    return nan_mean(v);
  };
  report.ap = slice_mean(categories, &CategoryAP::ap);
  report.ap50 = slice_mean(categories, &CategoryAP::ap50);
  report.ap75 = slice_mean(categories, &CategoryAP::ap75);
  report.ap_all = report.ap;
  report.ap_old = slice_mean(old_categories, &CategoryAP::ap);
  report.ap_new = slice_mean(new_categories, &CategoryAP::ap);
  report.ap_small = area_ap(detections, gts, categories, iou_thresholds, {0.0, kSmallAreaMax});
  report.ap_medium = area_ap(detections, gts, categories, iou_thresholds, {kSmallAreaMax, kMediumAreaMax});
  report.ap_large = area_ap(detections, gts, categories, iou_thresholds, {kMediumAreaMax});
  return report;
}

std::vector<DetectionRecord> detections_from_output(const DetectorOutput& output, int scene_id,
                                                    const CategorySet& categories) {
  std::vector<DetectionRecord> out;
  if (categories.empty()) return out;
  for (int q = 0; q < output.num_queries(); ++q) {
    int best_c = -1;
    double best_p = -1.0;
    for (int c : categories)
      if (output.probabilities()(q, c) > best_p) {
        best_p = output.probabilities()(q, c);
        best_c = c;
      }
    out.push_back({scene_id, best_c, output.box(q), std::clamp(best_p, 0.0, 1.0)});
  }
  return out;
}

APReport evaluate_model(const FrozenDetector& model, const SceneList& scenes, const CategorySet& categories,
                        const CategorySet& old_categories, const CategorySet& new_categories) {
  std::vector<DetectionRecord> detections;
  GroundTruthIndex gts;
  for (const auto& scene : scenes) {
    const auto found = detections_from_output(model.forward(scene->image), scene->scene_id, categories);
    detections.insert(detections.end(), found.begin(), found.end());
    gts[scene->scene_id] = scene->annotations;
  }
  return compute_ap(detections, gts, categories, old_categories, new_categories);
}

std::vector<int> match_churn(const std::vector<MatchRecord>& log, int num_queries) {
  std::vector<std::set<int>> seen(num_queries);
  for (const auto& r : log) {
    if (r.student < 0 || r.student >= num_queries) throw DimensionError("student index out of range in match log");
    seen[r.student].insert(r.teacher);
  }
  std::vector<int> counts(num_queries);
  for (int q = 0; q < num_queries; ++q) counts[q] = static_cast<int>(seen[q].size());
  return counts;
}

std::map<int, long> churn_histogram(const std::vector<MatchRecord>& log, int student_query) {
  std::map<int, long> hist;
  for (const auto& r : log)
    if (r.student == student_query) ++hist[r.teacher];
  return hist;
}

std::pair<long, long> mask_overlap(const std::vector<BoundingBox>& a, const std::vector<BoundingBox>& b,
                                   int resolution) {
  if (resolution <= 0) throw InvariantViolation("raster_resolution", "must be positive");
  auto paint = [resolution](const std::vector<BoundingBox>& boxes) {
    std::vector<char> mask(static_cast<std::size_t>(resolution) * resolution, 0);
    for (const auto& box : boxes) {
      const auto c = box.clamped_corners();
      // Cells whose centre (i + 0.5) / res lies in [lo, hi].
      auto first = [&](double lo) { return std::max(0, static_cast<int>(std::ceil(lo * resolution - 0.5))); };
      auto last = [&](double hi) {
        return std::min(resolution - 1, static_cast<int>(std::floor(hi * resolution - 0.5)));
      };
      for (int y = first(c[1]); y <= last(c[3]); ++y)
        for (int x = first(c[0]); x <= last(c[2]); ++x) mask[static_cast<std::size_t>(y) * resolution + x] = 1;
    }
    return mask;
  };
  const auto ma = paint(a);
  const auto mb = paint(b);
  long inter = 0, uni = 0;
  for (std::size_t i = 0; i < ma.size(); ++i) {
    inter += ma[i] && mb[i];
    uni += ma[i] || mb[i];
  }
  return {inter, uni};
}

double mask_iou(const std::vector<BoundingBox>& a, const std::vector<BoundingBox>& b, int resolution) {
  const auto [inter, uni] = mask_overlap(a, b, resolution);
  return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

QueryDiagnostics diagnose_queries(const FrozenDetector& model, const std::vector<PhaseSample>& samples,
                                  const CategorySet& old_categories, const CostWeights& weights,
                                  int raster_resolution) {
  if (raster_resolution < 64) throw InvariantViolation("raster_resolution", "must be at least 64");
  std::map<int, std::set<int>> related;
  std::map<int, std::pair<long, long>> overlap;
  for (const auto& sample : samples) {
    AnnotationSet targets;
    for (const auto& a : sample.visible)
      if (old_categories.contains(a.category_id)) targets.push_back(a);
    if (targets.empty()) continue;
    const DetectorOutput out = model.forward(sample.scene->image);
    if (static_cast<int>(targets.size()) > out.num_queries()) targets.resize(out.num_queries());
    const auto assignment = hungarian_assign(build_cost_matrix(targets, out, weights));
    std::map<int, std::pair<std::vector<BoundingBox>, std::vector<BoundingBox>>> per_category;
    for (const auto& [gt, query] : assignment.pairs()) {
      const int c = targets[gt].category_id;
      related[c].insert(query);
      per_category[c].first.push_back(out.box(query));
      per_category[c].second.push_back(targets[gt].box);
    }
    for (const auto& [c, boxes] : per_category) {
      const auto [inter, uni] = mask_overlap(boxes.first, boxes.second, raster_resolution);
      overlap[c].first += inter;
      overlap[c].second += uni;
    }
  }

  QueryDiagnostics d;
  std::vector<double> ious;
  for (int c : old_categories) {
    const int count = related.contains(c) ? static_cast<int>(related[c].size()) : 0;
    d.related.per_category[c] = count;
    d.related.total += count;
    if (auto it = overlap.find(c); it != overlap.end() && it->second.second > 0) {
      const double iou = static_cast<double>(it->second.first) / static_cast<double>(it->second.second);
      d.overall_iou.per_category[c] = iou;
      ious.push_back(iou);
    }
  }
  d.overall_iou.mean = nan_mean(ious);
  return d;
}

RelatedQueries related_query_count(const FrozenDetector& model, const std::vector<PhaseSample>& samples,
                                   const CategorySet& old_categories, const CostWeights& weights) {
  return diagnose_queries(model, samples, old_categories, weights).related;
}

OverallIoU overall_iou(const FrozenDetector& model, const std::vector<PhaseSample>& samples,
                       const CategorySet& old_categories, int raster_resolution, const CostWeights& weights) {
  return diagnose_queries(model, samples, old_categories, weights, raster_resolution).overall_iou;
}

}  // namespace iaqd
