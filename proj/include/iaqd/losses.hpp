#pragma once

// Training objectives. Every loss optionally accumulates its gradient with
// respect to the student's DetectorOutput into an OutputGradient, multiplied
// by `scale`; teacher outputs are always treated as constants.

#include "iaqd/core.hpp"
#include "iaqd/detector.hpp"

namespace iaqd {

struct DetrLossWeights {
  double l1 = 5.0;
  double giou = 2.0;
  double no_object = 0.1;
};

struct DetrLossParts {
  double cls = 0.0;
  double loc = 0.0;
};

/// Set-prediction loss under a fixed GT -> query assignment. Matched queries
/// target their GT category, every other query targets no-object (weighted by
/// `no_object`); cls is the weighted mean cross-entropy. loc sums
/// l1 * |b - b^|_1 + giou * (1 - GIoU) over matched pairs and divides by M.
DetrLossParts detr_loss(const DetectorOutput& output, const AnnotationSet& targets, const MatchAssignment& assignment,
                        const DetrLossWeights& weights, OutputGradient* grad = nullptr, double scale = 1.0);

struct DistillParts {
  double cls = 0.0;    // mean classification distillation term over pairs
  double box = 0.0;    // mean box MSE over pairs
  double value = 0.0;  // lambda1 * cls + (1 - lambda1) * box
  /// (teacher query, student query) pairs that were distilled.
  MatchAssignment pairs;
};

/// Baseline distillation: teacher predictions whose best foreground
/// probability reaches `foreground_floor` are Hungarian-matched to student
/// predictions on CE(p_T, p_S) + |b_T - b_S|_1, then aligned with
/// lambda1 * CE + (1 - lambda1) * MSE averaged over matched pairs.
DistillParts distill_hungarian(const DetectorOutput& teacher, const DetectorOutput& student, double lambda1,
                               double foreground_floor = 0.05, OutputGradient* grad = nullptr, double scale = 1.0);

/// Queries whose largest teacher probability over `old_categories` is >= tau.
ProxyQuerySet select_proxy_queries(const DetectorOutput& teacher, const CategorySet& old_categories, double tau);

/// Index-aligned distillation over the proxy set: query i of the student is
/// aligned with query i of the teacher. The class term is
/// -sum_{c in old} p_T(c) log p_S(c) on the raw (unrenormalized) sub-vectors,
/// the box term is the MSE over all four coordinates.
DistillParts iaqd_loss(const DetectorOutput& teacher, const DetectorOutput& student, const ProxyQuerySet& proxy,
                       const CategorySet& old_categories, double lambda1, bool include_no_object = false,
                       OutputGradient* grad = nullptr, double scale = 1.0);

/// L_total = L_DETR + lambda2 * L_distill.
LossBreakdown total_loss(const DetrLossParts& detr, const DistillParts& distill, double lambda1, double lambda2);

/// GIoU of `pred` against `target` with its gradient w.r.t. pred's (cx, cy, w, h).
double giou_with_grad(const std::array<double, 4>& pred, const std::array<double, 4>& target,
                      std::array<double, 4>* grad);

}  // namespace iaqd
