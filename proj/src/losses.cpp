#include "iaqd/losses.hpp"

#include <algorithm>
#include <cmath>

#include "iaqd/matcher.hpp"

namespace iaqd {

namespace {

Vector log_softmax_row(const Matrix& logits, int row) {
  const auto z = logits.row(row).transpose();
  const double peak = z.maxCoeff();
  const double lse = peak + std::log((z.array() - peak).exp().sum());
  return z.array() - lse;
}

void check_same_shape(const DetectorOutput& teacher, const DetectorOutput& student) {
  if (teacher.num_queries() != student.num_queries() || teacher.num_categories() != student.num_categories())
    throw DimensionError("teacher and student outputs differ in shape");
}

double sign(double v) { return (v > 0.0) - (v < 0.0); }

}  // namespace

double giou_with_grad(const std::array<double, 4>& pred, const std::array<double, 4>& target,
                      std::array<double, 4>* grad) {
  const double x1 = pred[0] - 0.5 * pred[2], x2 = pred[0] + 0.5 * pred[2];
  const double y1 = pred[1] - 0.5 * pred[3], y2 = pred[1] + 0.5 * pred[3];
  const double tx1 = target[0] - 0.5 * target[2], tx2 = target[0] + 0.5 * target[2];
  const double ty1 = target[1] - 0.5 * target[3], ty2 = target[1] + 0.5 * target[3];

  const double iw_raw = std::min(x2, tx2) - std::max(x1, tx1);
  const double ih_raw = std::min(y2, ty2) - std::max(y1, ty1);
  const double iw = std::max(0.0, iw_raw), ih = std::max(0.0, ih_raw);
  const double inter = iw * ih;
  const double area_p = (x2 - x1) * (y2 - y1);
  const double area_t = (tx2 - tx1) * (ty2 - ty1);
  const double uni = area_p + area_t - inter;
  const double ew = std::max(x2, tx2) - std::min(x1, tx1);
  const double eh = std::max(y2, ty2) - std::min(y1, ty1);
  const double enclosing = ew * eh;
  const double giou = inter / uni - 1.0 + uni / enclosing;
  if (!grad) return giou;

  // Derivatives w.r.t. corners (x1, y1, x2, y2) of the prediction.
  std::array<double, 4> d_inter{0, 0, 0, 0};
  if (iw_raw > 0.0 && ih_raw > 0.0) {
    if (x1 > tx1) d_inter[0] = -ih;
    if (x2 < tx2) d_inter[2] = ih;
    if (y1 > ty1) d_inter[1] = -iw;
    if (y2 < ty2) d_inter[3] = iw;
  }
  const std::array<double, 4> d_area{-(y2 - y1), -(x2 - x1), (y2 - y1), (x2 - x1)};
  std::array<double, 4> d_enc{0, 0, 0, 0};
  if (x1 < tx1) d_enc[0] = -eh;
  if (x2 > tx2) d_enc[2] = eh;
  if (y1 < ty1) d_enc[1] = -ew;
  if (y2 > ty2) d_enc[3] = ew;

  std::array<double, 4> d_corner{};
  for (int k = 0; k < 4; ++k) {
    const double d_uni = d_area[k] - d_inter[k];
    const double d_iou = (d_inter[k] * uni - inter * d_uni) / (uni * uni);
    const double d_ratio = (d_uni * enclosing - uni * d_enc[k]) / (enclosing * enclosing);
    d_corner[k] = d_iou + d_ratio;
  }
  (*grad)[0] = d_corner[0] + d_corner[2];
  (*grad)[1] = d_corner[1] + d_corner[3];
  (*grad)[2] = 0.5 * (d_corner[2] - d_corner[0]);
  (*grad)[3] = 0.5 * (d_corner[3] - d_corner[1]);
  return giou;
}

DetrLossParts detr_loss(const DetectorOutput& output, const AnnotationSet& targets, const MatchAssignment& assignment,
                        const DetrLossWeights& weights, OutputGradient* grad, double scale) {
  const int n = output.num_queries();
  const int m = static_cast<int>(targets.size());
  assignment.validate(m, n);
  if (static_cast<int>(assignment.size()) != m)
    throw InvalidAssignment("assignment must cover every target (" + std::to_string(assignment.size()) + " of " +
                            std::to_string(m) + ")");
  const int no_object = output.no_object_index();

  std::vector<int> target_class(n, no_object);
  std::vector<double> class_weight(n, weights.no_object);
  for (const auto& [gt, query] : assignment.pairs()) {
    const int c = targets[gt].category_id;
    if (c < 0 || c >= output.num_categories()) throw InvalidCategory("target category out of range");
    target_class[query] = c;
    class_weight[query] = 1.0;
  }

  DetrLossParts parts;
  double weight_sum = 0.0;
  for (int j = 0; j < n; ++j) {
    const Vector logp = log_softmax_row(output.logits(), j);
    parts.cls -= class_weight[j] * logp(target_class[j]);
    weight_sum += class_weight[j];
  }
  parts.cls /= weight_sum;
  if (grad) {
    for (int j = 0; j < n; ++j) {
      const double w = scale * class_weight[j] / weight_sum;
      grad->logits.row(j) += w * output.probabilities().row(j);
      grad->logits(j, target_class[j]) -= w;
    }
  }

  if (m == 0) return parts;
  for (const auto& [gt, query] : assignment.pairs()) {
    const auto t = targets[gt].box.as_array();
    const std::array<double, 4> p{output.boxes()(query, 0), output.boxes()(query, 1), output.boxes()(query, 2),
                                  output.boxes()(query, 3)};
    std::array<double, 4> dgiou{};
    const double giou = giou_with_grad(p, t, grad ? &dgiou : nullptr);
    double l1 = 0.0;
    for (int k = 0; k < 4; ++k) l1 += std::abs(p[k] - t[k]);
    parts.loc += weights.l1 * l1 + weights.giou * (1.0 - giou);
    if (grad) {
      for (int k = 0; k < 4; ++k)
        grad->boxes(query, k) += scale * (weights.l1 * sign(p[k] - t[k]) - weights.giou * dgiou[k]) / m;
    }
  }
  parts.loc /= m;
  return parts;
}

DistillParts distill_hungarian(const DetectorOutput& teacher, const DetectorOutput& student, double lambda1,
                               double foreground_floor, OutputGradient* grad, double scale) {
  check_same_shape(teacher, student);
  const int n = teacher.num_queries();
  const int c = teacher.num_categories();

  std::vector<int> rows;
  for (int i = 0; i < n; ++i)
    if (teacher.probabilities().row(i).head(c).maxCoeff() >= foreground_floor) rows.push_back(i);
  DistillParts out;
  if (rows.empty()) return out;

  std::vector<Vector> student_logp(n);
  for (int j = 0; j < n; ++j) student_logp[j] = log_softmax_row(student.logits(), j);

  auto cross_entropy = [&](int t, int s) { return -teacher.probabilities().row(t).dot(student_logp[s]); };

  Matrix cost(rows.size(), n);
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (int j = 0; j < n; ++j)
      cost(r, j) = cross_entropy(rows[r], j) + (teacher.boxes().row(rows[r]) - student.boxes().row(j)).cwiseAbs().sum();
  const MatchAssignment matched = hungarian_assign(CostMatrix(std::move(cost)));

  std::vector<std::pair<int, int>> pairs;
  const double k = static_cast<double>(matched.size());
  for (const auto& [r, s] : matched.pairs()) {
    const int t = rows[r];
    pairs.emplace_back(t, s);
    out.cls += cross_entropy(t, s);
    const auto diff = (student.boxes().row(s) - teacher.boxes().row(t)).eval();
    out.box += diff.squaredNorm() / 4.0;
    if (grad) {
      grad->logits.row(s) += scale * lambda1 / k * (student.probabilities().row(s) - teacher.probabilities().row(t));
      grad->boxes.row(s) += scale * (1.0 - lambda1) / k * 0.5 * diff;
    }
  }
  out.cls /= k;
  out.box /= k;
  out.value = lambda1 * out.cls + (1.0 - lambda1) * out.box;
  out.pairs = MatchAssignment(std::move(pairs));
  return out;
}

ProxyQuerySet select_proxy_queries(const DetectorOutput& teacher, const CategorySet& old_categories, double tau) {
  if (old_categories.empty()) throw InvariantViolation("old_categories", "proxy selection needs old categories");
  if (!(tau >= 0.0 && tau <= 1.0)) throw InvariantViolation("tau", "must lie in [0,1]");
  for (int c : old_categories)
    if (c < 0 || c >= teacher.num_categories()) throw InvalidCategory("old category out of range");
  std::vector<int> selected;
  for (int n = 0; n < teacher.num_queries(); ++n) {
    double best = 0.0;
    for (int c : old_categories) best = std::max(best, teacher.probabilities()(n, c));
    if (best >= tau) selected.push_back(n);
  }
  return ProxyQuerySet(std::move(selected), teacher.num_queries());
}

DistillParts iaqd_loss(const DetectorOutput& teacher, const DetectorOutput& student, const ProxyQuerySet& proxy,
                       const CategorySet& old_categories, double lambda1, bool include_no_object,
                       OutputGradient* grad, double scale) {
  check_same_shape(teacher, student);
  const int n = teacher.num_queries();
  for (int i : proxy.indices())
    if (i < 0 || i >= n) throw DimensionError("proxy index " + std::to_string(i) + " out of range");
  DistillParts out;
  if (proxy.empty()) return out;

  std::vector<int> distilled(old_categories.begin(), old_categories.end());
  for (int c : distilled)
    if (c < 0 || c >= teacher.num_categories()) throw InvalidCategory("old category out of range");
  if (include_no_object) distilled.push_back(teacher.no_object_index());

  const double k = static_cast<double>(proxy.size());
  std::vector<std::pair<int, int>> pairs;
  for (int i : proxy.indices()) {
    pairs.emplace_back(i, i);
    const Vector logp = log_softmax_row(student.logits(), i);
    double target_mass = 0.0;
    for (int c : distilled) {
      out.cls -= teacher.probabilities()(i, c) * logp(c);
      target_mass += teacher.probabilities()(i, c);
    }
    const auto diff = (student.boxes().row(i) - teacher.boxes().row(i)).eval();
    out.box += diff.squaredNorm() / 4.0;
    if (grad) {
      const double w = scale * lambda1 / k;
      grad->logits.row(i) += w * target_mass * student.probabilities().row(i);
      for (int c : distilled) grad->logits(i, c) -= w * teacher.probabilities()(i, c);
      grad->boxes.row(i) += scale * (1.0 - lambda1) / k * 0.5 * diff;
    }
  }
  out.cls /= k;
  out.box /= k;
  out.value = lambda1 * out.cls + (1.0 - lambda1) * out.box;
  out.pairs = MatchAssignment(std::move(pairs));
  return out;
}

LossBreakdown total_loss(const DetrLossParts& detr, const DistillParts& distill, double lambda1, double lambda2) {
  return LossBreakdown::combine(detr.cls, detr.loc, distill.cls, distill.box, lambda1, lambda2);
}

}  // namespace iaqd
