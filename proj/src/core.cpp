#include "iaqd/core.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace iaqd {

namespace {

bool in_unit(double v) { return std::isfinite(v) && v >= 0.0 && v <= 1.0; }

std::array<double, 4> corners(const BoundingBox& b) {
  return {b.cx() - 0.5 * b.w(), b.cy() - 0.5 * b.h(), b.cx() + 0.5 * b.w(), b.cy() + 0.5 * b.h()};
}

}  // namespace

BoundingBox::BoundingBox(double cx, double cy, double w, double h) : cx_(cx), cy_(cy), w_(w), h_(h) {
  if (!std::isfinite(cx) || cx < 0.0 || cx > 1.0) throw InvariantViolation("cx", "must lie in [0,1]");
  if (!std::isfinite(cy) || cy < 0.0 || cy > 1.0) throw InvariantViolation("cy", "must lie in [0,1]");
  if (!std::isfinite(w) || w <= 0.0 || w > 1.0) throw InvariantViolation("w", "must lie in (0,1]");
  if (!std::isfinite(h) || h <= 0.0 || h > 1.0) throw InvariantViolation("h", "must lie in (0,1]");
}

std::array<double, 4> BoundingBox::clamped_corners() const noexcept {
  auto c = corners(*this);
  for (auto& v : c) v = std::clamp(v, 0.0, 1.0);
  return c;
}

double box_iou(const BoundingBox& a, const BoundingBox& b) {
  const auto ca = corners(a);
  const auto cb = corners(b);
  const double iw = std::max(0.0, std::min(ca[2], cb[2]) - std::max(ca[0], cb[0]));
  const double ih = std::max(0.0, std::min(ca[3], cb[3]) - std::max(ca[1], cb[1]));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

double box_giou(const BoundingBox& a, const BoundingBox& b) {
  const auto ca = corners(a);
  const auto cb = corners(b);
  const double iw = std::max(0.0, std::min(ca[2], cb[2]) - std::max(ca[0], cb[0]));
  const double ih = std::max(0.0, std::min(ca[3], cb[3]) - std::max(ca[1], cb[1]));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  const double enclosing =
      (std::max(ca[2], cb[2]) - std::min(ca[0], cb[0])) * (std::max(ca[3], cb[3]) - std::min(ca[1], cb[1]));
  return inter / uni - (enclosing - uni) / enclosing;
}

std::string to_string(LabelSource source) {
  return source == LabelSource::ground_truth ? "ground_truth" : "pseudo";
}

LabelSource label_source_from_string(const std::string& text) {
  if (text == "ground_truth") return LabelSource::ground_truth;
  if (text == "pseudo") return LabelSource::pseudo;
  throw InvariantViolation("source", "unknown label source '" + text + "'");
}

Annotation make_annotation(int category_id, const BoundingBox& box, int num_categories, LabelSource source,
                           double confidence) {
  if (category_id < 0 || category_id >= num_categories)
    throw InvalidCategory("category_id " + std::to_string(category_id) + " outside [0," +
                          std::to_string(num_categories) + ")");
  if (!in_unit(confidence)) throw InvariantViolation("confidence", "must lie in [0,1]");
  if (source == LabelSource::ground_truth && confidence != 1.0)
    throw InvariantViolation("confidence", "ground truth carries confidence 1");
  return Annotation{category_id, box, source, confidence};
}

CategorySet categories_of(const AnnotationSet& annotations) {
  CategorySet out;
  for (const auto& a : annotations) out.insert(a.category_id);
  return out;
}

CategoryPartition::CategoryPartition(std::vector<std::vector<int>> subsets, int num_categories)
    : subsets_(std::move(subsets)), num_categories_(num_categories) {
  if (num_categories <= 0) throw InvariantViolation("num_categories", "must be positive");
  if (subsets_.empty()) throw InvariantViolation("subsets", "need at least one phase");
  std::vector<int> seen(num_categories, 0);
  for (const auto& subset : subsets_) {
    if (subset.empty()) throw InvariantViolation("subsets", "phase with no categories");
    for (int c : subset) {
      if (c < 0 || c >= num_categories) throw InvariantViolation("subsets", "category out of range");
      if (seen[c]++) throw InvariantViolation("subsets", "category " + std::to_string(c) + " appears twice");
    }
  }
  if (std::find(seen.begin(), seen.end(), 0) != seen.end())
    throw InvariantViolation("subsets", "union does not cover every category");
}

CategoryPartition CategoryPartition::from_order(const std::vector<int>& order, const std::vector<int>& sizes) {
  const int total = std::accumulate(sizes.begin(), sizes.end(), 0);
  if (total != static_cast<int>(order.size()))
    throw InvariantViolation("partition", "sizes sum to " + std::to_string(total) + " but there are " +
                                              std::to_string(order.size()) + " categories");
  std::vector<std::vector<int>> subsets;
  auto it = order.begin();
  for (int size : sizes) {
    subsets.emplace_back(it, it + size);
    std::sort(subsets.back().begin(), subsets.back().end());
    it += size;
  }
  return CategoryPartition(std::move(subsets), total);
}

CategorySet CategoryPartition::phase_categories(int phase) const {
  if (phase < 1 || phase > num_phases()) throw InvariantViolation("phase", "out of range");
  const auto& s = subsets_[phase - 1];
  return CategorySet(s.begin(), s.end());
}

CategorySet CategoryPartition::old_categories(int phase) const {
  CategorySet out;
  for (int t = 1; t < phase; ++t) out.merge(phase_categories(t));
  return out;
}

CategorySet CategoryPartition::seen_categories(int phase) const {
  CategorySet out = old_categories(phase);
  out.merge(phase_categories(phase));
  return out;
}

std::vector<int> parse_partition_sizes(const std::string& text) {
  std::vector<int> sizes;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, '+')) {
    try {
      std::size_t used = 0;
      const int v = std::stoi(part, &used);
      if (used != part.size() || v <= 0) throw std::invalid_argument(part);
      sizes.push_back(v);
    } catch (const std::exception&) {
      throw InvariantViolation("partition", "cannot parse '" + text + "'");
    }
  }
  if (sizes.empty()) throw InvariantViolation("partition", "empty");
  return sizes;
}

Vector softmax(const Vector& logits) {
  if (!logits.allFinite()) throw InvariantViolation("logits", "must be finite");
  const double peak = logits.maxCoeff();
  Vector p = (logits.array() - peak).exp();
  return p / p.sum();
}

DetectorOutput::DetectorOutput(Matrix logits, Matrix boxes) : logits_(std::move(logits)), boxes_(std::move(boxes)) {
  if (logits_.cols() < 2) throw DimensionError("logits need at least one category plus no-object");
  if (boxes_.cols() != 4 || boxes_.rows() != logits_.rows())
    throw DimensionError("boxes must be N x 4 with N = logits rows");
  if (!logits_.allFinite()) throw InvariantViolation("logits", "must be finite");
  probabilities_.resize(logits_.rows(), logits_.cols());
  for (Eigen::Index i = 0; i < logits_.rows(); ++i) {
    const double peak = logits_.row(i).maxCoeff();
    auto e = (logits_.row(i).array() - peak).exp();
    probabilities_.row(i) = e / e.sum();
  }
}

BoundingBox DetectorOutput::box(int query) const {
  return BoundingBox(boxes_(query, 0), boxes_(query, 1), boxes_(query, 2), boxes_(query, 3));
}

QueryPrediction DetectorOutput::query(int index) const {
  if (index < 0 || index >= num_queries()) throw DimensionError("query index out of range");
  return QueryPrediction{logits_.row(index).transpose(), probabilities_.row(index).transpose(), box(index)};
}

DetectorOutput DetectorOutput::permuted(const std::vector<int>& order) const {
  if (static_cast<int>(order.size()) != num_queries()) throw DimensionError("permutation size mismatch");
  Matrix logits(logits_.rows(), logits_.cols());
  Matrix boxes(boxes_.rows(), 4);
  for (int i = 0; i < num_queries(); ++i) {
    logits.row(i) = logits_.row(order[i]);
    boxes.row(i) = boxes_.row(order[i]);
  }
  return DetectorOutput(std::move(logits), std::move(boxes));
}

MatchAssignment::MatchAssignment(std::vector<std::pair<int, int>> pairs) : pairs_(std::move(pairs)) {
  std::set<int> rows;
  std::set<int> cols;
  for (const auto& [r, c] : pairs_) {
    if (r < 0 || c < 0) throw InvalidAssignment("negative index in assignment");
    if (!rows.insert(r).second) throw InvalidAssignment("gt index " + std::to_string(r) + " assigned twice");
    if (!cols.insert(c).second) throw InvalidAssignment("query index " + std::to_string(c) + " assigned twice");
  }
}

void MatchAssignment::validate(int rows, int cols) const {
  for (const auto& [r, c] : pairs_) {
    if (r >= rows) throw InvalidAssignment("gt index " + std::to_string(r) + " >= " + std::to_string(rows));
    if (c >= cols) throw InvalidAssignment("query index " + std::to_string(c) + " >= " + std::to_string(cols));
  }
}

std::vector<int> MatchAssignment::query_for_rows(int rows) const {
  std::vector<int> out(rows, -1);
  for (const auto& [r, c] : pairs_)
    if (r < rows) out[r] = c;
  return out;
}

ProxyQuerySet::ProxyQuerySet(std::vector<int> indices, int num_queries) : indices_(std::move(indices)) {
  std::sort(indices_.begin(), indices_.end());
  if (std::adjacent_find(indices_.begin(), indices_.end()) != indices_.end())
    throw InvariantViolation("indices", "duplicate query index");
  for (int i : indices_)
    if (i < 0 || i >= num_queries) throw InvariantViolation("indices", "query index out of range");
}

bool ProxyQuerySet::contains(int index) const {
  return std::binary_search(indices_.begin(), indices_.end(), index);
}

LossBreakdown LossBreakdown::combine(double detr_cls, double detr_loc, double iaqd_cls, double iaqd_box,
                                     double lambda1, double lambda2) {
  LossBreakdown b{detr_cls, detr_loc, iaqd_cls, iaqd_box, 0.0, lambda1, lambda2};
  for (double v : {detr_cls, detr_loc, iaqd_cls, iaqd_box})
    if (!std::isfinite(v) || v < 0.0) throw InvariantViolation("loss", "parts must be finite and nonnegative");
  b.total = b.recombined();
  return b;
}

double LossBreakdown::recombined() const noexcept {
  return detr_cls + detr_loc + lambda2 * (lambda1 * iaqd_cls + (1.0 - lambda1) * iaqd_box);
}

std::string to_string(Strategy strategy) {
  switch (strategy) {
    case Strategy::pseudo_only: return "pseudo_only";
    case Strategy::hungarian_kd: return "hungarian_kd";
    case Strategy::iaqd: return "iaqd";
  }
  return "unknown";
}

Strategy strategy_from_string(const std::string& text) {
  if (text == "pseudo_only") return Strategy::pseudo_only;
  if (text == "hungarian_kd") return Strategy::hungarian_kd;
  if (text == "iaqd") return Strategy::iaqd;
  throw InvariantViolation("strategy", "unknown strategy '" + text + "'");
}

std::string to_string(Protocol protocol) { return protocol == Protocol::a ? "a" : "b"; }

Protocol protocol_from_string(const std::string& text) {
  if (text == "a" || text == "A") return Protocol::a;
  if (text == "b" || text == "B") return Protocol::b;
  throw InvariantViolation("protocol", "unknown protocol '" + text + "'");
}

void TrainConfig::validate() const {
  auto unit = [](const char* field, double v) {
    if (!in_unit(v)) throw InvariantViolation(field, "must lie in [0,1]");
  };
  auto positive = [](const char* field, double v) {
    if (!(v > 0)) throw InvariantViolation(field, "must be positive");
  };
  if (schema_version != 1) throw InvariantViolation("schema_version", "unsupported version");
  unit("tau", tau);
  unit("lambda1", lambda1);
  if (!std::isfinite(lambda2) || lambda2 < 0) throw InvariantViolation("lambda2", "must be nonnegative");
  unit("pseudo_threshold_incremental", pseudo_threshold_incremental);
  unit("pseudo_threshold_er", pseudo_threshold_er);
  unit("exemplar_fraction", exemplar_fraction);
  unit("er_new_fraction", er_new_fraction);
  unit("kd_foreground_floor", kd_foreground_floor);
  unit("nms_iou", nms_iou);
  if (epochs_phase_one < 0) throw InvariantViolation("epochs_phase_one", "must be nonnegative");
  if (epochs_incremental < 0) throw InvariantViolation("epochs_incremental", "must be nonnegative");
  if (epochs_er < 0) throw InvariantViolation("epochs_er", "must be nonnegative");
  positive("batch_size", batch_size);
  positive("lr_phase_one", lr_phase_one);
  positive("lr_incremental", lr_incremental);
  positive("lr_er", lr_er);
  if (weight_decay < 0) throw InvariantViolation("weight_decay", "must be nonnegative");
  if (grad_clip < 0) throw InvariantViolation("grad_clip", "must be nonnegative");
  positive("num_queries", num_queries);
  positive("embed_dim", embed_dim);
  positive("decoder_layers", decoder_layers);
  positive("num_heads", num_heads);
  if (embed_dim % num_heads != 0) throw InvariantViolation("num_heads", "must divide embed_dim");
  positive("ffn_dim", ffn_dim);
  if (image_size <= 0 || image_size % 8 != 0) throw InvariantViolation("image_size", "must be a positive multiple of 8");
  positive("num_categories", num_categories);
  positive("num_scenes", num_scenes);
  positive("num_test_scenes", num_test_scenes);
  const auto sizes = parse_partition_sizes(partition);
  if (std::accumulate(sizes.begin(), sizes.end(), 0) != num_categories)
    throw InvariantViolation("partition", "sizes must sum to num_categories");
}

}  // namespace iaqd
