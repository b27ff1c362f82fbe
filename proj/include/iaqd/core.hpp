#pragma once

// Domain types shared by every module. All of them validate on construction
// and are immutable afterwards unless noted otherwise.

#include <array>
#include <cstdint>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "iaqd/errors.hpp"

namespace iaqd {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

using CategorySet = std::set<int>;

/// Normalized (cx, cy, w, h) box. Corner form is only produced on demand.
class BoundingBox {
 public:
  BoundingBox() = default;
  BoundingBox(double cx, double cy, double w, double h);

  double cx() const noexcept { return cx_; }
  double cy() const noexcept { return cy_; }
  double w() const noexcept { return w_; }
  double h() const noexcept { return h_; }
  double area() const noexcept { return w_ * h_; }

  /// (x1, y1, x2, y2) clipped to the unit square.
  std::array<double, 4> clamped_corners() const noexcept;
  std::array<double, 4> as_array() const noexcept { return {cx_, cy_, w_, h_}; }

  bool operator==(const BoundingBox&) const = default;

 private:
  double cx_ = 0.5;
  double cy_ = 0.5;
  double w_ = 1.0;
  double h_ = 1.0;
};

double box_iou(const BoundingBox& a, const BoundingBox& b);
double box_giou(const BoundingBox& a, const BoundingBox& b);

enum class LabelSource { ground_truth, pseudo };

std::string to_string(LabelSource source);
LabelSource label_source_from_string(const std::string& text);

struct Annotation {
  int category_id = 0;
  BoundingBox box;
  LabelSource source = LabelSource::ground_truth;
  double confidence = 1.0;

  bool operator==(const Annotation&) const = default;
};

/// Builds a validated annotation; `num_categories` bounds the category id.
Annotation make_annotation(int category_id, const BoundingBox& box, int num_categories,
                           LabelSource source = LabelSource::ground_truth, double confidence = 1.0);

using AnnotationSet = std::vector<Annotation>;

CategorySet categories_of(const AnnotationSet& annotations);

/// Ordered disjoint category subsets C_1..C_T covering {0..C-1}. Phases are 1-based.
class CategoryPartition {
 public:
  CategoryPartition(std::vector<std::vector<int>> subsets, int num_categories);

  /// Splits a category order according to sizes such as "6+2".
  static CategoryPartition from_order(const std::vector<int>& order, const std::vector<int>& sizes);

  int num_phases() const noexcept { return static_cast<int>(subsets_.size()); }
  int num_categories() const noexcept { return num_categories_; }
  const std::vector<std::vector<int>>& subsets() const noexcept { return subsets_; }

  CategorySet phase_categories(int phase) const;
  /// Union of C_1..C_{phase-1}.
  CategorySet old_categories(int phase) const;
  /// Union of C_1..C_phase.
  CategorySet seen_categories(int phase) const;

 private:
  std::vector<std::vector<int>> subsets_;
  int num_categories_;
};

/// Parses "6+2" or "4+2+2" into subset sizes.
std::vector<int> parse_partition_sizes(const std::string& text);

Vector softmax(const Vector& logits);

struct QueryPrediction {
  Vector logits;
  Vector probabilities;
  BoundingBox box;
};

/// The ordered set of N query predictions. Row i is query i.
class DetectorOutput {
 public:
  DetectorOutput() = default;
  /// `logits` is N x (C+1) with the no-object class last; `boxes` is N x 4 in (cx, cy, w, h).
  DetectorOutput(Matrix logits, Matrix boxes);

  int num_queries() const noexcept { return static_cast<int>(logits_.rows()); }
  /// Number of real categories C (excludes the no-object column).
  int num_categories() const noexcept { return static_cast<int>(logits_.cols()) - 1; }
  int no_object_index() const noexcept { return num_categories(); }

  const Matrix& logits() const noexcept { return logits_; }
  const Matrix& probabilities() const noexcept { return probabilities_; }
  const Matrix& boxes() const noexcept { return boxes_; }

  BoundingBox box(int query) const;
  QueryPrediction query(int index) const;

  /// Reorders queries; used by tests exercising matching invariance.
  DetectorOutput permuted(const std::vector<int>& order) const;

 private:
  Matrix logits_;
  Matrix probabilities_;
  Matrix boxes_;
};

/// Injective GT -> query mapping.
class MatchAssignment {
 public:
  MatchAssignment() = default;
  explicit MatchAssignment(std::vector<std::pair<int, int>> pairs);

  const std::vector<std::pair<int, int>>& pairs() const noexcept { return pairs_; }
  std::size_t size() const noexcept { return pairs_.size(); }
  bool empty() const noexcept { return pairs_.empty(); }

  /// Throws InvalidAssignment unless every pair lies in [0,rows) x [0,cols).
  void validate(int rows, int cols) const;
  /// query index matched to each row, -1 when unmatched.
  std::vector<int> query_for_rows(int rows) const;

  bool operator==(const MatchAssignment&) const = default;

 private:
  std::vector<std::pair<int, int>> pairs_;
};

class ProxyQuerySet {
 public:
  ProxyQuerySet() = default;
  ProxyQuerySet(std::vector<int> indices, int num_queries);

  const std::vector<int>& indices() const noexcept { return indices_; }
  std::size_t size() const noexcept { return indices_.size(); }
  bool empty() const noexcept { return indices_.empty(); }
  bool contains(int index) const;

 private:
  std::vector<int> indices_;
};

struct LossBreakdown {
  double detr_cls = 0.0;
  double detr_loc = 0.0;
  double iaqd_cls = 0.0;
  double iaqd_box = 0.0;
  double total = 0.0;
  double lambda1 = 0.5;
  double lambda2 = 1.0;

  /// Builds a breakdown whose total honours the recombination identity.
  static LossBreakdown combine(double detr_cls, double detr_loc, double iaqd_cls, double iaqd_box,
                               double lambda1, double lambda2);
  double recombined() const noexcept;
};

enum class Strategy { pseudo_only, hungarian_kd, iaqd };

std::string to_string(Strategy strategy);
Strategy strategy_from_string(const std::string& text);

enum class Protocol { a, b };

std::string to_string(Protocol protocol);
Protocol protocol_from_string(const std::string& text);

/// Every knob of a run. Defaults reproduce the published hyperparameters where
/// they apply and a desk-scale schedule elsewhere.
struct TrainConfig {
  int schema_version = 1;

  // method
  Strategy strategy = Strategy::iaqd;
  double tau = 0.1;
  double lambda1 = 0.5;
  double lambda2 = 1.0;
  double pseudo_threshold_incremental = 0.4;
  double pseudo_threshold_er = 0.6;
  double exemplar_fraction = 0.10;
  double er_new_fraction = 0.10;
  bool include_no_object_in_iaqd = false;
  double kd_foreground_floor = 0.05;
  double nms_iou = 0.7;
  bool skip_er = false;

  // schedule
  int epochs_phase_one = 150;
  int epochs_incremental = 30;
  int epochs_er = 10;
  int batch_size = 4;
  double lr_phase_one = 1e-3;
  double lr_incremental = 5e-4;
  double lr_er = 5e-5;
  double weight_decay = 1e-4;
  double grad_clip = 1.0;
  std::uint64_t seed = 0;

  // matching / DETR loss
  double cost_class = 1.0;
  double cost_l1 = 5.0;
  double cost_giou = 2.0;
  double no_object_weight = 0.1;

  // model
  int num_queries = 25;
  int embed_dim = 64;
  int decoder_layers = 2;
  int num_heads = 4;
  int ffn_dim = 128;
  int image_size = 64;

  // dataset
  int num_categories = 8;
  int num_scenes = 500;
  int num_test_scenes = 200;
  std::string partition = "6+2";
  Protocol protocol = Protocol::a;
  std::string data_dir;

  /// Throws InvariantViolation naming the first bad field.
  void validate() const;
};

}  // namespace iaqd
