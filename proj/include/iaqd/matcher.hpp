#pragma once

#include "iaqd/core.hpp"

namespace iaqd {

struct CostWeights {
  double cls = 1.0;
  double l1 = 5.0;
  double giou = 2.0;
};

/// M x N matching cost, row i = ground truth i, column j = query j.
class CostMatrix {
 public:
  explicit CostMatrix(Matrix values);

  int rows() const noexcept { return static_cast<int>(values_.rows()); }
  int cols() const noexcept { return static_cast<int>(values_.cols()); }
  double operator()(int i, int j) const { return values_(i, j); }
  const Matrix& values() const noexcept { return values_; }

 private:
  Matrix values_;
};

/// Entry (i,j) = w_cls * (-p_j(c_i)) + w_l1 * |b_i - b_j|_1 + w_giou * (1 - GIoU(b_i, b_j)).
CostMatrix build_cost_matrix(const AnnotationSet& gts, const DetectorOutput& output, const CostWeights& weights);

/// Minimum-cost assignment of every row (Kuhn-Munkres with potentials, O(M^2 N)).
MatchAssignment hungarian_assign(const CostMatrix& cost);

/// Exhaustive search over injections; ties go to the lexicographically smallest query tuple.
MatchAssignment brute_force_assign(const CostMatrix& cost);

/// Pairs (i, i) for i < count.
MatchAssignment identity_assign(int count);

/// Sum of cost(i, sigma_i) accumulated in row order.
double assignment_cost(const CostMatrix& cost, const MatchAssignment& assignment);

inline constexpr int kBruteForceMaxRows = 8;

}  // namespace iaqd
