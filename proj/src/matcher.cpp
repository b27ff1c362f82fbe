#include "iaqd/matcher.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace iaqd {

CostMatrix::CostMatrix(Matrix values) : values_(std::move(values)) {
  if (!values_.allFinite()) throw InvariantViolation("values", "cost entries must be finite");
  if (values_.rows() > values_.cols())
    throw DimensionError("cost matrix has more rows (" + std::to_string(values_.rows()) + ") than columns (" +
                         std::to_string(values_.cols()) + ")");
}

CostMatrix build_cost_matrix(const AnnotationSet& gts, const DetectorOutput& output, const CostWeights& weights) {
  const int m = static_cast<int>(gts.size());
  const int n = output.num_queries();
  if (m > n) throw DimensionError("more targets (" + std::to_string(m) + ") than queries (" + std::to_string(n) + ")");
  Matrix values(m, n);
  for (int i = 0; i < m; ++i) {
    const auto& gt = gts[i];
    if (gt.category_id < 0 || gt.category_id >= output.num_categories())
      throw InvalidCategory("target category " + std::to_string(gt.category_id) + " outside the detector's space");
    const auto t = gt.box.as_array();
    for (int j = 0; j < n; ++j) {
      const BoundingBox pred = output.box(j);
      const auto p = pred.as_array();
      double l1 = 0.0;
      for (int k = 0; k < 4; ++k) l1 += std::abs(t[k] - p[k]);
      values(i, j) = weights.cls * -output.probabilities()(j, gt.category_id) + weights.l1 * l1 +
                     weights.giou * (1.0 - box_giou(gt.box, pred));
    }
  }
  return CostMatrix(std::move(values));
}

MatchAssignment hungarian_assign(const CostMatrix& cost) {
  const int m = cost.rows();
  const int n = cost.cols();
  if (m == 0) return {};
  constexpr double inf = std::numeric_limits<double>::infinity();
  // 1-based potentials; column 0 is the virtual source.
  std::vector<double> u(m + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> row_of(n + 1, 0), way(n + 1, 0);
  std::vector<double> minv(n + 1);
  std::vector<char> used(n + 1);
  for (int i = 1; i <= m; ++i) {
    row_of[0] = i;
    int j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const int i0 = row_of[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[row_of[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (row_of[j0] != 0);
    do {
      const int j1 = way[j0];
      row_of[j0] = row_of[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::pair<int, int>> pairs;
  pairs.reserve(m);
  for (int j = 1; j <= n; ++j)
    if (row_of[j] != 0) pairs.emplace_back(row_of[j] - 1, j - 1);
  std::sort(pairs.begin(), pairs.end());
  return MatchAssignment(std::move(pairs));
}

MatchAssignment brute_force_assign(const CostMatrix& cost) {
  const int m = cost.rows();
  const int n = cost.cols();
  if (m > kBruteForceMaxRows)
    throw DimensionError("brute force limited to " + std::to_string(kBruteForceMaxRows) + " rows");
  if (m == 0) return {};

  std::vector<int> current(m), best;
  std::vector<char> taken(n, 0);
  double best_cost = std::numeric_limits<double>::infinity();

  // Depth-first in increasing column order visits tuples lexicographically,
  // so a strict improvement test keeps the smallest tuple among ties.
  auto recurse = [&](auto&& self, int row) -> void {
    if (row == m) {
      double total = 0.0;
      for (int i = 0; i < m; ++i) total += cost(i, current[i]);
      if (total < best_cost) {
        best_cost = total;
        best = current;
      }
      return;
    }
    for (int j = 0; j < n; ++j) {
      if (taken[j]) continue;
      taken[j] = 1;
      current[row] = j;
      self(self, row + 1);
      taken[j] = 0;
    }
  };
  recurse(recurse, 0);

  std::vector<std::pair<int, int>> pairs;
  for (int i = 0; i < m; ++i) pairs.emplace_back(i, best[i]);
  return MatchAssignment(std::move(pairs));
}

MatchAssignment identity_assign(int count) {
  if (count < 0) throw DimensionError("negative identity size");
  std::vector<std::pair<int, int>> pairs;
  pairs.reserve(count);
  for (int i = 0; i < count; ++i) pairs.emplace_back(i, i);
  return MatchAssignment(std::move(pairs));
}

double assignment_cost(const CostMatrix& cost, const MatchAssignment& assignment) {
  assignment.validate(cost.rows(), cost.cols());
  auto pairs = assignment.pairs();
  std::sort(pairs.begin(), pairs.end());
  double total = 0.0;
  for (const auto& [i, j] : pairs) total += cost(i, j);
  return total;
}

}  // namespace iaqd
