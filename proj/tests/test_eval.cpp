#include <doctest.h>

#include <map>
#include <random>

#include "iaqd/eval.hpp"
#include "support/ap_oracle.hpp"
#include "support/gradcheck.hpp"

using namespace iaqd;
using namespace iaqd::testing;

namespace {

const BoundingBox kGtBox(0.5, 0.5, 0.4, 0.4);
const BoundingBox kFarBox(0.1, 0.1, 0.1, 0.1);

GroundTruthIndex single_gt() { return {{0, {make_annotation(0, kGtBox, 1)}}}; }

CategorySet range(int n) {
  CategorySet s;
  for (int i = 0; i < n; ++i) s.insert(i);
  return s;
}

}  // namespace

TEST_SUITE("eval") {
  TEST_CASE("one exact detection has AP 1 at every threshold") {
    const auto r = compute_ap({{0, 0, kGtBox, 0.9}}, single_gt(), {0}, {0}, {});
    CHECK(r.ap == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(r.ap50 == doctest::Approx(1.0));
    CHECK(r.ap75 == doctest::Approx(1.0));
    CHECK(r.ap_old == doctest::Approx(1.0));
    CHECK(std::isnan(r.ap_new));
  }

  TEST_CASE("no detections gives AP 0") {
    const auto r = compute_ap({}, single_gt(), {0}, {0}, {});
    CHECK(r.ap == 0.0);
  }

  TEST_CASE("false positive above a true positive gives AP 0.5") {
    const std::vector<DetectionRecord> dets = {{0, 0, kFarBox, 0.9}, {0, 0, kGtBox, 0.8}};
    const auto curve = precision_recall(dets, single_gt(), 0, 0.5);
    CHECK(curve.precision == std::vector<double>{0.0, 0.5});
    CHECK(curve.recall == std::vector<double>{0.0, 1.0});
    CHECK(interpolated_ap(curve) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(oracle_ap(dets, single_gt(), 0, 0.5) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(compute_ap(dets, single_gt(), {0}, {0}, {}).ap == doctest::Approx(0.5).epsilon(1e-12));
  }

  TEST_CASE("matching threshold is inclusive") {
    // IoU exactly 0.5: width 0.4 box against a width 0.2 box sharing its centre and height.
    const BoundingBox half(0.5, 0.5, 0.2, 0.4);
    REQUIRE(box_iou(half, kGtBox) == doctest::Approx(0.5));
    const auto curve = precision_recall({{0, 0, half, 0.7}}, single_gt(), 0, box_iou(half, kGtBox));
    CHECK(curve.recall.back() == 1.0);
  }

  TEST_CASE("detections of unevaluated categories are rejected") {
    CHECK_THROWS_AS(compute_ap({{0, 3, kGtBox, 0.5}}, single_gt(), {0}, {0}, {}), InvalidCategory);
    CHECK_THROWS_AS(compute_ap({}, single_gt(), {0}, {0}, {}, {0.0}), InvariantViolation);
  }

  TEST_CASE("evaluator agrees with the reference on random micro scenes") {
    std::mt19937_64 rng(77);
    for (int trial = 0; trial < 20; ++trial) {
      const auto m = random_case(rng, 4, 3);
      const auto report = compute_ap(m.detections, m.gts, range(3), {0, 1}, {2});
      CHECK(report.ap == doctest::Approx(oracle_mean_ap(m.detections, m.gts, range(3), coco_iou_thresholds()))
                             .epsilon(1e-9));
      for (const auto& [c, cat] : report.per_category) {
        if (std::isnan(cat.ap50)) continue;
        CHECK(std::abs(cat.ap50 - oracle_ap(m.detections, m.gts, c, 0.5)) < 1e-6);
        CHECK(std::abs(cat.ap75 - oracle_ap(m.detections, m.gts, c, 0.75)) < 1e-6);
      }
    }
  }

  TEST_CASE("duplicated detections never increase AP") {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 30; ++trial) {
      const auto m = random_case(rng, 3, 2);
      const double base = compute_ap(m.detections, m.gts, range(2), {}, {}).ap;
      auto dup = m.detections;
      dup.insert(dup.end(), m.detections.begin(), m.detections.end());
      CHECK(compute_ap(dup, m.gts, range(2), {}, {}).ap <= base + 1e-12);
    }
  }

  TEST_CASE("removing a false positive never decreases AP") {
    std::mt19937_64 rng(6);
    int removed = 0;
    for (int trial = 0; trial < 30; ++trial) {
      const auto m = random_case(rng, 3, 2);
      for (std::size_t k = 0; k < m.detections.size(); ++k) {
        const auto& d = m.detections[k];
        // A detection overlapping no GT of its category is a false positive at every threshold.
        bool overlaps = false;
        if (auto it = m.gts.find(d.scene_id); it != m.gts.end())
          for (const auto& g : it->second) overlaps = overlaps || (g.category_id == d.category_id && box_iou(g.box, d.box) > 0.0);
        if (overlaps) continue;
        auto fewer = m.detections;
        fewer.erase(fewer.begin() + static_cast<std::ptrdiff_t>(k));
        CHECK(compute_ap(fewer, m.gts, range(2), {}, {}).ap >= compute_ap(m.detections, m.gts, range(2), {}, {}).ap - 1e-12);
        ++removed;
      }
    }
    CHECK(removed > 0);
  }

  TEST_CASE("area ranges follow the scaled COCO cutoffs") {
    const BoundingBox small(0.5, 0.5, 0.04, 0.04), large(0.5, 0.5, 0.5, 0.5);
    CHECK(small.area() < kSmallAreaMax);
    CHECK(large.area() >= kMediumAreaMax);
    const GroundTruthIndex gts = {{0, {make_annotation(0, small, 1), make_annotation(0, large, 1)}}};
    const auto r = compute_ap({{0, 0, large, 0.9}}, gts, {0}, {0}, {});
    CHECK(r.ap_large == doctest::Approx(1.0));
    CHECK(r.ap_small == 0.0);
    CHECK(std::isnan(r.ap_medium));
  }

  TEST_CASE("detections_from_output takes the argmax over evaluated categories") {
    Matrix logits(2, 4), boxes(2, 4);
    logits << 0.0, 3.0, 1.0, 5.0, 2.0, 0.0, 1.0, 0.0;
    boxes << 0.5, 0.5, 0.2, 0.2, 0.3, 0.3, 0.1, 0.1;
    const DetectorOutput out(logits, boxes);
    const auto dets = detections_from_output(out, 4, {0, 2});
    REQUIRE(dets.size() == 2);
    CHECK(dets[0].category_id == 2);
    CHECK(dets[0].confidence == doctest::Approx(out.probabilities()(0, 2)));
    CHECK(dets[1].category_id == 0);
    CHECK(dets[1].scene_id == 4);
  }

  TEST_CASE("match churn") {
    std::vector<MatchRecord> identity, mixed;
    for (long step = 0; step < 10; ++step)
      for (int q : {0, 2, 3}) identity.push_back({step, 0, q, q});
    CHECK(match_churn(identity, 5) == std::vector<int>{1, 0, 1, 1, 0});
    mixed = {{0, 0, 1, 4}, {1, 0, 1, 2}, {2, 1, 1, 4}, {2, 1, 0, 0}};
    CHECK(match_churn(mixed, 3) == std::vector<int>{1, 2, 0});
    CHECK(churn_histogram(mixed, 1) == std::map<int, long>{{2, 1}, {4, 2}});
    CHECK_THROWS_AS(match_churn({{0, 0, 7, 7}}, 3), DimensionError);
  }

  TEST_CASE("mask IoU matches rectangle algebra") {
    const BoundingBox gt(0.5, 0.5, 0.5, 0.5), shifted(0.75, 0.5, 0.5, 0.5);
    const double closed = (0.25 * 0.5) / (0.5 * 0.5 * 2 - 0.25 * 0.5);
    CHECK(closed == doctest::Approx(1.0 / 3.0));
    for (int res : {64, 100, 256, 333}) {
      CAPTURE(res);
      CHECK(std::abs(mask_iou({shifted}, {gt}, res) - closed) <= 2.0 / res);
    }
    CHECK(mask_iou({gt}, {gt}, 256) == 1.0);
    CHECK(mask_iou({BoundingBox(0.2, 0.2, 0.2, 0.2)}, {BoundingBox(0.8, 0.8, 0.2, 0.2)}, 256) == 0.0);
    // Unions: two halves cover the whole box.
    CHECK(mask_iou({BoundingBox(0.375, 0.5, 0.25, 0.5), BoundingBox(0.625, 0.5, 0.25, 0.5)}, {gt}, 256) == 1.0);
  }

  TEST_CASE("mask IoU converges to the exact box IoU as the raster is refined") {
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> u(0.2, 0.8), s(0.05, 0.35);
    std::map<int, double> mean_error;
    int overlapping = 0;
    for (int trial = 0; trial < 200; ++trial) {
      const BoundingBox a(u(rng), u(rng), s(rng), s(rng)), b(u(rng), u(rng), s(rng), s(rng));
      const double exact = box_iou(a, b);
      if (exact <= 0.0) continue;
      ++overlapping;
      const double uni = a.w() * a.h() + b.w() * b.h() - exact / (1.0 + exact) * (a.w() * a.h() + b.w() * b.h());
      const double perimeter = a.w() + a.h() + b.w() + b.h();
      for (int res : {64, 256, 1024}) {
        const double err = std::abs(mask_iou({a}, {b}, res) - exact);
        // Each box edge moves by at most one cell.
        CHECK(err <= 4.0 * perimeter / (res * uni));
        mean_error[res] += err;
      }
    }
    REQUIRE(overlapping > 20);
    CHECK(mean_error[256] < mean_error[64] / 2);
    CHECK(mean_error[1024] < mean_error[256] / 2);
  }

  TEST_CASE("diagnostics on a micro model") {
    const auto scene = std::make_shared<SyntheticScene>(micro_scene());
    const FrozenDetector model(Detector(micro_spec(), 2).snapshot(1));
    std::vector<PhaseSample> samples = {{scene, scene->annotations}};
    const auto d = diagnose_queries(model, samples, {0, 2});
    CHECK(d.related.total == 2);
    CHECK(d.related.per_category.at(0) == 1);
    CHECK(d.related.per_category.at(2) == 1);
    CHECK(d.overall_iou.mean >= 0.0);
    CHECK(d.overall_iou.mean <= 1.0);
    CHECK(related_query_count(model, samples, {1}).total == 0);
    CHECK(std::isnan(overall_iou(model, samples, {1}).mean));
    CHECK_THROWS_AS(diagnose_queries(model, samples, {0}, {}, 32), InvariantViolation);
  }
}
