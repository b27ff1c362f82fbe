#include <doctest.h>

#include <map>
#include <set>

#include "iaqd/data.hpp"
#include "support/tempdir.hpp"

using namespace iaqd;
using namespace iaqd::testing;

namespace {

std::set<int> scene_ids(const PhaseDataset& d) {
  std::set<int> ids;
  for (const auto& s : d.samples) ids.insert(s.scene->scene_id);
  return ids;
}

const SceneList& corpus() {
  static const SceneList scenes = generate_dataset(42, 500, 8);
  return scenes;
}

CategoryPartition six_two() { return CategoryPartition::from_order({0, 1, 2, 3, 4, 5, 6, 7}, {6, 2}); }

}  // namespace

TEST_SUITE("data") {
  TEST_CASE("generation is deterministic") {
    const auto a = generate_dataset(5, 60, 6), b = generate_dataset(5, 60, 6), c = generate_dataset(6, 60, 6);
    REQUIRE(a.size() == 60);
    bool differs = false;
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i]->image == b[i]->image);
      CHECK(a[i]->annotations == b[i]->annotations);
      differs = differs || a[i]->annotations != c[i]->annotations;
    }
    CHECK(differs);
  }

  TEST_CASE("scene invariants") {
    for (const auto& s : corpus()) {
      CHECK(s->annotations.size() >= 1);
      CHECK(s->annotations.size() <= 6);
      CHECK(s->image.rows() == 64 * 64);
      CHECK(s->image.minCoeff() >= 0.0);
      CHECK(s->image.maxCoeff() <= 1.0);
      for (std::size_t i = 0; i < s->annotations.size(); ++i) {
        const auto c = s->annotations[i].box.as_array();
        CHECK(c[0] - c[2] / 2 >= -1e-12);
        CHECK(c[0] + c[2] / 2 <= 1.0 + 1e-12);
        CHECK(c[1] - c[3] / 2 >= -1e-12);
        CHECK(c[1] + c[3] / 2 <= 1.0 + 1e-12);
        for (std::size_t j = 0; j < i; ++j) CHECK(box_iou(s->annotations[i].box, s->annotations[j].box) <= 0.3);
      }
    }
  }

  TEST_CASE("category frequencies are within 30% of the mean") {
    std::map<int, int> counts;
    int total = 0;
    for (const auto& s : corpus())
      for (const auto& a : s->annotations) {
        ++counts[a.category_id];
        ++total;
      }
    REQUIRE(counts.size() == 8);
    const double mean = total / 8.0;
    for (const auto& [c, n] : counts) {
      CAPTURE(c);
      CHECK(std::abs(n - mean) <= 0.3 * mean);
    }
  }

  TEST_CASE("generator argument checks") {
    CHECK_THROWS_AS(generate_dataset(1, 49, 8), InvariantViolation);
    CHECK_THROWS_AS(generate_dataset(1, 50, 3), InvariantViolation);
    GeneratorOptions crowded;
    crowded.min_objects = 6;
    crowded.min_extent = 0.9;
    crowded.max_extent = 0.95;
    crowded.max_attempts = 20;
    CHECK_THROWS_AS(generate_dataset(1, 50, 4, crowded), PlacementFailure);
  }

  TEST_CASE("protocol A restricts annotations and overlaps scenes") {
    const auto p = six_two();
    const auto d1 = split_protocol_a(corpus(), p, 1), d2 = split_protocol_a(corpus(), p, 2);
    CHECK(d1.visible_categories == p.phase_categories(1));
    for (const auto* d : {&d1, &d2})
      for (const auto& s : d->samples) {
        CHECK_FALSE(s.visible.empty());
        for (const auto& a : s.visible) CHECK(d->visible_categories.contains(a.category_id));
      }
    std::set<int> both;
    const auto ids1 = scene_ids(d1), ids2 = scene_ids(d2);
    std::set_intersection(ids1.begin(), ids1.end(), ids2.begin(), ids2.end(), std::inserter(both, both.end()));
    CHECK_FALSE(both.empty());
    for (const auto& s : corpus()) {
      const auto cats = categories_of(s->annotations);
      const bool has_new = cats.contains(6) || cats.contains(7);
      CHECK(ids2.contains(s->scene_id) == has_new);
    }
    std::set<int> all = ids1;
    all.insert(ids2.begin(), ids2.end());
    CHECK(all.size() == corpus().size());
  }

  TEST_CASE("protocol B chunks are disjoint, proportional and seeded") {
    const auto p = CategoryPartition::from_order({0, 1, 2, 3, 4, 5, 6, 7}, {4, 2, 2});
    const auto sizes = protocol_b_chunk_sizes(corpus().size(), p);
    CHECK(sizes == std::vector<std::size_t>{250, 125, 125});
    const auto odd = protocol_b_chunk_sizes(101, p);
    CHECK(odd[0] + odd[1] + odd[2] == 101);
    for (int t = 0; t < 3; ++t) CHECK(std::abs(static_cast<double>(odd[t]) - 101.0 * p.subsets()[t].size() / 8) < 1.0);

    std::set<int> seen;
    std::size_t total = 0;
    for (int t = 1; t <= 3; ++t) {
      const auto d = split_protocol_b(corpus(), p, t, 9);
      CHECK(d.samples.size() == sizes[t - 1]);
      for (const auto& s : d.samples) {
        CHECK(seen.insert(s.scene->scene_id).second);
        for (const auto& a : s.visible) CHECK(p.phase_categories(t).contains(a.category_id));
      }
      total += d.samples.size();
      CHECK(scene_ids(d) == scene_ids(split_protocol_b(corpus(), p, t, 9)));
    }
    CHECK(total == corpus().size());
    CHECK(scene_ids(split_protocol_b(corpus(), p, 1, 9)) != scene_ids(split_protocol_b(corpus(), p, 1, 10)));
  }

  TEST_CASE("exemplar budget") {
    CHECK(exemplar_budget(0.10, 500) == 50);
    CHECK(exemplar_budget(0.10, 499) == 49);
    CHECK_THROWS_AS(exemplar_budget(0.0, 500), InvariantViolation);
  }

  TEST_CASE("exemplar buffer respects its budget across phases") {
    const auto p = CategoryPartition::from_order({0, 1, 2, 3, 4, 5, 6, 7}, {4, 2, 2});
    ExemplarBuffer buffer;
    buffer.budget = exemplar_budget(0.10, corpus().size());
    for (int t = 1; t <= 3; ++t) {
      const auto d = split_protocol_a(corpus(), p, t);
      buffer = sample_exemplars(d, buffer, 60 + t);
      CHECK(buffer.entries.size() <= buffer.budget);
      for (const auto& e : buffer.entries) {
        // Retained entries keep the ground truth visible in their own phase.
        AnnotationSet expected;
        for (const auto& a : e.scene->annotations)
          if (p.phase_categories(e.phase).contains(a.category_id)) expected.push_back(a);
        CHECK(e.annotations == expected);
      }
    }
    std::set<int> phases;
    for (const auto& e : buffer.entries) phases.insert(e.phase);
    CHECK(phases.size() == 3);
  }

  TEST_CASE("no eviction while the budget is not exceeded") {
    const auto d = split_protocol_a(corpus(), six_two(), 1);
    ExemplarBuffer buffer;
    buffer.budget = 1000;
    const auto after = sample_exemplars(d, buffer, 1);
    CHECK(after.entries.size() == d.samples.size());
    CHECK(sample_exemplars(d, buffer, 1).entries.size() == after.entries.size());
  }

  TEST_CASE("sample_fraction is seeded and ordered") {
    const auto d = split_protocol_a(corpus(), six_two(), 2);
    const auto a = sample_fraction(d.samples, 0.1, 3), b = sample_fraction(d.samples, 0.1, 3);
    CHECK(a.size() == static_cast<std::size_t>(std::ceil(0.1 * d.samples.size())));
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].scene == b[i].scene);
    for (std::size_t i = 1; i < a.size(); ++i) CHECK(a[i - 1].scene->scene_id < a[i].scene->scene_id);
  }

  TEST_CASE("dataset directory round trip") {
    TempDir dir("dataset");
    const auto scenes = generate_dataset(3, 50, 4);
    const auto m1 = save_dataset(dir / "a", scenes, 3, 4);
    const auto m2 = save_dataset(dir / "b", scenes, 3, 4);
    CHECK(m1.images_checksum == m2.images_checksum);
    CHECK(m1.annotations_checksum == m2.annotations_checksum);
    DatasetManifest m;
    const auto loaded = load_dataset(dir / "a", &m);
    CHECK(m.num_scenes == 50);
    CHECK(m.num_categories == 4);
    REQUIRE(loaded.size() == scenes.size());
    for (std::size_t i = 0; i < scenes.size(); ++i) {
      CHECK(loaded[i]->scene_id == scenes[i]->scene_id);
      CHECK(loaded[i]->image == scenes[i]->image);
      CHECK(loaded[i]->annotations == scenes[i]->annotations);
    }
    CHECK_THROWS_AS(load_dataset(dir / "missing"), FormatError);
  }
}
