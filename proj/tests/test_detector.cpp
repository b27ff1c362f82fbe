#include <doctest.h>

#include <fstream>

#include "iaqd/detector.hpp"
#include "support/gradcheck.hpp"
#include "support/tempdir.hpp"

using namespace iaqd;
using namespace iaqd::testing;

namespace {

double detr_value(const DetectorOutput& out, const AnnotationSet& targets) {
  const auto a = hungarian_assign(build_cost_matrix(targets, out, {}));
  const auto p = detr_loss(out, targets, a, {});
  return p.cls + p.loc;
}

void one_step(Detector& model, const SyntheticScene& scene, double lr) {
  AdamW opt(model.params(), lr, 0.0);
  model.zero_grad();
  ForwardCache cache;
  const auto out = model.forward(scene.image, cache);
  const auto a = hungarian_assign(build_cost_matrix(scene.annotations, out, {}));
  auto g = OutputGradient::zeros(out.num_queries(), out.num_categories());
  detr_loss(out, scene.annotations, a, {}, &g);
  model.backward(cache, g);
  opt.step(model);
}

}  // namespace

TEST_SUITE("detector") {
  TEST_CASE("forward produces N normalized predictions") {
    const Detector model(micro_spec(), 1);
    const auto out = model.forward(micro_scene().image);
    CHECK(out.num_queries() == 4);
    CHECK(out.num_categories() == 3);
    for (int i = 0; i < 4; ++i) {
      CHECK(out.probabilities().row(i).sum() == doctest::Approx(1.0).epsilon(1e-12));
      CHECK(out.boxes().row(i).minCoeff() > 0.0);
      CHECK(out.boxes().row(i).maxCoeff() < 1.0);
    }
  }

  TEST_CASE("forward is deterministic and seeded") {
    const auto image = micro_scene().image;
    const Detector a(micro_spec(), 5), b(micro_spec(), 5), c(micro_spec(), 6);
    CHECK(a.forward(image).logits() == a.forward(image).logits());
    CHECK(a.forward(image).logits() == b.forward(image).logits());
    CHECK(parameter_checksum(a.params()) == parameter_checksum(b.params()));
    CHECK(parameter_checksum(a.params()) != parameter_checksum(c.params()));
  }

  TEST_CASE("cached and uncached forward agree") {
    const Detector model(micro_spec(), 2);
    const auto image = micro_scene().image;
    ForwardCache cache;
    CHECK(model.forward(image, cache).boxes() == model.forward(image).boxes());
  }

  TEST_CASE("wrong image size is rejected") {
    const Detector model(micro_spec(), 1);
    CHECK_THROWS_AS(model.forward(Matrix::Zero(8 * 8, 3)), DimensionError);
    CHECK_THROWS_AS(model.forward(Matrix::Zero(16 * 16, 1)), DimensionError);
  }

  TEST_CASE("spec validation") {
    auto s = micro_spec();
    s.image_size = 12;
    CHECK_THROWS_AS(s.validate(), InvariantViolation);
    s = micro_spec();
    s.num_heads = 3;
    CHECK_THROWS_AS(s.validate(), InvariantViolation);
  }

  TEST_CASE("snapshot save and load round trip") {
    TempDir dir("snapshot");
    const Detector model(micro_spec(), 9);
    save_snapshot(model.snapshot(3), dir / "m.bin");
    const auto loaded = load_snapshot(dir / "m.bin");
    CHECK(loaded.phase == 3);
    CHECK(loaded.spec == micro_spec());
    CHECK(parameter_checksum(loaded.params) == parameter_checksum(model.params()));
    const auto image = micro_scene().image;
    CHECK(Detector(loaded).forward(image).logits() == model.forward(image).logits());
  }

  TEST_CASE("loading garbage fails with a format error") {
    TempDir dir("badsnap");
    {
      std::ofstream out(dir / "bad.bin");
      out << "not a snapshot";
    }
    CHECK_THROWS_AS(load_snapshot(dir / "bad.bin"), FormatError);
    CHECK_THROWS_AS(load_snapshot(dir / "missing.bin"), FormatError);
  }

  TEST_CASE("init_from copies the teacher exactly") {
    const Detector teacher(micro_spec(), 4);
    const auto snap = teacher.snapshot(1);
    const Detector student = init_from(snap, micro_spec());
    const auto image = micro_scene().image;
    CHECK(student.forward(image).logits() == teacher.forward(image).logits());
    CHECK(student.forward(image).boxes() == teacher.forward(image).boxes());
    auto other = micro_spec();
    other.num_queries = 5;
    CHECK_THROWS_AS(init_from(snap, other), SpecMismatch);
  }

  TEST_CASE("one student step moves the student but not the frozen teacher") {
    const Detector base(micro_spec(), 4);
    const auto snap = base.snapshot(1);
    const FrozenDetector teacher(snap);
    const auto scene = micro_scene();
    const auto before = teacher.forward(scene.image);
    const auto checksum = teacher.checksum();

    Detector student = init_from(snap, micro_spec());
    one_step(student, scene, 1e-2);
    const auto after = student.forward(scene.image);
    CHECK((after.logits() - before.logits()).cwiseAbs().maxCoeff() > 0.0);
    CHECK(teacher.checksum() == checksum);
    CHECK(teacher.forward(scene.image).logits() == before.logits());
  }

  TEST_CASE("frozen handle rejects updates and stays unchanged over 100 forwards") {
    const FrozenDetector frozen(Detector(micro_spec(), 8).snapshot(1));
    const auto checksum = frozen.checksum();
    const auto image = micro_scene().image;
    for (int i = 0; i < 100; ++i) frozen.forward(image);
    CHECK(frozen.checksum() == checksum);
    AdamW opt(frozen.params(), 1e-3, 0.0);
    CHECK_THROWS_AS(opt.step(frozen), FrozenModelError);
  }

  TEST_CASE("a few optimizer steps reduce the DETR loss on one image") {
    Detector model(micro_spec(), 3);
    const auto scene = micro_scene();
    const double start = detr_value(model.forward(scene.image), scene.annotations);
    AdamW opt(model.params(), 1e-2, 0.0);
    for (int step = 0; step < 30; ++step) {
      model.zero_grad();
      ForwardCache cache;
      const auto out = model.forward(scene.image, cache);
      const auto a = hungarian_assign(build_cost_matrix(scene.annotations, out, {}));
      auto g = OutputGradient::zeros(out.num_queries(), out.num_categories());
      detr_loss(out, scene.annotations, a, {}, &g);
      model.backward(cache, g);
      opt.step(model);
    }
    CHECK(detr_value(model.forward(scene.image), scene.annotations) < start);
  }

  TEST_CASE("parameter gradients match central finite differences for every loss") {
    const auto scene = micro_scene();
    Detector student(micro_spec(), 3);
    const Detector teacher(micro_spec(), 21);
    const auto losses = micro_losses(student.forward(scene.image), teacher.forward(scene.image), scene.annotations);
    for (const auto& [name, loss] : losses) {
      CAPTURE(name);
      const auto r = check_parameter_gradient(student, scene.image, loss);
      CAPTURE(r.worst);
      CHECK(r.checked == student.params().count());
      CHECK(r.max_rel_error < 1e-4);
    }
  }
}
