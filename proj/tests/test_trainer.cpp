#include <doctest.h>

#include <fstream>
#include <sstream>

#include "iaqd/config.hpp"
#include "iaqd/trainer.hpp"
#include "support/tempdir.hpp"

using namespace iaqd;
using namespace iaqd::testing;

namespace {

TrainConfig micro_config() {
  TrainConfig c;
  c.num_categories = 6;
  c.partition = "4+2";
  c.num_scenes = 60;
  c.num_test_scenes = 50;
  c.image_size = 32;
  c.num_queries = 8;
  c.embed_dim = 16;
  c.num_heads = 2;
  c.ffn_dim = 32;
  c.epochs_phase_one = 2;
  c.epochs_incremental = 2;
  c.epochs_er = 1;
  c.batch_size = 4;
  c.lr_phase_one = 1e-3;
  c.lr_incremental = 1e-3;
  c.lr_er = 5e-4;
  c.seed = 3;
  return c;
}

PhaseDataset first_n(PhaseDataset d, std::size_t n) {
  if (d.samples.size() > n) d.samples.resize(n);
  return d;
}

double epoch_mean(const TrainLog& log, int epoch) {
  double sum = 0.0;
  int n = 0;
  for (const auto& s : log.steps)
    if (s.epoch == epoch) {
      sum += s.loss.detr_cls + s.loss.detr_loc;
      ++n;
    }
  return sum / n;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Phase-1 snapshot shared by the incremental-stage tests.
const ModelSnapshot& micro_teacher() {
  static const ModelSnapshot snap = [] {
    auto c = micro_config();
    c.epochs_phase_one = 4;
    const auto data = prepare_experiment_data(c);
    return train_phase_one(c, phase_dataset(c, data, 1));
  }();
  return snap;
}

}  // namespace

TEST_SUITE("trainer") {
  TEST_CASE("phase-one micro run lowers the DETR loss and logs every step") {
    const auto c = micro_config();
    const auto data = prepare_experiment_data(c);
    const auto d = first_n(phase_dataset(c, data, 1), 20);
    TrainLog log;
    train_phase_one(c, d, &log);
    CHECK(log.steps.size() == 2 * 5);
    CHECK(epoch_mean(log, 1) < epoch_mean(log, 0));
    for (const auto& s : log.steps) {
      CHECK(s.stage == Stage::phase_one);
      CHECK(s.loss.total == s.loss.recombined());
      CHECK(s.loss.iaqd_cls == 0.0);
    }
    CHECK(log.matches.empty());
  }

  TEST_CASE("phase-one training is deterministic") {
    const auto c = micro_config();
    const auto data = prepare_experiment_data(c);
    const auto d = first_n(phase_dataset(c, data, 1), 20);
    CHECK(parameter_checksum(train_phase_one(c, d).params) == parameter_checksum(train_phase_one(c, d).params));
    auto other = c;
    other.seed = 4;
    CHECK(parameter_checksum(train_phase_one(other, d).params) != parameter_checksum(train_phase_one(c, d).params));
  }

  TEST_CASE("phase-one training refuses later-phase data") {
    const auto c = micro_config();
    const auto data = prepare_experiment_data(c);
    CHECK_THROWS_AS(train_phase_one(c, phase_dataset(c, data, 2)), InvariantViolation);
  }

  TEST_CASE("snapshot reload gives identical metrics") {
    TempDir dir("reload");
    const auto c = micro_config();
    const auto data = prepare_experiment_data(c);
    save_snapshot(micro_teacher(), dir / "p1.bin");
    const auto loaded = load_snapshot(dir / "p1.bin");
    const auto cats = data.partition.seen_categories(1);
    const auto a = report_to_json(evaluate_model(FrozenDetector(micro_teacher()), data.test, cats, {}, cats));
    const auto b = report_to_json(evaluate_model(FrozenDetector(loaded), data.test, cats, {}, cats));
    CHECK(a.dump() == b.dump());
  }

  TEST_CASE("experiment data follows the seeded category order") {
    const auto c = micro_config();
    const auto a = prepare_experiment_data(c), b = prepare_experiment_data(c);
    CHECK(a.category_order == b.category_order);
    std::vector<int> sorted = a.category_order;
    std::sort(sorted.begin(), sorted.end());
    CHECK(sorted == std::vector<int>{0, 1, 2, 3, 4, 5});
    CHECK(a.partition.phase_categories(1) ==
          CategorySet(a.category_order.begin(), a.category_order.begin() + 4));
    CHECK(a.train.size() == 60);
    CHECK(a.test.size() == 50);
    CHECK(a.test.front()->scene_id == 60);
  }

  TEST_CASE("iaqd pairs every student query with its own teacher query") {
    auto c = micro_config();
    c.strategy = Strategy::iaqd;
    const auto data = prepare_experiment_data(c);
    const auto d = phase_dataset(c, data, 2);
    TrainLog log;
    train_incremental(c, micro_teacher(), d, data.partition.old_categories(2), &log);
    REQUIRE_FALSE(log.matches.empty());
    for (const auto& m : log.matches) CHECK(m.student == m.teacher);
    for (int n : match_churn(log.matches, c.num_queries)) CHECK(n <= 1);
    bool distilled = false;
    for (const auto& s : log.steps) {
      CHECK(s.stage == Stage::incremental);
      distilled = distilled || s.loss.iaqd_cls > 0.0;
    }
    CHECK(distilled);
  }

  TEST_CASE("hungarian_kd pairs some student query with several teacher queries") {
    auto c = micro_config();
    c.strategy = Strategy::hungarian_kd;
    c.epochs_phase_one = 20;
    c.epochs_incremental = 6;
    const auto data = prepare_experiment_data(c);
    const auto teacher = train_phase_one(c, phase_dataset(c, data, 1));
    TrainLog log;
    train_incremental(c, teacher, phase_dataset(c, data, 2), data.partition.old_categories(2), &log);
    const auto churn = match_churn(log.matches, c.num_queries);
    CHECK(*std::max_element(churn.begin(), churn.end()) >= 2);
  }

  TEST_CASE("iaqd without proxies trains exactly like pseudo_only") {
    auto c = micro_config();
    const auto data = prepare_experiment_data(c);
    const auto d = phase_dataset(c, data, 2);
    c.strategy = Strategy::pseudo_only;
    TrainLog plain_log;
    const auto plain = train_incremental(c, micro_teacher(), d, data.partition.old_categories(2), &plain_log);
    c.strategy = Strategy::iaqd;
    c.tau = 1.0;
    TrainLog iaqd_log;
    const auto iaqd = train_incremental(c, micro_teacher(), d, data.partition.old_categories(2), &iaqd_log);
    CHECK(iaqd_log.matches.empty());
    CHECK(parameter_checksum(plain.params) == parameter_checksum(iaqd.params));
    REQUIRE(plain_log.steps.size() == iaqd_log.steps.size());
    for (std::size_t i = 0; i < plain_log.steps.size(); ++i)
      CHECK(plain_log.steps[i].loss.total == iaqd_log.steps[i].loss.total);
  }

  TEST_CASE("incremental stage leaves the teacher untouched") {
    auto c = micro_config();
    const auto data = prepare_experiment_data(c);
    const auto before = parameter_checksum(micro_teacher().params);
    const auto student =
        train_incremental(c, micro_teacher(), phase_dataset(c, data, 2), data.partition.old_categories(2));
    CHECK(parameter_checksum(micro_teacher().params) == before);
    CHECK(parameter_checksum(student.params) != before);
    CHECK(student.phase == 2);
  }

  TEST_CASE("ER realignment keeps ground truth and the ER stage has no distillation terms") {
    auto c = micro_config();
    const auto data = prepare_experiment_data(c);
    const auto& p = data.partition;
    ExemplarBuffer buffer{exemplar_budget(c.exemplar_fraction, data.train.size()), {}};
    buffer = sample_exemplars(phase_dataset(c, data, 1), buffer, 1);
    REQUIRE(buffer.entries.size() == 6);
    const auto new_sample = sample_fraction(phase_dataset(c, data, 2).samples, 0.1, 2);

    c.pseudo_threshold_er = 0.2;
    const auto realigned = realign_er_set(c, micro_teacher(), buffer, new_sample, p, 2);
    REQUIRE(realigned.size() == buffer.entries.size() + new_sample.size());
    for (std::size_t i = 0; i < buffer.entries.size(); ++i) {
      const auto& gt = buffer.entries[i].annotations;
      const auto& out = realigned[i].targets;
      for (std::size_t k = 0; k < gt.size(); ++k) CHECK(out[k] == gt[k]);
      for (std::size_t k = gt.size(); k < out.size(); ++k) CHECK(p.phase_categories(2).contains(out[k].category_id));
    }
    for (std::size_t i = 0; i < new_sample.size(); ++i) {
      const auto& out = realigned[buffer.entries.size() + i].targets;
      for (std::size_t k = new_sample[i].visible.size(); k < out.size(); ++k)
        CHECK(p.old_categories(2).contains(out[k].category_id));
    }

    TrainLog log;
    train_er_finetune(c, micro_teacher(), buffer, new_sample, p, 2, &log);
    REQUIRE_FALSE(log.steps.empty());
    for (const auto& s : log.steps) {
      CHECK(s.stage == Stage::er);
      CHECK(s.loss.iaqd_cls == 0.0);
      CHECK(s.loss.iaqd_box == 0.0);
    }
    CHECK(log.matches.empty());
  }

  TEST_CASE("two-phase run writes the run directory and reruns byte-identically") {
    TempDir dir("run");
    auto c = micro_config();
    const auto result = run_experiment(c, dir / "a");
    run_experiment(c, dir / "b");
    REQUIRE(result.metrics.size() == 2);
    for (const char* f : {"config.json", "snapshots/phase_1.bin", "snapshots/phase_2.bin", "metrics/phase_1.json",
                          "metrics/phase_2.json", "losses/phase_1.jsonl", "losses/phase_2.jsonl",
                          "matchlog/phase_2.jsonl"}) {
      CAPTURE(f);
      REQUIRE(std::filesystem::exists(dir / "a" / f));
      CHECK(slurp(dir / "a" / f) == slurp(dir / "b" / f));
    }
    const auto m = nlohmann::json::parse(slurp(dir / "a" / "metrics/phase_2.json"));
    for (const char* k : {"ap", "ap50", "ap75", "ap_old", "ap_new", "ap_all", "per_category", "before_er", "diagnostics"})
      CHECK(m.contains(k));
    CHECK(m["diagnostics"]["churn"]["max"] == 1);

    // The echoed config fully determines the run.
    const auto echoed = load_config(dir / "a" / "config.json");
    CHECK(config_to_json(echoed).dump() == config_to_json(c).dump());

    // Distillation terms only ever appear on incremental-stage lines.
    std::ifstream losses(dir / "a" / "losses/phase_2.jsonl");
    std::string line;
    int er_lines = 0;
    while (std::getline(losses, line)) {
      const auto j = nlohmann::json::parse(line);
      if (j["stage"] == "er") {
        ++er_lines;
        CHECK_FALSE(j.contains("distill_cls"));
        CHECK_FALSE(j.contains("distill_box"));
      }
    }
    CHECK(er_lines > 0);
  }

  TEST_CASE("three-phase run evaluates after every phase") {
    TempDir dir("run3");
    auto c = micro_config();
    c.partition = "2+2+2";
    c.epochs_phase_one = 1;
    c.epochs_incremental = 1;
    const auto result = run_experiment(c, dir.path());
    CHECK(result.metrics.size() == 3);
    for (int t = 1; t <= 3; ++t)
      CHECK(std::filesystem::exists(dir / ("metrics/phase_" + std::to_string(t) + ".json")));
  }

  TEST_CASE("a supplied phase-one result must match the config") {
    TempDir dir("mismatch");
    auto c = micro_config();
    PhaseOneResult p1{micro_teacher(), {}};
    c.num_queries = 10;
    CHECK_THROWS_AS(run_experiment(c, dir.path(), p1), SpecMismatch);
  }
}
