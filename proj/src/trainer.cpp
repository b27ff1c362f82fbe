#include "iaqd/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>

#include "iaqd/config.hpp"
#include "iaqd/labels.hpp"
#include "iaqd/losses.hpp"
#include "iaqd/matcher.hpp"
#include "iaqd/random.hpp"

namespace iaqd {

std::string to_string(Stage stage) {
  switch (stage) {
    case Stage::phase_one: return "phase_one";
    case Stage::incremental: return "incremental";
    case Stage::er: return "er";
  }
  return "unknown";
}

namespace {

// Stream tags for derive_seed.
enum SeedTag : std::uint64_t {
  kTrainScenes = 1,
  kTestScenes = 2,
  kCategoryOrder = 3,
  kProtocolSplit = 4,
  kInit = 10,
  kPhaseOneShuffle = 11,
  kIncrementalShuffle = 20,
  kErShuffle = 40,
  kExemplars = 60,
  kErNewSample = 80,
};

/// Per-sample distillation hook: adds its gradient into `grad` and returns its parts.
using DistillHook = std::function<DistillParts(std::size_t sample, const DetectorOutput& student,
                                               OutputGradient& grad, double scale)>;

bool finite_parts(const DetrLossParts& d, const DistillParts& k) {
  return std::isfinite(d.cls) && std::isfinite(d.loc) && std::isfinite(k.cls) && std::isfinite(k.box);
}

void run_stage(Detector& model, const TrainConfig& config, Stage stage, double lr, int epochs,
               const std::vector<TrainingSample>& samples, std::uint64_t shuffle_seed, TrainLog* log,
               const DistillHook& distill = {}) {
  if (samples.empty() || epochs == 0) return;
  AdamW optimizer(model.params(), lr, config.weight_decay, config.grad_clip);
  const CostWeights cost{config.cost_class, config.cost_l1, config.cost_giou};
  const DetrLossWeights weights{config.cost_l1, config.cost_giou, config.no_object_weight};
  const int N = model.spec().num_queries;
  const int C = model.spec().num_categories;

  Rng rng(shuffle_seed);
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  long step = 0;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
      const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(config.batch_size));
      const double scale = 1.0 / static_cast<double>(end - begin);
      model.zero_grad();
      double sums[4] = {0, 0, 0, 0};
      for (std::size_t b = begin; b < end; ++b) {
        const auto idx = order[b];
        const auto& sample = samples[idx];
        ForwardCache cache;
        const DetectorOutput out = model.forward(sample.scene->image, cache);
        OutputGradient grad = OutputGradient::zeros(N, C);
        MatchAssignment assignment;
        if (!sample.targets.empty()) assignment = hungarian_assign(build_cost_matrix(sample.targets, out, cost));
        const DetrLossParts detr = detr_loss(out, sample.targets, assignment, weights, &grad, scale);
        DistillParts kd;
        if (distill) {
          kd = distill(idx, out, grad, scale * config.lambda2);
          if (log)
            for (const auto& [teacher, student] : kd.pairs.pairs())
              log->matches.push_back({step, sample.scene->scene_id, student, teacher});
        }
        if (!finite_parts(detr, kd))
          throw DivergenceError("non-finite loss in " + to_string(stage) + " stage at step " + std::to_string(step));
        model.backward(cache, grad);
        sums[0] += detr.cls;
        sums[1] += detr.loc;
        sums[2] += kd.cls;
        sums[3] += kd.box;
      }
      const double norm = optimizer.step(model);
      if (log) {
        const LossBreakdown mean = LossBreakdown::combine(sums[0] * scale, sums[1] * scale, sums[2] * scale,
                                                          sums[3] * scale, config.lambda1, config.lambda2);
        log->steps.push_back({stage, epoch, step, mean, norm});
      }
      ++step;
    }
  }
}

std::vector<TrainingSample> with_visible_targets(const PhaseDataset& data, int limit) {
  std::vector<TrainingSample> out;
  out.reserve(data.samples.size());
  for (const auto& s : data.samples) {
    TrainingSample t{s.scene, s.visible};
    limit_targets(t.targets, limit);
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace

ModelSnapshot train_phase_one(const TrainConfig& config, const PhaseDataset& data, TrainLog* log) {
  if (data.phase != 1) throw InvariantViolation("phase", "phase-one training needs phase-1 data");
  Detector model(detector_spec_from(config), derive_seed(config.seed, kInit));
  const auto samples = with_visible_targets(data, config.num_queries);
  run_stage(model, config, Stage::phase_one, config.lr_phase_one, config.epochs_phase_one, samples,
            derive_seed(config.seed, kPhaseOneShuffle), log);
  return model.snapshot(1);
}

ModelSnapshot train_incremental(const TrainConfig& config, const ModelSnapshot& teacher_snapshot,
                                const PhaseDataset& data, const CategorySet& old_categories, TrainLog* log) {
  if (old_categories.empty()) throw InvariantViolation("old_categories", "incremental stage needs old categories");
  const FrozenDetector teacher(teacher_snapshot);
  const std::uint64_t teacher_sum = teacher.checksum();
  Detector model = init_from(teacher_snapshot, detector_spec_from(config));

  // The teacher is frozen, so its outputs and pseudo labels are computed once.
  std::vector<DetectorOutput> teacher_outputs;
  std::vector<ProxyQuerySet> proxies;
  std::vector<TrainingSample> samples;
  teacher_outputs.reserve(data.samples.size());
  for (const auto& s : data.samples) {
    teacher_outputs.push_back(teacher.forward(s.scene->image));
    const auto& out = teacher_outputs.back();
    TrainingSample t{s.scene, merge_labels(generate_pseudo_labels(out, old_categories,
                                                                  config.pseudo_threshold_incremental,
                                                                  config.nms_iou),
                                           s.visible)};
    limit_targets(t.targets, config.num_queries);
    samples.push_back(std::move(t));
    if (config.strategy == Strategy::iaqd) proxies.push_back(select_proxy_queries(out, old_categories, config.tau));
  }

  DistillHook hook;
  switch (config.strategy) {
    case Strategy::pseudo_only:
      break;
    case Strategy::hungarian_kd:
      hook = [&](std::size_t i, const DetectorOutput& student, OutputGradient& grad, double scale) {
        return distill_hungarian(teacher_outputs[i], student, config.lambda1, config.kd_foreground_floor, &grad,
                                 scale);
      };
      break;
    case Strategy::iaqd:
      hook = [&](std::size_t i, const DetectorOutput& student, OutputGradient& grad, double scale) {
        return iaqd_loss(teacher_outputs[i], student, proxies[i], old_categories, config.lambda1,
                         config.include_no_object_in_iaqd, &grad, scale);
      };
      break;
  }
  run_stage(model, config, Stage::incremental, config.lr_incremental, config.epochs_incremental, samples,
            derive_seed(config.seed, kIncrementalShuffle + data.phase), log, hook);

  if (teacher.checksum() != teacher_sum) throw std::logic_error("teacher parameters changed during training");
  return model.snapshot(data.phase);
}

std::vector<TrainingSample> realign_er_set(const TrainConfig& config, const ModelSnapshot& model,
                                           const ExemplarBuffer& buffer, const std::vector<PhaseSample>& new_sample,
                                           const CategoryPartition& partition, int phase) {
  const FrozenDetector frozen(model);
  const CategorySet seen = partition.seen_categories(phase);
  std::vector<TrainingSample> out;
  auto add = [&](const ScenePtr& scene, const AnnotationSet& gt, int annotated_phase) {
    TrainingSample t{scene, realign_labels(frozen, scene->image, gt, partition.phase_categories(annotated_phase),
                                           seen, config.pseudo_threshold_er, config.nms_iou)};
    limit_targets(t.targets, config.num_queries);
    out.push_back(std::move(t));
  };
  for (const auto& e : buffer.entries) {
    if (e.phase >= phase) throw InvariantViolation("buffer", "exemplars must come from earlier phases");
    add(e.scene, e.annotations, e.phase);
  }
  for (const auto& s : new_sample) add(s.scene, s.visible, phase);
  return out;
}

ModelSnapshot train_er_finetune(const TrainConfig& config, const ModelSnapshot& model_snapshot,
                                const ExemplarBuffer& buffer, const std::vector<PhaseSample>& new_sample,
                                const CategoryPartition& partition, int phase, TrainLog* log) {
  const auto samples = realign_er_set(config, model_snapshot, buffer, new_sample, partition, phase);
  Detector model = init_from(model_snapshot, detector_spec_from(config));
  run_stage(model, config, Stage::er, config.lr_er, config.epochs_er, samples,
            derive_seed(config.seed, kErShuffle + phase), log);
  return model.snapshot(phase);
}

ExperimentData prepare_experiment_data(const TrainConfig& config) {
  config.validate();
  std::vector<int> order(config.num_categories);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(config.seed, kCategoryOrder));
  rng.shuffle(order);
  auto partition = CategoryPartition::from_order(order, parse_partition_sizes(config.partition));

  SceneList train, test;
  if (!config.data_dir.empty()) {
    DatasetManifest manifest;
    train = load_dataset(std::filesystem::path(config.data_dir) / "train", &manifest);
    if (manifest.num_categories != config.num_categories)
      throw InvariantViolation("num_categories", "does not match the dataset manifest");
    if (manifest.image_size != config.image_size)
      throw InvariantViolation("image_size", "does not match the dataset manifest");
    test = load_dataset(std::filesystem::path(config.data_dir) / "test");
  } else {
    GeneratorOptions options;
    options.image_size = config.image_size;
    train = generate_dataset(derive_seed(config.seed, kTrainScenes), config.num_scenes, config.num_categories,
                             options);
    test = generate_dataset(derive_seed(config.seed, kTestScenes), config.num_test_scenes, config.num_categories,
                            options, config.num_scenes);
  }
  return {std::move(train), std::move(test), std::move(order), std::move(partition)};
}

PhaseDataset phase_dataset(const TrainConfig& config, const ExperimentData& data, int phase) {
  return split_protocol(config.protocol, data.train, data.partition, phase, derive_seed(config.seed, kProtocolSplit));
}

std::vector<PhaseSample> old_phase_samples(const TrainConfig& config, const ExperimentData& data, int phase) {
  std::vector<PhaseSample> out;
  for (int k = 1; k < phase; ++k) {
    const auto d = phase_dataset(config, data, k);
    out.insert(out.end(), d.samples.begin(), d.samples.end());
  }
  return out;
}

nlohmann::ordered_json report_to_json(const APReport& r) {
  auto num = [](double v) { return std::isnan(v) ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(v); };
  nlohmann::ordered_json j;
  j["ap"] = num(r.ap);
  j["ap50"] = num(r.ap50);
  j["ap75"] = num(r.ap75);
  j["ap_small"] = num(r.ap_small);
  j["ap_medium"] = num(r.ap_medium);
  j["ap_large"] = num(r.ap_large);
  j["ap_old"] = num(r.ap_old);
  j["ap_new"] = num(r.ap_new);
  j["ap_all"] = num(r.ap_all);
  nlohmann::ordered_json per = nlohmann::ordered_json::object();
  for (const auto& [c, cat] : r.per_category)
    per[std::to_string(c)] = {{"ap", num(cat.ap)}, {"ap50", num(cat.ap50)}, {"ap75", num(cat.ap75)},
                              {"num_gt", cat.num_gt}};
  j["per_category"] = per;
  return j;
}

namespace {

nlohmann::ordered_json category_json(const CategorySet& s) { return nlohmann::ordered_json(std::vector<int>(s.begin(), s.end())); }

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out << text;
}

std::string loss_log_jsonl(const std::vector<StepRecord>& steps) {
  std::ostringstream out;
  for (const auto& s : steps) {
    nlohmann::ordered_json j;
    j["stage"] = to_string(s.stage);
    j["epoch"] = s.epoch;
    j["step"] = s.step;
    j["detr_cls"] = s.loss.detr_cls;
    j["detr_loc"] = s.loss.detr_loc;
    if (s.stage == Stage::incremental) {
      j["distill_cls"] = s.loss.iaqd_cls;
      j["distill_box"] = s.loss.iaqd_box;
    }
    j["total"] = s.loss.total;
    j["grad_norm"] = s.grad_norm;
    out << j.dump() << '\n';
  }
  return out.str();
}

std::string match_log_jsonl(const std::vector<MatchRecord>& log) {
  std::string out;
  char line[128];
  for (const auto& r : log) {
    std::snprintf(line, sizeof line, "{\"step\":%ld,\"image_id\":%d,\"student\":%d,\"teacher\":%d}\n", r.step,
                  r.image_id, r.student, r.teacher);
    out += line;
  }
  return out;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

nlohmann::ordered_json diagnostics_to_json(const QueryDiagnostics& d) {
  auto num = [](double v) { return std::isnan(v) ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(v); };
  nlohmann::ordered_json related_per = nlohmann::ordered_json::object();
  for (const auto& [c, n] : d.related.per_category) related_per[std::to_string(c)] = n;
  nlohmann::ordered_json iou_per = nlohmann::ordered_json::object();
  for (const auto& [c, v] : d.overall_iou.per_category) iou_per[std::to_string(c)] = v;
  return {{"related_total", d.related.total},
          {"related_per_category", related_per},
          {"overall_iou", num(d.overall_iou.mean)},
          {"overall_iou_per_category", iou_per}};
}

nlohmann::ordered_json churn_to_json(const std::vector<MatchRecord>& log, int num_queries) {
  if (log.empty()) return nullptr;
  const auto counts = match_churn(log, num_queries);
  int query = 0;
  for (int q = 1; q < num_queries; ++q)
    if (counts[q] > counts[query]) query = q;
  int logged = 0;
  long total = 0;
  for (int c : counts)
    if (c > 0) {
      ++logged;
      total += c;
    }
  nlohmann::ordered_json hist = nlohmann::ordered_json::object();
  for (const auto& [teacher, n] : churn_histogram(log, query)) hist[std::to_string(teacher)] = n;
  return {{"distinct_counts", counts},
          {"max", counts[query]},
          {"mean_over_logged", logged ? static_cast<double>(total) / logged : 0.0},
          {"histogram_query", query},
          {"histogram", hist}};
}

std::vector<MatchRecord> read_match_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<MatchRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.push_back({j.at("step").get<long>(), j.at("image_id").get<int>(), j.at("student").get<int>(),
                     j.at("teacher").get<int>()});
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ": " + e.what());
    }
  }
  return out;
}

ExperimentResult run_experiment(const TrainConfig& config, const std::filesystem::path& out_dir,
                                const std::optional<PhaseOneResult>& phase_one) {
  const ExperimentData data = prepare_experiment_data(config);
  const auto& partition = data.partition;

  nlohmann::ordered_json derived;
  derived["category_order"] = data.category_order;
  derived["phase_categories"] = partition.subsets();
  derived["num_train_scenes"] = data.train.size();
  derived["num_test_scenes"] = data.test.size();
  save_config(out_dir / "config.json", config, derived);

  ExperimentResult result;
  auto phase_file = [&](const char* dir, int t, const char* ext) {
    return out_dir / dir / ("phase_" + std::to_string(t) + ext);
  };
  auto base_metrics = [&](int t) {
    nlohmann::ordered_json m;
    m["phase"] = t;
    m["strategy"] = to_string(config.strategy);
    m["protocol"] = to_string(config.protocol);
    m["seed"] = config.seed;
    m["seen_categories"] = category_json(partition.seen_categories(t));
    m["old_categories"] = category_json(partition.old_categories(t));
    m["new_categories"] = category_json(partition.phase_categories(t));
    return m;
  };
  auto evaluate = [&](const ModelSnapshot& snap, int t) {
    return evaluate_model(FrozenDetector(snap), data.test, partition.seen_categories(t), partition.old_categories(t),
                          partition.phase_categories(t));
  };

  // Phase 1.
  const PhaseDataset first = phase_dataset(config, data, 1);
  if (phase_one) {
    if (!(phase_one->snapshot.spec == detector_spec_from(config)) || phase_one->snapshot.phase != 1)
      throw SpecMismatch("supplied phase-1 snapshot does not match the config");
    result.phase_one = *phase_one;
  } else {
    result.phase_one.snapshot = train_phase_one(config, first, &result.phase_one.log);
  }
  ModelSnapshot current = result.phase_one.snapshot;
  save_snapshot(current, phase_file("snapshots", 1, ".bin"));
  write_text(phase_file("losses", 1, ".jsonl"), loss_log_jsonl(result.phase_one.log.steps));
  {
    auto m = base_metrics(1);
    m.update(report_to_json(evaluate(current, 1)));
    m["parameter_checksum"] = hex64(parameter_checksum(current.params));
    result.metrics.push_back(m);
    write_text(phase_file("metrics", 1, ".json"), m.dump(2) + "\n");
  }

  ExemplarBuffer buffer{exemplar_budget(config.exemplar_fraction, data.train.size()), {}};
  buffer = sample_exemplars(first, buffer, derive_seed(config.seed, kExemplars + 1));
  std::vector<PhaseSample> old_phase_samples = first.samples;

  for (int t = 2; t <= partition.num_phases(); ++t) {
    const PhaseDataset phase_data = phase_dataset(config, data, t);
    const CategorySet old = partition.old_categories(t);
    TrainLog inc_log;
    const ModelSnapshot student = train_incremental(config, current, phase_data, old, &inc_log);

    auto m = base_metrics(t);
    const APReport before = evaluate(student, t);
    const auto teacher_diag = diagnose_queries(FrozenDetector(current), old_phase_samples, old);
    const auto student_diag = diagnose_queries(FrozenDetector(student), old_phase_samples, old);

    TrainLog er_log;
    ModelSnapshot final_model = student;
    if (!config.skip_er) {
      const auto new_sample =
          sample_fraction(phase_data.samples, config.er_new_fraction, derive_seed(config.seed, kErNewSample + t));
      final_model = train_er_finetune(config, student, buffer, new_sample, partition, t, &er_log);
    }
    const auto final_diag = diagnose_queries(FrozenDetector(final_model), old_phase_samples, old);

    m.update(report_to_json(evaluate(final_model, t)));
    const auto before_json = report_to_json(before);
    m["before_er"] = {{"ap", before_json["ap"]},       {"ap50", before_json["ap50"]},
                      {"ap75", before_json["ap75"]},   {"ap_old", before_json["ap_old"]},
                      {"ap_new", before_json["ap_new"]}, {"ap_all", before_json["ap_all"]}};
    m["er_applied"] = !config.skip_er;
    m["diagnostics"] = {{"churn", churn_to_json(inc_log.matches, config.num_queries)},
                        {"teacher", diagnostics_to_json(teacher_diag)},
                        {"student_before_er", diagnostics_to_json(student_diag)},
                        {"student", diagnostics_to_json(final_diag)}};
    m["teacher_checksum"] = hex64(parameter_checksum(current.params));
    m["parameter_checksum"] = hex64(parameter_checksum(final_model.params));
    result.metrics.push_back(m);

    std::vector<StepRecord> steps = inc_log.steps;
    steps.insert(steps.end(), er_log.steps.begin(), er_log.steps.end());
    save_snapshot(final_model, phase_file("snapshots", t, ".bin"));
    write_text(phase_file("losses", t, ".jsonl"), loss_log_jsonl(steps));
    write_text(phase_file("matchlog", t, ".jsonl"), match_log_jsonl(inc_log.matches));
    write_text(phase_file("metrics", t, ".json"), m.dump(2) + "\n");

    buffer = sample_exemplars(phase_data, buffer, derive_seed(config.seed, kExemplars + t));
    old_phase_samples.insert(old_phase_samples.end(), phase_data.samples.begin(), phase_data.samples.end());
    current = final_model;
  }
  return result;
}

}  // namespace iaqd
