#pragma once

// Multi-phase incremental training: phase-1 training, the per-phase
// incremental stage with the chosen distillation strategy, and exemplar
// replay fine-tuning with label realignment.
//
// Run directory:
//   config.json              flat config echo plus a "derived" block
//   snapshots/phase_<t>.bin
//   metrics/phase_<t>.json
//   matchlog/phase_<t>.jsonl  {"step", "image_id", "student", "teacher"}
//   losses/phase_<t>.jsonl    one line per optimizer step, tagged with its stage

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "iaqd/core.hpp"
#include "iaqd/data.hpp"
#include "iaqd/detector.hpp"
#include "iaqd/eval.hpp"

namespace iaqd {

enum class Stage { phase_one, incremental, er };
std::string to_string(Stage stage);

struct StepRecord {
  Stage stage = Stage::phase_one;
  int epoch = 0;
  long step = 0;
  LossBreakdown loss;  // averaged over the mini-batch
  double grad_norm = 0.0;
};

struct TrainLog {
  std::vector<StepRecord> steps;
  std::vector<MatchRecord> matches;
};

/// A training image with its final target set.
struct TrainingSample {
  ScenePtr scene;
  AnnotationSet targets;
};

ModelSnapshot train_phase_one(const TrainConfig& config, const PhaseDataset& data, TrainLog* log = nullptr);

/// Trains a copy of `teacher` on phase-t data. Pseudo labels for
/// `old_categories` come from the frozen teacher and are merged with the GT.
ModelSnapshot train_incremental(const TrainConfig& config, const ModelSnapshot& teacher, const PhaseDataset& data,
                                const CategorySet& old_categories, TrainLog* log = nullptr);

/// Realigns every exemplar and new-data sample against `seen_categories` with
/// pseudo labels from a frozen copy of `model`.
std::vector<TrainingSample> realign_er_set(const TrainConfig& config, const ModelSnapshot& model,
                                           const ExemplarBuffer& buffer, const std::vector<PhaseSample>& new_sample,
                                           const CategoryPartition& partition, int phase);

/// L_DETR-only fine-tuning on the realigned ER set.
ModelSnapshot train_er_finetune(const TrainConfig& config, const ModelSnapshot& model, const ExemplarBuffer& buffer,
                                const std::vector<PhaseSample>& new_sample, const CategoryPartition& partition,
                                int phase, TrainLog* log = nullptr);

/// Everything a run needs besides the config; derived deterministically from it.
struct ExperimentData {
  SceneList train;
  SceneList test;
  std::vector<int> category_order;
  CategoryPartition partition;
};

ExperimentData prepare_experiment_data(const TrainConfig& config);

/// The training split of phase t under the configured protocol.
PhaseDataset phase_dataset(const TrainConfig& config, const ExperimentData& data, int phase);

/// Training samples of phases 1..t-1, the data the forgetting diagnostics run on.
std::vector<PhaseSample> old_phase_samples(const TrainConfig& config, const ExperimentData& data, int phase);

struct PhaseOneResult {
  ModelSnapshot snapshot;
  TrainLog log;
};

struct ExperimentResult {
  std::vector<nlohmann::ordered_json> metrics;  // one per phase
  PhaseOneResult phase_one;
};

/// Runs every phase and writes the run directory. Phase 1 does not depend on
/// the strategy, so a result from an earlier run with the same config may be
/// supplied to skip retraining it.
ExperimentResult run_experiment(const TrainConfig& config, const std::filesystem::path& out_dir,
                                const std::optional<PhaseOneResult>& phase_one = std::nullopt);

nlohmann::ordered_json report_to_json(const APReport& report);
nlohmann::ordered_json diagnostics_to_json(const QueryDiagnostics& diagnostics);
/// Distinct-teacher counts plus the teacher histogram of the highest-churn query; null for an empty log.
nlohmann::ordered_json churn_to_json(const std::vector<MatchRecord>& log, int num_queries);
std::vector<MatchRecord> read_match_log(const std::filesystem::path& path);

}  // namespace iaqd
