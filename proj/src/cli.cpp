#include "iaqd/cli.hpp"

#include <sys/wait.h>
#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "iaqd/config.hpp"
#include "iaqd/data.hpp"
#include "iaqd/eval.hpp"
#include "iaqd/random.hpp"
#include "iaqd/report.hpp"
#include "iaqd/trainer.hpp"

namespace iaqd {

namespace fs = std::filesystem;

namespace {

/// Flag-level problem detected after CLI11 parsing; reported like a parse error.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainFlags {
  std::string config;
  std::string protocol;
  std::string strategy;
  std::string out;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string seeds;
  int jobs = 1;
};

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out << text;
}

nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  return nlohmann::json::parse(in);
}

TrainConfig resolve_config(const TrainFlags& f) {
  nlohmann::json j = f.config.empty() ? nlohmann::json::object() : read_json_file(f.config);
  for (const auto& kv : f.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("--set expects key=value, got '" + kv + "'");
    const std::string key = kv.substr(0, eq), value = kv.substr(eq + 1);
    try {
      j[key] = nlohmann::json::parse(value);
    } catch (const nlohmann::json::exception&) {
      j[key] = value;
    }
  }
  if (!f.protocol.empty()) j["protocol"] = f.protocol;
  if (!f.strategy.empty()) j["strategy"] = f.strategy;
  if (f.seed) j["seed"] = *f.seed;
  return config_from_json(j);
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      seeds.push_back(std::stoull(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw UsageError("--seeds expects a comma-separated list of integers");
    }
  }
  if (seeds.empty()) throw UsageError("--seeds is empty");
  return seeds;
}

/// Runs one child process per seed, at most `jobs` at a time.
int fan_out(const TrainFlags& f, const std::vector<std::uint64_t>& seeds) {
  std::vector<pid_t> running;
  int failures = 0;
  auto reap_one = [&] {
    int status = 0;
    const pid_t pid = ::wait(&status);
    if (pid < 0) return;
    std::erase(running, pid);
    if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) ++failures;
  };
  for (const auto seed : seeds) {
    while (static_cast<int>(running.size()) >= f.jobs) reap_one();
    std::vector<std::string> args{"iaqd", "train", "--out", (fs::path(f.out) / ("seed_" + std::to_string(seed))).string(),
                                  "--seed", std::to_string(seed)};
    if (!f.config.empty()) args.insert(args.end(), {"--config", f.config});
    if (!f.protocol.empty()) args.insert(args.end(), {"--protocol", f.protocol});
    if (!f.strategy.empty()) args.insert(args.end(), {"--strategy", f.strategy});
    for (const auto& kv : f.overrides) args.insert(args.end(), {"--set", kv});
    const pid_t pid = ::fork();
    if (pid < 0) throw std::runtime_error("fork failed");
    if (pid == 0) {
      std::vector<char*> argv;
      for (auto& a : args) argv.push_back(a.data());
      argv.push_back(nullptr);
      ::execv("/proc/self/exe", argv.data());
      std::_Exit(127);
    }
    running.push_back(pid);
  }
  while (!running.empty()) reap_one();
  if (failures) throw std::runtime_error(std::to_string(failures) + " seed run(s) failed");
  return 0;
}

int cmd_train(const TrainFlags& f) {
  if (!f.seeds.empty()) {
    if (f.seed) throw UsageError("--seed and --seeds are mutually exclusive");
    if (f.jobs < 1) throw UsageError("--jobs must be at least 1");
    const auto seeds = parse_seed_list(f.seeds);
    resolve_config(f);  // fail fast on a bad config before forking
    return fan_out(f, seeds);
  }
  const TrainConfig config = resolve_config(f);
  const auto result = run_experiment(config, f.out);
  const auto& last = result.metrics.back();
  std::cout << nlohmann::ordered_json{{"run", f.out},
                                      {"phases", result.metrics.size()},
                                      {"ap_all", last["ap_all"]},
                                      {"ap_old", last["ap_old"]},
                                      {"ap_new", last["ap_new"]}}
                   .dump()
            << '\n';
  return 0;
}

int cmd_gen_data(std::uint64_t seed, int scenes, int test_scenes, int categories, int image_size,
                 const std::string& out) {
  GeneratorOptions options;
  options.image_size = image_size;
  const auto train = generate_dataset(derive_seed(seed, 1), scenes, categories, options);
  const auto test = generate_dataset(derive_seed(seed, 2), test_scenes, categories, options, scenes);
  const auto m_train = save_dataset(fs::path(out) / "train", train, seed, categories);
  const auto m_test = save_dataset(fs::path(out) / "test", test, seed, categories);
  std::cout << nlohmann::ordered_json{{"out", out},
                                      {"train_images", m_train.images_checksum},
                                      {"train_annotations", m_train.annotations_checksum},
                                      {"test_images", m_test.images_checksum},
                                      {"test_annotations", m_test.annotations_checksum}}
                   .dump()
            << '\n';
  return 0;
}

int cmd_eval(const std::string& run, int phase) {
  const TrainConfig config = load_config(fs::path(run) / "config.json");
  const auto data = prepare_experiment_data(config);
  if (phase < 1 || phase > data.partition.num_phases()) throw UsageError("--phase is out of range for this run");
  const auto snapshot = load_snapshot(fs::path(run) / "snapshots" / ("phase_" + std::to_string(phase) + ".bin"));
  const auto report = evaluate_model(FrozenDetector(snapshot), data.test, data.partition.seen_categories(phase),
                                     data.partition.old_categories(phase), data.partition.phase_categories(phase));
  nlohmann::ordered_json j{{"phase", phase}};
  j.update(report_to_json(report));
  const std::string text = j.dump(2) + "\n";
  write_file(fs::path(run) / "eval" / ("phase_" + std::to_string(phase) + ".json"), text);
  std::cout << text;
  return 0;
}

int cmd_diagnose(const std::string& run) {
  const TrainConfig config = load_config(fs::path(run) / "config.json");
  const auto data = prepare_experiment_data(config);
  nlohmann::ordered_json summary = nlohmann::ordered_json::array();
  for (int t = 2; t <= data.partition.num_phases(); ++t) {
    const fs::path student_path = fs::path(run) / "snapshots" / ("phase_" + std::to_string(t) + ".bin");
    if (!fs::exists(student_path)) break;
    const auto teacher = load_snapshot(fs::path(run) / "snapshots" / ("phase_" + std::to_string(t - 1) + ".bin"));
    const auto student = load_snapshot(student_path);
    const auto samples = old_phase_samples(config, data, t);
    const auto old = data.partition.old_categories(t);
    const auto log = read_match_log(fs::path(run) / "matchlog" / ("phase_" + std::to_string(t) + ".jsonl"));

    nlohmann::ordered_json j{{"phase", t}};
    j["churn"] = churn_to_json(log, config.num_queries);
    j["teacher"] = diagnostics_to_json(diagnose_queries(FrozenDetector(teacher), samples, old));
    j["student"] = diagnostics_to_json(diagnose_queries(FrozenDetector(student), samples, old));
    const fs::path dir = fs::path(run) / "diagnostics";
    write_file(dir / ("phase_" + std::to_string(t) + ".json"), j.dump(2) + "\n");

    if (!j["churn"].is_null()) {
      const auto counts = j["churn"]["distinct_counts"].get<std::vector<int>>();
      std::vector<std::string> groups;
      std::vector<double> values;
      for (std::size_t q = 0; q < counts.size(); ++q) {
        groups.push_back(std::to_string(q));
        values.push_back(counts[q]);
      }
      write_file(dir / ("churn_phase_" + std::to_string(t) + ".svg"),
                 bar_chart_svg("Distinct teacher queries per student query", groups, {{"distinct", values}},
                               "teacher indices"));
    }
    summary.push_back(j);
  }
  std::cout << summary.dump() << '\n';
  return 0;
}

int cmd_report(const std::vector<std::string>& runs, const std::string& out) {
  std::vector<fs::path> paths(runs.begin(), runs.end());
  const auto written = write_report(paths, out);
  std::cout << std::ifstream(fs::path(out) / "table.md").rdbuf();
  for (const auto& p : written) std::cerr << "wrote " << p.string() << '\n';
  return 0;
}

std::string error_line(const std::exception& e) {
  nlohmann::ordered_json j;
  if (dynamic_cast<const InvariantViolation*>(&e)) {
    j["type"] = "invariant_violation";
    j["field"] = static_cast<const InvariantViolation&>(e).field();
  } else if (dynamic_cast<const DivergenceError*>(&e)) {
    j["type"] = "divergence";
  } else if (dynamic_cast<const FormatError*>(&e)) {
    j["type"] = "format";
  } else {
    j["type"] = "runtime";
  }
  j["message"] = e.what();
  return "error: " + j.dump();
}

}  // namespace

int run_command(int argc, char** argv) {
  CLI::App app{"Incremental set-prediction detection with index-aligned query distillation"};
  app.require_subcommand(1);

  std::uint64_t gen_seed = 0;
  int gen_scenes = 500, gen_test = 200, gen_categories = 8, gen_size = 64;
  std::string gen_out;
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic glyph dataset (train/ and test/)");
  gen->add_option("--seed", gen_seed, "Generator seed")->required();
  gen->add_option("--scenes", gen_scenes, "Training scenes")->check(CLI::Range(50, 1000000));
  gen->add_option("--test-scenes", gen_test, "Test scenes")->check(CLI::Range(50, 1000000));
  gen->add_option("--categories", gen_categories, "Number of categories")->check(CLI::Range(4, kMaxGlyphCategories));
  gen->add_option("--image-size", gen_size, "Image side in pixels")->check(CLI::Range(8, 1024));
  gen->add_option("--out", gen_out, "Output directory")->required();

  TrainFlags tf;
  auto* train = app.add_subcommand("train", "Run a multi-phase experiment");
  train->add_option("--config", tf.config, "JSON config file")->check(CLI::ExistingFile);
  train->add_option("--protocol", tf.protocol, "Phase split protocol")->check(CLI::IsMember({"a", "b"}));
  train->add_option("--strategy", tf.strategy, "Distillation strategy")
      ->check(CLI::IsMember({"pseudo_only", "hungarian_kd", "iaqd"}));
  train->add_option("--out", tf.out, "Run directory")->required();
  train->add_option("--seed", tf.seed, "Seed (overrides the config)");
  train->add_option("--seeds", tf.seeds, "Comma-separated seeds; one child run per seed under --out/seed_<s>");
  train->add_option("--jobs", tf.jobs, "Concurrent child runs with --seeds");
  train->add_option("--set", tf.overrides, "Config override key=value (repeatable)");

  std::string run_dir;
  int phase = 0;
  auto* eval = app.add_subcommand("eval", "Evaluate a stored phase snapshot on the test set");
  eval->add_option("--run", run_dir, "Run directory")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--phase", phase, "Phase index")->required();

  auto* diagnose = app.add_subcommand("diagnose", "Match churn, related-query and overall-IoU diagnostics");
  diagnose->add_option("--run", run_dir, "Run directory")->required()->check(CLI::ExistingDirectory);

  std::vector<std::string> report_runs;
  std::string report_out = "report";
  auto* report = app.add_subcommand("report", "Comparison tables and plots across runs");
  report->add_option("--runs", report_runs, "Run directories")->required()->expected(1, -1);
  report->add_option("--out", report_out, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "usage error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (*gen) return cmd_gen_data(gen_seed, gen_scenes, gen_test, gen_categories, gen_size, gen_out);
    if (*train) return cmd_train(tf);
    if (*eval) return cmd_eval(run_dir, phase);
    if (*diagnose) return cmd_diagnose(run_dir);
    if (*report) return cmd_report(report_runs, report_out);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n\n" << app.help();
    return 2;
  } catch (const std::exception& e) {
    std::cerr << error_line(e) << '\n';
    return 1;
  }
  return 2;
}

}  // namespace iaqd
