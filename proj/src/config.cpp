#include "iaqd/config.hpp"

#include <fstream>
#include <functional>
#include <map>

namespace iaqd {

namespace {

using Json = nlohmann::json;

template <class T>
void read_field(const Json& j, const std::string& key, T& out) {
  try {
    out = j.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw InvariantViolation(key, "has the wrong type");
  }
}

using Setter = std::function<void(TrainConfig&, const Json&)>;

template <class T>
Setter field(T TrainConfig::*member, const char* key) {
  return [member, key](TrainConfig& c, const Json& j) { read_field(j, key, c.*member); };
}

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"schema_version", field(&TrainConfig::schema_version, "schema_version")},
      {"strategy",
       [](TrainConfig& c, const Json& j) {
         std::string s;
         read_field(j, "strategy", s);
         c.strategy = strategy_from_string(s);
       }},
      {"tau", field(&TrainConfig::tau, "tau")},
      {"lambda1", field(&TrainConfig::lambda1, "lambda1")},
      {"lambda2", field(&TrainConfig::lambda2, "lambda2")},
      {"pseudo_threshold_incremental",
       field(&TrainConfig::pseudo_threshold_incremental, "pseudo_threshold_incremental")},
      {"pseudo_threshold_er", field(&TrainConfig::pseudo_threshold_er, "pseudo_threshold_er")},
      {"exemplar_fraction", field(&TrainConfig::exemplar_fraction, "exemplar_fraction")},
      {"er_new_fraction", field(&TrainConfig::er_new_fraction, "er_new_fraction")},
      {"include_no_object_in_iaqd", field(&TrainConfig::include_no_object_in_iaqd, "include_no_object_in_iaqd")},
      {"kd_foreground_floor", field(&TrainConfig::kd_foreground_floor, "kd_foreground_floor")},
      {"nms_iou", field(&TrainConfig::nms_iou, "nms_iou")},
      {"skip_er", field(&TrainConfig::skip_er, "skip_er")},
      {"epochs_phase_one", field(&TrainConfig::epochs_phase_one, "epochs_phase_one")},
      {"epochs_incremental", field(&TrainConfig::epochs_incremental, "epochs_incremental")},
      {"epochs_er", field(&TrainConfig::epochs_er, "epochs_er")},
      {"batch_size", field(&TrainConfig::batch_size, "batch_size")},
      {"lr_phase_one", field(&TrainConfig::lr_phase_one, "lr_phase_one")},
      {"lr_incremental", field(&TrainConfig::lr_incremental, "lr_incremental")},
      {"lr_er", field(&TrainConfig::lr_er, "lr_er")},
      {"weight_decay", field(&TrainConfig::weight_decay, "weight_decay")},
      {"grad_clip", field(&TrainConfig::grad_clip, "grad_clip")},
      {"seed", field(&TrainConfig::seed, "seed")},
      {"cost_class", field(&TrainConfig::cost_class, "cost_class")},
      {"cost_l1", field(&TrainConfig::cost_l1, "cost_l1")},
      {"cost_giou", field(&TrainConfig::cost_giou, "cost_giou")},
      {"no_object_weight", field(&TrainConfig::no_object_weight, "no_object_weight")},
      {"num_queries", field(&TrainConfig::num_queries, "num_queries")},
      {"embed_dim", field(&TrainConfig::embed_dim, "embed_dim")},
      {"decoder_layers", field(&TrainConfig::decoder_layers, "decoder_layers")},
      {"num_heads", field(&TrainConfig::num_heads, "num_heads")},
      {"ffn_dim", field(&TrainConfig::ffn_dim, "ffn_dim")},
      {"image_size", field(&TrainConfig::image_size, "image_size")},
      {"num_categories", field(&TrainConfig::num_categories, "num_categories")},
      {"num_scenes", field(&TrainConfig::num_scenes, "num_scenes")},
      {"num_test_scenes", field(&TrainConfig::num_test_scenes, "num_test_scenes")},
      {"partition", field(&TrainConfig::partition, "partition")},
      {"protocol",
       [](TrainConfig& c, const Json& j) {
         std::string s;
         read_field(j, "protocol", s);
         c.protocol = protocol_from_string(s);
       }},
      {"data_dir", field(&TrainConfig::data_dir, "data_dir")},
  };
  return table;
}

}  // namespace

nlohmann::ordered_json config_to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["schema_version"] = c.schema_version;
  j["strategy"] = to_string(c.strategy);
  j["tau"] = c.tau;
  j["lambda1"] = c.lambda1;
  j["lambda2"] = c.lambda2;
  j["pseudo_threshold_incremental"] = c.pseudo_threshold_incremental;
  j["pseudo_threshold_er"] = c.pseudo_threshold_er;
  j["exemplar_fraction"] = c.exemplar_fraction;
  j["er_new_fraction"] = c.er_new_fraction;
  j["include_no_object_in_iaqd"] = c.include_no_object_in_iaqd;
  j["kd_foreground_floor"] = c.kd_foreground_floor;
  j["nms_iou"] = c.nms_iou;
  j["skip_er"] = c.skip_er;
  j["epochs_phase_one"] = c.epochs_phase_one;
  j["epochs_incremental"] = c.epochs_incremental;
  j["epochs_er"] = c.epochs_er;
  j["batch_size"] = c.batch_size;
  j["lr_phase_one"] = c.lr_phase_one;
  j["lr_incremental"] = c.lr_incremental;
  j["lr_er"] = c.lr_er;
  j["weight_decay"] = c.weight_decay;
  j["grad_clip"] = c.grad_clip;
  j["seed"] = c.seed;
  j["cost_class"] = c.cost_class;
  j["cost_l1"] = c.cost_l1;
  j["cost_giou"] = c.cost_giou;
  j["no_object_weight"] = c.no_object_weight;
  j["num_queries"] = c.num_queries;
  j["embed_dim"] = c.embed_dim;
  j["decoder_layers"] = c.decoder_layers;
  j["num_heads"] = c.num_heads;
  j["ffn_dim"] = c.ffn_dim;
  j["image_size"] = c.image_size;
  j["num_categories"] = c.num_categories;
  j["num_scenes"] = c.num_scenes;
  j["num_test_scenes"] = c.num_test_scenes;
  j["partition"] = c.partition;
  j["protocol"] = to_string(c.protocol);
  j["data_dir"] = c.data_dir;
  return j;
}

TrainConfig config_from_json(const nlohmann::json& json, const TrainConfig& base) {
  if (!json.is_object()) throw InvariantViolation("config", "must be a JSON object");
  TrainConfig config = base;
  for (const auto& [key, value] : json.items()) {
    if (key == "derived") continue;  // informational block written next to the config
    const auto it = setters().find(key);
    if (it == setters().end()) throw InvariantViolation(key, "unknown configuration key");
    it->second(config, value);
  }
  config.validate();
  return config;
}

TrainConfig load_config(const std::filesystem::path& path, const TrainConfig& base) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return config_from_json(j, base);
}

void save_config(const std::filesystem::path& path, const TrainConfig& config,
                 const nlohmann::ordered_json& derived) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto j = config_to_json(config);
  if (!derived.empty()) j["derived"] = derived;
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

}  // namespace iaqd
