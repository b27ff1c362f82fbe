#include "iaqd/labels.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace iaqd {

AnnotationSet generate_pseudo_labels(const DetectorOutput& output, const CategorySet& categories, double threshold,
                                     double nms_iou) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw InvariantViolation("threshold", "must lie in (0,1)");
  if (categories.empty()) throw InvariantViolation("categories", "need at least one category");
  for (int c : categories)
    if (c < 0 || c >= output.num_categories()) throw InvalidCategory("pseudo-label category out of range");

  struct Candidate {
    int query;
    int category;
    double confidence;
  };
  std::vector<Candidate> candidates;
  for (int q = 0; q < output.num_queries(); ++q) {
    int best_c = -1;
    double best_p = -1.0;
    for (int c : categories) {
      if (output.probabilities()(q, c) > best_p) {
        best_p = output.probabilities()(q, c);
        best_c = c;
      }
    }
    if (best_p >= threshold) candidates.push_back({q, best_c, best_p});
  }
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const Candidate& a, const Candidate& b) { return a.confidence > b.confidence; });

  AnnotationSet kept;
  for (const auto& cand : candidates) {
    const BoundingBox box = output.box(cand.query);
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Annotation& k) {
      return k.category_id == cand.category && box_iou(k.box, box) > nms_iou;
    });
    if (!suppressed)
      kept.push_back(make_annotation(cand.category, box, output.num_categories(), LabelSource::pseudo,
                                     std::min(1.0, cand.confidence)));
  }
  return kept;
}

AnnotationSet generate_pseudo_labels(const FrozenDetector& model, const Matrix& image, const CategorySet& categories,
                                     double threshold, double nms_iou) {
  return generate_pseudo_labels(model.forward(image), categories, threshold, nms_iou);
}

AnnotationSet merge_labels(const AnnotationSet& pseudo, const AnnotationSet& gt) {
  const CategorySet gt_categories = categories_of(gt);
  for (const auto& a : pseudo)
    if (gt_categories.contains(a.category_id))
      throw CategoryOverlap("pseudo label category " + std::to_string(a.category_id) + " is also annotated");
  AnnotationSet merged = gt;
  merged.insert(merged.end(), pseudo.begin(), pseudo.end());
  return merged;
}

std::size_t limit_targets(AnnotationSet& targets, int limit) {
  if (static_cast<int>(targets.size()) <= limit) return 0;
  std::vector<std::size_t> order(targets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return targets[a].confidence > targets[b].confidence; });
  order.resize(limit);
  std::sort(order.begin(), order.end());
  AnnotationSet kept;
  for (std::size_t i : order) kept.push_back(targets[i]);
  const std::size_t dropped = targets.size() - kept.size();
  targets = std::move(kept);
  std::cerr << "warning: dropped " << dropped << " lowest-confidence targets beyond " << limit << " queries\n";
  return dropped;
}

AnnotationSet realign_labels(const DetectorOutput& output, const AnnotationSet& gt,
                             const CategorySet& annotated_categories, const CategorySet& all_categories,
                             double threshold, double nms_iou) {
  if (!std::includes(all_categories.begin(), all_categories.end(), annotated_categories.begin(),
                     annotated_categories.end()))
    throw InvariantViolation("annotated_categories", "must be a subset of all_categories");
  CategorySet missing;
  std::set_difference(all_categories.begin(), all_categories.end(), annotated_categories.begin(),
                      annotated_categories.end(), std::inserter(missing, missing.end()));
  if (missing.empty()) return gt;
  return merge_labels(generate_pseudo_labels(output, missing, threshold, nms_iou), gt);
}

AnnotationSet realign_labels(const FrozenDetector& model, const Matrix& image, const AnnotationSet& gt,
                             const CategorySet& annotated_categories, const CategorySet& all_categories,
                             double threshold, double nms_iou) {
  return realign_labels(model.forward(image), gt, annotated_categories, all_categories, threshold, nms_iou);
}

std::string annotations_to_jsonl(const AnnotationIndex& annotations) {
  std::ostringstream out;
  for (const auto& [sample, set] : annotations) {
    for (const auto& a : set) {
      nlohmann::ordered_json j;
      j["sample_id"] = sample;
      j["category_id"] = a.category_id;
      j["cx"] = a.box.cx();
      j["cy"] = a.box.cy();
      j["w"] = a.box.w();
      j["h"] = a.box.h();
      j["source"] = to_string(a.source);
      j["confidence"] = a.confidence;
      out << j.dump() << '\n';
    }
  }
  return out.str();
}

void write_annotations(const std::filesystem::path& path, const AnnotationIndex& annotations) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out << annotations_to_jsonl(annotations);
}

AnnotationIndex read_annotations(const std::filesystem::path& path, int num_categories) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  AnnotationIndex out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      const BoundingBox box(j.at("cx"), j.at("cy"), j.at("w"), j.at("h"));
      out[j.at("sample_id").get<int>()].push_back(
          make_annotation(j.at("category_id"), box, num_categories, label_source_from_string(j.at("source")),
                          j.at("confidence")));
    } catch (const std::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace iaqd
