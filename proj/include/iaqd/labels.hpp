#pragma once

// Pseudo labels, GT/pseudo merging and exemplar label realignment, plus the
// line-delimited annotation file format.
//
// Annotation files hold one JSON object per line:
//   {"sample_id": int, "category_id": int, "cx": num, "cy": num, "w": num,
//    "h": num, "source": "ground_truth" | "pseudo", "confidence": num}

#include <filesystem>
#include <map>

#include "iaqd/core.hpp"
#include "iaqd/detector.hpp"

namespace iaqd {

/// Hard labels from one forward output: each query whose best probability over
/// `categories` reaches `threshold` yields (argmax category, box, confidence);
/// duplicates are removed by per-category greedy NMS at `nms_iou`.
AnnotationSet generate_pseudo_labels(const DetectorOutput& output, const CategorySet& categories, double threshold,
                                     double nms_iou = 0.7);
AnnotationSet generate_pseudo_labels(const FrozenDetector& model, const Matrix& image, const CategorySet& categories,
                                     double threshold, double nms_iou = 0.7);

/// GT first, then pseudo. Throws CategoryOverlap if the category sets intersect.
AnnotationSet merge_labels(const AnnotationSet& pseudo, const AnnotationSet& gt);

/// Keeps at most `limit` targets, dropping the lowest-confidence ones first.
/// Returns the number dropped.
std::size_t limit_targets(AnnotationSet& targets, int limit);

/// GT verbatim plus pseudo labels for all_categories \ annotated_categories.
AnnotationSet realign_labels(const DetectorOutput& output, const AnnotationSet& gt,
                             const CategorySet& annotated_categories, const CategorySet& all_categories,
                             double threshold, double nms_iou = 0.7);
AnnotationSet realign_labels(const FrozenDetector& model, const Matrix& image, const AnnotationSet& gt,
                             const CategorySet& annotated_categories, const CategorySet& all_categories,
                             double threshold, double nms_iou = 0.7);

using AnnotationIndex = std::map<int, AnnotationSet>;

void write_annotations(const std::filesystem::path& path, const AnnotationIndex& annotations);
std::string annotations_to_jsonl(const AnnotationIndex& annotations);
AnnotationIndex read_annotations(const std::filesystem::path& path, int num_categories);

}  // namespace iaqd
