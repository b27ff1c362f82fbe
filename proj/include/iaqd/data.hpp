#pragma once

// Synthetic glyph scenes, phase splits and the exemplar memory.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "iaqd/core.hpp"

namespace iaqd {

struct SyntheticScene {
  int scene_id = 0;
  int image_size = 0;
  Matrix image;  // (size*size) x 3, values k/255
  AnnotationSet annotations;
};

using ScenePtr = std::shared_ptr<const SyntheticScene>;
using SceneList = std::vector<ScenePtr>;

struct GeneratorOptions {
  int image_size = 64;
  double min_extent = 0.12;
  double max_extent = 0.30;
  int min_objects = 1;
  int max_objects = 6;
  double max_pair_iou = 0.3;
  int max_attempts = 200;
};

inline constexpr int kMaxGlyphCategories = 32;

/// Scenes numbered first_id, first_id+1, ... Deterministic in (seed, options).
SceneList generate_dataset(std::uint64_t seed, int num_scenes, int num_categories,
                           const GeneratorOptions& options = {}, int first_id = 0);

/// Renders a single scene from explicit annotations (used by tests and the generator).
Matrix render_scene(const AnnotationSet& annotations, int image_size, std::uint64_t noise_seed);

struct PhaseSample {
  ScenePtr scene;
  AnnotationSet visible;
};

struct PhaseDataset {
  int phase = 1;
  CategorySet visible_categories;
  std::vector<PhaseSample> samples;
};

/// Every scene holding at least one object of C_t, annotations restricted to C_t.
PhaseDataset split_protocol_a(const SceneList& scenes, const CategoryPartition& partition, int phase);

/// Scene counts per phase, proportional to |C_t| by largest remainder.
std::vector<std::size_t> protocol_b_chunk_sizes(std::size_t total, const CategoryPartition& partition);

/// Seeded disjoint image split; phase t gets its chunk with annotations restricted to C_t.
PhaseDataset split_protocol_b(const SceneList& scenes, const CategoryPartition& partition, int phase,
                              std::uint64_t seed);

PhaseDataset split_protocol(Protocol protocol, const SceneList& scenes, const CategoryPartition& partition, int phase,
                            std::uint64_t seed);

struct Exemplar {
  ScenePtr scene;
  AnnotationSet annotations;
  int phase = 0;
};

/// floor(fraction * total_scenes).
std::size_t exemplar_budget(double fraction, std::size_t total_scenes);

struct ExemplarBuffer {
  std::size_t budget = 0;
  std::vector<Exemplar> entries;
};

/// Appends a uniform sample of `phase_data` (the phase's even share of the
/// budget) and then evicts uniformly at random from older phases until the
/// buffer fits.
ExemplarBuffer sample_exemplars(const PhaseDataset& phase_data, ExemplarBuffer buffer, std::uint64_t seed);

/// Seeded subset of ceil(fraction * size) samples, kept in original order.
std::vector<PhaseSample> sample_fraction(const std::vector<PhaseSample>& samples, double fraction,
                                         std::uint64_t seed);

// --- on-disk dataset --------------------------------------------------------------

struct DatasetManifest {
  std::uint64_t seed = 0;
  int num_scenes = 0;
  int num_categories = 0;
  int image_size = 0;
  std::string images_checksum;
  std::string annotations_checksum;
};

/// Writes images.bin (raw u8 pixels), annotations.jsonl and manifest.json.
DatasetManifest save_dataset(const std::filesystem::path& dir, const SceneList& scenes, std::uint64_t seed,
                             int num_categories);
SceneList load_dataset(const std::filesystem::path& dir, DatasetManifest* manifest = nullptr);

std::string fnv1a_hex(const std::string& bytes);

}  // namespace iaqd
