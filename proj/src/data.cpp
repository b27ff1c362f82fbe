#include "iaqd/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "iaqd/labels.hpp"
#include "iaqd/random.hpp"

namespace iaqd {

namespace {

enum class Glyph { square, disc, triangle, cross };

constexpr std::array<std::array<double, 3>, 8> kPalette{{
    {0.90, 0.10, 0.10},
    {0.10, 0.80, 0.10},
    {0.15, 0.25, 0.95},
    {0.95, 0.90, 0.10},
    {0.90, 0.10, 0.90},
    {0.10, 0.90, 0.90},
    {1.00, 0.55, 0.00},
    {0.95, 0.95, 0.95},
}};

// Distinct (shape, colour) for every category below kMaxGlyphCategories;
// groups of four categories share a colour and differ only in shape.
Glyph glyph_of(int category) { return static_cast<Glyph>(category % 4); }
const std::array<double, 3>& colour_of(int category) { return kPalette[(category / 4) % 8]; }

bool covers(Glyph glyph, const BoundingBox& b, double x, double y) {
  const double x1 = b.cx() - 0.5 * b.w(), y1 = b.cy() - 0.5 * b.h();
  if (x < x1 || x > x1 + b.w() || y < y1 || y > y1 + b.h()) return false;
  const double dx = (x - b.cx()) / (0.5 * b.w());
  const double dy = (y - b.cy()) / (0.5 * b.h());
  switch (glyph) {
    case Glyph::square: return true;
    case Glyph::disc: return dx * dx + dy * dy <= 1.0;
    case Glyph::triangle: return std::abs(dx) <= (y - y1) / b.h();
    case Glyph::cross: return std::abs(dx) <= 1.0 / 3.0 || std::abs(dy) <= 1.0 / 3.0;
  }
  return false;
}

double quantize(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

PhaseDataset restrict_to_phase(const std::vector<ScenePtr>& scenes, const CategoryPartition& partition, int phase,
                               bool drop_empty) {
  PhaseDataset out;
  out.phase = phase;
  out.visible_categories = partition.phase_categories(phase);
  for (const auto& scene : scenes) {
    PhaseSample sample{scene, {}};
    for (const auto& a : scene->annotations)
      if (out.visible_categories.contains(a.category_id)) sample.visible.push_back(a);
    if (drop_empty && sample.visible.empty()) continue;
    out.samples.push_back(std::move(sample));
  }
  return out;
}

}  // namespace

Matrix render_scene(const AnnotationSet& annotations, int image_size, std::uint64_t noise_seed) {
  Rng rng(noise_seed);
  Matrix image(image_size * image_size, 3);
  for (Eigen::Index p = 0; p < image.rows(); ++p) {
    const double base = 0.2 + rng.uniform(-0.05, 0.05);
    for (int ch = 0; ch < 3; ++ch) image(p, ch) = quantize(base + rng.uniform(-0.02, 0.02));
  }
  for (const auto& a : annotations) {
    const Glyph glyph = glyph_of(a.category_id);
    const auto& colour = colour_of(a.category_id);
    const auto corners = a.box.clamped_corners();
    const int px0 = std::max(0, static_cast<int>(std::floor(corners[0] * image_size)));
    const int px1 = std::min(image_size - 1, static_cast<int>(std::ceil(corners[2] * image_size)));
    const int py0 = std::max(0, static_cast<int>(std::floor(corners[1] * image_size)));
    const int py1 = std::min(image_size - 1, static_cast<int>(std::ceil(corners[3] * image_size)));
    for (int py = py0; py <= py1; ++py) {
      for (int px = px0; px <= px1; ++px) {
        if (!covers(glyph, a.box, (px + 0.5) / image_size, (py + 0.5) / image_size)) continue;
        for (int ch = 0; ch < 3; ++ch) image(py * image_size + px, ch) = quantize(colour[ch]);
      }
    }
  }
  return image;
}

SceneList generate_dataset(std::uint64_t seed, int num_scenes, int num_categories, const GeneratorOptions& options,
                           int first_id) {
  if (num_categories < 4 || num_categories > kMaxGlyphCategories)
    throw InvariantViolation("num_categories", "must lie in [4," + std::to_string(kMaxGlyphCategories) + "]");
  if (num_scenes < 50) throw InvariantViolation("num_scenes", "must be at least 50");
  if (options.image_size <= 0 || options.image_size % 8 != 0)
    throw InvariantViolation("image_size", "must be a positive multiple of 8");

  Rng rng(seed);
  SceneList scenes;
  scenes.reserve(num_scenes);
  for (int s = 0; s < num_scenes; ++s) {
    const int count = options.min_objects + static_cast<int>(rng.below(options.max_objects - options.min_objects + 1));
    AnnotationSet annotations;
    for (int k = 0; k < count; ++k) {
      bool placed = false;
      for (int attempt = 0; attempt < options.max_attempts && !placed; ++attempt) {
        const int category = static_cast<int>(rng.below(num_categories));
        const double w = rng.uniform(options.min_extent, options.max_extent);
        const double h = rng.uniform(options.min_extent, options.max_extent);
        const BoundingBox box(rng.uniform(0.5 * w, 1.0 - 0.5 * w), rng.uniform(0.5 * h, 1.0 - 0.5 * h), w, h);
        const bool clear = std::all_of(annotations.begin(), annotations.end(),
                                       [&](const Annotation& a) { return box_iou(a.box, box) <= options.max_pair_iou; });
        if (!clear) continue;
        annotations.push_back(make_annotation(category, box, num_categories));
        placed = true;
      }
      if (!placed)
        throw PlacementFailure("could not place object " + std::to_string(k) + " in scene " + std::to_string(s));
    }
    auto scene = std::make_shared<SyntheticScene>();
    scene->scene_id = first_id + s;
    scene->image_size = options.image_size;
    scene->image = render_scene(annotations, options.image_size, rng.next());
    scene->annotations = std::move(annotations);
    scenes.push_back(std::move(scene));
  }
  return scenes;
}

PhaseDataset split_protocol_a(const SceneList& scenes, const CategoryPartition& partition, int phase) {
  return restrict_to_phase(scenes, partition, phase, true);
}

std::vector<std::size_t> protocol_b_chunk_sizes(std::size_t total, const CategoryPartition& partition) {
  const int phases = partition.num_phases();
  const double c = partition.num_categories();
  std::vector<std::size_t> sizes(phases);
  std::vector<std::pair<double, int>> remainders;
  std::size_t assigned = 0;
  for (int t = 0; t < phases; ++t) {
    const double exact = total * (partition.subsets()[t].size() / c);
    sizes[t] = static_cast<std::size_t>(std::floor(exact));
    assigned += sizes[t];
    remainders.emplace_back(exact - sizes[t], t);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < total; ++i, ++assigned) ++sizes[remainders[i % phases].second];
  return sizes;
}

PhaseDataset split_protocol_b(const SceneList& scenes, const CategoryPartition& partition, int phase,
                              std::uint64_t seed) {
  if (phase < 1 || phase > partition.num_phases()) throw InvariantViolation("phase", "out of range");
  const auto sizes = protocol_b_chunk_sizes(scenes.size(), partition);
  std::vector<std::size_t> order(scenes.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(order);
  const std::size_t begin = std::accumulate(sizes.begin(), sizes.begin() + (phase - 1), std::size_t{0});
  std::vector<std::size_t> chunk(order.begin() + begin, order.begin() + begin + sizes[phase - 1]);
  std::sort(chunk.begin(), chunk.end());
  SceneList selected;
  for (std::size_t i : chunk) selected.push_back(scenes[i]);
  return restrict_to_phase(selected, partition, phase, false);
}

PhaseDataset split_protocol(Protocol protocol, const SceneList& scenes, const CategoryPartition& partition, int phase,
                            std::uint64_t seed) {
  return protocol == Protocol::a ? split_protocol_a(scenes, partition, phase)
                                 : split_protocol_b(scenes, partition, phase, seed);
}

std::size_t exemplar_budget(double fraction, std::size_t total_scenes) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw InvariantViolation("exemplar_fraction", "must lie in (0,1]");
  // Guard against 0.1 * 500 landing a hair below 50.
  return static_cast<std::size_t>(std::floor(fraction * static_cast<double>(total_scenes) + 1e-9));
}

ExemplarBuffer sample_exemplars(const PhaseDataset& phase_data, ExemplarBuffer buffer, std::uint64_t seed) {
  Rng rng(seed);
  std::set<int> phases{phase_data.phase};
  for (const auto& e : buffer.entries) phases.insert(e.phase);
  const std::size_t share = buffer.budget / phases.size();

  std::vector<std::size_t> picks(phase_data.samples.size());
  std::iota(picks.begin(), picks.end(), 0);
  rng.shuffle(picks);
  picks.resize(std::min(share, picks.size()));
  std::sort(picks.begin(), picks.end());
  for (std::size_t i : picks) {
    const auto& s = phase_data.samples[i];
    buffer.entries.push_back({s.scene, s.visible, phase_data.phase});
  }

  while (buffer.entries.size() > buffer.budget) {
    std::vector<std::size_t> older;
    for (std::size_t i = 0; i < buffer.entries.size(); ++i)
      if (buffer.entries[i].phase != phase_data.phase) older.push_back(i);
    const std::size_t victim = older.empty() ? rng.below(buffer.entries.size()) : older[rng.below(older.size())];
    buffer.entries.erase(buffer.entries.begin() + static_cast<std::ptrdiff_t>(victim));
  }
  return buffer;
}

std::vector<PhaseSample> sample_fraction(const std::vector<PhaseSample>& samples, double fraction,
                                         std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw InvariantViolation("fraction", "must lie in (0,1]");
  const auto count = static_cast<std::size_t>(std::ceil(fraction * samples.size() - 1e-9));
  std::vector<std::size_t> idx(samples.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  rng.shuffle(idx);
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  std::vector<PhaseSample> out;
  for (std::size_t i : idx) out.push_back(samples[i]);
  return out;
}

// --- on-disk dataset --------------------------------------------------------------

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t hash = 1469598103934665603ULL;
  for (unsigned char b : bytes) {
    hash ^= b;
    hash *= 1099511628211ULL;
  }
  std::ostringstream out;
  out << std::hex;
  out.width(16);
  out.fill('0');
  out << hash;
  return out.str();
}

namespace {

constexpr char kImageMagic[8] = {'I', 'A', 'Q', 'D', 'I', 'M', 'G', '1'};

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

// images.bin: magic, u32 scene count, u32 image size, then per scene a u32
// scene id followed by size*size*3 bytes (row-major pixels, RGB).
DatasetManifest save_dataset(const std::filesystem::path& dir, const SceneList& scenes, std::uint64_t seed,
                             int num_categories) {
  std::filesystem::create_directories(dir);
  const int size = scenes.empty() ? 0 : scenes.front()->image_size;
  std::string images(kImageMagic, sizeof(kImageMagic));
  auto put_u32 = [&](std::uint32_t v) { images.append(reinterpret_cast<const char*>(&v), sizeof(v)); };
  put_u32(static_cast<std::uint32_t>(scenes.size()));
  put_u32(static_cast<std::uint32_t>(size));
  AnnotationIndex index;
  for (const auto& scene : scenes) {
    put_u32(static_cast<std::uint32_t>(scene->scene_id));
    for (Eigen::Index p = 0; p < scene->image.rows(); ++p)
      for (int ch = 0; ch < 3; ++ch)
        images.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(scene->image(p, ch) * 255.0))));
    index[scene->scene_id] = scene->annotations;
  }
  const std::string annotations = annotations_to_jsonl(index);
  write_file(dir / "images.bin", images);
  write_file(dir / "annotations.jsonl", annotations);

  DatasetManifest manifest{seed, static_cast<int>(scenes.size()), num_categories, size, fnv1a_hex(images),
                           fnv1a_hex(annotations)};
  nlohmann::ordered_json j;
  j["schema_version"] = 1;
  j["seed"] = manifest.seed;
  j["num_scenes"] = manifest.num_scenes;
  j["num_categories"] = manifest.num_categories;
  j["image_size"] = manifest.image_size;
  j["images"] = {{"file", "images.bin"}, {"fnv1a64", manifest.images_checksum}};
  j["annotations"] = {{"file", "annotations.jsonl"}, {"fnv1a64", manifest.annotations_checksum}};
  write_file(dir / "manifest.json", j.dump(2) + "\n");
  return manifest;
}

SceneList load_dataset(const std::filesystem::path& dir, DatasetManifest* manifest_out) {
  const auto j = nlohmann::json::parse(read_file(dir / "manifest.json"));
  DatasetManifest manifest;
  manifest.seed = j.at("seed");
  manifest.num_scenes = j.at("num_scenes");
  manifest.num_categories = j.at("num_categories");
  manifest.image_size = j.at("image_size");
  manifest.images_checksum = j.at("images").at("fnv1a64");
  manifest.annotations_checksum = j.at("annotations").at("fnv1a64");

  const std::string images = read_file(dir / "images.bin");
  if (fnv1a_hex(images) != manifest.images_checksum) throw FormatError("images.bin checksum mismatch");
  if (images.size() < 16 || images.compare(0, 8, std::string(kImageMagic, 8)) != 0)
    throw FormatError("images.bin has a bad header");
  std::size_t pos = 8;
  auto get_u32 = [&]() {
    if (pos + 4 > images.size()) throw FormatError("images.bin is truncated");
    std::uint32_t v;
    std::memcpy(&v, images.data() + pos, sizeof(v));
    pos += 4;
    return v;
  };
  const std::uint32_t count = get_u32();
  const std::uint32_t size = get_u32();
  const auto annotations = read_annotations(dir / "annotations.jsonl", manifest.num_categories);

  SceneList scenes;
  for (std::uint32_t s = 0; s < count; ++s) {
    auto scene = std::make_shared<SyntheticScene>();
    scene->scene_id = static_cast<int>(get_u32());
    scene->image_size = static_cast<int>(size);
    const std::size_t bytes = static_cast<std::size_t>(size) * size * 3;
    if (pos + bytes > images.size()) throw FormatError("images.bin is truncated");
    scene->image.resize(static_cast<Eigen::Index>(size) * size, 3);
    for (std::size_t i = 0; i < bytes; ++i)
      scene->image.data()[i] = static_cast<unsigned char>(images[pos + i]) / 255.0;
    pos += bytes;
    if (auto it = annotations.find(scene->scene_id); it != annotations.end()) scene->annotations = it->second;
    scenes.push_back(std::move(scene));
  }
  if (manifest_out) *manifest_out = manifest;
  return scenes;
}

}  // namespace iaqd
