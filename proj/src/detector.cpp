#include "iaqd/detector.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include <json.hpp>

#include "iaqd/random.hpp"

namespace iaqd {

namespace {

using nn::Linear;

Linear make_linear(int in, int out, Rng& rng) {
  const double bound = std::sqrt(6.0 / (in + out));
  Linear l{Matrix(in, out), Matrix::Zero(1, out)};
  for (Eigen::Index i = 0; i < l.weight.size(); ++i) l.weight.data()[i] = rng.uniform(-bound, bound);
  return l;
}

nn::Conv3x3 make_conv(int in, int out, Rng& rng) {
  const double bound = std::sqrt(6.0 / (9.0 * in));
  nn::Conv3x3 c{Matrix(9 * in, out), Matrix::Zero(1, out)};
  for (Eigen::Index i = 0; i < c.weight.size(); ++i) c.weight.data()[i] = rng.uniform(-bound, bound);
  return c;
}

nn::LayerNorm make_norm(int d) { return {Matrix::Ones(1, d), Matrix::Zero(1, d)}; }

nn::Attention make_attention(int d, Rng& rng) {
  return {make_linear(d, d, rng), make_linear(d, d, rng), make_linear(d, d, rng), make_linear(d, d, rng)};
}

/// Sinusoidal 2-D encoding of the token grid; first half of the channels
/// encodes rows, second half columns.
Matrix grid_encoding(int grid, int dim) {
  Matrix pe(grid * grid, dim);
  const int half = dim / 2;
  constexpr double kTemperature = 100.0;
  for (int gy = 0; gy < grid; ++gy) {
    for (int gx = 0; gx < grid; ++gx) {
      const double pos[2] = {(gy + 0.5) / grid * 2.0 * std::numbers::pi, (gx + 0.5) / grid * 2.0 * std::numbers::pi};
      for (int axis = 0; axis < 2; ++axis) {
        const int width = axis == 0 ? half : dim - half;
        for (int k = 0; k < width; ++k) {
          const double freq = std::pow(kTemperature, -2.0 * (k / 2) / width);
          const double angle = pos[axis] * freq;
          pe(gy * grid + gx, axis * half + k) = (k % 2 == 0) ? std::sin(angle) : std::cos(angle);
        }
      }
    }
  }
  return pe;
}

}  // namespace

void DetectorSpec::validate() const {
  if (num_queries <= 0) throw InvariantViolation("num_queries", "must be positive");
  if (embed_dim <= 0) throw InvariantViolation("embed_dim", "must be positive");
  if (decoder_layers <= 0) throw InvariantViolation("decoder_layers", "must be positive");
  if (num_categories <= 0) throw InvariantViolation("num_categories", "must be positive");
  if (image_size <= 0 || image_size % 8 != 0) throw InvariantViolation("image_size", "must be a positive multiple of 8");
  if (num_heads <= 0 || embed_dim % num_heads != 0) throw InvariantViolation("num_heads", "must divide embed_dim");
  if (ffn_dim <= 0) throw InvariantViolation("ffn_dim", "must be positive");
  if (conv1_channels <= 0) throw InvariantViolation("conv1_channels", "must be positive");
  if (conv2_channels <= 0) throw InvariantViolation("conv2_channels", "must be positive");
}

DetectorSpec detector_spec_from(const TrainConfig& config) {
  DetectorSpec spec;
  spec.num_queries = config.num_queries;
  spec.embed_dim = config.embed_dim;
  spec.decoder_layers = config.decoder_layers;
  spec.num_categories = config.num_categories;
  spec.image_size = config.image_size;
  spec.num_heads = config.num_heads;
  spec.ffn_dim = config.ffn_dim;
  return spec;
}

DetectorParams DetectorParams::zeros_like(const DetectorParams& other) {
  DetectorParams z = other;
  z.visit([](const std::string&, Matrix& m) { m.setZero(); });
  return z;
}

std::size_t DetectorParams::count() const {
  std::size_t n = 0;
  visit([&](const std::string&, const Matrix& m) { n += static_cast<std::size_t>(m.size()); });
  return n;
}

std::uint64_t parameter_checksum(const DetectorParams& params) {
  std::uint64_t hash = 1469598103934665603ULL;
  params.visit([&](const std::string&, const Matrix& m) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(m.data());
    for (std::size_t i = 0; i < static_cast<std::size_t>(m.size()) * sizeof(double); ++i) {
      hash ^= bytes[i];
      hash *= 1099511628211ULL;
    }
  });
  return hash;
}

OutputGradient OutputGradient::zeros(int num_queries, int num_categories) {
  return {Matrix::Zero(num_queries, num_categories + 1), Matrix::Zero(num_queries, 4)};
}

Detector::Detector(const DetectorSpec& spec, std::uint64_t seed) : spec_(spec) {
  spec_.validate();
  Rng rng(seed);
  const int d = spec_.embed_dim;
  params_.conv1 = make_conv(3, spec_.conv1_channels, rng);
  params_.conv2 = make_conv(spec_.conv1_channels, spec_.conv2_channels, rng);
  params_.conv3 = make_conv(spec_.conv2_channels, d, rng);
  params_.input_proj = make_linear(d, d, rng);
  params_.query_pos = Matrix(spec_.num_queries, d);
  for (Eigen::Index i = 0; i < params_.query_pos.size(); ++i) params_.query_pos.data()[i] = rng.normal();
  for (int l = 0; l < spec_.decoder_layers; ++l) {
    DecoderLayerParams layer;
    layer.self_attn = make_attention(d, rng);
    layer.norm1 = make_norm(d);
    layer.cross_attn = make_attention(d, rng);
    layer.norm2 = make_norm(d);
    layer.ffn1 = make_linear(d, spec_.ffn_dim, rng);
    layer.ffn2 = make_linear(spec_.ffn_dim, d, rng);
    layer.norm3 = make_norm(d);
    params_.layers.push_back(std::move(layer));
  }
  params_.class_head = make_linear(d, spec_.num_categories + 1, rng);
  params_.box1 = make_linear(d, d, rng);
  params_.box2 = make_linear(d, d, rng);
  params_.box3 = make_linear(d, 4, rng);
  grads_ = DetectorParams::zeros_like(params_);
  key_pos_ = grid_encoding(spec_.image_size / 8, d);
}

Detector::Detector(const ModelSnapshot& snapshot) : spec_(snapshot.spec), params_(snapshot.params) {
  spec_.validate();
  grads_ = DetectorParams::zeros_like(params_);
  key_pos_ = grid_encoding(spec_.image_size / 8, spec_.embed_dim);
}

DetectorOutput Detector::forward(const Matrix& image) const { return run(image, nullptr); }

DetectorOutput Detector::forward(const Matrix& image, ForwardCache& cache) const { return run(image, &cache); }

DetectorOutput Detector::run(const Matrix& image, ForwardCache* cache) const {
  const int s = spec_.image_size;
  if (image.rows() != static_cast<Eigen::Index>(s) * s || image.cols() != 3)
    throw DimensionError("image must be " + std::to_string(s * s) + " x 3, got " + std::to_string(image.rows()) +
                         " x " + std::to_string(image.cols()));
  const auto& p = params_;
  const int heads = spec_.num_heads;

  Matrix f1 = nn::conv_relu_forward(p.conv1, image, s, s, cache ? &cache->conv1 : nullptr);
  Matrix f2 = nn::conv_relu_forward(p.conv2, f1, s / 2, s / 2, cache ? &cache->conv2 : nullptr);
  Matrix f3 = nn::conv_relu_forward(p.conv3, f2, s / 4, s / 4, cache ? &cache->conv3 : nullptr);
  Matrix memory = nn::linear_forward(p.input_proj, f3);
  const Matrix memory_keys = memory + key_pos_;

  // Decoding starts from the query embedding itself; a zero start makes the
  // first self-attention output constant across queries.
  Matrix x = p.query_pos;
  if (cache) cache->layers.resize(p.layers.size());
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& layer = p.layers[l];
    DecoderLayerCache* lc = cache ? &cache->layers[l] : nullptr;
    const Matrix self_query = x + p.query_pos;
    const Matrix sa =
        nn::attention_forward(layer.self_attn, heads, self_query, self_query, x, lc ? &lc->self_attn : nullptr);
    Matrix h1 = nn::layer_norm_forward(layer.norm1, x + sa, lc ? &lc->norm1 : nullptr);
    const Matrix ca = nn::attention_forward(layer.cross_attn, heads, h1 + p.query_pos, memory_keys, memory,
                                            lc ? &lc->cross_attn : nullptr);
    Matrix h2 = nn::layer_norm_forward(layer.norm2, h1 + ca, lc ? &lc->norm2 : nullptr);
    Matrix hidden = nn::relu(nn::linear_forward(layer.ffn1, h2));
    const Matrix ff = nn::linear_forward(layer.ffn2, hidden);
    Matrix out = nn::layer_norm_forward(layer.norm3, h2 + ff, lc ? &lc->norm3 : nullptr);
    if (lc) {
      lc->input = std::move(x);
      lc->after_norm1 = std::move(h1);
      lc->after_norm2 = std::move(h2);
      lc->hidden = std::move(hidden);
    }
    x = std::move(out);
  }

  Matrix logits = nn::linear_forward(p.class_head, x);
  Matrix b1 = nn::relu(nn::linear_forward(p.box1, x));
  Matrix b2 = nn::relu(nn::linear_forward(p.box2, b1));
  Matrix boxes = nn::sigmoid(nn::linear_forward(p.box3, b2));
  if (cache) {
    cache->image = image;
    cache->memory = std::move(memory);
    cache->decoded = x;
    cache->box_hidden1 = std::move(b1);
    cache->box_hidden2 = std::move(b2);
    cache->boxes = boxes;
  }
  return DetectorOutput(std::move(logits), std::move(boxes));
}

void Detector::backward(const ForwardCache& cache, const OutputGradient& grad) {
  const auto& p = params_;
  auto& g = grads_;
  const int s = spec_.image_size;
  const int heads = spec_.num_heads;
  if (grad.logits.rows() != spec_.num_queries || grad.logits.cols() != spec_.num_categories + 1 ||
      grad.boxes.rows() != spec_.num_queries || grad.boxes.cols() != 4)
    throw DimensionError("output gradient shape mismatch");

  Matrix dx = nn::linear_backward(p.class_head, cache.decoded, grad.logits, g.class_head);
  const Matrix draw = grad.boxes.array() * cache.boxes.array() * (1.0 - cache.boxes.array());
  Matrix db2 = nn::relu_backward(cache.box_hidden2, nn::linear_backward(p.box3, cache.box_hidden2, draw, g.box3));
  Matrix db1 = nn::relu_backward(cache.box_hidden1, nn::linear_backward(p.box2, cache.box_hidden1, db2, g.box2));
  dx += nn::linear_backward(p.box1, cache.decoded, db1, g.box1);

  Matrix dmemory = Matrix::Zero(cache.memory.rows(), cache.memory.cols());
  for (std::size_t li = p.layers.size(); li-- > 0;) {
    const auto& layer = p.layers[li];
    auto& gl = g.layers[li];
    const auto& lc = cache.layers[li];

    const Matrix dsum3 = nn::layer_norm_backward(layer.norm3, lc.norm3, dx, gl.norm3);
    Matrix dhidden = nn::linear_backward(layer.ffn2, lc.hidden, dsum3, gl.ffn2);
    dhidden = nn::relu_backward(lc.hidden, dhidden);
    Matrix dh2 = dsum3 + nn::linear_backward(layer.ffn1, lc.after_norm2, dhidden, gl.ffn1);

    const Matrix dsum2 = nn::layer_norm_backward(layer.norm2, lc.norm2, dh2, gl.norm2);
    const auto cross = nn::attention_backward(layer.cross_attn, heads, lc.cross_attn, dsum2, gl.cross_attn);
    dmemory += cross.key_in + cross.value_in;
    g.query_pos += cross.query_in;
    Matrix dh1 = dsum2 + cross.query_in;

    const Matrix dsum1 = nn::layer_norm_backward(layer.norm1, lc.norm1, dh1, gl.norm1);
    const auto self = nn::attention_backward(layer.self_attn, heads, lc.self_attn, dsum1, gl.self_attn);
    const Matrix dquery = self.query_in + self.key_in;
    g.query_pos += dquery;
    dx = dsum1 + self.value_in + dquery;
  }
  g.query_pos += dx;

  const Matrix df3 = nn::linear_backward(p.input_proj, cache.conv3.output, dmemory, g.input_proj);
  const Matrix df2 = nn::conv_relu_backward(p.conv3, cache.conv3, df3, s / 4, s / 4, g.conv3, true);
  const Matrix df1 = nn::conv_relu_backward(p.conv2, cache.conv2, df2, s / 2, s / 2, g.conv2, true);
  nn::conv_relu_backward(p.conv1, cache.conv1, df1, s, s, g.conv1, false);
}

void Detector::zero_grad() {
  grads_.visit([](const std::string&, Matrix& m) { m.setZero(); });
}

ModelSnapshot Detector::snapshot(int phase) const { return ModelSnapshot{spec_, params_, phase}; }

Detector init_from(const ModelSnapshot& last_phase, const DetectorSpec& expected) {
  if (!(last_phase.spec == expected)) throw SpecMismatch("last-phase snapshot does not match the detector spec");
  return Detector(last_phase);
}

FrozenDetector::FrozenDetector(const ModelSnapshot& snapshot)
    : model_(std::make_shared<const Detector>(snapshot)) {}

// --- snapshots ----------------------------------------------------------------

namespace {

constexpr char kSnapshotMagic[8] = {'I', 'A', 'Q', 'D', 'S', 'N', 'P', '1'};

nlohmann::json spec_to_json(const DetectorSpec& s) {
  return {{"num_queries", s.num_queries},       {"embed_dim", s.embed_dim},
          {"decoder_layers", s.decoder_layers}, {"num_categories", s.num_categories},
          {"image_size", s.image_size},         {"num_heads", s.num_heads},
          {"ffn_dim", s.ffn_dim},               {"conv1_channels", s.conv1_channels},
          {"conv2_channels", s.conv2_channels}};
}

DetectorSpec spec_from_json(const nlohmann::json& j) {
  DetectorSpec s;
  s.num_queries = j.at("num_queries");
  s.embed_dim = j.at("embed_dim");
  s.decoder_layers = j.at("decoder_layers");
  s.num_categories = j.at("num_categories");
  s.image_size = j.at("image_size");
  s.num_heads = j.at("num_heads");
  s.ffn_dim = j.at("ffn_dim");
  s.conv1_channels = j.at("conv1_channels");
  s.conv2_channels = j.at("conv2_channels");
  return s;
}

}  // namespace

// Layout: 8-byte magic, u64 header length, JSON header (spec, phase, tensor
// names and shapes), then every tensor's doubles in header order.
void save_snapshot(const ModelSnapshot& snapshot, const std::filesystem::path& path) {
  nlohmann::json header;
  header["spec"] = spec_to_json(snapshot.spec);
  header["phase"] = snapshot.phase;
  header["dtype"] = "float64-le";
  auto& tensors = header["tensors"] = nlohmann::json::array();
  snapshot.params.visit([&](const std::string& name, const Matrix& m) {
    tensors.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
  });
  const std::string text = header.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write snapshot " + path.string());
  out.write(kSnapshotMagic, sizeof(kSnapshotMagic));
  const std::uint64_t length = text.size();
  out.write(reinterpret_cast<const char*>(&length), sizeof(length));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  snapshot.params.visit([&](const std::string&, const Matrix& m) {
    out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
  });
  if (!out) throw FormatError("short write on snapshot " + path.string());
}

ModelSnapshot load_snapshot(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open snapshot " + path.string());
  char magic[sizeof(kSnapshotMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kSnapshotMagic, sizeof(magic)) != 0)
    throw FormatError(path.string() + " is not a detector snapshot");
  std::uint64_t length = 0;
  in.read(reinterpret_cast<char*>(&length), sizeof(length));
  std::string text(length, '\0');
  in.read(text.data(), static_cast<std::streamsize>(length));
  if (!in) throw FormatError("truncated snapshot header in " + path.string());
  const auto header = nlohmann::json::parse(text);

  ModelSnapshot snap;
  snap.spec = spec_from_json(header.at("spec"));
  snap.phase = header.at("phase");
  snap.params = Detector(snap.spec, 0).params();
  const auto& tensors = header.at("tensors");
  std::size_t index = 0;
  snap.params.visit([&](const std::string& name, Matrix& m) {
    if (index >= tensors.size()) throw FormatError("snapshot is missing tensor " + name);
    const auto& t = tensors[index++];
    if (t.at("name") != name || t.at("rows") != m.rows() || t.at("cols") != m.cols())
      throw FormatError("snapshot tensor " + t.at("name").get<std::string>() + " does not match " + name);
    in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
  });
  if (index != tensors.size()) throw FormatError("snapshot has unexpected extra tensors");
  if (!in) throw FormatError("truncated snapshot payload in " + path.string());
  return snap;
}

// --- optimizer -------------------------------------------------------------------

AdamW::AdamW(const DetectorParams& shape, double lr, double weight_decay, double grad_clip, double beta1,
             double beta2, double eps)
    : m_(DetectorParams::zeros_like(shape)),
      v_(DetectorParams::zeros_like(shape)),
      lr_(lr),
      weight_decay_(weight_decay),
      grad_clip_(grad_clip),
      beta1_(beta1),
      beta2_(beta2),
      eps_(eps) {}

double AdamW::step(Detector& model) {
  std::vector<Matrix*> params, grads, ms, vs;
  model.params().visit([&](const std::string&, Matrix& m) { params.push_back(&m); });
  model.grads().visit([&](const std::string&, Matrix& m) { grads.push_back(&m); });
  m_.visit([&](const std::string&, Matrix& m) { ms.push_back(&m); });
  v_.visit([&](const std::string&, Matrix& m) { vs.push_back(&m); });
  if (params.size() != ms.size()) throw SpecMismatch("optimizer state does not match the model");

  double sq = 0.0;
  for (const Matrix* g : grads) sq += g->squaredNorm();
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw DivergenceError("non-finite gradient norm");
  const double clip = (grad_clip_ > 0.0 && norm > grad_clip_) ? grad_clip_ / norm : 1.0;

  ++step_count_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_count_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_count_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i]->array();
    const auto g = grads[i]->array() * clip;
    auto m = ms[i]->array();
    auto v = vs[i]->array();
    p *= 1.0 - lr_ * weight_decay_;
    m = beta1_ * m + (1.0 - beta1_) * g;
    v = beta2_ * v + (1.0 - beta2_) * g.square();
    p -= lr_ * (m / bc1) / ((v / bc2).sqrt() + eps_);
  }
  return norm;
}

void AdamW::step(const FrozenDetector&) {
  throw FrozenModelError("attempted to update a frozen teacher");
}

}  // namespace iaqd
