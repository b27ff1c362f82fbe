#pragma once

// A minimal set-prediction detector: three strided conv blocks produce an
// 8x8-downsampled token map, N learned queries read it through a stack of
// post-norm decoder layers, and shared heads emit C+1 logits and a box per
// query. Query i always maps to row i of every output.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "iaqd/core.hpp"
#include "iaqd/nn.hpp"

namespace iaqd {

struct DetectorSpec {
  int num_queries = 25;
  int embed_dim = 64;
  int decoder_layers = 2;
  int num_categories = 8;
  int image_size = 64;
  int num_heads = 4;
  int ffn_dim = 128;
  int conv1_channels = 16;
  int conv2_channels = 32;

  void validate() const;
  bool operator==(const DetectorSpec&) const = default;
};

DetectorSpec detector_spec_from(const TrainConfig& config);

struct DecoderLayerParams {
  nn::Attention self_attn;
  nn::LayerNorm norm1;
  nn::Attention cross_attn;
  nn::LayerNorm norm2;
  nn::Linear ffn1;
  nn::Linear ffn2;
  nn::LayerNorm norm3;
};

struct DetectorParams {
  nn::Conv3x3 conv1, conv2, conv3;
  nn::Linear input_proj;
  Matrix query_pos;  // N x d
  std::vector<DecoderLayerParams> layers;
  nn::Linear class_head;
  nn::Linear box1, box2, box3;

  /// Same shapes, all zeros.
  static DetectorParams zeros_like(const DetectorParams& other);

  /// Visits every parameter matrix in a fixed order with a stable name.
  template <class F>
  void visit(F&& f);
  template <class F>
  void visit(F&& f) const;

  std::size_t count() const;
};

/// FNV-1a over the raw parameter bytes in visit order.
std::uint64_t parameter_checksum(const DetectorParams& params);

struct ModelSnapshot {
  DetectorSpec spec;
  DetectorParams params;
  int phase = 0;
};

void save_snapshot(const ModelSnapshot& snapshot, const std::filesystem::path& path);
ModelSnapshot load_snapshot(const std::filesystem::path& path);

/// Gradient of a scalar loss with respect to a DetectorOutput.
struct OutputGradient {
  Matrix logits;  // N x (C+1)
  Matrix boxes;   // N x 4, w.r.t. the post-sigmoid boxes

  static OutputGradient zeros(int num_queries, int num_categories);
};

struct DecoderLayerCache {
  Matrix input;
  nn::AttentionCache self_attn;
  nn::LayerNormCache norm1;
  Matrix after_norm1;
  nn::AttentionCache cross_attn;
  nn::LayerNormCache norm2;
  Matrix after_norm2;
  Matrix hidden;  // post-ReLU ffn activations
  nn::LayerNormCache norm3;
};

struct ForwardCache {
  Matrix image;
  nn::ConvCache conv1, conv2, conv3;
  Matrix memory;
  std::vector<DecoderLayerCache> layers;
  Matrix decoded;
  Matrix box_hidden1, box_hidden2;
  Matrix boxes;
};

class Detector {
 public:
  Detector(const DetectorSpec& spec, std::uint64_t seed);
  explicit Detector(const ModelSnapshot& snapshot);

  const DetectorSpec& spec() const noexcept { return spec_; }
  const DetectorParams& params() const noexcept { return params_; }
  DetectorParams& params() noexcept { return params_; }
  const DetectorParams& grads() const noexcept { return grads_; }
  DetectorParams& grads() noexcept { return grads_; }

  /// `image` is (size*size) x 3, row-major over pixels.
  DetectorOutput forward(const Matrix& image) const;
  DetectorOutput forward(const Matrix& image, ForwardCache& cache) const;
  /// Accumulates parameter gradients for the pass recorded in `cache`.
  void backward(const ForwardCache& cache, const OutputGradient& grad);
  void zero_grad();

  ModelSnapshot snapshot(int phase) const;

 private:
  DetectorOutput run(const Matrix& image, ForwardCache* cache) const;

  DetectorSpec spec_;
  DetectorParams params_;
  DetectorParams grads_;
  Matrix key_pos_;  // fixed sinusoidal encoding added to memory keys
};

/// Copies every parameter of the last-phase model into a new trainable detector.
Detector init_from(const ModelSnapshot& last_phase, const DetectorSpec& expected);

/// Inference-only view of a snapshot; parameters can never change.
class FrozenDetector {
 public:
  explicit FrozenDetector(const ModelSnapshot& snapshot);

  DetectorOutput forward(const Matrix& image) const { return model_->forward(image); }
  const DetectorSpec& spec() const noexcept { return model_->spec(); }
  std::uint64_t checksum() const { return parameter_checksum(model_->params()); }
  const DetectorParams& params() const noexcept { return model_->params(); }

 private:
  std::shared_ptr<const Detector> model_;
};

/// Decoupled-weight-decay Adam with optional global-norm gradient clipping.
class AdamW {
 public:
  AdamW(const DetectorParams& shape, double lr, double weight_decay, double grad_clip = 0.0,
        double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  /// Applies one update from `model.grads()`; returns the pre-clip gradient norm.
  double step(Detector& model);
  /// A frozen teacher cannot be updated.
  [[noreturn]] void step(const FrozenDetector& model);

  void set_lr(double lr) noexcept { lr_ = lr; }
  double lr() const noexcept { return lr_; }

 private:
  DetectorParams m_, v_;
  double lr_, weight_decay_, grad_clip_, beta1_, beta2_, eps_;
  long step_count_ = 0;
};

// ---------------------------------------------------------------------------

template <class F>
void DetectorParams::visit(F&& f) {
  auto linear = [&](const std::string& name, nn::Linear& l) {
    f(name + ".weight", l.weight);
    f(name + ".bias", l.bias);
  };
  auto attention = [&](const std::string& name, nn::Attention& a) {
    linear(name + ".q", a.q);
    linear(name + ".k", a.k);
    linear(name + ".v", a.v);
    linear(name + ".out", a.out);
  };
  auto norm = [&](const std::string& name, nn::LayerNorm& n) {
    f(name + ".gamma", n.gamma);
    f(name + ".beta", n.beta);
  };
  f("conv1.weight", conv1.weight);
  f("conv1.bias", conv1.bias);
  f("conv2.weight", conv2.weight);
  f("conv2.bias", conv2.bias);
  f("conv3.weight", conv3.weight);
  f("conv3.bias", conv3.bias);
  linear("input_proj", input_proj);
  f("query_pos", query_pos);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string p = "decoder." + std::to_string(i);
    attention(p + ".self_attn", layers[i].self_attn);
    norm(p + ".norm1", layers[i].norm1);
    attention(p + ".cross_attn", layers[i].cross_attn);
    norm(p + ".norm2", layers[i].norm2);
    linear(p + ".ffn1", layers[i].ffn1);
    linear(p + ".ffn2", layers[i].ffn2);
    norm(p + ".norm3", layers[i].norm3);
  }
  linear("class_head", class_head);
  linear("box1", box1);
  linear("box2", box2);
  linear("box3", box3);
}

template <class F>
void DetectorParams::visit(F&& f) const {
  const_cast<DetectorParams*>(this)->visit(
      [&](const std::string& name, Matrix& m) { f(name, static_cast<const Matrix&>(m)); });
}

}  // namespace iaqd
