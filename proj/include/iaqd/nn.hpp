#pragma once

// Layer primitives with explicit forward caches and hand-written backward
// passes. Activations are row-major (tokens x channels).

#include <string>
#include <vector>

#include "iaqd/core.hpp"

namespace iaqd::nn {

struct Linear {
  Matrix weight;  // in x out
  Matrix bias;    // 1 x out
};

struct Conv3x3 {
  Matrix weight;  // 9*in x out, rows ordered (ky, kx, in)
  Matrix bias;    // 1 x out
};

struct LayerNorm {
  Matrix gamma;  // 1 x d
  Matrix beta;   // 1 x d
};

struct Attention {
  Linear q, k, v, out;
};

// --- linear -----------------------------------------------------------------

Matrix linear_forward(const Linear& layer, const Matrix& x);
/// Accumulates parameter gradients into `grad`, returns dL/dx.
Matrix linear_backward(const Linear& layer, const Matrix& x, const Matrix& dy, Linear& grad);

// --- 3x3 stride-2 convolution (padding 1) followed by ReLU ---------------------

struct ConvCache {
  Matrix columns;  // im2col patches, (oh*ow) x (9*in)
  Matrix output;   // post-ReLU
};

Matrix im2col_stride2(const Matrix& x, int height, int width);
Matrix col2im_stride2(const Matrix& columns, int height, int width, int channels);

Matrix conv_relu_forward(const Conv3x3& layer, const Matrix& x, int height, int width, ConvCache* cache);
/// Returns dL/dx (height*width x in) unless `need_input_grad` is false.
Matrix conv_relu_backward(const Conv3x3& layer, const ConvCache& cache, const Matrix& dy, int height, int width,
                          Conv3x3& grad, bool need_input_grad);

// --- layer norm -------------------------------------------------------------------

struct LayerNormCache {
  Matrix normalized;
  Vector inv_std;
};

Matrix layer_norm_forward(const LayerNorm& layer, const Matrix& x, LayerNormCache* cache);
Matrix layer_norm_backward(const LayerNorm& layer, const LayerNormCache& cache, const Matrix& dy, LayerNorm& grad);

// --- multi-head attention -----------------------------------------------------------

struct AttentionCache {
  Matrix query_in, key_in, value_in;
  Matrix q, k, v;
  std::vector<Matrix> weights;  // one (nq x nk) softmax matrix per head
  Matrix heads;                 // concatenated per-head outputs, nq x d
};

Matrix attention_forward(const Attention& layer, int num_heads, const Matrix& query_in, const Matrix& key_in,
                         const Matrix& value_in, AttentionCache* cache);

struct AttentionInputGrads {
  Matrix query_in, key_in, value_in;
};

AttentionInputGrads attention_backward(const Attention& layer, int num_heads, const AttentionCache& cache,
                                       const Matrix& dy, Attention& grad);

// --- helpers -------------------------------------------------------------------------

Matrix relu(const Matrix& x);
/// dy masked by (activated > 0).
Matrix relu_backward(const Matrix& activated, const Matrix& dy);
Matrix sigmoid(const Matrix& x);

}  // namespace iaqd::nn
