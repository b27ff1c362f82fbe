#include "iaqd/nn.hpp"

#include <cmath>

namespace iaqd::nn {

Matrix linear_forward(const Linear& layer, const Matrix& x) {
  Matrix y = x * layer.weight;
  y.rowwise() += layer.bias.row(0);
  return y;
}

Matrix linear_backward(const Linear& layer, const Matrix& x, const Matrix& dy, Linear& grad) {
  grad.weight.noalias() += x.transpose() * dy;
  grad.bias += dy.colwise().sum();
  return dy * layer.weight.transpose();
}

Matrix im2col_stride2(const Matrix& x, int height, int width) {
  const int channels = static_cast<int>(x.cols());
  const int oh = height / 2;
  const int ow = width / 2;
  Matrix cols = Matrix::Zero(oh * ow, 9 * channels);
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      const int row = oy * ow + ox;
      for (int ky = 0; ky < 3; ++ky) {
        const int iy = 2 * oy + ky - 1;
        if (iy < 0 || iy >= height) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int ix = 2 * ox + kx - 1;
          if (ix < 0 || ix >= width) continue;
          cols.block(row, (ky * 3 + kx) * channels, 1, channels) = x.row(iy * width + ix);
        }
      }
    }
  }
  return cols;
}

Matrix col2im_stride2(const Matrix& columns, int height, int width, int channels) {
  const int oh = height / 2;
  const int ow = width / 2;
  Matrix x = Matrix::Zero(height * width, channels);
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      const int row = oy * ow + ox;
      for (int ky = 0; ky < 3; ++ky) {
        const int iy = 2 * oy + ky - 1;
        if (iy < 0 || iy >= height) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int ix = 2 * ox + kx - 1;
          if (ix < 0 || ix >= width) continue;
          x.row(iy * width + ix) += columns.block(row, (ky * 3 + kx) * channels, 1, channels);
        }
      }
    }
  }
  return x;
}

Matrix conv_relu_forward(const Conv3x3& layer, const Matrix& x, int height, int width, ConvCache* cache) {
  if (height % 2 != 0 || width % 2 != 0) throw DimensionError("convolution input must have even size");
  if (x.rows() != static_cast<Eigen::Index>(height) * width) throw DimensionError("convolution input size mismatch");
  Matrix cols = im2col_stride2(x, height, width);
  Matrix y = cols * layer.weight;
  y.rowwise() += layer.bias.row(0);
  y = y.cwiseMax(0.0);
  if (cache) {
    cache->columns = std::move(cols);
    cache->output = y;
  }
  return y;
}

Matrix conv_relu_backward(const Conv3x3& layer, const ConvCache& cache, const Matrix& dy, int height, int width,
                          Conv3x3& grad, bool need_input_grad) {
  const Matrix dpre = relu_backward(cache.output, dy);
  grad.weight.noalias() += cache.columns.transpose() * dpre;
  grad.bias += dpre.colwise().sum();
  if (!need_input_grad) return {};
  const Matrix dcols = dpre * layer.weight.transpose();
  return col2im_stride2(dcols, height, width, static_cast<int>(layer.weight.rows() / 9));
}

namespace {
constexpr double kNormEps = 1e-5;
}

Matrix layer_norm_forward(const LayerNorm& layer, const Matrix& x, LayerNormCache* cache) {
  const Eigen::Index d = x.cols();
  Matrix normalized(x.rows(), d);
  Vector inv_std(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double mean = x.row(i).mean();
    const double var = (x.row(i).array() - mean).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + kNormEps);
    normalized.row(i) = (x.row(i).array() - mean) * inv_std(i);
  }
  Matrix y = normalized.array().rowwise() * layer.gamma.row(0).array();
  y.rowwise() += layer.beta.row(0);
  if (cache) {
    cache->normalized = std::move(normalized);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

Matrix layer_norm_backward(const LayerNorm& layer, const LayerNormCache& cache, const Matrix& dy, LayerNorm& grad) {
  grad.gamma += (dy.array() * cache.normalized.array()).colwise().sum().matrix();
  grad.beta += dy.colwise().sum();
  const Matrix dnorm = dy.array().rowwise() * layer.gamma.row(0).array();
  Matrix dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const double mean_d = dnorm.row(i).mean();
    const double mean_dn = (dnorm.row(i).array() * cache.normalized.row(i).array()).mean();
    dx.row(i) = cache.inv_std(i) * (dnorm.row(i).array() - mean_d - cache.normalized.row(i).array() * mean_dn);
  }
  return dx;
}

Matrix attention_forward(const Attention& layer, int num_heads, const Matrix& query_in, const Matrix& key_in,
                         const Matrix& value_in, AttentionCache* cache) {
  Matrix q = linear_forward(layer.q, query_in);
  Matrix k = linear_forward(layer.k, key_in);
  Matrix v = linear_forward(layer.v, value_in);
  const int d = static_cast<int>(q.cols());
  const int dh = d / num_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Matrix heads(q.rows(), d);
  std::vector<Matrix> weights;
  weights.reserve(num_heads);
  for (int h = 0; h < num_heads; ++h) {
    Matrix scores = (q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose()) * scale;
    for (Eigen::Index i = 0; i < scores.rows(); ++i) {
      const double peak = scores.row(i).maxCoeff();
      scores.row(i) = (scores.row(i).array() - peak).exp();
      scores.row(i) /= scores.row(i).sum();
    }
    heads.middleCols(h * dh, dh).noalias() = scores * v.middleCols(h * dh, dh);
    weights.push_back(std::move(scores));
  }
  Matrix y = linear_forward(layer.out, heads);
  if (cache) {
    cache->query_in = query_in;
    cache->key_in = key_in;
    cache->value_in = value_in;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->weights = std::move(weights);
    cache->heads = std::move(heads);
  }
  return y;
}

AttentionInputGrads attention_backward(const Attention& layer, int num_heads, const AttentionCache& cache,
                                       const Matrix& dy, Attention& grad) {
  const Matrix dheads = linear_backward(layer.out, cache.heads, dy, grad.out);
  const int d = static_cast<int>(cache.q.cols());
  const int dh = d / num_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Matrix dq(cache.q.rows(), d), dk(cache.k.rows(), d), dv(cache.v.rows(), d);
  for (int h = 0; h < num_heads; ++h) {
    const Matrix& a = cache.weights[h];
    const auto dout = dheads.middleCols(h * dh, dh);
    const Matrix da = dout * cache.v.middleCols(h * dh, dh).transpose();
    dv.middleCols(h * dh, dh).noalias() = a.transpose() * dout;
    Matrix ds = a.array() * (da.array().colwise() - (da.array() * a.array()).rowwise().sum());
    ds *= scale;
    dq.middleCols(h * dh, dh).noalias() = ds * cache.k.middleCols(h * dh, dh);
    dk.middleCols(h * dh, dh).noalias() = ds.transpose() * cache.q.middleCols(h * dh, dh);
  }
  AttentionInputGrads out;
  out.query_in = linear_backward(layer.q, cache.query_in, dq, grad.q);
  out.key_in = linear_backward(layer.k, cache.key_in, dk, grad.k);
  out.value_in = linear_backward(layer.v, cache.value_in, dv, grad.v);
  return out;
}

Matrix relu(const Matrix& x) { return x.cwiseMax(0.0); }

Matrix relu_backward(const Matrix& activated, const Matrix& dy) {
  return (activated.array() > 0.0).select(dy, 0.0);
}

Matrix sigmoid(const Matrix& x) { return (1.0 + (-x.array()).exp()).inverse().matrix(); }

}  // namespace iaqd::nn
