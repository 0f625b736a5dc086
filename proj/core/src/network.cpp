#include "network.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "veil/errors.hpp"

namespace veil::detail {

namespace {

using ConstMap = Eigen::Map<const Matrix>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;
using Map = Eigen::Map<Matrix>;
using VecMap = Eigen::Map<Eigen::VectorXd>;

// 3x3, stride 1, zero padding 1. Rows of `cols` are ordered (tap, channel).
void im2col(const Matrix& x, int c, int batch, int h, int w, Matrix& cols) {
  const Eigen::Index hw = static_cast<Eigen::Index>(h) * w;
  cols.resize(9 * c, batch * hw);
  const std::size_t bytes = sizeof(double) * c;
  for (int b = 0; b < batch; ++b) {
    for (int y = 0; y < h; ++y) {
      for (int xx = 0; xx < w; ++xx) {
        double* dst = cols.col(b * hw + y * w + xx).data();
        for (int ky = 0; ky < 3; ++ky) {
          const int sy = y + ky - 1;
          for (int kx = 0; kx < 3; ++kx) {
            const int sx = xx + kx - 1;
            double* tap = dst + (ky * 3 + kx) * c;
            if (sy < 0 || sy >= h || sx < 0 || sx >= w) {
              std::memset(tap, 0, bytes);
            } else {
              std::memcpy(tap, x.col(b * hw + sy * w + sx).data(), bytes);
            }
          }
        }
      }
    }
  }
}

void col2im(const Matrix& d_cols, int c, int batch, int h, int w, Matrix& dx) {
  const Eigen::Index hw = static_cast<Eigen::Index>(h) * w;
  dx.setZero(c, batch * hw);
  for (int b = 0; b < batch; ++b) {
    for (int y = 0; y < h; ++y) {
      for (int xx = 0; xx < w; ++xx) {
        const double* src = d_cols.col(b * hw + y * w + xx).data();
        for (int ky = 0; ky < 3; ++ky) {
          const int sy = y + ky - 1;
          if (sy < 0 || sy >= h) continue;
          for (int kx = 0; kx < 3; ++kx) {
            const int sx = xx + kx - 1;
            if (sx < 0 || sx >= w) continue;
            double* dst = dx.col(b * hw + sy * w + sx).data();
            const double* tap = src + (ky * 3 + kx) * c;
            for (int k = 0; k < c; ++k) dst[k] += tap[k];
          }
        }
      }
    }
  }
}

Matrix avg_pool2(const Matrix& x, int batch, int h, int w) {
  const int h2 = h / 2, w2 = w / 2;
  const Eigen::Index hw = static_cast<Eigen::Index>(h) * w, hw2 = static_cast<Eigen::Index>(h2) * w2;
  Matrix out(x.rows(), batch * hw2);
  for (int b = 0; b < batch; ++b) {
    for (int y = 0; y < h2; ++y) {
      for (int xx = 0; xx < w2; ++xx) {
        const Eigen::Index base = b * hw + (2 * y) * w + 2 * xx;
        out.col(b * hw2 + y * w2 + xx) =
            0.25 * (x.col(base) + x.col(base + 1) + x.col(base + w) + x.col(base + w + 1));
      }
    }
  }
  return out;
}

Matrix avg_unpool2(const Matrix& d_out, int batch, int h, int w) {
  const int h2 = h / 2, w2 = w / 2;
  const Eigen::Index hw = static_cast<Eigen::Index>(h) * w, hw2 = static_cast<Eigen::Index>(h2) * w2;
  Matrix dx(d_out.rows(), batch * hw);
  for (int b = 0; b < batch; ++b) {
    for (int y = 0; y < h2; ++y) {
      for (int xx = 0; xx < w2; ++xx) {
        const Eigen::Index base = b * hw + (2 * y) * w + 2 * xx;
        const auto g = 0.25 * d_out.col(b * hw2 + y * w2 + xx);
        dx.col(base) = g;
        dx.col(base + 1) = g;
        dx.col(base + w) = g;
        dx.col(base + w + 1) = g;
      }
    }
  }
  return dx;
}

}  // namespace

Network::Network(const ArchConfig& arch, const double* params) : arch_(arch), params_(params) {
  std::size_t offset = 0;
  int cin = arch.channels;
  if (!arch.flatten) {
    for (int cout : arch.conv_widths) {
      Block blk{offset, offset + static_cast<std::size_t>(cout) * 9 * cin, cin, cout};
      offset = blk.b_offset + cout;
      blocks_.push_back(blk);
      cin = cout;
    }
    c_last_ = cin;
    dense_w_ = offset;
    dense_b_ = offset + static_cast<std::size_t>(arch.embed_dim) * c_last_;
  }
}

Matrix Network::forward(const Matrix& input, int batch, ForwardCache* cache) const {
  if (arch_.flatten) {
    const Eigen::Index d = input.size() / batch;
    if (cache) cache->batch = batch;
    return Eigen::Map<const Matrix>(input.data(), d, batch);
  }
  ForwardCache local;
  ForwardCache& c = cache ? *cache : local;
  c.batch = batch;
  c.blocks.resize(blocks_.size());

  Matrix x = input;
  int h = arch_.height, w = arch_.width;
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const Block& blk = blocks_[l];
    BlockCache& bc = c.blocks[l];
    bc.h = h;
    bc.w = w;
    im2col(x, blk.cin, batch, h, w, bc.cols);
    const ConstMap weights(params_ + blk.w_offset, blk.cout, 9 * blk.cin);
    const ConstVecMap bias(params_ + blk.b_offset, blk.cout);
    bc.pre.noalias() = weights * bc.cols;
    bc.pre.colwise() += bias;
    x = avg_pool2(bc.pre.cwiseMax(0.0), batch, h, w);
    h /= 2;
    w /= 2;
  }
  // Global average pool.
  const Eigen::Index hw = static_cast<Eigen::Index>(h) * w;
  c.gap.resize(c_last_, batch);
  for (int b = 0; b < batch; ++b) {
    c.gap.col(b) = x.middleCols(b * hw, hw).rowwise().mean();
  }
  const ConstMap dense(params_ + dense_w_, arch_.embed_dim, c_last_);
  const ConstVecMap dense_bias(params_ + dense_b_, arch_.embed_dim);
  Matrix embed = dense * c.gap;
  embed.colwise() += dense_bias;
  if (!cache) c.blocks.clear();
  return embed;
}

Matrix Network::backward(const ForwardCache& cache, const Matrix& d_embed, double* param_grad,
                         bool want_input) const {
  const int batch = cache.batch;
  if (arch_.flatten) {
    if (!want_input) return {};
    const Eigen::Index d = d_embed.rows();
    const Eigen::Index per_image = d / arch_.channels;
    return Eigen::Map<const Matrix>(d_embed.data(), arch_.channels, per_image * batch);
  }

  const ConstMap dense(params_ + dense_w_, arch_.embed_dim, c_last_);
  if (param_grad) {
    Map(param_grad + dense_w_, arch_.embed_dim, c_last_).noalias() += d_embed * cache.gap.transpose();
    VecMap(param_grad + dense_b_, arch_.embed_dim) += d_embed.rowwise().sum();
  }
  const Matrix d_gap = dense.transpose() * d_embed;

  const BlockCache& last = cache.blocks.back();
  int h = last.h / 2, w = last.w / 2;
  const Eigen::Index hw = static_cast<Eigen::Index>(h) * w;
  Matrix dx(c_last_, batch * hw);
  for (int b = 0; b < batch; ++b) {
    dx.middleCols(b * hw, hw).colwise() = d_gap.col(b) / static_cast<double>(hw);
  }

  for (std::size_t l = blocks_.size(); l-- > 0;) {
    const Block& blk = blocks_[l];
    const BlockCache& bc = cache.blocks[l];
    Matrix d_pre = avg_unpool2(dx, batch, bc.h, bc.w);
    d_pre = (bc.pre.array() > 0.0).select(d_pre, 0.0);
    if (param_grad) {
      Map(param_grad + blk.w_offset, blk.cout, 9 * blk.cin).noalias() +=
          d_pre * bc.cols.transpose();
      VecMap(param_grad + blk.b_offset, blk.cout) += d_pre.rowwise().sum();
    }
    if (l == 0 && !want_input) return {};
    const ConstMap weights(params_ + blk.w_offset, blk.cout, 9 * blk.cin);
    const Matrix d_cols = weights.transpose() * d_pre;
    col2im(d_cols, blk.cin, batch, bc.h, bc.w, dx);
  }
  return dx;
}

Matrix pack(std::span<const Image* const> images) {
  if (images.empty()) return {};
  const Image& first = *images.front();
  const Eigen::Index per = static_cast<Eigen::Index>(first.size()) / first.channels();
  Matrix out(first.channels(), per * static_cast<Eigen::Index>(images.size()));
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (!images[i]->same_shape(first)) throw DimensionError("batch images differ in shape");
    std::memcpy(out.data() + i * first.size(), images[i]->data().data(),
                sizeof(double) * first.size());
  }
  return out;
}

std::vector<double> unpack_one(const Matrix& packed, int index, std::size_t pixels_per_image,
                               int /*channels*/) {
  const double* begin = packed.data() + static_cast<std::size_t>(index) * pixels_per_image;
  return {begin, begin + pixels_per_image};
}

Matrix head_logits(const LinearHead& head, const Matrix& embed) {
  Matrix logits = head.weights * embed;
  logits.colwise() += head.bias;
  return logits;
}

double softmax_xent(const Matrix& logits, std::span<const int> rows, Matrix& d_logits) {
  const Eigen::Index batch = logits.cols();
  d_logits.resize(logits.rows(), batch);
  double loss = 0.0;
  for (Eigen::Index b = 0; b < batch; ++b) {
    const double m = logits.col(b).maxCoeff();
    Eigen::VectorXd e = (logits.col(b).array() - m).exp();
    const double z = e.sum();
    loss += -(logits(rows[b], b) - m - std::log(z));
    d_logits.col(b) = e / z;
    d_logits(rows[b], b) -= 1.0;
  }
  d_logits /= static_cast<double>(batch);
  return loss / static_cast<double>(batch);
}

void round_to_float(std::span<double> values) {
  for (double& v : values) v = static_cast<double>(static_cast<float>(v));
}

void Adam::step(std::span<double> params, std::span<const double> grad) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grad[i];
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grad[i] * grad[i];
    params[i] -= lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
  }
}

}  // namespace veil::detail
