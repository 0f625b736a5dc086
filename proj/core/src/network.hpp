#pragma once

// Forward/backward passes of the convolutional extractor over a flat
// parameter vector. Activations are column-major (channels x positions) with
// positions ordered (image, row, col), so one image's block of columns is its
// interleaved pixel buffer.

#include <span>
#include <vector>

#include <Eigen/Core>

#include "veil/extractor.hpp"

namespace veil::detail {

using Matrix = Eigen::MatrixXd;

struct BlockCache {
  Matrix cols;  // im2col of the block input
  Matrix pre;   // conv output before ReLU
  int h = 0, w = 0;
};

struct ForwardCache {
  int batch = 0;
  std::vector<BlockCache> blocks;
  Matrix gap;  // globally pooled features, c_last x batch
};

class Network {
 public:
  Network(const ArchConfig& arch, const double* params);

  /// input: channels x (batch * H * W). Returns the embedding, d x batch.
  Matrix forward(const Matrix& input, int batch, ForwardCache* cache) const;

  /// Backpropagate d loss / d embedding. Parameter gradients are accumulated
  /// into `param_grad` when non-null; the input gradient is returned when
  /// `want_input` is set (otherwise an empty matrix).
  Matrix backward(const ForwardCache& cache, const Matrix& d_embed, double* param_grad,
                  bool want_input) const;

 private:
  struct Block {
    std::size_t w_offset, b_offset;
    int cin, cout;
  };

  const ArchConfig& arch_;
  const double* params_;
  std::vector<Block> blocks_;
  std::size_t dense_w_ = 0, dense_b_ = 0;
  int c_last_ = 0;
};

/// Pack images into the channels x (batch * H * W) layout.
Matrix pack(std::span<const Image* const> images);

/// Copy the columns of one image out of a packed matrix.
std::vector<double> unpack_one(const Matrix& packed, int index, std::size_t pixels_per_image,
                               int channels);

/// Head logits (classes x batch) from embeddings (d x batch).
Matrix head_logits(const LinearHead& head, const Matrix& embed);

/// Softmax cross-entropy over columns. Writes d loss / d logits (mean over
/// the batch) and returns the mean loss.
double softmax_xent(const Matrix& logits, std::span<const int> rows, Matrix& d_logits);

void round_to_float(std::span<double> values);

/// Elementwise Adam.
class Adam {
 public:
  explicit Adam(std::size_t n, double lr, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), m_(n, 0.0), v_(n, 0.0) {}

  void step(std::span<double> params, std::span<const double> grad);

 private:
  double lr_, beta1_, beta2_, eps_;
  std::vector<double> m_, v_;
  long t_ = 0;
};

}  // namespace veil::detail
