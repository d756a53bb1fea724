#pragma once

// Differentiable operations over lamp::Tensor. Coverage is deliberately
// narrow: the convolutional autoencoder, the reconstruction losses and the
// classifier probe. Broadcasting is limited to rank-0 scalar operands.

#include <optional>
#include <span>
#include <vector>

#include "lamp/tensor.hpp"

namespace lamp {

enum class Mode { Train, Eval };

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// Per-channel running statistics of a batch-norm layer.
template <class T>
struct BatchNormState {
  std::vector<T> running_mean;
  std::vector<T> running_var;
  // Number of train-mode updates seen; eval mode needs at least one.
  std::size_t num_batches_tracked = 0;

  BatchNormState() = default;
  explicit BatchNormState(std::size_t channels)
      : running_mean(channels, T(0)), running_var(channels, T(1)) {}
  bool initialized() const { return num_batches_tracked > 0; }
};

/// conv2d output extent along one spatial axis.
std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride,
                             std::size_t padding);

template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t stride, std::size_t padding);

template <class T>
Tensor<T> batchnorm2d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                      BatchNormState<T>& state, Mode mode, double eps = kBatchNormEps,
                      double momentum = kBatchNormMomentum);

template <class T>
Tensor<T> leaky_relu(const Tensor<T>& input, double slope);
template <class T>
Tensor<T> sigmoid(const Tensor<T>& input);

template <class T>
Tensor<T> upsample_nearest2x(const Tensor<T>& input);

/// Zero padding of the two trailing (spatial) axes.
template <class T>
Tensor<T> pad2d(const Tensor<T>& input, std::size_t top, std::size_t bottom, std::size_t left,
                std::size_t right);
/// Window [top, top+height) x [left, left+width) of the two trailing axes.
template <class T>
Tensor<T> crop2d(const Tensor<T>& input, std::size_t top, std::size_t left, std::size_t height,
                 std::size_t width);

// Elementwise. Binary ops need identical shapes or a rank-0 operand.
template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> neg(const Tensor<T>& a);
/// Throws DomainError naming the smallest offending value when any input is <= 0.
template <class T>
Tensor<T> log(const Tensor<T>& a);
template <class T>
Tensor<T> square(const Tensor<T>& a);
/// Subgradient at 0 is 0.
template <class T>
Tensor<T> abs(const Tensor<T>& a);
template <class T>
Tensor<T> scalar_mul(const Tensor<T>& a, T c);
template <class T>
Tensor<T> scalar_div(const Tensor<T>& a, T c);
template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T c);
template <class T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi);

template <class T>
Tensor<T> sum(const Tensor<T>& a);
template <class T>
Tensor<T> mean(const Tensor<T>& a);
/// Reduces the listed axes away (no keepdim).
template <class T>
Tensor<T> sum(const Tensor<T>& a, std::span<const std::size_t> axes);
template <class T>
Tensor<T> mean(const Tensor<T>& a, std::span<const std::size_t> axes);
/// Largest element, outside the graph.
template <class T>
T max_value(const Tensor<T>& a);
/// Max over axes as a constant tensor (no gradient flows through it).
template <class T>
Tensor<T> max(const Tensor<T>& a, std::span<const std::size_t> axes);

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape);

/// y[n,k] = sum_d x[n,d] * weight[k,d] + bias[k]
template <class T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias);

/// 1-D correlation along axis 2 (rows) or 3 (columns) of an [N,C,H,W]
/// tensor with reflect padding (edge sample not repeated); output shape equals
/// input shape. The kernel length must be odd.
template <class T>
Tensor<T> filter1d_reflect(const Tensor<T>& input, std::span<const T> kernel, std::size_t axis);

/// Mean over the batch of -log softmax(logits)[label]. logits: [N,K].
template <class T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

}  // namespace lamp
