#pragma once

// Reconstruction losses and loss amplification.
//
// Every base loss is first materialized as a per-element map with the shape
// of the image batch. Amplification then works element by element:
//
//   scaled  = map / max(map) * (1 - eps)        max over the whole batch, detached
//   amp     = -log(1 - scaled)                  >= scaled, equality only at 0
//   loss    = reduce(amp)
//
// Because scaled <= 1 - eps the log argument never drops below eps.

#include <optional>
#include <span>
#include <string>
#include <string_view>

#include "lamp/tensor.hpp"

namespace lamp {

enum class BaseLoss { L2, L1, SSIM };
/// Sum: per-sample sum over C,H,W averaged over the batch. Mean: mean over all elements.
enum class Reduction { Sum, Mean };

std::string to_string(BaseLoss kind);
std::string to_string(Reduction r);
Reduction parse_reduction(std::string_view text);

/// Parsed form of "l2", "l1", "ssim" with an optional ".lamp" suffix.
struct LossSpec {
  BaseLoss base = BaseLoss::L2;
  bool amplified = false;

  static LossSpec parse(std::string_view text);
  std::string str() const;
  bool operator==(const LossSpec&) const = default;
};

struct LampConfig {
  double epsilon = 0.01;
  Reduction reduction = Reduction::Sum;

  void validate() const;
  bool operator==(const LampConfig&) const = default;
};

template <class T>
struct LossMap {
  Tensor<T> values;  // [N,C,H,W], all >= 0
  BaseLoss base_kind = BaseLoss::L2;
};

struct SsimParams {
  std::size_t window = 11;
  double sigma = 1.5;
  double c1 = 0.01 * 0.01;  // (0.01 L)^2 with L = 1
  double c2 = 0.03 * 0.03;  // (0.03 L)^2
};

/// Normalized 1-D Gaussian taps.
std::vector<double> gaussian_window(std::size_t size, double sigma);

template <class T>
LossMap<T> l2_map(const Tensor<T>& y, const Tensor<T>& y_hat);
template <class T>
LossMap<T> l1_map(const Tensor<T>& y, const Tensor<T>& y_hat);
/// (1 - local SSIM) / 2 per pixel and channel, Gaussian window, reflect borders.
template <class T>
LossMap<T> ssim_map(const Tensor<T>& y, const Tensor<T>& y_hat, const SsimParams& params = {});
template <class T>
LossMap<T> base_map(const Tensor<T>& y, const Tensor<T>& y_hat, BaseLoss kind);

/// map / max(map) * (1 - eps). `normalizer` replaces the batch max when given
/// (used by finite-difference oracles that freeze it). A zero max returns the
/// map unchanged.
template <class T>
LossMap<T> scale_loss_map(const LossMap<T>& map, double epsilon,
                          std::optional<double> normalizer = std::nullopt);

template <class T>
Tensor<T> reduce_map(const Tensor<T>& values, Reduction reduction);

/// -log(1 - scale_loss_map(map)) reduced.
template <class T>
Tensor<T> lamp_from_map(const LossMap<T>& map, const LampConfig& config,
                        std::optional<double> normalizer = std::nullopt);

template <class T>
Tensor<T> lamp_loss(const Tensor<T>& y, const Tensor<T>& y_hat, BaseLoss base,
                    const LampConfig& config);

template <class T>
Tensor<T> base_loss(const Tensor<T>& y, const Tensor<T>& y_hat, BaseLoss base,
                    Reduction reduction);

/// Dispatches on the loss spec: amplified or plain.
template <class T>
Tensor<T> reconstruction_loss(const Tensor<T>& y, const Tensor<T>& y_hat, const LossSpec& spec,
                              const LampConfig& config);

template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

}  // namespace lamp
