#pragma once

// Loss landscapes along filter-normalized random directions, plus a
// classification probe on the encoder so the same plots can be made for a
// supervised loss.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include "json.hpp"
#include "lamp/data.hpp"
#include "lamp/losses.hpp"
#include "lamp/model.hpp"
#include "lamp/optim.hpp"

namespace lamp {

enum class DirectionNorm { Filter, None };

std::string to_string(DirectionNorm n);
DirectionNorm parse_direction_norm(std::string_view text);

template <class T>
struct Direction {
  std::vector<std::vector<T>> tensors;  // one per parameter, same order and sizes
  std::uint64_t seed = 0;
  DirectionNorm normalization = DirectionNorm::Filter;
};

/// Gaussian direction. Parameters of rank <= 1 (biases, batch-norm affine)
/// get a zero direction. With filter normalization every slice along axis 0
/// of a weight is rescaled to the norm of the matching weight slice.
template <class T>
Direction<T> random_direction(const std::vector<NamedParameter<T>>& params, std::uint64_t seed,
                              DirectionNorm normalization = DirectionNorm::Filter);

struct GridSpec {
  double lo = -1.0;
  double hi = 1.0;
  std::size_t resolution = 51;

  void validate() const;
  /// Evenly spaced, first point lo, last hi; a symmetric range puts an exact 0 at the center.
  std::vector<double> coordinates() const;
};

struct LandscapeGrid {
  std::vector<double> alphas;
  std::vector<double> betas;   // empty for a 1-D grid
  std::vector<double> values;  // values[i * betas.size() + j], or values[i] in 1-D
  nlohmann::json metadata = nlohmann::json::object();

  bool two_d() const { return !betas.empty(); }
  double at(std::size_t i, std::size_t j = 0) const { return values[two_d() ? i * betas.size() + j : i]; }
};

/// Evaluates `loss_fn` at params + a*d1 (+ b*d2) over the grid. Each point is
/// displaced from a saved copy, and the saved values are written back at the
/// end, so the parameters come out bit-identical.
template <class T>
LandscapeGrid loss_grid(std::vector<NamedParameter<T>>& params, const std::function<double()>& loss_fn,
                        const Direction<T>& d1, const std::type_identity_t<Direction<T>>* d2,
                        const GridSpec& spec = {});

/// Mean |difference| between grid neighbours along each axis divided by that
/// axis' spacing.
double sharpness_index(const LandscapeGrid& grid);

/// Reconstruction loss of `model` on a fixed batch, in eval mode, no graph.
template <class T>
std::function<double()> reconstruction_loss_fn(AEModel<T>& model, const Tensor<float>& batch,
                                               const LossSpec& loss, const LampConfig& lamp = {});

void write_grid_csv(const std::filesystem::path& path, const LandscapeGrid& grid);
LandscapeGrid read_grid_csv(const std::filesystem::path& path);

/// Integer class ids from class tags (e.g. MNIST digits).
std::vector<int> class_ids(const ImageBatch& batch);

struct ProbeConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  OptimizerConfig optimizer;
  bool fresh_encoder = false;   // rebuild the encoder from `seed` instead of copying the trained one
  std::size_t num_classes = 0;  // 0 = infer from labels
};

/// Encoder + flatten + linear head producing class logits.
template <class T>
class EncoderProbe {
 public:
  EncoderProbe(const AEModel<T>& source, std::size_t num_classes, const ProbeConfig& config);

  Tensor<T> logits(const Tensor<T>& batch, Mode mode);
  /// Mean cross-entropy over `batch`.
  double loss(const Tensor<float>& batch, std::span<const int> labels, Mode mode);
  double accuracy(const Tensor<float>& batch, std::span<const int> labels);
  std::vector<NamedParameter<T>>& parameters() { return params_; }
  std::size_t num_classes() const { return classes_; }
  AEModel<T>& encoder() { return model_; }

 private:
  AEModel<T> model_;  // only the encoder half is used
  std::size_t classes_;
  std::vector<NamedParameter<T>> params_;  // encoder parameters then head.weight, head.bias
};

struct ProbeResult {
  std::vector<double> epoch_loss;
  double train_accuracy = 0.0;
};

/// Trains a probe with cross-entropy. Throws DataError when labels do not fit
/// the class count.
template <class T>
std::pair<EncoderProbe<T>, ProbeResult> encoder_probe_train(const AEModel<T>& model, const ImageBatch& data,
                                                            const ProbeConfig& config);

/// Cross-entropy of the probe on a fixed labeled batch, in eval mode.
template <class T>
std::function<double()> probe_loss_fn(EncoderProbe<T>& probe, const Tensor<float>& batch, std::vector<int> labels);

extern template class EncoderProbe<float>;
extern template class EncoderProbe<double>;

}  // namespace lamp
