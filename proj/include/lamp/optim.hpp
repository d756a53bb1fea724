#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "lamp/data.hpp"
#include "lamp/losses.hpp"
#include "lamp/model.hpp"
#include "lamp/serialize.hpp"

namespace lamp {

enum class OptimizerKind { SGD, RMSprop, Adam };

std::string to_string(OptimizerKind kind);
/// "sgd", "rmsprop" or "adam" (case-insensitive).
OptimizerKind parse_optimizer(std::string_view text);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Adam;
  double learning_rate = 1e-3;
  double momentum = 0.0;  // SGD
  double rho = 0.9;       // RMSprop
  double beta1 = 0.9;     // Adam
  double beta2 = 0.999;
  double eps = 1e-8;
  // Off by default.
  double weight_decay = 0.0;    // L2 penalty folded into the gradient
  double grad_clip_norm = 0.0;  // global norm clip; 0 = none
  std::size_t lr_decay_every = 0;  // steps between decays; 0 = constant lr
  double lr_decay_gamma = 1.0;

  void validate() const;
  bool operator==(const OptimizerConfig&) const = default;
};

void to_json(nlohmann::json& j, const OptimizerConfig& c);
void from_json(const nlohmann::json& j, OptimizerConfig& c);

/// Per-parameter optimizer slots. SGD uses `first` as its velocity, RMSprop
/// uses `second` as the square average, Adam uses both moments.
template <class T>
struct ParamState {
  std::vector<T> first;
  std::vector<T> second;
};

/// One update of a single parameter. `step` is the 1-based count of this
/// update (Adam bias correction). Slots are allocated on first use.
template <class T>
void optimizer_step(std::span<T> w, std::span<const T> g, const OptimizerConfig& config,
                    ParamState<T>& state, std::uint64_t step, double learning_rate);

template <class T>
class Optimizer {
 public:
  Optimizer(const OptimizerConfig& config, const std::vector<NamedParameter<T>>& params);

  /// Applies one update to every parameter. Throws NumericError naming the
  /// first parameter without a gradient.
  void step();
  void zero_grad();
  std::uint64_t steps() const { return steps_; }
  double current_learning_rate() const;
  const OptimizerConfig& config() const { return config_; }
  const std::vector<ParamState<T>>& state() const { return state_; }

  ParameterFile state_file() const;
  void load_state_file(const ParameterFile& file);

 private:
  OptimizerConfig config_;
  std::vector<NamedParameter<T>> params_;
  std::vector<ParamState<T>> state_;
  std::uint64_t steps_ = 0;
};

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 128;
  std::uint64_t seed = 0;
  std::string loss = "l2";
  LampConfig lamp;
  OptimizerConfig optimizer;
  std::size_t patches = 1;  // must match the model
  bool shuffle = true;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct TrainHistory {
  std::string loss_kind;            // e.g. "l2.lamp"
  std::vector<double> epoch_loss;   // sample-weighted mean training loss per epoch
  std::vector<double> epoch_seconds;
  std::uint64_t steps = 0;

  /// Deterministic part only: loss tag, losses and step count.
  nlohmann::json to_json() const;
  nlohmann::json timing_json() const;
  static TrainHistory from_json(const nlohmann::json& j);
};

template <class T>
struct StepInfo {
  std::size_t epoch;
  std::uint64_t step;  // 0-based global step
  double loss;
  const Tensor<T>& input;
  const Tensor<T>& reconstruction;  // graph-free copy
};

template <class T>
using StepObserver = std::function<void(const StepInfo<T>&)>;

/// Trains on normal samples only: any label 1 in `data` is a DataError. A
/// non-finite loss aborts with NumericError carrying the step index. Pass
/// `optimizer` (built over model.parameters()) to keep or resume its state.
template <class T>
TrainHistory train(AEModel<T>& model, const ImageBatch& data, const TrainConfig& config,
                   const StepObserver<T>& observer = {}, Optimizer<T>* optimizer = nullptr);

/// Per-epoch sample order: iota, shuffled with seed + epoch when requested.
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch, bool shuffle);

/// Gathers `indices` of an [N,...] float batch into a contiguous tensor of T.
template <class T>
Tensor<T> gather_samples(const Tensor<float>& pixels, std::span<const std::size_t> indices);

/// `<stem>.lampmodel`, `<stem>.json`, `<stem>.optim`, `<stem>.history.json`.
template <class T>
void save_checkpoint(const std::filesystem::path& stem, const AEModel<T>& model,
                     const Optimizer<T>& optimizer, const TrainHistory& history);

extern template class Optimizer<float>;
extern template class Optimizer<double>;

}  // namespace lamp
