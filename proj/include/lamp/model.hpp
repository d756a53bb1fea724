#pragma once

// Convolutional autoencoder without skip connections.
//
//   encoder: depth x [conv k/s2 -> batchnorm -> leaky ReLU]
//   decoder: depth x [nearest 2x upsample -> conv k/s1 -> batchnorm -> leaky ReLU]
//            (the last decoder block ends in a sigmoid instead of BN + leaky ReLU)
//
// Channels double per encoder block from base_width up to channel_cap; the
// decoder mirrors them back to the input channel count.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "lamp/ops.hpp"
#include "lamp/serialize.hpp"

namespace lamp {

struct AEConfig {
  std::size_t depth = 4;
  std::size_t input_channels = 1;
  std::size_t height = 28;
  std::size_t width = 28;
  std::size_t kernel_size = 3;
  std::size_t base_width = 16;
  std::size_t channel_cap = 256;
  double leaky_slope = 0.2;
  std::size_t patches = 1;  // P x P grid; 1 = whole image
  bool skip_connections = false;
  // Zero-pad each (patch) input up to the next multiple of 2^depth and crop the
  // reconstruction back. Needed for sizes like 28x28 at depth 4.
  bool pad_to_fit = false;

  /// Defaults by depth: base width 16 at depth 4, 32 at depth 6.
  static AEConfig for_depth(std::size_t depth);

  void validate() const;
  std::size_t patch_height() const { return height / patches; }
  std::size_t patch_width() const { return width / patches; }
  /// Spatial extent the network itself sees (after optional padding).
  std::size_t network_height() const;
  std::size_t network_width() const;
  std::vector<std::size_t> encoder_channels() const;

  bool operator==(const AEConfig&) const = default;
};

void to_json(nlohmann::json& j, const AEConfig& c);
void from_json(const nlohmann::json& j, AEConfig& c);

template <class T>
struct NamedParameter {
  std::string name;
  Tensor<T> tensor;
};

/// [N,C,H,W] -> [N*P*P, C, H/P, W/P], patches of each sample in row-major order.
template <class T>
Tensor<T> patchify(const Tensor<T>& batch, std::size_t patches);
/// Inverse of patchify.
template <class T>
Tensor<T> unpatchify(const Tensor<T>& patches_batch, std::size_t patches);

template <class T>
class AEModel {
 public:
  static AEModel build(const AEConfig& config, std::uint64_t seed);

  AEModel(AEModel&&) noexcept = default;
  AEModel& operator=(AEModel&&) noexcept = default;
  AEModel(const AEModel&) = delete;
  AEModel& operator=(const AEModel&) = delete;

  /// Deep copy: parameters and batch-norm state are not shared.
  AEModel clone() const;

  const AEConfig& config() const { return config_; }
  std::vector<NamedParameter<T>>& parameters() { return params_; }
  const std::vector<NamedParameter<T>>& parameters() const { return params_; }
  std::vector<BatchNormState<T>>& bn_states() { return bn_; }
  const std::vector<BatchNormState<T>>& bn_states() const { return bn_; }
  const Tensor<T>& parameter(const std::string& name) const;

  /// Reconstruction with the same shape as `batch`, values in (0,1). Train
  /// mode updates batch-norm running statistics; eval mode has no side effects.
  Tensor<T> forward(const Tensor<T>& batch, Mode mode);
  /// Encoder output for whole images (padding applied, patches ignored).
  Tensor<T> encode(const Tensor<T>& batch, Mode mode);
  std::size_t parameter_count() const;
  void zero_grad();

  ParameterFile to_parameter_file() const;
  /// Copies parameters and batch-norm state from `file`; shapes must match the config.
  void load_parameter_file(const ParameterFile& file);

 private:
  AEModel() = default;
  Tensor<T> run_encoder(const Tensor<T>& x, Mode mode);
  Tensor<T> run_network(const Tensor<T>& x, Mode mode);
  void check_input(const Tensor<T>& batch) const;

  AEConfig config_;
  std::vector<NamedParameter<T>> params_;
  std::vector<BatchNormState<T>> bn_;  // encoder blocks, then decoder blocks except the last
};

/// Writes `<stem>.lampmodel` and `<stem>.json` next to each other. `path` may
/// carry either extension or none.
template <class T>
void save_model(const AEModel<T>& model, const std::filesystem::path& path);
template <class T>
AEModel<T> load_model(const std::filesystem::path& path);

std::filesystem::path model_binary_path(const std::filesystem::path& path);
std::filesystem::path model_config_path(const std::filesystem::path& path);

extern template class AEModel<float>;
extern template class AEModel<double>;

}  // namespace lamp
