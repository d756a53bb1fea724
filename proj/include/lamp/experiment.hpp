#pragma once

// Declarative experiment config and the train / eval / sweep / landscape
// commands built on it. The lamp CLI is a thin flag layer over this.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "lamp/data.hpp"
#include "lamp/eval.hpp"
#include "lamp/landscape.hpp"
#include "lamp/model.hpp"
#include "lamp/optim.hpp"

namespace lamp {

/// Flat key-value config. Unknown keys and ill-typed values are ConfigErrors
/// naming the key.
struct ExperimentConfig {
  // dataset
  std::string dataset = "mnist";  // mnist | mvtec
  std::filesystem::path data_dir = "data/mnist";
  int normal_class = 0;  // mnist
  std::string category;  // mvtec
  std::size_t image_size = 256;  // mvtec resize target
  bool grayscale = false;
  std::size_t max_train = 0;  // 0 = all
  std::size_t max_test = 0;

  AEConfig model = default_model();
  TrainConfig train;
  std::vector<std::uint64_t> seeds{0};
  std::filesystem::path out = "runs";

  std::size_t eval_batch_size = 256;
  PatchAggregation aggregation = PatchAggregation::Mean;

  // sweep axes; an empty axis falls back to the single value in `train`
  std::vector<std::string> sweep_losses;
  std::vector<std::string> sweep_optimizers;
  std::vector<std::size_t> sweep_batch_sizes;

  // landscape
  std::size_t landscape_dims = 2;
  std::size_t landscape_resolution = 51;
  double landscape_range = 1.0;
  std::vector<std::uint64_t> direction_seeds{1, 2};
  std::size_t landscape_samples = 1024;  // fixed evaluation batch, taken from the normal train set
  std::string landscape_loss = "own";    // "own" (each model's training loss), a loss spec, or "probe"
  DirectionNorm normalization = DirectionNorm::Filter;
  std::size_t probe_epochs = 50;

  static AEConfig default_model();
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::filesystem::path& path);
  nlohmann::json to_json() const;
  /// Sets one key from text: JSON when it parses as JSON, else a plain string.
  void set(const std::string& key, const std::string& value);

  void validate() const;
  /// FNV-1a over the canonical JSON without `out`.
  std::string fingerprint() const;
  /// This config narrowed to one seed; its fingerprint identifies a single run.
  ExperimentConfig for_seed(std::uint64_t seed) const;
};

std::string fnv1a_hex(std::string_view text);

ADTask load_experiment_task(const ExperimentConfig& config);
/// Model config with input channels and size taken from the task images.
AEConfig model_config_for(const ExperimentConfig& config, const ADTask& task);
TrainConfig train_config_for(const ExperimentConfig& config, std::uint64_t seed);
/// First `landscape_samples` normal training images.
Tensor<float> fixed_batch(const ExperimentConfig& config, const ADTask& task);

struct Run {
  ExperimentConfig config;  // narrowed to the run's seed
  std::uint64_t seed = 0;
  std::string fingerprint;
  AEModel<float> model;
  TrainHistory history;
  ParameterFile optimizer_state;
};

/// Trains one seed on `task`.
Run train_run(const ExperimentConfig& config, const ADTask& task, std::uint64_t seed);
/// `model.*` checkpoint files plus history.json, timing.json and run.json in `dir`.
void save_run(const Run& run, const std::filesystem::path& dir);
Run load_run(const std::filesystem::path& dir);

/// Reconstruction loss of the model on `batch`, eval mode.
double fixed_batch_loss(AEModel<float>& model, const Tensor<float>& batch, const std::string& loss,
                        const LampConfig& lamp);

struct SweepRow {
  std::string kind;  // run | error | mean
  std::string task;
  std::string loss;
  std::string optimizer;
  std::size_t batch_size = 0;
  std::string seed;  // number, or "mean"
  std::optional<double> auroc;
  std::optional<double> final_loss;
  std::string fingerprint;
  std::string error;
};

std::vector<SweepRow> read_sweep_csv(const std::filesystem::path& path);
void write_sweep_csv(const std::filesystem::path& path, const std::vector<SweepRow>& rows);
/// One mean row per (task, loss, optimizer, batch size) over its successful seed rows.
std::vector<SweepRow> aggregate_sweep(const std::vector<SweepRow>& runs);

// Commands. Each writes only under its output directory and reports to `log`.
int cmd_train(const ExperimentConfig& config, std::ostream& log);
int cmd_eval(const std::filesystem::path& run_dir, const std::filesystem::path& out,
             const ExperimentConfig* task_override, std::ostream& log);
int cmd_sweep(const ExperimentConfig& config, std::ostream& log);
int cmd_landscape(const std::vector<std::filesystem::path>& run_dirs, const ExperimentConfig& config,
                  std::ostream& log);

/// Exit code for an exception: 2 config, 3 data, 4 numeric, 1 anything else.
int exit_code_for(const std::exception& e);

}  // namespace lamp
