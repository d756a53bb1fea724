#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "lamp/data.hpp"
#include "lamp/model.hpp"

namespace lamp {

enum class PatchAggregation { Mean, Max };

std::string to_string(PatchAggregation a);
PatchAggregation parse_patch_aggregation(std::string_view text);

/// Rank-based AUROC (Mann-Whitney U with midranks). Needs both labels present.
double auroc(std::span<const double> scores, std::span<const int> labels);

/// Mean squared error per sample of two [N,...] tensors; with patches > 1 each
/// sample is split into a P x P grid and the patch errors are aggregated.
template <class T>
std::vector<double> reconstruction_scores(const Tensor<T>& y, const Tensor<T>& y_hat, std::size_t patches = 1,
                                          PatchAggregation aggregation = PatchAggregation::Mean);

/// Maps a batch [n,C,H,W] (float pixels) to its reconstruction.
using Reconstructor = std::function<Tensor<float>(const Tensor<float>&)>;

/// Scores with plain L2 whatever loss the model was trained with.
std::vector<double> anomaly_scores(const Reconstructor& reconstruct, const Tensor<float>& pixels,
                                   std::size_t batch_size = 256, std::size_t patches = 1,
                                   PatchAggregation aggregation = PatchAggregation::Mean);

/// Eval-mode reconstruction through `model`, converting to and from T.
template <class T>
Reconstructor model_reconstructor(AEModel<T>& model);

template <class T>
double anomaly_score(AEModel<T>& model, const Tensor<float>& sample,
                     PatchAggregation aggregation = PatchAggregation::Mean);

struct ScoredSample {
  std::string id;
  double score;
  int label;
  bool operator==(const ScoredSample&) const = default;
};

struct EvalReport {
  std::string task;
  std::vector<ScoredSample> samples;
  double auroc = 0.5;
  std::string fingerprint;
  nlohmann::json config;  // whatever produced the model

  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
};

struct EvalOptions {
  std::size_t batch_size = 256;
  std::size_t patches = 1;
  PatchAggregation aggregation = PatchAggregation::Mean;
  std::string fingerprint;
  nlohmann::json config = nlohmann::json::object();
};

EvalReport evaluate_with(const Reconstructor& reconstruct, const ADTask& task, const EvalOptions& options = {});

template <class T>
EvalReport evaluate_task(AEModel<T>& model, const ADTask& task, EvalOptions options = {});

}  // namespace lamp
