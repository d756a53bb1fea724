#include "lamp/eval.hpp"

#include <algorithm>
#include <numeric>

#include "lamp/error.hpp"
#include "lamp/optim.hpp"

namespace lamp {

std::string to_string(PatchAggregation a) { return a == PatchAggregation::Mean ? "mean" : "max"; }

PatchAggregation parse_patch_aggregation(std::string_view text) {
  if (text == "mean") return PatchAggregation::Mean;
  if (text == "max") return PatchAggregation::Max;
  throw ConfigError("unknown patch aggregation '" + std::string(text) + "' (expected mean or max)");
}

double auroc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ShapeError("auroc: score and label counts differ");
  std::size_t pos = 0;
  for (int l : labels) {
    if (l != 0 && l != 1) throw DataError("auroc: labels must be 0 or 1");
    pos += std::size_t(l);
  }
  const std::size_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0) throw DataError("auroc needs both normal and anomalous samples");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Sum of 1-based midranks of the positives.
  double rank_sum = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * double(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] == 1) rank_sum += midrank;
    }
    i = j;
  }
  const double u = rank_sum - 0.5 * double(pos) * double(pos + 1);
  return u / (double(pos) * double(neg));
}

template <class T>
std::vector<double> reconstruction_scores(const Tensor<T>& y, const Tensor<T>& y_hat, std::size_t patches,
                                          PatchAggregation aggregation) {
  if (y.shape() != y_hat.shape()) {
    throw ShapeError("anomaly score: input " + to_string(y.shape()) + " vs reconstruction " +
                     to_string(y_hat.shape()));
  }
  if (y.rank() != 4) throw ShapeError("anomaly score expects [N,C,H,W]");
  const std::size_t n = y.dim(0), c = y.dim(1), h = y.dim(2), w = y.dim(3);
  if (patches == 0 || h % patches != 0 || w % patches != 0) {
    throw ShapeError("anomaly score: image not divisible into a " + std::to_string(patches) + "x" +
                     std::to_string(patches) + " grid");
  }
  const std::size_t ph = h / patches, pw = w / patches;
  const auto a = y.data(), b = y_hat.data();
  std::vector<double> out(n);
  std::vector<double> patch(patches * patches);
  for (std::size_t s = 0; s < n; ++s) {
    std::fill(patch.begin(), patch.end(), 0.0);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t r = 0; r < h; ++r)
        for (std::size_t col = 0; col < w; ++col) {
          const std::size_t i = ((s * c + ch) * h + r) * w + col;
          const double d = double(b[i]) - double(a[i]);
          patch[(r / ph) * patches + col / pw] += d * d;
        }
    const double per_patch = double(c * ph * pw);
    for (auto& p : patch) p /= per_patch;
    out[s] = aggregation == PatchAggregation::Mean
                 ? std::accumulate(patch.begin(), patch.end(), 0.0) / double(patch.size())
                 : *std::max_element(patch.begin(), patch.end());
  }
  return out;
}

std::vector<double> anomaly_scores(const Reconstructor& reconstruct, const Tensor<float>& pixels,
                                   std::size_t batch_size, std::size_t patches, PatchAggregation aggregation) {
  if (batch_size == 0) throw ConfigError("evaluation batch size must be positive");
  const std::size_t n = pixels.rank() == 0 ? 0 : pixels.dim(0);
  std::vector<double> scores;
  scores.reserve(n);
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t count = std::min(batch_size, n - start);
    idx.resize(count);
    std::iota(idx.begin(), idx.end(), start);
    const auto x = gather_samples<float>(pixels, idx);
    const auto s = reconstruction_scores(x, reconstruct(x), patches, aggregation);
    scores.insert(scores.end(), s.begin(), s.end());
  }
  return scores;
}

template <class T>
Reconstructor model_reconstructor(AEModel<T>& model) {
  return [&model](const Tensor<float>& x) {
    NoGradGuard no_grad;
    if constexpr (std::is_same_v<T, float>) {
      return model.forward(x, Mode::Eval).detach();
    } else {
      return cast_tensor<float>(model.forward(cast_tensor<T>(x), Mode::Eval).detach());
    }
  };
}

template <class T>
double anomaly_score(AEModel<T>& model, const Tensor<float>& sample, PatchAggregation aggregation) {
  Tensor<float> x = sample;
  if (sample.rank() == 3) x = reshape(sample.detach(), {1, sample.dim(0), sample.dim(1), sample.dim(2)});
  if (x.rank() != 4 || x.dim(0) != 1) throw ShapeError("anomaly_score expects one sample");
  return anomaly_scores(model_reconstructor(model), x, 1, model.config().patches, aggregation)[0];
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json s = nlohmann::json::array();
  for (const auto& x : samples) s.push_back({{"id", x.id}, {"score", x.score}, {"label", x.label}});
  return {{"task", task}, {"auroc", auroc}, {"fingerprint", fingerprint}, {"config", config}, {"samples", s}};
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  EvalReport r;
  j.at("task").get_to(r.task);
  j.at("auroc").get_to(r.auroc);
  j.at("fingerprint").get_to(r.fingerprint);
  if (j.contains("config")) r.config = j.at("config");
  for (const auto& s : j.at("samples")) {
    r.samples.push_back({s.at("id").get<std::string>(), s.at("score").get<double>(), s.at("label").get<int>()});
  }
  return r;
}

EvalReport evaluate_with(const Reconstructor& reconstruct, const ADTask& task, const EvalOptions& options) {
  if (!task.test.labeled()) throw DataError("task '" + task.name + "' has no test labels");
  const auto scores =
      anomaly_scores(reconstruct, task.test.pixels, options.batch_size, options.patches, options.aggregation);
  EvalReport r;
  r.task = task.name;
  r.fingerprint = options.fingerprint;
  r.config = options.config;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    r.samples.push_back({task.test.ids.at(i), scores[i], task.test.labels.at(i)});
  }
  r.auroc = auroc(scores, task.test.labels);
  return r;
}

template <class T>
EvalReport evaluate_task(AEModel<T>& model, const ADTask& task, EvalOptions options) {
  if (task.test.pixels.rank() != 4 || task.test.pixels.dim(1) != model.config().input_channels ||
      task.test.pixels.dim(2) != model.config().height || task.test.pixels.dim(3) != model.config().width) {
    throw ShapeError("task '" + task.name + "' images " + to_string(task.test.pixels.shape()) +
                     " do not fit the model input");
  }
  options.patches = model.config().patches;
  return evaluate_with(model_reconstructor(model), task, options);
}

#define LAMP_INSTANTIATE_EVAL(T)                                                                              \
  template std::vector<double> reconstruction_scores(const Tensor<T>&, const Tensor<T>&, std::size_t,        \
                                                     PatchAggregation);                                       \
  template Reconstructor model_reconstructor(AEModel<T>&);                                                    \
  template double anomaly_score(AEModel<T>&, const Tensor<float>&, PatchAggregation);                        \
  template EvalReport evaluate_task(AEModel<T>&, const ADTask&, EvalOptions);

LAMP_INSTANTIATE_EVAL(float)
LAMP_INSTANTIATE_EVAL(double)

}  // namespace lamp
