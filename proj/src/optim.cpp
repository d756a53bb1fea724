#include "lamp/optim.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>

#include "lamp/error.hpp"

namespace lamp {

std::string to_string(OptimizerKind kind) {
  switch (kind) {
    case OptimizerKind::SGD: return "sgd";
    case OptimizerKind::RMSprop: return "rmsprop";
    case OptimizerKind::Adam: return "adam";
  }
  return "?";
}

OptimizerKind parse_optimizer(std::string_view text) {
  std::string s(text);
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return char(std::tolower(c)); });
  if (s == "sgd") return OptimizerKind::SGD;
  if (s == "rmsprop") return OptimizerKind::RMSprop;
  if (s == "adam") return OptimizerKind::Adam;
  throw ConfigError("unknown optimizer '" + std::string(text) + "' (expected sgd, rmsprop or adam)");
}

void OptimizerConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("optimizer: " + m); };
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) fail("learning_rate must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum must lie in [0,1)");
  if (!(rho >= 0.0 && rho < 1.0)) fail("rho must lie in [0,1)");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) fail("beta1 must lie in [0,1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) fail("beta2 must lie in [0,1)");
  if (!(eps > 0.0)) fail("eps must be positive");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be >= 0");
  if (!(grad_clip_norm >= 0.0)) fail("grad_clip_norm must be >= 0");
  if (!(lr_decay_gamma > 0.0 && lr_decay_gamma <= 1.0)) fail("lr_decay_gamma must lie in (0,1]");
}

void to_json(nlohmann::json& j, const OptimizerConfig& c) {
  j = nlohmann::json{{"kind", to_string(c.kind)},  {"learning_rate", c.learning_rate},
                     {"momentum", c.momentum},     {"rho", c.rho},
                     {"beta1", c.beta1},           {"beta2", c.beta2},
                     {"eps", c.eps},               {"weight_decay", c.weight_decay},
                     {"grad_clip_norm", c.grad_clip_norm}, {"lr_decay_every", c.lr_decay_every},
                     {"lr_decay_gamma", c.lr_decay_gamma}};
}

void from_json(const nlohmann::json& j, OptimizerConfig& c) {
  c = OptimizerConfig{};
  if (j.contains("kind")) c.kind = parse_optimizer(j.at("kind").get<std::string>());
  auto opt = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  opt("learning_rate", c.learning_rate);
  opt("momentum", c.momentum);
  opt("rho", c.rho);
  opt("beta1", c.beta1);
  opt("beta2", c.beta2);
  opt("eps", c.eps);
  opt("weight_decay", c.weight_decay);
  opt("grad_clip_norm", c.grad_clip_norm);
  opt("lr_decay_every", c.lr_decay_every);
  opt("lr_decay_gamma", c.lr_decay_gamma);
}

template <class T>
void optimizer_step(std::span<T> w, std::span<const T> g, const OptimizerConfig& config,
                    ParamState<T>& state, std::uint64_t step, double learning_rate) {
  if (w.size() != g.size()) throw ShapeError("optimizer_step: gradient size differs from parameter size");
  const std::size_t n = w.size();
  const T lr = T(learning_rate), eps = T(config.eps);
  switch (config.kind) {
    case OptimizerKind::SGD: {
      if (config.momentum == 0.0) {
        for (std::size_t i = 0; i < n; ++i) w[i] -= lr * g[i];
        return;
      }
      const T mu = T(config.momentum);
      if (state.first.empty()) {
        state.first.assign(g.begin(), g.end());
      } else {
        for (std::size_t i = 0; i < n; ++i) state.first[i] = mu * state.first[i] + g[i];
      }
      for (std::size_t i = 0; i < n; ++i) w[i] -= lr * state.first[i];
      return;
    }
    case OptimizerKind::RMSprop: {
      const T rho = T(config.rho);
      if (state.second.empty()) state.second.assign(n, T(0));
      for (std::size_t i = 0; i < n; ++i) {
        T& v = state.second[i];
        v = rho * v + (T(1) - rho) * g[i] * g[i];
        w[i] -= lr * g[i] / (std::sqrt(v) + eps);
      }
      return;
    }
    case OptimizerKind::Adam: {
      const T b1 = T(config.beta1), b2 = T(config.beta2);
      if (state.first.empty()) state.first.assign(n, T(0));
      if (state.second.empty()) state.second.assign(n, T(0));
      const T c1 = T(1.0 - std::pow(config.beta1, double(step)));
      const T c2 = T(1.0 - std::pow(config.beta2, double(step)));
      for (std::size_t i = 0; i < n; ++i) {
        T& m = state.first[i];
        T& v = state.second[i];
        m = b1 * m + (T(1) - b1) * g[i];
        v = b2 * v + (T(1) - b2) * g[i] * g[i];
        w[i] -= lr * (m / c1) / (std::sqrt(v / c2) + eps);
      }
      return;
    }
  }
}

template <class T>
Optimizer<T>::Optimizer(const OptimizerConfig& config, const std::vector<NamedParameter<T>>& params)
    : config_(config), params_(params), state_(params.size()) {
  config_.validate();
}

template <class T>
double Optimizer<T>::current_learning_rate() const {
  if (config_.lr_decay_every == 0) return config_.learning_rate;
  return config_.learning_rate * std::pow(config_.lr_decay_gamma, double(steps_ / config_.lr_decay_every));
}

template <class T>
void Optimizer<T>::step() {
  for (const auto& p : params_) {
    if (!p.tensor.has_grad()) throw NumericError("optimizer step: parameter '" + p.name + "' has no gradient");
  }
  const double lr = current_learning_rate();
  double clip_scale = 1.0;
  if (config_.grad_clip_norm > 0.0) {
    double total = 0;
    for (const auto& p : params_)
      for (T g : p.tensor.grad()) total += double(g) * double(g);
    const double norm = std::sqrt(total);
    if (norm > config_.grad_clip_norm) clip_scale = config_.grad_clip_norm / norm;
  }
  ++steps_;
  std::vector<T> adjusted;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& t = params_[i].tensor;
    std::span<const T> g = t.grad();
    if (config_.weight_decay > 0.0 || clip_scale != 1.0) {
      const auto w = t.data();
      adjusted.resize(g.size());
      for (std::size_t k = 0; k < g.size(); ++k) {
        adjusted[k] = T(clip_scale) * g[k] + T(config_.weight_decay) * w[k];
      }
      g = adjusted;
    }
    optimizer_step<T>(t.mutable_data(), g, config_, state_[i], steps_, lr);
  }
}

template <class T>
void Optimizer<T>::zero_grad() {
  for (auto& p : params_) p.tensor.clear_grad();
}

template <class T>
ParameterFile Optimizer<T>::state_file() const {
  ParameterFile f;
  f.precision = precision_of<T>();
  f.records.push_back(make_record<double>("optimizer.steps", Shape{1}, {double(steps_)}));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& s = state_[i];
    const auto& shape = params_[i].tensor.shape();
    if (!s.first.empty()) f.records.push_back(make_record(params_[i].name + ".first", shape, s.first));
    if (!s.second.empty()) f.records.push_back(make_record(params_[i].name + ".second", shape, s.second));
  }
  return f;
}

template <class T>
void Optimizer<T>::load_state_file(const ParameterFile& file) {
  const auto* steps = file.find("optimizer.steps");
  if (!steps || steps->values.size() != 1) throw FormatError("optimizer state: missing step counter");
  std::vector<ParamState<T>> loaded(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& shape = params_[i].tensor.shape();
    auto take = [&](const std::string& suffix, std::vector<T>& slot) {
      const auto* r = file.find(params_[i].name + suffix);
      if (!r) return;
      if (r->shape != shape) throw FormatError("optimizer state: shape mismatch for " + r->name);
      slot.assign(r->values.begin(), r->values.end());
    };
    take(".first", loaded[i].first);
    take(".second", loaded[i].second);
  }
  state_ = std::move(loaded);
  steps_ = std::uint64_t(steps->values[0]);
}

// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (patches < 1) throw ConfigError("train: patches must be >= 1");
  LossSpec::parse(loss);
  lamp.validate();
  optimizer.validate();
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"seed", c.seed},
                     {"loss", c.loss},
                     {"epsilon", c.lamp.epsilon},
                     {"reduction", to_string(c.lamp.reduction)},
                     {"optimizer", c.optimizer},
                     {"patches", c.patches},
                     {"shuffle", c.shuffle}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c = TrainConfig{};
  auto opt = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  opt("epochs", c.epochs);
  opt("batch_size", c.batch_size);
  opt("seed", c.seed);
  opt("loss", c.loss);
  opt("epsilon", c.lamp.epsilon);
  if (j.contains("reduction")) c.lamp.reduction = parse_reduction(j.at("reduction").get<std::string>());
  opt("optimizer", c.optimizer);
  opt("patches", c.patches);
  opt("shuffle", c.shuffle);
}

nlohmann::json TrainHistory::to_json() const {
  return {{"loss_kind", loss_kind}, {"epoch_loss", epoch_loss}, {"steps", steps}};
}

nlohmann::json TrainHistory::timing_json() const { return {{"epoch_seconds", epoch_seconds}}; }

TrainHistory TrainHistory::from_json(const nlohmann::json& j) {
  TrainHistory h;
  j.at("loss_kind").get_to(h.loss_kind);
  j.at("epoch_loss").get_to(h.epoch_loss);
  j.at("steps").get_to(h.steps);
  if (j.contains("epoch_seconds")) j.at("epoch_seconds").get_to(h.epoch_seconds);
  return h;
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch, bool shuffle) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  if (shuffle) {
    std::mt19937_64 rng(seed + epoch);
    // Fisher-Yates with an explicit bounded draw so the order does not depend
    // on the standard library's shuffle/distribution implementation.
    for (std::size_t i = n; i > 1; --i) {
      const std::size_t j = std::size_t(rng() % i);
      std::swap(order[i - 1], order[j]);
    }
  }
  return order;
}

template <class T>
Tensor<T> gather_samples(const Tensor<float>& pixels, std::span<const std::size_t> indices) {
  Shape s = pixels.shape();
  const std::size_t per = pixels.numel() / s[0];
  std::vector<T> out(indices.size() * per);
  const auto src = pixels.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    std::copy_n(src.begin() + indices[i] * per, per, out.begin() + i * per);
  }
  s[0] = indices.size();
  return Tensor<T>::from(std::move(s), std::move(out));
}

template <class T>
TrainHistory train(AEModel<T>& model, const ImageBatch& data, const TrainConfig& config,
                   const StepObserver<T>& observer, Optimizer<T>* external) {
  config.validate();
  if (config.patches != model.config().patches) {
    throw ConfigError("train: patches = " + std::to_string(config.patches) +
                      " but the model was built for " + std::to_string(model.config().patches));
  }
  for (std::size_t i = 0; i < data.labels.size(); ++i) {
    if (data.labels[i] != 0) {
      throw DataError("training data contains an anomalous sample (" +
                      (i < data.ids.size() ? data.ids[i] : std::to_string(i)) + ")");
    }
  }
  const std::size_t n = data.size();
  if (n == 0) throw DataError("training data is empty");

  const LossSpec spec = LossSpec::parse(config.loss);
  std::optional<Optimizer<T>> local;
  if (!external) local.emplace(config.optimizer, model.parameters());
  Optimizer<T>& optimizer = external ? *external : *local;
  TrainHistory history;
  history.loss_kind = spec.str();

  std::uint64_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto order = epoch_order(n, config.seed, epoch, config.shuffle);
    double weighted = 0;
    for (std::size_t start = 0; start < n; start += config.batch_size) {
      const std::size_t count = std::min(config.batch_size, n - start);
      const auto x = gather_samples<T>(data.pixels, std::span(order).subspan(start, count));
      const auto y_hat = model.forward(x, Mode::Train);
      auto loss = reconstruction_loss(x, y_hat, spec, config.lamp);
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw NumericError("non-finite training loss " + std::to_string(value) + " at step " +
                           std::to_string(step) + " (epoch " + std::to_string(epoch) + ")");
      }
      loss.backward();
      optimizer.step();
      optimizer.zero_grad();
      if (observer) {
        const auto detached = y_hat.detach();
        observer(StepInfo<T>{epoch, step, value, x, detached});
      }
      weighted += value * double(count);
      ++step;
    }
    history.epoch_loss.push_back(weighted / double(n));
    history.epoch_seconds.push_back(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  history.steps = step;
  return history;
}

template <class T>
void save_checkpoint(const std::filesystem::path& stem, const AEModel<T>& model,
                     const Optimizer<T>& optimizer, const TrainHistory& history) {
  save_model(model, stem);
  auto p = stem;
  save_parameters(p.replace_extension(".optim"), optimizer.state_file());
  std::ofstream out(p.replace_extension(".history.json"));
  if (!out) throw FormatError("cannot write " + p.string());
  out << history.to_json().dump(2) << '\n';
}

#define LAMP_INSTANTIATE_OPTIM(T)                                                                   \
  template void optimizer_step(std::span<T>, std::span<const T>, const OptimizerConfig&,            \
                               ParamState<T>&, std::uint64_t, double);                              \
  template class Optimizer<T>;                                                                      \
  template TrainHistory train(AEModel<T>&, const ImageBatch&, const TrainConfig&,                   \
                              const StepObserver<T>&, Optimizer<T>*);                                            \
  template Tensor<T> gather_samples(const Tensor<float>&, std::span<const std::size_t>);            \
  template void save_checkpoint(const std::filesystem::path&, const AEModel<T>&, const Optimizer<T>&, \
                                const TrainHistory&);

LAMP_INSTANTIATE_OPTIM(float)
LAMP_INSTANTIATE_OPTIM(double)

}  // namespace lamp
