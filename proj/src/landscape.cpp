#include "lamp/landscape.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "lamp/error.hpp"

namespace lamp {

std::string to_string(DirectionNorm n) { return n == DirectionNorm::Filter ? "filter" : "none"; }

DirectionNorm parse_direction_norm(std::string_view text) {
  if (text == "filter") return DirectionNorm::Filter;
  if (text == "none") return DirectionNorm::None;
  throw ConfigError("unknown direction normalization '" + std::string(text) + "' (expected filter or none)");
}

template <class T>
Direction<T> random_direction(const std::vector<NamedParameter<T>>& params, std::uint64_t seed,
                              DirectionNorm normalization) {
  Direction<T> d;
  d.seed = seed;
  d.normalization = normalization;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (const auto& p : params) {
    const auto w = p.tensor.data();
    std::vector<T> v(w.size(), T(0));
    if (p.tensor.rank() >= 2) {
      for (auto& x : v) x = T(gauss(rng));
      if (normalization == DirectionNorm::Filter) {
        const std::size_t filters = p.tensor.dim(0), per = w.size() / filters;
        for (std::size_t f = 0; f < filters; ++f) {
          double wn = 0, dn = 0;
          for (std::size_t k = f * per; k < (f + 1) * per; ++k) {
            wn += double(w[k]) * double(w[k]);
            dn += double(v[k]) * double(v[k]);
          }
          const double scale = dn > 0 ? std::sqrt(wn) / std::sqrt(dn) : 0.0;
          for (std::size_t k = f * per; k < (f + 1) * per; ++k) v[k] = T(double(v[k]) * scale);
        }
      }
    }
    d.tensors.push_back(std::move(v));
  }
  return d;
}

void GridSpec::validate() const {
  if (resolution < 1) throw ConfigError("grid resolution must be at least 1");
  if (!(hi >= lo) || !std::isfinite(lo) || !std::isfinite(hi)) throw ConfigError("grid range must satisfy lo <= hi");
}

std::vector<double> GridSpec::coordinates() const {
  validate();
  if (resolution == 1) return {0.5 * (lo + hi)};
  std::vector<double> c(resolution);
  const double n = double(resolution - 1);
  for (std::size_t i = 0; i < resolution; ++i) c[i] = lo + (hi - lo) * double(i) / n;
  return c;
}

template <class T>
LandscapeGrid loss_grid(std::vector<NamedParameter<T>>& params, const std::function<double()>& loss_fn,
                        const Direction<T>& d1, const std::type_identity_t<Direction<T>>* d2, const GridSpec& spec) {
  auto check = [&](const Direction<T>& d, const char* which) {
    if (d.tensors.size() != params.size()) {
      throw ShapeError(std::string("direction ") + which + " has " + std::to_string(d.tensors.size()) +
                       " tensors for " + std::to_string(params.size()) + " parameters");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (d.tensors[i].size() != params[i].tensor.numel()) {
        throw ShapeError(std::string("direction ") + which + " does not match parameter " + params[i].name);
      }
    }
  };
  check(d1, "1");
  if (d2) check(*d2, "2");

  LandscapeGrid grid;
  grid.alphas = spec.coordinates();
  if (d2) grid.betas = grid.alphas;
  std::vector<std::vector<T>> saved;
  for (const auto& p : params) saved.emplace_back(p.tensor.data().begin(), p.tensor.data().end());

  auto displace = [&](double a, double b) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto w = params[i].tensor.mutable_data();
      const auto& base = saved[i];
      const auto& u = d1.tensors[i];
      if (d2) {
        const auto& v = d2->tensors[i];
        for (std::size_t k = 0; k < w.size(); ++k) w[k] = base[k] + T(a) * u[k] + T(b) * v[k];
      } else {
        for (std::size_t k = 0; k < w.size(); ++k) w[k] = base[k] + T(a) * u[k];
      }
    }
  };
  auto restore = [&] {
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto w = params[i].tensor.mutable_data();
      std::copy(saved[i].begin(), saved[i].end(), w.begin());
    }
  };

  try {
    const std::size_t nb = d2 ? grid.betas.size() : 1;
    for (double a : grid.alphas) {
      for (std::size_t j = 0; j < nb; ++j) {
        displace(a, d2 ? grid.betas[j] : 0.0);
        grid.values.push_back(loss_fn());
      }
    }
  } catch (...) {
    restore();
    throw;
  }
  restore();
  grid.metadata["direction_seeds"] = d2 ? nlohmann::json{d1.seed, d2->seed} : nlohmann::json{d1.seed};
  grid.metadata["normalization"] = to_string(d1.normalization);
  grid.metadata["range"] = {spec.lo, spec.hi};
  grid.metadata["resolution"] = spec.resolution;
  return grid;
}

double sharpness_index(const LandscapeGrid& grid) {
  const std::size_t na = grid.alphas.size(), nb = grid.two_d() ? grid.betas.size() : 1;
  if (grid.values.size() != na * nb) throw ShapeError("landscape grid has inconsistent sizes");
  if (na < 2 && nb < 2) throw ConfigError("sharpness index needs at least two grid points along an axis");
  double total = 0;
  std::size_t count = 0;
  if (na >= 2) {
    const double step = (grid.alphas.back() - grid.alphas.front()) / double(na - 1);
    if (!(step > 0)) throw ConfigError("sharpness index needs a non-degenerate alpha range");
    for (std::size_t i = 0; i + 1 < na; ++i)
      for (std::size_t j = 0; j < nb; ++j) {
        total += std::abs(grid.at(i + 1, j) - grid.at(i, j)) / step;
        ++count;
      }
  }
  if (nb >= 2) {
    const double step = (grid.betas.back() - grid.betas.front()) / double(nb - 1);
    if (!(step > 0)) throw ConfigError("sharpness index needs a non-degenerate beta range");
    for (std::size_t i = 0; i < na; ++i)
      for (std::size_t j = 0; j + 1 < nb; ++j) {
        total += std::abs(grid.at(i, j + 1) - grid.at(i, j)) / step;
        ++count;
      }
  }
  return total / double(count);
}

template <class T>
std::function<double()> reconstruction_loss_fn(AEModel<T>& model, const Tensor<float>& batch,
                                               const LossSpec& loss, const LampConfig& lamp) {
  auto x = std::make_shared<Tensor<T>>(cast_tensor<T>(batch));
  return [&model, x, loss, lamp] {
    NoGradGuard no_grad;
    return reconstruction_loss(*x, model.forward(*x, Mode::Eval), loss, lamp).item();
  };
}

void write_grid_csv(const std::filesystem::path& path, const LandscapeGrid& grid) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out.precision(17);
  out << "alpha,beta,loss\n";
  const std::size_t nb = grid.two_d() ? grid.betas.size() : 1;
  for (std::size_t i = 0; i < grid.alphas.size(); ++i)
    for (std::size_t j = 0; j < nb; ++j) {
      out << grid.alphas[i] << ',' << (grid.two_d() ? grid.betas[j] : 0.0) << ',' << grid.at(i, j) << '\n';
    }
}

LandscapeGrid read_grid_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "alpha,beta,loss") throw FormatError(path.string() + ": unexpected header");
  std::vector<double> a, b, v;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    double x, y, z;
    char c1, c2;
    if (!(ss >> x >> c1 >> y >> c2 >> z)) throw FormatError(path.string() + ": malformed row");
    a.push_back(x);
    b.push_back(y);
    v.push_back(z);
  }
  LandscapeGrid g;
  g.values = v;
  for (double x : a)
    if (g.alphas.empty() || g.alphas.back() != x) g.alphas.push_back(x);
  if (g.alphas.size() != a.size()) {
    const std::size_t nb = a.size() / g.alphas.size();
    g.betas.assign(b.begin(), b.begin() + std::ptrdiff_t(nb));
  }
  return g;
}

std::vector<int> class_ids(const ImageBatch& batch) {
  if (batch.class_tags.size() != batch.size()) throw DataError("batch has no class tags");
  std::vector<int> out;
  for (const auto& tag : batch.class_tags) {
    std::size_t used = 0;
    int v = -1;
    try {
      v = std::stoi(tag, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != tag.size() || v < 0) throw DataError("class tag '" + tag + "' is not a class index");
    out.push_back(v);
  }
  return out;
}

template <class T>
EncoderProbe<T>::EncoderProbe(const AEModel<T>& source, std::size_t num_classes, const ProbeConfig& config)
    : model_(config.fresh_encoder ? AEModel<T>::build(source.config(), config.seed) : source.clone()),
      classes_(num_classes) {
  if (num_classes < 2) throw DataError("probe needs at least two classes");
  const auto& c = model_.config();
  if (c.patches != 1) throw ConfigError("probe expects a whole-image model (patches = 1)");
  const std::size_t unit = std::size_t(1) << c.depth;
  const std::size_t features = c.encoder_channels().back() * (c.network_height() / unit) * (c.network_width() / unit);

  for (auto& p : model_.parameters()) {
    if (p.name.rfind("encoder.", 0) == 0) params_.push_back(p);
  }
  std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  const double bound = 1.0 / std::sqrt(double(features));
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<T> wv(num_classes * features);
  for (auto& x : wv) x = T(u(rng));
  params_.push_back({"head.weight", Tensor<T>::from({num_classes, features}, std::move(wv), true)});
  params_.push_back({"head.bias", Tensor<T>::zeros({num_classes}, true)});
}

template <class T>
Tensor<T> EncoderProbe<T>::logits(const Tensor<T>& batch, Mode mode) {
  auto z = model_.encode(batch, mode);
  z = reshape(z, {z.dim(0), z.numel() / z.dim(0)});
  return linear(z, params_[params_.size() - 2].tensor, params_.back().tensor);
}

template <class T>
double EncoderProbe<T>::loss(const Tensor<float>& batch, std::span<const int> labels, Mode mode) {
  NoGradGuard no_grad;
  return cross_entropy(logits(cast_tensor<T>(batch), mode), labels).item();
}

template <class T>
double EncoderProbe<T>::accuracy(const Tensor<float>& batch, std::span<const int> labels) {
  NoGradGuard no_grad;
  const auto z = logits(cast_tensor<T>(batch), Mode::Eval);
  const auto d = z.data();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto row = d.subspan(i * classes_, classes_);
    correct += std::size_t(std::max_element(row.begin(), row.end()) - row.begin()) == std::size_t(labels[i]);
  }
  return double(correct) / double(labels.size());
}

template <class T>
std::function<double()> probe_loss_fn(EncoderProbe<T>& probe, const Tensor<float>& batch, std::vector<int> labels) {
  auto x = std::make_shared<Tensor<float>>(batch);
  auto l = std::make_shared<std::vector<int>>(std::move(labels));
  return [&probe, x, l] { return probe.loss(*x, *l, Mode::Eval); };
}

template <class T>
std::pair<EncoderProbe<T>, ProbeResult> encoder_probe_train(const AEModel<T>& model, const ImageBatch& data,
                                                            const ProbeConfig& config) {
  if (config.epochs < 1 || config.batch_size < 1) throw ConfigError("probe: epochs and batch_size must be >= 1");
  const auto labels = class_ids(data);
  if (labels.empty()) throw DataError("probe: no training samples");
  const int max_label = *std::max_element(labels.begin(), labels.end());
  std::size_t k = config.num_classes;
  if (k == 0) {
    k = std::size_t(max_label) + 1;
  } else if (std::size_t(max_label) >= k) {
    throw DataError("probe: label " + std::to_string(max_label) + " does not fit " + std::to_string(k) +
                    " classes");
  }

  EncoderProbe<T> probe(model, k, config);
  Optimizer<T> opt(config.optimizer, probe.parameters());
  ProbeResult result;
  const std::size_t n = data.size();
  std::vector<int> batch_labels;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = epoch_order(n, config.seed, epoch, true);
    double weighted = 0;
    for (std::size_t start = 0; start < n; start += config.batch_size) {
      const std::size_t count = std::min(config.batch_size, n - start);
      const auto idx = std::span(order).subspan(start, count);
      const auto x = gather_samples<T>(data.pixels, idx);
      batch_labels.clear();
      for (std::size_t i : idx) batch_labels.push_back(labels[i]);
      auto loss = cross_entropy(probe.logits(x, Mode::Train), batch_labels);
      const double value = loss.item();
      if (!std::isfinite(value)) throw NumericError("probe: non-finite loss in epoch " + std::to_string(epoch));
      loss.backward();
      opt.step();
      opt.zero_grad();
      weighted += value * double(count);
    }
    result.epoch_loss.push_back(weighted / double(n));
  }
  result.train_accuracy = probe.accuracy(data.pixels, labels);
  return {std::move(probe), result};
}

#define LAMP_INSTANTIATE_LANDSCAPE(T)                                                                    \
  template Direction<T> random_direction(const std::vector<NamedParameter<T>>&, std::uint64_t,         \
                                         DirectionNorm);                                                \
  template LandscapeGrid loss_grid(std::vector<NamedParameter<T>>&, const std::function<double()>&,      \
                                   const Direction<T>&, const Direction<T>*, const GridSpec&);          \
  template std::function<double()> reconstruction_loss_fn(AEModel<T>&, const Tensor<float>&,             \
                                                          const LossSpec&, const LampConfig&);          \
  template class EncoderProbe<T>;                                                                        \
  template std::function<double()> probe_loss_fn(EncoderProbe<T>&, const Tensor<float>&, std::vector<int>); \
  template std::pair<EncoderProbe<T>, ProbeResult> encoder_probe_train(const AEModel<T>&, const ImageBatch&, \
                                                                       const ProbeConfig&);

LAMP_INSTANTIATE_LANDSCAPE(float)
LAMP_INSTANTIATE_LANDSCAPE(double)

}  // namespace lamp
