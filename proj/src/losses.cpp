#include "lamp/losses.hpp"

#include <cmath>

#include "lamp/ops.hpp"

namespace lamp {

std::string to_string(BaseLoss kind) {
  switch (kind) {
    case BaseLoss::L2: return "l2";
    case BaseLoss::L1: return "l1";
    case BaseLoss::SSIM: return "ssim";
  }
  return "?";
}

std::string to_string(Reduction r) { return r == Reduction::Sum ? "sum" : "mean"; }

Reduction parse_reduction(std::string_view text) {
  if (text == "sum") return Reduction::Sum;
  if (text == "mean") return Reduction::Mean;
  throw ConfigError("unknown reduction '" + std::string(text) + "' (expected sum or mean)");
}

LossSpec LossSpec::parse(std::string_view text) {
  LossSpec spec;
  std::string_view base = text;
  constexpr std::string_view suffix = ".lamp";
  if (base.size() > suffix.size() && base.substr(base.size() - suffix.size()) == suffix) {
    spec.amplified = true;
    base.remove_suffix(suffix.size());
  }
  if (base == "l2") {
    spec.base = BaseLoss::L2;
  } else if (base == "l1") {
    spec.base = BaseLoss::L1;
  } else if (base == "ssim") {
    spec.base = BaseLoss::SSIM;
  } else {
    throw ConfigError("unknown loss '" + std::string(text) +
                      "' (expected l2, l1 or ssim, optionally with .lamp)");
  }
  return spec;
}

std::string LossSpec::str() const { return to_string(base) + (amplified ? ".lamp" : ""); }

void LampConfig::validate() const {
  if (!(epsilon > 0.0 && epsilon < 1.0)) {
    throw ConfigError("epsilon must lie strictly between 0 and 1, got " + std::to_string(epsilon));
  }
}

std::vector<double> gaussian_window(std::size_t size, double sigma) {
  if (size % 2 == 0) throw ConfigError("Gaussian window size must be odd");
  std::vector<double> w(size);
  const double c = double(size / 2);
  double total = 0;
  for (std::size_t i = 0; i < size; ++i) {
    const double d = double(i) - c;
    w[i] = std::exp(-d * d / (2 * sigma * sigma));
    total += w[i];
  }
  for (auto& v : w) v /= total;
  return w;
}

namespace {

template <class T>
void require_same_shape(const Tensor<T>& y, const Tensor<T>& y_hat, const char* what) {
  if (y.shape() != y_hat.shape()) {
    throw ShapeError(std::string(what) + ": target shape " + to_string(y.shape()) +
                     " differs from reconstruction shape " + to_string(y_hat.shape()));
  }
}

template <class T>
Tensor<T> blur(const Tensor<T>& x, std::span<const T> taps) {
  return filter1d_reflect(filter1d_reflect(x, taps, 2), taps, 3);
}

}  // namespace

template <class T>
LossMap<T> l2_map(const Tensor<T>& y, const Tensor<T>& y_hat) {
  require_same_shape(y, y_hat, "l2_map");
  return {square(sub(y_hat, y)), BaseLoss::L2};
}

template <class T>
LossMap<T> l1_map(const Tensor<T>& y, const Tensor<T>& y_hat) {
  require_same_shape(y, y_hat, "l1_map");
  return {abs(sub(y_hat, y)), BaseLoss::L1};
}

template <class T>
LossMap<T> ssim_map(const Tensor<T>& y, const Tensor<T>& y_hat, const SsimParams& params) {
  require_same_shape(y, y_hat, "ssim_map");
  if (y.rank() != 4) throw ShapeError("ssim_map expects [N,C,H,W], got " + to_string(y.shape()));
  if (y.dim(2) < params.window || y.dim(3) < params.window) {
    throw ShapeError("ssim_map: image " + std::to_string(y.dim(2)) + "x" + std::to_string(y.dim(3)) +
                     " is smaller than the " + std::to_string(params.window) + "-pixel window");
  }
  const auto w64 = gaussian_window(params.window, params.sigma);
  const std::vector<T> taps(w64.begin(), w64.end());
  const std::span<const T> k(taps);
  const T c1 = T(params.c1), c2 = T(params.c2);

  auto mu_x = blur(y, k);
  auto mu_y = blur(y_hat, k);
  auto mu_xy = mul(mu_x, mu_y);
  auto var_x = sub(blur(square(y), k), square(mu_x));
  auto var_y = sub(blur(square(y_hat), k), square(mu_y));
  auto cov = sub(blur(mul(y, y_hat), k), mu_xy);

  // With y == y_hat numerator and denominator are bitwise equal, so the map is exactly 0.
  auto num = mul(add_scalar(scalar_mul(mu_xy, T(2)), c1), add_scalar(scalar_mul(cov, T(2)), c2));
  auto den = mul(add_scalar(add(square(mu_x), square(mu_y)), c1), add_scalar(add(var_x, var_y), c2));
  auto ssim = div(num, den);
  auto loss = scalar_mul(add_scalar(neg(ssim), T(1)), T(0.5));
  return {clamp(loss, T(0), T(1)), BaseLoss::SSIM};
}

template <class T>
LossMap<T> base_map(const Tensor<T>& y, const Tensor<T>& y_hat, BaseLoss kind) {
  switch (kind) {
    case BaseLoss::L2: return l2_map(y, y_hat);
    case BaseLoss::L1: return l1_map(y, y_hat);
    case BaseLoss::SSIM: return ssim_map(y, y_hat);
  }
  throw ConfigError("unknown base loss");
}

template <class T>
LossMap<T> scale_loss_map(const LossMap<T>& map, double epsilon, std::optional<double> normalizer) {
  if (!(epsilon > 0.0 && epsilon < 1.0)) {
    throw ConfigError("epsilon must lie strictly between 0 and 1, got " + std::to_string(epsilon));
  }
  const T peak = normalizer ? T(*normalizer) : max_value(map.values);
  if (peak == T(0)) return map;
  // Division first: the peak element becomes exactly 1, so the output max is exactly T(1 - eps).
  return {scalar_mul(scalar_div(map.values, peak), T(1.0 - epsilon)), map.base_kind};
}

template <class T>
Tensor<T> reduce_map(const Tensor<T>& values, Reduction reduction) {
  if (reduction == Reduction::Mean) return mean(values);
  return scalar_div(sum(values), T(values.dim(0)));
}

template <class T>
Tensor<T> lamp_from_map(const LossMap<T>& map, const LampConfig& config,
                        std::optional<double> normalizer) {
  config.validate();
  auto scaled = scale_loss_map(map, config.epsilon, normalizer);
  auto amplified = neg(log(add_scalar(neg(scaled.values), T(1))));
  return reduce_map(amplified, config.reduction);
}

template <class T>
Tensor<T> lamp_loss(const Tensor<T>& y, const Tensor<T>& y_hat, BaseLoss base,
                    const LampConfig& config) {
  return lamp_from_map(base_map(y, y_hat, base), config);
}

template <class T>
Tensor<T> base_loss(const Tensor<T>& y, const Tensor<T>& y_hat, BaseLoss base, Reduction reduction) {
  return reduce_map(base_map(y, y_hat, base).values, reduction);
}

template <class T>
Tensor<T> reconstruction_loss(const Tensor<T>& y, const Tensor<T>& y_hat, const LossSpec& spec,
                              const LampConfig& config) {
  if (spec.amplified) return lamp_loss(y, y_hat, spec.base, config);
  return base_loss(y, y_hat, spec.base, config.reduction);
}

template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  return softmax_cross_entropy(logits, labels);
}

#define LAMP_INSTANTIATE_LOSSES(T)                                                              \
  template LossMap<T> l2_map(const Tensor<T>&, const Tensor<T>&);                               \
  template LossMap<T> l1_map(const Tensor<T>&, const Tensor<T>&);                               \
  template LossMap<T> ssim_map(const Tensor<T>&, const Tensor<T>&, const SsimParams&);          \
  template LossMap<T> base_map(const Tensor<T>&, const Tensor<T>&, BaseLoss);                   \
  template LossMap<T> scale_loss_map(const LossMap<T>&, double, std::optional<double>);         \
  template Tensor<T> reduce_map(const Tensor<T>&, Reduction);                                   \
  template Tensor<T> lamp_from_map(const LossMap<T>&, const LampConfig&, std::optional<double>); \
  template Tensor<T> lamp_loss(const Tensor<T>&, const Tensor<T>&, BaseLoss, const LampConfig&); \
  template Tensor<T> base_loss(const Tensor<T>&, const Tensor<T>&, BaseLoss, Reduction);        \
  template Tensor<T> reconstruction_loss(const Tensor<T>&, const Tensor<T>&, const LossSpec&,   \
                                         const LampConfig&);                                    \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const int>);

LAMP_INSTANTIATE_LOSSES(float)
LAMP_INSTANTIATE_LOSSES(double)

}  // namespace lamp
