// Acceptance run: one PASS/FAIL line per criterion.
//
//   acceptance            all criteria
//   acceptance 1 3 8      a subset
//
// Criteria 5-7 train the MNIST models (about 45 minutes on one core); the
// others finish in about a minute together.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "lamp/data.hpp"
#include "lamp/eval.hpp"
#include "lamp/experiment.hpp"
#include "lamp/landscape.hpp"
#include "lamp/losses.hpp"
#include "lamp/model.hpp"
#include "lamp/ops.hpp"
#include "lamp/optim.hpp"

using namespace lamp;
using lamp::testing::gradcheck;
using lamp::testing::gradcheck_against;
using lamp::testing::random_tensor;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / double(v.size());
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("lamp_acceptance_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// ---- 1 ---------------------------------------------------------------------

// Runs each x through the library's amplification: a one-element map whose
// frozen normalizer makes the scaled value x, so the loss is -log(1 - x) and
// its autodiff gradient with respect to the map is 1 / (1 - x).
Outcome amplification_suite() {
  std::mt19937_64 rng(101);
  std::uniform_real_distribution<double> u(0.0, 0.99);
  LampConfig cfg;
  double worst_gap = 1e300, worst_deriv = 1e300, worst_deriv_err = 0;
  std::size_t violations = 0;
  for (int i = 0; i < 10000; ++i) {
    const double x = i == 0 ? 0.0 : u(rng);
    auto map = Tensor<double>::from({1, 1, 1, 1}, {x}, true);
    auto loss = lamp_from_map(LossMap<double>{map, BaseLoss::L2}, cfg, 1.0 - cfg.epsilon);
    const double amp = loss.item();
    loss.backward();
    const double deriv = map.grad()[0];
    if (x == 0.0) {
      if (std::abs(amp) > 1e-12) ++violations;
    } else {
      if (!(amp - x > 1e-12 || x * x / 2 <= 1e-12)) ++violations;  // strict above the tolerance
      worst_gap = std::min(worst_gap, amp - x);
    }
    if (deriv < 1.0) ++violations;
    worst_deriv = std::min(worst_deriv, deriv);
    worst_deriv_err = std::max(worst_deriv_err, std::abs(deriv * (1 - x) - 1));
  }
  if (worst_deriv_err > 1e-12) ++violations;
  return {violations == 0, "10000 points; min(-log(1-x) - x | x>0)=" + fmt("%.3g", worst_gap) +
                               " min d/dx=" + fmt("%.6g", worst_deriv) +
                               " max |d/dx * (1-x) - 1|=" + fmt("%.2g", worst_deriv_err) +
                               " violations=" + std::to_string(violations)};
}

// ---- 2 ---------------------------------------------------------------------

struct GradTally {
  double worst64 = 0, worst32 = 0;
  std::string worst64_name, worst32_name;
  std::size_t cases = 0, instances = 0, coords = 0, kinks = 0;

  void record(const std::string& name, const testing::GradCheckReport& r64, const testing::GradCheckReport& r32) {
    const double e64 = r64.max_rel_error, e32 = r32.max_rel_error;
    if (e64 > worst64 || std::isnan(e64)) worst64 = e64, worst64_name = name;
    if (e32 > worst32 || std::isnan(e32)) worst32 = e32, worst32_name = name;
    coords += r64.coords_checked + r32.coords_checked;
    kinks += r64.kinks_skipped + r32.kinks_skipped;
    ++instances;
  }
};

// Relative disagreement of one-sided differences that marks a kink inside the
// difference stencil.
constexpr double kKinkTol = 1e-3;

template <class To>
std::vector<Tensor<To>> cast_leaves(const std::vector<Tensor<double>>& xs) {
  std::vector<Tensor<To>> out;
  for (const auto& x : xs) out.push_back(cast_tensor<To>(x).clone_leaf(true));
  return out;
}

// `op(inputs, k)` is a generic lambda run at both precisions. Its output is
// contracted with a fixed random weight so the whole Jacobian is exercised.
template <class Op>
void op_case(GradTally& tally, const std::string& name, const std::vector<Shape>& shapes,
             const std::vector<std::pair<double, double>>& ranges, Op op) {
  std::mt19937_64 rng(std::hash<std::string>{}(name));
  for (int k = 0; k < 20; ++k) {
    std::vector<Tensor<double>> x64;
    for (std::size_t i = 0; i < shapes.size(); ++i)
      x64.push_back(random_tensor<double>(shapes[i], rng, ranges[i].first, ranges[i].second));
    Shape out_shape;
    {
      NoGradGuard g;
      out_shape = op(x64, k).shape();
    }
    const auto w64 = random_tensor<double>(out_shape, rng, -1, 1, false);
    const auto w32 = cast_tensor<float>(w64);

    auto f64 = [&] { return sum(mul(op(x64, k), w64)); };
    const auto r64 = gradcheck<double>(f64, x64, 1e-6, 40, k, 1e-10, kKinkTol);

    auto x32 = cast_leaves<float>(x64);
    std::vector<Tensor<double>> mirror;
    for (const auto& x : x32) mirror.push_back(cast_tensor<double>(x).clone_leaf(true));
    const auto w_mirror = cast_tensor<double>(w32);
    auto f32 = [&] { return sum(mul(op(x32, k), w32)); };
    auto ref = [&] { return sum(mul(op(mirror, k), w_mirror)); };
    const auto r32 = gradcheck_against<float, double>(f32, x32, ref, mirror, 1e-6, 40, k, 1e-10, kKinkTol);
    tally.record(name, r64, r32);
  }
  ++tally.cases;
}

template <class V>
using elem_t = typename std::decay_t<decltype(std::declval<V>()[0])>::value_type;

void single_ops(GradTally& t) {
  const std::pair<double, double> sym{-1, 1}, pos{0.5, 2}, unit{0.02, 0.98};
  op_case(t, "conv2d", {{2, 3, 7, 7}, {4, 3, 3, 3}, {4}}, {sym, sym, sym}, [](const auto& x, int k) {
    return conv2d(x[0], x[1], x[2], std::size_t(1 + k % 2), std::size_t(k % 3 == 0 ? 0 : 1));
  });
  op_case(t, "batchnorm2d/train", {{3, 2, 4, 4}, {2}, {2}}, {sym, pos, sym}, [](const auto& x, int) {
    using T = elem_t<decltype(x)>;
    BatchNormState<T> st(2);
    return batchnorm2d(x[0], x[1], x[2], st, Mode::Train);
  });
  op_case(t, "batchnorm2d/eval", {{3, 2, 4, 4}, {2}, {2}}, {sym, pos, sym}, [](const auto& x, int) {
    using T = elem_t<decltype(x)>;
    BatchNormState<T> st(2);
    st.running_mean = {T(0.3), T(-0.2)};
    st.running_var = {T(0.5), T(1.7)};
    st.num_batches_tracked = 1;
    return batchnorm2d(x[0], x[1], x[2], st, Mode::Eval);
  });
  op_case(t, "leaky_relu", {{2, 3, 4, 4}}, {sym}, [](const auto& x, int) { return leaky_relu(x[0], 0.2); });
  op_case(t, "sigmoid", {{2, 3, 4, 4}}, {{-4, 4}}, [](const auto& x, int) { return sigmoid(x[0]); });
  op_case(t, "upsample_nearest2x", {{2, 2, 3, 5}}, {sym}, [](const auto& x, int) { return upsample_nearest2x(x[0]); });
  op_case(t, "pad2d", {{2, 2, 3, 5}}, {sym}, [](const auto& x, int) { return pad2d(x[0], 1, 2, 0, 3); });
  op_case(t, "crop2d", {{2, 2, 6, 5}}, {sym}, [](const auto& x, int) { return crop2d(x[0], 1, 2, 4, 3); });
  op_case(t, "add", {{3, 4}, {3, 4}}, {sym, sym}, [](const auto& x, int) { return add(x[0], x[1]); });
  op_case(t, "sub", {{3, 4}, {3, 4}}, {sym, sym}, [](const auto& x, int) { return sub(x[0], x[1]); });
  op_case(t, "mul", {{3, 4}, {3, 4}}, {sym, sym}, [](const auto& x, int) { return mul(x[0], x[1]); });
  op_case(t, "mul/rank-0", {{3, 4}, {}}, {sym, sym}, [](const auto& x, int) { return mul(x[0], x[1]); });
  op_case(t, "div", {{3, 4}, {3, 4}}, {sym, pos}, [](const auto& x, int) { return div(x[0], x[1]); });
  op_case(t, "neg", {{3, 4}}, {sym}, [](const auto& x, int) { return neg(x[0]); });
  op_case(t, "log", {{3, 4}}, {pos}, [](const auto& x, int) { return log(x[0]); });
  op_case(t, "square", {{3, 4}}, {sym}, [](const auto& x, int) { return square(x[0]); });
  op_case(t, "abs", {{3, 4}}, {sym}, [](const auto& x, int) { return abs(x[0]); });
  op_case(t, "scalar_mul", {{3, 4}}, {sym}, [](const auto& x, int) {
    using T = elem_t<decltype(x)>;
    return scalar_mul(x[0], T(-1.75));
  });
  op_case(t, "scalar_div", {{3, 4}}, {sym}, [](const auto& x, int) {
    using T = elem_t<decltype(x)>;
    return scalar_div(x[0], T(0.4));
  });
  op_case(t, "add_scalar", {{3, 4}}, {sym}, [](const auto& x, int) {
    using T = elem_t<decltype(x)>;
    return add_scalar(x[0], T(2.5));
  });
  op_case(t, "clamp", {{3, 4}}, {sym}, [](const auto& x, int) {
    using T = elem_t<decltype(x)>;
    return clamp(x[0], T(-0.5), T(0.5));
  });
  op_case(t, "sum", {{2, 3, 4}}, {sym}, [](const auto& x, int) { return sum(x[0]); });
  op_case(t, "mean", {{2, 3, 4}}, {sym}, [](const auto& x, int) { return mean(x[0]); });
  op_case(t, "sum/axes", {{2, 3, 4, 5}}, {sym}, [](const auto& x, int) {
    const std::size_t axes[] = {1, 3};
    return sum(x[0], std::span<const std::size_t>(axes));
  });
  op_case(t, "mean/axes", {{2, 3, 4, 5}}, {sym}, [](const auto& x, int) {
    const std::size_t axes[] = {0, 2};
    return mean(x[0], std::span<const std::size_t>(axes));
  });
  op_case(t, "reshape", {{2, 3, 4}}, {sym}, [](const auto& x, int) { return reshape(x[0], {4, 6}); });
  op_case(t, "linear", {{3, 5}, {4, 5}, {4}}, {sym, sym, sym}, [](const auto& x, int) {
    return linear(x[0], x[1], x[2]);
  });
  for (std::size_t axis : {2, 3}) {
    op_case(t, "filter1d_reflect/axis" + std::to_string(axis), {{2, 2, 7, 6}}, {sym}, [axis](const auto& x, int) {
      using T = elem_t<decltype(x)>;
      const auto w = gaussian_window(5, 1.0);
      const std::vector<T> taps(w.begin(), w.end());
      return filter1d_reflect(x[0], std::span<const T>(taps), axis);
    });
  }
  op_case(t, "softmax_cross_entropy", {{4, 10}}, {{-2, 2}}, [](const auto& x, int k) {
    std::vector<int> labels{k % 10, (k + 3) % 10, 7, 0};
    return softmax_cross_entropy(x[0], std::span<const int>(labels));
  });
  op_case(t, "ssim_map", {{1, 2, 12, 12}, {1, 2, 12, 12}}, {unit, unit}, [](const auto& x, int) {
    return ssim_map(x[0], x[1]).values;
  });
  op_case(t, "l1_map", {{1, 2, 5, 5}, {1, 2, 5, 5}}, {unit, unit}, [](const auto& x, int) {
    return l1_map(x[0], x[1]).values;
  });
  op_case(t, "l2_map", {{1, 2, 5, 5}, {1, 2, 5, 5}}, {unit, unit}, [](const auto& x, int) {
    return l2_map(x[0], x[1]).values;
  });
}

AEConfig pipeline_config() {
  AEConfig c = AEConfig::for_depth(4);
  c.height = c.width = 32;  // 2x2 bottleneck keeps batch norm well conditioned with batch 2
  c.base_width = 2;
  c.channel_cap = 8;
  return c;
}

// A conv bias followed by batch norm has a true gradient of exactly zero.
bool feeds_batchnorm(const AEModel<double>& m, const std::string& name) {
  const std::string tail = "conv.bias";
  if (name.size() < tail.size() || name.compare(name.size() - tail.size(), tail.size(), tail) != 0) return false;
  const auto prefix = name.substr(0, name.size() - tail.size());
  for (const auto& p : m.parameters())
    if (p.name == prefix + "bn.gamma") return true;
  return false;
}

template <class T>
AEModel<double> widen(const AEModel<T>& m) {
  auto wide = AEModel<double>::build(m.config(), 0);
  auto file = m.to_parameter_file();
  file.precision = Precision::F64;
  wide.load_parameter_file(file);
  return wide;
}

// AE forward -> base map -> (LAMP with its batch max frozen) -> reduction.
// Worst norm-wise relative error over the leaves.
template <class T>
testing::GradCheckReport pipeline_check(std::uint64_t seed, BaseLoss base, bool amplified, Reduction red) {
  std::mt19937_64 rng(seed);
  auto m = AEModel<T>::build(pipeline_config(), seed);
  auto ref = widen(m);
  auto x64 = random_tensor<double>({2, 1, 32, 32}, rng, 0, 1, false);
  auto x = cast_tensor<T>(x64);
  auto xr = cast_tensor<double>(x);
  LampConfig cfg;
  cfg.reduction = red;
  double peak = 0;
  {
    NoGradGuard g;
    peak = double(max_value(base_map(x, m.forward(x, Mode::Train), base).values));
  }
  auto loss = [&](auto& model, const auto& input) {
    auto map = base_map(input, model.forward(input, Mode::Train), base);
    return amplified ? lamp_from_map(map, cfg, peak) : reduce_map(map.values, red);
  };
  std::vector<Tensor<T>> leaves, zeros;
  std::vector<Tensor<double>> ref_leaves;
  for (std::size_t i = 0; i < m.parameters().size(); ++i) {
    if (feeds_batchnorm(ref, m.parameters()[i].name)) {
      zeros.push_back(m.parameters()[i].tensor);
    } else {
      leaves.push_back(m.parameters()[i].tensor);
      ref_leaves.push_back(ref.parameters()[i].tensor);
    }
  }
  auto report = gradcheck_against<T, double>([&] { return loss(m, x); }, leaves, [&] { return loss(ref, xr); },
                                             ref_leaves, 1e-6, 3, seed, 1e-10, kKinkTol);
  // Rounding leaves a residue on the zero leaves that scales with the rest of
  // the gradient, so it is measured against the norm of the whole gradient.
  double zero2 = 0, all2 = 0;
  for (auto& p : m.parameters())
    if (p.tensor.has_grad())
      for (T g : p.tensor.grad()) all2 += double(g) * double(g);
  for (auto& z : zeros)
    if (z.has_grad())
      for (T g : z.grad()) zero2 += double(g) * double(g);
  report.max_rel_error = std::max(report.max_rel_error, std::sqrt(zero2 / std::max(all2, 1e-300)));
  return report;
}

Outcome gradient_suite() {
  GradTally t;
  single_ops(t);
  const std::size_t op_cases = t.cases;
  for (auto base : {BaseLoss::L2, BaseLoss::L1, BaseLoss::SSIM}) {
    for (bool amplified : {false, true}) {
      for (auto red : {Reduction::Sum, Reduction::Mean}) {
        const std::string name = "ae->" + to_string(base) + (amplified ? "->lamp" : "") + "->" + to_string(red);
        for (std::uint64_t k = 0; k < 20; ++k) {
          t.record(name, pipeline_check<double>(1000 + k, base, amplified, red),
                   pipeline_check<float>(2000 + k, base, amplified, red));
        }
        ++t.cases;
      }
    }
  }
  const bool pass = t.worst64 < 1e-4 && t.worst32 < 1e-2;
  return {pass, std::to_string(op_cases) + " ops + " + std::to_string(t.cases - op_cases) + " pipelines, " +
                    std::to_string(t.instances) + " instances per precision, " + std::to_string(t.coords) +
                    " coordinates (" + std::to_string(t.kinks) + " straddling a kink left out); worst 64-bit " +
                    fmt("%.2e", t.worst64) + " (" + t.worst64_name + ") tol 1e-4; worst 32-bit " +
                    fmt("%.2e", t.worst32) + " (" + t.worst32_name + ") tol 1e-2"};
}

// ---- 3 ---------------------------------------------------------------------

double brute_force_auroc(const std::vector<double>& s, const std::vector<int>& l) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (l[i] != 1 || l[j] != 0) continue;
      pairs += 1;
      wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  return wins / pairs;
}

Outcome auroc_suite() {
  std::mt19937_64 rng(303);
  double worst = 0;
  std::size_t bad_monotone = 0, bad_complement = 0;
  for (int k = 0; k < 100; ++k) {
    const std::size_t n = 2 + rng() % 199;
    const std::size_t pool = 1 + rng() % 30;  // small pool: many ties
    std::vector<double> s(n);
    std::vector<int> l(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = double(rng() % pool) / double(pool);
      l[i] = int(rng() % 2);
    }
    l[0] = 0;
    l[1] = 1;
    const double a = auroc(s, l);
    worst = std::max(worst, std::abs(a - brute_force_auroc(s, l)));
    std::vector<double> t1(n), t2(n);
    for (std::size_t i = 0; i < n; ++i) {
      t1[i] = std::exp(2 * s[i]) - 3;
      t2[i] = std::cbrt(s[i] - 0.5) * 10;
    }
    bad_monotone += auroc(t1, l) != a;
    bad_monotone += auroc(t2, l) != a;
    std::vector<int> flipped(n);
    for (std::size_t i = 0; i < n; ++i) flipped[i] = 1 - l[i];
    bad_complement += a + auroc(s, flipped) != 1.0;
  }
  return {worst <= 1e-12 && bad_monotone == 0 && bad_complement == 0,
          "100 tied instances; max |rank - pairwise|=" + fmt("%.2g", worst) +
              " monotone mismatches=" + std::to_string(bad_monotone) +
              " complement mismatches=" + std::to_string(bad_complement)};
}

// ---- 4 ---------------------------------------------------------------------

template <class T>
std::size_t scaling_violations(std::mt19937_64& rng, double& worst_over) {
  std::size_t bad = 0;
  std::uniform_real_distribution<double> u(0, 1);
  const double decades = std::is_same_v<T, float> ? 12 : 40;
  for (int k = 0; k < 1000; ++k) {
    const Shape shape{1 + rng() % 4, 1 + rng() % 3, 1 + rng() % 9, 1 + rng() % 9};
    const double eps = std::pow(10.0, -6 * u(rng)) * 0.9;  // (0, 0.9]
    const double scale = std::pow(10.0, decades * (u(rng) - 0.5));
    const bool zero = k % 50 == 0;
    std::vector<T> v(numel(shape));
    for (auto& x : v) x = zero || u(rng) < 0.2 ? T(0) : T(scale * u(rng));
    if (!zero) v[rng() % v.size()] = T(scale);  // at least one nonzero entry
    const LossMap<T> map{Tensor<T>::from(shape, v), BaseLoss::L2};
    const auto scaled = scale_loss_map(map, eps);
    const auto out = scaled.values.data();
    const T top = T(1 - eps);
    if (zero) {
      bad += !std::equal(out.begin(), out.end(), v.begin());
      continue;
    }
    T mx = 0;
    for (T y : out) {
      if (!(y >= T(0) && y <= top)) ++bad, worst_over = std::max(worst_over, double(y) - double(top));
      mx = std::max(mx, y);
    }
    bad += mx != top;
  }
  return bad;
}

Outcome scaling_suite() {
  std::mt19937_64 rng(404);
  double worst = 0;
  const auto b64 = scaling_violations<double>(rng, worst);
  const auto b32 = scaling_violations<float>(rng, worst);
  return {b64 == 0 && b32 == 0, "1000 maps per precision (20 all-zero); violations 64-bit=" + std::to_string(b64) +
                                    " 32-bit=" + std::to_string(b32)};
}

// ---- 5-7 -------------------------------------------------------------------

// One desk-scale regime for every MNIST criterion: 10 epochs of Adam at lr 1e-3
// on all of the ~700 normal training digits, evaluated on the whole test split.
ExperimentConfig mnist_regime(int digit, const std::string& loss, std::size_t batch_size) {
  ExperimentConfig c;
  c.data_dir = fs::path(LAMP_SOURCE_DIR) / "data/mnist";
  c.normal_class = digit;
  c.train.epochs = 10;
  c.train.batch_size = batch_size;
  c.train.loss = loss;
  c.train.optimizer.kind = OptimizerKind::Adam;
  c.train.optimizer.learning_rate = 1e-3;
  return c;
}

constexpr int kSeeds = 5;

struct MnistCell {
  double auroc;
  std::optional<Run> run;  // kept only where a later criterion needs the model
};

const MnistSplits& mnist() {
  static const MnistSplits d = load_mnist(fs::path(LAMP_SOURCE_DIR) / "data/mnist");
  return d;
}

MnistCell train_cell(int digit, const std::string& loss, std::size_t bs, std::uint64_t seed, bool keep) {
  const auto c = mnist_regime(digit, loss, bs);
  const auto task = make_one_class_task(mnist(), digit);
  auto run = train_run(c, task, seed);
  EvalOptions opts;
  opts.batch_size = c.eval_batch_size;
  const double a = evaluate_task(run.model, task, opts).auroc;
  MnistCell cell{a, std::nullopt};
  if (keep) cell.run.emplace(std::move(run));
  return cell;
}

// Digit-0 models at batch size 128, shared with the landscape criterion.
std::map<std::pair<std::string, std::uint64_t>, Run> g_digit0;

Outcome table1_direction(bool keep_digit0) {
  std::vector<double> base_means, lamp_means;
  for (int digit = 0; digit < 10; ++digit) {
    std::vector<double> b, l;
    for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
      for (const char* loss : {"l2", "l2.lamp"}) {
        auto cell = train_cell(digit, loss, 128, seed, keep_digit0 && digit == 0);
        (std::string(loss) == "l2" ? b : l).push_back(cell.auroc);
        if (cell.run) g_digit0.emplace(std::make_pair(std::string(loss), seed), std::move(*cell.run));
      }
    }
    base_means.push_back(mean_of(b));
    lamp_means.push_back(mean_of(l));
    std::printf("  [5] digit %d  l2 %.4f  l2.lamp %.4f  (5 seeds)\n", digit, base_means.back(), lamp_means.back());
    std::fflush(stdout);
  }
  const double base = mean_of(base_means), amp = mean_of(lamp_means);
  const bool pass = base >= 0.85 && amp >= base - 0.005;
  return {pass, "mean AUROC over 10 digits x 5 seeds: l2 " + fmt("%.4f", base) + ", l2.lamp " + fmt("%.4f", amp) +
                    " (need l2 >= 0.85 and l2.lamp >= l2 - 0.005; reference 0.919 vs 0.925)"};
}

Outcome large_batch_gap() {
  const int digits[] = {0, 1, 2};
  std::size_t positive = 0;
  std::string per;
  for (int digit : digits) {
    std::vector<double> gaps;
    for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
      const double b = train_cell(digit, "l2", 1024, seed, false).auroc;
      const double l = train_cell(digit, "l2.lamp", 1024, seed, false).auroc;
      gaps.push_back(l - b);
    }
    const double g = mean_of(gaps);
    positive += g > 0;
    per += " " + std::to_string(digit) + ":" + fmt("%+.4f", g);
    std::printf("  [6] digit %d  mean(l2.lamp - l2) %+.4f  (5 seeds, bs 1024)\n", digit, g);
    std::fflush(stdout);
  }
  return {positive == 3, "mean(l2.lamp - l2) per digit at bs 1024:" + per +
                             " (need > 0 on all 3; reference gap +0.054)"};
}

Outcome landscape_sharpening() {
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed)
    for (const char* loss : {"l2", "l2.lamp"})
      if (!g_digit0.count({loss, seed}))
        g_digit0.emplace(std::make_pair(std::string(loss), seed), std::move(*train_cell(0, loss, 128, seed, true).run));

  const auto task = make_one_class_task(mnist(), 0);
  const auto batch = fixed_batch(mnist_regime(0, "l2", 128), task);
  const auto common = LossSpec::parse("l2");
  const GridSpec spec{-1.0, 1.0, 51};
  std::size_t sharper = 0;
  std::string per;
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    auto& base = g_digit0.at({"l2", seed});
    auto& amp = g_digit0.at({"l2.lamp", seed});
    const std::uint64_t dir_seed = 7000 + seed;  // shared by both models
    auto sharp = [&](Run& r, const LossSpec& metric) {
      auto& params = r.model.parameters();
      const auto d = random_direction(params, dir_seed, DirectionNorm::Filter);
      return sharpness_index(loss_grid(params, reconstruction_loss_fn(r.model, batch, metric, r.config.train.lamp), d,
                                       nullptr, spec));
    };
    const double sb = sharp(base, common);
    const double sl = sharp(amp, common);
    const double own = sharp(amp, LossSpec::parse("l2.lamp"));
    sharper += sl > sb;
    per += " " + fmt("%.4g", sl) + "/" + fmt("%.4g", sb);
    std::printf("  [7] seed %d  sharpness on l2: base %.6g  lamp %.6g  | lamp on its own loss %.6g\n", int(seed), sb,
                sl, own);
    std::fflush(stdout);
  }
  return {sharper >= 4, "digit 0, bs 128, 51-point filter-normalized 1-D slices, l2 on " +
                            std::to_string(batch.dim(0)) + " normal train images; lamp sharper in " +
                            std::to_string(sharper) + "/5 seeds (need >= 4); lamp/base:" + per};
}

// ---- 8 ---------------------------------------------------------------------

Outcome mvtec_protocol() {
  const auto dir = scratch("mvtec");
  const auto root = dir / "data";
  std::mt19937_64 rng(808);
  auto image = [&](std::size_t h, std::size_t w, std::size_t ch, int base) {
    Image8 im{h, w, ch, std::vector<std::uint8_t>(h * w * ch)};
    for (auto& px : im.data) px = std::uint8_t(base + int(rng() % 30));
    return im;
  };
  // Mixed sizes and a gray file among RGB ones; names chosen so that
  // lexicographic and numeric order differ.
  const auto cat = root / "widget";
  std::vector<std::string> expected_test;
  for (const char* d : {"train/good", "test/good", "test/crack", "test/scratch"}) fs::create_directories(cat / d);
  for (int i = 0; i < 12; ++i)
    write_png(cat / "train/good" / ("n" + std::to_string(i) + ".png"), image(20 + i % 3, 24, i == 5 ? 1 : 3, 20));
  for (const auto& [kind, base, count] : {std::tuple{"good", 20, 5}, std::tuple{"crack", 200, 3}, std::tuple{"scratch", 120, 4}}) {
    for (int i = 0; i < count; ++i) {
      const auto p = cat / "test" / kind / (std::to_string(i * 7) + ".png");
      write_png(p, image(22, 22, 3, base));
      expected_test.push_back(p.string());
    }
  }
  std::sort(expected_test.begin(), expected_test.end());
  std::ofstream(cat / "test/good/notes.txt") << "ignored";

  std::vector<std::string> failures;
  auto expect = [&](bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  };
  const auto task = load_mvtec_category(root, "widget", {16, 16, true});
  task.validate();
  expect(task.train.size() == 12 && task.test.size() == 12, "sample counts");
  expect(task.train.pixels.shape() == Shape{12, 1, 16, 16}, "train shape");
  expect(task.test.pixels.shape() == Shape{12, 1, 16, 16}, "test shape");
  expect(task.test.ids == expected_test, "test ordering");
  for (std::size_t i = 0; i < task.test.size(); ++i) {
    const bool good = task.test.ids[i].find("/good/") != std::string::npos;
    expect(task.test.labels[i] == (good ? 0 : 1), "label of " + task.test.ids[i]);
  }
  for (int l : task.train.labels) expect(l == 0, "train label");
  const auto rgb = load_mvtec_category(root, "widget", {10, 12, false});
  expect(rgb.test.pixels.shape() == Shape{12, 3, 10, 12}, "rgb shape");

  ExperimentConfig c;
  c.dataset = "mvtec";
  c.data_dir = root;
  c.category = "widget";
  c.image_size = 16;
  c.grayscale = true;
  c.model.base_width = 4;
  c.model.channel_cap = 16;
  c.train.epochs = 2;
  c.train.batch_size = 4;
  c.sweep_losses = {"l2", "l2.lamp"};
  c.sweep_optimizers = {"adam", "rmsprop"};
  c.seeds = {0, 1};
  c.out = dir / "sweep";
  std::ostringstream log;
  expect(cmd_sweep(c, log) == 0, "sweep exit code");
  const auto rows = read_sweep_csv(c.out / "sweep.csv");
  std::size_t runs = 0, means = 0;
  for (const auto& r : rows) {
    runs += r.kind == "run" && r.auroc.has_value();
    means += r.kind == "mean";
  }
  expect(runs == 8 && means == 4, "sweep rows");
  std::ifstream table_in(c.out / "table.csv");
  std::vector<std::string> table;
  for (std::string line; std::getline(table_in, line);) table.push_back(line);
  expect(table.size() == 3 && table[0] == "task,loss,batch_size,adam,rmsprop", "table shape");

  auto kept = rows;
  kept.erase(kept.begin() + 1);
  kept.erase(kept.begin() + 5);
  write_sweep_csv(c.out / "sweep.csv", kept);
  std::ostringstream again;
  cmd_sweep(c, again);
  expect(again.str().find("sweep: 2 cells run, 6 skipped, 0 failed") != std::string::npos, "resume count");
  const auto resumed = read_sweep_csv(c.out / "sweep.csv");
  bool same = resumed.size() == rows.size();
  for (std::size_t i = 0; same && i < rows.size(); ++i)
    same = resumed[i].seed == rows[i].seed && resumed[i].loss == rows[i].loss && resumed[i].auroc == rows[i].auroc;
  expect(same, "resumed rows identical");

  std::string detail = "loader labels/shapes/order, 2 losses x 2 optimizers x 2 seeds sweep, table.csv " +
                       std::to_string(table.size()) + " lines, resume reran 2 of 8 cells";
  for (const auto& f : failures) detail += "; FAILED " + f;
  return {failures.empty(), detail};
}

// ---- 9 ---------------------------------------------------------------------

Outcome determinism() {
  const auto dir = scratch("determinism");
  ExperimentConfig c = mnist_regime(3, "l2.lamp", 64);
  c.max_train = 256;
  c.max_test = 400;
  c.train.epochs = 3;
  const auto task = load_experiment_task(c);
  std::vector<std::string> failures;

  auto a = train_run(c, task, 11);
  auto b = train_run(c, task, 11);
  if (a.history.to_json() != b.history.to_json()) failures.push_back("histories differ");
  auto bytes = [](const Run& r) {
    std::ostringstream out;
    write_parameters(out, r.model.to_parameter_file());
    return out.str();
  };
  if (bytes(a) != bytes(b)) failures.push_back("weights differ");

  save_run(a, dir / "run");
  auto loaded = load_run(dir / "run");
  if (loaded.history.to_json() != a.history.to_json()) failures.push_back("history round trip");
  NoGradGuard g;
  const auto x = task.test.pixels;
  const auto ya = a.model.forward(x, Mode::Eval);
  const auto yb = loaded.model.forward(x, Mode::Eval);
  if (!std::equal(ya.data().begin(), ya.data().end(), yb.data().begin())) failures.push_back("reconstructions differ");
  EvalOptions opts;
  const auto ra = evaluate_task(a.model, task, opts);
  const auto rb = evaluate_task(loaded.model, task, opts);
  if (ra.samples != rb.samples || ra.auroc != rb.auroc) failures.push_back("eval reports differ");

  std::string detail = "same config+seed twice: " + std::to_string(a.history.epoch_loss.size()) +
                       " epoch losses and weights compared bitwise; checkpoint round trip compared " +
                       std::to_string(ya.numel()) + " reconstruction values and " + std::to_string(ra.samples.size()) +
                       " scores bitwise";
  for (const auto& f : failures) detail += "; FAILED " + f;
  return {failures.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  keep_heap_memory();
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
  auto want = [&](int k) { return wanted.empty() || wanted.count(k) > 0; };

  const std::vector<std::pair<int, std::pair<std::string, std::function<Outcome()>>>> criteria{
      {1, {"amplification dominates the base loss", amplification_suite}},
      {2, {"gradients match finite differences", gradient_suite}},
      {3, {"AUROC matches the pairwise oracle", auroc_suite}},
      {4, {"scaling trick contract", scaling_suite}},
      {5, {"MNIST bs 128 direction", [&] { return table1_direction(want(7)); }}},
      {6, {"MNIST bs 1024 gap sign", large_batch_gap}},
      {7, {"LAMP sharpens the landscape", landscape_sharpening}},
      {8, {"MVTec fixture protocol", mvtec_protocol}},
      {9, {"determinism and round trip", determinism}},
  };

  int failed = 0;
  for (const auto& [id, named] : criteria) {
    if (!want(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = named.second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("criterion %d %s: %s | %s | %.1fs\n", id, o.pass ? "PASS" : "FAIL", named.first.c_str(),
                o.detail.c_str(), secs);
    std::fflush(stdout);
    failed += !o.pass;
  }
  return failed == 0 ? 0 : 1;
}
