#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "gradcheck.hpp"
#include "lamp/optim.hpp"

using namespace lamp;
using lamp::testing::random_tensor;

namespace {

// One scalar parameter driven by a hand-set gradient.
struct Scalar {
  std::vector<NamedParameter<double>> params;
  explicit Scalar(double w) { params.push_back({"w", Tensor<double>::from({1}, {w}, true)}); }
  void set_grad(double g) {
    params[0].tensor.clear_grad();
    scalar_mul(sum(params[0].tensor), g).backward();
  }
  double w() const { return params[0].tensor.data()[0]; }
};

AEConfig small_ae() {
  AEConfig c = AEConfig::for_depth(4);
  c.height = c.width = 16;
  c.base_width = 4;
  c.channel_cap = 16;
  return c;
}

ImageBatch blobs(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0, 1);
  std::vector<float> px(n * 256);
  for (std::size_t i = 0; i < n; ++i) {
    const float cx = 4 + 8 * u(rng), cy = 4 + 8 * u(rng);
    for (std::size_t y = 0; y < 16; ++y)
      for (std::size_t x = 0; x < 16; ++x) {
        const float d2 = (float(x) - cx) * (float(x) - cx) + (float(y) - cy) * (float(y) - cy);
        px[i * 256 + y * 16 + x] = std::exp(-d2 / 8.f);
      }
  }
  ImageBatch b;
  b.pixels = Tensor<float>::from({n, 1, 16, 16}, std::move(px));
  for (std::size_t i = 0; i < n; ++i) b.ids.push_back(std::to_string(i));
  return b;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("lamp_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("SGD single step") {
  Scalar s(1.0);
  s.set_grad(0.5);
  Optimizer<double> opt({.kind = OptimizerKind::SGD, .learning_rate = 0.1}, s.params);
  opt.step();
  CHECK(s.w() == doctest::Approx(0.95).epsilon(1e-15));
  CHECK(opt.steps() == 1);
}

TEST_CASE("SGD momentum accumulates a velocity") {
  Scalar s(0.0);
  Optimizer<double> opt({.kind = OptimizerKind::SGD, .learning_rate = 0.1, .momentum = 0.9}, s.params);
  s.set_grad(1.0);
  opt.step();
  CHECK(s.w() == doctest::Approx(-0.1));
  s.set_grad(1.0);
  opt.step();
  CHECK(s.w() == doctest::Approx(-0.1 - 0.1 * 1.9));
}

TEST_CASE("RMSprop first step") {
  Scalar s(0.0);
  s.set_grad(1.0);
  Optimizer<double> opt({.kind = OptimizerKind::RMSprop, .learning_rate = 0.01, .rho = 0.9, .eps = 1e-8},
                        s.params);
  opt.step();
  CHECK(opt.state()[0].second[0] == doctest::Approx(0.1));
  CHECK(-s.w() == doctest::Approx(0.01 / (std::sqrt(0.1) + 1e-8)).epsilon(1e-12));
  CHECK(-s.w() == doctest::Approx(0.031623).epsilon(1e-5));
}

TEST_CASE("Adam first step is about lr * sign(g)") {
  for (double g : {1e-3, -0.2, 5.0, -300.0}) {
    Scalar s(1.0);
    s.set_grad(g);
    Optimizer<double> opt({.kind = OptimizerKind::Adam, .learning_rate = 0.01}, s.params);
    opt.step();
    const double delta = s.w() - 1.0;
    // m_hat = g, v_hat = g^2 after bias correction
    CHECK(delta == doctest::Approx(-0.01 * g / (std::abs(g) + 1e-8)).epsilon(1e-12));
    CHECK(std::abs(delta) == doctest::Approx(0.01).epsilon(1e-4));
  }
}

TEST_CASE("Adam matches a hand-rolled recurrence over several steps") {
  Scalar s(0.3);
  OptimizerConfig cfg{.kind = OptimizerKind::Adam, .learning_rate = 0.05, .beta1 = 0.8, .beta2 = 0.95};
  Optimizer<double> opt(cfg, s.params);
  double w = 0.3, m = 0, v = 0;
  for (int t = 1; t <= 6; ++t) {
    const double g = 2 * (w - 1.0);
    s.set_grad(2 * (s.w() - 1.0));
    opt.step();
    m = 0.8 * m + 0.2 * g;
    v = 0.95 * v + 0.05 * g * g;
    w -= 0.05 * (m / (1 - std::pow(0.8, t))) / (std::sqrt(v / (1 - std::pow(0.95, t))) + 1e-8);
    CHECK(s.w() == doctest::Approx(w).epsilon(1e-12));
  }
}

TEST_CASE("lr = 0 leaves parameters unchanged") {
  for (auto kind : {OptimizerKind::SGD, OptimizerKind::RMSprop, OptimizerKind::Adam}) {
    std::mt19937_64 rng(1);
    auto model = AEModel<float>::build(small_ae(), 1);
    auto before = model.to_parameter_file();
    auto x = random_tensor<float>({2, 1, 16, 16}, rng, 0, 1, false);
    base_loss(x, model.forward(x, Mode::Train), BaseLoss::L2, Reduction::Sum).backward();
    Optimizer<float> opt({.kind = kind, .learning_rate = 0.0, .momentum = 0.5}, model.parameters());
    opt.step();
    const auto after = model.to_parameter_file();
    for (const auto& r : before.records) {
      if (r.name.find("running") != std::string::npos || r.name.find("tracked") != std::string::npos) continue;
      CHECK(after.at(r.name).values == r.values);
    }
  }
}

TEST_CASE("missing gradient is reported by name") {
  Scalar s(1.0);
  Optimizer<double> opt({}, s.params);
  try {
    opt.step();
    FAIL("expected an error");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("'w'") != std::string::npos);
  }
}

TEST_CASE("gradient reset prevents stale accumulation") {
  std::mt19937_64 rng(2);
  auto model = AEModel<double>::build(small_ae(), 2);
  auto x = random_tensor<double>({3, 1, 16, 16}, rng, 0, 1, false);
  auto& w = model.parameters()[0].tensor;
  base_loss(x, model.forward(x, Mode::Train), BaseLoss::L2, Reduction::Sum).backward();
  std::vector<double> g1(w.grad().begin(), w.grad().end());
  Optimizer<double> opt({.learning_rate = 0.0}, model.parameters());
  opt.step();
  opt.zero_grad();
  CHECK_FALSE(w.has_grad());
  base_loss(x, model.forward(x, Mode::Train), BaseLoss::L2, Reduction::Sum).backward();
  CHECK(std::vector<double>(w.grad().begin(), w.grad().end()) == g1);
}

TEST_CASE("optional weight decay, clipping and lr decay") {
  Scalar s(2.0);
  s.set_grad(0.0);
  Optimizer<double> wd({.kind = OptimizerKind::SGD, .learning_rate = 0.1, .weight_decay = 0.5}, s.params);
  wd.step();
  CHECK(s.w() == doctest::Approx(2.0 - 0.1 * 0.5 * 2.0));

  Scalar c(0.0);
  c.set_grad(10.0);
  Optimizer<double> clip({.kind = OptimizerKind::SGD, .learning_rate = 1.0, .grad_clip_norm = 2.0}, c.params);
  clip.step();
  CHECK(c.w() == doctest::Approx(-2.0));

  Scalar d(0.0);
  Optimizer<double> decay(
      {.kind = OptimizerKind::SGD, .learning_rate = 1.0, .lr_decay_every = 2, .lr_decay_gamma = 0.5}, d.params);
  for (double expect : {1.0, 1.0, 0.5, 0.5, 0.25}) {
    CHECK(decay.current_learning_rate() == expect);
    d.set_grad(1.0);
    decay.step();
  }
}

TEST_CASE("config validation and parsing") {
  CHECK(parse_optimizer("Adam") == OptimizerKind::Adam);
  CHECK(parse_optimizer("rmsprop") == OptimizerKind::RMSprop);
  CHECK_THROWS_AS(parse_optimizer("lbfgs"), ConfigError);
  CHECK_THROWS_AS(OptimizerConfig{.learning_rate = -1}.validate(), ConfigError);
  TrainConfig t;
  t.batch_size = 0;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t = {};
  t.epochs = 0;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t = {};
  t.loss = "l3";
  CHECK_THROWS_AS(t.validate(), ConfigError);

  TrainConfig full;
  full.loss = "ssim.lamp";
  full.lamp.epsilon = 0.05;
  full.lamp.reduction = Reduction::Mean;
  full.optimizer.kind = OptimizerKind::RMSprop;
  full.optimizer.rho = 0.8;
  nlohmann::json j = full;
  CHECK(j.get<TrainConfig>() == full);
}

TEST_CASE("epoch order is a seeded permutation") {
  auto a = epoch_order(50, 3, 0, true);
  auto b = epoch_order(50, 3, 0, true);
  auto c = epoch_order(50, 3, 1, true);
  CHECK(a == b);
  CHECK(a != c);
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  CHECK(sorted == epoch_order(50, 3, 0, false));
}

TEST_CASE("overfitting a single sample") {
  auto data = blobs(1, 3);
  auto model = AEModel<float>::build(small_ae(), 3);
  TrainConfig cfg;
  cfg.epochs = 50;
  cfg.batch_size = 1;
  cfg.optimizer.learning_rate = 1e-2;
  auto h = train(model, data, cfg);
  REQUIRE(h.epoch_loss.size() == 50);
  CHECK(h.epoch_loss.back() < h.epoch_loss.front());
  CHECK(h.steps == 50);
}

TEST_CASE("training is deterministic and keeps the last partial batch") {
  auto data = blobs(21, 4);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 8;
  cfg.seed = 11;
  cfg.loss = "l2.lamp";
  auto m1 = AEModel<float>::build(small_ae(), 5);
  auto m2 = AEModel<float>::build(small_ae(), 5);
  std::vector<std::size_t> sizes;
  auto h1 = train<float>(m1, data, cfg, [&](const StepInfo<float>& s) { sizes.push_back(s.input.dim(0)); });
  auto h2 = train(m2, data, cfg);
  CHECK(h1.to_json() == h2.to_json());
  CHECK(h1.loss_kind == "l2.lamp");
  CHECK(sizes == std::vector<std::size_t>{8, 8, 5, 8, 8, 5, 8, 8, 5});
  CHECK(m1.to_parameter_file().records.size() == m2.to_parameter_file().records.size());
  for (const auto& r : m1.to_parameter_file().records) CHECK(m2.to_parameter_file().at(r.name).values == r.values);
}

TEST_CASE("amplified loss dominates the scaled base loss at every step") {
  auto data = blobs(40, 5);
  for (const char* base : {"l2", "l1", "ssim"}) {
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 16;
    cfg.loss = std::string(base) + ".lamp";
    auto model = AEModel<double>::build(small_ae(), 6);
    std::size_t checked = 0;
    train<double>(model, data, cfg, [&](const StepInfo<double>& s) {
      const auto map = base_map(s.input, s.reconstruction, LossSpec::parse(base).base);
      const auto scaled = scale_loss_map(map, cfg.lamp.epsilon);
      const double lamp_value = lamp_from_map(map, cfg.lamp).item();
      const double scaled_base = reduce_map(scaled.values, cfg.lamp.reduction).item();
      CHECK(lamp_value == doctest::Approx(s.loss).epsilon(1e-12));
      CHECK(lamp_value >= scaled_base);
      ++checked;
    });
    CHECK(checked == 6);
  }
}

TEST_CASE("training refuses anomalous samples and mismatched patches") {
  auto data = blobs(4, 6);
  data.labels = {0, 0, 1, 0};
  auto model = AEModel<float>::build(small_ae(), 7);
  CHECK_THROWS_AS(train(model, data, TrainConfig{}), DataError);
  data.labels = {0, 0, 0, 0};
  TrainConfig cfg;
  cfg.epochs = 1;
  CHECK_NOTHROW(train(model, data, cfg));
  cfg.patches = 2;
  CHECK_THROWS_AS(train(model, data, cfg), ConfigError);
}

TEST_CASE("non-finite loss aborts with the step index") {
  auto data = blobs(4, 7);
  auto model = AEModel<float>::build(small_ae(), 8);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 2;
  cfg.optimizer.kind = OptimizerKind::SGD;
  cfg.optimizer.learning_rate = 1e30;
  try {
    train(model, data, cfg);
    FAIL("expected a numeric failure");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("at step") != std::string::npos);
  }
}

TEST_CASE("optimizer state round-trips through a checkpoint") {
  const auto dir = temp_dir("ckpt");
  auto data = blobs(10, 8);
  auto model = AEModel<float>::build(small_ae(), 9);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 4;
  Optimizer<float> opt(cfg.optimizer, model.parameters());
  auto h = train(model, data, cfg, {}, &opt);
  CHECK(opt.steps() == 6);
  save_checkpoint(dir / "run", model, opt, h);

  auto back = load_model<float>(dir / "run");
  Optimizer<float> opt2(cfg.optimizer, back.parameters());
  opt2.load_state_file(load_parameters(dir / "run.optim"));
  CHECK(opt2.steps() == 6);
  for (std::size_t i = 0; i < opt.state().size(); ++i) {
    CHECK(opt2.state()[i].first == opt.state()[i].first);
    CHECK(opt2.state()[i].second == opt.state()[i].second);
  }
  std::ifstream in(dir / "run.history.json");
  auto hj = nlohmann::json::parse(in);
  CHECK(TrainHistory::from_json(hj).epoch_loss == h.epoch_loss);

  // Continuing either copy gives the same parameters.
  train(model, data, cfg, {}, &opt);
  train(back, data, cfg, {}, &opt2);
  for (const auto& r : model.to_parameter_file().records) CHECK(back.to_parameter_file().at(r.name).values == r.values);
}
