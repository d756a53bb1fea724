// lamp: train, eval, sweep and landscape commands over a flat JSON config.

#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "lamp/error.hpp"
#include "lamp/experiment.hpp"

namespace {

struct Overrides {
  std::string config;
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> loss;
  std::optional<std::string> optimizer;
  std::optional<std::size_t> batch_size;
  std::optional<std::size_t> epochs;
  std::vector<std::string> sets;  // key=value

  void add_to(CLI::App* app) {
    app->add_option("--config", config, "flat JSON config file");
    app->add_option("--out", out, "output directory");
    app->add_option("--seed", seed, "single seed (replaces the seed list)");
    app->add_option("--loss", loss, "loss spec, e.g. l2, l1.lamp, ssim.lamp");
    app->add_option("--optimizer", optimizer, "sgd, rmsprop or adam");
    app->add_option("--batch-size", batch_size, "training batch size");
    app->add_option("--epochs", epochs, "training epochs");
    app->add_option("--set", sets, "override any config key: key=value (value parsed as JSON when possible)");
  }

  lamp::ExperimentConfig resolve() const {
    auto c = config.empty() ? lamp::ExperimentConfig{} : lamp::ExperimentConfig::load(config);
    for (const auto& kv : sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw lamp::ConfigError("--set expects key=value, got '" + kv + "'");
      c.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (out) c.out = *out;
    if (seed) c.seeds = {*seed};
    if (loss) c.set("loss", nlohmann::json(*loss).dump());
    if (optimizer) c.set("optimizer", nlohmann::json(*optimizer).dump());
    if (batch_size) c.train.batch_size = *batch_size;
    if (epochs) c.train.epochs = *epochs;
    return c;
  }
};

}  // namespace

int main(int argc, char** argv) {
  lamp::keep_heap_memory();
  CLI::App app{"Reconstruction autoencoders with loss amplification for anomaly detection"};
  app.require_subcommand(1);

  Overrides train_o, eval_o, sweep_o, land_o;
  std::string eval_checkpoint;
  std::vector<std::string> land_checkpoints;

  auto* train = app.add_subcommand("train", "train one model per seed and write checkpoints");
  train_o.add_to(train);
  auto* eval = app.add_subcommand("eval", "score a checkpoint's test set; prints auroc=<value>");
  eval_o.add_to(eval);
  eval->add_option("--checkpoint", eval_checkpoint, "run directory written by train")->required();
  auto* sweep = app.add_subcommand("sweep", "loss x optimizer x batch size x seed grid into a resumable CSV");
  sweep_o.add_to(sweep);
  auto* land = app.add_subcommand("landscape", "loss landscape grid of one checkpoint, or two in paired mode");
  land_o.add_to(land);
  land->add_option("--checkpoint", land_checkpoints, "run directory; give two for paired mode")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*train) return lamp::cmd_train(train_o.resolve(), std::cout);
    if (*eval) {
      std::optional<lamp::ExperimentConfig> override_cfg;
      if (!eval_o.config.empty() || !eval_o.sets.empty()) override_cfg = eval_o.resolve();
      const std::filesystem::path out = eval_o.out ? std::filesystem::path(*eval_o.out) : std::filesystem::path(eval_checkpoint);
      return lamp::cmd_eval(eval_checkpoint, out, override_cfg ? &*override_cfg : nullptr, std::cout);
    }
    if (*sweep) return lamp::cmd_sweep(sweep_o.resolve(), std::cout);
    if (*land) {
      std::vector<std::filesystem::path> dirs(land_checkpoints.begin(), land_checkpoints.end());
      return lamp::cmd_landscape(dirs, land_o.resolve(), std::cout);
    }
  } catch (const std::exception& e) {
    std::cerr << "lamp: " << e.what() << '\n';
    return lamp::exit_code_for(e);
  }
  return 1;
}
