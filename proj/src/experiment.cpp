#include "lamp/experiment.hpp"

#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>

#include "lamp/error.hpp"

namespace lamp {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

template <class F>
void get_field(const json& v, const std::string& key, F& dst) {
  if constexpr (std::is_unsigned_v<F> && !std::is_same_v<F, bool>) {
    if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<long long>() < 0)) {
      throw ConfigError("config field '" + key + "': expected a non-negative integer, got " + v.dump());
    }
  }
  if constexpr (std::is_same_v<F, bool>) {
    if (!v.is_boolean()) throw ConfigError("config field '" + key + "': expected true or false, got " + v.dump());
  }
  try {
    v.get_to(dst);
  } catch (const json::exception&) {
    throw ConfigError("config field '" + key + "': unexpected value " + v.dump());
  }
}

template <class F>
auto parsed_field(const json& v, const std::string& key, F parse) {
  std::string text;
  get_field(v, key, text);
  try {
    return parse(text);
  } catch (const ConfigError& e) {
    throw ConfigError("config field '" + key + "': " + e.what());
  }
}

void apply_key(ExperimentConfig& c, const std::string& k, const json& v) {
  auto& m = c.model;
  auto& t = c.train;
  auto& o = c.train.optimizer;
  if (k == "dataset") get_field(v, k, c.dataset);
  else if (k == "data_dir") c.data_dir = parsed_field(v, k, [](const std::string& s) { return fs::path(s); });
  else if (k == "normal_class") get_field(v, k, c.normal_class);
  else if (k == "category") get_field(v, k, c.category);
  else if (k == "image_size") get_field(v, k, c.image_size);
  else if (k == "grayscale") get_field(v, k, c.grayscale);
  else if (k == "max_train") get_field(v, k, c.max_train);
  else if (k == "max_test") get_field(v, k, c.max_test);
  else if (k == "depth") get_field(v, k, m.depth);
  else if (k == "kernel_size") get_field(v, k, m.kernel_size);
  else if (k == "base_width") get_field(v, k, m.base_width);
  else if (k == "channel_cap") get_field(v, k, m.channel_cap);
  else if (k == "leaky_slope") get_field(v, k, m.leaky_slope);
  else if (k == "patches") get_field(v, k, m.patches);
  else if (k == "skip_connections") get_field(v, k, m.skip_connections);
  else if (k == "pad_to_fit") get_field(v, k, m.pad_to_fit);
  else if (k == "epochs") get_field(v, k, t.epochs);
  else if (k == "batch_size") get_field(v, k, t.batch_size);
  else if (k == "loss") t.loss = parsed_field(v, k, [](const std::string& s) { return LossSpec::parse(s).str(); });
  else if (k == "lamp_epsilon") get_field(v, k, t.lamp.epsilon);
  else if (k == "lamp_reduction") t.lamp.reduction = parsed_field(v, k, parse_reduction);
  else if (k == "shuffle") get_field(v, k, t.shuffle);
  else if (k == "optimizer") o.kind = parsed_field(v, k, parse_optimizer);
  else if (k == "learning_rate") get_field(v, k, o.learning_rate);
  else if (k == "momentum") get_field(v, k, o.momentum);
  else if (k == "rho") get_field(v, k, o.rho);
  else if (k == "beta1") get_field(v, k, o.beta1);
  else if (k == "beta2") get_field(v, k, o.beta2);
  else if (k == "optimizer_eps") get_field(v, k, o.eps);
  else if (k == "weight_decay") get_field(v, k, o.weight_decay);
  else if (k == "grad_clip_norm") get_field(v, k, o.grad_clip_norm);
  else if (k == "lr_decay_every") get_field(v, k, o.lr_decay_every);
  else if (k == "lr_decay_gamma") get_field(v, k, o.lr_decay_gamma);
  else if (k == "seed") {
    std::uint64_t s = 0;
    get_field(v, k, s);
    c.seeds = {s};
  } else if (k == "seeds") get_field(v, k, c.seeds);
  else if (k == "out") c.out = parsed_field(v, k, [](const std::string& s) { return fs::path(s); });
  else if (k == "eval_batch_size") get_field(v, k, c.eval_batch_size);
  else if (k == "aggregation") c.aggregation = parsed_field(v, k, parse_patch_aggregation);
  else if (k == "sweep_losses") get_field(v, k, c.sweep_losses);
  else if (k == "sweep_optimizers") get_field(v, k, c.sweep_optimizers);
  else if (k == "sweep_batch_sizes") get_field(v, k, c.sweep_batch_sizes);
  else if (k == "landscape_dims") get_field(v, k, c.landscape_dims);
  else if (k == "landscape_resolution") get_field(v, k, c.landscape_resolution);
  else if (k == "landscape_range") get_field(v, k, c.landscape_range);
  else if (k == "direction_seeds") get_field(v, k, c.direction_seeds);
  else if (k == "landscape_samples") get_field(v, k, c.landscape_samples);
  else if (k == "landscape_loss") get_field(v, k, c.landscape_loss);
  else if (k == "normalization") c.normalization = parsed_field(v, k, parse_direction_norm);
  else if (k == "probe_epochs") get_field(v, k, c.probe_epochs);
  else throw ConfigError("unknown config field '" + k + "'");
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw FormatError("failed writing " + path.string());
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Sweep error text goes into a CSV cell.
std::string sanitize(std::string s) {
  for (char& ch : s)
    if (ch == ',' || ch == '\n' || ch == '\r') ch = ';';
  return s;
}

}  // namespace

AEConfig ExperimentConfig::default_model() {
  AEConfig c = AEConfig::for_depth(4);
  c.pad_to_fit = true;
  return c;
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object of key-value pairs");
  ExperimentConfig c;
  // depth first: it picks the width defaults the other keys refine
  if (j.contains("depth")) {
    std::size_t depth = 0;
    get_field(j.at("depth"), "depth", depth);
    const bool pad = c.model.pad_to_fit;
    c.model = AEConfig::for_depth(depth);
    c.model.pad_to_fit = pad;
  }
  for (const auto& [k, v] : j.items()) apply_key(c, k, v);
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config file '" + path.string() + "' cannot be opened");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config file '" + path.string() + "': " + e.what());
  }
  return from_json(j);
}

void ExperimentConfig::set(const std::string& key, const std::string& value) {
  json v = json::parse(value, nullptr, false);
  if (v.is_discarded()) v = value;
  apply_key(*this, key, v);
}

json ExperimentConfig::to_json() const {
  const auto& o = train.optimizer;
  return {{"dataset", dataset},
          {"data_dir", data_dir.string()},
          {"normal_class", normal_class},
          {"category", category},
          {"image_size", image_size},
          {"grayscale", grayscale},
          {"max_train", max_train},
          {"max_test", max_test},
          {"depth", model.depth},
          {"kernel_size", model.kernel_size},
          {"base_width", model.base_width},
          {"channel_cap", model.channel_cap},
          {"leaky_slope", model.leaky_slope},
          {"patches", model.patches},
          {"skip_connections", model.skip_connections},
          {"pad_to_fit", model.pad_to_fit},
          {"epochs", train.epochs},
          {"batch_size", train.batch_size},
          {"loss", train.loss},
          {"lamp_epsilon", train.lamp.epsilon},
          {"lamp_reduction", to_string(train.lamp.reduction)},
          {"shuffle", train.shuffle},
          {"optimizer", to_string(o.kind)},
          {"learning_rate", o.learning_rate},
          {"momentum", o.momentum},
          {"rho", o.rho},
          {"beta1", o.beta1},
          {"beta2", o.beta2},
          {"optimizer_eps", o.eps},
          {"weight_decay", o.weight_decay},
          {"grad_clip_norm", o.grad_clip_norm},
          {"lr_decay_every", o.lr_decay_every},
          {"lr_decay_gamma", o.lr_decay_gamma},
          {"seeds", seeds},
          {"out", out.string()},
          {"eval_batch_size", eval_batch_size},
          {"aggregation", to_string(aggregation)},
          {"sweep_losses", sweep_losses},
          {"sweep_optimizers", sweep_optimizers},
          {"sweep_batch_sizes", sweep_batch_sizes},
          {"landscape_dims", landscape_dims},
          {"landscape_resolution", landscape_resolution},
          {"landscape_range", landscape_range},
          {"direction_seeds", direction_seeds},
          {"landscape_samples", landscape_samples},
          {"landscape_loss", landscape_loss},
          {"normalization", to_string(normalization)},
          {"probe_epochs", probe_epochs}};
}

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& what) {
    throw ConfigError("config field '" + field + "': " + what);
  };
  if (dataset != "mnist" && dataset != "mvtec") fail("dataset", "expected mnist or mvtec, got '" + dataset + "'");
  if (data_dir.empty() || !fs::exists(data_dir)) fail("data_dir", "path '" + data_dir.string() + "' does not exist");
  if (dataset == "mnist" && (normal_class < 0 || normal_class > 9)) fail("normal_class", "expected a digit 0-9");
  if (dataset == "mvtec") {
    if (category.empty()) fail("category", "required for mvtec");
    if (!fs::is_directory(data_dir / category)) {
      fail("category", "directory '" + (data_dir / category).string() + "' does not exist");
    }
    if (image_size == 0) fail("image_size", "must be positive");
  }
  if (seeds.empty()) fail("seeds", "must not be empty");
  if (train.epochs == 0) fail("epochs", "must be at least 1");
  if (train.batch_size == 0) fail("batch_size", "must be at least 1");
  if (eval_batch_size == 0) fail("eval_batch_size", "must be at least 1");
  try {
    train.validate();
  } catch (const ConfigError& e) {
    fail("train", e.what());
  }
  for (const auto& l : sweep_losses) {
    try {
      LossSpec::parse(l);
    } catch (const ConfigError& e) {
      fail("sweep_losses", e.what());
    }
  }
  for (const auto& o : sweep_optimizers) {
    try {
      parse_optimizer(o);
    } catch (const ConfigError& e) {
      fail("sweep_optimizers", e.what());
    }
  }
  for (auto b : sweep_batch_sizes)
    if (b == 0) fail("sweep_batch_sizes", "batch sizes must be positive");
  if (landscape_dims != 1 && landscape_dims != 2) fail("landscape_dims", "expected 1 or 2");
  if (landscape_resolution < 2) fail("landscape_resolution", "need at least 2 points");
  if (!(landscape_range > 0)) fail("landscape_range", "must be positive");
  if (direction_seeds.size() < landscape_dims) fail("direction_seeds", "need one seed per grid axis");
  if (landscape_samples == 0) fail("landscape_samples", "must be positive");
  if (landscape_loss != "own" && landscape_loss != "probe") {
    try {
      LossSpec::parse(landscape_loss);
    } catch (const ConfigError& e) {
      fail("landscape_loss", std::string("expected own, probe or a loss spec; ") + e.what());
    }
  }
}

std::string fnv1a_hex(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, h);
  return buf;
}

std::string ExperimentConfig::fingerprint() const {
  auto j = to_json();
  j.erase("out");
  return fnv1a_hex(j.dump());
}

ExperimentConfig ExperimentConfig::for_seed(std::uint64_t seed) const {
  ExperimentConfig c = *this;
  c.seeds = {seed};
  return c;
}

ADTask load_experiment_task(const ExperimentConfig& config) {
  ADTask task;
  if (config.dataset == "mnist") {
    task = make_one_class_task(load_mnist(config.data_dir), config.normal_class,
                               {.max_train = config.max_train, .max_test = config.max_test});
  } else if (config.dataset == "mvtec") {
    task = load_mvtec_category(config.data_dir, config.category,
                               {.height = config.image_size, .width = config.image_size, .grayscale = config.grayscale});
    if (config.max_train) task.train = task.train.head(std::min(config.max_train, task.train.size()));
    if (config.max_test) task.test = task.test.head(std::min(config.max_test, task.test.size()));
  } else {
    throw ConfigError("config field 'dataset': expected mnist or mvtec, got '" + config.dataset + "'");
  }
  if (task.train.size() == 0) throw DataError("task '" + task.name + "' has no training samples");
  task.validate();
  return task;
}

AEConfig model_config_for(const ExperimentConfig& config, const ADTask& task) {
  AEConfig m = config.model;
  m.input_channels = task.train.pixels.dim(1);
  m.height = task.train.pixels.dim(2);
  m.width = task.train.pixels.dim(3);
  m.validate();
  return m;
}

TrainConfig train_config_for(const ExperimentConfig& config, std::uint64_t seed) {
  TrainConfig t = config.train;
  t.seed = seed;
  t.patches = config.model.patches;
  return t;
}

Tensor<float> fixed_batch(const ExperimentConfig& config, const ADTask& task) {
  return task.train.head(std::min(config.landscape_samples, task.train.size())).pixels;
}

Run train_run(const ExperimentConfig& config, const ADTask& task, std::uint64_t seed) {
  ExperimentConfig narrowed = config.for_seed(seed);
  auto model = AEModel<float>::build(model_config_for(config, task), seed);
  const TrainConfig tc = train_config_for(config, seed);
  Optimizer<float> optimizer(tc.optimizer, model.parameters());
  auto history = train(model, task.train, tc, {}, &optimizer);
  std::string fp = narrowed.fingerprint();
  return Run{std::move(narrowed), seed, std::move(fp), std::move(model), std::move(history), optimizer.state_file()};
}

void save_run(const Run& run, const fs::path& dir) {
  fs::create_directories(dir);
  save_model(run.model, dir / "model");
  auto model_json = read_json(model_config_path(dir / "model"));
  model_json["fingerprint"] = run.fingerprint;
  write_json(model_config_path(dir / "model"), model_json);
  save_parameters(dir / "model.optim", run.optimizer_state);

  auto history = run.history.to_json();
  history["fingerprint"] = run.fingerprint;
  write_json(dir / "history.json", history);
  auto timing = run.history.timing_json();
  timing["fingerprint"] = run.fingerprint;
  write_json(dir / "timing.json", timing);
  write_json(dir / "run.json", {{"fingerprint", run.fingerprint},
                                {"seed", run.seed},
                                {"loss_kind", run.history.loss_kind},
                                {"files", {"model.lampmodel", "model.json", "model.optim", "history.json", "timing.json"}},
                                {"config", run.config.to_json()}});
}

Run load_run(const fs::path& dir) {
  const auto meta = read_json(dir / "run.json");
  ExperimentConfig config;
  std::string fp;
  std::uint64_t seed = 0;
  try {
    config = ExperimentConfig::from_json(meta.at("config"));
    meta.at("fingerprint").get_to(fp);
    meta.at("seed").get_to(seed);
  } catch (const json::exception& e) {
    throw FormatError((dir / "run.json").string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw FormatError((dir / "run.json").string() + ": " + e.what());
  }
  if (config.fingerprint() != fp) {
    throw FormatError((dir / "run.json").string() + ": fingerprint does not match the stored config");
  }
  auto model = load_model<float>(dir / "model");
  TrainHistory history;
  try {
    history = TrainHistory::from_json(read_json(dir / "history.json"));
  } catch (const json::exception& e) {
    throw FormatError((dir / "history.json").string() + ": " + e.what());
  }
  ParameterFile opt_state;
  if (fs::exists(dir / "model.optim")) opt_state = load_parameters(dir / "model.optim");
  return Run{std::move(config), seed, std::move(fp), std::move(model), std::move(history), std::move(opt_state)};
}

double fixed_batch_loss(AEModel<float>& model, const Tensor<float>& batch, const std::string& loss,
                        const LampConfig& lamp) {
  return reconstruction_loss_fn(model, batch, LossSpec::parse(loss), lamp)();
}

// ---- sweep table -----------------------------------------------------------

namespace {

constexpr const char* kSweepHeader = "kind,task,loss,optimizer,batch_size,seed,auroc,final_loss,fingerprint,error";

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::optional<double> optional_number(const std::string& s, const fs::path& path) {
  if (s.empty()) return std::nullopt;
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw FormatError(path.string() + ": bad number '" + s + "'");
}

}  // namespace

std::vector<SweepRow> read_sweep_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != kSweepHeader) throw FormatError(path.string() + ": unexpected header");
  std::vector<SweepRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != 10) throw FormatError(path.string() + ": row with " + std::to_string(f.size()) + " fields");
    SweepRow r;
    r.kind = f[0];
    r.task = f[1];
    r.loss = f[2];
    r.optimizer = f[3];
    r.batch_size = std::size_t(optional_number(f[4], path).value_or(0));
    r.seed = f[5];
    r.auroc = optional_number(f[6], path);
    r.final_loss = optional_number(f[7], path);
    r.fingerprint = f[8];
    r.error = f[9];
    rows.push_back(std::move(r));
  }
  return rows;
}

void write_sweep_csv(const fs::path& path, const std::vector<SweepRow>& rows) {
  // write-then-rename so an interrupted sweep never leaves a torn table
  const auto tmp = fs::path(path).concat(".tmp");
  {
    std::ofstream out(tmp);
    if (!out) throw FormatError("cannot write " + tmp.string());
    out << kSweepHeader << '\n';
    for (const auto& r : rows) {
      out << r.kind << ',' << r.task << ',' << r.loss << ',' << r.optimizer << ',' << r.batch_size << ',' << r.seed
          << ',' << (r.auroc ? format_double(*r.auroc) : "") << ','
          << (r.final_loss ? format_double(*r.final_loss) : "") << ',' << r.fingerprint << ','
          << sanitize(r.error) << '\n';
    }
  }
  fs::rename(tmp, path);
}

std::vector<SweepRow> aggregate_sweep(const std::vector<SweepRow>& runs) {
  struct Acc {
    SweepRow row;
    double auroc = 0, loss = 0;
    std::size_t ok = 0, failed = 0;
  };
  std::vector<Acc> groups;
  for (const auto& r : runs) {
    if (r.kind != "run" && r.kind != "error") continue;
    auto it = std::find_if(groups.begin(), groups.end(), [&](const Acc& a) {
      return a.row.task == r.task && a.row.loss == r.loss && a.row.optimizer == r.optimizer &&
             a.row.batch_size == r.batch_size;
    });
    if (it == groups.end()) {
      Acc a;
      a.row = {"mean", r.task, r.loss, r.optimizer, r.batch_size, "mean", std::nullopt, std::nullopt, "", ""};
      groups.push_back(a);
      it = groups.end() - 1;
    }
    if (r.kind == "run" && r.auroc) {
      it->auroc += *r.auroc;
      it->loss += r.final_loss.value_or(0.0);
      ++it->ok;
    } else {
      ++it->failed;
    }
  }
  std::vector<SweepRow> out;
  for (auto& g : groups) {
    if (g.ok) {
      g.row.auroc = g.auroc / double(g.ok);
      g.row.final_loss = g.loss / double(g.ok);
    }
    if (g.failed) g.row.error = std::to_string(g.failed) + " of " + std::to_string(g.ok + g.failed) + " seeds failed";
    out.push_back(g.row);
  }
  return out;
}

namespace {

// Loss rows x optimizer columns of mean AUROC, one block per batch size.
void write_sweep_table(const fs::path& path, const std::vector<SweepRow>& means,
                       const std::vector<std::string>& optimizers) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << "task,loss,batch_size";
  for (const auto& o : optimizers) out << ',' << o;
  out << '\n';
  std::vector<std::tuple<std::string, std::string, std::size_t>> keys;
  for (const auto& m : means) {
    const auto key = std::make_tuple(m.task, m.loss, m.batch_size);
    if (std::find(keys.begin(), keys.end(), key) == keys.end()) keys.push_back(key);
  }
  for (const auto& [task, loss, bs] : keys) {
    out << task << ',' << loss << ',' << bs;
    for (const auto& o : optimizers) {
      out << ',';
      for (const auto& m : means)
        if (m.task == task && m.loss == loss && m.batch_size == bs && m.optimizer == o && m.auroc) {
          out << format_double(*m.auroc);
        }
    }
    out << '\n';
  }
}

}  // namespace

// ---- commands --------------------------------------------------------------

int cmd_train(const ExperimentConfig& config, std::ostream& log) {
  config.validate();
  const auto task = load_experiment_task(config);
  log << "task " << task.name << ": " << task.train.size() << " train, " << task.test.size() << " test samples\n";
  for (auto seed : config.seeds) {
    const auto run = train_run(config, task, seed);
    const auto dir = config.out / ("seed-" + std::to_string(seed));
    save_run(run, dir);
    log << "seed=" << seed << " loss_kind=" << run.history.loss_kind
        << " final_loss=" << format_double(run.history.epoch_loss.back()) << " fingerprint=" << run.fingerprint
        << " dir=" << dir.string() << '\n';
  }
  return 0;
}

int cmd_eval(const fs::path& run_dir, const fs::path& out, const ExperimentConfig* task_override, std::ostream& log) {
  auto run = load_run(run_dir);
  const ExperimentConfig& data_cfg = task_override ? *task_override : run.config;
  if (task_override) data_cfg.validate();
  const auto task = load_experiment_task(data_cfg);
  EvalOptions opts;
  opts.batch_size = data_cfg.eval_batch_size;
  opts.aggregation = data_cfg.aggregation;
  opts.fingerprint = run.fingerprint;
  opts.config = run.config.to_json();
  const auto report = evaluate_task(run.model, task, opts);
  const auto batch = fixed_batch(data_cfg, task);
  const double batch_loss = fixed_batch_loss(run.model, batch, run.config.train.loss, run.config.train.lamp);

  auto j = report.to_json();
  j["loss_kind"] = run.history.loss_kind;
  j["fixed_batch_loss"] = batch_loss;
  j["fixed_batch_size"] = batch.dim(0);
  fs::create_directories(out);
  write_json(out / "eval.json", j);
  log << "auroc=" << format_double(report.auroc) << '\n';
  log << "fixed_batch_loss=" << format_double(batch_loss) << '\n';
  return 0;
}

int cmd_sweep(const ExperimentConfig& config, std::ostream& log) {
  config.validate();
  const auto task = load_experiment_task(config);
  const auto losses = config.sweep_losses.empty() ? std::vector<std::string>{config.train.loss} : config.sweep_losses;
  std::vector<std::string> optimizers;
  for (const auto& o : config.sweep_optimizers) optimizers.push_back(to_string(parse_optimizer(o)));
  if (optimizers.empty()) optimizers.push_back(to_string(config.train.optimizer.kind));
  const auto batch_sizes =
      config.sweep_batch_sizes.empty() ? std::vector<std::size_t>{config.train.batch_size} : config.sweep_batch_sizes;

  fs::create_directories(config.out);
  const auto csv = config.out / "sweep.csv";
  std::vector<SweepRow> done;  // completed cells kept from an earlier invocation
  if (fs::exists(csv)) {
    for (auto& r : read_sweep_csv(csv))
      if (r.kind == "run") done.push_back(std::move(r));
    log << "resuming: " << done.size() << " completed runs in " << csv.string() << '\n';
  }
  auto find = [&](const std::vector<SweepRow>& rows, const SweepRow& key) {
    return std::find_if(rows.begin(), rows.end(), [&](const SweepRow& r) {
      return r.task == key.task && r.loss == key.loss && r.optimizer == key.optimizer &&
             r.batch_size == key.batch_size && r.seed == key.seed;
    });
  };

  std::vector<SweepRow> cells;
  for (const auto& loss : losses)
    for (const auto& opt : optimizers)
      for (auto bs : batch_sizes)
        for (auto seed : config.seeds) {
          cells.push_back({"", task.name, LossSpec::parse(loss).str(), opt, bs, std::to_string(seed), {}, {}, "", ""});
        }
  std::vector<SweepRow> rows;
  auto flush = [&] {
    std::vector<SweepRow> all;
    for (const auto& c : cells) {
      auto it = find(rows, c);
      if (it != rows.end()) all.push_back(*it);
    }
    for (const auto& r : done)  // completed rows outside the current axes are kept as they are
      if (find(cells, r) == cells.end()) all.push_back(r);
    const auto means = aggregate_sweep(all);
    all.insert(all.end(), means.begin(), means.end());
    write_sweep_csv(csv, all);
    write_sweep_table(config.out / "table.csv", means, optimizers);
  };

  std::size_t ran = 0, failed = 0;
  for (const auto& cell : cells) {
    if (auto it = find(done, cell); it != done.end()) {
      rows.push_back(*it);
      continue;
    }
    ExperimentConfig c = config;
    c.train.loss = cell.loss;
    c.train.optimizer.kind = parse_optimizer(cell.optimizer);
    c.train.batch_size = cell.batch_size;
    c.sweep_losses.clear();
    c.sweep_optimizers.clear();
    c.sweep_batch_sizes.clear();
    const std::uint64_t seed = std::stoull(cell.seed);
    SweepRow row = cell;
    row.fingerprint = c.for_seed(seed).fingerprint();
    try {
      auto run = train_run(c, task, seed);
      EvalOptions opts;
      opts.batch_size = c.eval_batch_size;
      opts.aggregation = c.aggregation;
      opts.fingerprint = run.fingerprint;
      const auto report = evaluate_task(run.model, task, opts);
      row.kind = "run";
      row.auroc = report.auroc;
      row.final_loss = run.history.epoch_loss.back();
      log << "run " << cell.loss << ' ' << cell.optimizer << " bs=" << cell.batch_size << " seed=" << cell.seed
          << " auroc=" << format_double(report.auroc) << '\n';
    } catch (const std::exception& e) {
      row.kind = "error";
      row.error = e.what();
      ++failed;
      log << "error " << cell.loss << ' ' << cell.optimizer << " bs=" << cell.batch_size << " seed=" << cell.seed
          << ": " << e.what() << '\n';
    }
    rows.push_back(row);
    ++ran;
    flush();
  }
  flush();
  log << "sweep: " << ran << " cells run, " << (cells.size() - ran) << " skipped, " << failed << " failed -> "
      << csv.string() << '\n';
  return 0;
}

namespace {

bool same_data(const ExperimentConfig& a, const ExperimentConfig& b) {
  return a.dataset == b.dataset && a.data_dir == b.data_dir && a.normal_class == b.normal_class &&
         a.category == b.category && a.image_size == b.image_size && a.grayscale == b.grayscale &&
         a.max_train == b.max_train;
}

// Every k-th training image so all digits are present (the split is grouped by class).
ImageBatch probe_data(const ExperimentConfig& data_cfg, std::size_t count) {
  if (data_cfg.dataset != "mnist") throw DataError("probe landscapes need labeled multi-class data (mnist)");
  const auto mnist = load_mnist(data_cfg.data_dir);
  const std::size_t n = mnist.train.size();
  count = std::min(count, n);
  std::vector<std::size_t> idx(count);
  for (std::size_t i = 0; i < count; ++i) idx[i] = i * n / count;
  return mnist.train.select(idx);
}

}  // namespace

int cmd_landscape(const std::vector<fs::path>& run_dirs, const ExperimentConfig& config, std::ostream& log) {
  if (run_dirs.empty() || run_dirs.size() > 2) throw ConfigError("landscape takes one checkpoint, or two in paired mode");
  std::vector<Run> runs;
  for (const auto& d : run_dirs) runs.push_back(load_run(d));
  // the data comes from the checkpoint, only the landscape keys from `config`
  ExperimentConfig check = config;
  {
    const auto& rc = runs[0].config;
    check.dataset = rc.dataset;
    check.data_dir = rc.data_dir;
    check.normal_class = rc.normal_class;
    check.category = rc.category;
    check.image_size = rc.image_size;
    check.validate();
  }
  if (runs.size() == 2) {
    if (!(runs[0].model.config() == runs[1].model.config())) {
      throw ConfigError("incompatible checkpoints: model configurations differ");
    }
    if (!same_data(runs[0].config, runs[1].config)) {
      throw ConfigError("incompatible checkpoints: trained on different data");
    }
  }
  const auto task = load_experiment_task(runs[0].config);
  const auto batch = fixed_batch(config, task);
  const GridSpec spec{-config.landscape_range, config.landscape_range, config.landscape_resolution};

  fs::create_directories(config.out);
  json meta = {{"fingerprint", check.fingerprint()}, {"grids", json::array()}};
  std::vector<double> sharpness;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    auto& run = runs[i];
    const std::string loss = config.landscape_loss == "own" ? run.config.train.loss : config.landscape_loss;
    LandscapeGrid grid;
    json slice;
    auto evaluate = [&](std::vector<NamedParameter<float>>& params, const std::function<double()>& fn) {
      const auto d1 = random_direction(params, config.direction_seeds[0], config.normalization);
      if (config.landscape_dims == 2) {
        const auto d2 = random_direction(params, config.direction_seeds[1], config.normalization);
        grid = loss_grid(params, fn, d1, &d2, spec);
      } else {
        grid = loss_grid<float>(params, fn, d1, nullptr, spec);
      }
    };
    if (loss == "probe") {
      const auto data = probe_data(runs[0].config, config.landscape_samples);
      ProbeConfig pc;
      pc.epochs = config.probe_epochs;
      pc.seed = run.seed;
      auto [probe, result] = encoder_probe_train(run.model, data, pc);
      evaluate(probe.parameters(), probe_loss_fn(probe, data.pixels, class_ids(data)));
      slice = {{"source", "mnist train, evenly strided"}, {"samples", data.size()},
               {"probe_train_accuracy", result.train_accuracy}};
    } else {
      evaluate(run.model.parameters(),
               reconstruction_loss_fn(run.model, batch, LossSpec::parse(loss), run.config.train.lamp));
      slice = {{"source", task.name + " normal train head"}, {"samples", batch.dim(0)}};
    }
    const double s = sharpness_index(grid);
    sharpness.push_back(s);
    const std::string file = runs.size() == 1 ? "landscape.csv" : "landscape_" + std::to_string(i) + ".csv";
    grid.metadata["loss"] = loss;
    grid.metadata["model_loss_kind"] = run.history.loss_kind;
    grid.metadata["run_fingerprint"] = run.fingerprint;
    grid.metadata["data"] = slice;
    grid.metadata["sharpness"] = s;
    grid.metadata["csv"] = file;
    write_grid_csv(config.out / file, grid);
    meta["grids"].push_back(grid.metadata);
    log << "grid " << i << ": loss=" << loss << " model=" << run.history.loss_kind
        << " sharpness=" << format_double(s) << " csv=" << (config.out / file).string() << '\n';
  }
  meta["sharpness"] = sharpness;
  write_json(config.out / "landscape.json", meta);
  return 0;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const DataError*>(&e) || dynamic_cast<const FormatError*>(&e) ||
      dynamic_cast<const ShapeError*>(&e)) {
    return 3;
  }
  if (dynamic_cast<const NumericError*>(&e) || dynamic_cast<const DomainError*>(&e)) return 4;
  return 1;
}

}  // namespace lamp
