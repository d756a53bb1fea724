#include "lamp/model.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

namespace lamp {

namespace {

std::size_t round_up(std::size_t v, std::size_t m) { return (v + m - 1) / m * m; }

std::string block_name(const char* side, std::size_t i) {
  return std::string(side) + "." + std::to_string(i);
}

}  // namespace

AEConfig AEConfig::for_depth(std::size_t depth) {
  AEConfig c;
  c.depth = depth;
  c.base_width = depth >= 6 ? 32 : 16;
  return c;
}

void AEConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("AEConfig: " + msg); };
  if (depth != 4 && depth != 6) fail("depth must be 4 or 6, got " + std::to_string(depth));
  if (input_channels == 0) fail("input_channels must be positive");
  if (height == 0 || width == 0) fail("input size must be positive");
  if (kernel_size == 0 || kernel_size % 2 == 0) {
    fail("kernel_size must be a positive odd integer, got " + std::to_string(kernel_size));
  }
  if (base_width == 0) fail("base_width must be positive");
  if (channel_cap < base_width) fail("channel_cap must be at least base_width");
  if (!(leaky_slope >= 0.0 && leaky_slope < 1.0)) fail("leaky_slope must lie in [0,1)");
  if (skip_connections) fail("skip connections are not supported");
  if (patches == 0) fail("patches must be at least 1");
  if (height % patches != 0 || width % patches != 0) {
    fail("input " + std::to_string(height) + "x" + std::to_string(width) +
         " is not divisible into a " + std::to_string(patches) + "x" + std::to_string(patches) +
         " patch grid");
  }
  const std::size_t unit = std::size_t(1) << depth;
  if (!pad_to_fit && (patch_height() % unit != 0 || patch_width() % unit != 0)) {
    fail(std::string(patches == 1 ? "input" : "patch") + " size " + std::to_string(patch_height()) +
         "x" + std::to_string(patch_width()) + " must be divisible by 2^depth = " +
         std::to_string(unit));
  }
}

std::size_t AEConfig::network_height() const {
  return pad_to_fit ? round_up(patch_height(), std::size_t(1) << depth) : patch_height();
}

std::size_t AEConfig::network_width() const {
  return pad_to_fit ? round_up(patch_width(), std::size_t(1) << depth) : patch_width();
}

std::vector<std::size_t> AEConfig::encoder_channels() const {
  std::vector<std::size_t> ch;
  std::size_t c = base_width;
  for (std::size_t i = 0; i < depth; ++i) {
    ch.push_back(std::min(c, channel_cap));
    c *= 2;
  }
  return ch;
}

void to_json(nlohmann::json& j, const AEConfig& c) {
  j = nlohmann::json{{"depth", c.depth},
                     {"input_channels", c.input_channels},
                     {"height", c.height},
                     {"width", c.width},
                     {"kernel_size", c.kernel_size},
                     {"base_width", c.base_width},
                     {"channel_cap", c.channel_cap},
                     {"leaky_slope", c.leaky_slope},
                     {"patches", c.patches},
                     {"skip_connections", c.skip_connections},
                     {"pad_to_fit", c.pad_to_fit}};
}

void from_json(const nlohmann::json& j, AEConfig& c) {
  AEConfig d = AEConfig::for_depth(j.value("depth", std::size_t(4)));
  c.depth = d.depth;
  c.input_channels = j.value("input_channels", d.input_channels);
  c.height = j.value("height", d.height);
  c.width = j.value("width", d.width);
  c.kernel_size = j.value("kernel_size", d.kernel_size);
  c.base_width = j.value("base_width", d.base_width);
  c.channel_cap = j.value("channel_cap", d.channel_cap);
  c.leaky_slope = j.value("leaky_slope", d.leaky_slope);
  c.patches = j.value("patches", d.patches);
  c.skip_connections = j.value("skip_connections", false);
  c.pad_to_fit = j.value("pad_to_fit", d.pad_to_fit);
}

template <class T>
Tensor<T> patchify(const Tensor<T>& batch, std::size_t patches) {
  if (batch.rank() != 4) throw ShapeError("patchify expects [N,C,H,W], got " + to_string(batch.shape()));
  if (patches == 0) throw ShapeError("patchify: patch count must be positive");
  if (patches == 1) return batch;
  const std::size_t n = batch.dim(0), c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  if (h % patches != 0 || w % patches != 0) {
    throw ShapeError("patchify: " + std::to_string(h) + "x" + std::to_string(w) +
                     " not divisible by " + std::to_string(patches));
  }
  const std::size_t ph = h / patches, pw = w / patches;
  // Output flat index -> input flat index.
  auto perm = std::make_shared<std::vector<std::size_t>>(batch.numel());
  std::size_t o = 0;
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t py = 0; py < patches; ++py)
      for (std::size_t px = 0; px < patches; ++px)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t y = 0; y < ph; ++y)
            for (std::size_t x = 0; x < pw; ++x)
              (*perm)[o++] = ((s * c + ch) * h + py * ph + y) * w + px * pw + x;
  std::vector<T> out(batch.numel());
  auto d = batch.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = d[(*perm)[i]];
  return make_result<T>(
      {n * patches * patches, c, ph, pw}, std::move(out), {batch},
      [perm](Node<T>& self) {
        Node<T>& in = *self.inputs[0];
        if (!in.requires_grad) return;
        auto g = in.grad_buffer();
        for (std::size_t i = 0; i < perm->size(); ++i) g[(*perm)[i]] += (*self.grad)[i];
      },
      "patchify");
}

template <class T>
Tensor<T> unpatchify(const Tensor<T>& pb, std::size_t patches) {
  if (pb.rank() != 4) throw ShapeError("unpatchify expects [N*P*P,C,h,w], got " + to_string(pb.shape()));
  if (patches == 1) return pb;
  const std::size_t pp = patches * patches;
  if (pb.dim(0) % pp != 0) {
    throw ShapeError("unpatchify: batch " + std::to_string(pb.dim(0)) + " not a multiple of " +
                     std::to_string(pp));
  }
  const std::size_t n = pb.dim(0) / pp, c = pb.dim(1), ph = pb.dim(2), pw = pb.dim(3);
  const std::size_t h = ph * patches, w = pw * patches;
  // Output flat index -> input flat index.
  auto perm = std::make_shared<std::vector<std::size_t>>(pb.numel());
  std::size_t i = 0;
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t py = 0; py < patches; ++py)
      for (std::size_t px = 0; px < patches; ++px)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t y = 0; y < ph; ++y)
            for (std::size_t x = 0; x < pw; ++x)
              (*perm)[((s * c + ch) * h + py * ph + y) * w + px * pw + x] = i++;
  std::vector<T> out(pb.numel());
  auto d = pb.data();
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = d[(*perm)[k]];
  return make_result<T>(
      {n, c, h, w}, std::move(out), {pb},
      [perm](Node<T>& self) {
        Node<T>& in = *self.inputs[0];
        if (!in.requires_grad) return;
        auto g = in.grad_buffer();
        for (std::size_t k = 0; k < perm->size(); ++k) g[(*perm)[k]] += (*self.grad)[k];
      },
      "unpatchify");
}

template <class T>
AEModel<T> AEModel<T>::build(const AEConfig& config, std::uint64_t seed) {
  config.validate();
  AEModel m;
  m.config_ = config;
  const std::size_t k = config.kernel_size;
  const auto enc = config.encoder_channels();
  const double a = config.leaky_slope;

  std::mt19937_64 rng(seed);
  auto kaiming = [&](std::size_t cout, std::size_t cin) {
    const double fan_in = double(cin * k * k);
    const double bound = std::sqrt(6.0 / ((1.0 + a * a) * fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<T> w(cout * cin * k * k);
    for (auto& v : w) v = T(dist(rng));
    return Tensor<T>::from({cout, cin, k, k}, std::move(w), true);
  };
  auto add_block = [&](const std::string& prefix, std::size_t cin, std::size_t cout, bool with_bn) {
    m.params_.push_back({prefix + ".conv.weight", kaiming(cout, cin)});
    m.params_.push_back({prefix + ".conv.bias", Tensor<T>::zeros({cout}, true)});
    if (with_bn) {
      m.params_.push_back({prefix + ".bn.gamma", Tensor<T>::full({cout}, T(1), true)});
      m.params_.push_back({prefix + ".bn.beta", Tensor<T>::zeros({cout}, true)});
      m.bn_.emplace_back(cout);
    }
  };

  std::size_t cin = config.input_channels;
  for (std::size_t i = 0; i < config.depth; ++i) {
    add_block(block_name("encoder", i), cin, enc[i], true);
    cin = enc[i];
  }
  for (std::size_t j = 0; j < config.depth; ++j) {
    const bool last = j + 1 == config.depth;
    const std::size_t cout = last ? config.input_channels : enc[config.depth - 2 - j];
    add_block(block_name("decoder", j), cin, cout, !last);
    cin = cout;
  }
  return m;
}

template <class T>
AEModel<T> AEModel<T>::clone() const {
  AEModel m;
  m.config_ = config_;
  m.bn_ = bn_;
  for (const auto& p : params_) m.params_.push_back({p.name, p.tensor.clone_leaf(p.tensor.requires_grad())});
  return m;
}

template <class T>
const Tensor<T>& AEModel<T>::parameter(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return p.tensor;
  }
  throw Error("no parameter named '" + name + "'");
}

template <class T>
void AEModel<T>::check_input(const Tensor<T>& batch) const {
  if (batch.rank() != 4) throw ShapeError("model input must be [N,C,H,W], got " + to_string(batch.shape()));
  const Shape expect{batch.dim(0), config_.input_channels, config_.height, config_.width};
  if (batch.shape() != expect) {
    throw ShapeError("model expects input " + to_string(expect) + ", got " + to_string(batch.shape()));
  }
}

template <class T>
Tensor<T> AEModel<T>::run_encoder(const Tensor<T>& x, Mode mode) {
  const std::size_t pad = config_.kernel_size / 2;
  Tensor<T> h = x;
  std::size_t p = 0;
  for (std::size_t i = 0; i < config_.depth; ++i, p += 4) {
    h = conv2d(h, params_[p].tensor, params_[p + 1].tensor, 2, pad);
    h = batchnorm2d(h, params_[p + 2].tensor, params_[p + 3].tensor, bn_[i], mode);
    h = leaky_relu(h, config_.leaky_slope);
  }
  return h;
}

template <class T>
Tensor<T> AEModel<T>::run_network(const Tensor<T>& x, Mode mode) {
  const std::size_t pad = config_.kernel_size / 2;
  Tensor<T> h = run_encoder(x, mode);
  std::size_t p = 4 * config_.depth;
  for (std::size_t j = 0; j < config_.depth; ++j) {
    h = upsample_nearest2x(h);
    h = conv2d(h, params_[p].tensor, params_[p + 1].tensor, 1, pad);
    if (j + 1 == config_.depth) {
      h = sigmoid(h);
    } else {
      h = batchnorm2d(h, params_[p + 2].tensor, params_[p + 3].tensor, bn_[config_.depth + j], mode);
      h = leaky_relu(h, config_.leaky_slope);
      p += 4;
    }
  }
  return h;
}

template <class T>
Tensor<T> AEModel<T>::forward(const Tensor<T>& batch, Mode mode) {
  check_input(batch);
  Tensor<T> x = patchify(batch, config_.patches);
  const std::size_t ph = config_.patch_height(), pw = config_.patch_width();
  const std::size_t nh = config_.network_height(), nw = config_.network_width();
  const std::size_t top = (nh - ph) / 2, left = (nw - pw) / 2;
  if (nh != ph || nw != pw) x = pad2d(x, top, nh - ph - top, left, nw - pw - left);
  Tensor<T> y = run_network(x, mode);
  if (nh != ph || nw != pw) y = crop2d(y, top, left, ph, pw);
  return unpatchify(y, config_.patches);
}

template <class T>
Tensor<T> AEModel<T>::encode(const Tensor<T>& batch, Mode mode) {
  check_input(batch);
  Tensor<T> x = batch;
  if (config_.pad_to_fit) {
    const std::size_t unit = std::size_t(1) << config_.depth;
    const std::size_t nh = round_up(config_.height, unit), nw = round_up(config_.width, unit);
    const std::size_t top = (nh - config_.height) / 2, left = (nw - config_.width) / 2;
    x = pad2d(x, top, nh - config_.height - top, left, nw - config_.width - left);
  }
  return run_encoder(x, mode);
}

template <class T>
std::size_t AEModel<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

template <class T>
void AEModel<T>::zero_grad() {
  for (auto& p : params_) p.tensor.clear_grad();
}

namespace {

std::string bn_prefix(const AEConfig& c, std::size_t idx) {
  return idx < c.depth ? block_name("encoder", idx) + ".bn" : block_name("decoder", idx - c.depth) + ".bn";
}

}  // namespace

template <class T>
ParameterFile AEModel<T>::to_parameter_file() const {
  ParameterFile file;
  file.precision = precision_of<T>();
  for (const auto& p : params_) file.records.push_back(make_record(p.name, p.tensor));
  for (std::size_t i = 0; i < bn_.size(); ++i) {
    const auto prefix = bn_prefix(config_, i);
    const std::size_t c = bn_[i].running_mean.size();
    file.records.push_back(make_record(prefix + ".running_mean", {c}, bn_[i].running_mean));
    file.records.push_back(make_record(prefix + ".running_var", {c}, bn_[i].running_var));
    file.records.push_back({prefix + ".num_batches_tracked", {1}, {double(bn_[i].num_batches_tracked)}});
  }
  return file;
}

template <class T>
void AEModel<T>::load_parameter_file(const ParameterFile& file) {
  auto fetch = [&](const std::string& name, const Shape& shape) -> const ParameterRecord& {
    const auto& r = file.at(name);
    if (r.shape != shape) {
      throw FormatError("config/parameter inconsistency: '" + name + "' has shape " + to_string(r.shape) +
                        ", config implies " + to_string(shape));
    }
    return r;
  };
  for (auto& p : params_) {
    const auto& r = fetch(p.name, p.tensor.shape());
    auto d = p.tensor.mutable_data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = T(r.values[i]);
  }
  for (std::size_t i = 0; i < bn_.size(); ++i) {
    const auto prefix = bn_prefix(config_, i);
    const Shape cs{bn_[i].running_mean.size()};
    const auto& rm = fetch(prefix + ".running_mean", cs);
    const auto& rv = fetch(prefix + ".running_var", cs);
    const auto& nb = fetch(prefix + ".num_batches_tracked", {1});
    for (std::size_t c = 0; c < cs[0]; ++c) {
      bn_[i].running_mean[c] = T(rm.values[c]);
      bn_[i].running_var[c] = T(rv.values[c]);
    }
    bn_[i].num_batches_tracked = std::size_t(nb.values[0]);
  }
}

std::filesystem::path model_binary_path(const std::filesystem::path& path) {
  auto p = path;
  return p.replace_extension(".lampmodel");
}

std::filesystem::path model_config_path(const std::filesystem::path& path) {
  auto p = path;
  return p.replace_extension(".json");
}

template <class T>
void save_model(const AEModel<T>& model, const std::filesystem::path& path) {
  save_parameters(model_binary_path(path), model.to_parameter_file());
  nlohmann::json j = model.config();
  j["precision"] = sizeof(T) == 4 ? "f32" : "f64";
  std::ofstream out(model_config_path(path));
  if (!out) throw FormatError("cannot write " + model_config_path(path).string());
  out << j.dump(2) << '\n';
}

template <class T>
AEModel<T> load_model(const std::filesystem::path& path) {
  std::ifstream in(model_config_path(path));
  if (!in) throw FormatError("cannot open model config " + model_config_path(path).string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("model config " + model_config_path(path).string() + ": " + e.what());
  }
  const AEConfig config = j.get<AEConfig>();
  auto model = AEModel<T>::build(config, 0);
  model.load_parameter_file(load_parameters(model_binary_path(path)));
  return model;
}

template Tensor<float> patchify(const Tensor<float>&, std::size_t);
template Tensor<double> patchify(const Tensor<double>&, std::size_t);
template Tensor<float> unpatchify(const Tensor<float>&, std::size_t);
template Tensor<double> unpatchify(const Tensor<double>&, std::size_t);
template class AEModel<float>;
template class AEModel<double>;
template void save_model(const AEModel<float>&, const std::filesystem::path&);
template void save_model(const AEModel<double>&, const std::filesystem::path&);
template AEModel<float> load_model(const std::filesystem::path&);
template AEModel<double> load_model(const std::filesystem::path&);

}  // namespace lamp
