#include "lamp/data.hpp"

#include <png.h>
#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <memory>

#include "lamp/error.hpp"

namespace fs = std::filesystem;

namespace lamp {

void ImageBatch::validate() const {
  if (pixels.rank() != 4) throw DataError("image batch must be [N,C,H,W], got " + to_string(pixels.shape()));
  const std::size_t n = size();
  for (float v : pixels.data()) {
    if (!(v >= 0.f && v <= 1.f)) throw DataError("pixel value " + std::to_string(v) + " outside [0,1]");
  }
  if (!labels.empty() && labels.size() != n) throw DataError("label count differs from sample count");
  for (int l : labels) {
    if (l != 0 && l != 1) throw DataError("label " + std::to_string(l) + " is not 0 or 1");
  }
  if (ids.size() != n) throw DataError("id count differs from sample count");
  if (!class_tags.empty() && class_tags.size() != n) throw DataError("class tag count differs from sample count");
}

ImageBatch ImageBatch::select(const std::vector<std::size_t>& indices) const {
  const auto& s = pixels.shape();
  const std::size_t per = s[1] * s[2] * s[3];
  std::vector<float> out(indices.size() * per);
  ImageBatch b;
  const auto src = pixels.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const std::size_t k = indices[i];
    if (k >= size()) throw DataError("sample index " + std::to_string(k) + " out of range");
    std::copy_n(src.begin() + k * per, per, out.begin() + i * per);
    if (labeled()) b.labels.push_back(labels[k]);
    b.ids.push_back(ids[k]);
    if (!class_tags.empty()) b.class_tags.push_back(class_tags[k]);
  }
  b.pixels = Tensor<float>::from({indices.size(), s[1], s[2], s[3]}, std::move(out));
  return b;
}

ImageBatch ImageBatch::head(std::size_t n) const {
  std::vector<std::size_t> idx(std::min(n, size()));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return select(idx);
}

void ADTask::validate() const {
  train.validate();
  test.validate();
  for (int l : train.labels) {
    if (l != 0) throw DataError("task '" + name + "': anomalous sample in the training split");
  }
  if (!test.labeled()) throw DataError("task '" + name + "': test split is unlabeled");
}

// ---------------------------------------------------------------------------
// IDX

namespace {

struct GzFile {
  gzFile f = nullptr;
  fs::path path;
  explicit GzFile(const fs::path& p) : path(p) {
    f = gzopen(p.string().c_str(), "rb");
    if (!f) throw DataError("cannot open " + p.string());
  }
  ~GzFile() {
    if (f) gzclose(f);
  }
  void read(void* dst, std::size_t n) {
    auto* out = static_cast<unsigned char*>(dst);
    while (n > 0) {
      const unsigned chunk = unsigned(std::min<std::size_t>(n, 1u << 30));
      const int got = gzread(f, out, chunk);
      if (got <= 0) throw DataError(path.string() + ": truncated or unreadable");
      out += got;
      n -= std::size_t(got);
    }
  }
  std::uint32_t be32() {
    unsigned char b[4];
    read(b, 4);
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) | b[3];
  }
};

fs::path find_idx(const fs::path& dir, const std::string& stem) {
  for (const char* suffix : {"", ".gz"}) {
    const auto p = dir / (stem + suffix);
    if (fs::exists(p)) return p;
  }
  throw DataError("missing " + stem + "[.gz] in " + dir.string());
}

}  // namespace

ImageBatch load_idx(const fs::path& images_path, const fs::path& labels_path) {
  GzFile img(images_path);
  if (const auto magic = img.be32(); magic != 0x803) {
    throw DataError(images_path.string() + ": bad image magic " + std::to_string(magic));
  }
  const std::size_t count = img.be32(), rows = img.be32(), cols = img.be32();
  if (rows == 0 || cols == 0) throw DataError(images_path.string() + ": zero image size");

  GzFile lab(labels_path);
  if (const auto magic = lab.be32(); magic != 0x801) {
    throw DataError(labels_path.string() + ": bad label magic " + std::to_string(magic));
  }
  const std::size_t label_count = lab.be32();
  if (label_count != count) {
    throw DataError("IDX count mismatch: " + std::to_string(count) + " images vs " +
                    std::to_string(label_count) + " labels");
  }

  std::vector<std::uint8_t> bytes(count * rows * cols);
  img.read(bytes.data(), bytes.size());
  std::vector<std::uint8_t> classes(count);
  lab.read(classes.data(), classes.size());

  ImageBatch b;
  std::vector<float> px(bytes.size());
  std::transform(bytes.begin(), bytes.end(), px.begin(), [](std::uint8_t v) { return float(v) / 255.f; });
  b.pixels = Tensor<float>::from({count, 1, rows, cols}, std::move(px));
  const std::string name = images_path.filename().string();
  for (std::size_t i = 0; i < count; ++i) {
    b.ids.push_back(name + "#" + std::to_string(i));
    b.class_tags.push_back(std::to_string(int(classes[i])));
  }
  return b;
}

MnistSplits load_mnist(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("MNIST directory " + dir.string() + " does not exist");
  return {load_idx(find_idx(dir, "train-images-idx3-ubyte"), find_idx(dir, "train-labels-idx1-ubyte")),
          load_idx(find_idx(dir, "t10k-images-idx3-ubyte"), find_idx(dir, "t10k-labels-idx1-ubyte"))};
}

ADTask make_one_class_task(const MnistSplits& data, int normal_class, const OneClassOptions& options) {
  const std::string tag = std::to_string(normal_class);
  std::vector<std::size_t> train_idx;
  for (std::size_t i = 0; i < data.train.size(); ++i) {
    if (data.train.class_tags.at(i) == tag) train_idx.push_back(i);
  }
  if (train_idx.empty()) throw DataError("class " + tag + " has no training samples");
  if (options.max_train > 0 && train_idx.size() > options.max_train) train_idx.resize(options.max_train);

  ADTask task;
  task.name = "mnist-" + tag;
  task.train = data.train.select(train_idx);
  const std::size_t total = data.test.size();
  const std::size_t n_test = options.max_test > 0 ? std::min(options.max_test, total) : total;
  // Evenly strided rather than a prefix: the test split may be grouped by class.
  std::vector<std::size_t> test_idx(n_test);
  for (std::size_t i = 0; i < n_test; ++i) test_idx[i] = i * total / n_test;
  task.test = data.test.select(test_idx);
  task.test.labels.clear();
  for (const auto& c : task.test.class_tags) task.test.labels.push_back(c == tag ? 0 : 1);
  return task;
}

// ---------------------------------------------------------------------------
// PNG

namespace {

struct PngError {
  std::string message;
};

[[noreturn]] void png_error_fn(png_structp png, png_const_charp msg) {
  auto* err = static_cast<PngError*>(png_get_error_ptr(png));
  if (err) err->message = msg;
  png_longjmp(png, 1);
}

void png_warning_fn(png_structp, png_const_charp) {}

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};

}  // namespace

Image8 read_png(const fs::path& path) {
  std::unique_ptr<std::FILE, FileCloser> fp(std::fopen(path.string().c_str(), "rb"));
  if (!fp) throw DataError("cannot open " + path.string());
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw DataError(path.string() + ": not a PNG file");
  }
  PngError err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, png_error_fn, png_warning_fn);
  if (!png) throw DataError("libpng initialization failed");
  png_infop info = png_create_info_struct(png);
  Image8 img;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError(path.string() + ": undecodable PNG (" + err.message + ")");
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);

  img.width = png_get_image_width(png, info);
  img.height = png_get_image_height(png, info);
  img.channels = png_get_channels(png, info);
  if (img.channels != 1 && img.channels != 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError(path.string() + ": unsupported channel layout");
  }
  img.data.resize(img.height * img.width * img.channels);
  rows.resize(img.height);
  for (std::size_t r = 0; r < img.height; ++r) rows[r] = img.data.data() + r * img.width * img.channels;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

void write_png(const fs::path& path, const Image8& image) {
  if (image.channels != 1 && image.channels != 3) throw DataError("write_png: channels must be 1 or 3");
  if (image.data.size() != image.height * image.width * image.channels) {
    throw DataError("write_png: buffer size does not match dimensions");
  }
  std::unique_ptr<std::FILE, FileCloser> fp(std::fopen(path.string().c_str(), "wb"));
  if (!fp) throw DataError("cannot create " + path.string());
  PngError err;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, png_error_fn, png_warning_fn);
  if (!png) throw DataError("libpng initialization failed");
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError(path.string() + ": PNG encoding failed (" + err.message + ")");
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, png_uint_32(image.width), png_uint_32(image.height), 8,
               image.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t r = 0; r < image.height; ++r) {
    png_write_row(png, const_cast<png_bytep>(image.data.data() + r * image.width * image.channels));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Image8 to_image8(const Tensor<float>& pixels, std::size_t index) {
  const auto& s = pixels.shape();
  if (s.size() != 4 || (s[1] != 1 && s[1] != 3) || index >= s[0]) {
    throw DataError("to_image8: need [N,1|3,H,W] and a valid index");
  }
  Image8 img{s[2], s[3], s[1], {}};
  img.data.resize(s[1] * s[2] * s[3]);
  const auto src = pixels.data().subspan(index * img.data.size(), img.data.size());
  for (std::size_t c = 0; c < s[1]; ++c)
    for (std::size_t i = 0; i < s[2] * s[3]; ++i) {
      const float v = std::clamp(src[c * s[2] * s[3] + i], 0.f, 1.f);
      img.data[i * s[1] + c] = std::uint8_t(std::lround(v * 255.f));
    }
  return img;
}

// ---------------------------------------------------------------------------
// Preprocessing

Tensor<float> resize_bilinear(const Tensor<float>& pixels, std::size_t height, std::size_t width) {
  if (height == 0 || width == 0) throw ConfigError("resize target must be positive");
  if (pixels.rank() != 4) throw DataError("resize expects [N,C,H,W]");
  const auto& s = pixels.shape();
  const std::size_t planes = s[0] * s[1], ih = s[2], iw = s[3];
  if (ih == height && iw == width) return pixels.detach();

  struct Tap {
    std::size_t lo, hi;
    float t;
  };
  auto taps = [](std::size_t in, std::size_t out) {
    std::vector<Tap> v(out);
    const double scale = double(in) / double(out);
    for (std::size_t o = 0; o < out; ++o) {
      double src = (double(o) + 0.5) * scale - 0.5;
      src = std::clamp(src, 0.0, double(in - 1));
      const std::size_t lo = std::size_t(std::floor(src));
      v[o] = {lo, std::min(lo + 1, in - 1), float(src - double(lo))};
    }
    return v;
  };
  const auto ty = taps(ih, height), tx = taps(iw, width);
  std::vector<float> out(planes * height * width);
  const auto in = pixels.data();
  for (std::size_t p = 0; p < planes; ++p) {
    const float* src = in.data() + p * ih * iw;
    float* dst = out.data() + p * height * width;
    for (std::size_t y = 0; y < height; ++y) {
      const float* r0 = src + ty[y].lo * iw;
      const float* r1 = src + ty[y].hi * iw;
      for (std::size_t x = 0; x < width; ++x) {
        // a + t*(b - a) keeps constant regions exactly constant.
        const float a = r0[tx[x].lo] + tx[x].t * (r0[tx[x].hi] - r0[tx[x].lo]);
        const float b = r1[tx[x].lo] + tx[x].t * (r1[tx[x].hi] - r1[tx[x].lo]);
        dst[y * width + x] = std::clamp(a + ty[y].t * (b - a), 0.f, 1.f);
      }
    }
  }
  return Tensor<float>::from({s[0], s[1], height, width}, std::move(out));
}

Tensor<float> to_grayscale(const Tensor<float>& pixels) {
  const auto& s = pixels.shape();
  if (s.size() != 4) throw DataError("grayscale expects [N,C,H,W]");
  if (s[1] == 1) return pixels.detach();
  if (s[1] != 3) throw DataError("grayscale needs 1 or 3 channels, got " + std::to_string(s[1]));
  const std::size_t hw = s[2] * s[3];
  std::vector<float> out(s[0] * hw);
  const auto in = pixels.data();
  for (std::size_t n = 0; n < s[0]; ++n) {
    const float* p = in.data() + n * 3 * hw;
    for (std::size_t i = 0; i < hw; ++i) {
      out[n * hw + i] = std::clamp(0.299f * p[i] + 0.587f * p[hw + i] + 0.114f * p[2 * hw + i], 0.f, 1.f);
    }
  }
  return Tensor<float>::from({s[0], 1, s[2], s[3]}, std::move(out));
}

namespace {

Tensor<float> normalize_per_sample(const Tensor<float>& pixels) {
  auto out = pixels.detach();
  auto d = out.mutable_data();
  const std::size_t n = pixels.dim(0), per = pixels.numel() / std::max<std::size_t>(n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    auto s = d.subspan(i * per, per);
    const auto [lo, hi] = std::minmax_element(s.begin(), s.end());
    const float a = *lo, b = *hi;
    if (b <= a) continue;
    for (auto& v : s) v = std::clamp((v - a) / (b - a), 0.f, 1.f);
  }
  return out;
}

}  // namespace

ImageBatch preprocess(const ImageBatch& batch, const std::vector<PreprocessOp>& ops) {
  ImageBatch out = batch;
  out.pixels = batch.pixels.detach();
  for (const auto& op : ops) {
    switch (op.kind) {
      case PreprocessOp::Kind::Resize: out.pixels = resize_bilinear(out.pixels, op.height, op.width); break;
      case PreprocessOp::Kind::Grayscale: out.pixels = to_grayscale(out.pixels); break;
      case PreprocessOp::Kind::Normalize: out.pixels = normalize_per_sample(out.pixels); break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// MVTec

namespace {

std::vector<fs::path> sorted_pngs(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    auto ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return char(std::tolower(c)); });
    if (ext == ".png") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  return files;
}

std::vector<fs::path> sorted_subdirs(const fs::path& dir) {
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_directory()) dirs.push_back(e.path());
  }
  std::sort(dirs.begin(), dirs.end());
  return dirs;
}

// Decodes, converts channels and resizes one file into `dst` ([C,H,W] slot).
void load_image_into(const fs::path& file, const MvtecOptions& opt, std::span<float> dst) {
  const Image8 img = read_png(file);
  const std::size_t c_in = img.channels, hw = img.height * img.width;
  std::vector<float> planar(c_in * hw);
  for (std::size_t i = 0; i < hw; ++i)
    for (std::size_t c = 0; c < c_in; ++c) planar[c * hw + i] = float(img.data[i * c_in + c]) / 255.f;
  auto t = Tensor<float>::from({1, c_in, img.height, img.width}, std::move(planar));
  const std::size_t c_out = opt.grayscale ? 1 : 3;
  if (c_out == 1) {
    t = to_grayscale(t);
  } else if (c_in == 1) {
    std::vector<float> rgb(3 * hw);
    for (std::size_t c = 0; c < 3; ++c) std::copy_n(t.data().begin(), hw, rgb.begin() + c * hw);
    t = Tensor<float>::from({1, 3, img.height, img.width}, std::move(rgb));
  }
  t = resize_bilinear(t, opt.height, opt.width);
  std::copy(t.data().begin(), t.data().end(), dst.begin());
}

ImageBatch load_files(const std::vector<fs::path>& files, const std::vector<int>& labels,
                      const std::vector<std::string>& tags, const MvtecOptions& opt) {
  const std::size_t c = opt.grayscale ? 1 : 3, per = c * opt.height * opt.width;
  std::vector<float> px(files.size() * per);
  ImageBatch b;
  for (std::size_t i = 0; i < files.size(); ++i) {
    load_image_into(files[i], opt, std::span<float>(px).subspan(i * per, per));
    b.ids.push_back(files[i].string());
  }
  b.pixels = Tensor<float>::from({files.size(), c, opt.height, opt.width}, std::move(px));
  b.labels = labels;
  b.class_tags = tags;
  return b;
}

}  // namespace

ADTask load_mvtec_category(const fs::path& root, const std::string& category, const MvtecOptions& options) {
  if (options.height == 0 || options.width == 0) throw ConfigError("MVTec target size must be positive");
  const fs::path base = root / category;
  const fs::path train_dir = base / "train" / "good";
  const fs::path test_dir = base / "test";
  if (!fs::is_directory(train_dir)) throw DataError("missing directory " + train_dir.string());
  if (!fs::is_directory(test_dir)) throw DataError("missing directory " + test_dir.string());

  const auto train_files = sorted_pngs(train_dir);
  if (train_files.empty()) throw DataError("no PNG files in " + train_dir.string());

  std::vector<fs::path> test_files;
  std::vector<int> test_labels;
  std::vector<std::string> test_tags;
  for (const auto& sub : sorted_subdirs(test_dir)) {
    const std::string kind = sub.filename().string();
    for (const auto& f : sorted_pngs(sub)) {
      test_files.push_back(f);
      test_labels.push_back(kind == "good" ? 0 : 1);
      test_tags.push_back(kind);
    }
  }
  if (test_files.empty()) throw DataError("no PNG files under " + test_dir.string());

  ADTask task;
  task.name = "mvtec-" + category;
  task.train = load_files(train_files, {}, std::vector<std::string>(train_files.size(), "good"), options);
  task.test = load_files(test_files, test_labels, test_tags, options);
  return task;
}

}  // namespace lamp
