#pragma once

// Datasets: MNIST IDX files, MVTec-style image directories, one-class tasks.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "lamp/tensor.hpp"

namespace lamp {

struct ImageBatch {
  Tensor<float> pixels;                 // [N,C,H,W] in [0,1]
  std::vector<int> labels;              // 0 normal / 1 anomalous; empty when unlabeled
  std::vector<std::string> ids;         // file path or "<file>#<index>"
  std::vector<std::string> class_tags;  // digit or defect type; empty when unknown

  std::size_t size() const { return pixels.rank() == 0 ? 0 : pixels.dim(0); }
  bool labeled() const { return !labels.empty(); }
  /// Throws DataError on range or length violations.
  void validate() const;
  /// Samples at `indices`, in that order.
  ImageBatch select(const std::vector<std::size_t>& indices) const;
  ImageBatch head(std::size_t n) const;
};

struct ADTask {
  std::string name;
  ImageBatch train;  // normal samples only
  ImageBatch test;   // labeled

  void validate() const;
};

/// Reads an IDX image/label pair (gzip-compressed or raw). Pixels are byte/255;
/// class tags carry the label values; `labels` stays empty.
ImageBatch load_idx(const std::filesystem::path& images_path,
                    const std::filesystem::path& labels_path);

struct MnistSplits {
  ImageBatch train;
  ImageBatch test;
};

/// Looks for train-images-idx3-ubyte[.gz], train-labels-idx1-ubyte[.gz],
/// t10k-images-idx3-ubyte[.gz] and t10k-labels-idx1-ubyte[.gz] in `dir`.
MnistSplits load_mnist(const std::filesystem::path& dir);

struct OneClassOptions {
  std::size_t max_train = 0;  // 0 = all normal train samples
  std::size_t max_test = 0;   // 0 = whole test split, else an evenly strided subset
};

/// Train = train-split samples of `normal_class`; test = the test split with
/// label 0 iff its class equals `normal_class`.
ADTask make_one_class_task(const MnistSplits& data, int normal_class, const OneClassOptions& options = {});

struct MvtecOptions {
  std::size_t height = 256;
  std::size_t width = 256;
  bool grayscale = false;
};

/// `<root>/<category>/train/good/*.png` and `<root>/<category>/test/<kind>/*.png`;
/// test label 0 for `good`, 1 for any other subfolder. Files are visited in
/// lexicographic order.
ADTask load_mvtec_category(const std::filesystem::path& root, const std::string& category,
                           const MvtecOptions& options = {});

struct PreprocessOp {
  enum class Kind { Resize, Grayscale, Normalize };
  Kind kind;
  std::size_t height = 0;  // Resize only
  std::size_t width = 0;

  static PreprocessOp resize(std::size_t h, std::size_t w) { return {Kind::Resize, h, w}; }
  static PreprocessOp grayscale() { return {Kind::Grayscale}; }
  /// Per-sample min-max stretch to [0,1]; constant samples are left alone.
  static PreprocessOp normalize() { return {Kind::Normalize}; }
};

ImageBatch preprocess(const ImageBatch& batch, const std::vector<PreprocessOp>& ops);

/// Bilinear resize with half-pixel centers and edge clamping.
Tensor<float> resize_bilinear(const Tensor<float>& pixels, std::size_t height, std::size_t width);
/// ITU-R 601 luma for 3-channel input, identity for 1 channel.
Tensor<float> to_grayscale(const Tensor<float>& pixels);

struct Image8 {
  std::size_t height = 0, width = 0, channels = 0;  // channels 1 or 3
  std::vector<std::uint8_t> data;                   // row-major, interleaved
};

/// Decodes any PNG into 8-bit gray (channels 1) or RGB (channels 3); alpha is dropped.
Image8 read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image8& image);

/// Sample `index` of an [N,C,H,W] batch as an 8-bit image (C must be 1 or 3).
Image8 to_image8(const Tensor<float>& pixels, std::size_t index);

}  // namespace lamp
