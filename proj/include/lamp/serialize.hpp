#pragma once

// Flat binary parameter container ("LAMPv1").
//
//   magic      6 bytes  "LAMPv1"
//   precision  u8       4 (float32) or 8 (float64)
//   count      u32 LE   number of records
//   per record:
//     name_len u32 LE, name (UTF-8, no terminator)
//     rank     u32 LE, dims u32 LE x rank
//     payload  numel x precision bytes, little-endian IEEE-754

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "lamp/tensor.hpp"

namespace lamp {

inline constexpr char kParameterMagic[] = "LAMPv1";

enum class Precision : std::uint8_t { F32 = 4, F64 = 8 };

template <class T>
constexpr Precision precision_of() {
  return sizeof(T) == 4 ? Precision::F32 : Precision::F64;
}

struct ParameterRecord {
  std::string name;
  Shape shape;
  std::vector<double> values;  // widened; narrowing back to float32 is exact
};

struct ParameterFile {
  Precision precision = Precision::F32;
  std::vector<ParameterRecord> records;

  const ParameterRecord* find(const std::string& name) const;
  const ParameterRecord& at(const std::string& name) const;
};

void write_parameters(std::ostream& out, const ParameterFile& file);
ParameterFile read_parameters(std::istream& in);

void save_parameters(const std::filesystem::path& path, const ParameterFile& file);
ParameterFile load_parameters(const std::filesystem::path& path);

template <class T>
ParameterRecord make_record(std::string name, const Tensor<T>& t) {
  return {std::move(name), t.shape(), std::vector<double>(t.data().begin(), t.data().end())};
}

template <class T>
ParameterRecord make_record(std::string name, Shape shape, const std::vector<T>& values) {
  return {std::move(name), std::move(shape), std::vector<double>(values.begin(), values.end())};
}

}  // namespace lamp
