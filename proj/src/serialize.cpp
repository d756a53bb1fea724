#include "lamp/serialize.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace lamp {

namespace {

template <class U>
void put_le(std::ostream& out, U value) {
  unsigned char buf[sizeof(U)];
  std::memcpy(buf, &value, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(U));
  out.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <class U>
U get_le(std::istream& in, const char* what) {
  unsigned char buf[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(buf), sizeof(U))) {
    throw FormatError(std::string("parameter file truncated while reading ") + what);
  }
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(U));
  U value;
  std::memcpy(&value, buf, sizeof(U));
  return value;
}

// Guards against absurd allocations from corrupted headers.
constexpr std::uint32_t kMaxNameLength = 4096;
constexpr std::uint32_t kMaxRank = 8;

}  // namespace

const ParameterRecord* ParameterFile::find(const std::string& name) const {
  for (const auto& r : records) {
    if (r.name == name) return &r;
  }
  return nullptr;
}

const ParameterRecord& ParameterFile::at(const std::string& name) const {
  if (const auto* r = find(name)) return *r;
  throw FormatError("parameter file has no record named '" + name + "'");
}

void write_parameters(std::ostream& out, const ParameterFile& file) {
  out.write(kParameterMagic, 6);
  put_le<std::uint8_t>(out, static_cast<std::uint8_t>(file.precision));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(file.records.size()));
  for (const auto& r : file.records) {
    if (numel(r.shape) != r.values.size()) {
      throw ShapeError("record '" + r.name + "' shape " + to_string(r.shape) +
                       " does not match its payload");
    }
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(r.name.size()));
    out.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(r.shape.size()));
    for (auto d : r.shape) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (double v : r.values) {
      if (file.precision == Precision::F32) {
        put_le<float>(out, static_cast<float>(v));
      } else {
        put_le<double>(out, v);
      }
    }
  }
  if (!out) throw FormatError("failed to write parameter file");
}

ParameterFile read_parameters(std::istream& in) {
  char magic[6];
  if (!in.read(magic, 6)) throw FormatError("parameter file truncated: missing magic");
  if (std::memcmp(magic, kParameterMagic, 6) != 0) {
    throw FormatError("bad magic: not a LAMPv1 parameter file");
  }
  ParameterFile file;
  const auto prec = get_le<std::uint8_t>(in, "precision flag");
  if (prec != 4 && prec != 8) {
    throw FormatError("unsupported precision flag " + std::to_string(prec));
  }
  file.precision = static_cast<Precision>(prec);
  const auto count = get_le<std::uint32_t>(in, "record count");
  for (std::uint32_t i = 0; i < count; ++i) {
    ParameterRecord r;
    const auto len = get_le<std::uint32_t>(in, "name length");
    if (len > kMaxNameLength) throw FormatError("record name length " + std::to_string(len) + " is implausible");
    r.name.resize(len);
    if (!in.read(r.name.data(), len)) throw FormatError("parameter file truncated in record name");
    const auto rank = get_le<std::uint32_t>(in, "rank");
    if (rank > kMaxRank) throw FormatError("record '" + r.name + "' has implausible rank " + std::to_string(rank));
    for (std::uint32_t k = 0; k < rank; ++k) r.shape.push_back(get_le<std::uint32_t>(in, "dimension"));
    const std::size_t n = numel(r.shape);
    r.values.resize(n);
    for (std::size_t k = 0; k < n; ++k) {
      r.values[k] = file.precision == Precision::F32 ? double(get_le<float>(in, "payload"))
                                                      : get_le<double>(in, "payload");
    }
    file.records.push_back(std::move(r));
  }
  return file;
}

void save_parameters(const std::filesystem::path& path, const ParameterFile& file) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  write_parameters(out, file);
}

ParameterFile load_parameters(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return read_parameters(in);
}

}  // namespace lamp
