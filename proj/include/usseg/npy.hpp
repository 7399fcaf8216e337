#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "usseg/tensor.hpp"

// Minimal NPY v1.0 serialization: little-endian scalars, C-contiguous,
// shape in the header. This is the on-disk format for every tensor.

namespace usseg::npy {

template <typename Scalar>
struct DtypeDescr;
template <>
struct DtypeDescr<float> {
  static constexpr const char* value = "<f4";
};
template <>
struct DtypeDescr<double> {
  static constexpr const char* value = "<f8";
};

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string shape_tuple(const Shape& shape) {
  std::string s = "(";
  for (int a = 0; a < shape.rank(); ++a) {
    s += std::to_string(shape.extent(a));
    s += ", ";
  }
  if (shape.rank() > 1) {
    s.pop_back();
    s.pop_back();
  } else {
    s.pop_back();  // single-axis tuples keep the trailing comma
  }
  s += ")";
  return s;
}

inline std::string header_for(const Shape& shape, const char* descr) {
  std::string dict = "{'descr': '";
  dict += descr;
  dict += "', 'fortran_order': False, 'shape': ";
  dict += shape_tuple(shape);
  dict += ", }";
  // Pad so magic(6) + version(2) + len(2) + header is a multiple of 64.
  std::size_t unpadded = 10 + dict.size() + 1;
  std::size_t padded = (unpadded + 63) / 64 * 64;
  dict.append(padded - unpadded, ' ');
  dict += '\n';
  return dict;
}

inline void parse_header(const std::string& header, const std::filesystem::path& path, std::string& descr,
                         bool& fortran, std::vector<std::int64_t>& dims) {
  auto find_key = [&](const std::string& key) {
    std::size_t p = header.find(key);
    if (p == std::string::npos) throw Error("npy: missing '" + key + "' in header of " + path.string());
    return p + key.size();
  };

  std::size_t p = find_key("'descr':");
  std::size_t q0 = header.find('\'', p);
  std::size_t q1 = header.find('\'', q0 + 1);
  if (q0 == std::string::npos || q1 == std::string::npos) throw Error("npy: bad descr in " + path.string());
  descr = header.substr(q0 + 1, q1 - q0 - 1);

  p = find_key("'fortran_order':");
  while (p < header.size() && header[p] == ' ') ++p;
  fortran = header.compare(p, 4, "True") == 0;

  p = find_key("'shape':");
  std::size_t open = header.find('(', p);
  std::size_t close = header.find(')', open);
  if (open == std::string::npos || close == std::string::npos) throw Error("npy: bad shape in " + path.string());
  dims.clear();
  std::string inner = header.substr(open + 1, close - open - 1);
  std::size_t i = 0;
  while (i < inner.size()) {
    while (i < inner.size() && (inner[i] == ' ' || inner[i] == ',')) ++i;
    if (i >= inner.size()) break;
    std::size_t j = i;
    while (j < inner.size() && inner[j] >= '0' && inner[j] <= '9') ++j;
    if (j == i) throw Error("npy: bad shape in " + path.string());
    dims.push_back(std::stoll(inner.substr(i, j - i)));
    i = j;
  }
}

}  // namespace detail

template <typename Scalar>
void save(const std::filesystem::path& path, const TensorT<Scalar>& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("npy: cannot open " + path.string() + " for writing");
  const std::string header = detail::header_for(t.shape(), DtypeDescr<Scalar>::value);
  const char magic[8] = {'\x93', 'N', 'U', 'M', 'P', 'Y', '\x01', '\x00'};
  out.write(magic, 8);
  const std::uint16_t hlen = static_cast<std::uint16_t>(header.size());
  const unsigned char len_le[2] = {static_cast<unsigned char>(hlen & 0xff),
                                   static_cast<unsigned char>(hlen >> 8)};
  out.write(reinterpret_cast<const char*>(len_le), 2);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(reinterpret_cast<const char*>(t.data()),
            static_cast<std::streamsize>(sizeof(Scalar) * static_cast<std::size_t>(t.numel())));
  if (!out) throw Error("npy: write failed for " + path.string());
}

/// Loads a <f4 or <f8 array and casts it to Scalar.
template <typename Scalar = float>
TensorT<Scalar> load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("npy: cannot open " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, "\x93NUMPY", 6) != 0) throw Error("npy: bad magic in " + path.string());
  if (magic[6] != 1) throw Error("npy: unsupported version in " + path.string());
  unsigned char len_le[2];
  in.read(reinterpret_cast<char*>(len_le), 2);
  const std::size_t hlen = static_cast<std::size_t>(len_le[0]) | (static_cast<std::size_t>(len_le[1]) << 8);
  std::string header(hlen, '\0');
  in.read(header.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw Error("npy: truncated header in " + path.string());

  std::string descr;
  bool fortran = false;
  std::vector<std::int64_t> dims;
  detail::parse_header(header, path, descr, fortran, dims);
  if (fortran) throw Error("npy: fortran order not supported: " + path.string());
  if (dims.empty()) dims.push_back(1);  // 0-d array read back as a length-1 tensor

  const Shape shape{std::span<const std::int64_t>(dims)};
  auto read_payload = [&]<typename Stored>() {
    TensorT<Stored> raw(shape);
    in.read(reinterpret_cast<char*>(raw.data()),
            static_cast<std::streamsize>(sizeof(Stored) * static_cast<std::size_t>(raw.numel())));
    if (!in) throw Error("npy: truncated data in " + path.string());
    return raw;
  };

  if (descr == "<f4") {
    TensorT<float> raw = read_payload.template operator()<float>();
    if constexpr (std::is_same_v<Scalar, float>) return raw;
    return raw.template cast<Scalar>();
  }
  if (descr == "<f8") {
    TensorT<double> raw = read_payload.template operator()<double>();
    if constexpr (std::is_same_v<Scalar, double>) return raw;
    return raw.template cast<Scalar>();
  }
  throw Error("npy: unsupported dtype '" + descr + "' in " + path.string());
}

}  // namespace usseg::npy
