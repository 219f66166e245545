#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "hrfseg/error.hpp"

namespace hrfseg::io {

template <typename T>
T to_little(T value) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(value);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  }
  return value;
}

template <typename T>
void write_le(std::ostream& os, T value) {
  const T le = to_little(value);
  os.write(reinterpret_cast<const char*>(&le), sizeof(T));
}

template <typename T>
T read_le(std::istream& is, const std::string& what) {
  T value{};
  if (!is.read(reinterpret_cast<char*>(&value), sizeof(T))) throw FormatError(what + ": truncated");
  return to_little(value);
}

template <typename T>
void write_array_le(std::ostream& os, std::span<const T> values) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
  } else {
    for (const T& v : values) write_le(os, v);
  }
}

template <typename T>
void read_array_le(std::istream& is, std::span<T> out, const std::string& what) {
  if (!is.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(out.size_bytes()))) {
    throw FormatError(what + ": truncated");
  }
  if constexpr (std::endian::native != std::endian::little) {
    for (T& v : out) v = to_little(v);
  }
}

}  // namespace hrfseg::io
