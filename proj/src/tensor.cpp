// SPDX-License-Identifier: Apache-2.0
#include "cst/tensor.hpp"

#include <bit>
#include <istream>
#include <ostream>

namespace cst {

std::string to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace {

static_assert(std::endian::native == std::endian::little,
              "tensor serialization assumes a little-endian host");

void write_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t read_u32(std::istream& in) {
  std::uint32_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) {
    throw std::runtime_error("truncated tensor stream");
  }
  return v;
}

}  // namespace

void write_tensor(std::ostream& out, const Tensor<float>& t) {
  write_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (int d : t.shape()) write_u32(out, static_cast<std::uint32_t>(d));
  out.write(reinterpret_cast<const char*>(t.raw()),
            static_cast<std::streamsize>(sizeof(float) * static_cast<std::size_t>(t.size())));
}

Tensor<float> read_tensor(std::istream& in) {
  const std::uint32_t rank = read_u32(in);
  if (rank == 0 || rank > 8) throw std::runtime_error("bad tensor rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) {
    const std::uint32_t v = read_u32(in);
    if (v == 0 || v > (1u << 30)) throw std::runtime_error("bad tensor extent");
    d = static_cast<int>(v);
  }
  Tensor<float> t(shape);
  if (!in.read(reinterpret_cast<char*>(t.raw()),
               static_cast<std::streamsize>(sizeof(float) * static_cast<std::size_t>(t.size())))) {
    throw std::runtime_error("truncated tensor payload");
  }
  return t;
}

std::uint64_t checksum(const Tensor<float>& t, std::uint64_t seed) {
  std::uint64_t h = seed;
  auto mix = [&h](const unsigned char* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ULL;
    }
  };
  for (int d : t.shape()) mix(reinterpret_cast<const unsigned char*>(&d), sizeof d);
  mix(reinterpret_cast<const unsigned char*>(t.raw()), sizeof(float) * static_cast<std::size_t>(t.size()));
  return h;
}

}  // namespace cst
