#pragma once

// Flat binary tensor container ("RVT1"):
//   bytes 0-3  magic "RVT1"
//   byte  4    dtype, 0 = f32 (the only dtype)
//   byte  5    ndim
//   then ndim u32 little-endian dims
//   then row-major little-endian payload
// Readers/writers assume a little-endian host.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <rvp/errors.hpp>
#include <rvp/tensor.hpp>

namespace rvp {

inline void write_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw data_error("cannot open for write: " + path.string());
  f.write("RVT1", 4);
  const uint8_t dtype = 0, ndim = uint8_t(t.ndim());
  f.put(char(dtype));
  f.put(char(ndim));
  for (int64_t i = 0; i < t.ndim(); ++i) {
    if (t.dim(i) > INT64_C(0xffffffff))
      throw data_error("tensor dim too large for container");
    const uint32_t d = uint32_t(t.dim(i));
    f.write(reinterpret_cast<const char*>(&d), 4);
  }
  f.write(reinterpret_cast<const char*>(t.data()),
          std::streamsize(t.numel()) * 4);
  if (!f) throw data_error("short write: " + path.string());
}

inline Tensor read_tensor(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw data_error("cannot open: " + path.string());
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "RVT1", 4) != 0)
    throw data_error("bad magic in " + path.string());
  const int dtype = f.get();
  const int ndim = f.get();
  if (dtype != 0) throw data_error("unsupported dtype in " + path.string());
  if (ndim <= 0 || ndim > 8) throw data_error("bad ndim in " + path.string());
  Shape shape;
  int64_t numel = 1;
  for (int i = 0; i < ndim; ++i) {
    uint32_t d = 0;
    f.read(reinterpret_cast<char*>(&d), 4);
    if (!f || d == 0) throw data_error("bad dims in " + path.string());
    shape.push_back(int64_t(d));
    numel *= int64_t(d);
    if (numel > (INT64_C(1) << 40))
      throw data_error("tensor too large in " + path.string());
  }
  Tensor t(shape);
  f.read(reinterpret_cast<char*>(t.data()), std::streamsize(numel) * 4);
  if (!f || f.gcount() != std::streamsize(numel) * 4)
    throw data_error("truncated payload in " + path.string());
  return t;
}

}  // namespace rvp
