#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dds/common.hpp"

namespace dds::io {

// --- little-endian primitives -------------------------------------------

inline void put_u32_le(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32_le(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) |
         (std::uint32_t(b[2]) << 16) | (std::uint32_t(b[3]) << 24);
}

inline void put_f32_le(std::ostream& os, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32_le(os, bits);
}

inline float get_f32_le(std::istream& is) {
  const std::uint32_t bits = get_u32_le(is);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

// --- DDSM matrix format ---------------------------------------------------
// 4 magic bytes "DDSM", u32 rows, u32 cols (little-endian), then rows*cols
// 32-bit floats, row-major.

template <class S>
void write_ddsm(std::ostream& os, const Mat<S>& m) {
  os.write("DDSM", 4);
  put_u32_le(os, std::uint32_t(m.rows()));
  put_u32_le(os, std::uint32_t(m.cols()));
  if constexpr (std::is_same_v<S, float>) {
    if constexpr (std::endian::native == std::endian::little) {
      Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = m;
      os.write(reinterpret_cast<const char*>(rm.data()),
               std::streamsize(sizeof(float)) * rm.size());
      return;
    }
  }
  for (Index r = 0; r < m.rows(); ++r)
    for (Index c = 0; c < m.cols(); ++c) put_f32_le(os, float(m(r, c)));
}

template <class S>
Mat<S> read_ddsm(std::istream& is, const std::string& what = "DDSM stream") {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "DDSM", 4) != 0)
    throw io_error("not a DDSM matrix: " + what);
  const std::uint32_t rows = get_u32_le(is);
  const std::uint32_t cols = get_u32_le(is);
  Mat<S> m(rows, cols);
  if constexpr (std::is_same_v<S, float>) {
    if constexpr (std::endian::native == std::endian::little) {
      Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(rows, cols);
      is.read(reinterpret_cast<char*>(rm.data()),
              std::streamsize(sizeof(float)) * rm.size());
      if (!is) throw io_error("truncated DDSM matrix: " + what);
      m = rm;
      return m;
    }
  }
  for (std::uint32_t r = 0; r < rows; ++r)
    for (std::uint32_t c = 0; c < cols; ++c) m(r, c) = S(get_f32_le(is));
  if (!is) throw io_error("truncated DDSM matrix: " + what);
  return m;
}

template <class S>
void save_ddsm(const std::filesystem::path& path, const Mat<S>& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw io_error("cannot write " + path.string());
  write_ddsm(os, m);
  if (!os) throw io_error("write failed: " + path.string());
}

template <class S>
Mat<S> load_ddsm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw io_error("cannot read " + path.string());
  return read_ddsm<S>(is, path.string());
}

inline std::string slurp(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw io_error("cannot read " + path.string());
  std::string s((std::istreambuf_iterator<char>(is)),
                std::istreambuf_iterator<char>());
  return s;
}

inline void spit(const std::filesystem::path& path, const std::string& body) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw io_error("cannot write " + path.string());
  os.write(body.data(), std::streamsize(body.size()));
  if (!os) throw io_error("write failed: " + path.string());
}

}  // namespace dds::io
