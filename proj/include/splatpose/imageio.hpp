#pragma once

#include <array>
#include <fstream>

#include "splatpose/common.hpp"

namespace splatpose {

// Minimal PNG writer: 8-bit RGB, zlib stream with stored deflate blocks.
namespace detail {

inline std::uint32_t crc32_update(std::uint32_t crc, const unsigned char* data,
                                  std::size_t len) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t n = 0; n < 256; ++n) {
      std::uint32_t c = n;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
      t[n] = c;
    }
    return t;
  }();
  for (std::size_t i = 0; i < len; ++i) crc = table[(crc ^ data[i]) & 0xffu] ^ (crc >> 8);
  return crc;
}

inline void put_be32(std::string& out, std::uint32_t v) {
  out.push_back(char(v >> 24));
  out.push_back(char(v >> 16));
  out.push_back(char(v >> 8));
  out.push_back(char(v));
}

inline void put_chunk(std::string& out, const char type[4], const std::string& payload) {
  put_be32(out, std::uint32_t(payload.size()));
  std::string body(type, 4);
  body += payload;
  out += body;
  std::uint32_t crc = crc32_update(0xffffffffu,
                                   reinterpret_cast<const unsigned char*>(body.data()),
                                   body.size()) ^
                      0xffffffffu;
  put_be32(out, crc);
}

}  // namespace detail

inline void save_png(const Image3& img, const std::string& path) {
  const int w = img.width, h = img.height;
  std::string raw;
  raw.reserve(std::size_t(h) * (1 + std::size_t(w) * 3));
  for (int y = 0; y < h; ++y) {
    raw.push_back('\0');  // filter: none
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        raw.push_back(char(int(std::lround(clamp01(img.at(x, y, c)) * 255.0))));
  }

  // zlib: header, stored deflate blocks, adler32
  std::string z;
  z.push_back(char(0x78));
  z.push_back(char(0x01));
  std::size_t pos = 0;
  while (pos < raw.size()) {
    const std::size_t n = std::min<std::size_t>(65535, raw.size() - pos);
    const bool final = pos + n == raw.size();
    z.push_back(final ? char(1) : char(0));
    z.push_back(char(n & 0xff));
    z.push_back(char((n >> 8) & 0xff));
    z.push_back(char(~n & 0xff));
    z.push_back(char((~n >> 8) & 0xff));
    z.append(raw, pos, n);
    pos += n;
  }
  std::uint32_t s1 = 1, s2 = 0;
  for (unsigned char ch : raw) {
    s1 = (s1 + ch) % 65521;
    s2 = (s2 + s1) % 65521;
  }
  detail::put_be32(z, (s2 << 16) | s1);

  std::string png("\x89PNG\r\n\x1a\n", 8);
  std::string ihdr;
  detail::put_be32(ihdr, std::uint32_t(w));
  detail::put_be32(ihdr, std::uint32_t(h));
  ihdr.push_back(char(8));  // bit depth
  ihdr.push_back(char(2));  // rgb
  ihdr.push_back(char(0));
  ihdr.push_back(char(0));
  ihdr.push_back(char(0));
  detail::put_chunk(png, "IHDR", ihdr);
  detail::put_chunk(png, "IDAT", z);
  detail::put_chunk(png, "IEND", "");

  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f.write(png.data(), std::streamsize(png.size()));
}

inline void save_float_map(const Image<double>& img, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(img.data.data()),
          std::streamsize(img.data.size() * sizeof(double)));
}

}  // namespace splatpose
