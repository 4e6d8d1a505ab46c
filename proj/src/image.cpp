#include "xdet/core/image.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace xdet {

Image Image::filled(int w, int h, uint8_t r, uint8_t g, uint8_t b) {
  Image img;
  img.width = w;
  img.height = h;
  img.rgb.resize(static_cast<size_t>(w) * h * 3);
  for (size_t i = 0; i < img.rgb.size(); i += 3) {
    img.rgb[i] = r;
    img.rgb[i + 1] = g;
    img.rgb[i + 2] = b;
  }
  return img;
}

namespace {

void put_u32_be(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v >> 24));
  out.push_back(static_cast<uint8_t>(v >> 16));
  out.push_back(static_cast<uint8_t>(v >> 8));
  out.push_back(static_cast<uint8_t>(v));
}

uint32_t read_u32_be(const uint8_t* p) {
  return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
         (static_cast<uint32_t>(p[2]) << 8) | static_cast<uint32_t>(p[3]);
}

void append_chunk(std::vector<uint8_t>& out, const char type[4], const std::vector<uint8_t>& data) {
  put_u32_be(out, static_cast<uint32_t>(data.size()));
  const size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  const uint32_t crc = static_cast<uint32_t>(
      ::crc32(0L, out.data() + start, static_cast<uInt>(out.size() - start)));
  put_u32_be(out, crc);
}

std::vector<uint8_t> zlib_deflate(const std::vector<uint8_t>& raw) {
  uLongf bound = ::compressBound(static_cast<uLong>(raw.size()));
  std::vector<uint8_t> out(bound);
  if (::compress2(out.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw io_error("png: deflate failed");
  out.resize(bound);
  return out;
}

std::vector<uint8_t> zlib_inflate(const uint8_t* data, size_t len, size_t expected) {
  std::vector<uint8_t> out(expected);
  uLongf dst_len = static_cast<uLongf>(expected);
  if (::uncompress(out.data(), &dst_len, data, static_cast<uLong>(len)) != Z_OK ||
      dst_len != expected)
    throw io_error("png: inflate failed");
  return out;
}

int paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

}  // namespace

void write_png(const std::string& path, const Image& img) {
  check<io_error>(img.width > 0 && img.height > 0, "png: empty image");
  const size_t stride = static_cast<size_t>(img.width) * 3;
  std::vector<uint8_t> raw;
  raw.reserve((stride + 1) * static_cast<size_t>(img.height));
  for (int y = 0; y < img.height; ++y) {
    raw.push_back(0);  // filter: none
    raw.insert(raw.end(), img.rgb.begin() + static_cast<long>(y * stride),
               img.rgb.begin() + static_cast<long>((y + 1) * stride));
  }
  std::vector<uint8_t> png = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  std::vector<uint8_t> ihdr;
  put_u32_be(ihdr, static_cast<uint32_t>(img.width));
  put_u32_be(ihdr, static_cast<uint32_t>(img.height));
  ihdr.push_back(8);   // bit depth
  ihdr.push_back(2);   // color type: RGB
  ihdr.push_back(0);   // compression
  ihdr.push_back(0);   // filter method
  ihdr.push_back(0);   // no interlace
  append_chunk(png, "IHDR", ihdr);
  append_chunk(png, "IDAT", zlib_deflate(raw));
  append_chunk(png, "IEND", {});
  std::ofstream f(path, std::ios::binary);
  check<io_error>(static_cast<bool>(f), "cannot write " + path);
  f.write(reinterpret_cast<const char*>(png.data()), static_cast<std::streamsize>(png.size()));
}

Image read_png(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  check<io_error>(static_cast<bool>(f), "cannot read " + path);
  std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  check<io_error>(buf.size() > 8 && buf[0] == 0x89 && buf[1] == 'P', path + ": not a png");
  size_t pos = 8;
  int width = 0, height = 0;
  std::vector<uint8_t> idat;
  while (pos + 8 <= buf.size()) {
    const uint32_t len = read_u32_be(buf.data() + pos);
    const char* type = reinterpret_cast<const char*>(buf.data() + pos + 4);
    const uint8_t* data = buf.data() + pos + 8;
    check<io_error>(pos + 12 + len <= buf.size(), path + ": truncated png");
    if (std::memcmp(type, "IHDR", 4) == 0) {
      width = static_cast<int>(read_u32_be(data));
      height = static_cast<int>(read_u32_be(data + 4));
      check<io_error>(data[8] == 8 && data[9] == 2 && data[12] == 0,
                      path + ": unsupported png variant (need 8-bit RGB, no interlace)");
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), data, data + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      break;
    }
    pos += 12 + len;
  }
  check<io_error>(width > 0 && height > 0 && !idat.empty(), path + ": malformed png");
  const size_t stride = static_cast<size_t>(width) * 3;
  std::vector<uint8_t> raw =
      zlib_inflate(idat.data(), idat.size(), (stride + 1) * static_cast<size_t>(height));

  Image img;
  img.width = width;
  img.height = height;
  img.rgb.resize(stride * static_cast<size_t>(height));
  std::vector<uint8_t> prev(stride, 0);
  for (int y = 0; y < height; ++y) {
    const uint8_t filter = raw[static_cast<size_t>(y) * (stride + 1)];
    const uint8_t* src = raw.data() + static_cast<size_t>(y) * (stride + 1) + 1;
    uint8_t* dst = img.rgb.data() + static_cast<size_t>(y) * stride;
    for (size_t i = 0; i < stride; ++i) {
      const int a = i >= 3 ? dst[i - 3] : 0;
      const int b = prev[i];
      const int c = i >= 3 ? prev[i - 3] : 0;
      int v = src[i];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: v += paeth(a, b, c); break;
        default: throw io_error(path + ": unknown png filter");
      }
      dst[i] = static_cast<uint8_t>(v & 0xff);
    }
    std::memcpy(prev.data(), dst, stride);
  }
  return img;
}

void write_ppm(const std::string& path, const Image& img) {
  std::ofstream f(path, std::ios::binary);
  check<io_error>(static_cast<bool>(f), "cannot write " + path);
  f << "P6\n" << img.width << " " << img.height << "\n255\n";
  f.write(reinterpret_cast<const char*>(img.rgb.data()),
          static_cast<std::streamsize>(img.rgb.size()));
}

Image read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  check<io_error>(static_cast<bool>(f), "cannot read " + path);
  std::string magic;
  int w = 0, h = 0, maxv = 0;
  f >> magic >> w >> h >> maxv;
  check<io_error>(magic == "P6" && maxv == 255 && w > 0 && h > 0, path + ": unsupported ppm");
  f.get();
  Image img;
  img.width = w;
  img.height = h;
  img.rgb.resize(static_cast<size_t>(w) * h * 3);
  f.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
  check<io_error>(static_cast<bool>(f), path + ": truncated ppm");
  return img;
}

void write_image(const std::string& path, const Image& img) {
  if (path.size() >= 4 && path.compare(path.size() - 4, 4, ".ppm") == 0)
    write_ppm(path, img);
  else
    write_png(path, img);
}

Image read_image(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  check<io_error>(static_cast<bool>(f), "cannot read " + path);
  char magic[2] = {0, 0};
  f.read(magic, 2);
  f.close();
  if (magic[0] == 'P' && magic[1] == '6') return read_ppm(path);
  if (static_cast<uint8_t>(magic[0]) == 0x89 && magic[1] == 'P') return read_png(path);
  throw io_error(path + ": unsupported image format (png/ppm only)");
}

Image resize_bilinear(const Image& src, int out_w, int out_h) {
  check<input_error>(out_w > 0 && out_h > 0 && !src.empty(), "resize: bad arguments");
  if (out_w == src.width && out_h == src.height) return src;
  Image dst;
  dst.width = out_w;
  dst.height = out_h;
  dst.rgb.resize(static_cast<size_t>(out_w) * out_h * 3);
  const double sx = static_cast<double>(src.width) / out_w;
  const double sy = static_cast<double>(src.height) / out_h;
  for (int y = 0; y < out_h; ++y) {
    const double fy = (y + 0.5) * sy - 0.5;
    const int y0 = std::clamp(static_cast<int>(std::floor(fy)), 0, src.height - 1);
    const int y1 = std::min(y0 + 1, src.height - 1);
    const double wy = std::clamp(fy - y0, 0.0, 1.0);
    for (int x = 0; x < out_w; ++x) {
      const double fx = (x + 0.5) * sx - 0.5;
      const int x0 = std::clamp(static_cast<int>(std::floor(fx)), 0, src.width - 1);
      const int x1 = std::min(x0 + 1, src.width - 1);
      const double wx = std::clamp(fx - x0, 0.0, 1.0);
      for (int c = 0; c < 3; ++c) {
        const double v00 = src.at(y0, x0, c), v01 = src.at(y0, x1, c);
        const double v10 = src.at(y1, x0, c), v11 = src.at(y1, x1, c);
        const double v = (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11);
        dst.at(y, x, c) = static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
      }
    }
  }
  return dst;
}

}  // namespace xdet
