#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "xdr/core/error.hpp"

namespace xdr::procgen {

/// H x W x 3 image, channel values in [0, 1], row-major HWC.
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> rgb;

  Image() = default;
  Image(int h, int w, float fill = 0.f) : height(h), width(w), rgb(std::size_t(h) * w * 3, fill) {}

  float& at(int y, int x, int c) { return rgb[(std::size_t(y) * width + x) * 3 + c]; }
  float at(int y, int x, int c) const { return rgb[(std::size_t(y) * width + x) * 3 + c]; }
  friend bool operator==(const Image&, const Image&) = default;
};

inline std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(v, 0.f, 1.f)));
}

inline std::vector<std::uint8_t> to_bytes(const Image& img) {
  std::vector<std::uint8_t> out(img.rgb.size());
  std::transform(img.rgb.begin(), img.rgb.end(), out.begin(), to_byte);
  return out;
}

inline Image from_bytes(int h, int w, const std::uint8_t* bytes) {
  Image img(h, w);
  for (std::size_t i = 0; i < img.rgb.size(); ++i) img.rgb[i] = bytes[i] / 255.f;
  return img;
}

/// Binary PPM (P6), 8 bits per channel.
inline std::string encode_ppm(const Image& img) {
  std::string out = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  const auto bytes = to_bytes(img);
  out.append(reinterpret_cast<const char*>(bytes.data()), bytes.size());
  return out;
}

inline void write_ppm(const std::filesystem::path& path, const Image& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path.string() + " for writing");
  const std::string data = encode_ppm(img);
  f.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!f) throw Error("failed writing " + path.string());
}

/// Reads a P6 file into raw bytes; rejects anything else.
inline std::vector<std::uint8_t> read_ppm_bytes(const std::filesystem::path& path, int& height, int& width) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ValidationError("cannot open image " + path.string());
  auto token = [&]() {
    std::string t;
    char c;
    while (f.get(c)) {
      if (c == '#') {
        std::string line;
        std::getline(f, line);
      } else if (!std::isspace(static_cast<unsigned char>(c))) {
        t.push_back(c);
        break;
      }
    }
    while (f.get(c) && !std::isspace(static_cast<unsigned char>(c))) t.push_back(c);
    return t;
  };
  if (token() != "P6") throw ValidationError(path.string() + ": not a binary PPM (P6)");
  int maxval = 0;
  try {
    width = std::stoi(token());
    height = std::stoi(token());
    maxval = std::stoi(token());
  } catch (const std::exception&) {
    throw ValidationError(path.string() + ": malformed PPM header");
  }
  if (width <= 0 || height <= 0 || maxval != 255)
    throw ValidationError(path.string() + ": unsupported PPM geometry or depth");
  std::vector<std::uint8_t> bytes(std::size_t(width) * height * 3);
  f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (f.gcount() != static_cast<std::streamsize>(bytes.size()))
    throw ValidationError(path.string() + ": truncated pixel data");
  return bytes;
}

inline Image read_ppm(const std::filesystem::path& path) {
  int h = 0, w = 0;
  const auto bytes = read_ppm_bytes(path, h, w);
  return from_bytes(h, w, bytes.data());
}

}  // namespace xdr::procgen
