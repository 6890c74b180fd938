#pragma once

// Binary netpbm output for the RGBA renders: PAM keeps alpha, PPM drops it.

#include <cstdint>
#include <fstream>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include "hetflow/error.hpp"

namespace hetflow::kfusion {

struct RgbaImage {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> rgba;  // row-major, 4 bytes per pixel

  friend bool operator==(const RgbaImage&, const RgbaImage&) = default;
};

inline std::string encode_pam(const RgbaImage& img) {
  require(img.rgba.size() == img.width * img.height * 4, ErrorCode::invalid_argument, "RGBA buffer size mismatch");
  std::ostringstream os;
  os << "P7\nWIDTH " << img.width << "\nHEIGHT " << img.height << "\nDEPTH 4\nMAXVAL 255\nTUPLTYPE RGB_ALPHA\nENDHDR\n";
  os.write(reinterpret_cast<const char*>(img.rgba.data()), static_cast<std::streamsize>(img.rgba.size()));
  return os.str();
}

inline std::string encode_ppm(const RgbaImage& img) {
  require(img.rgba.size() == img.width * img.height * 4, ErrorCode::invalid_argument, "RGBA buffer size mismatch");
  std::string out = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.reserve(out.size() + img.width * img.height * 3);
  for (std::size_t i = 0; i < img.width * img.height; ++i)
    for (std::size_t c = 0; c < 3; ++c) out.push_back(static_cast<char>(img.rgba[4 * i + c]));
  return out;
}

inline RgbaImage decode_pam(const std::string& bytes) {
  std::istringstream in(bytes);
  std::string line;
  require(std::getline(in, line) && line == "P7", ErrorCode::format, "not a PAM file");
  RgbaImage img;
  std::size_t depth = 0, maxval = 0;
  while (std::getline(in, line) && line != "ENDHDR") {
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "WIDTH") ls >> img.width;
    else if (key == "HEIGHT") ls >> img.height;
    else if (key == "DEPTH") ls >> depth;
    else if (key == "MAXVAL") ls >> maxval;
  }
  require(line == "ENDHDR" && depth == 4 && maxval == 255, ErrorCode::format, "unsupported PAM header");
  img.rgba.resize(img.width * img.height * 4);
  in.read(reinterpret_cast<char*>(img.rgba.data()), static_cast<std::streamsize>(img.rgba.size()));
  require(in.gcount() == static_cast<std::streamsize>(img.rgba.size()), ErrorCode::format, "truncated PAM data");
  return img;
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary);
  require(f.good(), ErrorCode::io, "cannot write '" + path + "'");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(f.good(), ErrorCode::io, "write to '" + path + "' failed");
}

}  // namespace hetflow::kfusion
