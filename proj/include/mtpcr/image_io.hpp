#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include "json.hpp"
#include "mtpcr/bev.hpp"
#include "mtpcr/cloud_io.hpp"

namespace mtpcr {

/// Binary 8-bit graymap ("P5"), rows top to bottom, v = row index.
inline std::string encode_pgm(const ImageU8& img) {
  if (img.empty()) throw Error(ErrorCode::kIo, "cannot encode an empty image");
  std::string out = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(img.data.data()), img.data.size());
  return out;
}

inline ImageU8 decode_pgm(std::string_view bytes, const std::string& name = "pgm") {
  auto fail = [&](const std::string& msg) { return Error(ErrorCode::kIo, name + ": " + msg); };
  std::size_t pos = 0;
  auto skip_space_and_comments = [&] {
    for (;;) {
      while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
      if (pos < bytes.size() && bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else {
        return;
      }
    }
  };
  auto read_int = [&]() -> long {
    skip_space_and_comments();
    const std::size_t begin = pos;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (pos == begin) throw fail("malformed header");
    if (pos - begin > 9) throw fail("header value out of range");
    return std::stol(std::string(bytes.substr(begin, pos - begin)));
  };
  if (bytes.size() < 2 || bytes.substr(0, 2) != "P5") throw fail("not a binary graymap (P5)");
  pos = 2;
  const long w = read_int(), h = read_int(), maxval = read_int();
  if (w <= 0 || h <= 0) throw fail("non-positive dimensions");
  if (maxval != 255) throw fail("only 8-bit graymaps are supported");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) throw fail("truncated header");
  ++pos;
  const auto n = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
  if (bytes.size() - pos < n) throw fail("truncated pixel data");
  ImageU8 img(static_cast<int>(w), static_cast<int>(h));
  std::copy_n(bytes.data() + pos, n, reinterpret_cast<char*>(img.data.data()));
  return img;
}

inline void encode_image(const ImageU8& img, const std::filesystem::path& path) { write_file(path, encode_pgm(img)); }

inline ImageU8 decode_image(const std::filesystem::path& path) {
  return decode_pgm(detail::read_file(path), path.string());
}

/// Metadata needed to map raster pixels back to meters.
inline nlohmann::ordered_json raster_metadata(const BevRaster& r) {
  nlohmann::ordered_json j;
  j["schema"] = "mtpcr-bev/1";
  j["res"] = r.res;
  j["x_min"] = r.x_min;
  j["y_min"] = r.y_min;
  j["z_min"] = r.z_min;
  j["z_max"] = r.z_max;
  j["width"] = r.width;
  j["height"] = r.height;
  return j;
}

}  // namespace mtpcr
