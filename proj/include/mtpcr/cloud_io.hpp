#pragma once

#include <array>
#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "mtpcr/cloud.hpp"

namespace mtpcr {

enum class CloudFormat { kXyz, kPly };

inline CloudFormat format_from_path(const std::filesystem::path& path) {
  auto ext = path.extension().string();
  for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (ext == ".ply") return CloudFormat::kPly;
  return CloudFormat::kXyz;
}

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string_view> split_ws(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    const std::size_t b = i;
    while (i < s.size() && !std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    if (i > b) out.push_back(s.substr(b, i - b));
  }
  return out;
}

inline double parse_real(std::string_view tok, const std::string& where) {
  double v = 0.0;
  const char* first = tok.data();
  const char* last = tok.data() + tok.size();
  if (!tok.empty() && *first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last) {
    throw Error(ErrorCode::kParse, where + ": cannot parse number '" + std::string(tok) + "'");
  }
  if (!std::isfinite(v)) throw Error(ErrorCode::kParse, where + ": non-finite coordinate");
  return v;
}

inline std::string format_real(double v) {
  std::array<char, 32> buf{};
  const auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), ptr);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return std::move(ss).str();
}

}  // namespace detail

/// "x y z" per line, '#' starts a comment, blank lines ignored.
inline PointCloud parse_xyz(std::string_view text, const std::string& name = "xyz") {
  PointCloud cloud;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? text.size() - pos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto tok = detail::split_ws(line);
    const std::string where = name + ":" + std::to_string(line_no);
    if (tok.size() != 3) throw Error(ErrorCode::kParse, where + ": expected 3 values, got " + std::to_string(tok.size()));
    cloud.points.emplace_back(detail::parse_real(tok[0], where), detail::parse_real(tok[1], where),
                              detail::parse_real(tok[2], where));
  }
  if (cloud.empty()) throw Error(ErrorCode::kEmptyCloud, name + ": no points");
  return cloud;
}

namespace detail {

struct PlyProperty {
  std::string name;
  std::string type;
  bool is_list = false;
};

struct PlyElement {
  std::string name;
  std::size_t count = 0;
  std::vector<PlyProperty> props;
};

inline std::size_t ply_type_size(const std::string& type) {
  if (type == "char" || type == "int8" || type == "uchar" || type == "uint8") return 1;
  if (type == "short" || type == "int16" || type == "ushort" || type == "uint16") return 2;
  if (type == "int" || type == "int32" || type == "uint" || type == "uint32" || type == "float" ||
      type == "float32")
    return 4;
  if (type == "double" || type == "float64") return 8;
  return 0;
}

template <typename T>
T load_le(const unsigned char* p) {
  static_assert(std::endian::native == std::endian::little, "big-endian hosts not supported");
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}

inline double ply_scalar(const unsigned char* p, const std::string& type) {
  if (type == "float" || type == "float32") return load_le<float>(p);
  if (type == "double" || type == "float64") return load_le<double>(p);
  if (type == "char" || type == "int8") return load_le<std::int8_t>(p);
  if (type == "uchar" || type == "uint8") return load_le<std::uint8_t>(p);
  if (type == "short" || type == "int16") return load_le<std::int16_t>(p);
  if (type == "ushort" || type == "uint16") return load_le<std::uint16_t>(p);
  if (type == "int" || type == "int32") return load_le<std::int32_t>(p);
  return load_le<std::uint32_t>(p);
}

}  // namespace detail

/// Vertex x/y/z (float or double) from ASCII or binary_little_endian PLY.
inline PointCloud parse_ply(std::string_view data, const std::string& name = "ply") {
  using detail::PlyElement;
  auto fail = [&](const std::string& msg) { return Error(ErrorCode::kParse, name + ": " + msg); };

  std::size_t pos = 0;
  auto next_line = [&]() -> std::string_view {
    if (pos >= data.size()) throw fail("unexpected end of header");
    const auto nl = data.find('\n', pos);
    if (nl == std::string_view::npos) throw fail("unterminated header");
    auto line = data.substr(pos, nl - pos);
    pos = nl + 1;
    return detail::trim(line);
  };

  if (next_line() != "ply") throw fail("missing 'ply' magic");
  std::string format;
  std::vector<PlyElement> elements;
  for (;;) {
    const auto line = next_line();
    const auto tok = detail::split_ws(line);
    if (tok.empty() || tok[0] == "comment" || tok[0] == "obj_info") continue;
    if (tok[0] == "end_header") break;
    if (tok[0] == "format") {
      if (tok.size() < 2) throw fail("bad format line");
      format = std::string(tok[1]);
    } else if (tok[0] == "element") {
      if (tok.size() != 3) throw fail("bad element line");
      PlyElement el;
      el.name = std::string(tok[1]);
      std::size_t count = 0;
      const auto [p, ec] = std::from_chars(tok[2].data(), tok[2].data() + tok[2].size(), count);
      if (ec != std::errc() || p != tok[2].data() + tok[2].size()) throw fail("bad element count");
      el.count = count;
      elements.push_back(std::move(el));
    } else if (tok[0] == "property") {
      if (elements.empty()) throw fail("property before element");
      detail::PlyProperty prop;
      if (tok.size() >= 2 && tok[1] == "list") {
        if (tok.size() != 5) throw fail("bad list property");
        prop.is_list = true;
        prop.type = std::string(tok[3]);
        prop.name = std::string(tok[4]);
      } else {
        if (tok.size() != 3) throw fail("bad property line");
        prop.type = std::string(tok[1]);
        prop.name = std::string(tok[2]);
        if (detail::ply_type_size(prop.type) == 0) throw fail("unknown property type '" + prop.type + "'");
      }
      elements.back().props.push_back(std::move(prop));
    } else {
      throw fail("unexpected header line '" + std::string(line) + "'");
    }
  }
  const bool ascii = format == "ascii";
  if (!ascii && format != "binary_little_endian") throw fail("unsupported format '" + format + "'");

  PointCloud cloud;
  for (const auto& el : elements) {
    const bool is_vertex = el.name == "vertex";
    int ix = -1, iy = -1, iz = -1;
    if (is_vertex) {
      for (std::size_t k = 0; k < el.props.size(); ++k) {
        const auto& p = el.props[k];
        if (p.is_list) throw fail("list properties on vertex are not supported");
        const bool real = p.type == "float" || p.type == "float32" || p.type == "double" || p.type == "float64";
        if (p.name == "x" || p.name == "y" || p.name == "z") {
          if (!real) throw fail("coordinate '" + p.name + "' must be float or double");
          (p.name == "x" ? ix : p.name == "y" ? iy : iz) = static_cast<int>(k);
        }
      }
      if (ix < 0 || iy < 0 || iz < 0) throw fail("vertex element lacks x/y/z");
      cloud.points.reserve(el.count);
    }
    for (std::size_t r = 0; r < el.count; ++r) {
      if (ascii) {
        const auto nl = data.find('\n', pos);
        if (pos >= data.size()) throw fail("truncated body");
        auto line = data.substr(pos, (nl == std::string_view::npos ? data.size() : nl) - pos);
        pos = nl == std::string_view::npos ? data.size() : nl + 1;
        if (!is_vertex) continue;
        const auto tok = detail::split_ws(line);
        if (tok.size() != el.props.size()) throw fail("vertex " + std::to_string(r) + ": wrong value count");
        const std::string where = name + ": vertex " + std::to_string(r);
        cloud.points.emplace_back(detail::parse_real(tok[static_cast<std::size_t>(ix)], where),
                                  detail::parse_real(tok[static_cast<std::size_t>(iy)], where),
                                  detail::parse_real(tok[static_cast<std::size_t>(iz)], where));
      } else {
        Point3 p = Point3::Zero();
        for (std::size_t k = 0; k < el.props.size(); ++k) {
          const auto& prop = el.props[k];
          if (prop.is_list) {
            if (is_vertex) throw fail("list properties on vertex are not supported");
            // Non-vertex elements after the vertices are not needed.
            if (cloud.size() > 0) goto done;
            throw fail("list-bearing element '" + el.name + "' before vertex data");
          }
          const std::size_t sz = detail::ply_type_size(prop.type);
          if (pos + sz > data.size()) throw fail("truncated body");
          if (is_vertex && (static_cast<int>(k) == ix || static_cast<int>(k) == iy || static_cast<int>(k) == iz)) {
            const double v = detail::ply_scalar(reinterpret_cast<const unsigned char*>(data.data() + pos), prop.type);
            p[static_cast<int>(k) == ix ? 0 : static_cast<int>(k) == iy ? 1 : 2] = v;
          }
          pos += sz;
        }
        if (is_vertex) {
          if (!is_finite(p)) throw fail("vertex " + std::to_string(r) + ": non-finite coordinate");
          cloud.points.push_back(p);
        }
      }
    }
    if (is_vertex) break;
  }
done:
  if (cloud.empty()) throw Error(ErrorCode::kEmptyCloud, name + ": no vertices");
  return cloud;
}

inline PointCloud load_cloud(const std::filesystem::path& path, CloudFormat format) {
  const std::string data = detail::read_file(path);
  return format == CloudFormat::kPly ? parse_ply(data, path.string()) : parse_xyz(data, path.string());
}

inline PointCloud load_cloud(const std::filesystem::path& path) { return load_cloud(path, format_from_path(path)); }

/// XYZ text with shortest round-trip number formatting (exact on re-read).
inline std::string format_xyz(const PointCloud& cloud) {
  std::string out;
  out.reserve(cloud.size() * 40);
  for (const auto& p : cloud.points) {
    out += detail::format_real(p.x());
    out += ' ';
    out += detail::format_real(p.y());
    out += ' ';
    out += detail::format_real(p.z());
    out += '\n';
  }
  return out;
}

inline std::string format_ply(const PointCloud& cloud, bool binary) {
  std::string out = "ply\n";
  out += binary ? "format binary_little_endian 1.0\n" : "format ascii 1.0\n";
  out += "element vertex " + std::to_string(cloud.size()) + "\n";
  out += "property double x\nproperty double y\nproperty double z\nend_header\n";
  if (binary) {
    for (const auto& p : cloud.points) {
      for (int k = 0; k < 3; ++k) {
        const double v = p[k];
        char bytes[sizeof(double)];
        std::memcpy(bytes, &v, sizeof(double));
        out.append(bytes, sizeof(double));
      }
    }
  } else {
    out += format_xyz(cloud);
  }
  return out;
}

inline void write_file(const std::filesystem::path& path, std::string_view data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write '" + path.string() + "'");
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!out) throw Error(ErrorCode::kIo, "write failed for '" + path.string() + "'");
}

inline void save_cloud(const std::filesystem::path& path, const PointCloud& cloud, CloudFormat format,
                       bool binary_ply = true) {
  write_file(path, format == CloudFormat::kPly ? format_ply(cloud, binary_ply) : format_xyz(cloud));
}

inline void save_cloud(const std::filesystem::path& path, const PointCloud& cloud) {
  save_cloud(path, cloud, format_from_path(path));
}

}  // namespace mtpcr
