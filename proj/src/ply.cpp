#include "em3rf/fragments.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace em3rf {

namespace {

enum class PlyType { i8, u8, i16, u16, i32, u32, f32, f64 };

PlyType parse_type(const std::string& name, const std::string& where) {
  static const std::map<std::string, PlyType> kTypes = {
      {"char", PlyType::i8},    {"int8", PlyType::i8},     {"uchar", PlyType::u8},   {"uint8", PlyType::u8},
      {"short", PlyType::i16},  {"int16", PlyType::i16},   {"ushort", PlyType::u16}, {"uint16", PlyType::u16},
      {"int", PlyType::i32},    {"int32", PlyType::i32},   {"uint", PlyType::u32},   {"uint32", PlyType::u32},
      {"float", PlyType::f32},  {"float32", PlyType::f32}, {"double", PlyType::f64}, {"float64", PlyType::f64},
  };
  auto it = kTypes.find(name);
  if (it == kTypes.end()) throw DataError(where + ": unknown property type '" + name + "'");
  return it->second;
}

std::size_t type_size(PlyType t) {
  switch (t) {
    case PlyType::i8:
    case PlyType::u8:
      return 1;
    case PlyType::i16:
    case PlyType::u16:
      return 2;
    case PlyType::i32:
    case PlyType::u32:
    case PlyType::f32:
      return 4;
    case PlyType::f64:
      return 8;
  }
  return 0;
}

bool is_integral(PlyType t) { return t != PlyType::f32 && t != PlyType::f64; }

struct Property {
  std::string name;
  PlyType type = PlyType::f32;
  bool is_list = false;
  PlyType count_type = PlyType::u8;
};

struct Element {
  std::string name;
  std::size_t count = 0;
  std::vector<Property> properties;
};

double decode_le(const unsigned char* p, PlyType t) {
  std::uint64_t raw = 0;
  const std::size_t n = type_size(t);
  for (std::size_t i = 0; i < n; ++i) raw |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  switch (t) {
    case PlyType::i8:
      return static_cast<std::int8_t>(raw);
    case PlyType::u8:
      return static_cast<std::uint8_t>(raw);
    case PlyType::i16:
      return static_cast<std::int16_t>(raw);
    case PlyType::u16:
      return static_cast<std::uint16_t>(raw);
    case PlyType::i32:
      return static_cast<std::int32_t>(raw);
    case PlyType::u32:
      return static_cast<std::uint32_t>(raw);
    case PlyType::f32:
      return std::bit_cast<float>(static_cast<std::uint32_t>(raw));
    case PlyType::f64:
      return std::bit_cast<double>(raw);
  }
  return 0;
}

void write_le(std::ostream& os, std::uint64_t raw, std::size_t n) {
  unsigned char buf[8];
  for (std::size_t i = 0; i < n; ++i) buf[i] = static_cast<unsigned char>((raw >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(buf), static_cast<std::streamsize>(n));
}

// Column indices of the vertex properties we understand; -1 when absent.
struct VertexLayout {
  std::array<int, 3> xyz{-1, -1, -1};
  std::array<int, 3> normal{-1, -1, -1};
  std::array<int, 3> rgb{-1, -1, -1};
  bool rgb_integral = false;
  int boundary = -1;
};

VertexLayout vertex_layout(const Element& e, const std::string& where) {
  VertexLayout l;
  const std::array<std::string, 3> xyz{"x", "y", "z"}, nrm{"nx", "ny", "nz"}, rgb{"red", "green", "blue"};
  for (int i = 0; i < static_cast<int>(e.properties.size()); ++i) {
    const auto& p = e.properties[i];
    if (p.name == "boundary" && !p.is_list) l.boundary = i;
    for (int k = 0; k < 3; ++k) {
      if (p.name == xyz[k]) l.xyz[k] = i;
      if (p.name == nrm[k]) l.normal[k] = i;
      if (p.name == rgb[k]) {
        l.rgb[k] = i;
        l.rgb_integral = is_integral(p.type);
      }
    }
  }
  for (int k = 0; k < 3; ++k) {
    if (l.xyz[k] < 0) throw DataError(where + ": vertex element lacks property " + xyz[k]);
  }
  return l;
}

bool complete(const std::array<int, 3>& cols) { return cols[0] >= 0 && cols[1] >= 0 && cols[2] >= 0; }

}  // namespace

Fragment load_ply(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  const std::string file = path.string();

  std::string line;
  int line_no = 0;
  auto next_line = [&]() -> bool {
    if (!std::getline(is, line)) return false;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return true;
  };
  auto where = [&]() { return file + ":" + std::to_string(line_no); };

  if (!next_line() || line != "ply") throw DataError(file + ":1: missing 'ply' magic");
  PlyFormat format = PlyFormat::ascii;
  bool have_format = false;
  std::vector<Element> elements;
  for (;;) {
    if (!next_line()) throw DataError(where() + ": header ended without end_header");
    std::istringstream ls(line);
    std::string kw;
    ls >> kw;
    if (kw == "end_header") break;
    if (kw == "comment" || kw == "obj_info" || kw.empty()) continue;
    if (kw == "format") {
      std::string fmt, version;
      ls >> fmt >> version;
      if (fmt == "ascii") {
        format = PlyFormat::ascii;
      } else if (fmt == "binary_little_endian") {
        format = PlyFormat::binary_little_endian;
      } else {
        throw DataError(where() + ": unsupported format '" + fmt + "'");
      }
      have_format = true;
    } else if (kw == "element") {
      Element e;
      long long count = -1;
      ls >> e.name >> count;
      if (!ls || count < 0) throw DataError(where() + ": malformed element line");
      e.count = static_cast<std::size_t>(count);
      elements.push_back(std::move(e));
    } else if (kw == "property") {
      if (elements.empty()) throw DataError(where() + ": property before any element");
      Property p;
      std::string type;
      ls >> type;
      if (type == "list") {
        std::string count_type, item_type;
        ls >> count_type >> item_type >> p.name;
        p.is_list = true;
        p.count_type = parse_type(count_type, where());
        p.type = parse_type(item_type, where());
      } else {
        p.type = parse_type(type, where());
        ls >> p.name;
      }
      if (p.name.empty()) throw DataError(where() + ": property without a name");
      elements.back().properties.push_back(p);
    } else {
      throw DataError(where() + ": unexpected header keyword '" + kw + "'");
    }
  }
  if (!have_format) throw DataError(file + ": header has no format line");

  auto vertex_it = std::find_if(elements.begin(), elements.end(), [](const Element& e) { return e.name == "vertex"; });
  if (vertex_it == elements.end()) throw DataError(file + ": no vertex element");
  const VertexLayout layout = vertex_layout(*vertex_it, file);
  const auto n = static_cast<Eigen::Index>(vertex_it->count);

  std::vector<std::vector<double>> rows(static_cast<std::size_t>(n));
  for (const Element& e : elements) {
    const bool is_vertex = &e == &*vertex_it;
    for (std::size_t r = 0; r < e.count; ++r) {
      std::vector<double> values;
      if (format == PlyFormat::ascii) {
        if (!next_line()) throw DataError(where() + ": unexpected end of file in element " + e.name);
        std::istringstream ls(line);
        for (const auto& p : e.properties) {
          std::size_t items = 1;
          if (p.is_list) {
            double c;
            if (!(ls >> c)) throw DataError(where() + ": missing list count for " + p.name);
            items = static_cast<std::size_t>(c);
          }
          for (std::size_t k = 0; k < items; ++k) {
            std::string tok;
            if (!(ls >> tok)) throw DataError(where() + ": missing value for property " + p.name);
            try {
              std::size_t used = 0;
              const double v = std::stod(tok, &used);
              if (used != tok.size()) throw std::invalid_argument(tok);
              if (!p.is_list) values.push_back(v);
            } catch (const std::out_of_range&) {
              throw DataError(where() + ": value out of range for " + p.name + ": '" + tok + "'");
            } catch (const std::invalid_argument&) {
              throw DataError(where() + ": cannot parse value for " + p.name + ": '" + tok + "'");
            }
          }
        }
      } else {
        for (const auto& p : e.properties) {
          unsigned char buf[8];
          std::size_t items = 1;
          if (p.is_list) {
            if (!is.read(reinterpret_cast<char*>(buf), static_cast<std::streamsize>(type_size(p.count_type)))) {
              throw DataError(file + ": truncated binary data in element " + e.name + " row " + std::to_string(r));
            }
            items = static_cast<std::size_t>(decode_le(buf, p.count_type));
          }
          for (std::size_t k = 0; k < items; ++k) {
            if (!is.read(reinterpret_cast<char*>(buf), static_cast<std::streamsize>(type_size(p.type)))) {
              throw DataError(file + ": truncated binary data in element " + e.name + " row " + std::to_string(r));
            }
            if (!p.is_list) values.push_back(decode_le(buf, p.type));
          }
        }
      }
      if (is_vertex) rows[r] = std::move(values);
    }
    if (is_vertex) break;  // trailing elements (faces, ...) are not needed
  }

  Fragment f;
  f.positions.resize(n, 3);
  f.normals.resize(n, 3);
  f.colors.resize(n, 3);
  const bool has_normals = complete(layout.normal);
  const bool has_colors = complete(layout.rgb);
  // rows[] holds only non-list properties, so map property index -> value column.
  std::vector<int> column(vertex_it->properties.size(), -1);
  for (int i = 0, c = 0; i < static_cast<int>(vertex_it->properties.size()); ++i) {
    if (!vertex_it->properties[i].is_list) column[i] = c++;
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& row = rows[static_cast<std::size_t>(i)];
    for (int k = 0; k < 3; ++k) {
      const double v = row[column[layout.xyz[k]]];
      if (!std::isfinite(v)) {
        throw DataError(file + ": vertex " + std::to_string(i) + " has a non-finite coordinate");
      }
      f.positions(i, k) = v;
      if (has_normals) f.normals(i, k) = row[column[layout.normal[k]]];
      if (has_colors) {
        const double c = row[column[layout.rgb[k]]];
        f.colors(i, k) = std::clamp(layout.rgb_integral ? c / 255.0 : c, 0.0, 1.0);
      }
    }
  }
  if (has_normals) {
    for (Eigen::Index i = 0; i < n; ++i) {
      const double len = f.normals.row(i).norm();
      if (!std::isfinite(len) || len < 1e-12) {
        throw DataError(file + ": vertex " + std::to_string(i) + " has a degenerate normal");
      }
      f.normals.row(i) /= len;
    }
  } else {
    f.normals = estimate_normals(f.positions);
    f.normals_estimated = true;
  }
  if (!has_colors) {
    f.colors.setConstant(0.5);
    f.colors_defaulted = true;
  }
  if (layout.boundary >= 0) {
    f.boundary_label.emplace(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i)
      (*f.boundary_label)[static_cast<std::size_t>(i)] = rows[static_cast<std::size_t>(i)][column[layout.boundary]] != 0;
  }
  return f;
}

void save_ply(const std::filesystem::path& path, const Fragment& f, PlyFormat format) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open " + path.string() + " for writing");
  os << "ply\n"
     << (format == PlyFormat::ascii ? "format ascii 1.0\n" : "format binary_little_endian 1.0\n")
     << "element vertex " << f.size() << "\n"
     << "property double x\nproperty double y\nproperty double z\n"
     << "property float nx\nproperty float ny\nproperty float nz\n"
     << "property float red\nproperty float green\nproperty float blue\n"
     << (f.boundary_label ? "property uchar boundary\n" : "") << "end_header\n";
  const bool labels = f.boundary_label.has_value();
  if (labels && f.boundary_label->size() != static_cast<std::size_t>(f.size()))
    throw DataError("save_ply: boundary label count does not match the point count");
  if (format == PlyFormat::ascii) {
    char buf[512];
    for (Eigen::Index i = 0; i < f.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%.17g %.17g %.17g %.9g %.9g %.9g %.9g %.9g %.9g\n", f.positions(i, 0),
                    f.positions(i, 1), f.positions(i, 2), double(float(f.normals(i, 0))),
                    double(float(f.normals(i, 1))), double(float(f.normals(i, 2))), double(float(f.colors(i, 0))),
                    double(float(f.colors(i, 1))), double(float(f.colors(i, 2))));
      if (labels) buf[std::strlen(buf) - 1] = ' ';
      os << buf;
      if (labels) os << int((*f.boundary_label)[static_cast<std::size_t>(i)]) << '\n';
    }
  } else {
    for (Eigen::Index i = 0; i < f.size(); ++i) {
      for (int k = 0; k < 3; ++k) write_le(os, std::bit_cast<std::uint64_t>(f.positions(i, k)), 8);
      for (int k = 0; k < 3; ++k) write_le(os, std::bit_cast<std::uint32_t>(float(f.normals(i, k))), 4);
      for (int k = 0; k < 3; ++k) write_le(os, std::bit_cast<std::uint32_t>(float(f.colors(i, k))), 4);
      if (labels) write_le(os, (*f.boundary_label)[static_cast<std::size_t>(i)], 1);
    }
  }
  if (!os) throw DataError("write failed for " + path.string());
}

}  // namespace em3rf
