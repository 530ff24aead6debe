#pragma once

// File formats. Every writer goes through atomic_write (temp file, then
// rename). Byte layouts are listed in docs/formats.md.

#include <png.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "facefit/fitting.hpp"
#include "facefit/model.hpp"
#include "facefit/rasterizer.hpp"

#if defined(_WIN32)
#include <process.h>
#define FACEFIT_GETPID _getpid
#else
#include <unistd.h>
#define FACEFIT_GETPID getpid
#endif

namespace facefit::io {

struct io_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
// Malformed content: bad magic, bad numbers, truncated data.
struct format_error : io_error {
  using io_error::io_error;
};
// Well-formed content whose sizes disagree with each other.
struct consistency_error : format_error {
  using format_error::format_error;
};
// Valid input using a feature this reader does not handle.
struct unsupported_feature : format_error {
  using format_error::format_error;
};

// ---------------------------------------------------------------------------
// Basic helpers

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void atomic_write(const std::filesystem::path& path, std::string_view bytes) {
  auto tmp = path;
  tmp += ".tmp" + std::to_string(FACEFIT_GETPID());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw io_error("cannot open '" + tmp.string() + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw io_error("write failed for '" + path.string() + "'");
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw io_error("cannot move output into place at '" + path.string() + "'");
  }
}

// Shortest text that parses back to the same double.
inline std::string fmt(double x) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, x);
  (void)ec;
  return std::string(buf, end);
}

inline double parse_double(std::string_view s, const std::string& where) {
  double v = 0.0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size())
    throw format_error(where + ": cannot parse number '" + std::string(s) + "'");
  return v;
}

inline long long parse_int(std::string_view s, const std::string& where) {
  long long v = 0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size())
    throw format_error(where + ": cannot parse integer '" + std::string(s) + "'");
  return v;
}

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t' && line[j] != '\r') ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

inline std::vector<std::string_view> split_lines(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i <= text.size()) {
    const auto j = text.find('\n', i);
    if (j == std::string_view::npos) {
      if (i < text.size()) out.push_back(text.substr(i));
      break;
    }
    out.push_back(text.substr(i, j - i));
    i = j + 1;
  }
  return out;
}

// Little-endian binary writer/reader.
class ByteWriter {
 public:
  template <class T>
  void put(T v) {
    static_assert(std::is_arithmetic_v<T>);
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
    buf_.append(reinterpret_cast<const char*>(b), sizeof(T));
  }
  void raw(std::string_view s) { buf_.append(s); }
  std::string& str() { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  ByteReader(std::string_view data, std::string what) : d_(data), what_(std::move(what)) {}

  template <class T>
  T get() {
    need(sizeof(T));
    unsigned char b[sizeof(T)];
    std::memcpy(b, d_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, b, sizeof(T));
    return v;
  }
  std::string_view take(std::size_t n) {
    need(n);
    auto s = d_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == d_.size(); }
  std::size_t remaining() const { return d_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (d_.size() - pos_ < n) throw format_error(what_ + ": truncated data");
  }
  std::string_view d_;
  std::size_t pos_ = 0;
  std::string what_;
};

// ---------------------------------------------------------------------------
// OBJ (triangles only)

struct ObjMesh {
  VertexShape shape;
  std::vector<Triangle> triangles;
  std::vector<Vec2> uv;  // per-vertex when present (vt count == v count)
};

inline ObjMesh parse_obj(std::string_view text, const std::string& name = "obj") {
  std::vector<double> xyz;
  std::vector<Vec2> vt;
  ObjMesh mesh;
  const auto lines = split_lines(text);
  std::vector<std::pair<std::size_t, std::array<long long, 3>>> faces;
  for (std::size_t ln = 0; ln < lines.size(); ++ln) {
    const std::string where = name + ":" + std::to_string(ln + 1);
    const auto tok = split_ws(lines[ln]);
    if (tok.empty() || tok[0][0] == '#') continue;
    if (tok[0] == "v") {
      if (tok.size() < 4) throw format_error(where + ": vertex needs 3 coordinates");
      for (int k = 1; k <= 3; ++k) xyz.push_back(parse_double(tok[k], where));
    } else if (tok[0] == "vt") {
      if (tok.size() < 3) throw format_error(where + ": texture coordinate needs 2 values");
      vt.emplace_back(parse_double(tok[1], where), parse_double(tok[2], where));
    } else if (tok[0] == "f") {
      if (tok.size() < 4) throw format_error(where + ": face needs 3 vertices");
      if (tok.size() > 4)
        throw unsupported_feature(where + ": face with " + std::to_string(tok.size() - 1) +
                                  " vertices; only triangles are supported");
      std::array<long long, 3> idx{};
      for (int k = 0; k < 3; ++k) {
        const auto s = tok[k + 1];
        idx[k] = parse_int(s.substr(0, s.find('/')), where);
        if (idx[k] == 0) throw format_error(where + ": face index 0 is invalid");
      }
      faces.push_back({ln, idx});
    }
    // vn, o, g, s, usemtl, mtllib and other statements carry nothing we use.
  }
  const long long q = static_cast<long long>(xyz.size() / 3);
  for (const auto& [ln, idx] : faces) {
    Triangle t;
    for (int k = 0; k < 3; ++k) {
      const long long i = idx[k] > 0 ? idx[k] - 1 : q + idx[k];
      if (i < 0 || i >= q)
        throw format_error(name + ":" + std::to_string(ln + 1) + ": face index " +
                           std::to_string(idx[k]) + " out of range");
      t[k] = static_cast<int>(i);
    }
    mesh.triangles.push_back(t);
  }
  mesh.shape.xyz = Eigen::Map<const Eigen::VectorXd>(xyz.data(), static_cast<Eigen::Index>(xyz.size()));
  if (static_cast<long long>(vt.size()) == q) mesh.uv = std::move(vt);
  return mesh;
}

inline ObjMesh load_obj(const std::filesystem::path& path) {
  return parse_obj(read_file(path), path.string());
}

inline std::string format_obj(const ObjMesh& mesh) {
  std::string out;
  const int q = mesh.shape.size();
  const bool uv = static_cast<int>(mesh.uv.size()) == q && q > 0;
  for (int i = 0; i < q; ++i) {
    const Vec3 p = mesh.shape.vertex(i);
    out += "v " + fmt(p.x()) + " " + fmt(p.y()) + " " + fmt(p.z()) + "\n";
  }
  if (uv)
    for (const auto& t : mesh.uv) out += "vt " + fmt(t.x()) + " " + fmt(t.y()) + "\n";
  for (const auto& t : mesh.triangles) {
    out += "f";
    for (int k = 0; k < 3; ++k) {
      const auto s = std::to_string(t[k] + 1);
      out += " " + s + (uv ? "/" + s : "");
    }
    out += "\n";
  }
  return out;
}

inline void save_obj(const std::filesystem::path& path, const ObjMesh& mesh) {
  atomic_write(path, format_obj(mesh));
}

// ---------------------------------------------------------------------------
// Images: 8-bit PNG (values mapped linearly from [0,1]) and float PFM.

inline std::uint8_t to_byte(double x) {
  const double c = std::clamp(x, 0.0, 1.0);
  return static_cast<std::uint8_t>(std::lround(c * 255.0));
}

inline std::string encode_png(const Image& img) {
  if (img.channels != 3) throw shape_error("encode_png: expected an RGB image");
  std::vector<std::uint8_t> px(img.data.size());
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = to_byte(img.data[i]);
  png_image pi;
  std::memset(&pi, 0, sizeof pi);
  pi.version = PNG_IMAGE_VERSION;
  pi.width = static_cast<png_uint_32>(img.cols);
  pi.height = static_cast<png_uint_32>(img.rows);
  pi.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&pi, nullptr, &size, 0, px.data(), 0, nullptr))
    throw io_error(std::string("png encode failed: ") + pi.message);
  std::string out(size, '\0');
  if (!png_image_write_to_memory(&pi, out.data(), &size, 0, px.data(), 0, nullptr))
    throw io_error(std::string("png encode failed: ") + pi.message);
  out.resize(size);
  return out;
}

inline Image decode_png(std::string_view bytes, const std::string& name = "png") {
  png_image pi;
  std::memset(&pi, 0, sizeof pi);
  pi.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&pi, bytes.data(), bytes.size()))
    throw format_error(name + ": " + pi.message);
  pi.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> px(PNG_IMAGE_SIZE(pi));
  if (!png_image_finish_read(&pi, nullptr, px.data(), 0, nullptr))
    throw format_error(name + ": " + pi.message);
  Image img(static_cast<int>(pi.height), static_cast<int>(pi.width), 3);
  for (std::size_t i = 0; i < px.size(); ++i) img.data[i] = px[i] / 255.0;
  return img;
}

inline void save_png(const std::filesystem::path& path, const Image& img) {
  atomic_write(path, encode_png(img));
}
inline Image load_png(const std::filesystem::path& path) {
  return decode_png(read_file(path), path.string());
}

// Portable float map, little-endian, top row first (the PFM convention is
// bottom row first; rows are flipped on both read and write).
inline std::string encode_pfm(const Grid& img) {
  if (img.channels != 3 && img.channels != 1) throw shape_error("encode_pfm: 1 or 3 channels");
  ByteWriter w;
  w.raw(img.channels == 3 ? "PF\n" : "Pf\n");
  w.raw(std::to_string(img.cols) + " " + std::to_string(img.rows) + "\n-1.0\n");
  for (int r = img.rows - 1; r >= 0; --r)
    for (int c = 0; c < img.cols; ++c)
      for (int ch = 0; ch < img.channels; ++ch) w.put(static_cast<float>(img(r, c, ch)));
  return std::move(w.str());
}

inline Grid decode_pfm(std::string_view bytes, const std::string& name = "pfm") {
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    const auto start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    return bytes.substr(start, pos - start);
  };
  const auto magic = token();
  if (magic != "PF" && magic != "Pf") throw format_error(name + ": not a PFM file");
  const int ch = magic == "PF" ? 3 : 1;
  const auto w = parse_int(token(), name), h = parse_int(token(), name);
  const double scale = parse_double(token(), name);
  ++pos;  // single whitespace before the raster
  if (w < 0 || h < 0) throw format_error(name + ": negative size");
  if (scale > 0) throw unsupported_feature(name + ": big-endian PFM");
  Grid img(static_cast<int>(h), static_cast<int>(w), ch);
  ByteReader r(bytes.substr(std::min(pos, bytes.size())), name);
  for (int y = img.rows - 1; y >= 0; --y)
    for (int x = 0; x < img.cols; ++x)
      for (int c = 0; c < ch; ++c) img(y, x, c) = r.get<float>();
  return img;
}

inline bool has_extension(const std::filesystem::path& p, std::string_view ext) {
  auto e = p.extension().string();
  for (auto& c : e) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return e == ext;
}

// Dispatches on extension: .pfm is float, anything else is PNG.
inline void save_image(const std::filesystem::path& path, const Image& img) {
  atomic_write(path, has_extension(path, ".pfm") ? encode_pfm(img) : encode_png(img));
}
inline Image load_image(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  if (has_extension(path, ".pfm")) return decode_pfm(bytes, path.string());
  return decode_png(bytes, path.string());
}

// Single-channel mask image: any PNG, value = mean of the RGB channels.
inline Grid load_mask(const std::filesystem::path& path) {
  const Image img = load_image(path);
  Grid m(img.rows, img.cols, 1);
  for (int y = 0; y < img.rows; ++y)
    for (int x = 0; x < img.cols; ++x)
      m(y, x) = (img(y, x, 0) + img(y, x, 1) + img(y, x, 2)) / 3.0;
  return m;
}

// ---------------------------------------------------------------------------
// UV map container: "FFUVMAP\0", u32 version, u32 U, V, C, f64 data, u8 mask.

inline constexpr char kUVMagic[8] = {'F', 'F', 'U', 'V', 'M', 'A', 'P', '\0'};
inline constexpr std::uint32_t kUVVersion = 1;

inline std::string encode_uvmap(const UVMap& m) {
  ByteWriter w;
  w.raw(std::string_view(kUVMagic, 8));
  w.put<std::uint32_t>(kUVVersion);
  w.put<std::uint32_t>(m.u_size());
  w.put<std::uint32_t>(m.v_size());
  w.put<std::uint32_t>(m.grid.channels);
  for (double v : m.grid.data) w.put(v);
  for (auto b : m.mask.data) w.put<std::uint8_t>(b ? 1 : 0);
  return std::move(w.str());
}

inline UVMap decode_uvmap(std::string_view bytes, const std::string& name = "uvmap") {
  ByteReader r(bytes, name);
  if (r.take(8) != std::string_view(kUVMagic, 8)) throw format_error(name + ": bad magic");
  if (const auto v = r.get<std::uint32_t>(); v != kUVVersion)
    throw format_error(name + ": unsupported version " + std::to_string(v));
  const auto u = r.get<std::uint32_t>(), vs = r.get<std::uint32_t>(), c = r.get<std::uint32_t>();
  if (u > 1u << 15 || vs > 1u << 15 || c == 0 || c > 64)
    throw format_error(name + ": implausible dimensions");
  UVMap m(static_cast<int>(u), static_cast<int>(vs), static_cast<int>(c));
  for (auto& x : m.grid.data) x = r.get<double>();
  for (auto& b : m.mask.data) b = r.get<std::uint8_t>() ? 1 : 0;
  if (!r.done()) throw format_error(name + ": trailing bytes");
  return m;
}

inline void save_uvmap(const std::filesystem::path& p, const UVMap& m) {
  atomic_write(p, encode_uvmap(m));
}
inline UVMap load_uvmap(const std::filesystem::path& p) {
  return decode_uvmap(read_file(p), p.string());
}

// ---------------------------------------------------------------------------
// Model container

inline constexpr char kModelMagic[8] = {'F', 'F', 'M', 'O', 'D', 'E', 'L', '\0'};
inline constexpr std::uint32_t kModelVersion = 1;

inline std::string encode_model(const FaceModel& model) {
  model.check();
  const int q = model.num_vertices();
  ByteWriter w;
  w.raw(std::string_view(kModelMagic, 8));
  w.put<std::uint32_t>(kModelVersion);
  for (int d : {q, static_cast<int>(model.topo.num_triangles()), model.u_size, model.v_size,
                model.shape.param_dim(), model.albedo.param_dim()})
    w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
  for (double c : {model.unwrap.alpha1, model.unwrap.beta1, model.unwrap.alpha2, model.unwrap.beta2})
    w.put(c);
  auto section = [&](const char* tag, auto&& body) {
    ByteWriter s;
    body(s);
    w.raw(std::string_view(tag, 4));
    w.put<std::uint64_t>(s.str().size());
    w.raw(s.str());
  };
  section("TRIS", [&](ByteWriter& s) {
    for (const auto& t : model.topo.triangles)
      for (int k : t) s.put<std::int32_t>(k);
  });
  section("UVCO", [&](ByteWriter& s) {
    for (const auto& uv : model.topo.uv_coords) s.put(uv.x()), s.put(uv.y());
  });
  section("LMKS", [&](ByteWriter& s) {
    for (int k : model.topo.landmark_indices) s.put<std::int32_t>(k);
  });
  section("EYES", [&](ByteWriter& s) {
    for (int k : model.topo.eye_corners) s.put<std::int32_t>(k);
  });
  auto vec = [](const Eigen::VectorXd& v) {
    return [&v](ByteWriter& s) {
      for (Eigen::Index i = 0; i < v.size(); ++i) s.put(v[i]);
    };
  };
  auto mat = [](const Eigen::MatrixXd& m) {  // column-major
    return [&m](ByteWriter& s) {
      for (Eigen::Index c = 0; c < m.cols(); ++c)
        for (Eigen::Index r = 0; r < m.rows(); ++r) s.put(m(r, c));
    };
  };
  section("SMEA", vec(model.shape.mean));
  section("SBAS", mat(model.shape.bases));
  section("AMEA", vec(model.albedo.mean));
  section("ABAS", mat(model.albedo.bases));
  return std::move(w.str());
}

inline FaceModel decode_model(std::string_view bytes, const std::string& name = "model") {
  ByteReader r(bytes, name);
  if (r.take(8) != std::string_view(kModelMagic, 8)) throw format_error(name + ": bad magic");
  if (const auto v = r.get<std::uint32_t>(); v != kModelVersion)
    throw format_error(name + ": unsupported version " + std::to_string(v));
  std::uint32_t dims[6];
  for (auto& d : dims) d = r.get<std::uint32_t>();
  const std::uint64_t q = dims[0], t = dims[1], ls = dims[4], la = dims[5];
  FaceModel m;
  m.topo.num_vertices = static_cast<int>(q);
  m.u_size = static_cast<int>(dims[2]);
  m.v_size = static_cast<int>(dims[3]);
  m.unwrap.alpha1 = r.get<double>();
  m.unwrap.beta1 = r.get<double>();
  m.unwrap.alpha2 = r.get<double>();
  m.unwrap.beta2 = r.get<double>();

  std::map<std::string, std::string_view> sections;
  while (!r.done()) {
    const std::string tag(r.take(4));
    const auto len = r.get<std::uint64_t>();
    if (len > r.remaining()) throw format_error(name + ": section " + tag + " is truncated");
    sections[tag] = r.take(static_cast<std::size_t>(len));
  }
  auto get = [&](const char* tag, std::uint64_t count, std::size_t elem) {
    const auto it = sections.find(tag);
    if (it == sections.end()) throw format_error(name + ": missing section " + tag);
    const std::uint64_t have = it->second.size() / elem;
    if (it->second.size() % elem != 0 || have != count)
      throw consistency_error(name + ": section " + tag + " holds " + std::to_string(have) +
                              " values but the header implies " + std::to_string(count));
    return ByteReader(it->second, name + ":" + tag);
  };
  {
    auto s = get("TRIS", 3 * t, 4);
    m.topo.triangles.resize(t);
    for (auto& tr : m.topo.triangles)
      for (int& k : tr) k = s.get<std::int32_t>();
  }
  {
    auto s = get("UVCO", 2 * q, 8);
    m.topo.uv_coords.resize(q);
    for (auto& uv : m.topo.uv_coords) {
      const double u = s.get<double>();
      uv = Vec2(u, s.get<double>());
    }
  }
  {
    const auto it = sections.find("LMKS");
    if (it == sections.end()) throw format_error(name + ": missing section LMKS");
    auto s = get("LMKS", it->second.size() / 4, 4);
    m.topo.landmark_indices.resize(it->second.size() / 4);
    for (int& k : m.topo.landmark_indices) k = s.get<std::int32_t>();
  }
  {
    auto s = get("EYES", 2, 4);
    for (int& k : m.topo.eye_corners) k = s.get<std::int32_t>();
  }
  auto read_vec = [&](const char* tag, std::uint64_t n) {
    auto s = get(tag, n, 8);
    Eigen::VectorXd v(static_cast<Eigen::Index>(n));
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = s.get<double>();
    return v;
  };
  auto read_mat = [&](const char* tag, std::uint64_t cols) {
    const auto it = sections.find(tag);
    if (it == sections.end()) throw format_error(name + ": missing section " + tag);
    const std::uint64_t have = it->second.size() / 8;
    if (it->second.size() % 8 != 0 || have != 3 * q * cols)
      throw consistency_error(name + ": section " + std::string(tag) + " holds " +
                              std::to_string(have) + " values but 3Q x l = " +
                              std::to_string(3 * q) + " x " + std::to_string(cols) + " = " +
                              std::to_string(3 * q * cols));
    ByteReader s(it->second, name);
    Eigen::MatrixXd mtx(static_cast<Eigen::Index>(3 * q), static_cast<Eigen::Index>(cols));
    for (Eigen::Index c = 0; c < mtx.cols(); ++c)
      for (Eigen::Index rr = 0; rr < mtx.rows(); ++rr) mtx(rr, c) = s.get<double>();
    return mtx;
  };
  m.shape.mean = read_vec("SMEA", 3 * q);
  m.shape.bases = read_mat("SBAS", ls);
  m.albedo.mean = read_vec("AMEA", 3 * q);
  m.albedo.bases = read_mat("ABAS", la);
  try {
    m.check();
  } catch (const std::exception& e) {
    throw consistency_error(name + ": " + e.what());
  }
  return m;
}

inline void save_model(const std::filesystem::path& p, const FaceModel& m) {
  atomic_write(p, encode_model(m));
}
inline FaceModel load_model(const std::filesystem::path& p) {
  return decode_model(read_file(p), p.string());
}

// ---------------------------------------------------------------------------
// Parameter file: keyed lines "m <6>", "L <27>", "f_S <n> <n values>",
// "f_A <n> <n values>"; '#' starts a comment.

inline std::string format_params(const FitParams& p) {
  std::string out = "# facefit params 1\nm";
  for (double v : p.m.to_array()) out += " " + fmt(v);
  out += "\nL";
  for (double v : p.light.coeffs) out += " " + fmt(v);
  auto vec = [&](const char* key, const Eigen::VectorXd& v) {
    out += "\n";
    out += key;
    out += " " + std::to_string(v.size());
    for (Eigen::Index i = 0; i < v.size(); ++i) out += " " + fmt(v[i]);
  };
  vec("f_S", p.f_S);
  vec("f_A", p.f_A);
  out += "\n";
  return out;
}

inline FitParams parse_params(std::string_view text, const std::string& name = "params") {
  FitParams p;
  bool seen_m = false, seen_l = false, seen_s = false, seen_a = false;
  const auto lines = split_lines(text);
  for (std::size_t ln = 0; ln < lines.size(); ++ln) {
    const std::string where = name + ":" + std::to_string(ln + 1);
    const auto tok = split_ws(lines[ln]);
    if (tok.empty() || tok[0][0] == '#') continue;
    auto numbers = [&](std::size_t from) {
      std::vector<double> v;
      for (std::size_t i = from; i < tok.size(); ++i) v.push_back(parse_double(tok[i], where));
      return v;
    };
    if (tok[0] == "m") {
      const auto v = numbers(1);
      if (v.size() != 6) throw format_error(where + ": m needs 6 values, got " + std::to_string(v.size()));
      p.m = ProjectionParams::from_array({v[0], v[1], v[2], v[3], v[4], v[5]});
      seen_m = true;
    } else if (tok[0] == "L") {
      const auto v = numbers(1);
      if (v.size() != kLightCoeffs)
        throw format_error(where + ": L needs 27 values, got " + std::to_string(v.size()));
      std::copy(v.begin(), v.end(), p.light.coeffs.begin());
      seen_l = true;
    } else if (tok[0] == "f_S" || tok[0] == "f_A") {
      if (tok.size() < 2) throw format_error(where + ": missing length");
      const auto n = parse_int(tok[1], where);
      const auto v = numbers(2);
      if (n < 0 || static_cast<std::size_t>(n) != v.size())
        throw consistency_error(where + ": declared length " + std::to_string(n) + " but " +
                                std::to_string(v.size()) + " values");
      Eigen::VectorXd e = Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
      (tok[0] == "f_S" ? p.f_S : p.f_A) = e;
      (tok[0] == "f_S" ? seen_s : seen_a) = true;
    } else {
      throw format_error(where + ": unknown key '" + std::string(tok[0]) + "'");
    }
  }
  if (!seen_m || !seen_l || !seen_s || !seen_a)
    throw format_error(name + ": m, L, f_S and f_A are all required");
  return p;
}

inline void save_params(const std::filesystem::path& path, const FitParams& p) {
  atomic_write(path, format_params(p));
}
inline FitParams load_params(const std::filesystem::path& path) {
  return parse_params(read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// Landmarks: 68 lines "x y [visible]".

inline std::string format_landmarks(const LandmarkSet& s) {
  std::string out;
  for (std::size_t i = 0; i < s.points.size(); ++i)
    out += fmt(s.points[i].x()) + " " + fmt(s.points[i].y()) + " " +
           (s.visible[i] ? "1" : "0") + "\n";
  return out;
}

inline LandmarkSet parse_landmarks(std::string_view text, const std::string& name = "landmarks") {
  LandmarkSet s;
  const auto lines = split_lines(text);
  for (std::size_t ln = 0; ln < lines.size(); ++ln) {
    const std::string where = name + ":" + std::to_string(ln + 1);
    const auto tok = split_ws(lines[ln]);
    if (tok.empty() || tok[0][0] == '#') continue;
    if (tok.size() != 2 && tok.size() != 3) throw format_error(where + ": expected 'x y [visible]'");
    s.points.emplace_back(parse_double(tok[0], where), parse_double(tok[1], where));
    std::uint8_t vis = 1;
    if (tok.size() == 3) {
      const auto v = parse_int(tok[2], where);
      if (v != 0 && v != 1) throw format_error(where + ": visibility must be 0 or 1");
      vis = static_cast<std::uint8_t>(v);
    }
    s.visible.push_back(vis);
  }
  if (s.points.size() != kNumLandmarks)
    throw consistency_error(name + ": expected 68 landmarks, got " + std::to_string(s.points.size()));
  return s;
}

inline void save_landmarks(const std::filesystem::path& p, const LandmarkSet& s) {
  atomic_write(p, format_landmarks(s));
}
inline LandmarkSet load_landmarks(const std::filesystem::path& p) {
  return parse_landmarks(read_file(p), p.string());
}

// Lighting file: 27 numbers, channel-major (R band 0..8, G, B).
inline SHLighting parse_light(std::string_view text, const std::string& name = "light") {
  std::vector<double> v;
  for (const auto line : split_lines(text)) {
    const auto tok = split_ws(line);
    if (tok.empty() || tok[0][0] == '#') continue;
    for (auto t : tok) v.push_back(parse_double(t, name));
  }
  if (v.size() != kLightCoeffs)
    throw format_error(name + ": expected 27 lighting coefficients, got " + std::to_string(v.size()));
  SHLighting l;
  std::copy(v.begin(), v.end(), l.coeffs.begin());
  return l;
}
inline std::string format_light(const SHLighting& l) {
  std::string out;
  for (int ch = 0; ch < 3; ++ch) {
    for (int b = 0; b < kShCoeffs; ++b) out += (b ? " " : "") + fmt(l.at(ch, b));
    out += "\n";
  }
  return out;
}
inline SHLighting load_light(const std::filesystem::path& p) {
  return parse_light(read_file(p), p.string());
}

// ---------------------------------------------------------------------------
// Run configuration: "key = value" lines, '#' comments.

struct RunConfig {
  LossWeights weights;
  int width = 128;
  int height = 128;
  Vec3 background = Vec3::Zero();
  // Descent
  double step = 1.0;
  int iterations = 2000;
  double tolerance = 0.0;
  double rel_tolerance = 1e-12;
  int patience = 10;
  double growth = 2.0;
  int max_halvings = 20;
  bool staged = true;
  bool fit_m = true, fit_light = true, fit_shape = true, fit_albedo = true;
  double light_scale = 1.0, shape_scale = 1.0, albedo_scale = 1.0, projection_scale = 1.0;
  // Models
  int shape_dim = 160;  // truncated to what the model provides
  int albedo_dim = 160;
  // Shape / texture experiments
  double normal_weight = 0.1;
  NmeNormalizer normalizer = NmeNormalizer::inter_ocular;
  bool texture_rendered = false;  // fit the texture through the renderer
  double smoothing = 1e-4;
  double init_noise = 0.0;  // stddev of random parameter initialization
  // Paths (optional, command-line flags take precedence)
  std::string landmarks;
  std::string mask;

  DescentOptions descent() const {
    DescentOptions d;
    d.step = step;
    d.max_iterations = iterations;
    d.abs_tolerance = tolerance;
    d.rel_tolerance = rel_tolerance;
    d.patience = patience;
    d.growth = growth;
    d.max_halvings = max_halvings;
    return d;
  }

  RenderOptions render() const { return {width, height, background}; }

  FitConfig fit_config() const {
    FitConfig c = staged ? FitConfig::staged(iterations) : FitConfig{};
    if (!staged) c.stages = {FitStage{}};
    for (auto& s : c.stages) {
      s.projection = s.projection && fit_m;
      s.light = s.light && fit_light;
      s.shape = s.shape && fit_shape;
      s.albedo = s.albedo && fit_albedo;
      if (!staged) s.max_iterations = iterations;
    }
    c.descent = descent();
    c.weights = weights;
    c.render = render();
    c.light_scale = light_scale;
    c.shape_scale = shape_scale;
    c.albedo_scale = albedo_scale;
    c.projection_scale = projection_scale;
    return c;
  }

  void check() const {
    weights.check();
    if (width <= 0 || height <= 0) throw domain_error("image size must be positive");
    if (!(step > 0.0) || iterations < 0) throw domain_error("step must be positive and iterations >= 0");
    if (!(growth >= 1.0) || max_halvings < 0 || patience < 1)
      throw domain_error("growth >= 1, max_halvings >= 0, patience >= 1 required");
    if (shape_dim < 0 || albedo_dim < 0) throw domain_error("model dimensions must be >= 0");
    if (!(normal_weight >= 0.0) || !(smoothing > 0.0) || !(init_noise >= 0.0))
      throw domain_error("normal_weight, init_noise >= 0 and smoothing > 0 required");
  }
};

inline RunConfig parse_run_config(std::string_view text, const std::string& name = "config") {
  RunConfig c;
  const auto lines = split_lines(text);
  for (std::size_t ln = 0; ln < lines.size(); ++ln) {
    const std::string where = name + ":" + std::to_string(ln + 1);
    std::string_view line = lines[ln];
    if (const auto h = line.find('#'); h != std::string_view::npos) line = line.substr(0, h);
    if (split_ws(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw format_error(where + ": expected key = value");
    const auto ktok = split_ws(line.substr(0, eq));
    const auto vtok = split_ws(line.substr(eq + 1));
    if (ktok.size() != 1 || vtok.empty()) throw format_error(where + ": expected key = value");
    const std::string key(ktok[0]);
    auto num = [&] {
      if (vtok.size() != 1) throw format_error(where + ": " + key + " takes one value");
      return parse_double(vtok[0], where);
    };
    auto integer = [&] {
      if (vtok.size() != 1) throw format_error(where + ": " + key + " takes one value");
      const auto v = parse_int(vtok[0], where);
      if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max())
        throw format_error(where + ": " + key + " out of range");
      return static_cast<int>(v);
    };
    auto boolean = [&] {
      if (vtok.size() == 1 && (vtok[0] == "true" || vtok[0] == "1")) return true;
      if (vtok.size() == 1 && (vtok[0] == "false" || vtok[0] == "0")) return false;
      throw format_error(where + ": " + key + " must be true or false");
    };
    auto text_value = [&] {
      if (vtok.size() != 1) throw format_error(where + ": " + key + " takes one value");
      return std::string(vtok[0]);
    };
    std::map<std::string, double*> doubles = {
        {"lambda_L", &c.weights.lambda_L},   {"lambda_reg", &c.weights.lambda_reg},
        {"lambda_f", &c.weights.lambda_f},   {"lambda_T", &c.weights.lambda_T},
        {"lambda_m", &c.weights.lambda_m},   {"alpha", &c.weights.alpha},
        {"p", &c.weights.p},                 {"w_sym", &c.weights.w_sym},
        {"w_const", &c.weights.w_const},     {"w_smooth", &c.weights.w_smooth},
        {"step", &c.step},                   {"tolerance", &c.tolerance},
        {"rel_tolerance", &c.rel_tolerance}, {"growth", &c.growth},
        {"light_scale", &c.light_scale},     {"shape_scale", &c.shape_scale},
        {"albedo_scale", &c.albedo_scale},   {"projection_scale", &c.projection_scale},
        {"normal_weight", &c.normal_weight}, {"smoothing", &c.smoothing},
        {"init_noise", &c.init_noise}};
    std::map<std::string, int*> ints = {
        {"width", &c.width},         {"height", &c.height},
        {"iterations", &c.iterations}, {"patience", &c.patience},
        {"max_halvings", &c.max_halvings}, {"shape_dim", &c.shape_dim},
        {"albedo_dim", &c.albedo_dim}};
    std::map<std::string, bool*> bools = {
        {"staged", &c.staged},         {"fit_m", &c.fit_m},
        {"fit_light", &c.fit_light},   {"fit_shape", &c.fit_shape},
        {"fit_albedo", &c.fit_albedo}, {"texture_rendered", &c.texture_rendered}};
    if (auto it = doubles.find(key); it != doubles.end()) {
      *it->second = num();
    } else if (auto it2 = ints.find(key); it2 != ints.end()) {
      *it2->second = integer();
    } else if (auto it3 = bools.find(key); it3 != bools.end()) {
      *it3->second = boolean();
    } else if (key == "background") {
      if (vtok.size() != 3) throw format_error(where + ": background takes 3 values");
      for (int k = 0; k < 3; ++k) c.background[k] = parse_double(vtok[k], where);
    } else if (key == "nme_normalizer") {
      const auto v = text_value();
      if (v == "inter_ocular") c.normalizer = NmeNormalizer::inter_ocular;
      else if (v == "bounding_box") c.normalizer = NmeNormalizer::bounding_box;
      else throw format_error(where + ": nme_normalizer is inter_ocular or bounding_box");
    } else if (key == "landmarks") {
      c.landmarks = text_value();
    } else if (key == "mask") {
      c.mask = text_value();
    } else {
      throw format_error(where + ": unknown key '" + key + "'");
    }
  }
  try {
    c.check();
  } catch (const std::exception& e) {
    throw format_error(name + ": " + e.what());
  }
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& p) {
  return parse_run_config(read_file(p), p.string());
}

// ---------------------------------------------------------------------------
// Fragment buffer dump: u32 width, u32 height, then width*height int32
// tri_id (row-major), then width*height*3 float32 barycentrics.

inline std::string encode_fragments(const FragmentBuffer& fb) {
  ByteWriter w;
  w.put<std::uint32_t>(fb.width);
  w.put<std::uint32_t>(fb.height);
  for (int t : fb.tri_id) w.put<std::int32_t>(t);
  for (const auto& b : fb.bary)
    for (int k = 0; k < 3; ++k) w.put(static_cast<float>(b[k]));
  return std::move(w.str());
}

struct FragmentDump {
  int width = 0, height = 0;
  std::vector<std::int32_t> tri_id;
  std::vector<std::array<float, 3>> bary;
};

inline FragmentDump decode_fragments(std::string_view bytes, const std::string& name = "fragments") {
  ByteReader r(bytes, name);
  FragmentDump d;
  d.width = static_cast<int>(r.get<std::uint32_t>());
  d.height = static_cast<int>(r.get<std::uint32_t>());
  const std::size_t n = static_cast<std::size_t>(d.width) * d.height;
  if (n * 16 != r.remaining()) throw format_error(name + ": size does not match header");
  d.tri_id.resize(n);
  for (auto& t : d.tri_id) t = r.get<std::int32_t>();
  d.bary.resize(n);
  for (auto& b : d.bary)
    for (auto& x : b) x = r.get<float>();
  return d;
}

// ---------------------------------------------------------------------------
// Fit report (JSON)

inline nlohmann::json params_json(const FitParams& p) {
  nlohmann::json j;
  j["m"] = {{"f", p.m.f},         {"pitch", p.m.pitch}, {"yaw", p.m.yaw},
            {"roll", p.m.roll},   {"tx", p.m.t2d.x()},  {"ty", p.m.t2d.y()}};
  j["L"] = p.light.coeffs;
  j["f_S"] = std::vector<double>(p.f_S.data(), p.f_S.data() + p.f_S.size());
  j["f_A"] = std::vector<double>(p.f_A.data(), p.f_A.data() + p.f_A.size());
  return j;
}

inline nlohmann::json fit_report(const FitResult& r, std::optional<double> landmark_nme) {
  nlohmann::json j;
  j["params"] = params_json(r.params);
  j["stages"] = nlohmann::json::array();
  for (std::size_t i = 0; i < r.stage_traces.size(); ++i)
    j["stages"].push_back({{"trace", r.stage_traces[i]}, {"termination", r.stage_terminations[i]}});
  j["loss"] = {{"total", r.final_loss},
               {"rec_image", r.final_parts.rec_image},
               {"rec_feature", r.final_parts.rec_feature},
               {"landmark", r.final_parts.landmark},
               {"symmetry", r.final_parts.symmetry},
               {"constancy", r.final_parts.constancy},
               {"smoothness", r.final_parts.smoothness}};
  j["iterations"] = r.iterations;
  j["termination"] = r.termination;
  j["nme"] = landmark_nme ? nlohmann::json(*landmark_nme) : nlohmann::json(nullptr);
  return j;
}

inline void save_json(const std::filesystem::path& p, const nlohmann::json& j) {
  atomic_write(p, j.dump(2) + "\n");
}

}  // namespace facefit::io
