#pragma once

// Mesh topology, cylindrical UV unwrapping, bilinear UV sampling and its
// backward pass, vertex normals, and conversions between per-vertex and
// UV-space representations.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "facefit/grid.hpp"

namespace facefit {

inline constexpr int kNumLandmarks = 68;

using Triangle = std::array<int, 3>;

struct Topology {
  int num_vertices = 0;
  std::vector<Triangle> triangles;
  std::vector<int> landmark_indices;  // 68 entries, 300-W ordering
  std::array<int, 2> eye_corners{0, 0};  // outer eye corners (vertex ids)
  std::vector<Vec2> uv_coords;  // per-vertex (u, v) in texel units

  std::size_t num_triangles() const { return triangles.size(); }
};

// Signed doubled area of the UV triangle.
inline double uv_signed_area2(const Topology& topo, const Triangle& t) {
  const Vec2& a = topo.uv_coords[t[0]];
  const Vec2& b = topo.uv_coords[t[1]];
  const Vec2& c = topo.uv_coords[t[2]];
  return (b.x() - a.x()) * (c.y() - a.y()) - (b.y() - a.y()) * (c.x() - a.x());
}

// Checks every structural invariant of a topology against a UV grid size.
inline void validate(const Topology& topo, int u_size, int v_size) {
  const int q = topo.num_vertices;
  if (q <= 0) throw domain_error("topology has no vertices");
  if (static_cast<int>(topo.uv_coords.size()) != q)
    throw shape_error("uv_coords has " + std::to_string(topo.uv_coords.size()) +
                      " entries, expected " + std::to_string(q));
  if (topo.landmark_indices.size() != kNumLandmarks)
    throw shape_error("landmark_indices has " +
                      std::to_string(topo.landmark_indices.size()) +
                      " entries, expected 68");
  auto check_index = [q](int i, const char* what) {
    if (i < 0 || i >= q)
      throw domain_error(std::string(what) + " index " + std::to_string(i) +
                         " out of range for " + std::to_string(q) + " vertices");
  };
  for (std::size_t t = 0; t < topo.triangles.size(); ++t) {
    for (int i : topo.triangles[t]) check_index(i, "triangle");
    if (uv_signed_area2(topo, topo.triangles[t]) == 0.0)
      throw domain_error("triangle " + std::to_string(t) +
                         " is degenerate in UV space");
  }
  for (int i : topo.landmark_indices) check_index(i, "landmark");
  for (int i : topo.eye_corners) check_index(i, "eye corner");
  for (int i = 0; i < q; ++i) {
    const Vec2& p = topo.uv_coords[i];
    if (!(p.x() >= 0.0 && p.x() <= u_size - 1 && p.y() >= 0.0 &&
          p.y() <= v_size - 1))
      throw range_error("uv coordinate of vertex " + std::to_string(i) +
                        " lies outside the UV grid");
  }
}

// Q vertices stored as a flat 3Q vector (x0,y0,z0,x1,...).
struct VertexShape {
  Eigen::VectorXd xyz;

  VertexShape() = default;
  explicit VertexShape(int q) : xyz(Eigen::VectorXd::Zero(3 * q)) {}
  explicit VertexShape(Eigen::VectorXd flat) : xyz(std::move(flat)) {
    if (xyz.size() % 3 != 0)
      throw shape_error("vertex vector length must be a multiple of 3");
  }

  int size() const { return static_cast<int>(xyz.size() / 3); }
  Vec3 vertex(int i) const { return xyz.segment<3>(3 * i); }
  auto vertex(int i) { return xyz.segment<3>(3 * i); }
};

// Scale/translation constants of the cylindrical unwrap.
struct UnwrapConstants {
  double alpha1 = 1.0;  // scale of the azimuth angle -> v
  double beta1 = 0.0;
  double alpha2 = 1.0;  // scale of height y -> u
  double beta2 = 0.0;
};

// Projects a 3D point onto UV space: v from the azimuth atan2(x, z),
// u linear in y. Returns (u, v).
inline Vec2 cylindrical_unwrap(const Vec3& p, const UnwrapConstants& c) {
  if (c.alpha1 == 0.0 || c.alpha2 == 0.0)
    throw domain_error("unwrap scales must be nonzero");
  if (p.x() == 0.0 && p.z() == 0.0)
    throw domain_error("cylindrical unwrap undefined on the y axis (x = z = 0)");
  return {c.alpha2 * p.y() + c.beta2, c.alpha1 * std::atan2(p.x(), p.z()) + c.beta1};
}

// The (up to) four texels touched by a bilinear lookup, with weights.
struct BilinearFootprint {
  std::array<int, 4> row{};
  std::array<int, 4> col{};
  std::array<double, 4> weight{};
};

inline void check_sample_range(int rows, int cols, double u, double v) {
  if (!(u >= 0.0 && u <= rows - 1 && v >= 0.0 && v <= cols - 1))
    throw range_error("sample point (" + std::to_string(u) + ", " +
                      std::to_string(v) + ") outside [0," +
                      std::to_string(rows - 1) + "]x[0," +
                      std::to_string(cols - 1) + "]");
}

inline BilinearFootprint bilinear_footprint(int rows, int cols, double u,
                                            double v) {
  check_sample_range(rows, cols, u, v);
  const int u0 = static_cast<int>(std::floor(u));
  const int v0 = static_cast<int>(std::floor(v));
  const int u1 = std::min(u0 + 1, rows - 1);
  const int v1 = std::min(v0 + 1, cols - 1);
  const double fu = u - u0;
  const double fv = v - v0;
  BilinearFootprint fp;
  fp.row = {u0, u0, u1, u1};
  fp.col = {v0, v1, v0, v1};
  fp.weight = {(1.0 - fu) * (1.0 - fv), (1.0 - fu) * fv, fu * (1.0 - fv),
               fu * fv};
  return fp;
}

inline double sample_channel(const Grid& g, const BilinearFootprint& fp,
                             int ch) {
  double acc = 0.0;
  for (int k = 0; k < 4; ++k)
    acc += fp.weight[k] * g(fp.row[k], fp.col[k], ch);
  return acc;
}

// Bilinear lookup at continuous (u, v) = (row, col). Out-of-range points
// are an error; no clamping.
inline Eigen::VectorXd sample_uv(const Grid& g, const Vec2& p) {
  auto fp = bilinear_footprint(g.rows, g.cols, p.x(), p.y());
  Eigen::VectorXd out(g.channels);
  for (int ch = 0; ch < g.channels; ++ch) out[ch] = sample_channel(g, fp, ch);
  return out;
}

// Backward of sample_uv. `texels` carries the per-texel weights (the texel
// gradient is weight * upstream[ch]); `dp` is the gradient with respect to
// the sample coordinate. On integer lines the right-sided derivative is
// used; on the last row/column the left-sided one.
struct SampleGradient {
  BilinearFootprint texels;
  Vec2 dp = Vec2::Zero();
};

inline SampleGradient sample_uv_backward(const Grid& g, const Vec2& p,
                                         const double* upstream) {
  SampleGradient out;
  out.texels = bilinear_footprint(g.rows, g.cols, p.x(), p.y());

  auto cell = [](double x, int n) {
    int lo = static_cast<int>(std::floor(x));
    if (lo >= n - 1) lo = std::max(n - 2, 0);
    return lo;
  };
  const int u0 = cell(p.x(), g.rows);
  const int v0 = cell(p.y(), g.cols);
  const int u1 = std::min(u0 + 1, g.rows - 1);
  const int v1 = std::min(v0 + 1, g.cols - 1);
  const double fu = p.x() - u0;
  const double fv = p.y() - v0;
  double du = 0.0, dv = 0.0;
  for (int ch = 0; ch < g.channels; ++ch) {
    const double a00 = g(u0, v0, ch), a01 = g(u0, v1, ch);
    const double a10 = g(u1, v0, ch), a11 = g(u1, v1, ch);
    if (u1 != u0) du += upstream[ch] * ((1.0 - fv) * (a10 - a00) + fv * (a11 - a01));
    if (v1 != v0) dv += upstream[ch] * ((1.0 - fu) * (a01 - a00) + fu * (a11 - a10));
  }
  out.dp = {du, dv};
  return out;
}

inline SampleGradient sample_uv_backward(const Grid& g, const Vec2& p,
                                         const Eigen::VectorXd& upstream) {
  if (upstream.size() != g.channels)
    throw shape_error("upstream gradient has wrong channel count");
  return sample_uv_backward(g, p, upstream.data());
}

// Per-vertex positions sampled from a UV shape map at each vertex's uv.
inline VertexShape shape_from_uv(const UVShapeMap& s, const Topology& topo) {
  if (s.grid.channels != 3) throw shape_error("shape map needs 3 channels");
  VertexShape out(topo.num_vertices);
  for (int i = 0; i < topo.num_vertices; ++i) {
    auto fp = bilinear_footprint(s.grid.rows, s.grid.cols, topo.uv_coords[i].x(),
                                 topo.uv_coords[i].y());
    for (int ch = 0; ch < 3; ++ch)
      out.xyz[3 * i + ch] = sample_channel(s.grid, fp, ch);
  }
  return out;
}

// Scatters a per-vertex gradient back onto the UV shape map texels.
inline Grid shape_from_uv_backward(const UVShapeMap& s, const Topology& topo,
                                   const Eigen::VectorXd& dvertices) {
  Grid grad(s.grid.rows, s.grid.cols, 3);
  for (int i = 0; i < topo.num_vertices; ++i) {
    auto fp = bilinear_footprint(s.grid.rows, s.grid.cols, topo.uv_coords[i].x(),
                                 topo.uv_coords[i].y());
    for (int k = 0; k < 4; ++k)
      for (int ch = 0; ch < 3; ++ch)
        grad(fp.row[k], fp.col[k], ch) += fp.weight[k] * dvertices[3 * i + ch];
  }
  return grad;
}

// Area-weighted vertex normals. `raw` keeps the unnormalized accumulated
// cross products, needed by the backward pass.
struct VertexNormals {
  std::vector<Vec3> unit;
  std::vector<Vec3> raw;
};

inline VertexNormals vertex_normals_full(const VertexShape& s,
                                         const Topology& topo) {
  VertexNormals out;
  out.raw.assign(topo.num_vertices, Vec3::Zero());
  for (const auto& t : topo.triangles) {
    const Vec3 p0 = s.vertex(t[0]), p1 = s.vertex(t[1]), p2 = s.vertex(t[2]);
    const Vec3 n = (p1 - p0).cross(p2 - p0);
    for (int i : t) out.raw[i] += n;
  }
  out.unit.resize(topo.num_vertices);
  for (int i = 0; i < topo.num_vertices; ++i) {
    const double len = out.raw[i].norm();
    if (!(len > 0.0) || !std::isfinite(len))
      throw domain_error("vertex " + std::to_string(i) +
                         " has a zero-area triangle star; normal undefined");
    out.unit[i] = out.raw[i] / len;
  }
  return out;
}

inline std::vector<Vec3> vertex_normals(const VertexShape& s,
                                        const Topology& topo) {
  return vertex_normals_full(s, topo).unit;
}

// Gradient of a scalar with respect to vertex positions given its gradient
// with respect to the unit vertex normals.
inline Eigen::VectorXd vertex_normals_backward(const VertexShape& s,
                                               const Topology& topo,
                                               const VertexNormals& normals,
                                               const std::vector<Vec3>& dunit) {
  std::vector<Vec3> draw(topo.num_vertices);
  for (int i = 0; i < topo.num_vertices; ++i) {
    const Vec3& n = normals.unit[i];
    const double len = normals.raw[i].norm();
    draw[i] = (dunit[i] - n * n.dot(dunit[i])) / len;
  }
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(3 * topo.num_vertices);
  for (const auto& t : topo.triangles) {
    const Vec3 p0 = s.vertex(t[0]), p1 = s.vertex(t[1]), p2 = s.vertex(t[2]);
    const Vec3 e1 = p1 - p0, e2 = p2 - p0;
    const Vec3 dc = draw[t[0]] + draw[t[1]] + draw[t[2]];
    const Vec3 de1 = e2.cross(dc);
    const Vec3 de2 = dc.cross(e1);
    grad.segment<3>(3 * t[1]) += de1;
    grad.segment<3>(3 * t[2]) += de2;
    grad.segment<3>(3 * t[0]) -= de1 + de2;
  }
  return grad;
}

// Assignment of every UV texel to a triangle of the reference layout.
//
// Texels whose integer center lies inside a UV triangle form the face
// region (`region`). Texels within one texel of some triangle's bounding
// box but outside every triangle are attached to the nearest triangle with
// extrapolated barycentric weights (`support`), so that any bilinear
// lookup at a point inside the layout only touches texels with defined
// attributes.
struct UVTexelMap {
  int u_size = 0;
  int v_size = 0;
  std::vector<int> tri;   // -1 when unsupported
  std::vector<Vec3> bary;
  Mask region;
  Mask support;

  std::size_t at(int u, int v) const {
    return static_cast<std::size_t>(u) * v_size + v;
  }
};

namespace detail {

inline Vec3 barycentric_2d(const Vec2& a, const Vec2& b, const Vec2& c,
                           const Vec2& p) {
  const double d = (b.x() - a.x()) * (c.y() - a.y()) - (b.y() - a.y()) * (c.x() - a.x());
  const double wa = (c.x() - b.x()) * (p.y() - b.y()) - (c.y() - b.y()) * (p.x() - b.x());
  const double wb = (a.x() - c.x()) * (p.y() - c.y()) - (a.y() - c.y()) * (p.x() - c.x());
  const double wc = (b.x() - a.x()) * (p.y() - a.y()) - (b.y() - a.y()) * (p.x() - a.x());
  return {wa / d, wb / d, wc / d};
}

inline double point_segment_distance(const Vec2& p, const Vec2& a,
                                     const Vec2& b) {
  const Vec2 ab = b - a;
  const double t = std::clamp((p - a).dot(ab) / ab.squaredNorm(), 0.0, 1.0);
  return (p - (a + t * ab)).norm();
}

}  // namespace detail

inline UVTexelMap build_texel_map(const Topology& topo, int u_size, int v_size) {
  UVTexelMap m;
  m.u_size = u_size;
  m.v_size = v_size;
  m.tri.assign(static_cast<std::size_t>(u_size) * v_size, -1);
  m.bary.assign(m.tri.size(), Vec3::Zero());
  m.region = Mask(u_size, v_size, false);
  m.support = Mask(u_size, v_size, false);
  std::vector<double> best(m.tri.size(), std::numeric_limits<double>::infinity());

  constexpr double kInsideTol = -1e-12;
  for (int t = 0; t < static_cast<int>(topo.triangles.size()); ++t) {
    const auto& tr = topo.triangles[t];
    const Vec2 &a = topo.uv_coords[tr[0]], &b = topo.uv_coords[tr[1]],
               &c = topo.uv_coords[tr[2]];
    const double umin = std::min({a.x(), b.x(), c.x()}), umax = std::max({a.x(), b.x(), c.x()});
    const double vmin = std::min({a.y(), b.y(), c.y()}), vmax = std::max({a.y(), b.y(), c.y()});
    const int u_lo = std::max(0, static_cast<int>(std::ceil(umin)));
    const int u_hi = std::min(u_size - 1, static_cast<int>(std::floor(umax)));
    const int v_lo = std::max(0, static_cast<int>(std::ceil(vmin)));
    const int v_hi = std::min(v_size - 1, static_cast<int>(std::floor(vmax)));
    for (int u = u_lo; u <= u_hi; ++u)
      for (int v = v_lo; v <= v_hi; ++v) {
        const auto k = m.at(u, v);
        if (m.region(u, v)) continue;
        const Vec3 w = detail::barycentric_2d(a, b, c, Vec2(u, v));
        if (w.minCoeff() >= kInsideTol) {
          m.tri[k] = t;
          m.bary[k] = w;
          best[k] = 0.0;
          m.region.set(u, v, true);
          m.support.set(u, v, true);
        }
      }
  }

  for (int t = 0; t < static_cast<int>(topo.triangles.size()); ++t) {
    const auto& tr = topo.triangles[t];
    const Vec2 &a = topo.uv_coords[tr[0]], &b = topo.uv_coords[tr[1]],
               &c = topo.uv_coords[tr[2]];
    const double umin = std::min({a.x(), b.x(), c.x()}), umax = std::max({a.x(), b.x(), c.x()});
    const double vmin = std::min({a.y(), b.y(), c.y()}), vmax = std::max({a.y(), b.y(), c.y()});
    const int u_lo = std::max(0, static_cast<int>(std::floor(umin)) - 1);
    const int u_hi = std::min(u_size - 1, static_cast<int>(std::ceil(umax)) + 1);
    const int v_lo = std::max(0, static_cast<int>(std::floor(vmin)) - 1);
    const int v_hi = std::min(v_size - 1, static_cast<int>(std::ceil(vmax)) + 1);
    for (int u = u_lo; u <= u_hi; ++u)
      for (int v = v_lo; v <= v_hi; ++v) {
        if (m.region(u, v)) continue;
        const Vec2 p(u, v);
        const double d = std::min({detail::point_segment_distance(p, a, b),
                                   detail::point_segment_distance(p, b, c),
                                   detail::point_segment_distance(p, c, a)});
        const auto k = m.at(u, v);
        if (d < best[k]) {
          best[k] = d;
          m.tri[k] = t;
          m.bary[k] = detail::barycentric_2d(a, b, c, p);
          m.support.set(u, v, true);
        }
      }
  }
  return m;
}

// Interpolates a per-vertex 3-vector attribute onto every supported texel.
inline Grid vertex_attribute_to_uv(const UVTexelMap& m, const Topology& topo,
                                   const std::vector<Vec3>& attr) {
  Grid g(m.u_size, m.v_size, 3);
  for (int u = 0; u < m.u_size; ++u)
    for (int v = 0; v < m.v_size; ++v) {
      const int t = m.tri[m.at(u, v)];
      if (t < 0) continue;
      const auto& tr = topo.triangles[t];
      const Vec3& w = m.bary[m.at(u, v)];
      g.set_rgb(u, v, w[0] * attr[tr[0]] + w[1] * attr[tr[1]] + w[2] * attr[tr[2]]);
    }
  return g;
}

inline std::vector<Vec3> vertex_attribute_to_uv_backward(
    const UVTexelMap& m, const Topology& topo, const Grid& dgrid) {
  std::vector<Vec3> d(topo.num_vertices, Vec3::Zero());
  for (int u = 0; u < m.u_size; ++u)
    for (int v = 0; v < m.v_size; ++v) {
      const int t = m.tri[m.at(u, v)];
      if (t < 0) continue;
      const auto& tr = topo.triangles[t];
      const Vec3& w = m.bary[m.at(u, v)];
      const Vec3 g = dgrid.rgb(u, v);
      for (int i = 0; i < 3; ++i) d[tr[i]] += w[i] * g;
    }
  return d;
}

inline std::vector<Vec3> to_points(const VertexShape& s) {
  std::vector<Vec3> pts(s.size());
  for (int i = 0; i < s.size(); ++i) pts[i] = s.vertex(i);
  return pts;
}

// UV position map S^uv of a vertex shape, masked to the face region.
inline UVShapeMap shape_to_uv(const VertexShape& s, const Topology& topo,
                              const UVTexelMap& m) {
  UVShapeMap out;
  out.grid = vertex_attribute_to_uv(m, topo, to_points(s));
  out.mask = m.region;
  return out;
}

// Per-vertex RGB values (flat 3Q) placed into a UV albedo map.
inline UVAlbedoMap vertex_colors_to_uv(const Eigen::VectorXd& rgb,
                                       const Topology& topo,
                                       const UVTexelMap& m) {
  std::vector<Vec3> c(topo.num_vertices);
  for (int i = 0; i < topo.num_vertices; ++i) c[i] = rgb.segment<3>(3 * i);
  UVAlbedoMap out;
  out.grid = vertex_attribute_to_uv(m, topo, c);
  out.mask = m.region;
  return out;
}

}  // namespace facefit
