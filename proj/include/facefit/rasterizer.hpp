#pragma once

// Z-buffer triangle rasterization with barycentric weights.
//
// Pixel (row y, col x) is sampled at its center (x + 0.5, y + 0.5). A pixel
// center lying exactly on an edge belongs to the triangle only when that
// edge is a top or left edge (top-left fill rule). Both windings are
// rasterized; no culling. The triangle with the smallest interpolated depth
// wins, the lowest triangle index on exact ties.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "facefit/camera.hpp"
#include "facefit/grid.hpp"
#include "facefit/mesh.hpp"

namespace facefit {

struct FragmentBuffer {
  int width = 0;
  int height = 0;
  std::vector<int> tri_id;   // -1 = background
  std::vector<Vec3> bary;
  std::vector<double> depth;

  FragmentBuffer() = default;
  FragmentBuffer(int w, int h)
      : width(w), height(h),
        tri_id(static_cast<std::size_t>(w) * h, -1),
        bary(static_cast<std::size_t>(w) * h, Vec3::Zero()),
        depth(static_cast<std::size_t>(w) * h,
              std::numeric_limits<double>::infinity()) {}

  std::size_t at(int y, int x) const {
    return static_cast<std::size_t>(y) * width + x;
  }
  std::size_t covered() const {
    return static_cast<std::size_t>(
        std::count_if(tri_id.begin(), tri_id.end(), [](int t) { return t >= 0; }));
  }
};

namespace raster {

inline double edge(const Vec2& a, const Vec2& b, const Vec2& p) {
  return (b.x() - a.x()) * (p.y() - a.y()) - (b.y() - a.y()) * (p.x() - a.x());
}

// With y pointing down and positive orientation, a top edge is horizontal
// running in +x and a left edge runs in -y.
inline bool is_top_left(const Vec2& e) {
  return (e.y() == 0.0 && e.x() > 0.0) || e.y() < 0.0;
}

inline Vec2 pixel_center(int y, int x) { return {x + 0.5, y + 0.5}; }

// Barycentric weights of p with respect to (a, b, c). Returns false when
// the triangle is degenerate or p is outside under the fill rule.
inline bool inside(const Vec2& a, const Vec2& b, const Vec2& c, const Vec2& p,
                   Vec3& lambda) {
  const double area = edge(a, b, c);
  if (area == 0.0) return false;
  const double sgn = area > 0.0 ? 1.0 : -1.0;
  const double wa = edge(b, c, p), wb = edge(c, a, p), wc = edge(a, b, p);
  auto accept = [sgn](double w, const Vec2& from, const Vec2& to) {
    const double s = sgn * w;
    if (s > 0.0) return true;
    if (s < 0.0) return false;
    return is_top_left(sgn > 0.0 ? Vec2(to - from) : Vec2(from - to));
  };
  if (!accept(wa, b, c) || !accept(wb, c, a) || !accept(wc, a, b)) return false;
  lambda = {wa / area, wb / area, wc / area};
  return true;
}

// Barycentric weights without an inside test (used with frozen coverage).
inline Vec3 barycentric(const Vec2& a, const Vec2& b, const Vec2& c,
                        const Vec2& p) {
  const double area = edge(a, b, c);
  return {edge(b, c, p) / area, edge(c, a, p) / area, edge(a, b, p) / area};
}

// Gradient of a scalar with respect to the three 2D vertices given its
// gradient `g` with respect to the barycentric weights `lambda`.
inline std::array<Vec2, 3> barycentric_backward(const Vec2& a, const Vec2& b,
                                                const Vec2& c,
                                                const Vec3& lambda,
                                                const Vec3& g) {
  const Vec2 ab = b - a, ac = c - a;
  const double det = ab.x() * ac.y() - ab.y() * ac.x();
  const double r1 = g[1] - g[0], r2 = g[2] - g[0];
  const Vec2 y((r1 * ac.y() - r2 * ab.y()) / det, (ab.x() * r2 - ac.x() * r1) / det);
  return {-lambda[0] * y, -lambda[1] * y, -lambda[2] * y};
}

}  // namespace raster

inline FragmentBuffer rasterize(const ProjectedVertices& projected,
                                const Topology& topo, int width, int height) {
  if (width <= 0 || height <= 0)
    throw domain_error("rasterize: image size must be positive");
  FragmentBuffer fb(width, height);
  for (int t = 0; t < static_cast<int>(topo.triangles.size()); ++t) {
    const auto& tr = topo.triangles[t];
    const Vec2 &a = projected.coords[tr[0]], &b = projected.coords[tr[1]],
               &c = projected.coords[tr[2]];
    if (!a.allFinite() || !b.allFinite() || !c.allFinite()) continue;
    const double xmin = std::min({a.x(), b.x(), c.x()}), xmax = std::max({a.x(), b.x(), c.x()});
    const double ymin = std::min({a.y(), b.y(), c.y()}), ymax = std::max({a.y(), b.y(), c.y()});
    const int x0 = std::max(0, static_cast<int>(std::floor(xmin - 0.5)));
    const int x1 = std::min(width - 1, static_cast<int>(std::ceil(xmax - 0.5)));
    const int y0 = std::max(0, static_cast<int>(std::floor(ymin - 0.5)));
    const int y1 = std::min(height - 1, static_cast<int>(std::ceil(ymax - 0.5)));
    const double za = projected.depth[tr[0]], zb = projected.depth[tr[1]],
                 zc = projected.depth[tr[2]];
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        Vec3 l;
        if (!raster::inside(a, b, c, raster::pixel_center(y, x), l)) continue;
        const double z = l[0] * za + l[1] * zb + l[2] * zc;
        const auto k = fb.at(y, x);
        if (z < fb.depth[k]) {
          fb.depth[k] = z;
          fb.tri_id[k] = t;
          fb.bary[k] = l;
        }
      }
  }
  return fb;
}

// Recomputes barycentric weights and depth for a fixed pixel-to-triangle
// assignment. Weights may leave [0, 1] when vertices have moved.
inline FragmentBuffer refragment(const ProjectedVertices& projected,
                                 const Topology& topo,
                                 const FragmentBuffer& coverage) {
  FragmentBuffer fb = coverage;
  for (int y = 0; y < fb.height; ++y)
    for (int x = 0; x < fb.width; ++x) {
      const auto k = fb.at(y, x);
      const int t = fb.tri_id[k];
      if (t < 0) continue;
      const auto& tr = topo.triangles[t];
      const Vec3 l = raster::barycentric(projected.coords[tr[0]], projected.coords[tr[1]],
                                         projected.coords[tr[2]], raster::pixel_center(y, x));
      fb.bary[k] = l;
      fb.depth[k] = l[0] * projected.depth[tr[0]] + l[1] * projected.depth[tr[1]] +
                    l[2] * projected.depth[tr[2]];
    }
  return fb;
}

}  // namespace facefit
