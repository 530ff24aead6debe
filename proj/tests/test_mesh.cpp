#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>
#include <set>

#include "test_util.hpp"

using namespace facefit;
using testutil::uni;

namespace {

// Two triangles covering the square [0,3]x[0,3] of a 4x4 UV grid.
Topology square_topology() {
  Topology t;
  t.num_vertices = 4;
  t.uv_coords = {{0, 0}, {0, 3}, {3, 3}, {3, 0}};
  t.triangles = {{0, 1, 2}, {0, 2, 3}};
  t.landmark_indices.assign(kNumLandmarks, 0);
  return t;
}

}  // namespace

TEST(Unwrap, KnownPoints) {
  UnwrapConstants c{2.0, 5.0, -3.0, 7.0};
  // Straight ahead: azimuth 0.
  auto p = cylindrical_unwrap(Vec3(0, 1, 2), c);
  EXPECT_DOUBLE_EQ(p.x(), -3.0 * 1 + 7.0);
  EXPECT_DOUBLE_EQ(p.y(), 5.0);
  // On +x: azimuth pi/2.
  p = cylindrical_unwrap(Vec3(4, 0, 0), c);
  EXPECT_DOUBLE_EQ(p.y(), 2.0 * std::numbers::pi / 2 + 5.0);
  EXPECT_DOUBLE_EQ(p.x(), 7.0);
}

TEST(Unwrap, RadiusInvariant) {
  std::mt19937_64 rng(3);
  UnwrapConstants c{1.3, 0.2, 0.7, -0.4};
  for (int i = 0; i < 100; ++i) {
    Vec3 p(uni(rng, -2, 2), uni(rng, -2, 2), uni(rng, 0.1, 2));
    const double s = uni(rng, 0.1, 5);
    Vec3 q(s * p.x(), p.y(), s * p.z());
    EXPECT_NEAR((cylindrical_unwrap(p, c) - cylindrical_unwrap(q, c)).norm(), 0.0, 1e-12);
  }
}

TEST(Unwrap, Errors) {
  EXPECT_THROW(cylindrical_unwrap(Vec3(0, 1, 0), {}), domain_error);
  EXPECT_THROW(cylindrical_unwrap(Vec3(1, 1, 1), {0.0, 0, 1, 0}), domain_error);
}

TEST(SampleUV, IntegerPointsReturnTexels) {
  std::mt19937_64 rng(1);
  auto g = testutil::random_grid(rng, 5, 7, 3);
  for (int r = 0; r < 5; ++r)
    for (int c = 0; c < 7; ++c) {
      auto s = sample_uv(g, Vec2(r, c));
      for (int ch = 0; ch < 3; ++ch) EXPECT_EQ(s[ch], g(r, c, ch));
    }
}

TEST(SampleUV, MatchesLerpOracle) {
  std::mt19937_64 rng(2);
  auto g = testutil::random_grid(rng, 6, 4, 2);
  auto lerp = [](double a, double b, double t) { return a + t * (b - a); };
  for (int i = 0; i < 200; ++i) {
    const double u = uni(rng, 0, 4.999), v = uni(rng, 0, 2.999);
    const int r = static_cast<int>(u), c = static_cast<int>(v);
    auto s = sample_uv(g, Vec2(u, v));
    for (int ch = 0; ch < 2; ++ch) {
      const double top = lerp(g(r, c, ch), g(r, c + 1, ch), v - c);
      const double bot = lerp(g(r + 1, c, ch), g(r + 1, c + 1, ch), v - c);
      EXPECT_NEAR(s[ch], lerp(top, bot, u - r), 1e-14);
    }
  }
}

TEST(SampleUV, EdgesAndOutOfRange) {
  Grid g(3, 3, 1);
  for (int i = 0; i < 9; ++i) g.data[i] = i;
  EXPECT_DOUBLE_EQ(sample_uv(g, Vec2(2.0, 2.0))[0], 8.0);
  EXPECT_DOUBLE_EQ(sample_uv(g, Vec2(2.0, 1.5))[0], 7.5);
  EXPECT_THROW(sample_uv(g, Vec2(-1e-9, 0)), range_error);
  EXPECT_THROW(sample_uv(g, Vec2(0, 2.0 + 1e-9)), range_error);
  EXPECT_THROW(sample_uv(g, Vec2(std::nan(""), 0)), range_error);
}

TEST(SampleUV, WeightsPartitionUnity) {
  std::mt19937_64 rng(4);
  for (int i = 0; i < 100; ++i) {
    auto fp = bilinear_footprint(9, 9, uni(rng, 0, 8), uni(rng, 0, 8));
    double s = 0;
    for (double w : fp.weight) {
      EXPECT_GE(w, 0.0);
      s += w;
    }
    EXPECT_NEAR(s, 1.0, 1e-15);
  }
}

TEST(SampleUV, BackwardMatchesFiniteDifference) {
  std::mt19937_64 rng(5);
  auto g = testutil::random_grid(rng, 6, 6, 3);
  for (int i = 0; i < 50; ++i) {
    const Vec2 p(uni(rng, 0.2, 4.8), uni(rng, 0.2, 4.8));
    Eigen::VectorXd up = testutil::random_vec(rng, 3);
    auto f = [&](const Eigen::VectorXd& x) { return up.dot(sample_uv(g, Vec2(x[0], x[1]))); };
    const auto sg = sample_uv_backward(g, p, up);
    Eigen::VectorXd x(2);
    x << p.x(), p.y();
    for (int k = 0; k < 2; ++k) {
      Eigen::VectorXd d = Eigen::VectorXd::Zero(2);
      d[k] = 1;
      EXPECT_NEAR(sg.dp[k], testutil::directional_fd(f, x, d, 1e-7), 1e-6);
    }
    // Texel gradient: sample is linear in the grid values.
    for (int j = 0; j < 4; ++j) {
      Grid e(6, 6, 3);
      e(sg.texels.row[j], sg.texels.col[j], 0) = 1.0;
      double acc = 0;
      for (int k = 0; k < 4; ++k)
        if (sg.texels.row[k] == sg.texels.row[j] && sg.texels.col[k] == sg.texels.col[j])
          acc += sg.texels.weight[k] * up[0];
      EXPECT_NEAR(up.dot(sample_uv(e, p)), acc, 1e-14);
    }
  }
}

TEST(Normals, SingleTriangleFollowsWinding) {
  Topology t;
  t.num_vertices = 3;
  t.triangles = {{0, 1, 2}};
  VertexShape s(3);
  s.vertex(1) = Vec3(1, 0, 0);
  s.vertex(2) = Vec3(0, 1, 0);
  for (const auto& n : vertex_normals(s, t)) EXPECT_NEAR((n - Vec3(0, 0, 1)).norm(), 0, 1e-15);
  t.triangles = {{0, 2, 1}};
  for (const auto& n : vertex_normals(s, t)) EXPECT_NEAR((n - Vec3(0, 0, -1)).norm(), 0, 1e-15);
}

TEST(Normals, AreaWeightedOracle) {
  // Vertex 0 shared by a large triangle in the xy plane and a small one in xz.
  Topology t;
  t.num_vertices = 5;
  t.triangles = {{0, 1, 2}, {0, 3, 4}};
  VertexShape s(5);
  s.vertex(1) = Vec3(2, 0, 0);
  s.vertex(2) = Vec3(0, 2, 0);  // cross = (0,0,4)
  s.vertex(3) = Vec3(0, 0, 1);
  s.vertex(4) = Vec3(1, 0, 0);  // cross = (0,1,0)
  const Vec3 expect = Vec3(0, 1, 4).normalized();
  EXPECT_NEAR((vertex_normals(s, t)[0] - expect).norm(), 0, 1e-15);
}

TEST(Normals, ZeroStarIsError) {
  Topology t;
  t.num_vertices = 4;
  t.triangles = {{0, 1, 2}};
  VertexShape s(4);
  s.vertex(1) = Vec3(1, 0, 0);
  s.vertex(2) = Vec3(0, 1, 0);
  EXPECT_THROW(vertex_normals(s, t), domain_error);  // vertex 3 is isolated
}

TEST(Normals, BackwardMatchesFiniteDifference) {
  const auto& syn = testutil::Synthetic::get();
  std::mt19937_64 rng(6);
  const auto& topo = syn.model.topo;
  const VertexShape s(syn.model.shape.mean);
  std::vector<Vec3> w(topo.num_vertices);
  for (auto& v : w) v = Vec3(uni(rng, -1, 1), uni(rng, -1, 1), uni(rng, -1, 1));
  auto f = [&](const Eigen::VectorXd& x) {
    const auto n = vertex_normals(VertexShape(x), topo);
    double acc = 0;
    for (int i = 0; i < topo.num_vertices; ++i) acc += w[i].dot(n[i]);
    return acc;
  };
  const auto full = vertex_normals_full(s, topo);
  const auto g = vertex_normals_backward(s, topo, full, w);
  for (int k = 0; k < 10; ++k) {
    const Eigen::VectorXd d = testutil::random_vec(rng, static_cast<int>(s.xyz.size()));
    EXPECT_LT(testutil::rel_err(g.dot(d), testutil::directional_fd(f, s.xyz, d)), 1e-6);
  }
}

TEST(TexelMap, RegionIsBruteForceInsideSet) {
  const auto& syn = testutil::Synthetic::get();
  const auto& topo = syn.model.topo;
  const auto& tm = syn.ctx->texels;
  for (int u = 0; u < tm.u_size; ++u)
    for (int v = 0; v < tm.v_size; ++v) {
      bool inside = false;
      for (const auto& tr : topo.triangles) {
        const Vec2 &a = topo.uv_coords[tr[0]], &b = topo.uv_coords[tr[1]], &c = topo.uv_coords[tr[2]];
        auto cross = [](const Vec2& o, const Vec2& p, const Vec2& q) {
          return (p - o).x() * (q - o).y() - (p - o).y() * (q - o).x();
        };
        const Vec2 p(u, v);
        const double d1 = cross(a, b, p), d2 = cross(b, c, p), d3 = cross(c, a, p);
        const double tol = 1e-9;
        if ((d1 >= -tol && d2 >= -tol && d3 >= -tol) || (d1 <= tol && d2 <= tol && d3 <= tol))
          inside = true;
      }
      EXPECT_EQ(tm.region(u, v), inside) << u << "," << v;
      if (tm.region(u, v)) {
        EXPECT_TRUE(tm.support(u, v));
        const Vec3& w = tm.bary[tm.at(u, v)];
        EXPECT_NEAR(w.sum(), 1.0, 1e-12);
        EXPECT_GE(w.minCoeff(), -1e-9);
      }
    }
}

TEST(TexelMap, SupportCoversEveryInteriorLookup) {
  // Any bilinear lookup at a point inside a UV triangle touches supported texels.
  const auto& syn = testutil::Synthetic::get();
  const auto& topo = syn.model.topo;
  const auto& tm = syn.ctx->texels;
  std::mt19937_64 rng(7);
  for (int i = 0; i < 2000; ++i) {
    const auto& tr = topo.triangles[rng() % topo.triangles.size()];
    double a = uni(rng, 0, 1), b = uni(rng, 0, 1);
    if (a + b > 1) a = 1 - a, b = 1 - b;
    const Vec2 p = topo.uv_coords[tr[0]] + a * (topo.uv_coords[tr[1]] - topo.uv_coords[tr[0]]) +
                   b * (topo.uv_coords[tr[2]] - topo.uv_coords[tr[0]]);
    const auto fp = bilinear_footprint(tm.u_size, tm.v_size, p.x(), p.y());
    for (int k = 0; k < 4; ++k) EXPECT_TRUE(tm.support(fp.row[k], fp.col[k]));
  }
}

TEST(TexelMap, AffineAttributeReproduced) {
  // Barycentric interpolation reproduces an affine function of (u, v) exactly.
  const auto topo = square_topology();
  const auto tm = build_texel_map(topo, 4, 4);
  std::vector<Vec3> attr;
  auto f = [](const Vec2& p) { return Vec3(1 + 2 * p.x() - p.y(), 0.5 * p.y(), -p.x()); };
  for (const auto& p : topo.uv_coords) attr.push_back(f(p));
  const Grid g = vertex_attribute_to_uv(tm, topo, attr);
  EXPECT_EQ(tm.region.count(), 16u);
  for (int u = 0; u < 4; ++u)
    for (int v = 0; v < 4; ++v) EXPECT_NEAR((g.rgb(u, v) - f(Vec2(u, v))).norm(), 0, 1e-13);
}

TEST(TexelMap, AttributeBackwardIsAdjoint) {
  const auto& syn = testutil::Synthetic::get();
  const auto& topo = syn.model.topo;
  const auto& tm = syn.ctx->texels;
  std::mt19937_64 rng(8);
  std::vector<Vec3> attr(topo.num_vertices);
  for (auto& a : attr) a = Vec3(uni(rng, -1, 1), uni(rng, -1, 1), uni(rng, -1, 1));
  const Grid up = testutil::random_grid(rng, tm.u_size, tm.v_size, 3, -1, 1);
  const Grid fwd = vertex_attribute_to_uv(tm, topo, attr);
  const auto back = vertex_attribute_to_uv_backward(tm, topo, up);
  double lhs = 0, rhs = 0;
  for (std::size_t i = 0; i < fwd.data.size(); ++i) lhs += fwd.data[i] * up.data[i];
  for (int i = 0; i < topo.num_vertices; ++i) rhs += back[i].dot(attr[i]);
  EXPECT_NEAR(lhs, rhs, 1e-10 * std::abs(lhs));
}

TEST(ShapeUV, AffineRoundTrip) {
  const auto topo = square_topology();
  const auto tm = build_texel_map(topo, 4, 4);
  VertexShape s(4);
  for (int i = 0; i < 4; ++i) {
    const Vec2& p = topo.uv_coords[i];
    s.vertex(i) = Vec3(p.x(), p.y(), p.x() + 2 * p.y());
  }
  const auto back = shape_from_uv(shape_to_uv(s, topo, tm), topo);
  EXPECT_NEAR((back.xyz - s.xyz).norm(), 0, 1e-13);
}

TEST(ShapeUV, BackwardIsAdjoint) {
  const auto& syn = testutil::Synthetic::get();
  const auto& topo = syn.model.topo;
  std::mt19937_64 rng(9);
  UVShapeMap m(syn.ctx->u_size, syn.ctx->v_size);
  m.grid = testutil::random_grid(rng, m.u_size(), m.v_size(), 3, -1, 1);
  const Eigen::VectorXd up = testutil::random_vec(rng, 3 * topo.num_vertices);
  const double lhs = up.dot(shape_from_uv(m, topo).xyz);
  const Grid g = shape_from_uv_backward(m, topo, up);
  double rhs = 0;
  for (std::size_t i = 0; i < g.data.size(); ++i) rhs += g.data[i] * m.grid.data[i];
  EXPECT_NEAR(lhs, rhs, 1e-10 * std::abs(lhs));
}

TEST(Topology, ValidationErrors) {
  auto t = square_topology();
  EXPECT_NO_THROW(validate(t, 4, 4));
  auto bad = t;
  bad.triangles[0][2] = 9;
  EXPECT_THROW(validate(bad, 4, 4), domain_error);
  bad = t;
  bad.uv_coords.pop_back();
  EXPECT_THROW(validate(bad, 4, 4), shape_error);
  bad = t;
  bad.uv_coords[2] = Vec2(3.5, 3);
  EXPECT_THROW(validate(bad, 4, 4), range_error);
  bad = t;
  bad.uv_coords[2] = bad.uv_coords[1];
  EXPECT_THROW(validate(bad, 4, 4), domain_error);
  bad = t;
  bad.landmark_indices.pop_back();
  EXPECT_THROW(validate(bad, 4, 4), shape_error);
}

TEST(SyntheticModel, Structure) {
  const auto& m = testutil::Synthetic::get().model;
  EXPECT_EQ(m.num_vertices(), 504);
  EXPECT_EQ(m.topo.landmark_indices.size(), 68u);
  std::set<int> uniq(m.topo.landmark_indices.begin(), m.topo.landmark_indices.end());
  EXPECT_EQ(uniq.size(), 68u);
  EXPECT_EQ(m.topo.eye_corners[0], m.topo.landmark_indices[36]);
  EXPECT_EQ(m.topo.eye_corners[1], m.topo.landmark_indices[45]);
  // Each vertex's uv is its own cylindrical unwrap.
  for (int i = 0; i < m.num_vertices(); ++i)
    EXPECT_NEAR((m.topo.uv_coords[i] -
                 cylindrical_unwrap(m.shape.mean.segment<3>(3 * i), m.unwrap)).norm(), 0, 1e-12);
  // Bases are mutually orthogonal.
  const Eigen::MatrixXd gram = m.shape.bases.transpose() * m.shape.bases;
  for (int a = 0; a < 8; ++a)
    for (int b = 0; b < 8; ++b)
      if (a != b) EXPECT_NEAR(gram(a, b), 0, 1e-9 * gram(a, a));
}
