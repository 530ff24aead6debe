#include <gtest/gtest.h>

#include <numbers>

#include "test_util.hpp"

using namespace facefit;
using testutil::uni;

namespace {

const testutil::Synthetic& syn() { return testutil::Synthetic::get(); }

RenderOptions small() { return {48, 48, Vec3(0.1, 0.2, 0.3)}; }

ProjectionParams pose48(double yaw = 0.2) {
  auto m = synthetic::frontal_pose(48);
  m.yaw = yaw;
  m.pitch += 0.1;
  return m;
}

double dot(const Grid& a, const Grid& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) s += a.data[i] * b.data[i];
  return s;
}

}  // namespace

TEST(Render, CoverageMatchesRasterizerAndBackground) {
  const auto& s = syn();
  const VertexShape shape(s.model.shape.mean);
  const auto m = pose48();
  const auto r = render(s.ctx, m, synthetic::default_light(), shape,
                        s.albedo(Eigen::VectorXd::Zero(8)), small());
  const auto fb = rasterize(project(shape, m), s.model.topo, 48, 48);
  ASSERT_GT(fb.covered(), 300u);
  for (int y = 0; y < 48; ++y)
    for (int x = 0; x < 48; ++x) {
      const bool cov = fb.tri_id[fb.at(y, x)] >= 0;
      EXPECT_EQ(r.image.coverage(y, x), cov);
      if (!cov) EXPECT_EQ(r.image.rgb.rgb(y, x), Vec3(0.1, 0.2, 0.3));
    }
}

TEST(Render, ConstantAlbedoAmbientLight) {
  const auto& s = syn();
  UVAlbedoMap a(s.ctx->u_size, s.ctx->v_size);
  for (int u = 0; u < a.u_size(); ++u)
    for (int v = 0; v < a.v_size(); ++v) a.grid.set_rgb(u, v, Vec3(0.2, 0.4, 0.8));
  const auto r = render(s.ctx, pose48(), SHLighting::ambient(1.5), VertexShape(s.model.shape.mean), a,
                        small());
  const double c = 1.5 * 0.5 / std::sqrt(std::numbers::pi);
  for (int y = 0; y < 48; ++y)
    for (int x = 0; x < 48; ++x)
      if (r.image.coverage(y, x))
        EXPECT_NEAR((r.image.rgb.rgb(y, x) - c * Vec3(0.2, 0.4, 0.8)).norm(), 0, 1e-14);
}

TEST(Render, PixelIsBilinearLookupOfShadedTexture) {
  const auto& s = syn();
  const auto r = render(s.ctx, pose48(), synthetic::default_light(), VertexShape(s.model.shape.mean),
                        s.albedo(Eigen::VectorXd::Zero(8)), small());
  const auto& fb = r.fragments();
  const auto& topo = s.model.topo;
  for (int y = 0; y < 48; ++y)
    for (int x = 0; x < 48; ++x) {
      const auto k = fb.at(y, x);
      if (fb.tri_id[k] < 0) continue;
      const auto& tr = topo.triangles[fb.tri_id[k]];
      const Vec3& l = fb.bary[k];
      const Vec2 p = l[0] * topo.uv_coords[tr[0]] + l[1] * topo.uv_coords[tr[1]] +
                     l[2] * topo.uv_coords[tr[2]];
      const auto expect = sample_uv(r.state.shaded.texture.grid, p);
      for (int ch = 0; ch < 3; ++ch) EXPECT_EQ(r.image.rgb(y, x, ch), expect[ch]);
    }
}

TEST(Render, TexturePathReproducesShadedRender) {
  const auto& s = syn();
  const VertexShape shape(s.model.shape.mean);
  const auto m = pose48();
  const auto r = render(s.ctx, m, synthetic::default_light(), shape, s.albedo(Eigen::VectorXd::Zero(8)),
                        small());
  const auto t = render_texture(s.ctx, m, shape, r.state.shaded.texture, small());
  EXPECT_EQ(t.image.rgb, r.image.rgb);
  EXPECT_EQ(t.image.coverage, r.image.coverage);
  EXPECT_THROW(render_backward(t.state, Grid(48, 48, 3)), domain_error);
}

TEST(Render, UVShapeOverloadSamplesVertices) {
  const auto& s = syn();
  const auto shape_uv = shape_to_uv(VertexShape(s.model.shape.mean), s.model.topo, s.ctx->texels);
  const auto a = s.albedo(Eigen::VectorXd::Zero(8));
  const auto r1 = render(s.ctx, pose48(), synthetic::default_light(), shape_uv, a, small());
  const auto r2 = render(s.ctx, pose48(), synthetic::default_light(),
                         shape_from_uv(shape_uv, s.model.topo), a, small());
  EXPECT_EQ(r1.image.rgb, r2.image.rgb);
}

TEST(Render, LinearInAlbedoAndLight) {
  const auto& s = syn();
  std::mt19937_64 rng(1);
  const VertexShape shape(s.model.shape.mean);
  const auto a1 = s.albedo(testutil::random_vec(rng, 8)), a2 = s.albedo(testutil::random_vec(rng, 8));
  UVAlbedoMap sum = a1;
  for (std::size_t i = 0; i < sum.grid.data.size(); ++i) sum.grid.data[i] += a2.grid.data[i];
  const auto l = synthetic::default_light();
  const auto opts = RenderOptions{48, 48, Vec3::Zero()};
  const auto r1 = render(s.ctx, pose48(), l, shape, a1, opts).image.rgb;
  const auto r2 = render(s.ctx, pose48(), l, shape, a2, opts).image.rgb;
  const auto rs = render(s.ctx, pose48(), l, shape, sum, opts).image.rgb;
  for (std::size_t i = 0; i < rs.data.size(); ++i)
    EXPECT_NEAR(rs.data[i], r1.data[i] + r2.data[i], 1e-12);
}

TEST(Render, ShapeMismatchIsError) {
  const auto& s = syn();
  EXPECT_THROW(render(s.ctx, pose48(), {}, VertexShape(10), s.albedo(Eigen::VectorXd::Zero(8))),
               shape_error);
  EXPECT_THROW(render(s.ctx, pose48(), {}, VertexShape(s.model.shape.mean), UVAlbedoMap(3, 3)),
               shape_error);
}

TEST(RenderBackward, AlbedoAndLightExact) {
  const auto& s = syn();
  std::mt19937_64 rng(2);
  const VertexShape shape(s.model.shape.mean);
  const auto m = pose48();
  const auto a = s.albedo(testutil::random_vec(rng, 8));
  const auto l = synthetic::default_light();
  const Grid up = testutil::random_grid(rng, 48, 48, 3, -1, 1);
  const auto r = render(s.ctx, m, l, shape, a, small());
  const auto g = render_backward(r.state, up);
  // Albedo: the image is linear in albedo, so a difference quotient is exact.
  for (int k = 0; k < 5; ++k) {
    UVAlbedoMap d(a.u_size(), a.v_size());
    d.grid = testutil::random_grid(rng, a.u_size(), a.v_size(), 3, -1, 1);
    UVAlbedoMap ap = a, am = a;
    for (std::size_t i = 0; i < d.grid.data.size(); ++i) {
      ap.grid.data[i] += 1e-3 * d.grid.data[i];
      am.grid.data[i] -= 1e-3 * d.grid.data[i];
    }
    const double fd = (dot(up, render(s.ctx, m, l, shape, ap, small()).image.rgb) -
                       dot(up, render(s.ctx, m, l, shape, am, small()).image.rgb)) / 2e-3;
    EXPECT_LT(testutil::rel_err(dot(g.albedo, d.grid), fd), 1e-8);
  }
  for (int b = 0; b < 27; ++b) {
    SHLighting lp = l, lm = l;
    lp.coeffs[b] += 1e-3;
    lm.coeffs[b] -= 1e-3;
    const double fd = (dot(up, render(s.ctx, m, lp, shape, a, small()).image.rgb) -
                       dot(up, render(s.ctx, m, lm, shape, a, small()).image.rgb)) / 2e-3;
    EXPECT_NEAR(g.light.coeffs[b], fd, 1e-8 * std::max(1.0, std::abs(fd)));
  }
}

TEST(RenderBackward, VerticesAndProjectionWithFrozenCoverage) {
  const auto& s = syn();
  std::mt19937_64 rng(3);
  const VertexShape shape(linear_decode(s.model.shape, testutil::random_vec(rng, 8, -0.5, 0.5)));
  const auto m = pose48();
  const auto a = s.albedo(testutil::random_vec(rng, 8));
  const auto l = synthetic::default_light();
  const Grid up = testutil::random_grid(rng, 48, 48, 3, -1, 1);
  const auto r = render(s.ctx, m, l, shape, a, small());
  const auto g = render_backward(r.state, up);
  const auto& cov = r.fragments();
  auto f_shape = [&](const Eigen::VectorXd& x) {
    return dot(up, render_with_coverage(s.ctx, m, l, VertexShape(x), a, small(), cov).image.rgb);
  };
  for (int k = 0; k < 5; ++k) {
    const auto d = testutil::random_vec(rng, static_cast<int>(shape.xyz.size()));
    EXPECT_LT(testutil::rel_err(g.vertices.dot(d), testutil::directional_fd(f_shape, shape.xyz, d, 1e-7)),
              1e-4);
  }
  const auto ma = m.to_array();
  const Eigen::VectorXd mx = Eigen::Map<const Eigen::VectorXd>(ma.data(), 6);
  auto f_m = [&](const Eigen::VectorXd& x) {
    const auto mm = ProjectionParams::from_array({x[0], x[1], x[2], x[3], x[4], x[5]});
    return dot(up, render_with_coverage(s.ctx, mm, l, shape, a, small(), cov).image.rgb);
  };
  for (int k = 0; k < 6; ++k) {
    Eigen::VectorXd d = Eigen::VectorXd::Zero(6);
    d[k] = 1;
    EXPECT_LT(testutil::rel_err(g.m[k], testutil::directional_fd(f_m, mx, d, 1e-8)), 1e-4) << k;
  }
}

TEST(Composite, Identities) {
  std::mt19937_64 rng(4);
  const Grid r = testutil::random_grid(rng, 8, 9, 3), in = testutil::random_grid(rng, 8, 9, 3);
  EXPECT_EQ(composite_with_mask(r, in, Grid(8, 9, 1, 1.0)), r);
  EXPECT_EQ(composite_with_mask(r, in, Grid(8, 9, 1, 0.0)), in);
  Grid half(8, 9, 1, 0.0);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 9; ++x) half(y, x) = (x + y) % 2;
  const Grid c = composite_with_mask(r, in, half);
  const Grid up = testutil::random_grid(rng, 8, 9, 3, -1, 1);
  const Grid g = composite_with_mask_backward(half, up);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 9; ++x)
      for (int ch = 0; ch < 3; ++ch) {
        EXPECT_EQ(c(y, x, ch), half(y, x) ? r(y, x, ch) : in(y, x, ch));
        EXPECT_EQ(g(y, x, ch), half(y, x) ? up(y, x, ch) : 0.0);
      }
  EXPECT_THROW(composite_with_mask(r, in, Grid(8, 9, 3)), shape_error);
  EXPECT_THROW(composite_with_mask(r, Grid(8, 8, 3), half), shape_error);
}

TEST(Unwarp, RecoversShadedTexture) {
  const auto& s = syn();
  const VertexShape shape(s.model.shape.mean);
  const auto m = synthetic::frontal_pose(128);
  const auto r = render(s.ctx, m, synthetic::default_light(), shape, s.albedo(Eigen::VectorXd::Zero(8)));
  const auto t = unwarp_to_uv(s.ctx, r.image.rgb, shape, m);
  ASSERT_GT(t.mask.count(), s.ctx->texels.region.count() / 2);
  double mae = 0;
  std::size_t n = 0;
  for (int u = 0; u < t.u_size(); ++u)
    for (int v = 0; v < t.v_size(); ++v) {
      if (!t.mask(u, v)) continue;
      EXPECT_TRUE(s.ctx->texels.region(u, v));
      for (int ch = 0; ch < 3; ++ch) {
        mae += std::abs(t.grid(u, v, ch) - r.state.shaded.texture.grid(u, v, ch));
        ++n;
      }
    }
  EXPECT_LT(mae / n, 2.0 / 255.0);
}

TEST(Unwarp, ConstantImageAndFacingTest) {
  const auto& s = syn();
  const VertexShape shape(s.model.shape.mean);
  auto m = synthetic::frontal_pose(64);
  const Image img(64, 64, 3, 0.25);
  const auto t = unwarp_to_uv(s.ctx, img, shape, m);
  for (int u = 0; u < t.u_size(); ++u)
    for (int v = 0; v < t.v_size(); ++v)
      if (t.mask(u, v)) EXPECT_NEAR((t.grid.rgb(u, v) - Vec3(0.25, 0.25, 0.25)).norm(), 0, 1e-15);
  // Turning the head reduces the number of camera-facing texels on one side.
  m.yaw = 1.2;
  const auto turned = unwarp_to_uv(s.ctx, img, shape, m);
  EXPECT_LT(turned.mask.count(), t.mask.count());
  int left = 0, right = 0;
  for (int u = 0; u < t.u_size(); ++u)
    for (int v = 0; v < t.v_size(); ++v)
      if (turned.mask(u, v)) (v < t.v_size() / 2 ? left : right)++;
  EXPECT_NE(left, right);
  // A face pushed out of the image yields nothing.
  m.t2d = Vec2(-500, -500);
  EXPECT_EQ(unwarp_to_uv(s.ctx, img, shape, m).mask.count(), 0u);
}
