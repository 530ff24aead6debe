#include <gtest/gtest.h>

#include <numbers>

#include "test_util.hpp"

using namespace facefit;
using testutil::uni;

namespace {

Vec3 random_unit(std::mt19937_64& rng) {
  Vec3 v;
  do v = Vec3(uni(rng, -1, 1), uni(rng, -1, 1), uni(rng, -1, 1));
  while (v.norm() < 0.1 || v.norm() > 1);
  return v.normalized();
}

}  // namespace

TEST(SHBasis, ValuesOnAxis) {
  const double pi = std::numbers::pi;
  const auto h = sh_basis(Vec3(0, 0, 1));
  const double expect[9] = {0.5 / std::sqrt(pi), 0, std::sqrt(3 / (4 * pi)), 0, 0, 0,
                            2 * std::sqrt(5 / (16 * pi)), 0, 0};
  for (int b = 0; b < 9; ++b) EXPECT_NEAR(h[b], expect[b], 1e-15) << b;
  const auto hx = sh_basis(Vec3(1, 0, 0));
  EXPECT_NEAR(hx[3], std::sqrt(3 / (4 * pi)), 1e-15);
  EXPECT_NEAR(hx[8], std::sqrt(15 / (16 * pi)), 1e-15);
  EXPECT_NEAR(hx[6], -std::sqrt(5 / (16 * pi)), 1e-15);
}

TEST(SHBasis, OrthonormalOverSphere) {
  // Midpoint quadrature in (cos theta, phi).
  const int nt = 1000, np = 400;
  Eigen::Matrix<double, 9, 9> gram = Eigen::Matrix<double, 9, 9>::Zero();
  const double dz = 2.0 / nt, dphi = 2 * std::numbers::pi / np;
  for (int i = 0; i < nt; ++i)
    for (int j = 0; j < np; ++j) {
      const double z = -1 + (i + 0.5) * dz, phi = (j + 0.5) * dphi;
      const double r = std::sqrt(1 - z * z);
      const auto h = sh_basis(Vec3(r * std::cos(phi), r * std::sin(phi), z));
      for (int a = 0; a < 9; ++a)
        for (int b = 0; b < 9; ++b) gram(a, b) += h[a] * h[b] * dz * dphi;
    }
  EXPECT_NEAR((gram - Eigen::Matrix<double, 9, 9>::Identity()).cwiseAbs().maxCoeff(), 0, 1e-4);
}

TEST(SHBasis, RequiresUnitNormal) {
  EXPECT_THROW(sh_basis(Vec3(0, 0, 2)), domain_error);
  EXPECT_NO_THROW(sh_basis(Vec3(0, 0, 1 + 1e-9)));
}

TEST(SHBasis, GradientMatchesFiniteDifference) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 20; ++i) {
    const Vec3 n = random_unit(rng);
    const auto g = sh_basis_gradient(n);
    for (int b = 0; b < 9; ++b)
      for (int k = 0; k < 3; ++k) {
        Vec3 e = Vec3::Zero();
        e[k] = 1e-6;
        const double fd = (sh_basis_unchecked(n + e)[b] - sh_basis_unchecked(n - e)[b]) / 2e-6;
        EXPECT_NEAR(g[b][k], fd, 1e-8);
      }
  }
}

TEST(Shade, ProductOracleAndMask) {
  std::mt19937_64 rng(2);
  UVAlbedoMap a(4, 5);
  UVMap n(4, 5);
  a.grid = testutil::random_grid(rng, 4, 5, 3);
  for (int u = 0; u < 4; ++u)
    for (int v = 0; v < 5; ++v) {
      n.grid.set_rgb(u, v, random_unit(rng));
      const bool in = (u + v) % 3 != 0;
      a.mask.set(u, v, in);
      n.mask.set(u, v, in);
    }
  SHLighting l;
  for (auto& c : l.coeffs) c = uni(rng, -1, 1);
  const auto t = shade(a, n, l);
  for (int u = 0; u < 4; ++u)
    for (int v = 0; v < 5; ++v) {
      const Vec3 nn = n.grid.rgb(u, v);
      const double x = nn.x(), y = nn.y(), z = nn.z();
      const double pi = std::numbers::pi;
      const double h[9] = {0.5 / std::sqrt(pi),
                           std::sqrt(3 / (4 * pi)) * y,
                           std::sqrt(3 / (4 * pi)) * z,
                           std::sqrt(3 / (4 * pi)) * x,
                           std::sqrt(15 / (4 * pi)) * x * y,
                           std::sqrt(15 / (4 * pi)) * y * z,
                           std::sqrt(5 / (16 * pi)) * (3 * z * z - 1),
                           std::sqrt(15 / (4 * pi)) * x * z,
                           std::sqrt(15 / (16 * pi)) * (x * x - y * y)};
      for (int ch = 0; ch < 3; ++ch) {
        double c = 0;
        for (int b = 0; b < 9; ++b) c += l.coeffs[9 * ch + b] * h[b];
        const double expect = a.mask(u, v) ? a.grid(u, v, ch) * c : 0.0;
        EXPECT_NEAR(t.grid(u, v, ch), expect, 1e-14);
      }
    }
  EXPECT_EQ(t.mask, a.mask);
}

TEST(Shade, AmbientOnlyIsConstantScale) {
  std::mt19937_64 rng(3);
  UVAlbedoMap a(3, 3);
  UVMap n(3, 3);
  a.grid = testutil::random_grid(rng, 3, 3, 3);
  for (int u = 0; u < 3; ++u)
    for (int v = 0; v < 3; ++v) {
      n.grid.set_rgb(u, v, random_unit(rng));
      a.mask.set(u, v, true);
      n.mask.set(u, v, true);
    }
  const auto t = shade(a, n, SHLighting::ambient(2.0));
  const double c = 2.0 * 0.5 / std::sqrt(std::numbers::pi);
  for (std::size_t i = 0; i < t.grid.data.size(); ++i)
    EXPECT_NEAR(t.grid.data[i], a.grid.data[i] * c, 1e-15);
}

TEST(Shade, InputChecks) {
  UVAlbedoMap a(3, 3);
  UVMap n(3, 4);
  EXPECT_THROW(shade(a, n, {}), shape_error);
  UVMap n2(3, 3);
  n2.mask.set(0, 0, true);
  EXPECT_THROW(shade(a, n2, {}), shape_error);
  a.mask.set(0, 0, true);
  n2.grid.set_rgb(0, 0, Vec3(0, 0, 0.5));
  EXPECT_THROW(shade(a, n2, {}), domain_error);
}

TEST(Shade, BackwardMatchesFiniteDifference) {
  std::mt19937_64 rng(4);
  UVAlbedoMap a(4, 4);
  UVMap n(4, 4);
  a.grid = testutil::random_grid(rng, 4, 4, 3);
  for (int u = 0; u < 4; ++u)
    for (int v = 0; v < 4; ++v) {
      n.grid.set_rgb(u, v, random_unit(rng));
      a.mask.set(u, v, true);
      n.mask.set(u, v, true);
    }
  SHLighting l;
  for (auto& c : l.coeffs) c = uni(rng, -1, 1);
  const Grid up = testutil::random_grid(rng, 4, 4, 3, -1, 1);
  auto dotup = [&](const UVTextureMap& t) {
    double s = 0;
    for (std::size_t i = 0; i < t.grid.data.size(); ++i) s += t.grid.data[i] * up.data[i];
    return s;
  };
  const auto g = shade_backward(a, n, l, up);
  Eigen::VectorXd lx = Eigen::Map<const Eigen::VectorXd>(l.coeffs.data(), 27);
  auto fl = [&](const Eigen::VectorXd& x) {
    SHLighting ll;
    for (int i = 0; i < 27; ++i) ll.coeffs[i] = x[i];
    return dotup(shade(a, n, ll));
  };
  const Eigen::VectorXd gl = Eigen::Map<const Eigen::VectorXd>(g.light.coeffs.data(), 27);
  for (int k = 0; k < 5; ++k) {
    const auto d = testutil::random_vec(rng, 27);
    EXPECT_NEAR(gl.dot(d), testutil::directional_fd(fl, lx, d), 1e-8);
  }
  // Normal gradient along a tangent rotation of one texel.
  const Vec3 n0 = n.grid.rgb(1, 2);
  const Vec3 axis = random_unit(rng);
  auto fn = [&](const Eigen::VectorXd& x) {
    UVMap nn = n;
    nn.grid.set_rgb(1, 2, Eigen::AngleAxisd(x[0], axis) * n0);
    return dotup(shade(a, nn, l));
  };
  Eigen::VectorXd zero = Eigen::VectorXd::Zero(1), one = Eigen::VectorXd::Ones(1);
  EXPECT_NEAR(g.normals.rgb(1, 2).dot(axis.cross(n0)), testutil::directional_fd(fn, zero, one), 1e-8);
}
