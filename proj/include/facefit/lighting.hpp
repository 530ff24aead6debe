#pragma once

// Lambertian shading with three bands of real spherical harmonics.
//
// Basis order and constants (unit normal n = (x, y, z)):
//   H0 = 1/(2 sqrt(pi))
//   H1 = sqrt(3/(4 pi)) y     H2 = sqrt(3/(4 pi)) z     H3 = sqrt(3/(4 pi)) x
//   H4 = sqrt(15/(4 pi)) xy   H5 = sqrt(15/(4 pi)) yz
//   H6 = sqrt(5/(16 pi)) (3z^2 - 1)
//   H7 = sqrt(15/(4 pi)) xz   H8 = sqrt(15/(16 pi)) (x^2 - y^2)

#include <array>
#include <cmath>
#include <numbers>
#include <string>

#include "facefit/grid.hpp"

namespace facefit {

inline constexpr int kShBands = 3;
inline constexpr int kShCoeffs = kShBands * kShBands;
inline constexpr int kLightCoeffs = 3 * kShCoeffs;

namespace sh {
inline const double c0 = 0.5 / std::sqrt(std::numbers::pi);
inline const double c1 = std::sqrt(3.0 / (4.0 * std::numbers::pi));
inline const double c2 = std::sqrt(15.0 / (4.0 * std::numbers::pi));
inline const double c3 = std::sqrt(5.0 / (16.0 * std::numbers::pi));
inline const double c4 = std::sqrt(15.0 / (16.0 * std::numbers::pi));
}  // namespace sh

// 27 coefficients, channel-major then band-minor: coeffs[9 * ch + b].
struct SHLighting {
  std::array<double, kLightCoeffs> coeffs{};

  double& at(int ch, int b) { return coeffs[kShCoeffs * ch + b]; }
  double at(int ch, int b) const { return coeffs[kShCoeffs * ch + b]; }

  static SHLighting ambient(double c) {
    SHLighting l;
    for (int ch = 0; ch < 3; ++ch) l.at(ch, 0) = c;
    return l;
  }
  friend bool operator==(const SHLighting&, const SHLighting&) = default;
};

using SHBasis = std::array<double, kShCoeffs>;

inline void require_unit(const Vec3& n) {
  if (!(std::abs(n.norm() - 1.0) <= 1e-6))
    throw domain_error("SH basis needs a unit normal (|n| = " +
                       std::to_string(n.norm()) + ")");
}

// Polynomial evaluation without the unit-length check.
inline SHBasis sh_basis_unchecked(const Vec3& n) {
  const double x = n.x(), y = n.y(), z = n.z();
  return {sh::c0,          sh::c1 * y,     sh::c1 * z,
          sh::c1 * x,      sh::c2 * x * y, sh::c2 * y * z,
          sh::c3 * (3.0 * z * z - 1.0), sh::c2 * x * z,
          sh::c4 * (x * x - y * y)};
}

inline SHBasis sh_basis(const Vec3& n) {
  require_unit(n);
  return sh_basis_unchecked(n);
}

// Row b holds the gradient of H_b with respect to (x, y, z).
inline std::array<Vec3, kShCoeffs> sh_basis_gradient(const Vec3& n) {
  const double x = n.x(), y = n.y(), z = n.z();
  return {Vec3(0, 0, 0),
          Vec3(0, sh::c1, 0),
          Vec3(0, 0, sh::c1),
          Vec3(sh::c1, 0, 0),
          Vec3(sh::c2 * y, sh::c2 * x, 0),
          Vec3(0, sh::c2 * z, sh::c2 * y),
          Vec3(0, 0, 6.0 * sh::c3 * z),
          Vec3(sh::c2 * z, 0, sh::c2 * x),
          Vec3(2.0 * sh::c4 * x, -2.0 * sh::c4 * y, 0)};
}

inline double shading_value(const SHBasis& h, const SHLighting& light, int ch) {
  double s = 0.0;
  for (int b = 0; b < kShCoeffs; ++b) s += light.at(ch, b) * h[b];
  return s;
}

struct ShadeResult {
  UVTextureMap texture;  // A ⊙ C
  UVShadingMap shading;  // C
};

inline void check_shade_inputs(const UVAlbedoMap& albedo, const UVMap& normals) {
  require_same_shape(albedo.grid, normals.grid, "shade");
  if (albedo.grid.channels != 3) throw shape_error("shade: albedo needs 3 channels");
  if (!(albedo.mask == normals.mask)) throw shape_error("shade: mask mismatch");
}

// Texture T = A ⊙ sum_b L_b H_b(N) on masked-in texels; zero elsewhere.
// Shading may be negative; nothing is clamped here.
inline ShadeResult shade_full(const UVAlbedoMap& albedo, const UVMap& normals,
                              const SHLighting& light) {
  check_shade_inputs(albedo, normals);
  ShadeResult out;
  out.texture = UVTextureMap(albedo.u_size(), albedo.v_size());
  out.shading = UVShadingMap(albedo.u_size(), albedo.v_size());
  out.texture.mask = albedo.mask;
  out.shading.mask = albedo.mask;
  for (int u = 0; u < albedo.u_size(); ++u)
    for (int v = 0; v < albedo.v_size(); ++v) {
      if (!albedo.mask(u, v)) continue;
      const SHBasis h = sh_basis(normals.grid.rgb(u, v));
      for (int ch = 0; ch < 3; ++ch) {
        const double c = shading_value(h, light, ch);
        out.shading.grid(u, v, ch) = c;
        out.texture.grid(u, v, ch) = albedo.grid(u, v, ch) * c;
      }
    }
  return out;
}

inline UVTextureMap shade(const UVAlbedoMap& albedo, const UVMap& normals,
                          const SHLighting& light) {
  return shade_full(albedo, normals, light).texture;
}

struct ShadeGradient {
  Grid albedo;
  SHLighting light;  // gradient, same layout as the coefficients
  Grid normals;      // tangent to the unit sphere at each normal
};

inline ShadeGradient shade_backward(const UVAlbedoMap& albedo,
                                    const UVMap& normals,
                                    const SHLighting& light,
                                    const Grid& upstream) {
  check_shade_inputs(albedo, normals);
  require_same_shape(albedo.grid, upstream, "shade_backward");
  ShadeGradient g;
  g.albedo = Grid(albedo.u_size(), albedo.v_size(), 3);
  g.normals = Grid(albedo.u_size(), albedo.v_size(), 3);
  for (int u = 0; u < albedo.u_size(); ++u)
    for (int v = 0; v < albedo.v_size(); ++v) {
      if (!albedo.mask(u, v)) continue;
      const Vec3 n = normals.grid.rgb(u, v);
      const SHBasis h = sh_basis(n);
      const auto dh = sh_basis_gradient(n);
      Vec3 dn = Vec3::Zero();
      for (int ch = 0; ch < 3; ++ch) {
        const double up = upstream(u, v, ch);
        if (up == 0.0) continue;
        const double a = albedo.grid(u, v, ch);
        g.albedo(u, v, ch) = up * shading_value(h, light, ch);
        const double dc = up * a;
        for (int b = 0; b < kShCoeffs; ++b) {
          g.light.at(ch, b) += dc * h[b];
          dn += dc * light.at(ch, b) * dh[b];
        }
      }
      g.normals.set_rgb(u, v, dn - n * n.dot(dn));
    }
  return g;
}

}  // namespace facefit
