#pragma once

// Weak-perspective camera: x_2d = f * Pr * R * x + t2d, with
// R = Rz(roll) * Ry(yaw) * Rx(pitch). Image origin is top-left, x to the
// right, y downward; depth is the camera-space z of the rotated vertex and
// smaller depth is closer to the viewer.

#include <array>
#include <cmath>
#include <vector>

#include <Eigen/Core>

#include "facefit/grid.hpp"
#include "facefit/mesh.hpp"

namespace facefit {

struct ProjectionParams {
  double f = 1.0;
  double pitch = 0.0;
  double yaw = 0.0;
  double roll = 0.0;
  Vec2 t2d = Vec2::Zero();

  // Serialization order: f, pitch, yaw, roll, tx, ty.
  std::array<double, 6> to_array() const {
    return {f, pitch, yaw, roll, t2d.x(), t2d.y()};
  }
  static ProjectionParams from_array(const std::array<double, 6>& a) {
    return {a[0], a[1], a[2], a[3], Vec2(a[4], a[5])};
  }
  friend bool operator==(const ProjectionParams& a, const ProjectionParams& b) {
    return a.to_array() == b.to_array();
  }
};

inline void validate(const ProjectionParams& m) {
  if (!(m.f > 0.0) || !std::isfinite(m.f))
    throw domain_error("projection scale f must be positive and finite");
  if (!std::isfinite(m.pitch) || !std::isfinite(m.yaw) ||
      !std::isfinite(m.roll) || !m.t2d.allFinite())
    throw domain_error("projection parameters must be finite");
}

inline Mat3 rot_x(double a) {
  const double c = std::cos(a), s = std::sin(a);
  Mat3 r;
  r << 1, 0, 0, 0, c, -s, 0, s, c;
  return r;
}
inline Mat3 rot_y(double a) {
  const double c = std::cos(a), s = std::sin(a);
  Mat3 r;
  r << c, 0, s, 0, 1, 0, -s, 0, c;
  return r;
}
inline Mat3 rot_z(double a) {
  const double c = std::cos(a), s = std::sin(a);
  Mat3 r;
  r << c, -s, 0, s, c, 0, 0, 0, 1;
  return r;
}

// Derivatives of the elementary rotations with respect to their angle.
inline Mat3 drot_x(double a) {
  const double c = std::cos(a), s = std::sin(a);
  Mat3 r;
  r << 0, 0, 0, 0, -s, -c, 0, c, -s;
  return r;
}
inline Mat3 drot_y(double a) {
  const double c = std::cos(a), s = std::sin(a);
  Mat3 r;
  r << -s, 0, c, 0, 0, 0, -c, 0, -s;
  return r;
}
inline Mat3 drot_z(double a) {
  const double c = std::cos(a), s = std::sin(a);
  Mat3 r;
  r << -s, -c, 0, c, -s, 0, 0, 0, 0;
  return r;
}

inline Mat3 rotation_from_angles(double pitch, double yaw, double roll) {
  return rot_z(roll) * rot_y(yaw) * rot_x(pitch);
}

inline Mat3 rotation(const ProjectionParams& m) {
  return rotation_from_angles(m.pitch, m.yaw, m.roll);
}

// Chain rule from dLoss/dR to (pitch, yaw, roll).
inline Vec3 rotation_backward(double pitch, double yaw, double roll,
                              const Mat3& dR) {
  const Mat3 rx = rot_x(pitch), ry = rot_y(yaw), rz = rot_z(roll);
  const Mat3 d_pitch = rz * ry * drot_x(pitch);
  const Mat3 d_yaw = rz * drot_y(yaw) * rx;
  const Mat3 d_roll = drot_z(roll) * ry * rx;
  return {dR.cwiseProduct(d_pitch).sum(), dR.cwiseProduct(d_yaw).sum(),
          dR.cwiseProduct(d_roll).sum()};
}

struct ProjectedVertices {
  std::vector<Vec2> coords;
  std::vector<double> depth;
};

inline ProjectedVertices project(const VertexShape& s, const ProjectionParams& m) {
  validate(m);
  const Mat3 r = rotation(m);
  ProjectedVertices out;
  out.coords.resize(s.size());
  out.depth.resize(s.size());
  for (int i = 0; i < s.size(); ++i) {
    const Vec3 v = r * s.vertex(i);
    out.coords[i] = m.f * v.head<2>() + m.t2d;
    out.depth[i] = v.z();
  }
  return out;
}

// Gradient of a projection parameter vector, in to_array() order.
using ProjectionGradient = Eigen::Matrix<double, 6, 1>;

struct ProjectBackward {
  Eigen::VectorXd dshape;  // 3Q
  ProjectionGradient dm = ProjectionGradient::Zero();
};

// Vector-Jacobian product of project() for upstream gradients on the 2D
// coordinates. `dR_extra` lets callers fold in rotation gradients that
// arrive through other paths (e.g. rotated normals).
inline ProjectBackward project_backward(const VertexShape& s,
                                        const ProjectionParams& m,
                                        const std::vector<Vec2>& upstream,
                                        const Mat3& dR_extra = Mat3::Zero()) {
  if (static_cast<int>(upstream.size()) != s.size())
    throw shape_error("project_backward: upstream size mismatch");
  const Mat3 r = rotation(m);
  ProjectBackward out;
  out.dshape = Eigen::VectorXd::Zero(s.xyz.size());
  Mat3 dR = dR_extra;
  double df = 0.0;
  Vec2 dt = Vec2::Zero();
  for (int i = 0; i < s.size(); ++i) {
    const Vec2& g = upstream[i];
    if (g.x() == 0.0 && g.y() == 0.0) continue;
    const Vec3 x = s.vertex(i);
    const Vec3 v = r * x;
    dt += g;
    df += g.dot(v.head<2>());
    const Vec3 dv(m.f * g.x(), m.f * g.y(), 0.0);
    dR += dv * x.transpose();
    out.dshape.segment<3>(3 * i) += r.transpose() * dv;
  }
  const Vec3 dang = rotation_backward(m.pitch, m.yaw, m.roll, dR);
  out.dm << df, dang[0], dang[1], dang[2], dt.x(), dt.y();
  return out;
}

}  // namespace facefit
