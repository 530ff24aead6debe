#pragma once

// A small procedurally generated face proxy (504 vertices, 8 shape and 8
// albedo components) so that every tool and test runs without licensed
// morphable-model data.
//
// Model frame: the face looks down +z with y up. The camera looks down +z
// as well (smaller depth is closer), so the canonical frontal pose has
// pitch = pi, which also turns model-up into image-up.

#include <cmath>
#include <numbers>
#include <vector>

#include <Eigen/Core>
#include <Eigen/QR>

#include "facefit/camera.hpp"
#include "facefit/lighting.hpp"
#include "facefit/model.hpp"

namespace facefit::synthetic {

inline constexpr int kThetaSteps = 21;
inline constexpr int kHeightSteps = 24;
inline constexpr double kThetaMax = 75.0 * std::numbers::pi / 180.0;
inline constexpr int kUSize = 48;
inline constexpr int kVSize = 56;
inline constexpr int kComponents = 8;

inline double grid_theta(int j) {
  return -kThetaMax + 2.0 * kThetaMax * j / (kThetaSteps - 1);
}
inline double grid_height(int i) { return -1.0 + 2.0 * i / (kHeightSteps - 1); }
inline int vertex_id(int i, int j) { return i * kThetaSteps + j; }

inline double mean_radius(double theta, double y) {
  const double nose = 0.16 * std::exp(-(theta * theta / 0.03 + (y + 0.02) * (y + 0.02) / 0.08));
  const double chin = 0.05 * std::exp(-(theta * theta / 0.2 + (y + 0.75) * (y + 0.75) / 0.05));
  return 1.0 - 0.12 * y * y + nose + chin;
}

inline UnwrapConstants default_unwrap() {
  constexpr double margin = 2.0;
  UnwrapConstants c;
  c.alpha1 = (kVSize - 1 - 2 * margin) / (2.0 * kThetaMax);
  c.beta1 = (kVSize - 1) / 2.0;
  c.alpha2 = -(kUSize - 1 - 2 * margin) / 2.0;  // forehead at row 0
  c.beta2 = (kUSize - 1) / 2.0;
  return c;
}

namespace detail {

inline std::vector<Triangle> grid_triangles() {
  std::vector<Triangle> tris;
  const int half = (kThetaSteps - 1) / 2;
  for (int i = 0; i + 1 < kHeightSteps; ++i)
    for (int j = 0; j + 1 < kThetaSteps; ++j) {
      const int a = vertex_id(i, j), b = vertex_id(i, j + 1);
      const int c = vertex_id(i + 1, j + 1), d = vertex_id(i + 1, j);
      if (j < half) {
        tris.push_back({a, b, d});
        tris.push_back({b, c, d});
      } else {
        tris.push_back({a, b, c});
        tris.push_back({a, c, d});
      }
    }
  return tris;
}

// 68 landmark sites in (theta, y), 300-W ordering.
inline std::vector<Vec2> landmark_sites() {
  std::vector<Vec2> s;
  for (int k = 0; k < 17; ++k) {  // jaw
    const double t = -0.95 + 1.9 * k / 16.0;
    s.emplace_back(t, -0.15 - 0.6 * std::cos(t * std::numbers::pi / 2.2));
  }
  for (int k = 0; k < 5; ++k) s.emplace_back(-0.75 + 0.13 * k, 0.5);  // brows
  for (int k = 0; k < 5; ++k) s.emplace_back(0.23 + 0.13 * k, 0.5);
  for (int k = 0; k < 4; ++k) s.emplace_back(0.0, 0.3 - 0.1 * k);  // nose bridge
  for (int k = 0; k < 5; ++k) s.emplace_back(-0.26 + 0.13 * k, -0.12);
  auto eye = [&](double cx, double sign) {
    s.emplace_back(cx - sign * 0.26, 0.28);
    s.emplace_back(cx - sign * 0.13, 0.36);
    s.emplace_back(cx + sign * 0.0, 0.36);
    s.emplace_back(cx + sign * 0.13, 0.28);
    s.emplace_back(cx + sign * 0.0, 0.2);
    s.emplace_back(cx - sign * 0.13, 0.2);
  };
  eye(-0.39, 1.0);   // 36..41, 36 = outer corner
  eye(0.39, -1.0);   // 42..47, 45 = outer corner
  for (int k = 0; k < 12; ++k) {  // outer lip
    const double a = std::numbers::pi - 2.0 * std::numbers::pi * k / 12.0;
    s.emplace_back(0.4 * std::cos(a), -0.45 + 0.15 * std::sin(a));
  }
  for (int k = 0; k < 8; ++k) {  // inner lip
    const double a = std::numbers::pi - 2.0 * std::numbers::pi * k / 8.0;
    s.emplace_back(0.2 * std::cos(a), -0.45 + 0.06 * std::sin(a));
  }
  return s;
}

inline void orthonormalize_scaled(Eigen::MatrixXd& bases, double scale0, double decay) {
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(bases);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(bases.rows(), bases.cols());
  // Fix signs so each column keeps its original orientation.
  for (int k = 0; k < bases.cols(); ++k) {
    if (q.col(k).dot(bases.col(k)) < 0.0) q.col(k) *= -1.0;
    q.col(k) *= scale0 * std::pow(decay, k);
  }
  bases = q;
}

}  // namespace detail

inline FaceModel make_model() {
  FaceModel model;
  model.u_size = kUSize;
  model.v_size = kVSize;
  model.unwrap = default_unwrap();
  auto& topo = model.topo;
  const int q = kThetaSteps * kHeightSteps;
  topo.num_vertices = q;
  topo.triangles = detail::grid_triangles();

  Eigen::VectorXd mean(3 * q);
  std::vector<double> thetas(q), heights(q);
  for (int i = 0; i < kHeightSteps; ++i)
    for (int j = 0; j < kThetaSteps; ++j) {
      const int id = vertex_id(i, j);
      const double t = grid_theta(j), y = grid_height(i);
      thetas[id] = t;
      heights[id] = y;
      const double r = mean_radius(t, y);
      mean.segment<3>(3 * id) = Vec3(r * std::sin(t), y, r * std::cos(t));
    }
  topo.uv_coords.resize(q);
  for (int id = 0; id < q; ++id)
    topo.uv_coords[id] = cylindrical_unwrap(mean.segment<3>(3 * id), model.unwrap);

  // Greedy nearest unused grid vertex per landmark site.
  std::vector<bool> used(q, false);
  for (const Vec2& site : detail::landmark_sites()) {
    int best = -1;
    double best_d = 1e300;
    for (int id = 0; id < q; ++id) {
      if (used[id]) continue;
      const double d = std::hypot(thetas[id] - site.x(), heights[id] - site.y());
      if (d < best_d) best_d = d, best = id;
    }
    used[best] = true;
    topo.landmark_indices.push_back(best);
  }
  topo.eye_corners = {topo.landmark_indices[36], topo.landmark_indices[45]};

  // Shape components: smooth radial, vertical and lateral displacement fields.
  Eigen::MatrixXd g(3 * q, kComponents);
  for (int id = 0; id < q; ++id) {
    const double t = thetas[id], y = heights[id];
    const Vec3 radial(std::sin(t), 0.0, std::cos(t));
    const Vec3 up(0.0, 1.0, 0.0);
    const Vec3 side(1.0, 0.0, 0.0);
    const double nose = std::exp(-(t * t / 0.03 + y * y / 0.08));
    const Vec3 fields[kComponents] = {
        radial * (t * t - 0.5),
        up * y,
        radial * nose,
        side * t,
        radial * y,
        radial * std::cos(std::numbers::pi * y),
        radial * t,
        radial * (y * y * t),
    };
    for (int k = 0; k < kComponents; ++k) g.block<3, 1>(3 * id, k) = fields[k];
  }
  detail::orthonormalize_scaled(g, 0.06 * std::sqrt(static_cast<double>(q)), 0.85);
  model.shape = {mean, g};

  // Albedo: smooth skin tone with darker brows/eyes and redder lips.
  Eigen::VectorXd amean(3 * q);
  Eigen::MatrixXd r(3 * q, kComponents);
  for (int id = 0; id < q; ++id) {
    const double t = thetas[id], y = heights[id];
    const double lips = std::exp(-(t * t / 0.08 + (y + 0.45) * (y + 0.45) / 0.01));
    const double brows = std::exp(-((std::abs(t) - 0.45) * (std::abs(t) - 0.45) / 0.04 +
                                    (y - 0.5) * (y - 0.5) / 0.006));
    const double shade = 0.05 * std::cos(1.5 * t);
    amean.segment<3>(3 * id) = Vec3(0.72 + shade + 0.12 * lips - 0.3 * brows,
                                    0.55 + shade - 0.12 * lips - 0.3 * brows,
                                    0.45 + shade - 0.05 * lips - 0.25 * brows);
    const double fields[kComponents] = {1.0, y, t, t * t, y * y, t * y, std::cos(2.0 * y), std::sin(t)};
    const Vec3 tints[kComponents] = {{1, 0.8, 0.7}, {1, 1, 1}, {0.6, 0.8, 1},
                                     {1, -0.5, 0},  {0, 1, -1}, {1, 0, -1},
                                     {0.3, 0.3, 1}, {-1, 1, 0.2}};
    for (int k = 0; k < kComponents; ++k) r.block<3, 1>(3 * id, k) = tints[k] * fields[k];
  }
  detail::orthonormalize_scaled(r, 0.04 * std::sqrt(static_cast<double>(q)), 0.85);
  model.albedo = {amean, r};
  model.check();
  return model;
}

// Frontal pose centered in a square image of the given size.
inline ProjectionParams frontal_pose(int image_size = 128) {
  ProjectionParams m;
  m.f = 0.35 * image_size;
  m.pitch = std::numbers::pi;
  m.t2d = Vec2(image_size / 2.0, image_size / 2.0);
  return m;
}

// Soft frontal key light plus ambient, slightly warm.
inline SHLighting default_light() {
  SHLighting l;
  const double tint[3] = {1.0, 0.95, 0.9};
  for (int ch = 0; ch < 3; ++ch) {
    l.at(ch, 0) = 2.4 * tint[ch];
    l.at(ch, 1) = 0.1 * tint[ch];
    l.at(ch, 2) = -0.6 * tint[ch];
    l.at(ch, 3) = 0.15 * tint[ch];
    l.at(ch, 6) = -0.05 * tint[ch];
  }
  return l;
}

}  // namespace facefit::synthetic
