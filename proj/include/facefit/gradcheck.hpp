#pragma once

// Finite-difference checks of every analytic gradient. Each check draws a
// random input and a random direction d per trial and compares g . d with
// the central difference (f(x + h d) - f(x - h d)) / 2h.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "facefit/fitting.hpp"
#include "facefit/losses.hpp"
#include "facefit/render.hpp"
#include "facefit/synthetic.hpp"

namespace facefit::gradcheck {

struct CheckResult {
  std::string name;
  int trials = 0;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool pass() const { return trials > 0 && max_rel_error <= tolerance; }
};

inline double relative_error(double analytic, double numeric) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / scale;
}

using Rng = std::mt19937_64;

inline double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline std::vector<double> random_vector(Rng& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = uniform(rng, lo, hi);
  return v;
}

// f evaluated along x + t d, as a function of t.
using Line = std::function<double(double)>;

inline double central_difference(const Line& f, double h) {
  return (f(h) - f(-h)) / (2.0 * h);
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline std::vector<double> axpy(const std::vector<double>& x, double t, const std::vector<double>& d) {
  std::vector<double> out(x);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] += t * d[i];
  return out;
}

inline Grid random_grid(Rng& rng, int r, int c, int ch, double lo, double hi) {
  Grid g(r, c, ch);
  g.data = random_vector(rng, g.data.size(), lo, hi);
  return g;
}

inline Grid with_data(Grid g, std::vector<double> d) {
  g.data = std::move(d);
  return g;
}

// Small shared fixture: the bundled model rendered at low resolution.
struct Fixture {
  FaceModel model = synthetic::make_model();
  std::shared_ptr<const RenderContext> ctx =
      make_render_context(model.topo, model.u_size, model.v_size);
  RenderOptions opts{48, 48, Vec3::Zero()};

  VertexShape random_shape(Rng& rng) const {
    Eigen::VectorXd p(model.shape.param_dim());
    for (auto& x : p) x = uniform(rng, -1.0, 1.0);
    return VertexShape(linear_decode(model.shape, p));
  }
  UVAlbedoMap random_albedo(Rng& rng) const {
    UVAlbedoMap a(ctx->u_size, ctx->v_size);
    a.grid.data = random_vector(rng, a.grid.data.size(), 0.2, 0.9);
    a.mask = ctx->texels.region;
    return a;
  }
  ProjectionParams random_pose(Rng& rng) const {
    ProjectionParams m = synthetic::frontal_pose(opts.width);
    m.pitch += uniform(rng, -0.3, 0.3);
    m.yaw += uniform(rng, -0.4, 0.4);
    m.roll += uniform(rng, -0.3, 0.3);
    m.f *= uniform(rng, 0.9, 1.1);
    m.t2d += Vec2(uniform(rng, -3, 3), uniform(rng, -3, 3));
    return m;
  }
  SHLighting random_light(Rng& rng) const {
    SHLighting l = synthetic::default_light();
    for (auto& c : l.coeffs) c += uniform(rng, -0.2, 0.2);
    return l;
  }
};

class Suite {
 public:
  Suite(unsigned seed, int trials) : rng_(seed), trials_(trials) {}

  // Runs every check; `only` restricts to names containing it.
  std::vector<CheckResult> run(const std::string& only = "") {
    std::vector<CheckResult> out;
    auto add = [&](const char* name, double tol, auto&& fn) {
      if (!only.empty() && std::string(name).find(only) == std::string::npos) return;
      CheckResult r{name, 0, 0.0, tol};
      for (int t = 0; t < trials_; ++t) {
        r.max_rel_error = std::max(r.max_rel_error, fn());
        ++r.trials;
      }
      out.push_back(r);
    };
    add("sample_uv/values", 1e-5, [&] { return sample_values(); });
    add("sample_uv/point", 1e-4, [&] { return sample_point(); });
    add("project/shape", 1e-4, [&] { return project_shape(); });
    add("project/params", 1e-4, [&] { return project_params(); });
    add("shade/albedo", 1e-5, [&] { return shade_albedo(); });
    add("shade/light", 1e-4, [&] { return shade_light(); });
    add("shade/normals", 1e-4, [&] { return shade_normals(); });
    add("render/albedo", 1e-5, [&] { return render_albedo(); });
    add("render/light", 1e-4, [&] { return render_light(); });
    add("loss/recon_image", 1e-4, [&] { return loss_recon(); });
    add("loss/perceptual", 1e-4, [&] { return loss_perceptual(); });
    add("loss/landmark_params", 1e-4, [&] { return loss_landmark(true); });
    add("loss/landmark_shape", 1e-4, [&] { return loss_landmark(false); });
    add("loss/symmetry", 1e-4, [&] { return loss_symmetry(); });
    add("loss/constancy", 1e-4, [&] { return loss_constancy(); });
    add("loss/smoothness", 1e-4, [&] { return loss_smoothness(); });
    add("loss/intermediate", 1e-4, [&] { return loss_intermediate(); });
    add("loss/composite", 1e-4, [&] { return loss_composite(); });
    return out;
  }

 private:
  static constexpr double kH = 1e-6;

  double sample_values() {
    const int r = 5 + rng_() % 6, c = 5 + rng_() % 6;
    const Grid g = random_grid(rng_, r, c, 3, -1, 1);
    const Vec2 p(uniform(rng_, 0, r - 1), uniform(rng_, 0, c - 1));
    const auto up = random_vector(rng_, 3);
    const auto sg = sample_uv_backward(g, p, up.data());
    std::vector<double> grad(g.data.size(), 0.0);
    for (int k = 0; k < 4; ++k)
      for (int ch = 0; ch < 3; ++ch)
        grad[g.index(sg.texels.row[k], sg.texels.col[k], ch)] += sg.texels.weight[k] * up[ch];
    const auto d = random_vector(rng_, g.data.size());
    const Line f = [&](double t) {
      const auto s = sample_uv(with_data(g, axpy(g.data, t, d)), p);
      return s[0] * up[0] + s[1] * up[1] + s[2] * up[2];
    };
    return relative_error(dot(grad, d), central_difference(f, kH));
  }

  double sample_point() {
    const int r = 5 + rng_() % 6, c = 5 + rng_() % 6;
    const Grid g = random_grid(rng_, r, c, 3, -1, 1);
    const Vec2 p(uniform(rng_, 0.01, r - 1.01), uniform(rng_, 0.01, c - 1.01));
    const auto up = random_vector(rng_, 3);
    const auto sg = sample_uv_backward(g, p, up.data());
    const Vec2 d(uniform(rng_, -1, 1), uniform(rng_, -1, 1));
    const Line f = [&](double t) {
      const auto s = sample_uv(g, p + t * d);
      return s[0] * up[0] + s[1] * up[1] + s[2] * up[2];
    };
    return relative_error(sg.dp.dot(d), central_difference(f, kH));
  }

  double project_shape() {
    const VertexShape s(Eigen::Map<const Eigen::VectorXd>(random_vector(rng_, 30).data(), 30));
    const ProjectionParams m = random_m();
    const auto up = random_points(10);
    const auto pb = project_backward(s, m, up);
    const auto d = random_vector(rng_, 30);
    const Line f = [&](double t) {
      VertexShape st = s;
      for (int i = 0; i < 30; ++i) st.xyz[i] += t * d[i];
      return weigh(project(st, m).coords, up);
    };
    return relative_error(dot(to_std(pb.dshape), d), central_difference(f, kH));
  }

  double project_params() {
    const VertexShape s(Eigen::Map<const Eigen::VectorXd>(random_vector(rng_, 30).data(), 30));
    const ProjectionParams m = random_m();
    const auto up = random_points(10);
    const auto pb = project_backward(s, m, up);
    const auto d = random_vector(rng_, 6);
    const Line f = [&](double t) {
      auto a = m.to_array();
      for (int i = 0; i < 6; ++i) a[i] += t * d[i];
      return weigh(project(s, ProjectionParams::from_array(a)).coords, up);
    };
    return relative_error(dot(to_std(pb.dm), d), central_difference(f, kH));
  }

  struct ShadeCase {
    UVAlbedoMap albedo;
    UVMap normals;
    SHLighting light;
    Grid upstream;
  };
  ShadeCase shade_case() {
    const int u = 4 + rng_() % 4, v = 4 + rng_() % 4;
    ShadeCase c{UVAlbedoMap(u, v), UVMap(u, v), SHLighting{}, random_grid(rng_, u, v, 3, -1, 1)};
    c.albedo.grid.data = random_vector(rng_, c.albedo.grid.data.size(), 0, 1);
    for (int i = 0; i < u; ++i)
      for (int j = 0; j < v; ++j) {
        const bool in = (rng_() % 5) != 0;
        c.albedo.mask.set(i, j, in);
        c.normals.mask.set(i, j, in);
        Vec3 n(uniform(rng_, -1, 1), uniform(rng_, -1, 1), uniform(rng_, -1, 1));
        if (n.norm() < 0.1) n = Vec3(0, 0, 1);
        c.normals.grid.set_rgb(i, j, n.normalized());
      }
    for (auto& x : c.light.coeffs) x = uniform(rng_, -1, 1);
    return c;
  }
  static double weigh_texture(const UVTextureMap& t, const Grid& up) {
    double s = 0.0;
    for (std::size_t i = 0; i < t.grid.data.size(); ++i) s += t.grid.data[i] * up.data[i];
    return s;
  }

  double shade_albedo() {
    auto c = shade_case();
    const auto g = shade_backward(c.albedo, c.normals, c.light, c.upstream);
    const auto d = random_vector(rng_, c.albedo.grid.data.size());
    const Line f = [&](double t) {
      auto a = c.albedo;
      a.grid.data = axpy(a.grid.data, t, d);
      return weigh_texture(shade(a, c.normals, c.light), c.upstream);
    };
    return relative_error(dot(g.albedo.data, d), central_difference(f, kH));
  }

  double shade_light() {
    auto c = shade_case();
    const auto g = shade_backward(c.albedo, c.normals, c.light, c.upstream);
    const auto d = random_vector(rng_, kLightCoeffs);
    const Line f = [&](double t) {
      auto l = c.light;
      for (int i = 0; i < kLightCoeffs; ++i) l.coeffs[i] += t * d[i];
      return weigh_texture(shade(c.albedo, c.normals, l), c.upstream);
    };
    const std::vector<double> gl(g.light.coeffs.begin(), g.light.coeffs.end());
    return relative_error(dot(gl, d), central_difference(f, kH));
  }

  double shade_normals() {
    auto c = shade_case();
    const auto g = shade_backward(c.albedo, c.normals, c.light, c.upstream);
    const auto d = random_vector(rng_, c.normals.grid.data.size());
    const Line f = [&](double t) {
      auto n = c.normals;
      for (int i = 0; i < n.u_size(); ++i)
        for (int j = 0; j < n.v_size(); ++j) {
          const auto k = n.grid.index(i, j, 0);
          const Vec3 p = n.grid.rgb(i, j) + t * Vec3(d[k], d[k + 1], d[k + 2]);
          n.grid.set_rgb(i, j, p.normalized());
        }
      return weigh_texture(shade(c.albedo, n, c.light), c.upstream);
    };
    return relative_error(dot(g.normals.data, d), central_difference(f, kH));
  }

  double render_albedo() {
    const auto shape = fx_.random_shape(rng_);
    const auto m = fx_.random_pose(rng_);
    const auto light = fx_.random_light(rng_);
    const auto albedo = fx_.random_albedo(rng_);
    const auto r = render(fx_.ctx, m, light, shape, albedo, fx_.opts);
    const Grid up = random_grid(rng_, fx_.opts.height, fx_.opts.width, 3, -1, 1);
    const auto g = render_backward(r.state, up);
    const auto d = random_vector(rng_, albedo.grid.data.size());
    const Line f = [&](double t) {
      auto a = albedo;
      a.grid.data = axpy(a.grid.data, t, d);
      return dot(render(fx_.ctx, m, light, shape, a, fx_.opts).image.rgb.data, up.data);
    };
    return relative_error(dot(g.albedo.data, d), central_difference(f, 1e-3));
  }

  double render_light() {
    const auto shape = fx_.random_shape(rng_);
    const auto m = fx_.random_pose(rng_);
    const auto light = fx_.random_light(rng_);
    const auto albedo = fx_.random_albedo(rng_);
    const auto r = render(fx_.ctx, m, light, shape, albedo, fx_.opts);
    const Grid up = random_grid(rng_, fx_.opts.height, fx_.opts.width, 3, -1, 1);
    const auto g = render_backward(r.state, up);
    const auto d = random_vector(rng_, kLightCoeffs);
    const Line f = [&](double t) {
      auto l = light;
      for (int i = 0; i < kLightCoeffs; ++i) l.coeffs[i] += t * d[i];
      return dot(render(fx_.ctx, m, l, shape, albedo, fx_.opts).image.rgb.data, up.data);
    };
    const std::vector<double> gl(g.light.coeffs.begin(), g.light.coeffs.end());
    return relative_error(dot(gl, d), central_difference(f, 1e-3));
  }

  double loss_recon() {
    const int h = 6, w = 7;
    RenderedImage r{random_grid(rng_, h, w, 3, 0, 1), Mask(h, w)};
    for (auto& b : r.coverage.data) b = (rng_() % 4) != 0;
    r.coverage.data[0] = 1;
    const Image target = random_grid(rng_, h, w, 3, 0, 1);
    const auto l = recon_image_loss(r, target);
    const auto d = random_vector(rng_, r.rgb.data.size());
    const Line f = [&](double t) {
      RenderedImage q = r;
      q.rgb.data = axpy(r.rgb.data, t, d);
      return recon_image_loss(q, target).value;
    };
    return relative_error(dot(l.grad.data, d), central_difference(f, kH));
  }

  double loss_perceptual() {
    const IdentityExtractor id;
    const Image a = random_grid(rng_, 5, 6, 3, 0, 1), b = random_grid(rng_, 5, 6, 3, 0, 1);
    const auto l = perceptual_loss(&id, a, b);
    const auto d = random_vector(rng_, a.data.size());
    const Line f = [&](double t) { return perceptual_loss(&id, with_data(a, axpy(a.data, t, d)), b).value; };
    return relative_error(dot(l.grad.data, d), central_difference(f, kH));
  }

  double loss_landmark(bool params) {
    const auto shape = fx_.random_shape(rng_);
    const auto m = fx_.random_pose(rng_);
    LandmarkSet gt;
    for (int k = 0; k < kNumLandmarks; ++k) {
      gt.points.emplace_back(uniform(rng_, 0, 48), uniform(rng_, 0, 48));
      gt.visible.push_back((rng_() % 6) != 0);
    }
    const auto l = landmark_loss(m, shape, fx_.ctx->topo, gt);
    if (params) {
      const auto d = random_vector(rng_, 6);
      const Line f = [&](double t) {
        auto a = m.to_array();
        for (int i = 0; i < 6; ++i) a[i] += t * d[i];
        return landmark_loss(ProjectionParams::from_array(a), shape, fx_.ctx->topo, gt).value;
      };
      return relative_error(dot(to_std(l.dm), d), central_difference(f, kH));
    }
    const auto d = random_vector(rng_, shape.xyz.size());
    const Line f = [&](double t) {
      VertexShape s = shape;
      for (Eigen::Index i = 0; i < s.xyz.size(); ++i) s.xyz[i] += t * d[i];
      return landmark_loss(m, s, fx_.ctx->topo, gt).value;
    };
    return relative_error(dot(to_std(l.dvertices), d), central_difference(f, kH));
  }

  UVMap random_uvmap(int u, int v, double lo, double hi, int holes) {
    UVMap a(u, v);
    a.grid.data = random_vector(rng_, a.grid.data.size(), lo, hi);
    for (auto& b : a.mask.data) b = (static_cast<int>(rng_() % 10) >= holes);
    return a;
  }

  double loss_symmetry() {
    const auto a = random_uvmap(6, 7, 0, 1, 2);
    const auto l = albedo_symmetry_loss(a);
    const auto d = random_vector(rng_, a.grid.data.size());
    const Line f = [&](double t) {
      auto b = a;
      b.grid.data = axpy(a.grid.data, t, d);
      return albedo_symmetry_loss(b).value;
    };
    return relative_error(dot(l.grad.data, d), central_difference(f, kH));
  }

  double loss_constancy() {
    const auto a = random_uvmap(6, 7, 0, 1, 2);
    const Grid ref = random_grid(rng_, 6, 7, 3, 0, 1);
    const double alpha = uniform(rng_, 1, 20), p = uniform(rng_, 0.3, 1.0);
    const auto l = albedo_constancy_loss(a, ref, alpha, p);
    const auto d = random_vector(rng_, a.grid.data.size());
    const Line f = [&](double t) {
      auto b = a;
      b.grid.data = axpy(a.grid.data, t, d);
      return albedo_constancy_loss(b, ref, alpha, p).value;
    };
    return relative_error(dot(l.grad.data, d), central_difference(f, kH));
  }

  double loss_smoothness() {
    const auto s = random_uvmap(7, 8, -1, 1, 1);
    const auto l = shape_smoothness_loss(s);
    const auto d = random_vector(rng_, s.grid.data.size());
    const Line f = [&](double t) {
      auto b = s;
      b.grid.data = axpy(s.grid.data, t, d);
      return shape_smoothness_loss(b).value;
    };
    return relative_error(dot(l.grad.data, d), central_difference(f, kH));
  }

  double loss_intermediate() {
    const int q = 12;
    IntermediatePrediction pred{VertexShape(to_eigen(random_vector(rng_, 3 * q))), random_m(),
                                random_uvmap(5, 6, 0, 1, 0)};
    PseudoGroundTruth gt{VertexShape(to_eigen(random_vector(rng_, 3 * q))), random_m(),
                         random_uvmap(5, 6, 0, 1, 3)};
    LossWeights w;
    w.lambda_T = uniform(rng_, 0.1, 2), w.lambda_m = uniform(rng_, 0.1, 2);
    const auto l = intermediate_loss(pred, gt, w);
    const auto ds = random_vector(rng_, 3 * q), dt = random_vector(rng_, pred.texture.grid.data.size()),
               dm = random_vector(rng_, 6);
    const Line f = [&](double t) {
      auto p = pred;
      for (int i = 0; i < 3 * q; ++i) p.shape.xyz[i] += t * ds[i];
      p.texture.grid.data = axpy(pred.texture.grid.data, t, dt);
      auto a = pred.m.to_array();
      for (int i = 0; i < 6; ++i) a[i] += t * dm[i];
      p.m = ProjectionParams::from_array(a);
      return intermediate_loss(p, gt, w).value;
    };
    const double analytic = dot(to_std(l.dshape), ds) + dot(l.dtexture.data, dt) + dot(to_std(l.dm), dm);
    return relative_error(analytic, central_difference(f, kH));
  }

  double loss_composite() {
    const int h = 6, w = 7;
    const Image rendered = random_grid(rng_, h, w, 3, 0, 1), input = random_grid(rng_, h, w, 3, 0, 1);
    const Image target = random_grid(rng_, h, w, 3, 0, 1);
    const Grid mask = random_grid(rng_, h, w, 1, 0, 1);
    Mask cov(h, w, true);
    const auto loss = [&](const Image& r) {
      return recon_image_loss({composite_with_mask(r, input, mask), cov}, target);
    };
    const auto g = composite_with_mask_backward(mask, loss(rendered).grad);
    const auto d = random_vector(rng_, rendered.data.size());
    const Line f = [&](double t) { return loss(with_data(rendered, axpy(rendered.data, t, d))).value; };
    return relative_error(dot(g.data, d), central_difference(f, kH));
  }

  ProjectionParams random_m() {
    return {uniform(rng_, 0.5, 2.0), uniform(rng_, -3, 3), uniform(rng_, -1.2, 1.2),
            uniform(rng_, -3, 3), Vec2(uniform(rng_, -5, 5), uniform(rng_, -5, 5))};
  }
  std::vector<Vec2> random_points(int n) {
    std::vector<Vec2> p;
    for (int i = 0; i < n; ++i) p.emplace_back(uniform(rng_, -1, 1), uniform(rng_, -1, 1));
    return p;
  }
  static double weigh(const std::vector<Vec2>& a, const std::vector<Vec2>& w) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i].dot(w[i]);
    return s;
  }
  template <class V>
  static std::vector<double> to_std(const V& v) {
    return std::vector<double>(v.data(), v.data() + v.size());
  }
  static Eigen::VectorXd to_eigen(const std::vector<double>& v) {
    return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
  }

  Rng rng_;
  int trials_;
  Fixture fx_;
};

inline std::vector<CheckResult> run_suite(unsigned seed = 1, int trials = 50,
                                          const std::string& only = "") {
  return Suite(seed, trials).run(only);
}

}  // namespace facefit::gradcheck
