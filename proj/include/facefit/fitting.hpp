#pragma once

// Analysis-by-synthesis fitting by gradient descent with backtracking:
// texture (albedo + lighting) fits, shape fits with a vertex + normal
// criterion, full image fits through the rendering layer, NME evaluation
// and relighting.

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "facefit/camera.hpp"
#include "facefit/lighting.hpp"
#include "facefit/losses.hpp"
#include "facefit/mesh.hpp"
#include "facefit/model.hpp"
#include "facefit/render.hpp"

namespace facefit {

struct fit_error : std::runtime_error {
  fit_error(const std::string& what, std::vector<double> trace_)
      : std::runtime_error(what), trace(std::move(trace_)) {}
  std::vector<double> trace;
};

struct DescentOptions {
  double step = 1.0;          // initial step in scaled coordinates
  double max_step = 1e6;
  double growth = 2.0;        // step multiplier after an accepted step
  int max_halvings = 20;      // backtracking factor is 0.5
  int max_iterations = 1000;
  double abs_tolerance = 0.0;   // stop once the objective is at or below
  double rel_tolerance = 1e-12; // relative decrease counted as no progress
  int patience = 10;            // consecutive no-progress iterations
};

struct DescentResult {
  Eigen::VectorXd x;
  std::vector<double> trace;  // objective at start and after each accepted step
  std::string termination;    // converged | stalled | budget
  int iterations = 0;
};

using Objective = std::function<double(const Eigen::VectorXd& x, Eigen::VectorXd* grad)>;

// `metric` maps a gradient to a (positive definite) descent direction.
// It receives the current point and gradient.
using Metric = std::function<Eigen::VectorXd(const Eigen::VectorXd& x, const Eigen::VectorXd& g)>;

// Gradient descent x <- x - s * metric(g) with backtracking on s. A step is
// accepted only if it strictly lowers the objective, so the trace is
// non-increasing.
inline DescentResult gradient_descent(const Objective& objective, Eigen::VectorXd x,
                                      const Metric& metric, const DescentOptions& opt) {
  if (!(opt.step > 0.0) || opt.max_iterations < 0)
    throw domain_error("descent needs a positive step and a non-negative budget");
  DescentResult out;
  Eigen::VectorXd g(x.size());
  double f = objective(x, &g);
  if (!std::isfinite(f)) throw fit_error("objective is not finite at the initial point", {f});
  out.trace.push_back(f);
  double step = opt.step;
  int quiet = 0;
  out.termination = "budget";
  for (int it = 0; it < opt.max_iterations; ++it) {
    if (f <= opt.abs_tolerance) {
      out.termination = "converged";
      break;
    }
    const Eigen::VectorXd dir = metric(x, g);
    if (dir.squaredNorm() == 0.0) {
      out.termination = "converged";
      break;
    }
    bool accepted = false;
    Eigen::VectorXd gn(x.size());
    for (int h = 0; h <= opt.max_halvings; ++h) {
      const Eigen::VectorXd xn = x - step * dir;
      const double fn = objective(xn, &gn);
      if (std::isfinite(fn) && fn < f) {
        const double decrease = f - fn;
        x = xn;
        g = gn;
        f = fn;
        accepted = true;
        quiet = decrease <= opt.rel_tolerance * std::abs(f) ? quiet + 1 : 0;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      out.termination = "stalled";
      break;
    }
    out.trace.push_back(f);
    ++out.iterations;
    step = std::min(step * opt.growth, opt.max_step);
    if (quiet >= opt.patience) {
      out.termination = "converged";
      break;
    }
  }
  if (out.termination == "budget" && f <= opt.abs_tolerance) out.termination = "converged";
  out.x = std::move(x);
  return out;
}

// Diagonal scaling: x <- x - s * scale^2 * g.
inline DescentResult gradient_descent(const Objective& objective, Eigen::VectorXd x,
                                      const Eigen::VectorXd& scale, const DescentOptions& opt) {
  const Eigen::VectorXd scale2 = scale.array().square().matrix();
  return gradient_descent(objective, std::move(x),
                          [scale2](const Eigen::VectorXd&, const Eigen::VectorXd& g) -> Eigen::VectorXd {
                            return scale2.cwiseProduct(g);
                          },
                          opt);
}

// Constant full metric: x <- x - s * M * g.
inline DescentResult gradient_descent(const Objective& objective, Eigen::VectorXd x,
                                      const Eigen::MatrixXd& metric, const DescentOptions& opt) {
  return gradient_descent(objective, std::move(x),
                          [&metric](const Eigen::VectorXd&, const Eigen::VectorXd& g) -> Eigen::VectorXd {
                            return metric * g;
                          },
                          opt);
}

// --------------------------------------------------------------------------
// Normalized mean error

enum class NmeNormalizer { inter_ocular, bounding_box };

inline double nme(const std::vector<Vec3>& pred, const std::vector<Vec3>& gt,
                  double normalizer) {
  if (pred.size() != gt.size() || pred.empty())
    throw shape_error("nme: point sets must be non-empty and of equal size");
  if (!(normalizer > 0.0)) throw domain_error("nme: normalizer must be positive");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) acc += (pred[i] - gt[i]).norm();
  return acc / static_cast<double>(pred.size()) / normalizer;
}

inline double nme(const std::vector<Vec2>& pred, const std::vector<Vec2>& gt,
                  double normalizer) {
  std::vector<Vec3> a, b;
  for (const auto& p : pred) a.emplace_back(p.x(), p.y(), 0.0);
  for (const auto& p : gt) b.emplace_back(p.x(), p.y(), 0.0);
  return nme(a, b, normalizer);
}

// Distance between the two outer eye corners of a shape.
inline double inter_ocular_distance(const VertexShape& s, const Topology& topo) {
  return (s.vertex(topo.eye_corners[0]) - s.vertex(topo.eye_corners[1])).norm();
}

// sqrt(width * height) of the x/y bounding box.
template <class Point>
double bounding_box_size(const std::vector<Point>& pts) {
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (const auto& p : pts) {
    x0 = std::min(x0, p.x()), x1 = std::max(x1, p.x());
    y0 = std::min(y0, p.y()), y1 = std::max(y1, p.y());
  }
  return std::sqrt((x1 - x0) * (y1 - y0));
}

inline double shape_nme(const VertexShape& pred, const VertexShape& gt, const Topology& topo,
                        NmeNormalizer kind = NmeNormalizer::inter_ocular) {
  const auto a = to_points(pred), b = to_points(gt);
  const double norm =
      kind == NmeNormalizer::inter_ocular ? inter_ocular_distance(gt, topo) : bounding_box_size(b);
  return nme(a, b, norm);
}

// --------------------------------------------------------------------------
// Texture fit: albedo parameters and lighting against a UV texture

struct TextureFitConfig {
  DescentOptions descent;
  double smoothing = 1e-4;  // Charbonnier epsilon of the descent objective
  double light_scale = 1.0;
  double albedo_scale = 1.0;
  double ridge = 1e-6;     // relative damping of the preconditioner
  int metric_refresh = 10;
};

struct TextureFitResult {
  Eigen::VectorXd f_A;
  SHLighting light;
  double residual = 0.0;  // mean |T - target| over masked texel channels
  std::vector<double> trace;
  std::string termination;
};

inline std::size_t texel_count(const Mask& m) { return m.count(); }

// Fits f_A and L so that shade(decode(f_A), normals, L) matches `target` on
// its masked texels. The decoder output is the UV albedo grid data.
// Descent runs on a Charbonnier-smoothed L1; the reported residual is the
// exact mean absolute error.
inline TextureFitResult fit_albedo_lighting(const UVTextureMap& target, const UVMap& normals,
                                            const Decoder& albedo_decoder,
                                            const TextureFitConfig& cfg,
                                            Eigen::VectorXd f_A0, SHLighting light0) {
  const std::size_t n = texel_count(target.mask);
  if (n == 0) throw domain_error("fit_albedo_lighting: target mask is empty");
  require_same_shape(target.grid, normals.grid, "fit_albedo_lighting");
  if (albedo_decoder.output_dim() != static_cast<int>(target.grid.data.size()))
    throw shape_error("fit_albedo_lighting: decoder output does not match the UV grid");
  const int la = albedo_decoder.param_dim();
  if (f_A0.size() != la) throw shape_error("fit_albedo_lighting: bad initial f_A size");

  std::vector<std::pair<int, int>> texels;
  std::vector<SHBasis> basis;
  for (int u = 0; u < target.u_size(); ++u)
    for (int v = 0; v < target.v_size(); ++v)
      if (target.mask(u, v)) {
        texels.emplace_back(u, v);
        basis.push_back(sh_basis(normals.grid.rgb(u, v)));
      }
  const double inv = 1.0 / (3.0 * static_cast<double>(n));
  const double eps = cfg.smoothing;
  const auto& grid = target.grid;

  auto residuals = [&](const Eigen::VectorXd& x, auto&& visit) {
    const Eigen::VectorXd a = albedo_decoder.decode(x.head(la));
    for (std::size_t t = 0; t < texels.size(); ++t) {
      const auto [u, v] = texels[t];
      for (int ch = 0; ch < 3; ++ch) {
        double c = 0.0;
        for (int b = 0; b < kShCoeffs; ++b) c += x[la + kShCoeffs * ch + b] * basis[t][b];
        const auto idx = grid.index(u, v, ch);
        visit(t, ch, idx, a[idx], c, a[idx] * c - grid.data[idx]);
      }
    }
  };

  Objective obj = [&](const Eigen::VectorXd& x, Eigen::VectorXd* grad) {
    double f = 0.0;
    Eigen::VectorXd da = Eigen::VectorXd::Zero(albedo_decoder.output_dim());
    Eigen::VectorXd dl = Eigen::VectorXd::Zero(kLightCoeffs);
    residuals(x, [&](std::size_t t, int ch, std::size_t idx, double a, double c, double r) {
      const double s = std::sqrt(r * r + eps * eps);
      f += s - eps;
      const double g = inv * r / s;
      da[idx] += g * c;
      for (int b = 0; b < kShCoeffs; ++b) dl[kShCoeffs * ch + b] += g * a * basis[t][b];
    });
    if (grad) {
      grad->resize(x.size());
      grad->head(la) = albedo_decoder.backward(x.head(la), da);
      grad->tail(kLightCoeffs) = dl;
    }
    return f * inv;
  };

  Eigen::VectorXd x(la + kLightCoeffs);
  x.head(la) = f_A0;
  for (int i = 0; i < kLightCoeffs; ++i) x[la + i] = light0.coeffs[i];
  // Preconditioner (J^T J / n + ridge)^-1 from the residual Jacobian,
  // refreshed every `metric_refresh` iterations; block scales multiply
  // their coordinates.
  Eigen::VectorXd block(x.size());
  block.head(la).setConstant(cfg.albedo_scale);
  block.tail(kLightCoeffs).setConstant(cfg.light_scale);
  auto metric_at = [&](const Eigen::VectorXd& at) {
    const Eigen::Index nr = static_cast<Eigen::Index>(3 * texels.size());
    Eigen::MatrixXd jac(nr, at.size());
    const Eigen::VectorXd fa = at.head(la);
    const Eigen::VectorXd a0 = albedo_decoder.decode(fa);
    std::vector<std::array<double, 3>> c0(texels.size());
    residuals(at, [&](std::size_t t, int ch, std::size_t, double, double c, double) { c0[t][ch] = c; });
    const double h = 1e-6;
    for (int k = 0; k < la; ++k) {
      Eigen::VectorXd fp = fa, fm = fa;
      fp[k] += h, fm[k] -= h;
      const Eigen::VectorXd col = (albedo_decoder.decode(fp) - albedo_decoder.decode(fm)) / (2.0 * h);
      for (std::size_t t = 0; t < texels.size(); ++t)
        for (int ch = 0; ch < 3; ++ch)
          jac(3 * t + ch, k) = col[grid.index(texels[t].first, texels[t].second, ch)] * c0[t][ch];
    }
    for (std::size_t t = 0; t < texels.size(); ++t)
      for (int ch = 0; ch < 3; ++ch)
        for (int k = 0; k < kLightCoeffs; ++k)
          jac(3 * t + ch, la + k) =
              k / kShCoeffs == ch
                  ? a0[grid.index(texels[t].first, texels[t].second, ch)] * basis[t][k % kShCoeffs]
                  : 0.0;
    Eigen::MatrixXd jtj = jac.transpose() * jac * inv;
    jtj.diagonal().array() += cfg.ridge * std::max(jtj.diagonal().maxCoeff(), 1e-300);
    const Eigen::MatrixXd m =
        jtj.ldlt().solve(Eigen::MatrixXd::Identity(at.size(), at.size()));
    return Eigen::MatrixXd(block.asDiagonal() * m * block.asDiagonal());
  };
  Eigen::MatrixXd current;
  int calls = 0;
  const Metric metric = [&](const Eigen::VectorXd& at, const Eigen::VectorXd& g) -> Eigen::VectorXd {
    if (calls++ % std::max(cfg.metric_refresh, 1) == 0) current = metric_at(at);
    return current * g;
  };

  auto res = gradient_descent(obj, x, metric, cfg.descent);
  TextureFitResult out;
  out.f_A = res.x.head(la);
  for (int i = 0; i < kLightCoeffs; ++i) out.light.coeffs[i] = res.x[la + i];
  double l1 = 0.0;
  residuals(res.x, [&](std::size_t, int, std::size_t, double, double, double r) { l1 += std::abs(r); });
  out.residual = l1 * inv;
  out.trace = std::move(res.trace);
  out.termination = res.termination;
  return out;
}

// Texture fit through the renderer: the model texture and the target UV
// texture are both rendered with the same shape and projection and compared
// with the robust image loss on covered pixels.
inline TextureFitResult fit_albedo_lighting_rendered(
    std::shared_ptr<const RenderContext> ctx, const UVTextureMap& target,
    const VertexShape& shape, const ProjectionParams& m, const RenderOptions& opts,
    const Decoder& albedo_decoder, const TextureFitConfig& cfg, Eigen::VectorXd f_A0,
    SHLighting light0) {
  const int la = albedo_decoder.param_dim();
  const auto target_render = render_texture(ctx, m, shape, target, opts);
  const Image& goal = target_render.image.rgb;
  auto decode_map = [&](const Eigen::VectorXd& fa) {
    UVAlbedoMap a(ctx->u_size, ctx->v_size);
    const Eigen::VectorXd d = albedo_decoder.decode(fa);
    std::copy(d.data(), d.data() + d.size(), a.grid.data.begin());
    a.mask = ctx->texels.region;
    return a;
  };
  auto unpack = [&](const Eigen::VectorXd& x) {
    SHLighting l;
    for (int i = 0; i < kLightCoeffs; ++i) l.coeffs[i] = x[la + i];
    return l;
  };
  Objective obj = [&](const Eigen::VectorXd& x, Eigen::VectorXd* grad) {
    const auto r = render(ctx, m, unpack(x), shape, decode_map(x.head(la)), opts);
    const auto loss = recon_image_loss(r.image, goal);
    if (grad) {
      const auto g = render_backward(r.state, loss.grad);
      grad->resize(x.size());
      grad->head(la) = albedo_decoder.backward(
          x.head(la), Eigen::Map<const Eigen::VectorXd>(g.albedo.data.data(),
                                                        static_cast<Eigen::Index>(g.albedo.data.size())));
      for (int i = 0; i < kLightCoeffs; ++i) (*grad)[la + i] = g.light.coeffs[i];
    }
    return loss.value;
  };
  Eigen::VectorXd x(la + kLightCoeffs);
  x.head(la) = f_A0;
  for (int i = 0; i < kLightCoeffs; ++i) x[la + i] = light0.coeffs[i];
  Eigen::VectorXd scale(x.size());
  scale.head(la).setConstant(cfg.albedo_scale);
  scale.tail(kLightCoeffs).setConstant(cfg.light_scale);
  auto res = gradient_descent(obj, x, scale, cfg.descent);

  TextureFitResult out;
  out.f_A = res.x.head(la);
  out.light = unpack(res.x);
  const auto final_render = render(ctx, m, out.light, shape, decode_map(out.f_A), opts);
  double l1 = 0.0;
  std::size_t cnt = 0;
  for (int u = 0; u < target.u_size(); ++u)
    for (int v = 0; v < target.v_size(); ++v) {
      if (!target.mask(u, v)) continue;
      for (int ch = 0; ch < 3; ++ch, ++cnt)
        l1 += std::abs(final_render.state.shaded.texture.grid(u, v, ch) - target.grid(u, v, ch));
    }
  out.residual = cnt ? l1 / static_cast<double>(cnt) : 0.0;
  out.trace = std::move(res.trace);
  out.termination = res.termination;
  return out;
}

// --------------------------------------------------------------------------
// Shape fit: vertex distance plus normal agreement

struct ShapeFitConfig {
  DescentOptions descent;
  double normal_weight = 0.1;
  double shape_scale = 1.0;
  NmeNormalizer normalizer = NmeNormalizer::inter_ocular;
};

struct ShapeFitResult {
  Eigen::VectorXd f_S;
  double nme = 0.0;
  std::vector<double> trace;
  std::string termination;
};

// Minimizes sum_v |S_v - S~_v|^2 + w_n sum_v (1 - n_v . n~_v).
inline ShapeFitResult fit_shape(const VertexShape& target, const Topology& topo,
                                const Decoder& shape_decoder, const ShapeFitConfig& cfg,
                                Eigen::VectorXd f_S0) {
  if (target.size() != topo.num_vertices || shape_decoder.output_dim() != 3 * topo.num_vertices)
    throw shape_error("fit_shape: target and decoder must match the topology");
  if (f_S0.size() != shape_decoder.param_dim())
    throw shape_error("fit_shape: bad initial parameter size");
  const auto target_normals = vertex_normals(target, topo);
  const double wn = cfg.normal_weight;

  Objective obj = [&](const Eigen::VectorXd& x, Eigen::VectorXd* grad) {
    const VertexShape s(shape_decoder.decode(x));
    const Eigen::VectorXd d = s.xyz - target.xyz;
    double f = d.squaredNorm();
    Eigen::VectorXd ds = 2.0 * d;
    if (wn > 0.0) {
      const auto normals = vertex_normals_full(s, topo);
      std::vector<Vec3> dn(topo.num_vertices);
      for (int i = 0; i < topo.num_vertices; ++i) {
        f += wn * (1.0 - normals.unit[i].dot(target_normals[i]));
        dn[i] = -wn * target_normals[i];
      }
      if (grad) ds += vertex_normals_backward(s, topo, normals, dn);
    }
    if (grad) *grad = shape_decoder.backward(x, ds);
    return f;
  };
  Eigen::VectorXd scale = Eigen::VectorXd::Constant(f_S0.size(), cfg.shape_scale);
  auto res = gradient_descent(obj, std::move(f_S0), scale, cfg.descent);
  ShapeFitResult out;
  out.f_S = res.x;
  out.nme = shape_nme(VertexShape(shape_decoder.decode(res.x)), target, topo, cfg.normalizer);
  out.trace = std::move(res.trace);
  out.termination = res.termination;
  return out;
}

// --------------------------------------------------------------------------
// Full image fit

// Which parameter blocks move and which terms are active in a stage.
struct FitStage {
  bool projection = true;
  bool light = true;
  bool shape = true;
  bool albedo = true;
  bool image_term = true;
  bool landmark_term = true;
  bool regularizers = true;
  int max_iterations = 500;
};

struct FitConfig {
  std::vector<FitStage> stages;
  DescentOptions descent;
  LossWeights weights;
  RenderOptions render;
  // Step scales. Projection scales are derived from the model size at the
  // initial estimate so that a unit scaled step moves pixels by ~1.
  double light_scale = 1.0;
  double shape_scale = 1.0;
  double albedo_scale = 1.0;
  double projection_scale = 1.0;
  const FeatureExtractor* extractor = nullptr;

  // Landmark-only pose alignment followed by the joint fit.
  static FitConfig staged(int iterations = 2000) {
    FitConfig c;
    FitStage pose;
    pose.light = pose.shape = pose.albedo = false;
    pose.image_term = false;
    pose.regularizers = false;
    pose.max_iterations = iterations / 4;
    FitStage joint;
    joint.max_iterations = iterations - pose.max_iterations;
    c.stages = {pose, joint};
    return c;
  }
};

struct FitParams {
  ProjectionParams m;
  SHLighting light;
  Eigen::VectorXd f_S;
  Eigen::VectorXd f_A;
};

struct FitResult {
  FitParams params;
  std::vector<std::vector<double>> stage_traces;
  std::vector<std::string> stage_terminations;
  LossParts final_parts;
  double final_loss = 0.0;
  int iterations = 0;
  std::string termination;
};

namespace detail {

struct ParamLayout {
  int ls = 0, la = 0;
  int size() const { return 6 + kLightCoeffs + ls + la; }
  int light_off() const { return 6; }
  int shape_off() const { return 6 + kLightCoeffs; }
  int albedo_off() const { return 6 + kLightCoeffs + ls; }

  Eigen::VectorXd pack(const FitParams& p) const {
    Eigen::VectorXd x(size());
    const auto m = p.m.to_array();
    x.head<6>() = Eigen::Map<const Eigen::Matrix<double, 6, 1>>(m.data());
    x.segment<kLightCoeffs>(light_off()) =
        Eigen::Map<const Eigen::Matrix<double, kLightCoeffs, 1>>(p.light.coeffs.data());
    x.segment(shape_off(), ls) = p.f_S;
    x.segment(albedo_off(), la) = p.f_A;
    return x;
  }
  FitParams unpack(const Eigen::VectorXd& x) const {
    FitParams p;
    p.m = ProjectionParams::from_array({x[0], x[1], x[2], x[3], x[4], x[5]});
    for (int i = 0; i < kLightCoeffs; ++i) p.light.coeffs[i] = x[light_off() + i];
    p.f_S = x.segment(shape_off(), ls);
    p.f_A = x.segment(albedo_off(), la);
    return p;
  }
};

inline double rms_radius(const VertexShape& s) {
  Vec3 c = Vec3::Zero();
  for (int i = 0; i < s.size(); ++i) c += s.vertex(i);
  c /= s.size();
  double acc = 0.0;
  for (int i = 0; i < s.size(); ++i) acc += (s.vertex(i) - c).squaredNorm();
  return std::sqrt(acc / s.size());
}

}  // namespace detail

// Evaluates the full objective and its gradient for one parameter set.
// Throws when the face covers no pixel.
struct ImageObjective {
  std::shared_ptr<const RenderContext> ctx;
  const Image* input = nullptr;
  const Grid* mask = nullptr;  // H x W x 1, or null for all ones
  const LandmarkSet* landmarks = nullptr;
  const Decoder* shape_decoder = nullptr;
  const Decoder* albedo_decoder = nullptr;
  const FitConfig* cfg = nullptr;

  struct Evaluation {
    double value = 0.0;
    LossParts parts;
    FitParams grad;
  };

  Evaluation operator()(const FitParams& p, const FitStage& stage, bool want_grad) const {
    const auto& topo = ctx->topo;
    const auto& w = cfg->weights;
    Evaluation ev;
    const VertexShape shape(shape_decoder->decode(p.f_S));
    UVAlbedoMap albedo(ctx->u_size, ctx->v_size);
    {
      const Eigen::VectorXd a = albedo_decoder->decode(p.f_A);
      std::copy(a.data(), a.data() + a.size(), albedo.grid.data.begin());
      albedo.mask = ctx->texels.region;
    }
    const bool regs = stage.regularizers && w.lambda_reg > 0.0;
    LossParts scale = total_loss({}, w).scale;
    if (!stage.image_term) scale.rec_image = scale.rec_feature = 0.0;
    if (!stage.landmark_term || !landmarks) scale.landmark = 0.0;
    if (!regs) scale.symmetry = scale.constancy = scale.smoothness = 0.0;

    Eigen::VectorXd dshape = Eigen::VectorXd::Zero(3 * topo.num_vertices);
    Grid dalbedo(ctx->u_size, ctx->v_size, 3);
    ev.grad.m = ProjectionParams{0.0, 0.0, 0.0, 0.0, Vec2::Zero()};
    ProjectionGradient dm = ProjectionGradient::Zero();

    if (scale.rec_image > 0.0 || scale.rec_feature > 0.0) {
      auto r = render(ctx, p.m, p.light, shape, albedo, cfg->render);
      if (r.image.coverage.count() == 0)
        throw fit_error("face covers no pixel; initialize the pose from landmarks", {});
      RenderedImage shown = r.image;
      if (mask) shown.rgb = composite_with_mask(r.image.rgb, *input, *mask);
      const auto rec = recon_image_loss(shown, *input);
      ev.parts.rec_image = rec.value;
      Grid dimg = rec.grad;
      for (auto& v : dimg.data) v *= scale.rec_image;
      if (cfg->extractor && scale.rec_feature > 0.0) {
        const auto pl = perceptual_loss(cfg->extractor, shown.rgb, *input);
        ev.parts.rec_feature = pl.value;
        for (std::size_t i = 0; i < dimg.data.size(); ++i)
          dimg.data[i] += scale.rec_feature * pl.grad.data[i];
      }
      if (want_grad) {
        if (mask) dimg = composite_with_mask_backward(*mask, dimg);
        const auto g = render_backward(r.state, dimg);
        dalbedo = g.albedo;
        ev.grad.light = g.light;
        dshape += g.vertices;
        dm += g.m;
      }
    }
    if (scale.landmark > 0.0) {
      const auto lm = landmark_loss(p.m, shape, topo, *landmarks);
      ev.parts.landmark = lm.value;
      dm += scale.landmark * lm.dm;
      dshape += scale.landmark * lm.dvertices;
    }
    if (scale.symmetry > 0.0) {
      const auto s = albedo_symmetry_loss(albedo);
      ev.parts.symmetry = s.value;
      for (std::size_t i = 0; i < s.grad.data.size(); ++i)
        dalbedo.data[i] += scale.symmetry * s.grad.data[i];
    }
    if (scale.constancy > 0.0) {
      const auto chroma = unwarp_to_uv(ctx, *input, shape, p.m);
      const auto c = albedo_constancy_loss(albedo, chroma.grid, w.alpha, w.p);
      ev.parts.constancy = c.value;
      for (std::size_t i = 0; i < c.grad.data.size(); ++i)
        dalbedo.data[i] += scale.constancy * c.grad.data[i];
    }
    if (scale.smoothness > 0.0) {
      const auto suv = shape_to_uv(shape, topo, ctx->texels);
      const auto s = shape_smoothness_loss(suv);
      ev.parts.smoothness = s.value;
      const auto dv = vertex_attribute_to_uv_backward(ctx->texels, topo, s.grad);
      for (int i = 0; i < topo.num_vertices; ++i)
        dshape.segment<3>(3 * i) += scale.smoothness * dv[i];
    }
    ev.value = scale.rec_image * ev.parts.rec_image + scale.rec_feature * ev.parts.rec_feature +
               scale.landmark * ev.parts.landmark + scale.symmetry * ev.parts.symmetry +
               scale.constancy * ev.parts.constancy + scale.smoothness * ev.parts.smoothness;
    if (want_grad) {
      ev.grad.m = ProjectionParams::from_array({dm[0], dm[1], dm[2], dm[3], dm[4], dm[5]});
      ev.grad.f_S = shape_decoder->backward(p.f_S, dshape);
      ev.grad.f_A = albedo_decoder->backward(
          p.f_A, Eigen::Map<const Eigen::VectorXd>(dalbedo.data.data(),
                                                   static_cast<Eigen::Index>(dalbedo.data.size())));
    }
    return ev;
  }
};

// Fits projection, lighting, shape and albedo parameters to an image by
// descending the weighted objective stage by stage. Landmark gradients
// reach only m and f_S; decoders are never modified. A zero mask removes
// the reconstruction term entirely.
inline FitResult fit_image(std::shared_ptr<const RenderContext> ctx, const Image& input,
                           const Grid* mask, const LandmarkSet* landmarks,
                           const Decoder& shape_decoder, const Decoder& albedo_decoder,
                           const FitConfig& cfg, FitParams init) {
  cfg.weights.check();
  if (input.rows != cfg.render.height || input.cols != cfg.render.width || input.channels != 3)
    throw shape_error("fit_image: input does not match the configured render size");
  if (mask && (mask->rows != input.rows || mask->cols != input.cols || mask->channels != 1))
    throw shape_error("fit_image: mask dimension mismatch");
  if (shape_decoder.output_dim() != 3 * ctx->topo.num_vertices)
    throw shape_error("fit_image: shape decoder output must be 3Q");
  if (albedo_decoder.output_dim() != 3 * ctx->u_size * ctx->v_size)
    throw shape_error("fit_image: albedo decoder output must be the UV grid");

  ImageObjective eval{ctx, &input, mask, landmarks, &shape_decoder, &albedo_decoder, &cfg};
  const detail::ParamLayout layout{shape_decoder.param_dim(), albedo_decoder.param_dim()};
  if (init.f_S.size() != layout.ls || init.f_A.size() != layout.la)
    throw shape_error("fit_image: initial parameter sizes do not match the decoders");

  {
    const auto shape0 = VertexShape(shape_decoder.decode(init.f_S));
    const auto fb = rasterize(project(shape0, init.m), ctx->topo, cfg.render.width, cfg.render.height);
    if (fb.covered() == 0)
      throw fit_error("face covers no pixel at the initial estimate; "
                      "initialize the pose from landmarks first", {});
  }

  FitResult out;
  Eigen::VectorXd x = layout.pack(init);
  for (const auto& stage : cfg.stages) {
    const FitParams cur = layout.unpack(x);
    const double r = detail::rms_radius(VertexShape(shape_decoder.decode(cur.f_S)));
    Eigen::VectorXd scale = Eigen::VectorXd::Zero(layout.size());
    if (stage.projection) {
      const double ps = cfg.projection_scale;
      scale[0] = ps / r;
      scale[1] = scale[2] = scale[3] = ps / (cur.m.f * r);
      scale[4] = scale[5] = ps;
    }
    if (stage.light) scale.segment(layout.light_off(), kLightCoeffs).setConstant(cfg.light_scale);
    if (stage.shape) scale.segment(layout.shape_off(), layout.ls).setConstant(cfg.shape_scale);
    if (stage.albedo) scale.segment(layout.albedo_off(), layout.la).setConstant(cfg.albedo_scale);

    Objective obj = [&](const Eigen::VectorXd& xs, Eigen::VectorXd* grad) {
      const FitParams p = layout.unpack(xs);
      if (!(p.m.f > 0.0)) return std::numeric_limits<double>::infinity();
      ImageObjective::Evaluation ev;
      try {
        ev = eval(p, stage, grad != nullptr);
      } catch (const fit_error&) {
        return std::numeric_limits<double>::infinity();
      }
      if (grad) *grad = layout.pack(ev.grad);
      return ev.value;
    };
    DescentOptions d = cfg.descent;
    d.max_iterations = stage.max_iterations;
    // The first evaluation must succeed; empty coverage here is a hard error.
    eval(layout.unpack(x), stage, false);
    auto res = gradient_descent(obj, x, scale, d);
    x = res.x;
    out.iterations += res.iterations;
    out.stage_traces.push_back(std::move(res.trace));
    out.stage_terminations.push_back(res.termination);
  }
  out.params = layout.unpack(x);
  FitStage all;
  const auto ev = eval(out.params, all, false);
  out.final_parts = ev.parts;
  out.final_loss = ev.value;
  out.termination = out.stage_terminations.empty() ? "converged" : out.stage_terminations.back();
  return out;
}

// --------------------------------------------------------------------------
// Relighting

// Renders the target shape with an albedo map under the source lighting.
inline RenderedImage relight(std::shared_ptr<const RenderContext> ctx, const VertexShape& shape,
                             const UVAlbedoMap& albedo, const SHLighting& source_light,
                             const ProjectionParams& m, const RenderOptions& opts = {}) {
  return render(std::move(ctx), m, source_light, shape, albedo, opts).image;
}

struct RelightResult {
  RenderedImage image;
  UVTextureMap texture;      // relit texture
  std::size_t excluded = 0;  // texels left unchanged (near-zero original shading)
};

inline constexpr double kShadingGuard = 1e-8;

// Relights an already-shaded texture: on every masked texel each channel is
// multiplied by C_source / C_original, computed from the rotated target
// shape's normals. Texels whose original shading is below the guard keep
// their value.
inline RelightResult relight_texture(std::shared_ptr<const RenderContext> ctx,
                                     const VertexShape& shape, const UVTextureMap& texture,
                                     const SHLighting& original_light,
                                     const SHLighting& source_light, const ProjectionParams& m,
                                     const RenderOptions& opts = {}) {
  UVAlbedoMap ones(ctx->u_size, ctx->v_size);
  std::fill(ones.grid.data.begin(), ones.grid.data.end(), 1.0);
  const auto base = render(ctx, m, original_light, shape, ones, opts);
  const auto& normals = base.state.normals_uv;
  RelightResult out;
  out.texture = texture;
  for (int u = 0; u < ctx->u_size; ++u)
    for (int v = 0; v < ctx->v_size; ++v) {
      if (!texture.mask(u, v) || !normals.mask(u, v)) continue;
      const SHBasis h = sh_basis(normals.grid.rgb(u, v));
      bool guarded = false;
      double ratio[3];
      for (int ch = 0; ch < 3; ++ch) {
        const double co = shading_value(h, original_light, ch);
        if (std::abs(co) < kShadingGuard) guarded = true;
        ratio[ch] = shading_value(h, source_light, ch) / co;
      }
      if (guarded) {
        ++out.excluded;
        continue;
      }
      for (int ch = 0; ch < 3; ++ch) out.texture.grid(u, v, ch) = texture.grid(u, v, ch) * ratio[ch];
    }
  out.image = render_texture(ctx, m, shape, out.texture, opts).image;
  return out;
}

}  // namespace facefit
