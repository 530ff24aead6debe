#pragma once

// Fitting objectives with analytic gradients: robust image reconstruction,
// perceptual feature reconstruction, sparse landmark alignment, albedo
// symmetry and constancy, shape smoothness, the supervised intermediate
// loss and the weighted total.

#include <cmath>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "facefit/camera.hpp"
#include "facefit/grid.hpp"
#include "facefit/mesh.hpp"
#include "facefit/render.hpp"

namespace facefit {

struct LossWeights {
  double lambda_L = 1e-4;    // landmark term
  double lambda_reg = 1.0;   // regularizer block
  double lambda_f = 0.0;     // perceptual reconstruction
  double lambda_T = 1.0;     // intermediate texture term
  double lambda_m = 1.0;     // intermediate projection term
  double alpha = 15.0;       // constancy chromaticity falloff
  double p = 0.8;            // constancy sparsity exponent
  double w_sym = 0.0;        // sub-weights inside lambda_reg
  double w_const = 0.0;
  double w_smooth = 0.0;

  void check() const {
    for (double w : {lambda_L, lambda_reg, lambda_f, lambda_T, lambda_m, alpha, w_sym,
                     w_const, w_smooth})
      if (!(w >= 0.0)) throw domain_error("loss weights must be non-negative");
    if (!(p > 0.0 && p <= 1.0)) throw domain_error("constancy exponent p must be in (0, 1]");
  }
};

struct LandmarkSet {
  std::vector<Vec2> points;         // 68 image coordinates
  std::vector<std::uint8_t> visible;

  static LandmarkSet all_visible(std::vector<Vec2> pts) {
    LandmarkSet s;
    s.visible.assign(pts.size(), 1);
    s.points = std::move(pts);
    return s;
  }
};

// Loss value with a gradient laid out like its grid input.
struct GridLoss {
  double value = 0.0;
  Grid grad;
  std::size_t excluded = 0;  // entries skipped by the loss's own rules
};

// Mean over covered pixels of the per-pixel RGB Euclidean distance. The
// gradient at an exactly-zero residual is zero.
inline GridLoss recon_image_loss(const RenderedImage& rendered, const Image& target) {
  require_same_shape(rendered.rgb, target, "recon_image_loss");
  const std::size_t n = rendered.coverage.count();
  if (n == 0) throw domain_error("recon_image_loss: no pixel is covered by the face");
  GridLoss out;
  out.grad = Grid(target.rows, target.cols, target.channels);
  const double inv = 1.0 / static_cast<double>(n);
  for (int y = 0; y < target.rows; ++y)
    for (int x = 0; x < target.cols; ++x) {
      if (!rendered.coverage(y, x)) continue;
      const Vec3 d = rendered.rgb.rgb(y, x) - target.rgb(y, x);
      const double len = d.norm();
      out.value += len;
      if (len > 0.0) out.grad.set_rgb(y, x, d * (inv / len));
    }
  out.value *= inv;
  return out;
}

// Feature network used by the perceptual loss. Layers must have fixed
// dimensions; evaluation must be deterministic.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual std::vector<Grid> evaluate(const Image& image) const = 0;
  // Gradient with respect to the image given per-layer feature gradients.
  virtual Image backward(const Image& image, const std::vector<Grid>& dfeatures) const = 0;
};

// One layer equal to the image itself.
class IdentityExtractor final : public FeatureExtractor {
 public:
  std::vector<Grid> evaluate(const Image& image) const override { return {image}; }
  Image backward(const Image&, const std::vector<Grid>& d) const override { return d.at(0); }
};

struct PerceptualLoss {
  double value = 0.0;
  Grid grad;
  bool enabled = false;
};

// (1/|C|) sum_j ||phi_j(R) - phi_j(I)||^2 / (W_j H_j C_j). A null extractor
// disables the term.
inline PerceptualLoss perceptual_loss(const FeatureExtractor* fx, const Image& rendered,
                                      const Image& target) {
  PerceptualLoss out;
  out.grad = Grid(rendered.rows, rendered.cols, rendered.channels);
  if (!fx) return out;
  require_same_shape(rendered, target, "perceptual_loss");
  out.enabled = true;
  const auto fr = fx->evaluate(rendered);
  const auto ft = fx->evaluate(target);
  if (fr.size() != ft.size() || fr.empty())
    throw shape_error("perceptual_loss: extractor returned inconsistent layers");
  std::vector<Grid> d(fr.size());
  const double inv_layers = 1.0 / static_cast<double>(fr.size());
  for (std::size_t j = 0; j < fr.size(); ++j) {
    require_same_shape(fr[j], ft[j], "perceptual_loss layer");
    const double norm = inv_layers / static_cast<double>(fr[j].data.size());
    d[j] = Grid(fr[j].rows, fr[j].cols, fr[j].channels);
    double acc = 0.0;
    for (std::size_t i = 0; i < fr[j].data.size(); ++i) {
      const double e = fr[j].data[i] - ft[j].data[i];
      acc += e * e;
      d[j].data[i] = 2.0 * norm * e;
    }
    out.value += norm * acc;
  }
  out.grad = fx->backward(rendered, d);
  return out;
}

struct LandmarkLoss {
  double value = 0.0;
  ProjectionGradient dm = ProjectionGradient::Zero();
  Eigen::VectorXd dvertices;  // 3Q, nonzero only on landmark vertices
};

// Sum over visible landmarks of the squared distance between projected
// landmark vertices and their annotated positions.
inline LandmarkLoss landmark_loss(const ProjectionParams& m, const VertexShape& s,
                                  const Topology& topo, const LandmarkSet& gt) {
  const auto& idx = topo.landmark_indices;
  if (gt.points.size() != idx.size() || gt.visible.size() != idx.size())
    throw shape_error("landmark_loss: expected " + std::to_string(idx.size()) + " landmarks");
  validate(m);
  const Mat3 r = rotation(m);
  LandmarkLoss out;
  std::vector<Vec2> upstream(s.size(), Vec2::Zero());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (!gt.visible[k]) continue;
    const Vec3 v = r * s.vertex(idx[k]);
    const Vec2 d = m.f * v.head<2>() + m.t2d - gt.points[k];
    out.value += d.squaredNorm();
    upstream[idx[k]] += 2.0 * d;
  }
  const auto pb = project_backward(s, m, upstream);
  out.dm = pb.dm;
  out.dvertices = pb.dshape;
  return out;
}

// Horizontal mirror of a UV map: column v <-> V - 1 - v.
inline UVMap flip_horizontal(const UVMap& a) {
  UVMap out(a.u_size(), a.v_size(), a.grid.channels);
  const int vs = a.v_size();
  for (int u = 0; u < a.u_size(); ++u)
    for (int v = 0; v < vs; ++v) {
      out.mask.set(u, v, a.mask(u, vs - 1 - v));
      for (int ch = 0; ch < a.grid.channels; ++ch)
        out.grid(u, v, ch) = a.grid(u, vs - 1 - v, ch);
    }
  return out;
}

// L1 distance between the albedo map and its mirror over texels whose
// mirror is also masked in. Both ordered pairs are counted; sign(0) = 0.
inline GridLoss albedo_symmetry_loss(const UVAlbedoMap& a) {
  GridLoss out;
  out.grad = Grid(a.u_size(), a.v_size(), a.grid.channels);
  const int vs = a.v_size();
  for (int u = 0; u < a.u_size(); ++u)
    for (int v = 0; v < vs; ++v) {
      const int w = vs - 1 - v;
      if (!a.mask(u, v)) continue;
      if (!a.mask(u, w)) {
        ++out.excluded;
        continue;
      }
      for (int ch = 0; ch < a.grid.channels; ++ch) {
        const double d = a.grid(u, v, ch) - a.grid(u, w, ch);
        out.value += std::abs(d);
        const double s = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
        out.grad(u, v, ch) += s;
        out.grad(u, w, ch) -= s;
      }
    }
  return out;
}

// Chromaticity c = I / |I|, zero for black pixels.
inline Vec3 chromaticity(const Vec3& rgb) {
  const double n = rgb.norm();
  return n > 0.0 ? Vec3(rgb / n) : Vec3::Zero();
}

inline constexpr double kConstancyEps = 1e-6;

// sum_i sum_{j in N4(i)} w_ij ((|A_i - A_j|^2 + eps^2)^(p/2) - eps^p), with
// w_ij = exp(-alpha |c_i - c_j|) from the reference image chromaticity.
// Ordered pairs; both texels must be masked in.
inline GridLoss albedo_constancy_loss(const UVAlbedoMap& a, const Grid& chroma_ref,
                                      double alpha, double p) {
  if (chroma_ref.rows != a.u_size() || chroma_ref.cols != a.v_size() || chroma_ref.channels != 3)
    throw shape_error("albedo_constancy_loss: chroma reference dimension mismatch");
  if (!(p > 0.0 && p <= 1.0)) throw domain_error("albedo_constancy_loss: p must be in (0, 1]");
  GridLoss out;
  out.grad = Grid(a.u_size(), a.v_size(), 3);
  const double eps2 = kConstancyEps * kConstancyEps;
  const double floor_term = std::pow(eps2, 0.5 * p);
  static constexpr int du[4] = {-1, 1, 0, 0};
  static constexpr int dv[4] = {0, 0, -1, 1};
  for (int u = 0; u < a.u_size(); ++u)
    for (int v = 0; v < a.v_size(); ++v) {
      if (!a.mask(u, v)) continue;
      const Vec3 ai = a.grid.rgb(u, v);
      const Vec3 ci = chromaticity(chroma_ref.rgb(u, v));
      for (int k = 0; k < 4; ++k) {
        const int nu = u + du[k], nv = v + dv[k];
        if (!a.mask.inside(nu, nv) || !a.mask(nu, nv)) continue;
        const Vec3 diff = ai - a.grid.rgb(nu, nv);
        const double w = std::exp(-alpha * (ci - chromaticity(chroma_ref.rgb(nu, nv))).norm());
        const double d2 = diff.squaredNorm() + eps2;
        out.value += w * (std::pow(d2, 0.5 * p) - floor_term);
        const Vec3 g = diff * (w * p * std::pow(d2, 0.5 * p - 1.0));
        out.grad.set_rgb(u, v, out.grad.rgb(u, v) + g);
        out.grad.set_rgb(nu, nv, out.grad.rgb(nu, nv) - g);
      }
    }
  return out;
}

// Laplacian smoothness: sum_i |S_i - mean of N_i|, where N_i holds the
// axis-aligned neighbor pairs (left/right, up/down) that are both masked in.
// Texels without a complete pair are excluded (counted in `excluded`).
inline GridLoss shape_smoothness_loss(const UVShapeMap& s) {
  GridLoss out;
  out.grad = Grid(s.u_size(), s.v_size(), 3);
  auto in = [&](int u, int v) { return s.mask.inside(u, v) && s.mask(u, v); };
  for (int u = 0; u < s.u_size(); ++u)
    for (int v = 0; v < s.v_size(); ++v) {
      if (!s.mask(u, v)) continue;
      int nb[4][2];
      int n = 0;
      if (in(u - 1, v) && in(u + 1, v)) {
        nb[n][0] = u - 1, nb[n][1] = v, ++n;
        nb[n][0] = u + 1, nb[n][1] = v, ++n;
      }
      if (in(u, v - 1) && in(u, v + 1)) {
        nb[n][0] = u, nb[n][1] = v - 1, ++n;
        nb[n][0] = u, nb[n][1] = v + 1, ++n;
      }
      if (n == 0) {
        ++out.excluded;
        continue;
      }
      Vec3 sum = Vec3::Zero();
      for (int k = 0; k < n; ++k) sum += s.grid.rgb(nb[k][0], nb[k][1]);
      const Vec3 r = s.grid.rgb(u, v) - sum / n;
      const double len = r.norm();
      out.value += len;
      if (len == 0.0) continue;
      const Vec3 g = r / len;
      out.grad.set_rgb(u, v, out.grad.rgb(u, v) + g);
      for (int k = 0; k < n; ++k)
        out.grad.set_rgb(nb[k][0], nb[k][1], out.grad.rgb(nb[k][0], nb[k][1]) - g / n);
    }
  return out;
}

struct PseudoGroundTruth {
  VertexShape shape;
  ProjectionParams m;
  UVTextureMap texture;  // mask = validity
};

struct IntermediatePrediction {
  VertexShape shape;
  ProjectionParams m;
  UVTextureMap texture;
};

struct IntermediateLoss {
  double value = 0.0;
  double shape_term = 0.0;       // |S - S~|^2
  double texture_term = 0.0;     // |T - T~|_1 over valid texels
  double projection_term = 0.0;  // |m - m~|^2
  Eigen::VectorXd dshape;
  Grid dtexture;
  ProjectionGradient dm = ProjectionGradient::Zero();
};

// Supervised part of the intermediate loss: L_S + lambda_T L_T + lambda_m L_m.
inline IntermediateLoss intermediate_loss(const IntermediatePrediction& pred,
                                          const PseudoGroundTruth& gt,
                                          const LossWeights& w) {
  if (pred.shape.xyz.size() != gt.shape.xyz.size())
    throw shape_error("intermediate_loss: shape size mismatch");
  require_same_shape(pred.texture.grid, gt.texture.grid, "intermediate_loss");
  IntermediateLoss out;
  const Eigen::VectorXd ds = pred.shape.xyz - gt.shape.xyz;
  out.shape_term = ds.squaredNorm();
  out.dshape = 2.0 * ds;

  out.dtexture = Grid(gt.texture.u_size(), gt.texture.v_size(), gt.texture.grid.channels);
  for (int u = 0; u < gt.texture.u_size(); ++u)
    for (int v = 0; v < gt.texture.v_size(); ++v) {
      if (!gt.texture.mask(u, v)) continue;
      for (int ch = 0; ch < gt.texture.grid.channels; ++ch) {
        const double d = pred.texture.grid(u, v, ch) - gt.texture.grid(u, v, ch);
        out.texture_term += std::abs(d);
        out.dtexture(u, v, ch) = w.lambda_T * (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0));
      }
    }

  const auto a = pred.m.to_array(), b = gt.m.to_array();
  for (int i = 0; i < 6; ++i) {
    out.projection_term += (a[i] - b[i]) * (a[i] - b[i]);
    out.dm[i] = 2.0 * w.lambda_m * (a[i] - b[i]);
  }
  out.value = out.shape_term + w.lambda_T * out.texture_term + w.lambda_m * out.projection_term;
  return out;
}

// Unweighted values of the terms of the full objective.
struct LossParts {
  double rec_image = 0.0;
  double rec_feature = 0.0;
  double landmark = 0.0;
  double symmetry = 0.0;
  double constancy = 0.0;
  double smoothness = 0.0;
};

struct TotalLoss {
  double value = 0.0;
  LossParts scale;  // factor applied to each term's gradient
};

// L = L_rec^i + lambda_f L_rec^f + lambda_L L_lan
//     + lambda_reg (w_sym L_sym + w_const L_const + w_smooth L_smooth).
inline TotalLoss total_loss(const LossParts& parts, const LossWeights& w) {
  TotalLoss t;
  t.scale.rec_image = 1.0;
  t.scale.rec_feature = w.lambda_f;
  t.scale.landmark = w.lambda_L;
  t.scale.symmetry = w.lambda_reg * w.w_sym;
  t.scale.constancy = w.lambda_reg * w.w_const;
  t.scale.smoothness = w.lambda_reg * w.w_smooth;
  t.value = t.scale.rec_image * parts.rec_image + t.scale.rec_feature * parts.rec_feature +
            t.scale.landmark * parts.landmark + t.scale.symmetry * parts.symmetry +
            t.scale.constancy * parts.constancy + t.scale.smoothness * parts.smoothness;
  return t;
}

// name=value lines for harness parsing.
inline std::string format_breakdown(const LossParts& parts, const TotalLoss& total) {
  std::ostringstream os;
  os.precision(17);
  os << "rec_image=" << parts.rec_image << "\n"
     << "rec_feature=" << parts.rec_feature << "\n"
     << "landmark=" << parts.landmark << "\n"
     << "symmetry=" << parts.symmetry << "\n"
     << "constancy=" << parts.constancy << "\n"
     << "smoothness=" << parts.smoothness << "\n"
     << "total=" << total.value << "\n";
  return os.str();
}

}  // namespace facefit
