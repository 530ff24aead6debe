#pragma once

// The rendering layer: shading in UV space, weak-perspective projection,
// Z-buffer rasterization and per-pixel texture lookup through barycentric
// UV coordinates, plus its analytic backward pass, occlusion-aware
// compositing, and image-to-UV unwarping.

#include <cmath>
#include <memory>
#include <vector>

#include "facefit/camera.hpp"
#include "facefit/grid.hpp"
#include "facefit/lighting.hpp"
#include "facefit/mesh.hpp"
#include "facefit/rasterizer.hpp"

namespace facefit {

// Topology plus its precomputed UV texel assignment. Shared by every
// render call on the same model.
struct RenderContext {
  Topology topo;
  UVTexelMap texels;
  int u_size = 0;
  int v_size = 0;
};

inline std::shared_ptr<const RenderContext> make_render_context(Topology topo,
                                                                int u_size,
                                                                int v_size) {
  validate(topo, u_size, v_size);
  auto ctx = std::make_shared<RenderContext>();
  ctx->texels = build_texel_map(topo, u_size, v_size);
  ctx->topo = std::move(topo);
  ctx->u_size = u_size;
  ctx->v_size = v_size;
  return ctx;
}

struct RenderOptions {
  int width = 128;
  int height = 128;
  Vec3 background = Vec3::Zero();
};

struct RenderedImage {
  Image rgb;
  Mask coverage;
};

// Everything the backward pass needs from a forward render.
struct RenderState {
  std::shared_ptr<const RenderContext> ctx;
  RenderOptions options;
  ProjectionParams m;
  SHLighting light;
  VertexShape shape;
  UVAlbedoMap albedo;  // mask = texel support
  Mat3 rotation = Mat3::Identity();
  ProjectedVertices projected;
  VertexNormals normals;              // of the unrotated shape
  std::vector<Vec3> rotated_normals;  // R * normals.unit
  Grid normal_raw;                    // interpolated, before normalization
  UVMap normals_uv;                   // unit, mask = texel support
  ShadeResult shaded;
  FragmentBuffer frags;
  std::vector<Vec2> uv_points;  // per pixel lookup point (covered only)
  bool textured = false;        // true when a precomputed texture was used
};

struct RenderResult {
  RenderedImage image;
  RenderState state;

  const FragmentBuffer& fragments() const { return state.frags; }
};

namespace detail {

inline void check_albedo(const RenderContext& ctx, const UVMap& albedo) {
  if (albedo.u_size() != ctx.u_size || albedo.v_size() != ctx.v_size ||
      albedo.grid.channels != 3)
    throw shape_error("albedo map does not match the model's UV grid");
}

// Normal map of the rotated shape over all supported texels.
inline void build_normal_map(RenderState& st) {
  const auto& ctx = *st.ctx;
  st.normals = vertex_normals_full(st.shape, ctx.topo);
  st.rotated_normals.resize(st.normals.unit.size());
  for (std::size_t i = 0; i < st.normals.unit.size(); ++i)
    st.rotated_normals[i] = st.rotation * st.normals.unit[i];
  st.normal_raw = vertex_attribute_to_uv(ctx.texels, ctx.topo, st.rotated_normals);
  st.normals_uv = UVMap(ctx.u_size, ctx.v_size);
  st.normals_uv.mask = ctx.texels.support;
  for (int u = 0; u < ctx.u_size; ++u)
    for (int v = 0; v < ctx.v_size; ++v) {
      if (!ctx.texels.support(u, v)) continue;
      const Vec3 g = st.normal_raw.rgb(u, v);
      const double len = g.norm();
      st.normals_uv.grid.set_rgb(u, v, len > 0.0 ? Vec3(g / len) : Vec3(0, 0, 1));
    }
}

inline RenderedImage compose(RenderState& st, const Grid& texture) {
  const auto& topo = st.ctx->topo;
  const auto& fb = st.frags;
  RenderedImage img{Image(fb.height, fb.width, 3), Mask(fb.height, fb.width)};
  st.uv_points.assign(fb.tri_id.size(), Vec2::Zero());
  for (int y = 0; y < fb.height; ++y)
    for (int x = 0; x < fb.width; ++x) {
      const auto k = fb.at(y, x);
      const int t = fb.tri_id[k];
      if (t < 0) {
        img.rgb.set_rgb(y, x, st.options.background);
        continue;
      }
      const auto& tr = topo.triangles[t];
      const Vec3& l = fb.bary[k];
      const Vec2 p = l[0] * topo.uv_coords[tr[0]] + l[1] * topo.uv_coords[tr[1]] +
                     l[2] * topo.uv_coords[tr[2]];
      st.uv_points[k] = p;
      const auto fp = bilinear_footprint(texture.rows, texture.cols, p.x(), p.y());
      for (int ch = 0; ch < 3; ++ch) img.rgb(y, x, ch) = sample_channel(texture, fp, ch);
      img.coverage.set(y, x, true);
    }
  return img;
}

inline RenderResult render_impl(std::shared_ptr<const RenderContext> ctx,
                                const ProjectionParams& m,
                                const SHLighting& light,
                                const VertexShape& shape,
                                const UVAlbedoMap& albedo,
                                const RenderOptions& opts,
                                const FragmentBuffer* frozen) {
  if (shape.size() != ctx->topo.num_vertices)
    throw shape_error("render: shape has " + std::to_string(shape.size()) +
                      " vertices, topology has " +
                      std::to_string(ctx->topo.num_vertices));
  check_albedo(*ctx, albedo);
  RenderResult r;
  auto& st = r.state;
  st.ctx = std::move(ctx);
  st.options = opts;
  st.m = m;
  st.light = light;
  st.shape = shape;
  st.albedo.grid = albedo.grid;
  st.albedo.mask = st.ctx->texels.support;
  st.rotation = rotation(m);
  st.projected = project(shape, m);
  build_normal_map(st);
  st.shaded = shade_full(st.albedo, st.normals_uv, light);
  if (frozen) {
    if (frozen->width != opts.width || frozen->height != opts.height)
      throw shape_error("frozen coverage has a different image size");
    st.frags = refragment(st.projected, st.ctx->topo, *frozen);
  } else {
    st.frags = rasterize(st.projected, st.ctx->topo, opts.width, opts.height);
  }
  r.image = compose(st, st.shaded.texture.grid);
  return r;
}

}  // namespace detail

// Renders shape (per-vertex) with a UV albedo map under SH lighting.
inline RenderResult render(std::shared_ptr<const RenderContext> ctx,
                           const ProjectionParams& m, const SHLighting& light,
                           const VertexShape& shape, const UVAlbedoMap& albedo,
                           const RenderOptions& opts = {}) {
  return detail::render_impl(std::move(ctx), m, light, shape, albedo, opts, nullptr);
}

// Same, with the shape given as a UV position map.
inline RenderResult render(std::shared_ptr<const RenderContext> ctx,
                           const ProjectionParams& m, const SHLighting& light,
                           const UVShapeMap& shape_uv, const UVAlbedoMap& albedo,
                           const RenderOptions& opts = {}) {
  auto shape = shape_from_uv(shape_uv, ctx->topo);
  return detail::render_impl(std::move(ctx), m, light, shape, albedo, opts, nullptr);
}

// Re-renders with the pixel-to-triangle assignment of `coverage` held fixed.
inline RenderResult render_with_coverage(std::shared_ptr<const RenderContext> ctx,
                                         const ProjectionParams& m,
                                         const SHLighting& light,
                                         const VertexShape& shape,
                                         const UVAlbedoMap& albedo,
                                         const RenderOptions& opts,
                                         const FragmentBuffer& coverage) {
  return detail::render_impl(std::move(ctx), m, light, shape, albedo, opts, &coverage);
}

// Renders a precomputed UV texture (no shading) through the projection.
inline RenderResult render_texture(std::shared_ptr<const RenderContext> ctx,
                                   const ProjectionParams& m,
                                   const VertexShape& shape,
                                   const UVTextureMap& texture,
                                   const RenderOptions& opts = {}) {
  detail::check_albedo(*ctx, texture);
  RenderResult r;
  auto& st = r.state;
  st.ctx = std::move(ctx);
  st.options = opts;
  st.m = m;
  st.shape = shape;
  st.textured = true;
  st.rotation = rotation(m);
  st.projected = project(shape, m);
  st.frags = rasterize(st.projected, st.ctx->topo, opts.width, opts.height);
  r.image = detail::compose(st, texture.grid);
  return r;
}

struct RenderGradient {
  Grid albedo;               // U x V x 3
  SHLighting light;          // 27 partials
  Eigen::VectorXd vertices;  // 3Q
  ProjectionGradient m = ProjectionGradient::Zero();
};

// Backward pass with the coverage of the forward call held fixed. Albedo
// and lighting gradients are exact; vertex and projection gradients are
// exact for the frozen pixel-to-triangle assignment.
inline RenderGradient render_backward(const RenderState& st, const Grid& upstream) {
  if (st.textured) throw domain_error("render_backward: textured renders carry no parameters");
  const auto& fb = st.frags;
  if (upstream.rows != fb.height || upstream.cols != fb.width || upstream.channels != 3)
    throw shape_error("render_backward: upstream does not match the rendered image");
  const auto& ctx = *st.ctx;
  const auto& topo = ctx.topo;
  const Grid& texture = st.shaded.texture.grid;

  Grid dtexture(ctx.u_size, ctx.v_size, 3);
  std::vector<Vec2> dproj(topo.num_vertices, Vec2::Zero());
  for (int y = 0; y < fb.height; ++y)
    for (int x = 0; x < fb.width; ++x) {
      const auto k = fb.at(y, x);
      const int t = fb.tri_id[k];
      if (t < 0) continue;
      const double* up = &upstream.data[upstream.index(y, x)];
      if (up[0] == 0.0 && up[1] == 0.0 && up[2] == 0.0) continue;
      const auto sg = sample_uv_backward(texture, st.uv_points[k], up);
      for (int j = 0; j < 4; ++j)
        for (int ch = 0; ch < 3; ++ch)
          dtexture(sg.texels.row[j], sg.texels.col[j], ch) += sg.texels.weight[j] * up[ch];
      const auto& tr = topo.triangles[t];
      const Vec3 dl(sg.dp.dot(topo.uv_coords[tr[0]]), sg.dp.dot(topo.uv_coords[tr[1]]),
                    sg.dp.dot(topo.uv_coords[tr[2]]));
      const auto dv = raster::barycentric_backward(
          st.projected.coords[tr[0]], st.projected.coords[tr[1]],
          st.projected.coords[tr[2]], fb.bary[k], dl);
      for (int i = 0; i < 3; ++i) dproj[tr[i]] += dv[i];
    }

  const auto sg = shade_backward(st.albedo, st.normals_uv, st.light, dtexture);
  RenderGradient out;
  out.albedo = sg.albedo;
  out.light = sg.light;

  // Through normalization of the interpolated normal map.
  Grid draw(ctx.u_size, ctx.v_size, 3);
  for (int u = 0; u < ctx.u_size; ++u)
    for (int v = 0; v < ctx.v_size; ++v) {
      if (!ctx.texels.support(u, v)) continue;
      const Vec3 g = st.normal_raw.rgb(u, v);
      const double len = g.norm();
      if (!(len > 0.0)) continue;
      const Vec3 n = st.normals_uv.grid.rgb(u, v);
      const Vec3 dn = sg.normals.rgb(u, v);
      draw.set_rgb(u, v, (dn - n * n.dot(dn)) / len);
    }
  const auto drot_normals = vertex_attribute_to_uv_backward(ctx.texels, topo, draw);

  Mat3 dR = Mat3::Zero();
  std::vector<Vec3> dunit(topo.num_vertices);
  for (int i = 0; i < topo.num_vertices; ++i) {
    dR += drot_normals[i] * st.normals.unit[i].transpose();
    dunit[i] = st.rotation.transpose() * drot_normals[i];
  }
  const Eigen::VectorXd dshape_normals =
      vertex_normals_backward(st.shape, topo, st.normals, dunit);
  const auto pb = project_backward(st.shape, st.m, dproj, dR);
  out.vertices = pb.dshape + dshape_normals;
  out.m = pb.dm;
  return out;
}

// Occlusion-aware compositing: rendered * M + input * (1 - M).
inline Image composite_with_mask(const Image& rendered, const Image& input,
                                 const Grid& mask) {
  require_same_shape(rendered, input, "composite_with_mask");
  if (mask.rows != rendered.rows || mask.cols != rendered.cols || mask.channels != 1)
    throw shape_error("composite_with_mask: mask dimension mismatch");
  Image out(rendered.rows, rendered.cols, rendered.channels);
  for (int y = 0; y < rendered.rows; ++y)
    for (int x = 0; x < rendered.cols; ++x) {
      const double w = mask(y, x);
      for (int ch = 0; ch < rendered.channels; ++ch)
        out(y, x, ch) = rendered(y, x, ch) * w + input(y, x, ch) * (1.0 - w);
    }
  return out;
}

// Gradient of the composite with respect to the rendered image.
inline Grid composite_with_mask_backward(const Grid& mask, const Grid& upstream) {
  Grid out(upstream.rows, upstream.cols, upstream.channels);
  for (int y = 0; y < upstream.rows; ++y)
    for (int x = 0; x < upstream.cols; ++x)
      for (int ch = 0; ch < upstream.channels; ++ch)
        out(y, x, ch) = upstream(y, x, ch) * mask(y, x);
  return out;
}

// Pseudo ground-truth texture: every face-region texel is mapped to its
// surface point, projected into the input image and bilinearly sampled.
// A texel is valid when its rotated normal faces the camera (negative z),
// its projection lies inside the image, and every pixel of its bilinear
// footprint is covered by the projected mesh.
inline UVTextureMap unwarp_to_uv(std::shared_ptr<const RenderContext> ctx,
                                 const Image& input, const VertexShape& shape,
                                 const ProjectionParams& m) {
  const auto& topo = ctx->topo;
  const auto& tm = ctx->texels;
  if (shape.size() != topo.num_vertices)
    throw shape_error("unwarp_to_uv: vertex count mismatch");
  const Mat3 r = rotation(m);
  const auto proj = project(shape, m);
  const auto fb = rasterize(proj, topo, input.cols, input.rows);
  const auto normals = vertex_normals(shape, topo);

  UVTextureMap out(ctx->u_size, ctx->v_size);
  for (int u = 0; u < ctx->u_size; ++u)
    for (int v = 0; v < ctx->v_size; ++v) {
      if (!tm.region(u, v)) continue;
      const auto& tr = topo.triangles[tm.tri[tm.at(u, v)]];
      const Vec3& w = tm.bary[tm.at(u, v)];
      const Vec3 n = r * (w[0] * normals[tr[0]] + w[1] * normals[tr[1]] +
                          w[2] * normals[tr[2]]);
      if (!(n.z() < 0.0)) continue;
      const Vec2 px = w[0] * proj.coords[tr[0]] + w[1] * proj.coords[tr[1]] +
                      w[2] * proj.coords[tr[2]];
      const double row = px.y() - 0.5, col = px.x() - 0.5;
      if (!(row >= 0.0 && row <= input.rows - 1 && col >= 0.0 && col <= input.cols - 1))
        continue;
      const auto fp = bilinear_footprint(input.rows, input.cols, row, col);
      bool covered = true;
      for (int j = 0; j < 4; ++j)
        if (fp.weight[j] > 0.0 && fb.tri_id[fb.at(fp.row[j], fp.col[j])] < 0) covered = false;
      if (!covered) continue;
      for (int ch = 0; ch < 3; ++ch) out.grid(u, v, ch) = sample_channel(input, fp, ch);
      out.mask.set(u, v, true);
    }
  return out;
}

}  // namespace facefit
