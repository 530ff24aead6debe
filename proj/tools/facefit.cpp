// facefit command-line tool: rendering, unwrapping, fitting, relighting and
// gradient checks on morphable face models.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <random>
#include <string>

#include "facefit/facefit.hpp"

namespace ff = facefit;
namespace fio = facefit::io;

namespace {

struct Common {
  std::string model;
  std::string config;
  unsigned long long seed = 0;
};

struct Loaded {
  ff::FaceModel model;
  std::shared_ptr<const ff::RenderContext> ctx;
  fio::RunConfig cfg;
  std::unique_ptr<ff::LinearDecoder> shape;
  std::unique_ptr<ff::LinearUVDecoder> albedo;
};

Loaded load(const Common& c) {
  Loaded l;
  l.model = fio::load_model(c.model);
  if (!c.config.empty()) l.cfg = fio::load_run_config(c.config);
  l.ctx = ff::make_render_context(l.model.topo, l.model.u_size, l.model.v_size);
  const int ls = std::min(l.cfg.shape_dim, l.model.shape.param_dim());
  const int la = std::min(l.cfg.albedo_dim, l.model.albedo.param_dim());
  l.shape = std::make_unique<ff::LinearDecoder>(l.model.shape.truncated(ls));
  l.albedo = std::make_unique<ff::LinearUVDecoder>(l.model.albedo.truncated(la), l.ctx);
  return l;
}

// Parameter files may carry longer vectors than a truncated model uses.
ff::FitParams fit_to(const ff::FitParams& p, const Loaded& l) {
  ff::FitParams q = p;
  auto cut = [](const Eigen::VectorXd& v, int n) {
    Eigen::VectorXd out = Eigen::VectorXd::Zero(n);
    const auto k = std::min<Eigen::Index>(n, v.size());
    out.head(k) = v.head(k);
    return out;
  };
  q.f_S = cut(p.f_S, l.shape->param_dim());
  q.f_A = cut(p.f_A, l.albedo->param_dim());
  return q;
}

ff::VertexShape shape_of(const Loaded& l, const ff::FitParams& p) {
  return ff::VertexShape(l.shape->decode(p.f_S));
}
ff::UVAlbedoMap albedo_of(const Loaded& l, const ff::FitParams& p) {
  return l.albedo->to_map(l.albedo->decode(p.f_A));
}

ff::RenderOptions options_for(const Loaded& l, int width, int height) {
  auto o = l.cfg.render();
  if (width > 0) o.width = width;
  if (height > 0) o.height = height;
  return o;
}

void add_common(CLI::App* cmd, Common& c, bool needs_model = true) {
  auto* opt = cmd->add_option("--model", c.model, "model file (binary container)");
  if (needs_model) opt->required()->check(CLI::ExistingFile);
  cmd->add_option("--config", c.config, "run configuration (key = value)")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "seed for randomized initialization");
}

void save_fit_params(const std::string& path, const ff::FitParams& p) {
  if (!path.empty()) fio::save_params(path, p);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"facefit: morphable face model rendering and fitting"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  // make-model
  std::string mm_out, mm_params;
  int mm_size = 128;
  auto* make_model = app.add_subcommand("make-model", "write the bundled synthetic model");
  make_model->add_option("--out", mm_out, "model file to write")->required();
  make_model->add_option("--params", mm_params, "also write frontal default parameters");
  make_model->add_option("--size", mm_size, "image size the default pose is centered in")
      ->check(CLI::PositiveNumber);

  // render
  Common rc;
  std::string r_params, r_out, r_fragments, r_coverage, r_texture;
  int r_w = 0, r_h = 0;
  auto* render = app.add_subcommand("render", "render parameters to an image");
  add_common(render, rc);
  render->add_option("--params", r_params, "parameter file")->required()->check(CLI::ExistingFile);
  render->add_option("--out", r_out, "output image (.png or .pfm)")->required();
  render->add_option("--width", r_w, "image width (overrides config)");
  render->add_option("--height", r_h, "image height (overrides config)");
  render->add_option("--texture", r_texture, "render this UV texture (.uvm) instead of shading")
      ->check(CLI::ExistingFile);
  render->add_option("--coverage", r_coverage, "write the coverage mask as an image");
  render->add_option("--fragments", r_fragments, "write the fragment buffer dump");

  // unwrap
  Common uc;
  std::string u_params, u_image, u_out, u_preview;
  auto* unwrap = app.add_subcommand("unwrap", "sample an image into a UV texture");
  add_common(unwrap, uc);
  unwrap->add_option("--params", u_params, "parameter file")->required()->check(CLI::ExistingFile);
  unwrap->add_option("--image", u_image, "input image")->required()->check(CLI::ExistingFile);
  unwrap->add_option("--out", u_out, "UV texture (.uvm)")->required();
  unwrap->add_option("--preview", u_preview, "also write the texture as an image");

  // fit
  Common fc;
  std::string f_image, f_landmarks, f_mask, f_init, f_out, f_report, f_render;
  auto* fit = app.add_subcommand("fit", "fit model parameters to an image");
  add_common(fit, fc);
  fit->add_option("--image", f_image, "input image")->required()->check(CLI::ExistingFile);
  fit->add_option("--landmarks", f_landmarks, "68 landmarks, one 'x y [visible]' per line")
      ->check(CLI::ExistingFile);
  fit->add_option("--mask", f_mask, "occlusion mask image (white = face)")->check(CLI::ExistingFile);
  fit->add_option("--init", f_init, "initial parameters")->check(CLI::ExistingFile);
  fit->add_option("--out", f_out, "fitted parameter file")->required();
  fit->add_option("--report", f_report, "JSON report");
  fit->add_option("--render", f_render, "render of the fitted parameters");

  // fit-scan
  Common sc;
  std::string s_mesh, s_out, s_params;
  auto* fit_scan = app.add_subcommand("fit-scan", "fit shape parameters to a registered mesh");
  add_common(fit_scan, sc);
  fit_scan->add_option("--mesh", s_mesh, "OBJ mesh in model topology")->required()->check(CLI::ExistingFile);
  fit_scan->add_option("--out", s_out, "JSON report")->required();
  fit_scan->add_option("--params", s_params, "write f_S into a parameter file");

  // fit-texture
  Common tc;
  std::string t_texture, t_params, t_out, t_params_out;
  auto* fit_texture = app.add_subcommand("fit-texture", "fit albedo and lighting to a UV texture");
  add_common(fit_texture, tc);
  fit_texture->add_option("--texture", t_texture, "target UV texture (.uvm)")->required()->check(CLI::ExistingFile);
  fit_texture->add_option("--params", t_params, "shape and pose supplying normals")->required()->check(CLI::ExistingFile);
  fit_texture->add_option("--out", t_out, "JSON report")->required();
  fit_texture->add_option("--params-out", t_params_out, "write parameters with fitted f_A and L");

  // relight
  Common lc;
  std::string l_params, l_light, l_out, l_image;
  auto* relight = app.add_subcommand("relight", "render under a source lighting");
  add_common(relight, lc);
  relight->add_option("--params", l_params, "target parameters")->required()->check(CLI::ExistingFile);
  relight->add_option("--light", l_light, "source lighting, 27 numbers")->required()->check(CLI::ExistingFile);
  relight->add_option("--image", l_image, "relight this image's texture instead of the albedo")
      ->check(CLI::ExistingFile);
  relight->add_option("--out", l_out, "output image")->required();

  // gradcheck
  unsigned long long g_seed = 1;
  int g_trials = 50;
  std::string g_only;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of all gradients");
  gradcheck->add_option("--seed", g_seed, "random seed");
  gradcheck->add_option("--trials", g_trials, "trials per check")->check(CLI::PositiveNumber);
  gradcheck->add_option("--only", g_only, "run checks whose name contains this");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*make_model) {
      const auto model = ff::synthetic::make_model();
      fio::save_model(mm_out, model);
      if (!mm_params.empty()) {
        ff::FitParams p;
        p.m = ff::synthetic::frontal_pose(mm_size);
        p.light = ff::synthetic::default_light();
        p.f_S = Eigen::VectorXd::Zero(model.shape.param_dim());
        p.f_A = Eigen::VectorXd::Zero(model.albedo.param_dim());
        fio::save_params(mm_params, p);
      }
      return 0;
    }

    if (*render) {
      const auto l = load(rc);
      const auto p = fit_to(fio::load_params(r_params), l);
      const auto opts = options_for(l, r_w, r_h);
      const auto shape = shape_of(l, p);
      const auto result = r_texture.empty()
                              ? ff::render(l.ctx, p.m, p.light, shape, albedo_of(l, p), opts)
                              : ff::render_texture(l.ctx, p.m, shape, fio::load_uvmap(r_texture), opts);
      fio::save_image(r_out, result.image.rgb);
      if (!r_coverage.empty()) {
        ff::Image cov(opts.height, opts.width, 3);
        for (int y = 0; y < opts.height; ++y)
          for (int x = 0; x < opts.width; ++x)
            if (result.image.coverage(y, x)) cov.set_rgb(y, x, ff::Vec3::Ones());
        fio::save_image(r_coverage, cov);
      }
      if (!r_fragments.empty()) fio::atomic_write(r_fragments, fio::encode_fragments(result.fragments()));
      return 0;
    }

    if (*unwrap) {
      const auto l = load(uc);
      const auto p = fit_to(fio::load_params(u_params), l);
      const auto tex = ff::unwarp_to_uv(l.ctx, fio::load_image(u_image), shape_of(l, p), p.m);
      fio::save_uvmap(u_out, tex);
      if (!u_preview.empty()) fio::save_image(u_preview, tex.grid);
      std::cout << "valid_texels=" << tex.mask.count() << "\n";
      return 0;
    }

    if (*fit) {
      const auto l = load(fc);
      const auto image = fio::load_image(f_image);
      auto cfg = l.cfg.fit_config();
      cfg.render.width = image.cols;
      cfg.render.height = image.rows;
      std::optional<ff::LandmarkSet> lms;
      const std::string lpath = !f_landmarks.empty() ? f_landmarks : l.cfg.landmarks;
      if (!lpath.empty()) lms = fio::load_landmarks(lpath);
      std::optional<ff::Grid> mask;
      const std::string mpath = !f_mask.empty() ? f_mask : l.cfg.mask;
      if (!mpath.empty()) mask = fio::load_mask(mpath);
      if (!lms) {
        // Without landmarks the pose stage has nothing to descend.
        for (auto& s : cfg.stages) s.landmark_term = false;
        std::erase_if(cfg.stages, [](const ff::FitStage& s) { return !s.image_term; });
      }

      ff::FitParams init;
      if (!f_init.empty()) {
        init = fit_to(fio::load_params(f_init), l);
      } else {
        init.m = ff::synthetic::frontal_pose(std::min(image.cols, image.rows));
        init.m.t2d = ff::Vec2(image.cols / 2.0, image.rows / 2.0);
        init.light = ff::synthetic::default_light();
        init.f_S = Eigen::VectorXd::Zero(l.shape->param_dim());
        init.f_A = Eigen::VectorXd::Zero(l.albedo->param_dim());
      }
      if (l.cfg.init_noise > 0.0) {
        std::mt19937_64 rng(fc.seed);
        std::normal_distribution<double> n(0.0, l.cfg.init_noise);
        for (auto& v : init.f_S) v += n(rng);
        for (auto& v : init.f_A) v += n(rng);
      }
      const auto result = ff::fit_image(l.ctx, image, mask ? &*mask : nullptr, lms ? &*lms : nullptr,
                                        *l.shape, *l.albedo, cfg, init);
      std::optional<double> nme;
      if (lms) {
        const auto proj = ff::project(shape_of(l, result.params), result.params.m);
        std::vector<ff::Vec2> pred, gt;
        for (std::size_t k = 0; k < lms->points.size(); ++k) {
          pred.push_back(proj.coords[l.model.topo.landmark_indices[k]]);
          gt.push_back(lms->points[k]);
        }
        const double norm = l.cfg.normalizer == ff::NmeNormalizer::inter_ocular
                                ? (gt[36] - gt[45]).norm()
                                : ff::bounding_box_size(gt);
        nme = ff::nme(pred, gt, norm);
      }
      fio::save_params(f_out, result.params);
      const auto report = fio::fit_report(result, nme);
      if (!f_report.empty()) fio::save_json(f_report, report);
      if (!f_render.empty()) {
        const auto r = ff::render(l.ctx, result.params.m, result.params.light, shape_of(l, result.params),
                                  albedo_of(l, result.params), cfg.render);
        fio::save_image(f_render, r.image.rgb);
      }
      std::cout << "loss=" << fio::fmt(result.final_loss) << "\n"
                << "rec_image=" << fio::fmt(result.final_parts.rec_image) << "\n"
                << "iterations=" << result.iterations << "\n"
                << "termination=" << result.termination << "\n";
      if (nme) std::cout << "nme=" << fio::fmt(*nme) << "\n";
      return 0;
    }

    if (*fit_scan) {
      const auto l = load(sc);
      const auto mesh = fio::load_obj(s_mesh);
      if (mesh.shape.size() != l.model.num_vertices())
        throw ff::shape_error("mesh has " + std::to_string(mesh.shape.size()) +
                              " vertices, model has " + std::to_string(l.model.num_vertices()));
      ff::ShapeFitConfig cfg;
      cfg.descent = l.cfg.descent();
      cfg.normal_weight = l.cfg.normal_weight;
      cfg.normalizer = l.cfg.normalizer;
      Eigen::VectorXd init = Eigen::VectorXd::Zero(l.shape->param_dim());
      if (l.cfg.init_noise > 0.0) {
        std::mt19937_64 rng(sc.seed);
        std::normal_distribution<double> n(0.0, l.cfg.init_noise);
        for (auto& v : init) v = n(rng);
      }
      const auto r = ff::fit_shape(mesh.shape, l.model.topo, *l.shape, cfg, init);
      nlohmann::json j;
      j["f_S"] = std::vector<double>(r.f_S.data(), r.f_S.data() + r.f_S.size());
      j["nme"] = r.nme;
      j["trace"] = r.trace;
      j["termination"] = r.termination;
      fio::save_json(s_out, j);
      if (!s_params.empty()) {
        ff::FitParams p;
        p.m = ff::synthetic::frontal_pose(l.cfg.width);
        p.light = ff::synthetic::default_light();
        p.f_S = r.f_S;
        p.f_A = Eigen::VectorXd::Zero(l.albedo->param_dim());
        fio::save_params(s_params, p);
      }
      std::cout << "nme=" << fio::fmt(r.nme) << "\n"
                << "termination=" << r.termination << "\n";
      return 0;
    }

    if (*fit_texture) {
      const auto l = load(tc);
      const auto p = fit_to(fio::load_params(t_params), l);
      const auto target = fio::load_uvmap(t_texture);
      ff::TextureFitConfig cfg;
      cfg.descent = l.cfg.descent();
      cfg.smoothing = l.cfg.smoothing;
      Eigen::VectorXd fa = Eigen::VectorXd::Zero(l.albedo->param_dim());
      if (l.cfg.init_noise > 0.0) {
        std::mt19937_64 rng(tc.seed);
        std::normal_distribution<double> n(0.0, l.cfg.init_noise);
        for (auto& v : fa) v = n(rng);
      }
      const auto shape = shape_of(l, p);
      const auto opts = l.cfg.render();
      const auto r =
          l.cfg.texture_rendered
              ? ff::fit_albedo_lighting_rendered(l.ctx, target, shape, p.m, opts, *l.albedo, cfg, fa, p.light)
              : ff::fit_albedo_lighting(target,
                                        ff::render(l.ctx, p.m, p.light, shape, albedo_of(l, p), opts)
                                            .state.normals_uv,
                                        *l.albedo, cfg, fa, p.light);
      nlohmann::json j;
      j["f_A"] = std::vector<double>(r.f_A.data(), r.f_A.data() + r.f_A.size());
      j["L"] = r.light.coeffs;
      j["residual"] = r.residual;
      j["trace"] = r.trace;
      j["termination"] = r.termination;
      fio::save_json(t_out, j);
      if (!t_params_out.empty()) {
        auto q = p;
        q.f_A = r.f_A;
        q.light = r.light;
        fio::save_params(t_params_out, q);
      }
      std::cout << "residual=" << fio::fmt(r.residual) << "\n"
                << "termination=" << r.termination << "\n";
      return 0;
    }

    if (*relight) {
      const auto l = load(lc);
      const auto p = fit_to(fio::load_params(l_params), l);
      const auto source = fio::load_light(l_light);
      const auto shape = shape_of(l, p);
      if (l_image.empty()) {
        const auto img = ff::relight(l.ctx, shape, albedo_of(l, p), source, p.m, l.cfg.render());
        fio::save_image(l_out, img.rgb);
      } else {
        const auto input = fio::load_image(l_image);
        auto opts = l.cfg.render();
        opts.width = input.cols;
        opts.height = input.rows;
        const auto tex = ff::unwarp_to_uv(l.ctx, input, shape, p.m);
        const auto r = ff::relight_texture(l.ctx, shape, tex, p.light, source, p.m, opts);
        fio::save_image(l_out, r.image.rgb);
        std::cout << "excluded_texels=" << r.excluded << "\n";
      }
      return 0;
    }

    if (*gradcheck) {
      const auto results = ff::gradcheck::run_suite(static_cast<unsigned>(g_seed), g_trials, g_only);
      bool ok = !results.empty();
      for (const auto& r : results) {
        std::printf("%-24s trials=%d max_rel_error=%.3e tol=%.0e %s\n", r.name.c_str(), r.trials,
                    r.max_rel_error, r.tolerance, r.pass() ? "PASS" : "FAIL");
        ok = ok && r.pass();
      }
      return ok ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
