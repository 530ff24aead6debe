// Renders the synthetic face, unwraps the render back into UV space and
// relights it with a light coming from the side.
//
//   relight_sample [output_dir]

#include <filesystem>
#include <iostream>

#include "facefit/facefit.hpp"

int main(int argc, char** argv) {
  namespace ff = facefit;
  const std::filesystem::path dir = argc > 1 ? argv[1] : ".";

  const auto model = ff::synthetic::make_model();
  const auto ctx = ff::make_render_context(model.topo, model.u_size, model.v_size);
  const ff::LinearUVDecoder albedo_decoder(model.albedo, ctx);

  auto m = ff::synthetic::frontal_pose(128);
  m.yaw = 0.3;
  const auto light = ff::synthetic::default_light();
  const ff::VertexShape shape(model.shape.mean);
  const auto albedo = albedo_decoder.to_map(model.albedo.mean);

  const auto original = ff::render(ctx, m, light, shape, albedo);
  ff::io::save_png(dir / "original.png", original.image.rgb);

  const auto texture = ff::unwarp_to_uv(ctx, original.image.rgb, shape, m);
  std::cout << "unwrapped " << texture.mask.count() << " texels\n";

  ff::SHLighting side = light;
  for (int ch = 0; ch < 3; ++ch) side.at(ch, 3) = -1.0;  // x band
  const auto relit = ff::relight_texture(ctx, shape, texture, light, side, m);
  ff::io::save_png(dir / "relit.png", relit.image.rgb);
  std::cout << "relit image written, " << relit.excluded << " texels kept as is\n";
  return 0;
}
