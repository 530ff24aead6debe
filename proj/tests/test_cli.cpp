#include <gtest/gtest.h>

#include <sys/wait.h>

#include "test_util.hpp"

using namespace facefit;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run cli(const std::string& args, const fs::path& dir) {
  const auto out = dir / "stdout.txt", err = dir / "stderr.txt";
  const std::string cmd = std::string("\"") + FACEFIT_CLI + "\" " + args + " >\"" + out.string() +
                          "\" 2>\"" + err.string() + "\"";
  const int status = std::system(cmd.c_str());
  Run r{WIFEXITED(status) ? WEXITSTATUS(status) : -1, io::read_file(out), io::read_file(err)};
  return r;
}

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

fs::path workdir(const std::string& name) {
  const auto d = testutil::temp_dir(name);
  for (const auto& e : fs::directory_iterator(d)) fs::remove_all(e.path());
  return d;
}

}  // namespace

TEST(Cli, RenderIsDeterministic) {
  const auto d = workdir("cli_render");
  ASSERT_EQ(cli("make-model --out " + q(d / "m.bin") + " --params " + q(d / "p.txt") + " --size 64", d).code, 0);
  const std::string common = "render --model " + q(d / "m.bin") + " --params " + q(d / "p.txt") +
                             " --width 64 --height 64";
  const auto a = cli(common + " --out " + q(d / "a.png") + " --fragments " + q(d / "a.frag"), d);
  ASSERT_EQ(a.code, 0) << a.err;
  EXPECT_TRUE(a.err.empty());
  ASSERT_EQ(cli(common + " --out " + q(d / "b.png") + " --fragments " + q(d / "b.frag"), d).code, 0);
  EXPECT_EQ(io::read_file(d / "a.png"), io::read_file(d / "b.png"));
  EXPECT_EQ(io::read_file(d / "a.frag"), io::read_file(d / "b.frag"));
  // Matches the library render of the same parameters.
  const auto& s = testutil::Synthetic::get();
  const auto p = io::load_params(d / "p.txt");
  const auto img = render(s.ctx, p.m, p.light, VertexShape(s.shape_decoder.decode(p.f_S)), s.albedo(p.f_A),
                          {64, 64, {}}).image.rgb;
  EXPECT_EQ(io::read_file(d / "a.png"), io::encode_png(img));
}

TEST(Cli, UnwrapAndRelight) {
  const auto d = workdir("cli_unwrap");
  ASSERT_EQ(cli("make-model --out " + q(d / "m.bin") + " --params " + q(d / "p.txt") + " --size 64", d).code, 0);
  const std::string model = " --model " + q(d / "m.bin") + " --params " + q(d / "p.txt");
  ASSERT_EQ(cli("render" + model + " --width 64 --height 64 --out " + q(d / "r.pfm"), d).code, 0);
  const auto u = cli("unwrap" + model + " --image " + q(d / "r.pfm") + " --out " + q(d / "t.uvm"), d);
  ASSERT_EQ(u.code, 0) << u.err;
  EXPECT_EQ(io::load_uvmap(d / "t.uvm").u_size(), 48);
  std::ofstream(d / "l.txt") << io::format_light(synthetic::default_light());
  const auto r = cli("relight" + model + " --light " + q(d / "l.txt") + " --image " + q(d / "r.pfm") +
                         " --out " + q(d / "o.png"),
                     d);
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("excluded_texels="), std::string::npos);
  EXPECT_EQ(io::load_image(d / "o.png").rows, 64);
}

TEST(Cli, GradcheckPasses) {
  const auto d = workdir("cli_gradcheck");
  const auto r = cli("gradcheck --trials 5", d);
  EXPECT_EQ(r.code, 0) << r.out << r.err;
  EXPECT_NE(r.out.find("PASS"), std::string::npos);
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos);
}

TEST(Cli, ErrorsGoToStderrWithNonzeroExit) {
  const auto d = workdir("cli_errors");
  ASSERT_EQ(cli("make-model --out " + q(d / "m.bin") + " --params " + q(d / "p.txt"), d).code, 0);
  std::ofstream(d / "bad.cfg") << "width = 64\nnot_a_key = 1\n";
  std::ofstream(d / "bad.txt") << "m 1 2 3\n";
  std::ofstream(d / "junk.bin") << "junk";
  const std::vector<std::string> cases = {
      "",
      "no-such-command",
      "render --model " + q(d / "m.bin"),
      "render --model " + q(d / "missing.bin") + " --params " + q(d / "p.txt") + " --out " + q(d / "x.png"),
      "render --model " + q(d / "junk.bin") + " --params " + q(d / "p.txt") + " --out " + q(d / "x.png"),
      "render --model " + q(d / "m.bin") + " --params " + q(d / "bad.txt") + " --out " + q(d / "x.png"),
      "render --model " + q(d / "m.bin") + " --config " + q(d / "bad.cfg") + " --params " + q(d / "p.txt") +
          " --out " + q(d / "x.png"),
      "gradcheck --trials 0",
  };
  for (const auto& c : cases) {
    const auto r = cli(c, d);
    EXPECT_NE(r.code, 0) << c;
    EXPECT_TRUE(r.out.empty()) << c << "\n" << r.out;
    EXPECT_FALSE(r.err.empty()) << c;
  }
  EXPECT_FALSE(fs::exists(d / "x.png"));
  const auto r = cli("render --model " + q(d / "m.bin") + " --config " + q(d / "bad.cfg") + " --params " +
                         q(d / "p.txt") + " --out " + q(d / "x.png"),
                     d);
  EXPECT_NE(r.err.find("not_a_key"), std::string::npos) << r.err;
}
