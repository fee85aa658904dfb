#include "sact/cli.hpp"
#include "sact/io.hpp"
#include "sact/residual.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace sact;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch() {
  const fs::path dir = fs::temp_directory_path() / "sact_unit_cli";
  fs::create_directories(dir);
  return dir;
}

fs::path write_config(const std::string& name, const NetworkSpec& spec) {
  const fs::path p = scratch() / name;
  std::ofstream(p) << format_config(spec);
  return p;
}

}  // namespace

TEST(Cli, FlopsReportsTotal) {
  const auto cfg = write_config("r101.cfg", resnet101_spec());
  const auto r = run({"flops", "--arch", cfg.string(), "--resolution", "224"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("total"), std::string::npos);
  EXPECT_NE(r.out.find("1.5599e+10"), std::string::npos) << r.out;
}

TEST(Cli, UnknownCommandPrintsUsage) {
  const auto r = run({"frobnicate"});
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.err.find("unknown command 'frobnicate'"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("train"), std::string::npos);
}

TEST(Cli, NoArgumentsIsAnError) { EXPECT_NE(run({}).code, 0); }

TEST(Cli, MissingConfigNamesFlagAndPath) {
  const auto r = run({"flops", "--arch", "/nonexistent/net.cfg"});
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.err.find("--arch"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("/nonexistent/net.cfg"), std::string::npos) << r.err;
}

TEST(Cli, MissingCheckpointNamesFlagAndPath) {
  const auto cfg = write_config("desk.cfg", desk_spec());
  const auto r = run({"eval", "--arch", cfg.string(), "--checkpoint", "/nonexistent/a.ckpt", "--data", "/nonexistent/d.sd"});
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.err.find("--checkpoint"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("/nonexistent/a.ckpt"), std::string::npos) << r.err;
}

TEST(Cli, GradcheckPasses) {
  const auto r = run({"gradcheck", "--seed", "7", "--precision", "double"});
  EXPECT_EQ(r.code, 0) << r.out << r.err;
  EXPECT_NE(r.out.find("PASS"), std::string::npos);
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos) << r.out;
}

TEST(Cli, GradcheckRequiresDouble) {
  EXPECT_NE(run({"gradcheck", "--precision", "single"}).code, 0);
}

TEST(Cli, TrainEvalPonderMapPipeline) {
  const fs::path dir = scratch();
  NetworkSpec spec = desk_spec();
  spec.halting = HaltingMode::sact;
  const auto cfg = write_config("desk-sact.cfg", spec);
  const auto data = (dir / "d.sd").string();
  ASSERT_EQ(run({"make-data", "--out", data, "--seed", "1", "--count", "64"}).code, 0);
  EXPECT_TRUE(fs::exists(masks_path(data)));

  const auto ckpt = (dir / "m.ckpt").string();
  const auto t = run({"train", "--arch", cfg.string(), "--data", data, "--out", ckpt, "--epochs", "1", "--tau", "0.01"});
  ASSERT_EQ(t.code, 0) << t.err;
  EXPECT_TRUE(fs::exists(ckpt));
  EXPECT_TRUE(fs::exists(ckpt + ".log"));

  const auto e = run({"eval", "--arch", cfg.string(), "--checkpoint", ckpt, "--data", data});
  ASSERT_EQ(e.code, 0) << e.err;
  EXPECT_NE(e.out.find("accuracy"), std::string::npos);

  const auto prefix = (dir / "pm").string();
  const auto p = run({"ponder-map", "--arch", cfg.string(), "--checkpoint", ckpt, "--data", data, "--index", "3", "--out", prefix});
  ASSERT_EQ(p.code, 0) << p.err;
  EXPECT_TRUE(fs::exists(prefix + ".total.csv"));
  EXPECT_TRUE(fs::exists(prefix + ".block1.pgm"));
  const auto total = read_csv(prefix + ".total.csv");
  EXPECT_EQ(total.rows(), 8);

  const auto fix = dir / "fix.txt";
  std::ofstream(fix) << "1,1\n4,5\n";
  const auto s = run({"saliency-eval", "--map", prefix + ".total.csv", "--fixations", fix.string(), "--blur-s", "1,2",
                      "--gamma", "0,0.1"});
  ASSERT_EQ(s.code, 0) << s.err;
  EXPECT_NE(s.out.find("best"), std::string::npos);
}
