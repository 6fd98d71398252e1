#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sys/wait.h>
#include <unistd.h>

#include <json.hpp>

#include "heightbins/raster.hpp"

namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code = -1;
  std::string out, err;
};

/// Per-process scratch path; ctest runs each case as its own process.
fs::path scratch(const std::string& name) {
  return fs::temp_directory_path() / (name + "_" + std::to_string(::getpid()));
}

/// Runs the CLI with `args`, capturing stdout and stderr.
CliRun cli(const std::string& args, const std::string& env = "") {
  const fs::path err_file = scratch("heightbins_cli_stderr");
  const std::string cmd = env + " " + HEIGHTBINS_CLI + " " + args + " 2>" + err_file.string();
  CliRun r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), buf.size(), p)) r.out += buf.data();
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream f(err_file);
  r.err.assign(std::istreambuf_iterator<char>(f), {});
  return r;
}

/// The last stderr line must be the machine-parseable error record.
void expect_error_line(const CliRun& r, int code, const std::string& kind) {
  EXPECT_EQ(r.code, code) << r.err;
  std::string last;
  std::istringstream is(r.err);
  for (std::string line; std::getline(is, line);)
    if (!line.empty()) last = line;
  static const std::regex re(R"(^error code=(\d+) kind=([a-z_]+) reason="(?:[^"\\]|\\.)*"$)");
  std::smatch m;
  ASSERT_TRUE(std::regex_match(last, m, re)) << last;
  EXPECT_EQ(std::stoi(m[1]), code);
  EXPECT_EQ(m[2], kind);
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = scratch("heightbins_cli_test");
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    const CliRun r = cli("synth --out " + (dir_ / "data").string() + " --count 6 --val 0.34 --test 0.17");
    ASSERT_EQ(r.code, 0) << r.err;
  }
  static void TearDownTestSuite() {
    fs::remove_all(dir_);
    fs::remove(scratch("heightbins_cli_stderr"));
  }

  static std::string write(const std::string& name, const std::string& text) {
    std::ofstream(dir_ / name) << text;
    return (dir_ / name).string();
  }
  static std::string config(const nlohmann::json& extra = nlohmann::json::object()) {
    nlohmann::json j = {{"manifest", (dir_ / "data" / "manifest.json").string()},
                        {"output_dir", (dir_ / "run").string()},
                        {"max_epochs", 1},
                        {"max_steps", 1}};
    j.update(extra);
    return write("config.json", j.dump());
  }

  static fs::path dir_;
};

fs::path Cli::dir_;

}  // namespace

TEST_F(Cli, SynthWritesManifest) {
  const auto j = nlohmann::json::parse(std::ifstream(dir_ / "data" / "manifest.json"));
  ASSERT_EQ(j.size(), 6u);
  EXPECT_EQ(j[0]["split"], "train");
  EXPECT_EQ(j[5]["split"], "test");
}

TEST_F(Cli, UsageErrors) {
  expect_error_line(cli(""), 2, "usage");
  expect_error_line(cli("frobnicate"), 2, "usage");
  expect_error_line(cli("train"), 2, "usage");
  expect_error_line(cli("infer --checkpoint a"), 2, "usage");
}

TEST_F(Cli, ConfigErrors) {
  expect_error_line(cli("train --config " + (dir_ / "absent.json").string()), 2, "config");
  expect_error_line(cli("train --config " + write("bad.json", "{\"patience\": 0}")), 2, "config");
  expect_error_line(cli("ablate --config " + config() + " --grid everything"), 2, "config");
  expect_error_line(cli("synth --out " + (dir_ / "x").string() + " --val 0.8 --test 0.8"), 2, "config");
  expect_error_line(cli("train --config " + config(), "HEIGHTBINS_LOG=loud"), 2, "config");
}

TEST_F(Cli, DataErrors) {
  expect_error_line(cli("train --config " + config({{"manifest", (dir_ / "nowhere.json").string()}})), 3, "data");
  const std::string junk = write("junk.hmr", "not a raster");
  expect_error_line(cli("infer --checkpoint " + junk + " --input " + junk + " --out " + (dir_ / "o.hmr").string() +
                        " --config " + config()),
                    3, "data");
}

TEST_F(Cli, RasterErrorKindIsCode) {
  // A valid checkpoint from a one-step run, then a corrupt input raster.
  ASSERT_EQ(cli("train --config " + config()).code, 0);
  std::string bytes = heightbins::encode_raster(heightbins::read_raster((dir_ / "data" / "patch_00000_image.hmr").string()));
  bytes[bytes.size() - 1] ^= 0x40;
  const std::string bad = write("bad.hmr", bytes);
  expect_error_line(cli("infer --checkpoint " + (dir_ / "run" / "best.ckpt").string() + " --input " + bad +
                        " --out " + (dir_ / "o.hmr").string()),
                    3, "checksum_mismatch");
}

TEST_F(Cli, NumericFailure) {
  expect_error_line(cli("train --config " + config({{"optimizer", {{"lr", 1e300}}}, {"max_steps", 4}, {"max_epochs", 4}})), 4, "numeric");
}

TEST_F(Cli, TrainEvalInferRoundTrip) {
  const std::string cfg = config({{"max_steps", 2}, {"max_epochs", 2}});
  const CliRun t = cli("train --config " + cfg);
  ASSERT_EQ(t.code, 0) << t.err;
  const auto summary = nlohmann::json::parse(t.out);
  EXPECT_EQ(summary["steps"], 2);
  const std::string ckpt = (dir_ / "run" / "best.ckpt").string();

  const CliRun e1 = cli("eval --config " + cfg + " --checkpoint " + ckpt + " --split test");
  const CliRun e2 = cli("eval --config " + cfg + " --checkpoint " + ckpt + " --split test");
  ASSERT_EQ(e1.code, 0) << e1.err;
  EXPECT_EQ(e1.out, e2.out);
  EXPECT_NE(e1.out.find("rmse_m="), std::string::npos);

  const CliRun i = cli("infer --checkpoint " + ckpt + " --input " + (dir_ / "data" / "patch_00005_image.hmr").string() +
                    " --out " + (dir_ / "pred.hmr").string() + " --pixel 3,4");
  ASSERT_EQ(i.code, 0) << i.err;
  const auto pred = heightbins::read_raster((dir_ / "pred.hmr").string());
  EXPECT_EQ(pred.kind, heightbins::RasterKind::height);
  EXPECT_EQ(pred.width, 32u);
  const auto dump = nlohmann::json::parse(i.out);
  EXPECT_EQ(dump["x"], 3);
  EXPECT_EQ(dump["prob"].size(), 32u);
  expect_error_line(cli("infer --checkpoint " + ckpt + " --input " + (dir_ / "data" / "patch_00005_image.hmr").string() +
                        " --out " + (dir_ / "pred.hmr").string() + " --pixel 3"),
                    2, "config");
}

TEST_F(Cli, Gradcheck) {
  const CliRun r = cli("gradcheck --json " + (dir_ / "gc.json").string());
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("gradcheck passed"), std::string::npos);
  const auto j = nlohmann::json::parse(std::ifstream(dir_ / "gc.json"));
  EXPECT_TRUE(j.contains("cases"));
}
