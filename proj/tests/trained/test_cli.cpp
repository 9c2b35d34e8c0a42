#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "gnr/image_io.hpp"
#include "gnr/toy_train.hpp"
#include "test_support.hpp"

using namespace gnr;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code = -1;
  std::string out;
};

CliRun run(const std::string& args) {
  const std::string cmd = std::string(GNR_CLI_PATH) + " " + args + " 2>&1";
  CliRun r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines_of(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

double json_number(const std::string& line, const std::string& key) {
  const auto at = line.find("\"" + key + "\":");
  if (at == std::string::npos) return std::nan("");
  return std::stod(line.substr(at + key.size() + 3));
}

class Cli : public ::testing::Test {
 protected:
  fs::path dir;
  std::string weights;

  void SetUp() override {
    ASSERT_TRUE(test::have_toy_weights()) << "missing fixture weights in " << test::fixture_dir();
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir = fs::temp_directory_path() / (std::string("gnr_cli_") + info->name());
    fs::remove_all(dir);
    fs::create_directories(dir);
    weights = " --weights " + test::fixture_dir().string();
    write_png(dir / "rc.png", render_shape("circle", "red", "blue", 4, 8, 3.5, 3.5, 2.5));
    write_png(dir / "bs.png", render_shape("square", "blue", "yellow", 4, 8, 3.5, 3.5, 2.5));
    write_png(dir / "wt.png", render_shape("triangle", "white", "red", 4, 8, 4.0, 3.5, 3.0));
  }
  void TearDown() override { fs::remove_all(dir); }

  std::string p(const std::string& name) const { return (dir / name).string(); }
};

const char* kSrc = " --src 'a red circle on blue'";
const char* kTrg = " --trg 'a green circle on blue'";

}  // namespace

TEST_F(Cli, EditWritesImageAndDiagnostics) {
  const CliRun r = run("edit " + p("rc.png") + kSrc + kTrg + " --preset default_edit -T 20 --tau 10 -o " + p("e") +
                    weights + " --plot " + p("e/norms.svg"));
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_TRUE(fs::exists(dir / "e/edited.png"));
  const auto lines = lines_of(dir / "e/diagnostics.jsonl");
  ASSERT_EQ(lines.size(), 21u);
  EXPECT_EQ(lines[0].rfind("{\"config\":", 0), 0u);
  EXPECT_NE(slurp(dir / "e/norms.svg").find("<svg"), std::string::npos);
}

TEST_F(Cli, UnknownPresetNamesTheValidOnes) {
  const CliRun r = run("edit " + p("rc.png") + kSrc + kTrg + " --preset turbo" + weights);
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("default_edit"), std::string::npos);
  EXPECT_NE(r.out.find("stylisation_edit"), std::string::npos);
}

TEST_F(Cli, StylisationPresetEcho) {
  const CliRun r = run("edit " + p("rc.png") + kSrc + kTrg + " --preset stylisation_edit --print-config");
  ASSERT_EQ(r.code, 0) << r.out;
  for (const char* needle : {"\"tau\": 25", "\"scale\": 100000.0", "\"scale\": 2.5", "\"r_fixed\": 1.5",
                             "\"policy\": \"fixed\"", "\"branch\": \"target\"", "\"tap\": \"up2_resnet2\"",
                             "\"w\": 7.5"}) {
    EXPECT_NE(r.out.find(needle), std::string::npos) << needle << "\n" << r.out;
  }
}

TEST_F(Cli, DefaultPresetEcho) {
  const CliRun r = run("edit " + p("rc.png") + kSrc + kTrg + " --print-config");
  ASSERT_EQ(r.code, 0) << r.out;
  for (const char* needle : {"\"tau\": 35", "\"scale\": 300000.0", "\"scale\": 500.0", "\"r_lower\": 0.33",
                             "\"r_upper\": 3.0", "\"policy\": \"in_range\"", "\"steps\": 50"}) {
    EXPECT_NE(r.out.find(needle), std::string::npos) << needle << "\n" << r.out;
  }
}

TEST_F(Cli, FlagsOverrideConfigFileOverridesPreset) {
  std::ofstream(dir / "cfg.json") << R"({"preset": "stylisation_edit", "w": 4.0, "tau": 12})";
  const CliRun r = run("edit " + p("rc.png") + kSrc + kTrg + " --config " + p("cfg.json") + " --tau 7 --print-config");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("\"tau\": 7"), std::string::npos);
  EXPECT_NE(r.out.find("\"w\": 4.0"), std::string::npos);
  EXPECT_NE(r.out.find("\"r_fixed\": 1.5"), std::string::npos);
  std::ofstream(dir / "bad.json") << R"({"tua": 3})";
  EXPECT_EQ(run("edit " + p("rc.png") + kSrc + kTrg + " --config " + p("bad.json") + " --print-config").code, 1);
}

TEST_F(Cli, ReconstructPrintsSmallError) {
  const CliRun r = run("reconstruct " + p("rc.png") + kSrc + " -o " + p("r") + weights);
  ASSERT_EQ(r.code, 0) << r.out;
  const auto at = r.out.find("relative_error ");
  ASSERT_NE(at, std::string::npos);
  EXPECT_LE(std::stod(r.out.substr(at + 15)), 0.1);
}

TEST_F(Cli, InvertThenReconstructIsDeterministic) {
  ASSERT_EQ(run("invert " + p("rc.png") + kSrc + " -o " + p("a") + weights).code, 0);
  ASSERT_EQ(run("invert " + p("rc.png") + kSrc + " -o " + p("b") + weights).code, 0);
  EXPECT_EQ(slurp(dir / "a/trajectory.bin"), slurp(dir / "b/trajectory.bin"));
  const CliRun ra = run("reconstruct --trajectory " + p("a/trajectory.bin") + " -o " + p("a") + weights);
  const CliRun rb = run("reconstruct " + p("rc.png") + kSrc + " -o " + p("b") + weights);
  ASSERT_EQ(ra.code, 0) << ra.out;
  ASSERT_EQ(rb.code, 0) << rb.out;
  EXPECT_EQ(slurp(dir / "a/reconstructed.png"), slurp(dir / "b/reconstructed.png"));
  // A trajectory from a different step count is rejected.
  EXPECT_EQ(run("reconstruct --trajectory " + p("a/trajectory.bin") + " -T 40 -o " + p("a") + weights).code, 1);
}

TEST_F(Cli, NaiveWithSamePromptAtUnitScaleMatchesReconstruct) {
  ASSERT_EQ(run("naive " + p("rc.png") + kSrc + " --trg 'a red circle on blue' --w 1 -o " + p("n") + weights).code, 0);
  ASSERT_EQ(run("reconstruct " + p("rc.png") + kSrc + " -o " + p("n") + weights).code, 0);
  EXPECT_EQ(slurp(dir / "n/naive.png"), slurp(dir / "n/reconstructed.png"));
}

TEST_F(Cli, SweepWritesOneOutputPerValue) {
  const CliRun r = run("sweep " + p("rc.png") + kSrc + kTrg + " --param v_self --values 0,1000,30000,300000 -T 20 --tau 10 -o " +
                    p("s") + weights);
  ASSERT_EQ(r.code, 0) << r.out;
  for (int i = 0; i < 4; ++i) EXPECT_TRUE(fs::exists(dir / ("s/sweep_" + std::to_string(i) + ".png")));
  EXPECT_TRUE(fs::exists(dir / "s/sweep_grid.png"));
  EXPECT_EQ(lines_of(dir / "s/sweep.jsonl").size(), 5u);
  EXPECT_EQ(run("sweep " + p("rc.png") + kSrc + kTrg + " --param v_self -o " + p("s") + weights).code, 1);
  EXPECT_EQ(run("sweep " + p("rc.png") + kSrc + kTrg + " --param gamma --values 1 -o " + p("s") + weights).code, 1);
}

TEST_F(Cli, SweepZeroCellEqualsRunWithoutThatGuider) {
  ASSERT_EQ(run("sweep " + p("rc.png") + kSrc + kTrg + " --param v_self --values 0,1000 -T 20 --tau 10 -o " + p("s") +
                weights)
                .code,
            0);
  std::ofstream(dir / "nog.json") << R"({"guiders": [{"kind": "feature_l1", "scale": 500, "tap": "last_up_block",
                                         "branch": "source"}]})";
  ASSERT_EQ(run("edit " + p("rc.png") + kSrc + kTrg + " --config " + p("nog.json") + " -T 20 --tau 10 -o " + p("e") +
                weights)
                .code,
            0);
  EXPECT_EQ(slurp(dir / "s/sweep_0.png"), slurp(dir / "e/edited.png"));
  EXPECT_NE(slurp(dir / "s/sweep_1.png"), slurp(dir / "e/edited.png"));
}

TEST_F(Cli, SweepSelfAttentionEnergyIsNonIncreasing) {
  // Rescaling off and the feature guider muted so the grid controls the only
  // active guider. Past roughly 1e4 the explicit step can overshoot on the toy.
  const std::vector<std::pair<std::string, std::string>> edits = {
      {"rc.png", kSrc + std::string(kTrg)},
      {"bs.png", " --src 'a blue square on yellow' --trg 'a red square on yellow'"},
      {"wt.png", " --src 'a white triangle on red' --trg 'a green triangle on red'"}};
  for (const auto& [image, prompts] : edits) {
    const CliRun r = run("sweep " + p(image) + prompts + " --param v_self --values 0,1000,3000,10000 --rescale off " +
                      "--v-feat 0 -o " + p("m") + weights);
    ASSERT_EQ(r.code, 0) << r.out;
    const auto lines = lines_of(dir / "m/sweep.jsonl");
    ASSERT_EQ(lines.size(), 5u);
    double prev = INFINITY;
    for (std::size_t i = 1; i < lines.size(); ++i) {
      const double e = json_number(lines[i], "final_self_attn_energy");
      ASSERT_TRUE(std::isfinite(e)) << lines[i];
      EXPECT_LE(e, prev) << image << " cell " << i - 1;
      prev = e;
    }
  }
}

TEST_F(Cli, EvalNeedsProvidersUnlessMetricsAreDisabled) {
  std::ofstream(dir / "edits.tsv") << "rc.png\ta red circle on blue\ta green circle on blue\tanimal2animal\n"
                                   << "bs.png\ta blue square on yellow\ta red square on yellow\tanimal2animal\n"
                                   << "wt.png\ta white triangle on red\ta green triangle on red\tstylisation\n";
  ASSERT_EQ(run("manifest --dataset custom --source " + dir.string() + " -o " + p("m.jsonl")).code, 0);
  const std::string base = "eval " + p("m.jsonl") + " -T 10 --tau 5" + weights;
  const CliRun missing = run(base + " -o " + p("x"));
  EXPECT_EQ(missing.code, 2) << missing.out;
  EXPECT_NE(missing.out.find("lpips-alex"), std::string::npos);

  const CliRun off = run(base + " --no-metrics -o " + p("y"));
  ASSERT_EQ(off.code, 0) << off.out;
  EXPECT_EQ(lines_of(dir / "y/report.jsonl").size(), 4u);
  for (int i = 0; i < 3; ++i) EXPECT_TRUE(fs::exists(dir / ("y/edits/" + std::to_string(i) + ".png")));

  fs::create_directories(dir / "ref");
  fs::copy_file(dir / "rc.png", dir / "ref/rc.png");
  fs::copy_file(dir / "bs.png", dir / "ref/bs.png");
  const CliRun toy = run(base + " --lpips toy-lpips --clip toy-clip --fid toy-fid --fid-reference " + p("ref") +
                      " --jobs 2 -o " + p("z"));
  ASSERT_EQ(toy.code, 0) << toy.out;
  const auto report = lines_of(dir / "z/report.jsonl");
  ASSERT_EQ(report.size(), 4u);
  EXPECT_TRUE(std::isfinite(json_number(report[0], "lpips")));
  EXPECT_TRUE(std::isfinite(json_number(report[3], "fid")));
}

TEST_F(Cli, RankPublishedTable) {
  const CliRun r = run("rank --published");
  ASSERT_EQ(r.code, 0) << r.out;
  std::istringstream in(r.out);
  bool found = false;
  for (std::string l; std::getline(in, l);) {
    if (l.rfind("ours", 0) == 0) {
      found = true;
      EXPECT_NE(l.find("2.0"), std::string::npos) << l;
    }
  }
  EXPECT_TRUE(found) << r.out;
  EXPECT_NE(r.out.find("# tie:"), std::string::npos);
}

TEST_F(Cli, RankMalformedRowCitesLine) {
  std::ofstream(dir / "t.tsv") << "method\tLPIPS:lower\tCLIP:higher\na\t0.1\t0.2\nb\t0.3\n";
  const CliRun r = run("rank " + p("t.tsv"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("line 3"), std::string::npos) << r.out;
}

TEST_F(Cli, ToyTrainDecreasesLossAndIsDeterministic) {
  const CliRun a = run("toy-train --steps 40 --seed 3 --dataset-size 64 -o " + p("a"));
  const CliRun b = run("toy-train --steps 40 --seed 3 --dataset-size 64 -o " + p("b"));
  ASSERT_EQ(a.code, 0) << a.out;
  ASSERT_EQ(b.code, 0) << b.out;
  EXPECT_EQ(slurp(dir / "a/toy.bin"), slurp(dir / "b/toy.bin"));
  const auto num = [](const std::string& out, const std::string& key) {
    return std::stod(out.substr(out.find(key + " ") + key.size() + 1));
  };
  EXPECT_LT(num(a.out, "final_loss"), num(a.out, "initial_loss"));

  const CliRun zero = run("toy-train --steps 0 -o " + p("z"));
  ASSERT_EQ(zero.code, 0) << zero.out;
  EXPECT_EQ(run("reconstruct " + p("rc.png") + kSrc + " -T 5 --weights " + p("z") + " -o " + p("z")).code, 0);
}

TEST_F(Cli, EchoedConfigReproducesTheRun) {
  ASSERT_EQ(run("edit " + p("rc.png") + kSrc + kTrg + " -T 20 --tau 8 --v-self 50000 --seed 9 -o " + p("a") + weights)
                .code,
            0);
  ASSERT_EQ(run("edit " + p("rc.png") + kSrc + kTrg + " --config " + p("a/diagnostics.jsonl") + " -o " + p("b") +
                weights)
                .code,
            0);
  EXPECT_EQ(slurp(dir / "a/edited.png"), slurp(dir / "b/edited.png"));
  EXPECT_EQ(slurp(dir / "a/diagnostics.jsonl"), slurp(dir / "b/diagnostics.jsonl"));
}

TEST_F(Cli, ExitCodes) {
  EXPECT_EQ(run("--help").code, 0);
  EXPECT_EQ(run("frobnicate").code, 1);
  EXPECT_EQ(run("edit " + p("rc.png") + kSrc + " --trg 'a zyzzyva'" + weights).code, 1);
  EXPECT_EQ(run("edit " + p("rc.png") + kSrc + kTrg + " --backbone adapter:sd21" + weights).code, 2);
  EXPECT_EQ(run("edit " + p("nothere.png") + kSrc + kTrg + weights).code, 1);
}

TEST_F(Cli, BackbonePathFromEnvironment) {
  const CliRun r = run("reconstruct " + p("rc.png") + kSrc + " -T 10 -o " + p("r"));
  EXPECT_NE(r.code, 0);
  const std::string env = "GNR_BACKBONE_PATH=" + test::fixture_dir().string() + " ";
  const std::string cmd = env + GNR_CLI_PATH + " reconstruct " + p("rc.png") + kSrc + " -T 10 -o " + p("r") + " 2>&1";
  EXPECT_EQ(std::system(cmd.c_str()), 0);
}

TEST_F(Cli, AdapterBackboneEdits) {
  write_png(dir / "big.png", render_shape("circle", "red", "blue", 3, 16, 7.5, 7.5, 5.0));
  const CliRun r = run("edit " + p("big.png") + kSrc + kTrg + " --backbone adapter:patch_pca -T 10 --tau 5 -o " + p("a") +
                    weights);
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_TRUE(fs::exists(dir / "a/edited.png"));
  // Toy-sized input for the adapter is a shape mismatch.
  EXPECT_EQ(run("edit " + p("rc.png") + kSrc + kTrg + " --backbone adapter:patch_pca" + weights).code, 1);
}

TEST_F(Cli, ProjectWritesPanels) {
  const CliRun r = run("project " + p("rc.png") + kSrc + " --t 25 -o " + p("p") + weights);
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_FALSE(fs::is_empty(dir / "p"));
  EXPECT_EQ(run("project " + p("rc.png") + kSrc + " --method tsne -o " + p("p") + weights).code, 1);
}
