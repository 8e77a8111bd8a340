#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>

#include "json.hpp"
#include "test_support.hpp"

using namespace repair;
using namespace repair::testing;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string output;  // stdout and stderr
};

Run cli(const std::string& args, const fs::path& dir) {
  const auto log = dir / "cli.log";
  const std::string cmd = std::string("cd '") + dir.string() + "' && '" + REPAIR_CLI_PATH + "' " + args + " > '" +
                          log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, read_text(log)};
}

void save(const FeatureDataset& d, const fs::path& path) { save_features_csv(d, path); }

std::map<std::string, std::string> record(const fs::path& path) { return parse_key_values(read_text(path)); }

// Four-file IDX directory with n tiny 28x28 images per split, labels i mod 3.
void fake_mnist(const fs::path& dir, std::size_t n) {
  fs::create_directories(dir);
  std::vector<unsigned char> pixels(n * 784, 0), labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = static_cast<unsigned char>(i % 3);
    for (std::size_t p = 0; p < 784; p += 7 + i % 5) pixels[i * 784 + p] = static_cast<unsigned char>(50 + p % 200);
  }
  for (const auto& [img, lbl] : {std::pair{"train-images-idx3-ubyte", "train-labels-idx1-ubyte"},
                                 std::pair{"t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"}}) {
    write_text(dir / img, idx_images(static_cast<std::uint32_t>(n), 28, 28, pixels));
    write_text(dir / lbl, idx_labels(labels));
  }
}

}  // namespace

TEST(Cli, MeasureLeakedLabelAndNoise) {
  const auto dir = scratch_dir("cli_measure");
  save(leaked_label_dataset(600, 3, 0, 0.0, 1), dir / "leak.csv");
  save(noise_dataset(1500, 3, 4, 2), dir / "noise.csv");
  auto r = cli("measure --features leak.csv --out-dir leak", dir);
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_GE(std::stod(record(dir / "leak" / "bias_report.txt").at("bias")), 0.95);
  r = cli("measure --features noise.csv --out-dir noise", dir);
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_LE(std::stod(record(dir / "noise" / "bias_report.txt").at("bias")), 0.05);
  EXPECT_TRUE(fs::exists(dir / "noise" / "bias_report_decays.csv"));

  const auto manifest = nlohmann::json::parse(read_text(dir / "noise" / "manifest.json"));
  EXPECT_EQ(manifest["command"], "measure");
  EXPECT_EQ(manifest["inputs"][0]["sha256"].get<std::string>().size(), 64u);
}

TEST(Cli, MeasureWithWeightsAndIdx) {
  const auto dir = scratch_dir("cli_measure_idx");
  fake_mnist(dir / "mnist", 30);
  auto r = cli("measure --idx-images mnist/train-images-idx3-ubyte --idx-labels mnist/train-labels-idx1-ubyte "
               "--iters 50 --decay-sweep off --out-dir m",
               dir);
  EXPECT_EQ(r.code, 0) << r.output;
  save(noise_dataset(100, 2, 2, 3), dir / "n.csv");
  std::vector<std::string> ids;
  for (int i = 0; i < 100; ++i) ids.push_back(std::to_string(i));
  save_weights(ExampleWeights::zeros(100), ids, dir / "w.csv");
  r = cli("measure --features n.csv --weights w.csv --iters 50 --out-dir w", dir);
  EXPECT_EQ(r.code, 0) << r.output;
}

TEST(Cli, MissingFileExitsTwoNamingThePath) {
  const auto dir = scratch_dir("cli_missing");
  const auto r = cli("measure --features does_not_exist.csv", dir);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("does_not_exist.csv"), std::string::npos);
}

TEST(Cli, UsageErrorsExitTwo) {
  const auto dir = scratch_dir("cli_usage");
  EXPECT_EQ(cli("measure --bogus", dir).code, 2);
  EXPECT_EQ(cli("", dir).code, 2);
  EXPECT_EQ(cli("resample --features x.csv", dir).code, 2);  // --weights is required
  EXPECT_EQ(cli("experiment bias-vs-sigma --sigmas ''", dir).code, 2);
  EXPECT_EQ(cli("experiment nonsense", dir).code, 2);
  EXPECT_EQ(cli("--version", dir).code, 0);
}

TEST(Cli, RepairReducesPlantedBiasDeterministically) {
  const auto dir = scratch_dir("cli_repair");
  PlantedBiasSpec spec;
  spec.n = 800;
  spec.d_signal = 2;
  spec.d_bias = 2;
  spec.separability = 0.5;
  spec.bias_strength = 0.7;
  save(planted_bias_blobs(spec), dir / "blobs.csv");
  const std::string args = "repair --features blobs.csv --iters 3000 --batch 64 --lr-theta 0.01 --est-iters 1000 ";
  auto r = cli(args + "--out-dir a", dir);
  ASSERT_EQ(r.code, 0) << r.output;
  const auto rep = record(dir / "a" / "repair_report.txt");
  EXPECT_LT(std::stod(rep.at("final_bias")), std::stod(rep.at("initial_bias")));
  r = cli(args + "--out-dir b", dir);
  ASSERT_EQ(r.code, 0) << r.output;
  for (const char* f : {"weights.csv", "history.csv", "repair_report.txt"}) {
    EXPECT_EQ(read_text(dir / "a" / f), read_text(dir / "b" / f)) << f;
  }
}

TEST(Cli, FrozenWeightsStayHalf) {
  const auto dir = scratch_dir("cli_frozen");
  save(noise_dataset(200, 2, 2, 4), dir / "n.csv");
  const auto r = cli("repair --features n.csv --iters 100 --lr-omega 0 --est-iters 50 --out-dir o", dir);
  ASSERT_EQ(r.code, 0) << r.output;
  const auto w = load_weights(dir / "o" / "weights.csv");
  for (double x : w.weights.weights()) EXPECT_EQ(x, 0.5);
}

TEST(Cli, RepairOnTrainPlusTestSplitsBack) {
  const auto dir = scratch_dir("cli_split");
  save(leaked_label_dataset(200, 2, 1, 0.5, 1), dir / "train.csv");
  save(leaked_label_dataset(100, 2, 1, 0.5, 2), dir / "test.csv");
  auto r = cli("repair --train train.csv --test test.csv --iters 300 --batch 32 --est-iters 50 --out-dir r", dir);
  ASSERT_EQ(r.code, 0) << r.output;
  const auto w = load_weights(dir / "r" / "weights.csv");
  ASSERT_EQ(w.ids.size(), 300u);
  EXPECT_EQ(w.ids.front(), "train/0");
  EXPECT_EQ(w.ids.back(), "test/99");
  r = cli("resample --train train.csv --test test.csv --weights r/weights.csv --strategy rank --keep 0.5 --out-dir s",
          dir);
  ASSERT_EQ(r.code, 0) << r.output;
  const auto tr = load_features_csv(dir / "s" / "subset_train.csv");
  const auto te = load_features_csv(dir / "s" / "subset_test.csv");
  EXPECT_EQ(tr.size() + te.size(), 150u);
  EXPECT_EQ(tr.ids().front().find('/'), std::string::npos);
}

TEST(Cli, ResampleExamplesThroughFiles) {
  const auto dir = scratch_dir("cli_resample");
  write_text(dir / "d.csv", "id,label,f0\na,0,1\nb,0,2\nc,1,3\nd,1,4\n");
  const auto omega = [](double w) { return format_double17(std::log(w / (1 - w))); };
  write_text(dir / "w.csv", "id,omega\na," + omega(0.9) + "\nb," + omega(0.4) + "\nc," + omega(0.6) + "\nd," +
                                omega(0.1) + "\n");
  auto r = cli("resample --features d.csv --weights w.csv --strategy threshold --threshold 0.5 --out-dir t", dir);
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(load_features_csv(dir / "t" / "subset.csv").ids(), (std::vector<std::string>{"a", "c"}));
  r = cli("resample --features d.csv --weights w.csv --strategy rank --keep 0.5 --out-dir k", dir);
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(load_features_csv(dir / "k" / "subset.csv").ids(), (std::vector<std::string>{"a", "c"}));
  r = cli("resample --features d.csv --weights w.csv --strategy cls_rank --keep 0.5 --out-dir c", dir);
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(load_features_csv(dir / "c" / "subset.csv").ids(), (std::vector<std::string>{"a", "c"}));
  EXPECT_NE(read_text(dir / "c" / "plan.csv").find("# strategy=cls_rank"), std::string::npos);
  r = cli("resample --features d.csv --weights w.csv --strategy sideways", dir);
  EXPECT_EQ(r.code, 2);
}

TEST(Cli, ColoredMnistZeroSigmaAndDeterminism) {
  const auto dir = scratch_dir("cli_colored");
  fake_mnist(dir / "mnist", 12);
  auto r = cli("colored-mnist --data-dir mnist --sigma 0 --representation color --out-dir z", dir);
  ASSERT_EQ(r.code, 0) << r.output;
  const auto spec = record(dir / "z" / "color_spec.txt");
  const auto gray = load_idx(dir / "mnist" / "train-images-idx3-ubyte", dir / "mnist" / "train-labels-idx1-ubyte");
  const auto colored = load_features_csv(dir / "z" / "train.csv");
  ASSERT_EQ(colored.dim(), 3);
  for (std::size_t i = 0; i < gray.size(); ++i) {
    const auto mean = io_detail::split(spec.at("mean_" + std::to_string(gray.labels()[i])));
    const double intensity = gray.features().row(static_cast<Index>(i)).mean();
    for (Index c = 0; c < 3; ++c) {
      EXPECT_NEAR(colored.features()(static_cast<Index>(i), c), *io_detail::parse_double(mean[static_cast<std::size_t>(c)]) * intensity, 1e-15);
    }
  }
  r = cli("colored-mnist --data-dir mnist --sigma 0.1 --seed 3 --limit 5 --out-dir p1", dir);
  ASSERT_EQ(r.code, 0) << r.output;
  r = cli("colored-mnist --data-dir mnist --sigma 0.1 --seed 3 --limit 5 --out-dir p2", dir);
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(read_text(dir / "p1" / "train.csv"), read_text(dir / "p2" / "train.csv"));
  EXPECT_EQ(load_features_csv(dir / "p1" / "test.csv").dim(), 3 * 784);
}

TEST(Cli, ColoredMnistHonorsDataDirEnvironment) {
  const auto dir = scratch_dir("cli_env");
  fake_mnist(dir / "elsewhere", 6);
  const std::string cmd = "cd '" + dir.string() + "' && REPAIR_DATA_DIR=elsewhere '" + REPAIR_CLI_PATH +
                          "' colored-mnist --representation color --out-dir env > /dev/null 2>&1";
  EXPECT_EQ(std::system(cmd.c_str()), 0);
  EXPECT_TRUE(fs::exists(dir / "env" / "train.csv"));
}
