#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>

#include <unistd.h>

#include "mvaf/cli.hpp"

using namespace mvaf;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int rc = 0;
  std::string out, err;
};

CliRun cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv{"mvaf"};
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  CliRun r;
  r.rc = run_cli(int(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

bool single_line_diagnostic(const std::string& err) {
  return err.starts_with("mvaf: ") && err.find('\n') == err.size() - 1;
}

// A tiny run: 8 scenes, 3 views, 16x16 pixels, one layer.
const std::vector<std::string> kTiny = {
    "--set", "scene.scenes=8",       "--set", "scene.views=3",         "--set", "scene.height=16",
    "--set", "scene.width=16",       "--set", "scene.frames=4",        "--set", "model.channels=8",
    "--set", "model.patch=2",        "--set", "model.layers=1",        "--set", "model.heads=2",
    "--set", "train.epochs=1",       "--set", "train.batch_size=4",    "--set", "train.lr0=1e-3",
    "--set", "train.lr_min=1e-5",    "--set", "split.tolerance=1",     "--set", "train.min_support=1",
};

std::vector<std::string> with_tiny(std::vector<std::string> args) {
  args.insert(args.end(), kTiny.begin(), kTiny.end());
  return args;
}

class Pipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / ("mvaf_cli_test_" + std::to_string(::getpid()));
    fs::create_directories(dir_);
    gen_ = cli(with_tiny({"gen-data", "--seed", "5", "--out", data()}));
    train_ = cli(with_tiny({"train", "--seed", "5", "--data", data(), "--out", ckpt()}));
  }
  static void TearDownTestSuite() {
    std::error_code ec;
    fs::remove_all(dir_, ec);
  }
  static std::string data() { return (dir_ / "data").string(); }
  static std::string ckpt() { return (dir_ / "model.ckpt").string(); }

  static fs::path dir_;
  static CliRun gen_, train_;
};

fs::path Pipeline::dir_;
CliRun Pipeline::gen_, Pipeline::train_;

}  // namespace

TEST(RunConfig, DefaultsRoundTrip) {
  const FlatConfig defaults = default_run_config();
  EXPECT_EQ(defaults.get_string("model.mode", ""), "sva_dva");
  EXPECT_EQ(defaults.get_real("train.lr0", 0), 1e-4);
  EXPECT_EQ(defaults.get_real("train.lr_min", 0), 1e-6);
  const RunConfig c = resolve_run_config({});
  EXPECT_EQ(store_run_config(c).serialize(), defaults.serialize());
  EXPECT_EQ(c.model.views, c.scene.views);
  EXPECT_EQ(c.model.classes, c.scene.classes);
}

TEST(RunConfig, OverridesApplyAndUnknownKeysFail) {
  FlatConfig o;
  o.set("model.mode", "vanilla_self");
  o.set("train.batch_size", std::uint64_t(7));
  o.set("scene.views", std::uint64_t(3));
  const RunConfig c = resolve_run_config(o);
  EXPECT_EQ(c.model.cooperation.mode, CooperationMode::VanillaSelf);
  EXPECT_EQ(c.train.batch_size, 7u);
  EXPECT_EQ(c.model.views, 3u);

  FlatConfig bad;
  bad.set("train.batchsize", std::uint64_t(7));
  EXPECT_THROW(resolve_run_config(bad), ConfigError);
  FlatConfig lr;
  lr.set("train.lr_min", 1.0);
  EXPECT_THROW(resolve_run_config(lr), ConfigError);
  FlatConfig view;
  view.set("compare.single_view", std::uint64_t(4));
  EXPECT_THROW(resolve_run_config(view), ConfigError);
}

TEST(Cli, UsageErrorsAreSingleLine) {
  auto none = cli({});
  EXPECT_NE(none.rc, 0);
  EXPECT_TRUE(single_line_diagnostic(none.err)) << none.err;
  auto unknown = cli({"frobnicate"});
  EXPECT_NE(unknown.rc, 0);
  EXPECT_TRUE(single_line_diagnostic(unknown.err)) << unknown.err;
  auto missing = cli({"train", "--data", "x"});
  EXPECT_NE(missing.rc, 0);
  EXPECT_TRUE(single_line_diagnostic(missing.err)) << missing.err;
  auto help = cli({"--help"});
  EXPECT_EQ(help.rc, 0);
  EXPECT_NE(help.out.find("dump-attention"), std::string::npos);
}

TEST(Cli, RuntimeErrorsAreSingleLine) {
  auto bad_key = cli({"gen-data", "--set", "scene.sceens=3", "--out", "/nonexistent/x"});
  EXPECT_EQ(bad_key.rc, 1);
  EXPECT_TRUE(single_line_diagnostic(bad_key.err)) << bad_key.err;
  EXPECT_NE(bad_key.err.find("scene.sceens"), std::string::npos);
  auto bad_set = cli({"gen-data", "--set", "noequals", "--out", "/nonexistent/x"});
  EXPECT_EQ(bad_set.rc, 1);
  auto no_data = cli({"eval", "--checkpoint", "/nonexistent/ck", "--data", "/nonexistent/d"});
  EXPECT_EQ(no_data.rc, 1);
  EXPECT_TRUE(single_line_diagnostic(no_data.err)) << no_data.err;
}

TEST_F(Pipeline, GenerateAndTrainWriteTheirOutputs) {
  ASSERT_EQ(gen_.rc, 0) << gen_.err;
  ASSERT_EQ(train_.rc, 0) << train_.err;
  for (const char* f : {"annotations.csv", "manifest.txt", "scene.config", "scene_0000.mvaf", "scene_0007.mvaf"})
    EXPECT_TRUE(fs::exists(fs::path(data()) / f)) << f;
  for (const char* suffix : {"", ".log.csv", ".epochs.csv", ".config"})
    EXPECT_TRUE(fs::exists(ckpt() + suffix)) << suffix;
  EXPECT_TRUE(slurp(ckpt() + ".log.csv").starts_with("epoch,batch,lr,loss\n"));
}

TEST_F(Pipeline, SeedFlagSetsEverySeed) {
  ASSERT_EQ(train_.rc, 0) << train_.err;
  const FlatConfig saved = FlatConfig::load(ckpt() + ".config");
  EXPECT_EQ(saved.get_uint("scene.seed", 0), 5u);
  EXPECT_EQ(saved.get_uint("train.seed", 0), 5u);
  EXPECT_EQ(saved.get_uint("split.seed", 0), 5u);
  EXPECT_EQ(saved.get_uint("scene.views", 0), 3u);
}

TEST_F(Pipeline, EvalIsRepeatableAndMatchesLibrary) {
  ASSERT_EQ(train_.rc, 0) << train_.err;
  const std::string a = (dir_ / "eval_a.csv").string();
  ASSERT_EQ(cli({"eval", "--checkpoint", ckpt(), "--data", data(), "--out", a}).rc, 0);
  auto to_stdout = cli({"eval", "--checkpoint", ckpt(), "--data", data()});
  ASSERT_EQ(to_stdout.rc, 0);
  EXPECT_EQ(slurp(a), to_stdout.out);
  EXPECT_TRUE(to_stdout.out.starts_with("class,tp,fp,fn,precision,recall,f\n"));

  const Dataset ds = load_dataset(data());
  const RunConfig c = resolve_run_config(FlatConfig::load(ckpt() + ".config"));
  const Split split = split_dataset(ds.samples, c.scene.classes, c.split);
  const auto report = evaluate(load_checkpoint<float>(ckpt()), full_run(c.model, c.scene.views), ds, split.eval,
                               c.train.threshold, c.train.min_support);
  std::ostringstream want;
  write_metric_csv(want, report);
  EXPECT_EQ(want.str(), to_stdout.out);
}

TEST_F(Pipeline, DumpAttentionHeatmapsFollowMasksAndCsv) {
  ASSERT_EQ(train_.rc, 0) << train_.err;
  const Dataset ds = load_dataset(data());
  const auto& s = ds.samples.front();
  const fs::path out = dir_ / "dump";
  const std::size_t query_view = 1, t = 49, M = 3;
  auto r = cli({"dump-attention", "--checkpoint", ckpt(), "--data", data(), "--clip", ds.clips[s.clip].id,
                "--keyframe", std::to_string(s.keyframe), "--person", std::to_string(s.person), "--query-view",
                std::to_string(query_view), "--out", out.string()});
  ASSERT_EQ(r.rc, 0) << r.err;

  // Weights from the CSV for query view 1, per (layer, head, kind).
  std::map<std::string, std::vector<double>> csv;
  std::ifstream is(out / "attention.csv");
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "layer,head,kind,q_view,q_row,q_col,k_view,k_row,k_col,weight");
  while (std::getline(is, line)) {
    std::stringstream ss(line);
    std::vector<std::string> f;
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    ASSERT_EQ(f.size(), 10u);
    if (std::stoul(f[3]) != query_view) continue;
    auto& w = csv["layer" + f[0] + "_head" + f[1] + "_" + f[2]];
    w.resize(t * M * t, 0.0);
    const std::size_t q = std::stoul(f[4]) * 7 + std::stoul(f[5]);
    const std::size_t k = std::stoul(f[6]) * t + std::stoul(f[7]) * 7 + std::stoul(f[8]);
    w[q * M * t + k] = std::stod(f[9]);
  }
  ASSERT_EQ(csv.size(), 4u);  // one layer, two heads, sva + dva

  for (const auto& [name, weights] : csv) {
    const std::string ppm = slurp(out / (name + ".ppm"));
    const std::string header = "P6\n147 49\n255\n";
    ASSERT_TRUE(ppm.starts_with(header)) << name;
    ASSERT_EQ(ppm.size(), header.size() + 3 * t * M * t);
    const bool sva = name.ends_with("sva");
    const double peak = *std::max_element(weights.begin(), weights.end());
    ASSERT_GT(peak, 0);
    for (std::size_t q = 0; q < t; ++q)
      for (std::size_t k = 0; k < M * t; ++k) {
        const auto px = static_cast<unsigned char>(ppm[header.size() + 3 * (q * M * t + k)]);
        const bool same_view = k / t == query_view;
        if (sva != same_view) EXPECT_EQ(px, 0) << name << " q" << q << " k" << k;
        EXPECT_NEAR(px / 255.0, weights[q * M * t + k] / peak, 1.0 / 255 + 1e-9) << name;
      }
  }
}

TEST_F(Pipeline, DumpAttentionRejectsAbsentPerson) {
  ASSERT_EQ(train_.rc, 0) << train_.err;
  auto r = cli({"dump-attention", "--checkpoint", ckpt(), "--data", data(), "--clip", "scene_0000", "--keyframe", "0",
                "--person", "99", "--out", (dir_ / "none").string()});
  EXPECT_EQ(r.rc, 1);
  EXPECT_TRUE(single_line_diagnostic(r.err)) << r.err;
  auto k = cli({"dump-attention", "--checkpoint", ckpt(), "--data", data(), "--clip", "scene_0000", "--keyframe", "9",
                "--person", "0", "--out", (dir_ / "none").string()});
  EXPECT_EQ(k.rc, 1);
  auto c = cli({"dump-attention", "--checkpoint", ckpt(), "--data", data(), "--clip", "nope", "--keyframe", "0",
                "--person", "0", "--out", (dir_ / "none").string()});
  EXPECT_EQ(c.rc, 1);
}

TEST(Heatmap, RejectsBadShapesAndScalesToWhite) {
  AttentionRecord rec;
  rec.weights = Tensor<double>({4, 4}, {0.5, 0.5, 0, 0, 0.25, 0.75, 0, 0, 0, 0, 1, 0, 0, 0, 0.2, 0.8});
  std::ostringstream os;
  write_heatmap_ppm(os, rec, 2, 1);
  const std::string img = os.str();
  const std::string header = "P6\n4 2\n255\n";
  ASSERT_TRUE(img.starts_with(header));
  std::vector<int> gray;
  for (std::size_t i = header.size(); i < img.size(); i += 3) gray.push_back(static_cast<unsigned char>(img[i]));
  EXPECT_EQ(gray, (std::vector<int>{0, 0, 255, 0, 0, 0, 51, 204}));
  std::ostringstream sink;
  EXPECT_THROW(write_heatmap_ppm(sink, rec, 3, 0), DimensionError);
  EXPECT_THROW(write_heatmap_ppm(sink, rec, 2, 2), LookupError);
}
