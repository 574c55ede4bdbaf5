#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "peftlab/commands.hpp"
#include "test_util.hpp"

using namespace peftlab;
namespace fs = std::filesystem;
using Json = nlohmann::json;

namespace {

ArchSpec small_arch() {
  ArchSpec a = ArchSpec::toy_small();
  a.name = "custom";
  a.d_model = 16;
  a.n_heads = 2;
  a.d_ffn = 32;
  a.n_enc_layers = 1;
  a.n_dec_layers = 1;
  return a;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t file_count(const fs::path& d) {
  std::size_t n = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(d)) ++n;
  return n;
}

class Commands : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("peftlab_cmd_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()) + "_" +
            std::to_string(::getpid()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    base_ = build_model(small_arch(), 7);
    model_checkpoint(base_).save(dir_ / "base.ckpt");
    std::ofstream(dir_ / "run.json") << R"({
  "task": {"n_pretrain": 32, "n_adapt_small": 16, "n_eval": 8},
  "train": {"epochs": 1, "batch_size": 4, "grad_accumulation": 1, "max_steps": 3},
  "seed": 3
})";
  }
  void TearDown() override { fs::remove_all(dir_); }

  int params(ParamsArgs a, std::string& text) {
    std::ostringstream out, err;
    const int rc = cmd_params(a, out, err);
    text = out.str();
    return rc;
  }

  AdaptArgs adapt_args(const std::string& method, const std::string& out) const {
    AdaptArgs a;
    a.base = dir_ / "base.ckpt";
    a.config = dir_ / "run.json";
    a.method = method;
    a.rank = 2;
    a.out = dir_ / out;
    return a;
  }

  void save_fresh_adapter(Method m, int rank, const fs::path& p, const ArchSpec& arch) const {
    const AdaptedModel am = attach(build_model(arch, 7), AdapterSpec::for_method(m, rank), 1);
    adapter_checkpoint(am.adapter()).save(p);
  }

  std::vector<std::vector<int>> report_rows(double threshold) {
    ReportArgs r;
    r.adapter = dir_ / "s2.ckpt";
    r.threshold = threshold;
    r.out = dir_ / "report.csv";
    std::ostringstream out, err;
    EXPECT_EQ(cmd_report(r, out, err), exit_code::kOk) << err.str();
    std::vector<std::vector<int>> rows;
    std::istringstream csv(slurp(r.out));
    std::string line;
    while (std::getline(csv, line)) {
      EXPECT_EQ(line.back(), '\r');
      if (!line.starts_with("W_")) continue;
      std::vector<int> cells;
      std::istringstream ls(line);
      std::string cell;
      std::getline(ls, cell, ',');
      while (std::getline(ls, cell, ',')) cells.push_back(std::stoi(cell));
      rows.push_back(cells);
    }
    return rows;
  }

  fs::path dir_;
  Model base_;
};

}  // namespace

TEST(Format, CountStrings) {
  EXPECT_EQ(format_count({2359296, 0.0030685}), "2359296 (0.31%)");
  EXPECT_EQ(format_count({243584, 1.0}), "243584 (100.00%)");
}

TEST_F(Commands, ParamsOutput) {
  std::string text;
  ParamsArgs a;
  a.arch = "whisper-medium-dims";
  EXPECT_EQ(params(a, text), exit_code::kOk);
  EXPECT_EQ(text, "2359296 (0.31%)\n");
  a.method = "bitfit";
  EXPECT_EQ(params(a, text), exit_code::kOk);
  EXPECT_EQ(text, "593920 (0.08%)\n");
  ParamsArgs f;
  f.method = "full_ft";
  EXPECT_EQ(params(f, text), exit_code::kOk);
  EXPECT_EQ(text, "243584 (100.00%)\n");
  ParamsArgs v;
  v.method = "s2lora";
  v.verbose = true;
  EXPECT_EQ(params(v, text), exit_code::kOk);
  EXPECT_GT(std::count(text.begin(), text.end(), '\n'), 1);
}

TEST_F(Commands, ParamsRejectsBadInput) {
  std::string text;
  ParamsArgs a;
  a.rank = 0;
  EXPECT_EQ(params(a, text), exit_code::kInvalid);
  ParamsArgs b;
  b.method = "prefix_tuning";
  EXPECT_EQ(params(b, text), exit_code::kInvalid);
  EXPECT_TRUE(text.empty());
}

TEST_F(Commands, AdaptMissingOutputDirWritesNothing) {
  AdaptArgs a = adapt_args("lora", "missing/out.ckpt");
  std::ostringstream out, err;
  EXPECT_EQ(cmd_adapt(a, out, err), exit_code::kInvalid);
  EXPECT_FALSE(fs::exists(dir_ / "missing"));
  EXPECT_EQ(file_count(dir_), 2u);
}

TEST_F(Commands, AdaptRankZeroIsInvalid) {
  AdaptArgs a = adapt_args("lora", "out.ckpt");
  a.rank = 0;
  std::ostringstream out, err;
  EXPECT_EQ(cmd_adapt(a, out, err), exit_code::kInvalid);
  EXPECT_FALSE(fs::exists(a.out));
}

TEST_F(Commands, AdaptWritesNamespacedCheckpointAndMetrics) {
  const AdaptArgs a = adapt_args("lora", "lora.ckpt");
  std::ostringstream out, err;
  ASSERT_EQ(cmd_adapt(a, out, err), exit_code::kOk) << err.str();
  const Checkpoint ck = Checkpoint::load(a.out);
  for (const auto& e : ck.entries()) EXPECT_TRUE(e.name.starts_with("adapter/lora/")) << e.name;
  const Json m = Json::parse(slurp(dir_ / "lora.ckpt.metrics.json"));
  EXPECT_EQ(m.at("method"), "lora");
  EXPECT_EQ(m.at("rank"), 2);
  EXPECT_EQ(m.at("total_steps"), 3);
  EXPECT_TRUE(m.at("final").contains("in_domain_ter"));
  EXPECT_TRUE(m.at("zero_shot").contains("ood_ter"));

  // Same seed, same bytes.
  const AdaptArgs b = adapt_args("lora", "again.ckpt");
  ASSERT_EQ(cmd_adapt(b, out, err), exit_code::kOk);
  EXPECT_EQ(slurp(a.out), slurp(b.out));
  EXPECT_EQ(slurp(dir_ / "lora.ckpt.metrics.json"), slurp(dir_ / "again.ckpt.metrics.json"));
}

TEST_F(Commands, AdaptEchoesS2Alphas) {
  AdaptArgs a = adapt_args("s2lora", "s2.ckpt");
  a.alpha1 = 0.05;
  a.alpha2 = 0.02;
  std::ostringstream out, err;
  ASSERT_EQ(cmd_adapt(a, out, err), exit_code::kOk) << err.str();
  const Json m = Json::parse(slurp(dir_ / "s2.ckpt.metrics.json"));
  EXPECT_DOUBLE_EQ(m.at("alpha1").get<double>(), 0.05);
  EXPECT_DOUBLE_EQ(m.at("alpha2").get<double>(), 0.02);
  EXPECT_TRUE(m.contains("rank_reports"));
}

TEST_F(Commands, MergeOfZeroAdapterEqualsBase) {
  save_fresh_adapter(Method::lora, 4, dir_ / "zero.ckpt", small_arch());
  MergeArgs a{dir_ / "base.ckpt", dir_ / "zero.ckpt", dir_ / "merged.ckpt"};
  std::ostringstream out, err;
  ASSERT_EQ(cmd_merge(a, out, err), exit_code::kOk) << err.str();
  EXPECT_EQ(out.str().rfind("max forward deviation: 0.000e+00\n", 0), 0u) << out.str();
  EXPECT_EQ(slurp(a.out), slurp(a.base));
}

TEST_F(Commands, MergeRejectsArchMismatch) {
  save_fresh_adapter(Method::lora, 4, dir_ / "tiny.ckpt", tu::tiny_arch());
  MergeArgs a{dir_ / "base.ckpt", dir_ / "tiny.ckpt", dir_ / "merged.ckpt"};
  std::ostringstream out, err;
  EXPECT_EQ(cmd_merge(a, out, err), exit_code::kInvalid);
  EXPECT_FALSE(fs::exists(a.out));
}

TEST_F(Commands, ReadAdapterRejectsForeignArrays) {
  const AdaptedModel am = attach(build_model(small_arch(), 7), AdapterSpec::for_method(Method::lora, 2), 1);
  Checkpoint ck = adapter_checkpoint(am.adapter());
  ck.add("model/stray", Tensor({1}, {1.0}));
  EXPECT_THROW(read_adapter_checkpoint(ck), std::exception);
}

TEST_F(Commands, ReportOnFreshS2) {
  save_fresh_adapter(Method::s2lora, 4, dir_ / "s2.ckpt", small_arch());
  const auto zero = report_rows(1e-4);
  ASSERT_FALSE(zero.empty());
  for (const auto& row : zero) {
    for (int v : row) EXPECT_EQ(v, 0);
  }
  for (const auto& row : report_rows(0.0)) {
    for (int v : row) EXPECT_EQ(v, 4);
  }
}

TEST_F(Commands, ReportRejectsLora) {
  save_fresh_adapter(Method::lora, 4, dir_ / "lora.ckpt", small_arch());
  ReportArgs r;
  r.adapter = dir_ / "lora.ckpt";
  r.out = dir_ / "report.csv";
  std::ostringstream out, err;
  EXPECT_EQ(cmd_report(r, out, err), exit_code::kInvalid);
  EXPECT_FALSE(fs::exists(r.out));
}

TEST(Grid, Shapes) {
  const auto t1 = ablation_grid("table1");
  EXPECT_EQ(t1.size(), 18u);
  bool saw48 = false;
  for (const auto& c : t1) {
    if (c.spec.method == Method::adalora && c.spec.target_rank == 32) {
      EXPECT_EQ(c.spec.initial_rank, 48);
      saw48 = true;
    }
  }
  EXPECT_TRUE(saw48);
  const auto t2 = ablation_grid("table2");
  EXPECT_EQ(t2.size(), 8u);
  for (const auto& c : t2) EXPECT_EQ(c.spec.rank, 8) << c.row;
  EXPECT_THROW(ablation_grid("table3"), ValidationError);
}
