#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "../common/csv.hpp"
#include "marnet/ablation.hpp"
#include "marnet/checkpoint.hpp"

namespace marnet {
namespace {

namespace fs = std::filesystem;

AblationSpec small_spec(const std::string& sweep, nlohmann::json values) {
  AblationSpec s;
  s.sweep = sweep;
  s.values = std::move(values);
  s.train.model = presets::lite(4);
  s.train.epochs = 1;
  s.train.points = 64;
  s.train.batch_size = 8;
  s.data.train_size = 8;
  s.data.test_size = 8;
  s.data.points = 64;
  s.voting = 3;
  return s;
}

std::size_t column(const AblationTable& t, const std::string& name) {
  return static_cast<std::size_t>(std::find(t.columns.begin(), t.columns.end(), name) - t.columns.begin());
}

TEST(Ablation, RejectsUnknownSweepsAndToggles) {
  EXPECT_THROW(ablate(small_spec("depth", {1})), ConfigError);
  EXPECT_THROW(ablate(small_spec("components", {"marnet", "attention"})), ConfigError);
  EXPECT_THROW(ablate(small_spec("noise", {"many"})), ConfigError);
  EXPECT_THROW(ablate(small_spec("groups", {0})), ConfigError);
  EXPECT_THROW(ablation_spec_from_json({{"sweep", "noise"}}), ConfigError);
  EXPECT_THROW(ablation_spec_from_json({{"sweep", "noise"}, {"values", 3}, {"train", nlohmann::json::object()}}),
               ConfigError);
}

TEST(Ablation, EmptyValuesGiveHeaderOnly) {
  const auto t = ablate(small_spec("noise", nlohmann::json::array()));
  EXPECT_TRUE(t.rows.empty());
  EXPECT_EQ(csv::check_well_formed(to_csv(t), 0), "");
}

TEST(Ablation, DefaultComponentsListsAllVariants) {
  const auto s = ablation_spec_from_json({{"sweep", "components"}, {"train", {{"model", {{"preset", "lite"}, {"n_outputs", 4}}}}}});
  EXPECT_EQ(s.values.size(), 5u);
}

TEST(Ablation, GroupsCostDecreases) {
  const auto t = ablate(small_spec("groups", {1, 2, 4, 8}));
  ASSERT_EQ(t.rows.size(), 4u);
  const auto p = column(t, "parameters"), oa = column(t, "overall_accuracy");
  for (std::size_t i = 1; i < 4; ++i) EXPECT_LT(t.rows[i][p].get<std::size_t>(), t.rows[i - 1][p].get<std::size_t>());
  EXPECT_TRUE(t.rows[0][oa].is_null());
  EXPECT_EQ(csv::check_well_formed(to_csv(t), 4), "");
}

TEST(Ablation, LevelsCostIncreases) {
  const auto t = ablate(small_spec("levels", {3, 4, 5, 6}));
  ASSERT_EQ(t.rows.size(), 4u);
  const auto p = column(t, "parameters");
  for (std::size_t i = 1; i < 4; ++i) EXPECT_GT(t.rows[i][p].get<std::size_t>(), t.rows[i - 1][p].get<std::size_t>());
}

TEST(Ablation, ComponentsSweep) {
  const auto t = ablate(small_spec("components", {"backbone", "backbone_da", "marnet_no_r", "marnet", "marnet_voting"}));
  ASSERT_EQ(t.rows.size(), 5u);
  const auto p = column(t, "parameters"), oa = column(t, "overall_accuracy"), sec = column(t, "train_seconds");
  EXPECT_EQ(t.rows[2][p], t.rows[3][p]);
  EXPECT_EQ(t.rows[0][p], t.rows[1][p]);
  EXPECT_LT(t.rows[0][p].get<std::size_t>(), t.rows[3][p].get<std::size_t>());
  EXPECT_EQ(t.rows[3][sec], t.rows[4][sec]);
  for (const auto& row : t.rows) {
    EXPECT_GE(row[oa].get<double>(), 0.0);
    EXPECT_LE(row[oa].get<double>(), 1.0);
  }
  EXPECT_EQ(csv::check_well_formed(to_csv(t), 5), "");
}

TEST(Ablation, NoiseZeroRowEqualsPlainEvaluation) {
  const auto dir = fs::temp_directory_path() / "marnet_ablation_noise";
  fs::create_directories(dir);
  auto s = small_spec("noise", {0, 1, 10});
  const auto [train_set, test_set] = load_data(s.data);
  Model<float> model(s.train.model, s.train.seed);
  fit(model, s.train, train_set);
  save_checkpoint(dir / "m.ckpt", capture(model));
  s.checkpoint = (dir / "m.ckpt").string();
  const auto t = ablate(s);
  ASSERT_EQ(t.rows.size(), 3u);
  EvalOptions plain;
  plain.points = s.train.points;
  const auto r = evaluate(model, test_set, plain);
  EXPECT_EQ(t.rows[0][column(t, "overall_accuracy")].get<double>(), r.overall_accuracy);
  EXPECT_EQ(t.rows[0][column(t, "mean_class_accuracy")].get<double>(), r.mean_class_accuracy);
  EXPECT_EQ(t.rows[0][column(t, "train_seconds")].get<double>(), 0.0);

  write_results(t, dir / "out");
  std::ifstream in(dir / "out" / "results.csv");
  const std::string text{std::istreambuf_iterator<char>(in), {}};
  EXPECT_EQ(text, to_csv(t));
  std::ifstream js(dir / "out" / "results.json");
  EXPECT_EQ(nlohmann::json::parse(js).at("rows").size(), 3u);
  fs::remove_all(dir);
}

TEST(Ablation, PointsSweepScalesCost) {
  const auto t = ablate(small_spec("points", {32, 64, 128}));
  ASSERT_EQ(t.rows.size(), 3u);
  const auto f = column(t, "mflops");
  EXPECT_LT(t.rows[0][f].get<double>(), t.rows[1][f].get<double>());
  EXPECT_LT(t.rows[1][f].get<double>(), t.rows[2][f].get<double>());
  EXPECT_EQ(csv::check_well_formed(to_csv(t), 3), "");
}

TEST(Csv, QuotesAwkwardCells) {
  AblationTable t;
  t.columns = {"a", "b"};
  t.rows = {{"x,y", nullptr}, {"say \"hi\"", 2}};
  const auto text = to_csv(t);
  EXPECT_EQ(text, "a,b\n\"x,y\",\n\"say \"\"hi\"\"\",2\n");
  const auto rows = csv::parse(text);
  EXPECT_EQ(rows[1][0], "x,y");
  EXPECT_EQ(rows[2][0], "say \"hi\"");
}

}  // namespace
}  // namespace marnet
