#include <gtest/gtest.h>

#include <nlohmann/json.hpp>

#include "promptblend/report.hpp"

namespace pb = promptblend;

namespace {

pb::RunRecord sample_record() {
  pb::RunRecord r;
  r.config.epochs = 2;
  r.config.seed = 4;
  r.predictor = {64, 128, 128, 3, 0.1};
  r.train_size = 5;
  r.basis_prompts = {"Summarize the key insights needed to answer in a short poem",
                     "Act out an exaggerated skit to depict the logic behind the answer",
                     "Prototype a computer program to compute the answer algorithmically"};
  r.basis_gram = {1.0, 0.25, -0.5, 0.25, 1.0, 0.125, -0.5, 0.125, 1.0};
  r.orthogonality = pb::orthogonality_score(r.basis_gram, 3);
  r.steps = {{1, 1, 10, 8.5}, {1, 2, 10, 8.25}, {2, 3, 10, 0.1 + 0.2}, {2, 4, 10, 7.0 / 3.0}};
  r.epoch_means = {8.375, 4.0};
  r.control_mean = 8.2;
  r.prompted_mean = 8.1333333;
  r.examples = {{"e1", "Which is a tool? Options: A: ruler - B: cloud", 7.93, 8.0, {0.1, 0.2, 0.3}},
                {"e2", "Fish breathe with? Options: A: gills - B: lungs", 8.39, 8.4,
                 {-0.8324, -0.0842, 1.4863}},
                {"e3", "What melts ice? Options: A: heat - B: cold", 8.08, 8.2, {1.0, 1.0, -1.0}}};
  r.lm_hash_before = r.lm_hash_after = 0xfeedULL;
  r.wall_clock_seconds = 12.5;
  return r;
}

}  // namespace

TEST(Formatting, FixedFourAndExactDecimal) {
  EXPECT_EQ(pb::fixed4(1.4863), "1.4863");
  EXPECT_EQ(pb::fixed4(-0.0842), "-0.0842");
  EXPECT_EQ(pb::fixed4(-0.8324), "-0.8324");
  EXPECT_EQ(pb::fixed4(1.0), "1.0000");
  const double tricky = 0.1 + 0.2;
  EXPECT_EQ(std::strtod(pb::exact_decimal(tricky).c_str(), nullptr), tricky);
}

TEST(Report, HardestFirstWithFourDecimalWeights) {
  const auto bundle = pb::render_report(sample_record(), 3);
  ASSERT_EQ(bundle.rows.size(), 3u);
  EXPECT_EQ(bundle.rows[0].loss, 8.39);
  EXPECT_EQ(bundle.rows[1].loss, 8.08);
  EXPECT_EQ(bundle.rows[2].loss, 7.93);
  const auto& top = bundle.rows[0].contributors;
  EXPECT_NE(top[0].prompt.find("Prototype"), std::string::npos);
  EXPECT_NE(top[1].prompt.find("skit"), std::string::npos);
  EXPECT_NE(top[2].prompt.find("poem"), std::string::npos);
  const std::string& t = bundle.text;
  EXPECT_NE(t.find("(1.4863)"), std::string::npos);
  EXPECT_NE(t.find("(-0.0842)"), std::string::npos);
  EXPECT_NE(t.find("(-0.8324)"), std::string::npos);
  EXPECT_LT(t.find("8.3900 |"), t.find("8.0800 |"));
  EXPECT_LT(t.find("8.0800 |"), t.find("7.9300 |"));
}

TEST(Report, ContributorsArePrefixOfTopContributors) {
  const auto r = sample_record();
  const auto bundle = pb::render_report(r, 2);
  for (const auto& row : bundle.rows) {
    const auto& ex = *std::find_if(r.examples.begin(), r.examples.end(),
                                   [&](const auto& e) { return e.id == row.id; });
    const auto full = pb::top_contributors(ex.weights, r.basis_prompts, 3);
    ASSERT_EQ(row.contributors.size(), 2u);
    for (std::size_t i = 0; i < 2; ++i) {
      EXPECT_EQ(row.contributors[i].index, full[i].index);
    }
  }
}

TEST(Report, JsonCarriesSameRows) {
  const auto bundle = pb::render_report(sample_record(), 3);
  const auto j = nlohmann::json::parse(bundle.json);
  EXPECT_EQ(j.at("rows").size(), 3u);
  EXPECT_EQ(j["rows"][0]["loss"], "8.3900");
  EXPECT_EQ(j["rows"][0]["top_contributors"][0]["weight"], "1.4863");
  EXPECT_EQ(j["split"], "eval");
}

TEST(Report, RenderingIsPure) {
  const auto r = sample_record();
  auto later = r;
  later.wall_clock_seconds = 99.0;
  EXPECT_EQ(pb::render_report(r).text, pb::render_report(later).text);
  EXPECT_EQ(pb::render_report(r).json, pb::render_report(later).json);
}

TEST(Report, Errors) {
  auto r = sample_record();
  EXPECT_THROW(pb::render_report(r, 4), pb::ValidationError);
  r.examples.clear();
  EXPECT_THROW(pb::render_report(r, 3), pb::ValidationError);
}

TEST(Record, JsonRoundTrip) {
  const auto r = sample_record();
  const auto back = pb::record_from_json(pb::record_to_json(r));
  EXPECT_EQ(back.config, r.config);
  EXPECT_EQ(back.predictor, r.predictor);
  EXPECT_EQ(back.steps, r.steps);
  EXPECT_EQ(back.examples, r.examples);
  EXPECT_EQ(back.basis_gram, r.basis_gram);
  EXPECT_EQ(pb::record_to_json(back), pb::record_to_json(r));
  EXPECT_THROW(pb::record_from_json("{"), pb::ValidationError);
  EXPECT_THROW(pb::record_from_json("{}"), pb::ValidationError);
}

TEST(Curves, CsvRoundTripIsBitExact) {
  const auto r = sample_record();
  const std::string csv = pb::curve_csv(r);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "epoch,step,batch_size,loss");
  const auto parsed = pb::parse_curve_csv(csv);
  EXPECT_EQ(parsed, r.steps);
  EXPECT_THROW(pb::parse_curve_csv("bad\n"), pb::ParseError);
  EXPECT_THROW(pb::parse_curve_csv("epoch,step,batch_size,loss\n1,2,x,3\n"), pb::ParseError);
}

TEST(Curves, SingleRecordCsvRowsMatchSteps) {
  const auto cmp = pb::render_curves({sample_record()});
  ASSERT_EQ(cmp.csvs.size(), 1u);
  const auto& csv = cmp.csvs[0];
  EXPECT_EQ(static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')), 1 + sample_record().steps.size());
}

TEST(Curves, ComparisonFlagsVolatileRun) {
  auto smooth = sample_record();
  smooth.config.batch_size = 10;
  smooth.epoch_means = {3.0, 2.5, 2.0, 1.5};
  auto noisy = sample_record();
  noisy.config.batch_size = 2;
  noisy.epoch_means = {3.0, 1.0, 2.5, 0.5};
  const auto cmp = pb::render_curves({smooth, noisy}, {"b10", "b2"});
  EXPECT_EQ(cmp.most_volatile, 1u);
  EXPECT_EQ(cmp.stability[0], 0.0);
  EXPECT_NE(cmp.summary.find("most volatile: b2 (batch_size 2)"), std::string::npos);
  EXPECT_NE(cmp.summary.find("ratio"), std::string::npos);
  auto short_run = smooth;
  short_run.epoch_means = {1.0, 2.0};
  EXPECT_THROW(pb::render_curves({smooth, short_run}), pb::ValidationError);
}

TEST(Ortho, TableIsSymmetricAndParsesBack) {
  const auto r = sample_record();
  const std::string text = pb::render_ortho(r.basis_prompts, r.basis_gram);
  const auto gram = pb::parse_ortho_gram(text, 3);
  for (std::size_t a = 0; a < 3; ++a) {
    for (std::size_t b = 0; b < 3; ++b) {
      EXPECT_EQ(gram[a * 3 + b], gram[b * 3 + a]);
      EXPECT_NEAR(gram[a * 3 + b], r.basis_gram[a * 3 + b], 5e-5);
    }
  }
  EXPECT_NE(text.find("most parallel pair: [1] & [3] similarity -0.5000"), std::string::npos);
}

TEST(Ortho, SinglePromptAndDuplicates) {
  const std::string single = pb::render_ortho({"only"}, {1.0});
  EXPECT_NE(single.find("orthogonality score: 1.0000"), std::string::npos);
  EXPECT_NE(single.find("most parallel pair: none"), std::string::npos);
  const std::string dup = pb::render_ortho({"x", "y", "x"}, {1, 0.1, 1, 0.1, 1, 0.1, 1, 0.1, 1});
  EXPECT_NE(dup.find("[1] & [3] similarity 1.0000"), std::string::npos);
}
