#include <gtest/gtest.h>

#include <functional>
#include <sstream>

#include "helpers.hpp"

using namespace xtpu;

namespace {

const std::vector<double> kVolts{0.5, 0.6, 0.7, 0.8};

ErrorModelTable parse(const std::string& csv) {
  std::istringstream in(csv);
  return parse_variance_csv(in, make_levels(kVolts));
}

ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorKind::internal;
}

}  // namespace

TEST(Levels, DenseCodesAscendingVolts) {
  const auto lv = make_levels({0.8, 0.5, 0.7, 0.6});
  ASSERT_EQ(lv.size(), 4u);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(lv[i].code, i);
  EXPECT_DOUBLE_EQ(lv.front().volts, 0.5);
  EXPECT_DOUBLE_EQ(lv.back().volts, 0.8);
  EXPECT_THROW(make_levels({0.5, 0.5}), Error);
  EXPECT_THROW(make_levels({}), Error);
}

TEST(VarianceCsv, MeasuredRowsAreStoredRaw) {
  const auto t = load_variance_table(testing_util::data_path("pe_variance.csv"), kVolts);
  const auto& l05 = t.level(t.by_volts(0.5).code);
  ASSERT_EQ(l05.rows.size(), 9u);
  EXPECT_EQ(l05.rows[0].k, 1u);
  EXPECT_DOUBLE_EQ(l05.rows[0].variance, 3.0e6);
  const auto& l07 = t.level(t.by_volts(0.7).code);
  EXPECT_EQ(l07.rows.back().k, 256u);
  EXPECT_DOUBLE_EQ(l07.rows.back().variance, 4.9e7);
  EXPECT_FALSE(t.fitted());
  EXPECT_TRUE(t.level(t.nominal_code()).fitted);
  EXPECT_EQ(t.level(t.nominal_code()).single_pe_variance, 0.0);
}

TEST(VarianceCsv, NegativeVarianceIsError) {
  EXPECT_EQ(kind_of([] { parse("voltage,k,variance\n0.5,1,-1\n"); }), ErrorKind::range);
}

TEST(VarianceCsv, UnknownVoltageAndMalformedRows) {
  EXPECT_EQ(kind_of([] { parse("voltage,k,variance\n0.55,1,10\n"); }), ErrorKind::range);
  EXPECT_EQ(kind_of([] { parse("voltage,k,variance\n0.5,abc,10\n"); }), ErrorKind::parse);
  EXPECT_EQ(kind_of([] { parse("volts,k,variance\n"); }), ErrorKind::parse);
  EXPECT_EQ(kind_of([] { parse("voltage,k,variance\n0.5,1\n"); }), ErrorKind::parse);
  EXPECT_EQ(kind_of([] { parse("voltage,k,variance\n0.8,1,5\n"); }), ErrorKind::range);
}

TEST(VarianceCsv, MissingLevelIsNamed) {
  try {
    parse("voltage,k,variance\n0.5,1,10\n0.5,2,20\n0.6,1,10\n0.6,2,20\n");
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("0.7"), std::string::npos) << e.what();
  }
}

TEST(VarianceCsv, OptionalMeanColumn) {
  const auto t = fit_linear_scaling(parse(
      "voltage,k,variance,mean\n0.5,1,10,2\n0.5,2,20,4\n0.6,1,1,\n0.6,2,2,\n0.7,1,1,0\n0.7,4,4,0\n"));
  EXPECT_DOUBLE_EQ(t.level(0).single_pe_mean, 2.0);
  EXPECT_DOUBLE_EQ(t.level(1).single_pe_mean, 0.0);
}

TEST(FitLinearScaling, ExactLinearDataGivesExactSlope) {
  const double c = 12345.0;
  std::ostringstream csv;
  csv << "voltage,k,variance\n";
  for (double v : {0.5, 0.6, 0.7})
    for (int k : {1, 2, 4, 8}) csv << v << ',' << k << ',' << k * c << '\n';
  const auto t = fit_linear_scaling(parse(csv.str()));
  for (int code = 0; code < 3; ++code) {
    EXPECT_DOUBLE_EQ(t.level(code).single_pe_variance, c);
    EXPECT_NEAR(t.level(code).residual_rms, 0.0, 1e-6);
  }
  EXPECT_TRUE(t.fitted());
}

TEST(FitLinearScaling, MeasuredSlopeMatchesHandRegression) {
  // Through-origin least squares over the 0.6 V column of the table:
  //   sum k^2 over k = 1,2,...,256 is (4^9 - 1) / 3 = 87381
  //   sum k*var = 0.14e6 + 2*3.0e6 + 4*3.2e6 + 8*8.2e6 + 16*1.9e7 + 32*3.4e7
  //             + 64*7.2e7 + 128*1.4e8 + 256*2.9e8 = 98244.54e6
  const double expected = 98244.54e6 / 87381.0;
  const auto t = testing_util::variance_table();
  const double got = t.level(t.by_volts(0.6).code).single_pe_variance;
  EXPECT_NEAR(got / expected, 1.0, 1e-6);
}

TEST(FitLinearScaling, SingleRowIsInsufficient) {
  EXPECT_EQ(kind_of([] { fit_linear_scaling(parse("voltage,k,variance\n0.5,1,1\n0.6,1,1\n0.7,1,1\n")); }),
            ErrorKind::insufficient);
}

TEST(ColumnStats, ScalesWithFanIn) {
  const auto t = ErrorModelTable::from_single_pe(kVolts, {3.0e6, 1.0e6, 2.0e5, 0.0}, {1.0, 0.0, 0.0, 0.0});
  const auto nominal = column_error_stats(t, t.nominal_code(), 77);
  EXPECT_EQ(nominal.mean, 0.0);
  EXPECT_EQ(nominal.variance, 0.0);
  const auto c16 = column_error_stats(t, 0, 16);
  EXPECT_DOUBLE_EQ(c16.variance, 4.8e7);
  EXPECT_DOUBLE_EQ(c16.mean, 16.0);
  const auto c0 = column_error_stats(t, 0, 0);
  EXPECT_EQ(c0.mean, 0.0);
  EXPECT_EQ(c0.variance, 0.0);
}

TEST(ColumnStats, UnfittedTableIsError) {
  const auto raw = load_variance_table(testing_util::data_path("pe_variance.csv"), kVolts);
  EXPECT_EQ(kind_of([&] { column_error_stats(raw, 0, 4); }), ErrorKind::insufficient);
}

TEST(SamplePeError, NominalNeverErrs) {
  const auto t = testing_util::variance_table();
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) EXPECT_EQ(sample_pe_error(t, t.nominal_code(), rng), 0);
}

TEST(SamplePeError, VarianceMatchesModel) {
  const auto t = ErrorModelTable::from_single_pe(kVolts, {3.0e6, 1.4e5, 2.0e5, 0.0});
  Rng rng(2024);
  const int n = 1000000;
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double e = static_cast<double>(sample_pe_error(t, 1, rng));
    s += e;
    s2 += e * e;
  }
  const double mean = s / n;
  const double var = (s2 - n * mean * mean) / (n - 1);
  EXPECT_NEAR(var / 1.4e5, 1.0, 0.02);
}

TEST(SamplePeError, SameSeedSameSequence) {
  const auto t = testing_util::variance_table();
  Rng a(9), b(9);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(sample_pe_error(t, 0, a), sample_pe_error(t, 0, b));
}

TEST(FromSinglePe, NominalMustBeExact) {
  EXPECT_THROW(ErrorModelTable::from_single_pe({0.5, 0.8}, {1.0, 1.0}), Error);
  EXPECT_THROW(ErrorModelTable::from_single_pe({0.5, 0.8}, {-1.0, 0.0}), Error);
}

TEST(TableJson, ListsEveryLevel) {
  const auto j = table_to_json(testing_util::variance_table());
  ASSERT_EQ(j["levels"].size(), 4u);
  EXPECT_TRUE(j["levels"][3]["nominal"].get<bool>());
  EXPECT_DOUBLE_EQ(j["nominal_volts"].get<double>(), 0.8);
}
