#include "tsteer/ingest.hpp"

#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

namespace tsteer {
namespace {

TEST(DateTest, ParseAndFormat) {
    auto d = Date::parse("2008-11-30");
    ASSERT_TRUE(d);
    EXPECT_EQ(d->to_string(), "2008-11-30");
    EXPECT_FALSE(Date::parse("2021-02-30"));
    EXPECT_FALSE(Date::parse("2021/02/01"));
    EXPECT_FALSE(Date::parse("21-02-01"));
    EXPECT_TRUE(Date::parse("2020-02-29"));
}

TEST(DateTest, DayArithmetic) {
    EXPECT_EQ((Date{1970, 1, 1}).to_days(), 0);
    EXPECT_EQ((Date{2000, 3, 1}).to_days() - (Date{2000, 2, 28}).to_days(), 2);
    EXPECT_EQ((Date{2000, 12, 31}).plus_days(1), (Date{2001, 1, 1}));
    for (std::int64_t d = -1000; d < 30000; d += 37) EXPECT_EQ(Date::from_days(d).to_days(), d);
}

TEST(LoadCsvTest, ThreeRows) {
    const PriceSeries s = parse_csv("date,value\n2020-01-01,10\n2020-01-02,11.5\n2020-01-03,12\n");
    ASSERT_EQ(s.size(), 3u);
    EXPECT_EQ(s.values[1], 11.5);
    EXPECT_EQ(s.provenance, Provenance::ingested);
}

TEST(LoadCsvTest, NonPositiveValueRejectedWithLine) {
    try {
        parse_csv("date,value\n2020-01-01,10\n2020-01-02,-5\n");
        FAIL() << "expected ParseError";
    } catch (const ParseError& e) {
        EXPECT_EQ(e.line(), 3u);
        EXPECT_NE(std::string(e.what()).find("non-positive"), std::string::npos);
    }
}

TEST(LoadCsvTest, MalformedRowsReportLine) {
    try {
        parse_csv("2020-01-01,10\n2020-13-02,11\n");
        FAIL();
    } catch (const ParseError& e) {
        EXPECT_EQ(e.line(), 2u);
    }
    EXPECT_THROW(parse_csv("2020-01-01,abc\n"), ParseError);
    EXPECT_THROW(parse_csv("2020-01-01\n"), ParseError);
}

TEST(LoadCsvTest, UnsortedInputIsSorted) {
    const PriceSeries s = parse_csv("2020-01-03,3\n2020-01-01,1\n2020-01-02,2\n");
    EXPECT_EQ(s.values, (std::vector<double>{1, 2, 3}));
    EXPECT_NO_THROW(s.validate());
}

TEST(LoadCsvTest, DuplicateDateRejected) {
    EXPECT_THROW(parse_csv("2020-01-01,1\n2020-01-01,2\n"), std::invalid_argument);
}

TEST(LoadCsvTest, ReadsFromDisk) {
    const auto path = std::filesystem::temp_directory_path() / "tsteer_ingest_test.csv";
    {
        std::ofstream out(path);
        out << "date,value\r\n2020-01-01,10\r\n";
    }
    EXPECT_EQ(load_csv(path).size(), 1u);
    std::filesystem::remove(path);
    EXPECT_THROW(load_csv(path), std::runtime_error);
}

PriceSeries dated(std::vector<std::pair<std::string, double>> rows) {
    PriceSeries s;
    for (auto& [d, v] : rows) {
        s.dates.push_back(*Date::parse(d));
        s.values.push_back(v);
    }
    return s;
}

TEST(FillGapsTest, WeekendCarriesFriday) {
    const PriceSeries s = fill_gaps(dated({{"2024-01-05", 100}, {"2024-01-08", 102}}));
    ASSERT_EQ(s.size(), 4u);
    EXPECT_EQ(s.dates[1], (Date{2024, 1, 6}));
    EXPECT_EQ(s.values, (std::vector<double>{100, 100, 100, 102}));
}

TEST(FillGapsTest, NoGapsIsIdentity) {
    const PriceSeries in = dated({{"2024-01-01", 1}, {"2024-01-02", 2}, {"2024-01-03", 3}});
    const PriceSeries out = fill_gaps(in);
    EXPECT_EQ(out.values, in.values);
    EXPECT_EQ(out.dates, in.dates);
}

TEST(FillGapsTest, SingleElementUnchanged) {
    const PriceSeries in = dated({{"2024-01-01", 7}});
    EXPECT_EQ(fill_gaps(in).values, in.values);
}

TEST(FillGapsTest, IdempotentAndPreservesObservedValues) {
    Rng rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        PriceSeries in;
        Date d{2010, 1, 1};
        for (int i = 0; i < 60; ++i) {
            d = d.plus_days(1 + static_cast<std::int64_t>(rng.below(4)));
            in.dates.push_back(d);
            in.values.push_back(1.0 + rng.uniform());
        }
        const PriceSeries once = fill_gaps(in);
        const PriceSeries twice = fill_gaps(once);
        EXPECT_EQ(once.values, twice.values);
        EXPECT_EQ(once.dates, twice.dates);
        const std::int64_t base = once.dates.front().to_days();
        for (std::size_t i = 0; i < in.size(); ++i)
            EXPECT_EQ(once.values[static_cast<std::size_t>(in.dates[i].to_days() - base)], in.values[i]);
    }
}

PriceSeries daily_series(Date start, std::size_t n) {
    PriceSeries s;
    for (std::size_t i = 0; i < n; ++i) {
        s.dates.push_back(start.plus_days(static_cast<std::int64_t>(i)));
        s.values.push_back(100.0 + static_cast<double>(i));
    }
    return s;
}

TEST(SliceWindowTest, CrashWindowEndsOnTableDate) {
    const RegimeCatalog cat = RegimeCatalog::defaults();
    const RegimeWindow* w = cat.find("2008 Crash");
    ASSERT_NE(w, nullptr);
    const PriceSeries s = daily_series(Date{2008, 1, 1}, 400);
    const ContextWindow ctx = slice_window(s, *w, 128);
    ASSERT_EQ(ctx.values.size(), 128u);
    EXPECT_EQ(ctx.end_date, (Date{2008, 11, 30}));
    const auto end_idx = static_cast<double>((Date{2008, 11, 30}).to_days() - (Date{2008, 1, 1}).to_days());
    EXPECT_EQ(ctx.values.back(), 100.0 + end_idx);
    EXPECT_EQ(ctx.values.front(), 100.0 + end_idx - 127);
    EXPECT_EQ(ctx.source, "2008 Crash");
}

TEST(SliceWindowTest, SingleStep) {
    const RegimeWindow w{"w", SemanticType::calm, {2020, 1, 1}, {2020, 1, 10}};
    const ContextWindow ctx = slice_window(daily_series({2019, 12, 1}, 60), w, 1);
    ASSERT_EQ(ctx.values.size(), 1u);
    EXPECT_EQ(ctx.end_date, (Date{2020, 1, 10}));
}

TEST(SliceWindowTest, ShortWindowIsCoverageError) {
    const RegimeWindow w{"w", SemanticType::calm, {2020, 1, 1}, {2020, 1, 10}};
    EXPECT_THROW(slice_window(daily_series({2019, 12, 1}, 60), w, 11), CoverageError);
}

TEST(SliceWindowTest, LeadingGapIsNeverBackfilled) {
    const RegimeWindow w{"w", SemanticType::crash, {2020, 1, 1}, {2020, 3, 1}};
    try {
        slice_window(daily_series({2020, 1, 5}, 100), w, 10);
        FAIL();
    } catch (const CoverageError& e) {
        EXPECT_NE(std::string(e.what()).find("2020-01-01 to 2020-01-04"), std::string::npos) << e.what();
    }
}

TEST(SliceWindowTest, TrailingShortfallNamesMissingRange) {
    const RegimeWindow w{"w", SemanticType::crash, {2020, 1, 1}, {2020, 3, 1}};
    try {
        slice_window(daily_series({2019, 12, 1}, 80), w, 10);
        FAIL();
    } catch (const CoverageError& e) {
        EXPECT_NE(std::string(e.what()).find("2020-02-19 to 2020-03-01"), std::string::npos) << e.what();
    }
}

TEST(CatalogTest, DefaultWindowsSpanAtLeast128Days) {
    const RegimeCatalog cat = RegimeCatalog::defaults();
    ASSERT_EQ(cat.windows().size(), 6u);
    for (const auto& w : cat.windows()) EXPECT_GE(w.span_days(), 128) << w.name;
    EXPECT_EQ(cat.find("2017 Calm")->span_days(), 129);
}

TEST(CatalogTest, JsonRoundTripAndUniqueNames) {
    const RegimeCatalog cat = RegimeCatalog::defaults();
    const RegimeCatalog back = RegimeCatalog::from_json_text(cat.to_json_text());
    ASSERT_EQ(back.windows().size(), cat.windows().size());
    EXPECT_EQ(back.windows()[4].name, "2000 Crash");
    EXPECT_EQ(back.windows()[4].end_date, (Date{2001, 1, 6}));
    EXPECT_EQ(back.windows()[4].semantic_type, SemanticType::crash);

    EXPECT_THROW(RegimeCatalog::from_json_text(
                     R"({"windows":[{"name":"a","type":"calm","start":"2020-01-01","end":"2020-02-01"},
                                    {"name":"a","type":"calm","start":"2020-01-01","end":"2020-02-01"}]})"),
                 std::invalid_argument);
}

TEST(CsvOutputTest, ContextDatesCountBackFromEnd) {
    ContextWindow ctx{{1.5, 2.0}, {2020, 1, 1}, "x"};
    EXPECT_EQ(context_to_csv(ctx), "date,value\n2019-12-31,1.5\n2020-01-01,2\n");
}

}  // namespace
}  // namespace tsteer
