#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "common.hpp"
#include "convalign/alignment.hpp"
#include "oracles.hpp"

using namespace convalign;
using testutil::conversation;

namespace {

std::vector<TeamDifference> tds(const std::vector<double>& v) {
    std::vector<TeamDifference> out;
    for (std::size_t i = 0; i < v.size(); ++i) out.push_back({i + 1, v[i]});
    return out;
}

IntervalScore score(std::optional<double> d, std::optional<double> p) {
    IntervalScore s;
    s.k = 1;
    s.mean_doctor = d;
    s.mean_patient = p;
    return s;
}

} // namespace

TEST(Segment, UniformConversationGivesSingletons) {
    const auto c = conversation("u", 10);
    const auto iv = segment_intervals(c, std::vector<std::size_t>(10, 10));
    ASSERT_EQ(iv.size(), 10u);
    for (std::size_t k = 0; k < 10; ++k) {
        EXPECT_EQ(iv[k].first_sentence, k + 1);
        EXPECT_EQ(iv[k].last_sentence, k + 1);
        EXPECT_EQ(iv[k].token_end - iv[k].token_begin, 10u);
    }
}

TEST(Segment, CumulativeRuleHandWalk) {
    const auto c = conversation("h", 11);
    std::vector<std::size_t> counts(10, 7);
    counts.push_back(30);
    const auto iv = segment_intervals(c, counts);
    EXPECT_EQ(iv[0].first_sentence, 1u);
    EXPECT_EQ(iv[0].last_sentence, 2u); // cum 14 >= 10
    EXPECT_EQ(iv[1].last_sentence, 3u); // cum 21 >= 20
    EXPECT_EQ(iv[2].last_sentence, 5u); // cum 35 >= 30
    EXPECT_EQ(iv.back().last_sentence, 11u);
}

TEST(Segment, SplitAtNextSentenceBoundaryAfterTenOfHundred) {
    // 25 sentences of 4 tokens = 100 tokens; the first 10 tokens end inside
    // sentence 3, so the first interval closes after it.
    const auto c = conversation("w", 25);
    const auto iv = segment_intervals(c, std::vector<std::size_t>(25, 4));
    EXPECT_EQ(iv[0].last_sentence, 3u);
    EXPECT_EQ(iv[0].token_end, 12u);
    EXPECT_EQ(iv[1].last_sentence, 5u); // cum 20
}

TEST(Segment, CollapsedIntervalsAreEmpty) {
    const auto c = conversation("s", 10);
    std::vector<std::size_t> counts(10, 1);
    counts[0] = 91;
    const auto iv = segment_intervals(c, counts);
    EXPECT_EQ(iv[0].last_sentence, 1u);
    for (std::size_t k = 1; k < 9; ++k) EXPECT_TRUE(iv[k].empty()) << k;
    EXPECT_EQ(iv[9].first_sentence, 2u);
    EXPECT_EQ(iv[9].last_sentence, 10u);
}

TEST(Segment, Errors) {
    const auto c = conversation("e", 9);
    try {
        segment_intervals(c, std::vector<std::size_t>(9, 3));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::TooShort);
    }
    EXPECT_THROW(segment_intervals(conversation("e", 12), std::vector<std::size_t>(11, 3)), Error);
}

TEST(SegmentProperty, PartitionWithoutSplitting) {
    std::mt19937 gen(3);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t T = 10 + gen() % 60;
        const auto c = conversation("p", T);
        std::vector<std::size_t> counts(T);
        for (auto& x : counts) x = gen() % 12;
        counts[gen() % T] += 1;
        const auto iv = segment_intervals(c, counts);
        ASSERT_EQ(iv.size(), 10u);
        std::size_t next = 1;
        std::vector<std::size_t> scored;
        for (const auto& i : iv) {
            if (i.empty()) continue;
            EXPECT_EQ(i.first_sentence, next);
            next = i.last_sentence + 1;
            for (auto s : i.doctor_scored) scored.push_back(s);
            for (auto s : i.patient_scored) scored.push_back(s);
        }
        EXPECT_EQ(next, T + 1);
        std::sort(scored.begin(), scored.end());
        std::vector<std::size_t> expect;
        for (std::size_t t = 6; t <= T; ++t) expect.push_back(t);
        EXPECT_EQ(scored, expect);
    }
}

TEST(MeanScores, Examples) {
    Interval iv;
    iv.k = 3;
    iv.doctor_scored = {6, 8};
    iv.patient_scored = {7};
    const SentenceScores s{{6, 0.8}, {7, 0.5}, {8, 0.6}};
    const auto m = mean_speaker_scores(iv, s);
    EXPECT_TRUE(m.valid());
    EXPECT_DOUBLE_EQ(*m.mean_doctor, 0.7);
    EXPECT_DOUBLE_EQ(*m.mean_patient, 0.5);
    iv.patient_scored.clear();
    EXPECT_FALSE(mean_speaker_scores(iv, s).valid());
    iv.doctor_scored = {6};
    iv.patient_scored = {7};
    const auto one = mean_speaker_scores(iv, s);
    EXPECT_EQ(*one.mean_doctor, 0.8);
    EXPECT_EQ(*one.mean_patient, 0.5);
}

TEST(MeanScores, MissingPrediction) {
    Interval iv;
    iv.doctor_scored = {6};
    iv.patient_scored = {9};
    try {
        mean_speaker_scores(iv, {{6, 0.2}});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::MissingPrediction);
    }
}

TEST(TeamDiff, Examples) {
    EXPECT_NEAR(team_difference(score(0.7, 0.5)).tdiff, 0.1, 1e-15);
    EXPECT_EQ(team_difference(score(0.4, 0.4)).tdiff, 0.0);
    EXPECT_EQ(team_difference(score(1.0, 0.0)).tdiff, 0.5);
    EXPECT_NEAR(team_difference(score(0.7, 0.5), TDiffConvention::OrderedPair).tdiff, 0.2, 1e-15);
    try {
        team_difference(score(0.7, std::nullopt));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::InvalidInterval);
    }
}

TEST(Scores, HandEnumeratedExamples) {
    auto a = alignment_scores(tds({0.5, 0.2, 0.4}));
    EXPECT_NEAR(*a.max, 0.3, 1e-15);
    EXPECT_NEAR(*a.min, 0.1, 1e-15);
    EXPECT_NEAR(*a.absmax, 0.3, 1e-15);
    EXPECT_NEAR(*a.absmin, 0.1, 1e-15);

    auto c = alignment_scores(tds({0.25, 0.25, 0.25}));
    EXPECT_FALSE(c.max);
    EXPECT_FALSE(c.min);
    EXPECT_EQ(*c.absmax, 0.0);
    EXPECT_EQ(*c.absmin, 0.0);

    auto inc = alignment_scores(tds({0.1, 0.2, 0.4}));
    EXPECT_FALSE(inc.max);
    EXPECT_FALSE(inc.min);
    EXPECT_NEAR(*inc.absmax, 0.3, 1e-15);
    EXPECT_NEAR(*inc.absmin, 0.1, 1e-15);

    auto one = alignment_scores(tds({0.3}));
    EXPECT_FALSE(one.absmax);
    EXPECT_EQ(one.n_valid_intervals, 1u);
}

TEST(Scores, OrderFollowsIntervalIndex) {
    std::vector<TeamDifference> t{{7, 0.1}, {2, 0.5}, {4, 0.3}};
    const auto s = alignment_scores(t);
    EXPECT_NEAR(*s.max, 0.4, 1e-15);
    EXPECT_NEAR(*s.min, 0.2, 1e-15);
}

TEST(ScoresProperty, MatchesBruteForce) {
    std::mt19937_64 gen(17);
    std::uniform_real_distribution<double> u(0.0, 0.5);
    for (int trial = 0; trial < 2000; ++trial) {
        const std::size_t n = 2 + gen() % 9;
        std::vector<double> t(n);
        for (auto& x : t) x = gen() % 4 == 0 ? 0.25 : u(gen);
        const auto got = alignment_scores(tds(t));
        const auto want = oracle::brute_force_scores(t);
        EXPECT_EQ(got.max, want.max);
        EXPECT_EQ(got.min, want.min);
        EXPECT_EQ(got.absmax, want.absmax);
        EXPECT_EQ(got.absmin, want.absmin);
        if (got.max) {
            EXPECT_GE(*got.absmax, *got.max);
            EXPECT_GE(*got.max, *got.min);
            EXPECT_GT(*got.min, 0.0);
        }
        EXPECT_GE(*got.absmax, *got.absmin);
    }
}

TEST(ScoresProperty, ReversalNegatesEveryDifference) {
    std::mt19937_64 gen(19);
    std::uniform_real_distribution<double> u(0.0, 0.5);
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t n = 2 + gen() % 9;
        std::vector<double> t(n);
        for (auto& x : t) x = u(gen);
        std::vector<double> r(t.rbegin(), t.rend());
        const auto a = alignment_scores(tds(t)), b = alignment_scores(tds(r));
        EXPECT_NEAR(*a.absmax, *b.absmax, 1e-15);
        EXPECT_NEAR(*a.absmin, *b.absmin, 1e-15);
        // Max of the reversed sequence is minus the most negative original AS.
        double most_negative = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) most_negative = std::min(most_negative, t[i] - t[j]);
        if (most_negative < 0.0) {
            ASSERT_TRUE(b.max);
            EXPECT_NEAR(*b.max, -most_negative, 1e-15);
        } else {
            EXPECT_FALSE(b.max);
        }
    }
}

TEST(ScoresProperty, AffineMapOfPredictionsScalesScores) {
    std::mt19937_64 gen(23);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const auto c = conversation("a", 60);
    for (int trial = 0; trial < 100; ++trial) {
        SentenceScores s, t;
        const double a = 0.2 + 0.7 * u(gen), b = 0.1 * u(gen);
        for (std::size_t i = 6; i <= 60; ++i) {
            s[i] = u(gen);
            t[i] = a * s[i] + b;
        }
        const std::vector<std::size_t> counts(60, 5);
        const auto x = compute_alignment(c, s, counts), y = compute_alignment(c, t, counts);
        ASSERT_EQ(x.tdiffs.size(), y.tdiffs.size());
        for (std::size_t i = 0; i < x.tdiffs.size(); ++i) EXPECT_NEAR(y.tdiffs[i].tdiff, a * x.tdiffs[i].tdiff, 1e-12);
        EXPECT_EQ(x.scores.max.has_value(), y.scores.max.has_value());
        EXPECT_EQ(x.scores.min.has_value(), y.scores.min.has_value());
        EXPECT_NEAR(*y.scores.absmax, a * *x.scores.absmax, 1e-12);
        if (x.scores.max) EXPECT_NEAR(*y.scores.max, a * *x.scores.max, 1e-12);
    }
}

TEST(Compute, ShortConversationIsBlankWithNote) {
    const auto c = conversation("short", 8);
    const auto t = compute_alignment(c, {{6, 0.5}, {7, 0.5}, {8, 0.5}}, std::vector<std::size_t>(8, 3));
    EXPECT_FALSE(t.scores.absmax);
    EXPECT_FALSE(t.note.empty());
    std::ostringstream out;
    write_ca_csv_row(out, t);
    EXPECT_EQ(out.str(), "short,,,0,,,,\n");
}

TEST(Compute, CsvAndTrace) {
    const auto c = conversation("c", 30);
    SentenceScores s;
    for (std::size_t i = 6; i <= 30; ++i) s[i] = c.sentences[i - 1].speaker == Speaker::Doctor ? 0.9 - 0.01 * i : 0.5;
    auto t = compute_alignment(c, s, std::vector<std::size_t>(30, 4));
    t.model_id = "m";
    t.tokenizer_id = "tok";
    std::ostringstream out;
    write_ca_csv_header(out);
    write_ca_csv_row(out, t);
    const auto text = out.str();
    EXPECT_EQ(text.substr(0, text.find('\n')), "conversation_id,model_id,tokenizer_id,n_valid_intervals,max,min,absmax,absmin");
    EXPECT_NE(text.find("\nc,m,tok,"), std::string::npos);
    const auto j = trace_json(t, c, {});
    EXPECT_EQ(j["intervals"].size(), 10u);
    EXPECT_EQ(j["sentences"].size(), 30u);
    EXPECT_TRUE(j["sentences"][0]["prediction"].is_null());
    EXPECT_EQ(j["tdiff_factor"], 0.5);
}
