#include <gtest/gtest.h>

#include <sstream>

#include "convalign/alignment.hpp"
#include "convalign/scorer.hpp"
#include "convalign/synthetic.hpp"

using namespace convalign;

namespace {

SynthSpec small(std::uint64_t seed = 1) {
    SynthSpec s;
    s.n_conversations = 12;
    s.seed = seed;
    return s;
}

AlignmentTrace planted_trace(const SynthCorpus& c, std::size_t i) {
    const auto table = c.planted_table();
    SentenceScores scores;
    for (const auto& s : c.conversations[i].sentences)
        if (auto it = table.find({c.conversations[i].id, s.index}); it != table.end()) scores[s.index] = it->second;
    std::vector<std::size_t> counts;
    WordTokenCounter words;
    for (const auto& s : c.conversations[i].sentences) counts.push_back(words.count(s));
    return compute_alignment(c.conversations[i], scores, counts);
}

} // namespace

TEST(Synthetic, DeterministicUnderSeed) {
    const auto a = generate(small(3)), b = generate(small(3)), c = generate(small(4));
    EXPECT_EQ(a.conversations, b.conversations);
    EXPECT_NE(a.conversations, c.conversations);
    std::ostringstream x, y;
    write_planted_csv(a, x);
    write_planted_csv(b, y);
    EXPECT_EQ(x.str(), y.str());
}

TEST(Synthetic, ShapeFollowsSettings) {
    const auto spec = small();
    const auto c = generate(spec);
    ASSERT_EQ(c.conversations.size(), 12u);
    ASSERT_EQ(c.truth.size(), 12u);
    std::size_t planted = 0;
    for (const auto& conv : c.conversations) {
        EXPECT_GE(conv.size(), spec.min_sentences);
        EXPECT_LE(conv.size(), spec.max_sentences);
        EXPECT_EQ(conv.sentences[0].speaker, Speaker::Doctor);
        for (const auto& s : conv.sentences) {
            const auto n = word_tokens(s.text).size();
            EXPECT_GE(n, spec.min_words);
            EXPECT_LE(n, spec.max_words);
        }
        EXPECT_TRUE(conv.metadata.option12 && conv.metadata.dcs && conv.metadata.patient_age);
        EXPECT_FALSE(conv.metadata.clinician_id.empty());
        planted += conv.size() - kContextWindow;
    }
    EXPECT_EQ(c.planted.size(), planted);
    for (const auto& p : c.planted) {
        EXPECT_GE(p.probability, 0.0);
        EXPECT_LE(p.probability, 1.0);
    }
}

TEST(Synthetic, DisjointVocabulariesWithoutOverlap) {
    auto spec = small();
    const auto disjoint = make_pools(spec);
    const std::set<std::string> patient(disjoint.patient.begin(), disjoint.patient.end());
    for (const auto& w : disjoint.doctor) EXPECT_FALSE(patient.count(w)) << w;
    spec.overlap = 1.0;
    const auto pools = make_pools(spec);
    EXPECT_EQ(pools.doctor, pools.patient);
    spec.overlap = 0.5;
    const auto half = make_pools(spec);
    std::size_t shared = 0;
    for (const auto& w : half.doctor) shared += std::count(half.patient.begin(), half.patient.end(), w);
    EXPECT_EQ(shared, 12u);
}

TEST(Synthetic, DocumentsParseBackUnchanged) {
    const auto c = generate(small(8));
    for (const auto& conv : c.conversations) {
        const auto back = parse_transcript(serialize_transcript(conv));
        EXPECT_EQ(back, conv) << conv.id;
    }
}

TEST(Synthetic, PlantedTrendDrivesAlignment) {
    for (auto trend : {Trend::Converging, Trend::Diverging}) {
        auto spec = small(5);
        spec.trend = trend;
        const auto c = generate(spec);
        for (std::size_t i = 0; i < c.conversations.size(); ++i) {
            const auto t = planted_trace(c, i);
            ASSERT_GE(t.tdiffs.size(), 2u);
            // The first valid interval sits earliest in the conversation.
            const double first = t.tdiffs.front().tdiff, last = t.tdiffs.back().tdiff;
            if (trend == Trend::Converging) EXPECT_GT(first, last);
            else EXPECT_LT(first, last);
        }
    }
}

TEST(Synthetic, FlatTrendGivesZeroAlignment) {
    auto spec = small(6);
    spec.trend = Trend::Flat;
    const auto c = generate(spec);
    for (std::size_t i = 0; i < c.conversations.size(); ++i) {
        const auto t = planted_trace(c, i);
        ASSERT_TRUE(t.scores.absmax);
        EXPECT_NEAR(*t.scores.absmax, 0.0, 1e-12);
        for (const auto& d : t.tdiffs) EXPECT_NEAR(d.tdiff, c.truth[i].amplitude, 1e-12);
    }
}

TEST(Synthetic, OutcomeTracksAmplitude) {
    auto spec = small(9);
    spec.n_conversations = 300;
    spec.outcome_noise = 1.0;
    spec.clinician_sd = 0.0;
    const auto c = generate(spec);
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (const auto& g : c.truth) {
        sx += g.amplitude;
        sy += g.option12;
        sxx += g.amplitude * g.amplitude;
        sxy += g.amplitude * g.option12;
    }
    const double n = 300.0;
    const double slope = (sxy - sx * sy / n) / (sxx - sx * sx / n);
    EXPECT_NEAR(slope, spec.outcome_slope, 2.0);
}

TEST(Synthetic, FilesRoundTrip) {
    const auto c = generate(small(2));
    const auto dir = std::filesystem::temp_directory_path() / "convalign_synth_test";
    std::filesystem::remove_all(dir);
    write_synthetic(c, dir);
    std::ifstream pl(dir / "planted.csv");
    const auto table = read_planted_csv(pl);
    EXPECT_EQ(table.size(), c.planted.size());
    for (const auto& p : c.planted) EXPECT_NEAR(table.at({p.conversation_id, p.sentence_index}), p.probability, 1e-9);
    std::size_t files = 0;
    for (const auto& e : std::filesystem::directory_iterator(dir / "corpus")) files += e.path().extension() == ".jsonl";
    EXPECT_EQ(files, 12u);
    std::filesystem::remove_all(dir);
}

TEST(Synthetic, SpecValidationAndJson) {
    auto s = small();
    s.amplitude_max = 0.6;
    EXPECT_THROW(generate(s), Error);
    s = small();
    s.trend = Trend::Diverging;
    s.overlap = 0.25;
    const nlohmann::ordered_json j = s;
    EXPECT_EQ(j.get<SynthSpec>(), s);
    EXPECT_EQ(parse_trend("flat"), Trend::Flat);
    EXPECT_THROW(parse_trend("up"), Error);
}
