#include <gtest/gtest.h>

#include "common.hpp"
#include "convalign/scorer.hpp"

using namespace convalign;

namespace {

ContextResponsePair pair_of(std::vector<std::string> context, std::string response, std::string id = "x:00006") {
    ContextResponsePair p;
    p.pair_id = std::move(id);
    p.conversation_id = "x";
    for (std::size_t i = 0; i < context.size(); ++i) {
        Sentence s;
        s.index = i + 1;
        s.text = s.raw_text = context[i];
        p.context.push_back(s);
    }
    p.response.index = context.size() + 1;
    p.response.text = p.response.raw_text = std::move(response);
    return p;
}

std::vector<ContextResponsePair> five_sentence_pairs(std::size_t n) {
    std::vector<ContextResponsePair> out;
    for (std::size_t i = 0; i < n; ++i)
        out.push_back(pair_of({"one two", "three", "four five six", "seven", "eight"}, "nine ten",
                              "c:" + std::to_string(i)));
    return out;
}

ExternalScorerConfig stub(std::vector<std::string> args, int timeout_ms = 5000) {
    ExternalScorerConfig c;
    c.command = {SCORER_STUB_PATH};
    c.command.insert(c.command.end(), args.begin(), args.end());
    c.timeout_ms = timeout_ms;
    return c;
}

std::optional<Errc> code_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    return std::nullopt;
}

} // namespace

TEST(Overlap, Examples) {
    EXPECT_EQ(overlap_probability(pair_of({"the cat sat", "on a mat"}, "cat mat")), 1.0);
    EXPECT_EQ(overlap_probability(pair_of({"the cat sat"}, "dog runs")), 0.0);
    EXPECT_EQ(overlap_probability(pair_of({"a"}, "a b")), 0.5);
    EXPECT_EQ(overlap_probability(pair_of({"a b"}, "")), 0.0);
    EXPECT_EQ(overlap_probability(pair_of({"Cat."}, "cat, CAT")), 1.0);
}

TEST(Overlap, ScorerIsDeterministicAcrossJobs) {
    std::vector<ContextResponsePair> pairs;
    for (int i = 0; i < 50; ++i)
        pairs.push_back(pair_of({"w" + std::to_string(i % 7), "w" + std::to_string(i % 3)},
                                "w" + std::to_string(i % 5) + " z", "p:" + std::to_string(i)));
    OverlapScorer s;
    const auto a = s.score(pairs, 1), b = s.score(pairs, 4);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].pair_id, pairs[i].pair_id);
        EXPECT_EQ(a[i].probability, b[i].probability);
    }
}

TEST(Words, Tokens) {
    EXPECT_EQ(word_tokens("It's  fine, OK?"), (std::vector<std::string>{"it's", "fine", "ok"}));
    EXPECT_TRUE(word_tokens(" ... ").empty());
    Sentence s;
    s.text = "one two three";
    EXPECT_EQ(WordTokenCounter().count(s), 3u);
}

TEST(Constant, RangeChecked) {
    EXPECT_EQ(code_of([] { ConstantScorer(1.5); }), Errc::ProbabilityOutOfRange);
    EXPECT_EQ(code_of([] { checked_probability(NAN, "p"); }), Errc::ProbabilityOutOfRange);
    EXPECT_EQ(ConstantScorer(0.25).score(five_sentence_pairs(2))[1].probability, 0.25);
}

TEST(Planted, LooksUpByResponseSentence) {
    PlantedScorer s({{{"x", 3}, 0.75}});
    EXPECT_EQ(s.score({pair_of({"a", "b"}, "c")})[0].probability, 0.75);
    EXPECT_EQ(code_of([&] { s.score({pair_of({"a"}, "c")}); }), Errc::MissingPrediction);
    EXPECT_EQ(code_of([] { PlantedScorer({{{"x", 1}, -0.1}}); }), Errc::ProbabilityOutOfRange);
}

TEST(Oracle, LabelsAsScores) {
    auto p = five_sentence_pairs(2);
    p[1].label = Label::Negative;
    const auto out = OracleScorer().score(p);
    EXPECT_EQ(out[0].probability, 1.0);
    EXPECT_EQ(out[1].probability, 0.0);
}

TEST(Request, PlainJoinsAndSepKeepsSentences) {
    const auto p = five_sentence_pairs(1)[0];
    const auto plain = scorer_request(p, ContextFormat::Plain);
    EXPECT_EQ(plain.dump(),
              R"({"pair_id":"c:0","context":["one two three four five six seven eight"],"response":"nine ten","format":"plain"})");
    const auto sep = scorer_request(p, ContextFormat::Sep);
    EXPECT_EQ(sep["context"].size(), 5u);
    EXPECT_EQ(sep["context"][2], "four five six");
    EXPECT_EQ(sep["format"], "sep");
    EXPECT_EQ(parse_context_format("sep-inserted"), ContextFormat::Sep);
    EXPECT_EQ(code_of([] { parse_context_format("bert"); }), Errc::ConfigInvalid);
}

TEST(External, ConstantStub) {
    ExternalScorer s(stub({"const", "0.5"}));
    const auto pairs = five_sentence_pairs(20);
    const auto out = s.score(pairs, 4);
    ASSERT_EQ(out.size(), 20u);
    for (std::size_t i = 0; i < out.size(); ++i) {
        EXPECT_EQ(out[i].probability, 0.5);
        EXPECT_EQ(out[i].pair_id, pairs[i].pair_id);
    }
    // The process stays up across calls.
    EXPECT_EQ(s.score(pairs).size(), 20u);
}

TEST(External, FormatReachesTheProcess) {
    auto plain = stub({"shape"});
    auto sep = plain;
    sep.format = ContextFormat::Sep;
    EXPECT_DOUBLE_EQ(ExternalScorer(plain).score(five_sentence_pairs(1))[0].probability, 0.1);
    EXPECT_DOUBLE_EQ(ExternalScorer(sep).score(five_sentence_pairs(1))[0].probability, 0.5);
}

TEST(External, CountTokens) {
    ExternalScorer s(stub({}));
    const auto counter = s.token_counter();
    Sentence a;
    a.text = "i have had a cough";
    EXPECT_EQ(counter->count(a), 5u);
    a.text = "";
    EXPECT_EQ(counter->count(a), 0u);
    EXPECT_EQ(s.score(five_sentence_pairs(3)).size(), 3u);
    const auto c = testutil::conversation("t", 3);
    EXPECT_EQ(counter->count(c.sentences[0]), 2u);
}

TEST(External, ContractViolations) {
    const auto pairs = five_sentence_pairs(2);
    EXPECT_EQ(code_of([&] { ExternalScorer(stub({"range"})).score(pairs); }), Errc::ProbabilityOutOfRange);
    EXPECT_EQ(code_of([&] { ExternalScorer(stub({"badjson"})).score(pairs); }), Errc::ProtocolError);
    EXPECT_EQ(code_of([&] { ExternalScorer(stub({"wrongid"})).score(pairs); }), Errc::ProtocolError);
    EXPECT_EQ(code_of([&] { ExternalScorer(stub({"error"})).score(pairs); }), Errc::ProtocolError);
    EXPECT_EQ(code_of([&] { ExternalScorer(stub({"exit"})).score(pairs); }), Errc::ProtocolError);
    auto missing = stub({});
    missing.command = {"/nonexistent/scorer"};
    EXPECT_EQ(code_of([&] { ExternalScorer(missing).score(pairs); }), Errc::ProtocolError);
}

TEST(External, HangTimesOut) {
    const auto start = std::chrono::steady_clock::now();
    EXPECT_EQ(code_of([] { ExternalScorer(stub({"hang"}, 300)).score(five_sentence_pairs(1)); }), Errc::Timeout);
    const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - start);
    EXPECT_LT(ms.count(), 3000);
}

TEST(Neural, WrapsModelAndRejectsVocabMismatch) {
    const auto vocab = std::make_shared<SubwordVocab>(train_bpe({"one two three four", "five six"}, 20));
    auto cfg = ScorerConfig::tiny(false);
    cfg.vocab_size = vocab->vocab_size();
    auto model = std::make_shared<NeuralModel>(cfg);
    NeuralScorer s(model, vocab);
    const auto out = s.score(five_sentence_pairs(3), 2);
    for (const auto& p : out) {
        EXPECT_GT(p.probability, 0.0);
        EXPECT_LT(p.probability, 1.0);
        EXPECT_EQ(p.probability, out[0].probability);
    }
    EXPECT_EQ(s.token_counter()->count(five_sentence_pairs(1)[0].response),
              vocab->encode("nine ten").ids.size());
    cfg.vocab_size += 1;
    EXPECT_EQ(code_of([&] { NeuralScorer(std::make_shared<NeuralModel>(cfg), vocab); }), Errc::ShapeMismatch);
}
