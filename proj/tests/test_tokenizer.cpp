#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "convalign/tokenizer.hpp"

using namespace convalign;

TEST(Bpe, MostFrequentPairMergedFirst) {
    const auto v = train_bpe({"aaab", "aab"}, 7);
    ASSERT_EQ(v.merges().size(), 1u);
    EXPECT_EQ(v.merges()[0], (std::pair<std::string, std::string>{"a", "a"}));
    EXPECT_EQ(v.vocab_size(), 7u);
    // After "aa" every remaining pair occurs once, so training stops early.
    EXPECT_EQ(train_bpe({"aaab", "aab"}, 50).vocab_size(), 7u);
}

TEST(Bpe, TiesBrokenLexicographically) {
    // (a,b) and (c,d) both occur twice; (a,b) sorts first.
    const auto v = train_bpe({"cd ab", "ab cd"}, 4 + 6);
    ASSERT_FALSE(v.merges().empty());
    EXPECT_EQ(v.merges()[0], (std::pair<std::string, std::string>{"a", "b"}));
    const auto w = train_bpe({"cdab", "abcd"}, 4 + 4 + 1);
    ASSERT_EQ(w.merges().size(), 1u);
    EXPECT_EQ(w.merges()[0], (std::pair<std::string, std::string>{"a", "b"}));
}

TEST(Bpe, Deterministic) {
    const std::vector<std::string> corpus{"the cat sat on the mat", "the dog sat", "a cat and a dog"};
    const auto a = train_bpe(corpus, 40, 1), b = train_bpe(corpus, 40, 1);
    EXPECT_EQ(a.merges(), b.merges());
    EXPECT_EQ(a.to_string(), b.to_string());
}

TEST(Bpe, VocabTooSmall) {
    try {
        train_bpe({"abc"}, 5);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::VocabTooSmall);
    }
}

TEST(Bpe, EmptyCorpus) {
    EXPECT_THROW(train_bpe({}, 100), Error);
}

TEST(Encode, BasicCases) {
    const auto v = train_bpe({"hello world", "hello there"}, 30);
    EXPECT_EQ(v.encode("").length(), 0u);
    EXPECT_GE(v.encode("hello").length(), 1u);
    EXPECT_EQ(token_count(Sentence{1, Speaker::Doctor, "hello world", ""}, v), v.encode("hello world").length());
    EXPECT_EQ(v.decode(v.encode("hello world")), "hello world");
}

TEST(Encode, UnknownCharactersMapToUnk) {
    const auto v = train_bpe({"abc"}, 10);
    const auto seq = v.encode("abz");
    ASSERT_EQ(seq.length(), 3u);
    EXPECT_EQ(seq.ids[2], SpecialTokens::unk);
    EXPECT_EQ(v.decode(seq), "ab\xEF\xBF\xBD");
}

TEST(Encode, SpecialIdsFixed) {
    const auto v = train_bpe({"abc"}, 10);
    EXPECT_EQ(v.token(SpecialTokens::pad), "<pad>");
    EXPECT_EQ(v.token(SpecialTokens::unk), "<unk>");
    EXPECT_EQ(v.token(SpecialTokens::cls), "<cls>");
    EXPECT_EQ(v.token(SpecialTokens::sep), "<sep>");
    for (std::size_t i = SpecialTokens::count; i < v.vocab_size(); ++i) EXPECT_EQ(*v.id_of(v.token(static_cast<TokenId>(i))), static_cast<TokenId>(i));
}

TEST(EncodeProperty, RoundTripOnUnkFreeText) {
    std::mt19937 gen(11);
    const std::string letters = "abcdefg ,.?'";
    auto sample = [&] {
        std::string s;
        const int n = 1 + static_cast<int>(gen() % 30);
        for (int i = 0; i < n; ++i) s += letters[gen() % letters.size()];
        return s;
    };
    std::vector<std::string> corpus;
    for (int i = 0; i < 200; ++i) corpus.push_back(sample());
    corpus.push_back(letters);
    const auto v = train_bpe(corpus, 80);
    for (int i = 0; i < 300; ++i) {
        const auto s = sample();
        const auto a = v.encode(s);
        EXPECT_EQ(v.decode(a), s);
        EXPECT_EQ(v.encode(s), a);
    }
}

TEST(Vocab, SaveLoadRoundTrip) {
    const auto v = train_bpe({"tab\there", "line one\nline two", "back\\slash", "caf\xC3\xA9 au lait"}, 40, 0, false);
    const auto text = v.to_string();
    const auto w = SubwordVocab::from_string(text);
    EXPECT_EQ(w.to_string(), text);
    EXPECT_EQ(w.vocab_size(), v.vocab_size());
    for (const char* s : {"tab\there", "caf\xC3\xA9", "line two"}) EXPECT_EQ(w.encode(s), v.encode(s));
}

TEST(Vocab, HeaderListsSizeAndSpecials) {
    const auto v = train_bpe({"abab"}, 10);
    const auto text = v.to_string();
    EXPECT_EQ(text.rfind("#bpe-vocab version=1 vocab_size=" + std::to_string(v.vocab_size()) + " pad=0 unk=1 cls=2 sep=3", 0), 0u);
}

TEST(Vocab, MalformedFileRejected) {
    for (const char* bad : {"", "not a header\n", "#bpe-vocab version=1 vocab_size=9 pad=0 unk=1 cls=2 sep=3 lowercase=0 alphabet=2 merges=0\na\n"}) {
        try {
            SubwordVocab::from_string(bad);
            FAIL() << bad;
        } catch (const Error& e) {
            EXPECT_EQ(e.code(), Errc::MalformedVocab);
        }
    }
}

TEST(Vocab, LowercaseFlag) {
    const auto v = train_bpe({"Hello HELLO hello"}, 30, 0, true);
    EXPECT_TRUE(v.lowercase());
    EXPECT_EQ(v.encode("HELLO"), v.encode("hello"));
}
