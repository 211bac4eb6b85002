#pragma once

// Next-sentence-prediction samples: five-sentence contexts, the true sixth
// sentence as the positive response, seeded splits and negative sampling.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "json.hpp"

#include "convalign/error.hpp"
#include "convalign/rng.hpp"
#include "convalign/transcript.hpp"

namespace convalign {

inline constexpr std::size_t kContextWindow = 5;

enum class Label { Negative, Positive };
enum class Split { Train, Val, Test, None };

inline std::string_view to_string(Label l) noexcept {
    return l == Label::Positive ? "positive" : "negative";
}

inline std::string_view to_string(Split s) noexcept {
    switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
    case Split::None: return "none";
    }
    return "none";
}

inline Split parse_split(std::string_view s) {
    if (s == "train") return Split::Train;
    if (s == "val") return Split::Val;
    if (s == "test") return Split::Test;
    if (s == "none") return Split::None;
    throw Error(Errc::MalformedDocument, "unknown split \"" + std::string(s) + "\"");
}

struct ContextResponsePair {
    std::string pair_id;
    std::string conversation_id;
    std::vector<Sentence> context;
    Sentence response;
    Label label = Label::Positive;
    Split split = Split::None;

    Speaker response_speaker() const noexcept { return response.speaker; }

    // Negatives are named "<positive id>:n<j>"; all candidates sharing a
    // context report the positive's id here.
    std::string context_id() const {
        const auto p = pair_id.rfind(":n");
        return p == std::string::npos ? pair_id : pair_id.substr(0, p);
    }

    bool operator==(const ContextResponsePair&) const = default;
};

inline std::string positive_pair_id(const std::string& conversation_id, std::size_t response_index) {
    std::string n = std::to_string(response_index);
    if (n.size() < 5) n.insert(0, 5 - n.size(), '0');
    return conversation_id + ":" + n;
}

// One positive per sentence s_t with t > window: C = s_{t-window}..s_{t-1}, R = s_t.
inline std::vector<ContextResponsePair> build_positive_pairs(const Conversation& conv,
                                                             std::size_t window = kContextWindow) {
    if (window == 0) throw Error(Errc::ConfigInvalid, "context window must be >= 1");
    std::vector<ContextResponsePair> out;
    if (conv.size() <= window) return out;
    out.reserve(conv.size() - window);
    for (std::size_t t = window; t < conv.size(); ++t) {
        ContextResponsePair p;
        p.conversation_id = conv.id;
        p.response = conv.sentences[t];
        p.pair_id = positive_pair_id(conv.id, p.response.index);
        p.context.assign(conv.sentences.begin() + static_cast<std::ptrdiff_t>(t - window),
                         conv.sentences.begin() + static_cast<std::ptrdiff_t>(t));
        out.push_back(std::move(p));
    }
    return out;
}

// Pairs scored when computing alignment: identical to the positives, unsplit.
inline std::vector<ContextResponsePair> build_inference_pairs(const Conversation& conv,
                                                              std::size_t window = kContextWindow) {
    return build_positive_pairs(conv, window);
}

inline bool is_scoreable(const Conversation& conv, std::size_t window = kContextWindow) {
    return conv.size() > window;
}

// ---------------------------------------------------------------------------
// Splits

enum class SplitUnit { Pair, Conversation };

struct SplitPlan {
    double train = 0.6;
    double val = 0.2;
    double test = 0.2;
    std::uint64_t seed = 0;
    SplitUnit unit = SplitUnit::Pair;

    void validate() const {
        if (train < 0 || val < 0 || test < 0 || std::abs(train + val + test - 1.0) > 1e-9)
            throw Error(Errc::ConfigInvalid, "split fractions must be non-negative and sum to 1");
    }
    bool operator==(const SplitPlan&) const = default;
};

struct SplitCounts {
    std::size_t train = 0, val = 0, test = 0;
    bool operator==(const SplitCounts&) const = default;
};

// n_val = floor(val*N), n_test = floor(test*N), train takes the remainder.
inline SplitCounts split_counts(std::size_t n, const SplitPlan& plan = {}) {
    plan.validate();
    auto fl = [n](double f) {
        return static_cast<std::size_t>(std::floor(f * static_cast<double>(n) + 1e-9));
    };
    SplitCounts c;
    c.val = fl(plan.val);
    c.test = fl(plan.test);
    c.train = n - c.val - c.test;
    return c;
}

// Returns one split per input positive.
inline std::vector<Split> split_pairs(const std::vector<ContextResponsePair>& positives,
                                      const SplitPlan& plan = {}) {
    if (positives.size() < 5)
        throw Error(Errc::TooFewPairs, "need at least 5 positives to split, got " +
                                           std::to_string(positives.size()));
    const SplitCounts counts = split_counts(positives.size(), plan);
    std::vector<Split> assignment(positives.size(), Split::Train);
    Rng rng(derive_seed(plan.seed, "split"));

    if (plan.unit == SplitUnit::Pair) {
        std::vector<std::size_t> order(positives.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        rng.shuffle(order);
        for (std::size_t i = 0; i < order.size(); ++i) {
            if (i < counts.train) assignment[order[i]] = Split::Train;
            else if (i < counts.train + counts.val) assignment[order[i]] = Split::Val;
            else assignment[order[i]] = Split::Test;
        }
        return assignment;
    }

    // Conversation unit: shuffle conversations, fill val then test up to their
    // pair targets, the rest is train. Counts are then only approximate.
    std::vector<std::string> conv_ids;
    std::unordered_map<std::string, std::vector<std::size_t>> members;
    for (std::size_t i = 0; i < positives.size(); ++i) {
        auto [it, inserted] = members.try_emplace(positives[i].conversation_id);
        if (inserted) conv_ids.push_back(positives[i].conversation_id);
        it->second.push_back(i);
    }
    rng.shuffle(conv_ids);
    std::size_t n_val = 0, n_test = 0;
    for (const auto& id : conv_ids) {
        const auto& idx = members[id];
        Split s;
        if (n_val < counts.val) {
            s = Split::Val;
            n_val += idx.size();
        } else if (n_test < counts.test) {
            s = Split::Test;
            n_test += idx.size();
        } else {
            s = Split::Train;
        }
        for (std::size_t i : idx) assignment[i] = s;
    }
    return assignment;
}

inline void apply_splits(std::vector<ContextResponsePair>& positives, const std::vector<Split>& splits) {
    if (positives.size() != splits.size())
        throw Error(Errc::ShapeMismatch, "split assignment size differs from pair count");
    for (std::size_t i = 0; i < positives.size(); ++i) positives[i].split = splits[i];
}

// ---------------------------------------------------------------------------
// Negative sampling

struct SamplingPolicy {
    std::size_t negatives_train = 1;
    std::size_t negatives_eval = 9;
    std::uint64_t seed = 0;

    std::size_t negatives_for(Split s) const noexcept {
        return s == Split::Train ? negatives_train : negatives_eval;
    }
    bool operator==(const SamplingPolicy&) const = default;
};

// For every positive, draws k distinct false responses uniformly from the
// responses of the other positives in the same split, rejecting any whose
// text equals the true response. Output order: each positive followed by its
// negatives, in input order.
inline std::vector<ContextResponsePair> sample_negatives(const std::vector<ContextResponsePair>& positives,
                                                         const SamplingPolicy& policy = {}) {
    if (policy.negatives_train < 1 || policy.negatives_eval < 1)
        throw Error(Errc::ConfigInvalid, "negative counts must be >= 1");

    constexpr std::array kSplits{Split::Train, Split::Val, Split::Test, Split::None};
    struct Pool {
        std::vector<std::size_t> members; // indices into positives
        std::unordered_map<std::string, std::size_t> text_count;
        std::vector<std::size_t> unique_first; // first member index per distinct text
    };
    std::array<Pool, 4> pools;
    for (std::size_t i = 0; i < positives.size(); ++i) {
        if (positives[i].label != Label::Positive)
            throw Error(Errc::ConfigInvalid, "sample_negatives expects positives only");
        auto& pool = pools[static_cast<std::size_t>(positives[i].split)];
        pool.members.push_back(i);
        if (pool.text_count[positives[i].response.text]++ == 0) pool.unique_first.push_back(i);
    }
    std::array<Rng, 4> rngs{Rng(derive_seed(policy.seed, "negatives/train")),
                            Rng(derive_seed(policy.seed, "negatives/val")),
                            Rng(derive_seed(policy.seed, "negatives/test")),
                            Rng(derive_seed(policy.seed, "negatives/none"))};

    std::size_t total = 0;
    for (auto s : kSplits)
        total += pools[static_cast<std::size_t>(s)].members.size() * (1 + policy.negatives_for(s));
    std::vector<ContextResponsePair> out;
    out.reserve(total);

    std::vector<std::size_t> chosen;
    std::unordered_set<std::string> used;
    for (const auto& pos : positives) {
        const std::size_t si = static_cast<std::size_t>(pos.split);
        const auto& pool = pools[si];
        auto& rng = rngs[si];
        const std::size_t k = policy.negatives_for(pos.split);
        if (pool.unique_first.size() < k + 1)
            throw Error(Errc::InsufficientPool,
                        std::string(to_string(pos.split)) + " split has " +
                            std::to_string(pool.unique_first.size()) +
                            " distinct responses; need " + std::to_string(k + 1));
        chosen.clear();
        used.clear();
        used.insert(pos.response.text);
        const std::size_t max_attempts = 64 * k + 64;
        for (std::size_t attempt = 0; chosen.size() < k && attempt < max_attempts; ++attempt) {
            const std::size_t j = pool.members[rng.uniform_index(pool.members.size())];
            if (used.insert(positives[j].response.text).second) chosen.push_back(j);
        }
        if (chosen.size() < k) {
            // Heavily repeated texts: fall back to drawing among the remaining distinct texts.
            std::vector<std::size_t> rest;
            for (std::size_t j : pool.unique_first)
                if (!used.count(positives[j].response.text)) rest.push_back(j);
            while (chosen.size() < k) {
                const std::size_t r = rng.uniform_index(rest.size());
                chosen.push_back(rest[r]);
                rest.erase(rest.begin() + static_cast<std::ptrdiff_t>(r));
            }
        }
        out.push_back(pos);
        for (std::size_t n = 0; n < chosen.size(); ++n) {
            ContextResponsePair neg;
            neg.pair_id = pos.pair_id + ":n" + std::to_string(n + 1);
            neg.conversation_id = pos.conversation_id;
            neg.context = pos.context;
            neg.response = positives[chosen[n]].response;
            neg.label = Label::Negative;
            neg.split = pos.split;
            out.push_back(std::move(neg));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dataset JSONL

inline void write_pair_jsonl(const ContextResponsePair& p, std::ostream& out) {
    nlohmann::ordered_json j;
    j["pair_id"] = p.pair_id;
    j["conversation_id"] = p.conversation_id;
    j["split"] = std::string(to_string(p.split));
    j["label"] = std::string(to_string(p.label));
    auto ctx = nlohmann::ordered_json::array();
    auto spk = nlohmann::ordered_json::array();
    for (const auto& s : p.context) {
        ctx.push_back(s.text);
        spk.push_back(std::string(to_string(s.speaker)));
    }
    j["context"] = std::move(ctx);
    j["context_speakers"] = std::move(spk);
    j["response"] = p.response.text;
    j["response_speaker"] = std::string(to_string(p.response.speaker));
    out << j.dump() << '\n';
}

inline void write_dataset_jsonl(const std::vector<ContextResponsePair>& pairs, std::ostream& out) {
    for (const auto& p : pairs) write_pair_jsonl(p, out);
}

inline std::vector<ContextResponsePair> read_dataset_jsonl(std::istream& in) {
    std::vector<ContextResponsePair> out;
    std::string line;
    std::size_t line_no = 0;
    auto speaker_of = [&](const nlohmann::json& v) {
        auto s = v.is_string() ? parse_speaker(v.get<std::string>()) : std::nullopt;
        if (!s) throw Error(Errc::MalformedDocument, "dataset line " + std::to_string(line_no) + ": bad speaker");
        return *s;
    };
    while (std::getline(in, line)) {
        ++line_no;
        if (detail::trim(line).empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            ContextResponsePair p;
            p.pair_id = j.at("pair_id").get<std::string>();
            p.conversation_id = j.at("conversation_id").get<std::string>();
            p.split = parse_split(j.at("split").get<std::string>());
            const auto label = j.at("label").get<std::string>();
            if (label != "positive" && label != "negative")
                throw Error(Errc::MalformedDocument, "bad label " + label);
            p.label = label == "positive" ? Label::Positive : Label::Negative;
            const auto& ctx = j.at("context");
            const auto& spk = j.at("context_speakers");
            if (!ctx.is_array() || !spk.is_array() || ctx.size() != spk.size())
                throw Error(Errc::MalformedDocument, "context and context_speakers must be parallel arrays");
            for (std::size_t i = 0; i < ctx.size(); ++i) {
                Sentence s;
                s.text = s.raw_text = ctx[i].get<std::string>();
                s.speaker = speaker_of(spk[i]);
                p.context.push_back(std::move(s));
            }
            p.response.text = p.response.raw_text = j.at("response").get<std::string>();
            p.response.speaker = speaker_of(j.at("response_speaker"));
            out.push_back(std::move(p));
        } catch (const nlohmann::json::exception& e) {
            throw Error(Errc::MalformedDocument, "dataset line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

} // namespace convalign
