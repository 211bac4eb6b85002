#pragma once

// recall@k over fixed candidate sets.

#include <algorithm>
#include <cstdio>
#include <ostream>
#include <string>
#include <unordered_map>
#include <vector>

#include "convalign/dataset.hpp"
#include "convalign/error.hpp"

namespace convalign {

struct Prediction {
    std::string pair_id;
    double probability = 0.0;
    bool operator==(const Prediction&) const = default;
};

struct Candidate {
    std::string pair_id;
    bool is_ground_truth = false;
};

struct CandidateSet {
    std::string context_id;
    std::vector<Candidate> candidates;

    std::size_t n() const noexcept { return candidates.size(); }
};

// Groups pairs by context (first-appearance order). Each set must hold
// exactly one positive and at least one negative.
inline std::vector<CandidateSet> candidate_sets(const std::vector<ContextResponsePair>& pairs) {
    std::vector<CandidateSet> sets;
    std::unordered_map<std::string, std::size_t> where;
    for (const auto& p : pairs) {
        const std::string cid = p.context_id();
        auto [it, inserted] = where.try_emplace(cid, sets.size());
        if (inserted) sets.push_back({cid, {}});
        sets[it->second].candidates.push_back({p.pair_id, p.label == Label::Positive});
    }
    for (const auto& s : sets) {
        const auto truths = std::count_if(s.candidates.begin(), s.candidates.end(),
                                          [](const Candidate& c) { return c.is_ground_truth; });
        if (truths != 1 || s.n() < 2)
            throw Error(Errc::MalformedDocument,
                        "candidate set " + s.context_id + " needs exactly one ground truth and n >= 2");
    }
    return sets;
}

using PredictionIndex = std::unordered_map<std::string, double>;

inline PredictionIndex index_predictions(const std::vector<Prediction>& predictions) {
    PredictionIndex idx;
    idx.reserve(predictions.size());
    for (const auto& p : predictions) idx[p.pair_id] = p.probability;
    return idx;
}

// 1-based rank of the ground truth after sorting by probability descending,
// ties broken by ascending pair_id.
inline std::size_t ground_truth_rank(const CandidateSet& set, const PredictionIndex& preds) {
    struct Scored {
        double p;
        const std::string* id;
        bool truth;
    };
    std::vector<Scored> scored;
    scored.reserve(set.n());
    for (const auto& c : set.candidates) {
        auto it = preds.find(c.pair_id);
        if (it == preds.end()) throw Error(Errc::MissingPrediction, "no prediction for " + c.pair_id);
        scored.push_back({it->second, &c.pair_id, c.is_ground_truth});
    }
    std::sort(scored.begin(), scored.end(), [](const Scored& a, const Scored& b) {
        if (a.p != b.p) return a.p > b.p;
        return *a.id < *b.id;
    });
    for (std::size_t r = 0; r < scored.size(); ++r)
        if (scored[r].truth) return r + 1;
    throw Error(Errc::MalformedDocument, "candidate set " + set.context_id + " has no ground truth");
}

inline double recall_at_k(const PredictionIndex& preds, const std::vector<CandidateSet>& sets, std::size_t k) {
    if (sets.empty()) throw Error(Errc::EmptyCorpus, "recall_at_k over zero candidate sets");
    std::size_t hits = 0;
    for (const auto& s : sets) {
        if (k == 0 || k > s.n())
            throw Error(Errc::KOutOfRange, "k = " + std::to_string(k) + " outside 1.." + std::to_string(s.n()));
        if (ground_truth_rank(s, preds) <= k) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(sets.size());
}

inline double recall_at_k(const std::vector<Prediction>& predictions, const std::vector<CandidateSet>& sets,
                          std::size_t k) {
    return recall_at_k(index_predictions(predictions), sets, k);
}

struct RecallReport {
    std::vector<std::size_t> ks;
    std::vector<double> recall;
    std::size_t n = 0; // candidates per set (the largest if sets differ)
    std::size_t n_contexts = 0;
};

inline RecallReport recall_report(const PredictionIndex& preds, const std::vector<CandidateSet>& sets,
                                  std::vector<std::size_t> ks = {1, 2, 5}) {
    RecallReport r;
    r.n_contexts = sets.size();
    for (const auto& s : sets) r.n = std::max(r.n, s.n());
    // One ranking pass per set serves every k.
    std::vector<std::size_t> hits(ks.size(), 0);
    for (const auto& s : sets) {
        const std::size_t rank = ground_truth_rank(s, preds);
        for (std::size_t i = 0; i < ks.size(); ++i) {
            if (ks[i] == 0 || ks[i] > s.n())
                throw Error(Errc::KOutOfRange, "k = " + std::to_string(ks[i]) + " outside 1.." + std::to_string(s.n()));
            if (rank <= ks[i]) ++hits[i];
        }
    }
    if (sets.empty()) throw Error(Errc::EmptyCorpus, "recall report over zero candidate sets");
    for (std::size_t h : hits) r.recall.push_back(static_cast<double>(h) / static_cast<double>(sets.size()));
    r.ks = std::move(ks);
    return r;
}

inline void write_recall_csv_header(std::ostream& out, const std::vector<std::size_t>& ks = {1, 2, 5}) {
    out << "model,size";
    for (auto k : ks) out << ",recall@" << k;
    out << '\n';
}

inline void write_recall_csv_row(std::ostream& out, const std::string& model, const std::string& size,
                                 const RecallReport& r) {
    out << model << ',' << size;
    char buf[32];
    for (double v : r.recall) {
        std::snprintf(buf, sizeof buf, "%.3f", v);
        out << ',' << buf;
    }
    out << '\n';
}

} // namespace convalign
