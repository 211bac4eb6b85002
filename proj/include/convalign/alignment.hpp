#pragma once

// Conversational alignment: token-balanced interval segmentation, per-speaker
// mean response probabilities, team difference per interval and the four
// convergence summaries (Max, Min, AbsMax, AbsMin).

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "convalign/dataset.hpp"
#include "convalign/error.hpp"
#include "convalign/transcript.hpp"

namespace convalign {

inline constexpr std::size_t kDefaultIntervals = 10;

struct Interval {
    std::size_t k = 0;              // 1-based interval number
    std::size_t first_sentence = 0; // 1-based, inclusive
    std::size_t last_sentence = 0;  // inclusive; last < first means empty
    std::size_t token_begin = 0;    // cumulative token offset, half-open
    std::size_t token_end = 0;
    std::vector<std::size_t> doctor_scored; // sentence indices eligible for scoring
    std::vector<std::size_t> patient_scored;

    bool empty() const noexcept { return last_sentence < first_sentence; }
    std::size_t sentence_count() const noexcept { return empty() ? 0 : last_sentence - first_sentence + 1; }
};

// Boundary i (1 <= i < n) falls after the first sentence whose cumulative
// token count reaches i*W/n; the last interval takes the remainder. Sentences
// with index < first_scored carry no prediction and are not listed as scored.
inline std::vector<Interval> segment_intervals(const Conversation& conv,
                                               const std::vector<std::size_t>& token_counts,
                                               std::size_t n_intervals = kDefaultIntervals,
                                               std::size_t first_scored = kContextWindow + 1) {
    if (n_intervals == 0) throw Error(Errc::ConfigInvalid, "n_intervals must be >= 1");
    if (token_counts.size() != conv.size())
        throw Error(Errc::ShapeMismatch, conv.id + ": one token count per sentence required");
    if (conv.size() < n_intervals)
        throw Error(Errc::TooShort, conv.id + ": " + std::to_string(conv.size()) +
                                        " sentences for " + std::to_string(n_intervals) + " intervals");
    std::vector<std::size_t> cum(conv.size() + 1, 0);
    for (std::size_t j = 0; j < conv.size(); ++j) cum[j + 1] = cum[j] + token_counts[j];
    const std::size_t total = cum.back();
    if (total == 0) throw Error(Errc::TooShort, conv.id + ": conversation has no tokens");

    // bounds[i] = number of sentences in intervals 1..i
    std::vector<std::size_t> bounds(n_intervals + 1, 0);
    bounds[n_intervals] = conv.size();
    std::size_t j = 1;
    for (std::size_t i = 1; i < n_intervals; ++i) {
        while (j < conv.size() && cum[j] * n_intervals < i * total) ++j;
        bounds[i] = std::max(j, bounds[i - 1]);
    }

    std::vector<Interval> out;
    out.reserve(n_intervals);
    for (std::size_t k = 1; k <= n_intervals; ++k) {
        Interval iv;
        iv.k = k;
        iv.first_sentence = bounds[k - 1] + 1;
        iv.last_sentence = bounds[k];
        iv.token_begin = cum[bounds[k - 1]];
        iv.token_end = cum[bounds[k]];
        for (std::size_t s = bounds[k - 1]; s < bounds[k]; ++s) {
            const auto& sent = conv.sentences[s];
            if (sent.index < first_scored) continue;
            (sent.speaker == Speaker::Doctor ? iv.doctor_scored : iv.patient_scored).push_back(sent.index);
        }
        out.push_back(std::move(iv));
    }
    return out;
}

// Sentence index -> predicted p(R|C).
using SentenceScores = std::map<std::size_t, double>;

struct IntervalScore {
    std::size_t k = 0;
    std::optional<double> mean_doctor;
    std::optional<double> mean_patient;
    std::size_t n_doctor = 0;
    std::size_t n_patient = 0;

    bool valid() const noexcept { return mean_doctor.has_value() && mean_patient.has_value(); }
};

inline IntervalScore mean_speaker_scores(const Interval& interval, const SentenceScores& scores) {
    auto mean = [&](const std::vector<std::size_t>& idx) -> std::optional<double> {
        if (idx.empty()) return std::nullopt;
        double sum = 0.0;
        for (std::size_t i : idx) {
            auto it = scores.find(i);
            if (it == scores.end())
                throw Error(Errc::MissingPrediction, "no prediction for sentence " + std::to_string(i));
            sum += it->second;
        }
        return sum / static_cast<double>(idx.size());
    };
    IntervalScore r;
    r.k = interval.k;
    r.mean_doctor = mean(interval.doctor_scored);
    r.mean_patient = mean(interval.patient_scored);
    r.n_doctor = interval.doctor_scored.size();
    r.n_patient = interval.patient_scored.size();
    return r;
}

// How the team-difference sum over speaker pairs is read for a dyad.
// UnorderedPair sums the single pair once over |team|(|team|-1) = 2, giving
// |diff|/2; OrderedPair counts both orders, giving |diff|.
enum class TDiffConvention { UnorderedPair, OrderedPair };

inline std::string_view to_string(TDiffConvention c) noexcept {
    return c == TDiffConvention::UnorderedPair ? "unordered-pair" : "ordered-pair";
}

inline double tdiff_factor(TDiffConvention c) noexcept {
    return c == TDiffConvention::UnorderedPair ? 0.5 : 1.0;
}

struct TeamDifference {
    std::size_t k = 0;
    double tdiff = 0.0;
};

inline TeamDifference team_difference(const IntervalScore& score,
                                      TDiffConvention convention = TDiffConvention::UnorderedPair) {
    if (!score.valid())
        throw Error(Errc::InvalidInterval,
                    "interval " + std::to_string(score.k) + " lacks sentences from both speakers");
    return {score.k, std::abs(*score.mean_patient - *score.mean_doctor) * tdiff_factor(convention)};
}

struct AlignmentScores {
    std::string conversation_id;
    std::size_t n_valid_intervals = 0;
    std::optional<double> max;
    std::optional<double> min;
    std::optional<double> absmax;
    std::optional<double> absmin;
};

// AS(a, b) = TDiff_a - TDiff_b over every pair of valid intervals a < b.
// Max/Min range over the positive values only and stay blank when none exist.
inline AlignmentScores alignment_scores(std::vector<TeamDifference> tdiffs) {
    std::sort(tdiffs.begin(), tdiffs.end(),
              [](const TeamDifference& a, const TeamDifference& b) { return a.k < b.k; });
    AlignmentScores r;
    r.n_valid_intervals = tdiffs.size();
    if (tdiffs.size() < 2) return r;
    double absmax = 0.0, absmin = INFINITY;
    std::optional<double> pmax, pmin;
    for (std::size_t b = 1; b < tdiffs.size(); ++b) {
        for (std::size_t a = 0; a < b; ++a) {
            const double as = tdiffs[a].tdiff - tdiffs[b].tdiff;
            const double mag = std::abs(as);
            absmax = std::max(absmax, mag);
            absmin = std::min(absmin, mag);
            if (as > 0.0) {
                pmax = pmax ? std::max(*pmax, as) : as;
                pmin = pmin ? std::min(*pmin, as) : as;
            }
        }
    }
    r.max = pmax;
    r.min = pmin;
    r.absmax = absmax;
    r.absmin = absmin;
    return r;
}

struct AlignmentSettings {
    std::size_t n_intervals = kDefaultIntervals;
    std::size_t window = kContextWindow;
    TDiffConvention convention = TDiffConvention::UnorderedPair;
    bool operator==(const AlignmentSettings&) const = default;
};

struct AlignmentTrace {
    std::string conversation_id;
    std::string model_id;
    std::string tokenizer_id;
    std::vector<std::size_t> token_counts;
    SentenceScores predictions;
    std::vector<Interval> intervals;
    std::vector<IntervalScore> interval_scores;
    std::vector<TeamDifference> tdiffs;
    AlignmentScores scores;
    std::string note; // why a conversation could not be scored, if it could not
};

inline AlignmentTrace compute_alignment(const Conversation& conv, const SentenceScores& predictions,
                                        const std::vector<std::size_t>& token_counts,
                                        const AlignmentSettings& settings = {}) {
    AlignmentTrace t;
    t.conversation_id = conv.id;
    t.token_counts = token_counts;
    t.predictions = predictions;
    t.scores.conversation_id = conv.id;
    try {
        t.intervals = segment_intervals(conv, token_counts, settings.n_intervals, settings.window + 1);
    } catch (const Error& e) {
        if (e.code() != Errc::TooShort) throw;
        t.note = e.what();
        return t;
    }
    for (const auto& iv : t.intervals) {
        auto s = mean_speaker_scores(iv, predictions);
        if (s.valid()) t.tdiffs.push_back(team_difference(s, settings.convention));
        t.interval_scores.push_back(std::move(s));
    }
    t.scores = alignment_scores(t.tdiffs);
    t.scores.conversation_id = conv.id;
    if (t.tdiffs.size() < 2) t.note = "fewer than two intervals with both speakers";
    return t;
}

// ---------------------------------------------------------------------------
// Output

namespace detail {

inline std::string format_score(const std::optional<double>& v) {
    if (!v) return {};
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", *v);
    return buf;
}

inline nlohmann::ordered_json optional_json(const std::optional<double>& v) {
    return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}

} // namespace detail

inline void write_ca_csv_header(std::ostream& out) {
    out << "conversation_id,model_id,tokenizer_id,n_valid_intervals,max,min,absmax,absmin\n";
}

inline void write_ca_csv_row(std::ostream& out, const AlignmentTrace& t) {
    const auto& s = t.scores;
    out << t.conversation_id << ',' << t.model_id << ',' << t.tokenizer_id << ',' << s.n_valid_intervals << ','
        << detail::format_score(s.max) << ',' << detail::format_score(s.min) << ','
        << detail::format_score(s.absmax) << ',' << detail::format_score(s.absmin) << '\n';
}

inline nlohmann::ordered_json trace_json(const AlignmentTrace& t, const Conversation& conv,
                                         const AlignmentSettings& settings) {
    nlohmann::ordered_json j;
    j["conversation_id"] = t.conversation_id;
    j["model_id"] = t.model_id;
    j["tokenizer_id"] = t.tokenizer_id;
    j["tdiff_convention"] = std::string(to_string(settings.convention));
    j["tdiff_factor"] = tdiff_factor(settings.convention);
    j["n_intervals"] = settings.n_intervals;
    auto sentences = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < conv.size(); ++i) {
        const auto& s = conv.sentences[i];
        nlohmann::ordered_json row;
        row["index"] = s.index;
        row["speaker"] = std::string(to_string(s.speaker));
        row["text"] = s.text;
        row["tokens"] = i < t.token_counts.size() ? t.token_counts[i] : 0;
        auto it = t.predictions.find(s.index);
        row["prediction"] = it == t.predictions.end() ? nlohmann::ordered_json(nullptr)
                                                      : nlohmann::ordered_json(it->second);
        sentences.push_back(std::move(row));
    }
    j["sentences"] = std::move(sentences);
    auto intervals = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < t.intervals.size(); ++i) {
        const auto& iv = t.intervals[i];
        nlohmann::ordered_json row;
        row["k"] = iv.k;
        row["first_sentence"] = iv.empty() ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(iv.first_sentence);
        row["last_sentence"] = iv.empty() ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(iv.last_sentence);
        row["token_begin"] = iv.token_begin;
        row["token_end"] = iv.token_end;
        if (i < t.interval_scores.size()) {
            const auto& sc = t.interval_scores[i];
            row["n_doctor"] = sc.n_doctor;
            row["n_patient"] = sc.n_patient;
            row["mean_doctor"] = detail::optional_json(sc.mean_doctor);
            row["mean_patient"] = detail::optional_json(sc.mean_patient);
            row["valid"] = sc.valid();
        }
        auto td = std::find_if(t.tdiffs.begin(), t.tdiffs.end(), [&](const auto& d) { return d.k == iv.k; });
        row["tdiff"] = td == t.tdiffs.end() ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(td->tdiff);
        intervals.push_back(std::move(row));
    }
    j["intervals"] = std::move(intervals);
    j["scores"] = {{"n_valid_intervals", t.scores.n_valid_intervals},
                   {"max", detail::optional_json(t.scores.max)},
                   {"min", detail::optional_json(t.scores.min)},
                   {"absmax", detail::optional_json(t.scores.absmax)},
                   {"absmin", detail::optional_json(t.scores.absmin)}};
    if (!t.note.empty()) j["note"] = t.note;
    return j;
}

} // namespace convalign
