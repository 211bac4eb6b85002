#pragma once

// Transcript ingestion: JSONL parsing, sentence normalization and corpus
// summary statistics for dyadic doctor/patient conversations.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "convalign/error.hpp"

namespace convalign {

enum class Speaker { Doctor, Patient };

inline std::string_view to_string(Speaker s) noexcept {
    return s == Speaker::Doctor ? "doctor" : "patient";
}

inline std::optional<Speaker> parse_speaker(std::string_view s) noexcept {
    if (s == "doctor") return Speaker::Doctor;
    if (s == "patient") return Speaker::Patient;
    return std::nullopt;
}

struct Sentence {
    std::size_t index = 0; // 1-based position after empty sentences are dropped
    Speaker speaker = Speaker::Doctor;
    std::string text;
    std::string raw_text;

    bool operator==(const Sentence&) const = default;
};

struct EncounterMetadata {
    std::optional<double> patient_age;
    std::string sex;           // empty = missing
    std::string race;          // empty = missing
    std::string trial_arm;     // "decision-aid" | "usual-care" | empty
    std::string clinician_id;
    std::optional<double> option12;
    std::optional<double> dcs;
    std::optional<double> duration_min;

    bool operator==(const EncounterMetadata&) const = default;
};

struct Conversation {
    std::string id;
    std::vector<Sentence> sentences;
    EncounterMetadata metadata;

    std::size_t size() const noexcept { return sentences.size(); }
    bool operator==(const Conversation&) const = default;
};

struct NormalizationConfig {
    // Bracketed or parenthesized spans whose content starts with one of these
    // (case-insensitive) are removed as paralinguistic annotations.
    std::vector<std::string> annotation_keywords{
        "laugh", "laughs", "laughing", "laughter", "chuckle", "chuckles", "giggle", "giggles",
        "pause", "pauses", "long pause", "short pause", "silence", "sigh", "sighs", "cough",
        "coughs", "coughing", "clears throat", "throat clear", "sniff", "sniffs", "breath",
        "breathes", "inhales", "exhales", "inaudible", "unintelligible", "crosstalk",
        "overlapping", "noise", "background noise", "phone rings", "mumbles", "whispers",
        "cries", "crying", "yawn", "yawns"};
    // Spoken contractions left untouched even if a rewrite rule would match.
    std::vector<std::string> preserve{"'cause", "\xE2\x80\x99" "cause", "AFib"};
    // Perception-dependent g-droppings and similar, matched case-insensitively on
    // whole words. A capitalized source keeps its capital.
    std::map<std::string, std::string> rewrites{
        {"goin'", "going"},     {"doin'", "doing"},       {"nothin'", "nothing"},
        {"somethin'", "something"}, {"talkin'", "talking"}, {"takin'", "taking"},
        {"gettin'", "getting"}, {"lookin'", "looking"},   {"comin'", "coming"},
        {"feelin'", "feeling"}, {"thinkin'", "thinking"}, {"runnin'", "running"},
        {"makin'", "making"},   {"sayin'", "saying"},     {"walkin'", "walking"}};
    // Abbreviations, matched case-sensitively on whole words.
    std::map<std::string, std::string> abbreviations{
        {"p.m.", "PM"}, {"a.m.", "AM"}, {"P.M.", "PM"}, {"A.M.", "AM"},
        {"St.", "Saint"}, {"Dr.", "Doctor"}};
};

namespace detail {

inline bool is_word_byte(unsigned char c) noexcept {
    return std::isalnum(c) != 0 || c >= 0x80;
}

inline std::string ascii_lower(std::string_view s) {
    std::string out(s);
    for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

inline std::string_view trim(std::string_view s) noexcept {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
}

inline bool is_annotation(std::string_view content, const NormalizationConfig& cfg) {
    const std::string lowered = ascii_lower(trim(content));
    for (const auto& kw : cfg.annotation_keywords) {
        const std::string k = ascii_lower(kw);
        if (lowered.size() < k.size() || lowered.compare(0, k.size(), k) != 0) continue;
        if (lowered.size() == k.size()) return true;
        const unsigned char next = static_cast<unsigned char>(lowered[k.size()]);
        if (!is_word_byte(next)) return true;
    }
    return false;
}

inline bool is_closing_punct(char c) noexcept {
    return c == '.' || c == ',' || c == '!' || c == '?' || c == ';' || c == ':' || c == ')' ||
           c == ']';
}

// Index of the bracket closing the one at `open_pos`, honouring nesting, or npos.
inline std::size_t matching_close(std::string_view s, std::size_t open_pos) noexcept {
    std::string stack(1, s[open_pos] == '[' ? ']' : ')');
    for (std::size_t i = open_pos + 1; i < s.size(); ++i) {
        const char c = s[i];
        if (c == '[' || c == '(') {
            stack.push_back(c == '[' ? ']' : ')');
        } else if (c == ']' || c == ')') {
            if (c != stack.back()) return std::string_view::npos;
            stack.pop_back();
            if (stack.empty()) return i;
        }
    }
    return std::string_view::npos;
}

// One left-to-right pass over balanced [...] / (...) spans, outermost first;
// returns true if anything was removed.
inline bool remove_annotations_once(std::string& s, const NormalizationConfig& cfg) {
    bool changed = false;
    std::size_t pos = 0;
    while (pos < s.size()) {
        const char open = s[pos];
        if (open != '[' && open != '(') {
            ++pos;
            continue;
        }
        const std::size_t end = matching_close(s, pos);
        if (end == std::string::npos) {
            ++pos;
            continue;
        }
        const std::string_view content(s.data() + pos + 1, end - pos - 1);
        if (!is_annotation(content, cfg)) {
            ++pos;
            continue;
        }
        std::string left = s.substr(0, pos);
        std::string right = s.substr(end + 1);
        if (right.empty() || std::isspace(static_cast<unsigned char>(right.front())) ||
            is_closing_punct(right.front())) {
            while (!left.empty() && std::isspace(static_cast<unsigned char>(left.back())))
                left.pop_back();
        }
        pos = left.size();
        s = left + right;
        changed = true;
    }
    return changed;
}

inline bool boundary_before(std::string_view s, std::size_t pos) noexcept {
    if (pos == 0) return true;
    const unsigned char c = static_cast<unsigned char>(s[pos - 1]);
    return !is_word_byte(c) && c != '\'';
}

inline bool boundary_after(std::string_view s, std::size_t pos) noexcept {
    return pos >= s.size() || !is_word_byte(static_cast<unsigned char>(s[pos]));
}

// Whole-word, left-to-right, longest-key-first substitution.
inline std::string apply_table(std::string_view s, const std::map<std::string, std::string>& table,
                               bool case_insensitive, const std::vector<std::string>& preserve) {
    std::vector<std::pair<std::string, std::string>> keys(table.begin(), table.end());
    std::stable_sort(keys.begin(), keys.end(),
                     [](const auto& a, const auto& b) { return a.first.size() > b.first.size(); });
    std::string out;
    out.reserve(s.size());
    std::size_t pos = 0;
    while (pos < s.size()) {
        if (!boundary_before(s, pos)) {
            out.push_back(s[pos++]);
            continue;
        }
        bool preserved = false;
        for (const auto& p : preserve) {
            if (s.substr(pos, p.size()) == p && boundary_after(s, pos + p.size())) {
                out.append(p);
                pos += p.size();
                preserved = true;
                break;
            }
        }
        if (preserved) continue;
        bool replaced = false;
        for (const auto& [key, value] : keys) {
            if (pos + key.size() > s.size()) continue;
            const std::string_view candidate = s.substr(pos, key.size());
            const bool match = case_insensitive ? ascii_lower(candidate) == ascii_lower(key)
                                                : candidate == key;
            if (!match || !boundary_after(s, pos + key.size())) continue;
            std::string rep = value;
            if (case_insensitive && !rep.empty() &&
                std::isupper(static_cast<unsigned char>(candidate.front())))
                rep.front() = static_cast<char>(std::toupper(static_cast<unsigned char>(rep.front())));
            out.append(rep);
            pos += key.size();
            replaced = true;
            break;
        }
        if (!replaced) out.push_back(s[pos++]);
    }
    return out;
}

inline std::string collapse_whitespace(std::string_view s) {
    std::string out;
    out.reserve(s.size());
    bool pending_space = false;
    for (char c : s) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) out.push_back(' ');
        pending_space = false;
        out.push_back(c);
    }
    return out;
}

} // namespace detail

// Removes paralinguistic annotations, applies rewrite and abbreviation tables,
// and collapses whitespace. Returns an empty string if nothing remains.
inline std::string normalize_sentence(std::string_view raw, const NormalizationConfig& rules = {}) {
    std::string s(raw);
    while (detail::remove_annotations_once(s, rules)) {
    }
    s = detail::apply_table(s, rules.rewrites, true, rules.preserve);
    s = detail::apply_table(s, rules.abbreviations, false, rules.preserve);
    return detail::collapse_whitespace(s);
}

// ---------------------------------------------------------------------------
// JSONL transcript format

namespace detail {

inline std::optional<double> optional_number(const nlohmann::json& obj, const char* key,
                                             const std::string& doc_id) {
    auto it = obj.find(key);
    if (it == obj.end() || it->is_null()) return std::nullopt;
    if (!it->is_number())
        throw Error(Errc::MalformedDocument, doc_id + ": metadata." + key + " must be a number");
    return it->get<double>();
}

inline std::string optional_string(const nlohmann::json& obj, const char* key,
                                   const std::string& doc_id) {
    auto it = obj.find(key);
    if (it == obj.end() || it->is_null()) return {};
    if (it->is_number()) return it->dump();
    if (!it->is_string())
        throw Error(Errc::MalformedDocument, doc_id + ": metadata." + key + " must be a string");
    return it->get<std::string>();
}

inline nlohmann::json number_or_null(const std::optional<double>& v) {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

inline nlohmann::json string_or_null(const std::string& v) {
    return v.empty() ? nlohmann::json(nullptr) : nlohmann::json(v);
}

} // namespace detail

inline Conversation parse_transcript(std::istream& in, const NormalizationConfig& rules = {}) {
    Conversation conv;
    std::string line;
    std::size_t line_no = 0;
    bool have_header = false;
    std::size_t next_index = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (detail::trim(line).empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw Error(Errc::MalformedDocument,
                        "line " + std::to_string(line_no) + ": " + e.what());
        }
        if (!j.is_object())
            throw Error(Errc::MalformedDocument, "line " + std::to_string(line_no) + ": not an object");
        if (!have_header) {
            auto id = j.find("id");
            if (id == j.end() || !id->is_string())
                throw Error(Errc::MalformedDocument, "header line must carry a string \"id\"");
            conv.id = id->get<std::string>();
            if (auto m = j.find("metadata"); m != j.end() && !m->is_null()) {
                if (!m->is_object())
                    throw Error(Errc::MalformedDocument, conv.id + ": metadata must be an object");
                auto& md = conv.metadata;
                md.patient_age = detail::optional_number(*m, "age", conv.id);
                md.sex = detail::optional_string(*m, "sex", conv.id);
                md.race = detail::optional_string(*m, "race", conv.id);
                md.trial_arm = detail::optional_string(*m, "arm", conv.id);
                md.clinician_id = detail::optional_string(*m, "clinician_id", conv.id);
                md.option12 = detail::optional_number(*m, "option12", conv.id);
                md.dcs = detail::optional_number(*m, "dcs", conv.id);
                md.duration_min = detail::optional_number(*m, "duration_min", conv.id);
                for (const auto* score : {&md.option12, &md.dcs}) {
                    if (*score && (**score < 0.0 || **score > 100.0))
                        throw Error(Errc::MalformedDocument,
                                    conv.id + ": outcome scores must lie in [0, 100]");
                }
            }
            have_header = true;
            continue;
        }
        auto sp = j.find("speaker");
        auto tx = j.find("text");
        if (sp == j.end() || !sp->is_string() || tx == j.end() || !tx->is_string())
            throw Error(Errc::MalformedDocument, conv.id + " line " + std::to_string(line_no) +
                                                     ": utterance needs string speaker and text");
        const auto speaker = parse_speaker(sp->get<std::string>());
        if (!speaker)
            throw Error(Errc::MultipartyConversation,
                        conv.id + ": speaker \"" + sp->get<std::string>() +
                            "\" is neither doctor nor patient");
        Sentence s;
        s.speaker = *speaker;
        s.raw_text = tx->get<std::string>();
        s.text = normalize_sentence(s.raw_text, rules);
        if (s.text.empty()) continue;
        s.index = next_index++;
        conv.sentences.push_back(std::move(s));
    }
    if (!have_header) throw Error(Errc::MalformedDocument, "empty document");
    if (conv.sentences.empty())
        throw Error(Errc::MalformedDocument, conv.id + ": no sentences after normalization");
    return conv;
}

inline Conversation parse_transcript(std::string_view document, const NormalizationConfig& rules = {}) {
    std::istringstream in{std::string(document)};
    return parse_transcript(in, rules);
}

// Writes raw utterance text so that parsing the output reproduces the input.
inline void serialize_transcript(const Conversation& conv, std::ostream& out) {
    const auto& md = conv.metadata;
    nlohmann::ordered_json header;
    header["id"] = conv.id;
    header["metadata"] = {{"age", detail::number_or_null(md.patient_age)},
                          {"sex", detail::string_or_null(md.sex)},
                          {"race", detail::string_or_null(md.race)},
                          {"arm", detail::string_or_null(md.trial_arm)},
                          {"clinician_id", detail::string_or_null(md.clinician_id)},
                          {"option12", detail::number_or_null(md.option12)},
                          {"dcs", detail::number_or_null(md.dcs)},
                          {"duration_min", detail::number_or_null(md.duration_min)}};
    out << header.dump() << '\n';
    for (const auto& s : conv.sentences) {
        nlohmann::ordered_json line;
        line["speaker"] = std::string(to_string(s.speaker));
        line["text"] = s.raw_text;
        out << line.dump() << '\n';
    }
}

inline std::string serialize_transcript(const Conversation& conv) {
    std::ostringstream out;
    serialize_transcript(conv, out);
    return out.str();
}

// ---------------------------------------------------------------------------
// Corpus statistics

struct MeanSd {
    double mean = 0.0;
    double sd = 0.0; // sample SD; 0 for a single observation
    std::size_t n = 0;
};

inline MeanSd mean_sd(const std::vector<double>& xs) {
    MeanSd r;
    r.n = xs.size();
    if (xs.empty()) return r;
    for (double x : xs) r.mean += x;
    r.mean /= static_cast<double>(xs.size());
    if (xs.size() > 1) {
        double ss = 0.0;
        for (double x : xs) ss += (x - r.mean) * (x - r.mean);
        r.sd = std::sqrt(ss / static_cast<double>(xs.size() - 1));
    }
    return r;
}

// Whitespace-delimited chunks holding at least one letter or digit.
inline std::size_t word_count(std::string_view text) {
    std::size_t count = 0;
    bool in_chunk = false, has_word = false;
    for (char c : text) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            if (in_chunk && has_word) ++count;
            in_chunk = has_word = false;
            continue;
        }
        in_chunk = true;
        if (detail::is_word_byte(static_cast<unsigned char>(c))) has_word = true;
    }
    if (in_chunk && has_word) ++count;
    return count;
}

struct SpeakerStats {
    MeanSd words;     // per conversation
    MeanSd sentences; // per conversation
};

struct CorpusStats {
    std::size_t n_conversations = 0;
    std::size_t n_sentences = 0;
    SpeakerStats doctor;
    SpeakerStats patient;
    std::size_t patient_dominant = 0; // conversations where patient words > doctor words
    MeanSd duration_min;
};

inline CorpusStats corpus_stats(const std::vector<Conversation>& conversations) {
    if (conversations.empty()) throw Error(Errc::EmptyCorpus, "corpus_stats on an empty corpus");
    CorpusStats st;
    st.n_conversations = conversations.size();
    std::vector<double> dw, ds, pw, ps, dur;
    for (const auto& c : conversations) {
        double d_words = 0, d_sent = 0, p_words = 0, p_sent = 0;
        for (const auto& s : c.sentences) {
            const double w = static_cast<double>(word_count(s.text));
            if (s.speaker == Speaker::Doctor) {
                d_words += w;
                d_sent += 1;
            } else {
                p_words += w;
                p_sent += 1;
            }
        }
        st.n_sentences += c.sentences.size();
        dw.push_back(d_words);
        ds.push_back(d_sent);
        pw.push_back(p_words);
        ps.push_back(p_sent);
        if (p_words > d_words) ++st.patient_dominant;
        if (c.metadata.duration_min) dur.push_back(*c.metadata.duration_min);
    }
    st.doctor = {mean_sd(dw), mean_sd(ds)};
    st.patient = {mean_sd(pw), mean_sd(ps)};
    st.duration_min = mean_sd(dur);
    return st;
}

inline nlohmann::ordered_json to_json(const CorpusStats& st) {
    auto msd = [](const MeanSd& m) {
        return nlohmann::ordered_json{{"mean", m.mean}, {"sd", m.sd}, {"n", m.n}};
    };
    return {{"n_conversations", st.n_conversations},
            {"n_sentences", st.n_sentences},
            {"doctor", {{"words", msd(st.doctor.words)}, {"sentences", msd(st.doctor.sentences)}}},
            {"patient", {{"words", msd(st.patient.words)}, {"sentences", msd(st.patient.sentences)}}},
            {"patient_dominant_conversations", st.patient_dominant},
            {"duration_min", msd(st.duration_min)}};
}

} // namespace convalign
