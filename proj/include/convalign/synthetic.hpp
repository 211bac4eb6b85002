#pragma once

// Seeded synthetic doctor-patient corpora with speaker-specific vocabularies
// and a planted alignment trend. Each scored sentence copies words from its
// five-sentence context with a planted probability, and that probability is
// what an ideal scorer would report.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "convalign/dataset.hpp"
#include "convalign/error.hpp"
#include "convalign/rng.hpp"
#include "convalign/transcript.hpp"

namespace convalign {

enum class Trend { Converging, Diverging, Flat };

inline std::string_view to_string(Trend t) noexcept {
    switch (t) {
    case Trend::Converging: return "converging";
    case Trend::Diverging: return "diverging";
    case Trend::Flat: return "flat";
    }
    return "flat";
}

inline Trend parse_trend(std::string_view s) {
    if (s == "converging") return Trend::Converging;
    if (s == "diverging") return Trend::Diverging;
    if (s == "flat") return Trend::Flat;
    throw Error(Errc::ConfigInvalid, "unknown trend \"" + std::string(s) + "\"");
}

struct SynthSpec {
    std::size_t n_conversations = 200;
    std::size_t min_sentences = 30;
    std::size_t max_sentences = 50;
    std::size_t min_words = 4;
    std::size_t max_words = 9;
    std::size_t pool_size = 24;  // words per speaker
    std::size_t lexicon_size = 3; // words each speaker draws on within one conversation
    double overlap = 0.0;        // rho: shared fraction of each pool
    double switch_probability = 0.75;
    Trend trend = Trend::Converging;
    double amplitude_min = 0.05; // D(u) amplitude per conversation, uniform
    double amplitude_max = 0.45;
    double outcome_intercept = 50.0; // a
    double outcome_slope = 40.0;     // b, per unit amplitude
    double outcome_noise = 5.0;
    double clinician_sd = 3.0;
    std::size_t patients_per_clinician = 3;
    std::uint64_t seed = 0;

    void validate() const {
        auto fail = [](const std::string& m) { throw Error(Errc::ConfigInvalid, "synthetic settings: " + m); };
        if (n_conversations == 0) fail("n_conversations must be >= 1");
        if (min_sentences == 0 || min_sentences > max_sentences) fail("sentence range is empty");
        if (min_words == 0 || min_words > max_words) fail("word range is empty");
        if (!(overlap >= 0.0 && overlap <= 1.0)) fail("overlap must lie in [0, 1]");
        if (pool_size < 2 || pool_size > 80) fail("pool_size must lie in [2, 80]");
        if (lexicon_size == 0 || lexicon_size > pool_size) fail("lexicon_size must lie in [1, pool_size]");
        if (!(amplitude_min >= 0.0 && amplitude_min <= amplitude_max && amplitude_max <= 0.5))
            fail("amplitudes must satisfy 0 <= min <= max <= 0.5");
        if (!(switch_probability >= 0.0 && switch_probability <= 1.0)) fail("switch_probability must lie in [0, 1]");
        if (outcome_noise < 0.0 || clinician_sd < 0.0) fail("noise scales must be >= 0");
        if (patients_per_clinician == 0) fail("patients_per_clinician must be >= 1");
    }

    bool operator==(const SynthSpec&) const = default;
};

inline void to_json(nlohmann::ordered_json& j, const SynthSpec& s) {
    j = nlohmann::ordered_json{{"n_conversations", s.n_conversations},
                               {"min_sentences", s.min_sentences},
                               {"max_sentences", s.max_sentences},
                               {"min_words", s.min_words},
                               {"max_words", s.max_words},
                               {"pool_size", s.pool_size},
                               {"lexicon_size", s.lexicon_size},
                               {"overlap", s.overlap},
                               {"switch_probability", s.switch_probability},
                               {"trend", std::string(to_string(s.trend))},
                               {"amplitude_min", s.amplitude_min},
                               {"amplitude_max", s.amplitude_max},
                               {"outcome_intercept", s.outcome_intercept},
                               {"outcome_slope", s.outcome_slope},
                               {"outcome_noise", s.outcome_noise},
                               {"clinician_sd", s.clinician_sd},
                               {"patients_per_clinician", s.patients_per_clinician},
                               {"seed", s.seed}};
}

template <typename Json>
void from_json(const Json& j, SynthSpec& s) {
    SynthSpec d;
    auto get = [&](const char* key, auto& field) {
        if (auto it = j.find(key); it != j.end()) it->get_to(field);
    };
    get("n_conversations", d.n_conversations);
    get("min_sentences", d.min_sentences);
    get("max_sentences", d.max_sentences);
    get("min_words", d.min_words);
    get("max_words", d.max_words);
    get("pool_size", d.pool_size);
    get("lexicon_size", d.lexicon_size);
    get("overlap", d.overlap);
    get("switch_probability", d.switch_probability);
    if (auto it = j.find("trend"); it != j.end()) d.trend = parse_trend(it->template get<std::string>());
    get("amplitude_min", d.amplitude_min);
    get("amplitude_max", d.amplitude_max);
    get("outcome_intercept", d.outcome_intercept);
    get("outcome_slope", d.outcome_slope);
    get("outcome_noise", d.outcome_noise);
    get("clinician_sd", d.clinician_sd);
    get("patients_per_clinician", d.patients_per_clinician);
    get("seed", d.seed);
    s = d;
}

struct GroundTruth {
    std::string conversation_id;
    Trend trend = Trend::Flat;
    double amplitude = 0.0;
    double option12 = 0.0;
    double dcs = 0.0;
    std::string clinician_id;
};

struct PlantedProbability {
    std::string conversation_id;
    std::size_t sentence_index = 0; // 1-based
    Speaker speaker = Speaker::Doctor;
    double probability = 0.0;
};

struct SynthCorpus {
    std::vector<Conversation> conversations;
    std::vector<GroundTruth> truth;
    std::vector<PlantedProbability> planted;

    std::map<std::pair<std::string, std::size_t>, double> planted_table() const {
        std::map<std::pair<std::string, std::size_t>, double> t;
        for (const auto& p : planted) t[{p.conversation_id, p.sentence_index}] = p.probability;
        return t;
    }
};

struct SpeakerPools {
    std::vector<std::string> doctor, patient;
};

// Doctor-only words use consonants b d k t, patient-only words m n s l and
// shared words pair one of each, so with overlap 0 the two vocabularies have
// no letters in common apart from vowels.
inline SpeakerPools make_pools(const SynthSpec& spec) {
    static constexpr std::string_view vowels = "aeiou";
    auto words = [](std::string_view first, std::string_view last) {
        std::vector<std::string> out;
        for (char a : first)
            for (char v : vowels)
                for (char b : last) out.push_back(std::string{a, v, b});
        return out;
    };
    auto doctor_only = words("bdkt", "bdkt");
    auto patient_only = words("mnsl", "mnsl");
    auto shared = words("bdkt", "mnsl");
    Rng rng(derive_seed(spec.seed, "pools"));
    rng.shuffle(doctor_only);
    rng.shuffle(patient_only);
    rng.shuffle(shared);
    const auto n_shared = static_cast<std::size_t>(std::llround(spec.overlap * static_cast<double>(spec.pool_size)));
    SpeakerPools pools;
    for (std::size_t i = 0; i < spec.pool_size; ++i) {
        pools.doctor.push_back(i < n_shared ? shared[i] : doctor_only[i]);
        pools.patient.push_back(i < n_shared ? shared[i] : patient_only[i]);
    }
    return pools;
}

// Planted team difference D at relative position u in (0, 1].
inline double planted_difference(Trend trend, double amplitude, double u) {
    switch (trend) {
    case Trend::Converging: return amplitude * (1.0 - u);
    case Trend::Diverging: return amplitude * u;
    case Trend::Flat: return amplitude;
    }
    return amplitude;
}

inline std::string conversation_name(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "syn%04zu", i + 1);
    return buf;
}

inline SynthCorpus generate(const SynthSpec& spec) {
    spec.validate();
    const SpeakerPools pools = make_pools(spec);
    const std::size_t n_clinicians =
        std::max<std::size_t>(2, (spec.n_conversations + spec.patients_per_clinician - 1) / spec.patients_per_clinician);
    std::vector<double> clinician_effect(n_clinicians);
    {
        Rng rng(derive_seed(spec.seed, "clinicians"));
        for (auto& e : clinician_effect) e = rng.normal(0.0, spec.clinician_sd);
    }
    static const std::vector<std::string> sexes{"female", "male"};
    static const std::vector<std::string> races{"white", "black", "asian", "other"};
    static const std::vector<std::string> arms{"usual-care", "decision-aid"};

    SynthCorpus out;
    for (std::size_t ci = 0; ci < spec.n_conversations; ++ci) {
        const std::string id = conversation_name(ci);
        Rng rng(derive_seed(spec.seed, "conversation/" + id));
        Conversation conv;
        conv.id = id;
        const auto T = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(spec.min_sentences),
                                                                static_cast<std::int64_t>(spec.max_sentences)));
        const double amplitude = rng.uniform(spec.amplitude_min, spec.amplitude_max);
        auto lexicon = [&](std::vector<std::string> pool) {
            rng.shuffle(pool);
            pool.resize(spec.lexicon_size);
            return pool;
        };
        const auto doctor_lexicon = lexicon(pools.doctor), patient_lexicon = lexicon(pools.patient);
        Speaker speaker = Speaker::Doctor;
        for (std::size_t t = 1; t <= T; ++t) {
            if (t > 1 && rng.bernoulli(spec.switch_probability))
                speaker = speaker == Speaker::Doctor ? Speaker::Patient : Speaker::Doctor;
            const auto& pool = speaker == Speaker::Doctor ? doctor_lexicon : patient_lexicon;
            // Distinct context words in first-appearance order.
            std::vector<std::string> ctx_words;
            std::set<std::string> ctx_set;
            if (t > kContextWindow) {
                for (std::size_t k = t - 1 - kContextWindow; k < t - 1; ++k) {
                    std::string w;
                    for (char c : conv.sentences[k].text + " ") {
                        if (c >= 'a' && c <= 'z') {
                            w.push_back(c);
                        } else if (!w.empty()) {
                            if (ctx_set.insert(w).second) ctx_words.push_back(w);
                            w.clear();
                        }
                    }
                }
            }
            double p = 0.0;
            if (t > kContextWindow) {
                const double d = planted_difference(spec.trend, amplitude, static_cast<double>(t) / static_cast<double>(T));
                p = speaker == Speaker::Doctor ? 0.5 + d : 0.5 - d;
                out.planted.push_back({id, t, speaker, p});
            }
            const auto& fresh = pool;
            const auto n_words = static_cast<std::size_t>(
                rng.uniform_int(static_cast<std::int64_t>(spec.min_words), static_cast<std::int64_t>(spec.max_words)));
            std::string text;
            for (std::size_t w = 0; w < n_words; ++w) {
                const bool copy = !ctx_words.empty() && rng.bernoulli(p);
                const std::string& word =
                    copy ? ctx_words[rng.uniform_index(ctx_words.size())] : fresh[rng.uniform_index(fresh.size())];
                if (!text.empty()) text += ' ';
                text += word;
            }
            text += rng.bernoulli(0.2) ? "?" : ".";
            Sentence s;
            s.index = t;
            s.speaker = speaker;
            s.text = s.raw_text = text;
            conv.sentences.push_back(std::move(s));
        }

        const std::size_t clinician = ci % n_clinicians;
        char cbuf[32];
        std::snprintf(cbuf, sizeof cbuf, "clin%03zu", clinician + 1);
        auto& md = conv.metadata;
        md.clinician_id = cbuf;
        md.patient_age = static_cast<double>(rng.uniform_int(30, 80));
        md.sex = sexes[rng.uniform_index(sexes.size())];
        md.race = races[rng.uniform_index(races.size())];
        md.trial_arm = arms[rng.uniform_index(arms.size())];
        md.duration_min = std::round(static_cast<double>(T) * 0.4 * 10.0) / 10.0;
        const double option12 = spec.outcome_intercept + spec.outcome_slope * amplitude + clinician_effect[clinician] +
                                rng.normal(0.0, spec.outcome_noise);
        const double dcs = rng.normal(30.0, 10.0);
        md.option12 = std::clamp(std::round(option12 * 100.0) / 100.0, 0.0, 100.0);
        md.dcs = std::clamp(std::round(dcs * 100.0) / 100.0, 0.0, 100.0);

        out.truth.push_back({id, spec.trend, amplitude, *md.option12, *md.dcs, md.clinician_id});
        out.conversations.push_back(std::move(conv));
    }
    return out;
}

inline void write_ground_truth_csv(const SynthCorpus& c, std::ostream& out) {
    out << "conversation_id,trend,amplitude,clinician_id,option12,dcs\n";
    char buf[256];
    for (const auto& g : c.truth) {
        std::snprintf(buf, sizeof buf, "%s,%s,%.10g,%s,%.10g,%.10g\n", g.conversation_id.c_str(),
                      std::string(to_string(g.trend)).c_str(), g.amplitude, g.clinician_id.c_str(), g.option12, g.dcs);
        out << buf;
    }
}

inline void write_planted_csv(const SynthCorpus& c, std::ostream& out) {
    out << "conversation_id,sentence_index,speaker,probability\n";
    char buf[256];
    for (const auto& p : c.planted) {
        std::snprintf(buf, sizeof buf, "%s,%zu,%s,%.10g\n", p.conversation_id.c_str(), p.sentence_index,
                      std::string(to_string(p.speaker)).c_str(), p.probability);
        out << buf;
    }
}

inline std::map<std::pair<std::string, std::size_t>, double> read_planted_csv(std::istream& in) {
    std::map<std::pair<std::string, std::size_t>, double> t;
    std::string line;
    std::getline(in, line);
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::size_t start = 0;
        for (;;) {
            const auto comma = line.find(',', start);
            cells.push_back(line.substr(start, comma - start));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        if (cells.size() != 4) throw Error(Errc::MalformedDocument, "planted.csv line " + std::to_string(line_no));
        try {
            t[{cells[0], static_cast<std::size_t>(std::stoull(cells[1]))}] = std::stod(cells[3]);
        } catch (const std::exception&) {
            throw Error(Errc::MalformedDocument, "planted.csv line " + std::to_string(line_no));
        }
    }
    return t;
}

// corpus/<id>.jsonl, ground_truth.csv and planted.csv under `dir`.
inline void write_synthetic(const SynthCorpus& c, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "corpus");
    for (const auto& conv : c.conversations) {
        std::ofstream f(dir / "corpus" / (conv.id + ".jsonl"), std::ios::binary);
        serialize_transcript(conv, f);
    }
    std::ofstream gt(dir / "ground_truth.csv", std::ios::binary);
    write_ground_truth_csv(c, gt);
    std::ofstream pl(dir / "planted.csv", std::ios::binary);
    write_planted_csv(c, pl);
}

} // namespace convalign
