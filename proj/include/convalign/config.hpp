#pragma once

// Pipeline configuration: one versioned JSON document covering every stage.
// All randomness derives from the global seed.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "convalign/alignment.hpp"
#include "convalign/dataset.hpp"
#include "convalign/error.hpp"
#include "convalign/neural_scorer.hpp"
#include "convalign/rng.hpp"
#include "convalign/scorer.hpp"
#include "convalign/stats.hpp"
#include "convalign/synthetic.hpp"

namespace convalign {

inline constexpr int kConfigVersion = 1;

enum class ScorerKind { Neural, Overlap, Oracle, Constant, Planted, External };

inline std::string_view to_string(ScorerKind k) noexcept {
    switch (k) {
    case ScorerKind::Neural: return "neural";
    case ScorerKind::Overlap: return "overlap";
    case ScorerKind::Oracle: return "oracle";
    case ScorerKind::Constant: return "constant";
    case ScorerKind::Planted: return "planted";
    case ScorerKind::External: return "external";
    }
    return "neural";
}

inline ScorerKind parse_scorer_kind(std::string_view s) {
    for (auto k : {ScorerKind::Neural, ScorerKind::Overlap, ScorerKind::Oracle, ScorerKind::Constant,
                   ScorerKind::Planted, ScorerKind::External})
        if (to_string(k) == s) return k;
    throw Error(Errc::ConfigInvalid, "unknown scorer kind \"" + std::string(s) + "\"");
}

struct ScorerSelection {
    ScorerKind kind = ScorerKind::Neural;
    std::string model_id; // defaults to the kind name
    ScorerConfig neural = ScorerConfig::best_validated(false);
    std::vector<std::string> external_command;
    ContextFormat external_format = ContextFormat::Plain;
    int external_timeout_ms = 30000;
    std::string planted_csv;
    double constant = 0.5;

    std::string id() const {
        if (!model_id.empty()) return model_id;
        if (kind == ScorerKind::Neural) return neural.stylebook_enabled ? "neural-stylebook" : "neural";
        return std::string(to_string(kind));
    }

    bool operator==(const ScorerSelection&) const = default;
};

struct TokenizerSettings {
    std::size_t vocab_size = kDefaultVocabSize;
    bool lowercase = false;
    bool operator==(const TokenizerSettings&) const = default;
};

enum class BlankPolicy { PerType, WholeConversation };

struct StatsSettings {
    stats::Transform transform = stats::Transform::Identity;
    double q = 0.2;
    double log_shift_epsilon = 1e-3;
    BlankPolicy blanks = BlankPolicy::PerType;
    std::vector<std::string> extra_ca_csvs; // further models' CA scores to include in the family
    bool operator==(const StatsSettings&) const = default;
};

struct PipelineConfig {
    int version = kConfigVersion;
    std::uint64_t seed = 0;
    std::string corpus_dir = "corpus";
    std::string work_dir = "work";
    TokenizerSettings tokenizer;
    ScorerSelection scorer;
    SplitPlan split;
    SamplingPolicy sampling;
    AlignmentSettings alignment;
    StatsSettings stats;
    std::vector<std::size_t> recall_ks{1, 2, 5};
    SynthSpec synthetic;

    // Propagates the global seed into every component.
    void resolve() {
        split.seed = seed;
        sampling.seed = seed;
        scorer.neural.seed = seed;
        synthetic.seed = seed;
    }

    void validate() const {
        auto fail = [](const std::string& m) { throw Error(Errc::ConfigInvalid, "config: " + m); };
        if (version != kConfigVersion) fail("unsupported version " + std::to_string(version));
        split.validate();
        if (sampling.negatives_train < 1 || sampling.negatives_eval < 1) fail("negative counts must be >= 1");
        if (alignment.n_intervals < 2) fail("n_intervals must be >= 2");
        if (!(stats.q > 0.0 && stats.q <= 1.0)) fail("stats.q must lie in (0, 1]");
        if (!(stats.log_shift_epsilon > 0.0)) fail("stats.log_shift_epsilon must be > 0");
        if (tokenizer.vocab_size <= SpecialTokens::count) fail("tokenizer.vocab_size too small");
        if (recall_ks.empty()) fail("recall_ks must not be empty");
        for (auto k : recall_ks)
            if (k == 0 || k > sampling.negatives_eval + 1) fail("recall k outside 1..n");
        if (scorer.kind == ScorerKind::External && scorer.external_command.empty())
            fail("external scorer needs a command");
        if (scorer.kind == ScorerKind::Planted && scorer.planted_csv.empty()) fail("planted scorer needs planted_csv");
        if (scorer.kind == ScorerKind::Constant && !(scorer.constant >= 0.0 && scorer.constant <= 1.0))
            fail("constant scorer value must lie in [0, 1]");
        if (scorer.external_timeout_ms <= 0) fail("external timeout must be > 0");
        auto neural = scorer.neural;
        neural.vocab_size = std::max<std::size_t>(neural.vocab_size, SpecialTokens::count + 1);
        neural.validate();
        synthetic.validate();
    }

    bool operator==(const PipelineConfig&) const = default;
};

namespace detail {

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> keys, const std::string& where) {
    if (!j.is_object()) throw Error(Errc::ConfigInvalid, where + " must be an object");
    std::set<std::string> known(keys.begin(), keys.end());
    for (const auto& [k, v] : j.items())
        if (!known.count(k)) throw Error(Errc::ConfigInvalid, "unknown key \"" + k + "\" in " + where);
}

} // namespace detail

inline nlohmann::ordered_json to_json(const PipelineConfig& c) {
    nlohmann::ordered_json j;
    j["version"] = c.version;
    j["seed"] = c.seed;
    j["paths"] = {{"corpus_dir", c.corpus_dir}, {"work_dir", c.work_dir}};
    j["tokenizer"] = {{"vocab_size", c.tokenizer.vocab_size}, {"lowercase", c.tokenizer.lowercase}};
    nlohmann::ordered_json neural = c.scorer.neural;
    neural.erase("seed");
    neural.erase("vocab_size");
    j["scorer"] = {{"kind", std::string(to_string(c.scorer.kind))},
                   {"model_id", c.scorer.model_id},
                   {"neural", std::move(neural)},
                   {"external",
                    {{"command", c.scorer.external_command},
                     {"format", c.scorer.external_format == ContextFormat::Plain ? "plain" : "sep"},
                     {"timeout_ms", c.scorer.external_timeout_ms}}},
                   {"planted_csv", c.scorer.planted_csv},
                   {"constant", c.scorer.constant}};
    j["split"] = {{"train", c.split.train},
                  {"val", c.split.val},
                  {"test", c.split.test},
                  {"unit", c.split.unit == SplitUnit::Pair ? "pair" : "conversation"}};
    j["sampling"] = {{"negatives_train", c.sampling.negatives_train}, {"negatives_eval", c.sampling.negatives_eval}};
    j["alignment"] = {{"n_intervals", c.alignment.n_intervals},
                      {"window", c.alignment.window},
                      {"tdiff_convention", std::string(to_string(c.alignment.convention))}};
    j["stats"] = {{"transform", std::string(stats::to_string(c.stats.transform))},
                  {"q", c.stats.q},
                  {"log_shift_epsilon", c.stats.log_shift_epsilon},
                  {"blanks", c.stats.blanks == BlankPolicy::PerType ? "per_type" : "whole_conversation"},
                  {"extra_ca_csvs", c.stats.extra_ca_csvs}};
    j["recall_ks"] = c.recall_ks;
    nlohmann::ordered_json synth = c.synthetic;
    synth.erase("seed");
    j["synthetic"] = std::move(synth);
    return j;
}

inline PipelineConfig config_from_json(const nlohmann::json& j) {
    PipelineConfig c;
    try {
        detail::reject_unknown(j, {"version", "seed", "paths", "tokenizer", "scorer", "split", "sampling", "alignment",
                                   "stats", "recall_ks", "synthetic"},
                               "config");
        if (!j.contains("version")) throw Error(Errc::ConfigInvalid, "config lacks a version");
        c.version = j.at("version").get<int>();
        if (c.version != kConfigVersion)
            throw Error(Errc::ConfigInvalid, "unsupported config version " + std::to_string(c.version));
        if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
        if (j.contains("paths")) {
            const auto& p = j["paths"];
            c.corpus_dir = p.value("corpus_dir", c.corpus_dir);
            c.work_dir = p.value("work_dir", c.work_dir);
        }
        if (j.contains("tokenizer")) {
            const auto& t = j["tokenizer"];
            detail::reject_unknown(t, {"vocab_size", "lowercase"}, "tokenizer");
            c.tokenizer.vocab_size = t.value("vocab_size", c.tokenizer.vocab_size);
            c.tokenizer.lowercase = t.value("lowercase", c.tokenizer.lowercase);
        }
        if (j.contains("scorer")) {
            const auto& s = j["scorer"];
            detail::reject_unknown(s, {"kind", "model_id", "neural", "external", "planted_csv", "constant"}, "scorer");
            if (s.contains("kind")) c.scorer.kind = parse_scorer_kind(s["kind"].get<std::string>());
            c.scorer.model_id = s.value("model_id", c.scorer.model_id);
            if (s.contains("neural")) {
                detail::reject_unknown(s["neural"],
                                       {"embedding_dim", "max_tokens", "encoder_heads", "forward_expansion",
                                        "encoder_layers", "share_encoder_layers", "stylebook_enabled",
                                        "stylebook_size", "fc1_enabled", "ff_addnorm1_enabled", "fc2_enabled",
                                        "addnorm2_enabled", "lstm_encoder_hidden", "lstm_agg_hidden", "dropout",
                                        "learning_rate", "weight_decay", "batch_size", "patience", "max_epochs"},
                                       "scorer.neural");
                nlohmann::json merged = nlohmann::json(nlohmann::ordered_json(c.scorer.neural));
                for (const auto& [k, v] : s["neural"].items()) merged[k] = v;
                c.scorer.neural = merged.get<ScorerConfig>();
            }
            if (s.contains("external")) {
                const auto& e = s["external"];
                detail::reject_unknown(e, {"command", "format", "timeout_ms"}, "scorer.external");
                if (e.contains("command")) c.scorer.external_command = e["command"].get<std::vector<std::string>>();
                if (e.contains("format")) c.scorer.external_format = parse_context_format(e["format"].get<std::string>());
                c.scorer.external_timeout_ms = e.value("timeout_ms", c.scorer.external_timeout_ms);
            }
            c.scorer.planted_csv = s.value("planted_csv", c.scorer.planted_csv);
            c.scorer.constant = s.value("constant", c.scorer.constant);
        }
        if (j.contains("split")) {
            const auto& s = j["split"];
            detail::reject_unknown(s, {"train", "val", "test", "unit"}, "split");
            c.split.train = s.value("train", c.split.train);
            c.split.val = s.value("val", c.split.val);
            c.split.test = s.value("test", c.split.test);
            if (s.contains("unit")) {
                const auto u = s["unit"].get<std::string>();
                if (u != "pair" && u != "conversation") throw Error(Errc::ConfigInvalid, "split.unit must be pair or conversation");
                c.split.unit = u == "pair" ? SplitUnit::Pair : SplitUnit::Conversation;
            }
        }
        if (j.contains("sampling")) {
            const auto& s = j["sampling"];
            detail::reject_unknown(s, {"negatives_train", "negatives_eval"}, "sampling");
            c.sampling.negatives_train = s.value("negatives_train", c.sampling.negatives_train);
            c.sampling.negatives_eval = s.value("negatives_eval", c.sampling.negatives_eval);
        }
        if (j.contains("alignment")) {
            const auto& a = j["alignment"];
            detail::reject_unknown(a, {"n_intervals", "window", "tdiff_convention"}, "alignment");
            c.alignment.n_intervals = a.value("n_intervals", c.alignment.n_intervals);
            c.alignment.window = a.value("window", c.alignment.window);
            if (a.contains("tdiff_convention")) {
                const auto v = a["tdiff_convention"].get<std::string>();
                if (v == to_string(TDiffConvention::UnorderedPair)) c.alignment.convention = TDiffConvention::UnorderedPair;
                else if (v == to_string(TDiffConvention::OrderedPair)) c.alignment.convention = TDiffConvention::OrderedPair;
                else throw Error(Errc::ConfigInvalid, "unknown tdiff_convention \"" + v + "\"");
            }
        }
        if (j.contains("stats")) {
            const auto& s = j["stats"];
            detail::reject_unknown(s, {"transform", "q", "log_shift_epsilon", "blanks", "extra_ca_csvs"}, "stats");
            if (s.contains("transform")) c.stats.transform = stats::parse_transform(s["transform"].get<std::string>());
            c.stats.q = s.value("q", c.stats.q);
            c.stats.log_shift_epsilon = s.value("log_shift_epsilon", c.stats.log_shift_epsilon);
            if (s.contains("blanks")) {
                const auto b = s["blanks"].get<std::string>();
                if (b != "per_type" && b != "whole_conversation")
                    throw Error(Errc::ConfigInvalid, "stats.blanks must be per_type or whole_conversation");
                c.stats.blanks = b == "per_type" ? BlankPolicy::PerType : BlankPolicy::WholeConversation;
            }
            if (s.contains("extra_ca_csvs")) c.stats.extra_ca_csvs = s["extra_ca_csvs"].get<std::vector<std::string>>();
        }
        if (j.contains("recall_ks")) c.recall_ks = j["recall_ks"].get<std::vector<std::size_t>>();
        if (j.contains("synthetic")) {
            nlohmann::json merged = nlohmann::json(nlohmann::ordered_json(c.synthetic));
            for (const auto& [k, v] : j["synthetic"].items()) {
                if (!merged.contains(k) || k == "seed") throw Error(Errc::ConfigInvalid, "unknown key \"" + k + "\" in synthetic");
                merged[k] = v;
            }
            c.synthetic = merged.get<SynthSpec>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::ConfigInvalid, std::string("config: ") + e.what());
    }
    c.resolve();
    c.validate();
    return c;
}

inline PipelineConfig parse_config(std::string_view text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::ConfigInvalid, std::string("config is not valid JSON: ") + e.what());
    }
    return config_from_json(j);
}

inline PipelineConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(Errc::MissingInput, "cannot open config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

inline std::string dump_config(const PipelineConfig& c) { return to_json(c).dump(2) + "\n"; }

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

// Hash of everything that affects results; file locations are excluded so
// the same experiment in two directories shares a hash.
inline std::string config_hash(const PipelineConfig& c) {
    auto j = to_json(c);
    j.erase("paths");
    return hex64(fnv1a64(j.dump()));
}

} // namespace convalign
