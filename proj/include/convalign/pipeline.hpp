#pragma once

// File-mediated pipeline stages. Each stage reads the outputs of earlier
// stages from the work directory, writes its own outputs plus the resolved
// config and a manifest carrying the config hash and output checksums.

#include <algorithm>
#include <array>
#include <optional>
#include <set>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "convalign/alignment.hpp"
#include "convalign/config.hpp"
#include "convalign/dataset.hpp"
#include "convalign/error.hpp"
#include "convalign/eval.hpp"
#include "convalign/neural_scorer.hpp"
#include "convalign/scorer.hpp"
#include "convalign/stats.hpp"
#include "convalign/synthetic.hpp"
#include "convalign/tokenizer.hpp"
#include "convalign/transcript.hpp"

namespace convalign {

namespace fs = std::filesystem;

// Process exit status per error category.
inline int exit_code(Errc e) noexcept {
    switch (e) {
    case Errc::ConfigInvalid: return 2;
    case Errc::MissingInput: return 3;
    case Errc::UpstreamStageFailed: return 4;
    case Errc::MalformedDocument:
    case Errc::MultipartyConversation:
    case Errc::EmptyCorpus:
    case Errc::MalformedVocab:
    case Errc::TooFewPairs:
    case Errc::InsufficientPool:
    case Errc::ShapeMismatch:
    case Errc::MissingPrediction:
    case Errc::TooShort:
    case Errc::InvalidInterval:
    case Errc::TooFewRows:
    case Errc::InvalidP:
    case Errc::KOutOfRange:
    case Errc::VocabTooSmall: return 5;
    case Errc::Diverged:
    case Errc::RankDeficient:
    case Errc::Singular:
    case Errc::NonConvergence: return 6;
    case Errc::ProtocolError:
    case Errc::Timeout:
    case Errc::ProbabilityOutOfRange: return 7;
    }
    return 1;
}

struct StageContext {
    PipelineConfig config;
    fs::path work_dir;
    std::size_t jobs = 1;
    std::ostream* log = nullptr;

    void info(const std::string& msg) const {
        if (log) *log << msg << '\n';
    }
};

namespace detail {

inline std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw Error(Errc::MissingInput, "cannot read " + p.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const fs::path& p, const std::string& content) {
    fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(Errc::MissingInput, "cannot write " + p.string());
    out << content;
}

inline std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

inline void require(const fs::path& p, const std::string& stage) {
    if (!fs::exists(p)) throw Error(Errc::MissingInput, p.string() + " missing; run " + stage + " first");
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::size_t start = 0;
    for (;;) {
        const auto comma = line.find(',', start);
        cells.push_back(line.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return cells;
}

} // namespace detail

// Records the resolved config and a checksum of every output.
inline void write_manifest(const StageContext& ctx, const std::string& stage, const std::vector<fs::path>& outputs) {
    const fs::path dir = ctx.work_dir / stage;
    detail::write_file(dir / "config.json", dump_config(ctx.config));
    nlohmann::ordered_json m;
    m["stage"] = stage;
    m["config_hash"] = config_hash(ctx.config);
    m["seed"] = ctx.config.seed;
    auto files = nlohmann::ordered_json::array();
    for (const auto& p : outputs) {
        files.push_back({{"path", fs::relative(p, ctx.work_dir).generic_string()},
                         {"fnv1a64", hex64(fnv1a64(detail::read_file(p)))}});
    }
    m["outputs"] = std::move(files);
    detail::write_file(dir / "manifest.json", m.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Conversation store

inline nlohmann::ordered_json conversation_json(const Conversation& c) {
    std::ostringstream doc;
    serialize_transcript(c, doc);
    nlohmann::ordered_json j;
    j["id"] = c.id;
    j["document"] = doc.str();
    return j;
}

inline std::vector<Conversation> load_store(const StageContext& ctx) {
    const fs::path p = ctx.work_dir / "ingest" / "conversations.jsonl";
    detail::require(p, "ingest");
    std::istringstream in(detail::read_file(p));
    std::vector<Conversation> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        Conversation c = parse_transcript(j.at("document").get<std::string>());
        // The store holds raw text; re-normalizing reproduces the ingest result.
        out.push_back(std::move(c));
    }
    return out;
}

inline void stage_ingest(const StageContext& ctx) {
    const fs::path corpus = ctx.config.corpus_dir;
    if (!fs::is_directory(corpus)) throw Error(Errc::MissingInput, "corpus directory " + corpus.string() + " not found");
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(corpus))
        if (e.is_regular_file() && e.path().extension() == ".jsonl") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw Error(Errc::EmptyCorpus, "no .jsonl transcripts in " + corpus.string());

    std::vector<Conversation> convs;
    std::set<std::string> ids;
    for (const auto& f : files) {
        try {
            std::istringstream in(detail::read_file(f));
            Conversation c = parse_transcript(in);
            if (!ids.insert(c.id).second) throw Error(Errc::MalformedDocument, "duplicate conversation id " + c.id);
            convs.push_back(std::move(c));
        } catch (const Error& e) {
            throw Error(e.code(), f.filename().string() + ": " + e.what());
        }
    }
    std::ostringstream store;
    for (const auto& c : convs) store << conversation_json(c).dump() << '\n';
    const fs::path dir = ctx.work_dir / "ingest";
    detail::write_file(dir / "conversations.jsonl", store.str());
    detail::write_file(dir / "corpus_stats.json", to_json(corpus_stats(convs)).dump(2) + "\n");
    write_manifest(ctx, "ingest", {dir / "conversations.jsonl", dir / "corpus_stats.json"});
    ctx.info("ingest: " + std::to_string(convs.size()) + " conversations");
}

// ---------------------------------------------------------------------------
// Dataset

inline fs::path dataset_path(const StageContext& ctx, Split s) {
    return ctx.work_dir / "dataset" / (std::string(to_string(s)) + ".jsonl");
}

inline std::vector<ContextResponsePair> load_split(const StageContext& ctx, Split s) {
    const fs::path p = dataset_path(ctx, s);
    detail::require(p, "build-dataset");
    std::istringstream in(detail::read_file(p));
    return read_dataset_jsonl(in);
}

inline void stage_build_dataset(const StageContext& ctx) {
    const auto convs = load_store(ctx);
    std::vector<ContextResponsePair> positives;
    std::size_t n_sentences = 0;
    for (const auto& c : convs) {
        n_sentences += c.size();
        auto p = build_positive_pairs(c, ctx.config.alignment.window);
        positives.insert(positives.end(), std::make_move_iterator(p.begin()), std::make_move_iterator(p.end()));
    }
    apply_splits(positives, split_pairs(positives, ctx.config.split));
    const auto all = sample_negatives(positives, ctx.config.sampling);

    std::map<Split, std::ostringstream> files;
    std::map<Split, std::pair<std::size_t, std::size_t>> counts; // positives, total
    for (auto s : {Split::Train, Split::Val, Split::Test}) files[s];
    for (const auto& p : all) {
        write_pair_jsonl(p, files[p.split]);
        auto& c = counts[p.split];
        c.second++;
        if (p.label == Label::Positive) c.first++;
    }
    std::vector<fs::path> outputs;
    nlohmann::ordered_json summary;
    summary["conversations"] = convs.size();
    summary["sentences"] = n_sentences;
    summary["positives"] = positives.size();
    for (auto s : {Split::Train, Split::Val, Split::Test}) {
        const fs::path p = dataset_path(ctx, s);
        detail::write_file(p, files[s].str());
        outputs.push_back(p);
        summary[std::string(to_string(s))] = {{"positives", counts[s].first}, {"samples", counts[s].second}};
    }
    const fs::path sp = ctx.work_dir / "dataset" / "summary.json";
    detail::write_file(sp, summary.dump(2) + "\n");
    outputs.push_back(sp);
    write_manifest(ctx, "dataset", outputs);
    ctx.info("build-dataset: " + std::to_string(positives.size()) + " positives, " + std::to_string(all.size()) +
             " samples");
}

// ---------------------------------------------------------------------------
// Training

inline fs::path checkpoint_path(const StageContext& ctx) { return ctx.work_dir / "model" / "checkpoint.json"; }

inline std::vector<std::string> tokenizer_corpus(const std::vector<ContextResponsePair>& pairs) {
    std::vector<std::string> texts;
    std::set<std::string> seen;
    auto add = [&](const std::string& t) {
        if (seen.insert(t).second) texts.push_back(t);
    };
    for (const auto& p : pairs) {
        for (const auto& s : p.context) add(s.text);
        add(p.response.text);
    }
    return texts;
}

inline std::string format_size(std::size_t n) {
    if (n >= 1000000) return detail::fmt("%.1fM", static_cast<double>(n) / 1e6);
    if (n >= 1000) return detail::fmt("%.1fK", static_cast<double>(n) / 1e3);
    return std::to_string(n);
}

inline void stage_train_scorer(const StageContext& ctx) {
    if (ctx.config.scorer.kind != ScorerKind::Neural)
        throw Error(Errc::ConfigInvalid, "train-scorer applies to the neural scorer only");
    const auto train = load_split(ctx, Split::Train);
    const auto val = load_split(ctx, Split::Val);
    auto vocab = std::make_shared<SubwordVocab>(train_bpe(tokenizer_corpus(train), ctx.config.tokenizer.vocab_size,
                                                          ctx.config.seed, ctx.config.tokenizer.lowercase));
    ScorerConfig mc = ctx.config.scorer.neural;
    mc.vocab_size = vocab->vocab_size();
    NeuralModel model(mc);
    ctx.info("train-scorer: vocab " + std::to_string(mc.vocab_size) + ", parameters " +
             std::to_string(model.parameters().scalar_count()));
    TrainingOptions opt;
    opt.jobs = ctx.jobs;
    opt.on_epoch = [&](const EpochRecord& r) {
        ctx.info("  epoch " + std::to_string(r.epoch) + " loss " + detail::fmt("%.5f", r.train_loss) +
                 " val recall@1 " + detail::fmt("%.4f", r.val_recall1));
    };
    const auto result = train_scorer(model, encode_pairs(train, *vocab, ctx.jobs), encode_pairs(val, *vocab, ctx.jobs), opt);

    const fs::path dir = ctx.work_dir / "model";
    detail::write_file(checkpoint_path(ctx), checkpoint_json(model, *vocab).dump() + "\n");
    std::ostringstream hist;
    write_history_csv(result, hist);
    detail::write_file(dir / "history.csv", hist.str());
    detail::write_file(dir / "vocab.txt", vocab->to_string());
    nlohmann::ordered_json summary{{"best_epoch", result.best_epoch},
                                   {"best_val_recall@1", result.best_val_recall1},
                                   {"epochs_run", result.history.size()},
                                   {"stop_reason", result.stop_reason},
                                   {"parameters", model.parameters().scalar_count()}};
    detail::write_file(dir / "summary.json", summary.dump(2) + "\n");
    write_manifest(ctx, "model", {checkpoint_path(ctx), dir / "history.csv", dir / "vocab.txt", dir / "summary.json"});
}

// ---------------------------------------------------------------------------
// Scorer construction

struct ScorerHandle {
    std::unique_ptr<Scorer> scorer;
    std::string size = "-";
};

inline ScorerHandle make_scorer(const StageContext& ctx) {
    const auto& sel = ctx.config.scorer;
    ScorerHandle h;
    switch (sel.kind) {
    case ScorerKind::Neural: {
        detail::require(checkpoint_path(ctx), "train-scorer");
        auto loaded = load_checkpoint(nlohmann::json::parse(detail::read_file(checkpoint_path(ctx))));
        h.size = format_size(loaded.model->parameters().scalar_count());
        h.scorer = std::make_unique<NeuralScorer>(std::shared_ptr<const NeuralModel>(std::move(loaded.model)),
                                                  loaded.vocab, sel.id());
        break;
    }
    case ScorerKind::Overlap: h.scorer = std::make_unique<OverlapScorer>(); break;
    case ScorerKind::Oracle: h.scorer = std::make_unique<OracleScorer>(); break;
    case ScorerKind::Constant: h.scorer = std::make_unique<ConstantScorer>(sel.constant); break;
    case ScorerKind::Planted: {
        std::istringstream in(detail::read_file(sel.planted_csv));
        h.scorer = std::make_unique<PlantedScorer>(read_planted_csv(in));
        break;
    }
    case ScorerKind::External: {
        ExternalScorerConfig ec;
        ec.command = sel.external_command;
        ec.format = sel.external_format;
        ec.timeout_ms = sel.external_timeout_ms;
        ec.id = sel.id();
        h.scorer = std::make_unique<ExternalScorer>(ec);
        break;
    }
    }
    return h;
}

// ---------------------------------------------------------------------------
// Evaluation

inline void stage_eval_recall(const StageContext& ctx) {
    const auto test = load_split(ctx, Split::Test);
    auto handle = make_scorer(ctx);
    const auto preds = handle.scorer->score(test, ctx.jobs);
    const auto report = recall_report(index_predictions(preds), candidate_sets(test), ctx.config.recall_ks);
    const fs::path dir = ctx.work_dir / "eval";
    std::ostringstream csv;
    write_recall_csv_header(csv, ctx.config.recall_ks);
    write_recall_csv_row(csv, ctx.config.scorer.id(), handle.size, report);
    detail::write_file(dir / "recall.csv", csv.str());
    std::ostringstream pcsv;
    pcsv << "pair_id,probability\n";
    for (const auto& p : preds) pcsv << p.pair_id << ',' << detail::fmt("%.10g", p.probability) << '\n';
    detail::write_file(dir / "predictions.csv", pcsv.str());
    write_manifest(ctx, "eval", {dir / "recall.csv", dir / "predictions.csv"});
    ctx.info("eval-recall: " + std::to_string(report.n_contexts) + " candidate sets");
}

// ---------------------------------------------------------------------------
// Alignment

inline void stage_align(const StageContext& ctx) {
    const auto convs = load_store(ctx);
    auto handle = make_scorer(ctx);
    const auto counter = handle.scorer->token_counter();
    const auto& settings = ctx.config.alignment;

    std::vector<ContextResponsePair> pairs;
    std::vector<std::size_t> offsets{0};
    for (const auto& c : convs) {
        auto p = build_inference_pairs(c, settings.window);
        pairs.insert(pairs.end(), std::make_move_iterator(p.begin()), std::make_move_iterator(p.end()));
        offsets.push_back(pairs.size());
    }
    const auto preds = handle.scorer->score(pairs, ctx.jobs);

    const fs::path dir = ctx.work_dir / "align";
    fs::remove_all(dir / "traces");
    std::ostringstream csv;
    write_ca_csv_header(csv);
    std::vector<fs::path> outputs;
    for (std::size_t ci = 0; ci < convs.size(); ++ci) {
        const auto& c = convs[ci];
        SentenceScores scores;
        for (std::size_t i = offsets[ci]; i < offsets[ci + 1]; ++i) scores[pairs[i].response.index] = preds[i].probability;
        std::vector<std::size_t> counts;
        counts.reserve(c.size());
        for (const auto& s : c.sentences) counts.push_back(counter->count(s));
        auto trace = compute_alignment(c, scores, counts, settings);
        trace.model_id = handle.scorer->id();
        trace.tokenizer_id = counter->id();
        write_ca_csv_row(csv, trace);
        const fs::path tp = dir / "traces" / (c.id + ".json");
        detail::write_file(tp, trace_json(trace, c, settings).dump(2) + "\n");
        outputs.push_back(tp);
    }
    detail::write_file(dir / "ca_scores.csv", csv.str());
    outputs.insert(outputs.begin(), dir / "ca_scores.csv");
    write_manifest(ctx, "align", outputs);
    ctx.info("align: " + std::to_string(convs.size()) + " conversations scored by " + handle.scorer->id());
}

// ---------------------------------------------------------------------------
// Validation

struct CaRow {
    std::string conversation_id;
    std::string model_id;
    std::array<std::optional<double>, 4> scores; // max, min, absmax, absmin
};

inline constexpr std::array<const char*, 4> kCaMethods{"Max", "Min", "AbsMax", "AbsMin"};

inline std::vector<CaRow> read_ca_csv(const fs::path& p) {
    std::istringstream in(detail::read_file(p));
    std::string line;
    std::getline(in, line);
    if (line.rfind("conversation_id,model_id,tokenizer_id,n_valid_intervals,max,min,absmax,absmin", 0) != 0)
        throw Error(Errc::MalformedDocument, p.string() + ": not a CA score file");
    std::vector<CaRow> rows;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto cells = detail::split_csv_line(line);
        if (cells.size() != 8) throw Error(Errc::MalformedDocument, p.string() + " line " + std::to_string(line_no));
        CaRow r;
        r.conversation_id = cells[0];
        r.model_id = cells[1];
        for (std::size_t i = 0; i < 4; ++i) {
            if (cells[4 + i].empty()) continue;
            try {
                r.scores[i] = std::stod(cells[4 + i]);
            } catch (const std::exception&) {
                throw Error(Errc::MalformedDocument, p.string() + " line " + std::to_string(line_no));
            }
        }
        rows.push_back(std::move(r));
    }
    return rows;
}

struct ValidationCell {
    std::string outcome, model, method;
    std::optional<stats::FitResult> unadjusted, adjusted, mixed;
    std::string note;
    bool reject = false;
    std::optional<double> bh_adjusted;
};

struct ValidationReport {
    std::vector<ValidationCell> cells;
    std::optional<stats::MultipleTestReport> bh;
    nlohmann::ordered_json normalization = nlohmann::ordered_json::array();
};

inline ValidationReport validate_scores(const std::vector<CaRow>& ca, const std::vector<Conversation>& convs,
                                        const StatsSettings& settings) {
    std::map<std::string, const Conversation*> by_id;
    for (const auto& c : convs) by_id[c.id] = &c;
    std::vector<std::string> models;
    for (const auto& r : ca) {
        if (!by_id.count(r.conversation_id))
            throw Error(Errc::MalformedDocument, "CA scores mention unknown conversation " + r.conversation_id);
        if (std::find(models.begin(), models.end(), r.model_id) == models.end()) models.push_back(r.model_id);
    }
    ValidationReport rep;
    for (auto outcome : {stats::Outcome::Option12, stats::Outcome::Dcs}) {
        for (const auto& model : models) {
            for (std::size_t m = 0; m < 4; ++m) {
                ValidationCell cell;
                cell.outcome = outcome == stats::Outcome::Option12 ? "OPTION12" : "DCS";
                cell.model = model;
                cell.method = kCaMethods[m];
                std::vector<stats::AnalysisRow> rows;
                std::vector<std::optional<double>> raw;
                for (const auto& r : ca) {
                    if (r.model_id != model) continue;
                    const bool any_blank = std::any_of(r.scores.begin(), r.scores.end(), [](auto& v) { return !v; });
                    const auto& md = by_id[r.conversation_id]->metadata;
                    stats::AnalysisRow a;
                    a.conversation_id = r.conversation_id;
                    a.clinician_id = md.clinician_id;
                    a.age = md.patient_age;
                    a.sex = md.sex;
                    a.race = md.race;
                    a.arm = md.trial_arm;
                    a.option12 = md.option12;
                    a.dcs = md.dcs;
                    raw.push_back(settings.blanks == BlankPolicy::WholeConversation && any_blank ? std::nullopt
                                                                                                  : r.scores[m]);
                    rows.push_back(std::move(a));
                }
                const auto tr = stats::normalize_scores(raw, settings.transform, settings.log_shift_epsilon);
                for (std::size_t i = 0; i < rows.size(); ++i) rows[i].predictor = tr.values[i];
                if (outcome == stats::Outcome::Option12) {
                    std::vector<double> present;
                    for (const auto& v : raw)
                        if (v) present.push_back(*v);
                    nlohmann::ordered_json n{{"model", model},
                                             {"ca_method", cell.method},
                                             {"n", present.size()},
                                             {"transform", std::string(stats::to_string(tr.method))},
                                             {"shift", tr.shift}};
                    const auto sk = stats::skewness(raw);
                    n["skewness"] = sk ? nlohmann::ordered_json(*sk) : nlohmann::ordered_json(nullptr);
                    rep.normalization.push_back(std::move(n));
                }
                auto attempt = [&](auto&& fit, std::optional<stats::FitResult>& slot, const char* what) {
                    try {
                        slot = fit();
                    } catch (const Error& e) {
                        if (!cell.note.empty()) cell.note += "; ";
                        cell.note += std::string(what) + ": " + e.what();
                    }
                };
                stats::RegressionSpec spec;
                spec.outcome = outcome;
                attempt([&] { return stats::fit_linear(spec, rows); }, cell.unadjusted, "unadjusted");
                spec.adjusted = true;
                attempt([&] { return stats::fit_linear(spec, rows); }, cell.adjusted, "adjusted");
                spec.clustered = true;
                attempt([&] { return stats::fit_random_intercept(spec, rows); }, cell.mixed, "mixed");
                rep.cells.push_back(std::move(cell));
            }
        }
    }
    std::vector<double> ps;
    std::vector<std::size_t> where;
    for (std::size_t i = 0; i < rep.cells.size(); ++i) {
        if (rep.cells[i].mixed) {
            ps.push_back(rep.cells[i].mixed->p_value);
            where.push_back(i);
        }
    }
    if (!ps.empty()) {
        rep.bh = stats::bh_adjust(ps, settings.q);
        for (std::size_t j = 0; j < where.size(); ++j) {
            rep.cells[where[j]].reject = rep.bh->reject[j];
            rep.cells[where[j]].bh_adjusted = rep.bh->adjusted[j];
        }
    }
    return rep;
}

inline void write_validation_csv(const ValidationReport& rep, std::ostream& out) {
    out << "outcome,model,ca_method,unadj_est,unadj_se,unadj_p,adj_est,adj_se,adj_p,mixed_est,mixed_se,mixed_p,bh_reject\n";
    auto cells = [&](const std::optional<stats::FitResult>& f) {
        if (!f) return std::string(",,");
        return detail::fmt("%.10g", f->estimate) + "," + detail::fmt("%.10g", f->se) + "," +
               detail::fmt("%.10g", f->p_value);
    };
    for (const auto& c : rep.cells) {
        out << c.outcome << ',' << c.model << ',' << c.method << ',' << cells(c.unadjusted) << ',' << cells(c.adjusted)
            << ',' << cells(c.mixed) << ',' << (c.mixed ? (c.reject ? "1" : "0") : "") << '\n';
    }
}

inline void stage_validate(const StageContext& ctx) {
    const auto convs = load_store(ctx);
    std::vector<fs::path> inputs{ctx.work_dir / "align" / "ca_scores.csv"};
    for (const auto& extra : ctx.config.stats.extra_ca_csvs) inputs.push_back(extra);
    std::vector<CaRow> ca;
    for (const auto& p : inputs) {
        detail::require(p, "align");
        auto rows = read_ca_csv(p);
        ca.insert(ca.end(), rows.begin(), rows.end());
    }
    const auto rep = validate_scores(ca, convs, ctx.config.stats);
    const fs::path dir = ctx.work_dir / "validate";
    std::ostringstream csv;
    write_validation_csv(rep, csv);
    detail::write_file(dir / "table.csv", csv.str());
    nlohmann::ordered_json meta;
    meta["q"] = ctx.config.stats.q;
    meta["family_size"] = rep.bh ? rep.bh->m : 0;
    meta["rejections"] = rep.bh ? rep.bh->n_rejected : 0;
    meta["blanks"] = ctx.config.stats.blanks == BlankPolicy::PerType ? "per_type" : "whole_conversation";
    meta["normalization"] = rep.normalization;
    auto notes = nlohmann::ordered_json::array();
    for (const auto& c : rep.cells)
        if (!c.note.empty()) notes.push_back({{"outcome", c.outcome}, {"model", c.model}, {"ca_method", c.method}, {"note", c.note}});
    meta["notes"] = std::move(notes);
    detail::write_file(dir / "details.json", meta.dump(2) + "\n");
    write_manifest(ctx, "validate", {dir / "table.csv", dir / "details.json"});
    ctx.info("validate: " + std::to_string(rep.cells.size()) + " cells, " +
             std::to_string(rep.bh ? rep.bh->n_rejected : 0) + " rejected at q = " + detail::fmt("%g", ctx.config.stats.q));
}

// ---------------------------------------------------------------------------
// Report

inline void stage_report(const StageContext& ctx) {
    const std::vector<std::string> stages{"ingest", "dataset", "model", "eval", "align", "validate"};
    std::map<std::string, nlohmann::json> manifests;
    for (const auto& s : stages) {
        const fs::path p = ctx.work_dir / s / "manifest.json";
        if (fs::exists(p)) manifests[s] = nlohmann::json::parse(detail::read_file(p));
    }
    if (manifests.empty()) throw Error(Errc::MissingInput, "no stage outputs in " + ctx.work_dir.string());
    std::string hash;
    for (const auto& [stage, m] : manifests) {
        const auto h = m.at("config_hash").get<std::string>();
        if (hash.empty()) hash = h;
        if (h != hash)
            throw Error(Errc::UpstreamStageFailed, "stage " + stage + " was produced with config " + h +
                                                       " but other stages with " + hash);
    }

    std::ostringstream md;
    md << "# Pipeline report\n\nconfig hash `" << hash << "`, seed " << ctx.config.seed << "\n\n";
    md << "## Stages\n\n| stage | outputs |\n|---|---|\n";
    for (const auto& s : stages)
        if (manifests.count(s)) md << "| " << s << " | " << manifests[s]["outputs"].size() << " |\n";
    if (manifests.count("ingest")) {
        const auto st = nlohmann::json::parse(detail::read_file(ctx.work_dir / "ingest" / "corpus_stats.json"));
        md << "\n## Corpus\n\n```\n" << st.dump(2) << "\n```\n";
    }
    if (manifests.count("dataset")) {
        const auto st = nlohmann::json::parse(detail::read_file(ctx.work_dir / "dataset" / "summary.json"));
        md << "\n## Dataset\n\n| split | positives | samples |\n|---|---|---|\n";
        for (const char* s : {"train", "val", "test"})
            md << "| " << s << " | " << st[s]["positives"] << " | " << st[s]["samples"] << " |\n";
    }
    if (manifests.count("model")) {
        const auto st = nlohmann::json::parse(detail::read_file(ctx.work_dir / "model" / "summary.json"));
        md << "\n## Training\n\nbest epoch " << st["best_epoch"] << " of " << st["epochs_run"] << " ("
           << st["stop_reason"].get<std::string>() << "), validation recall@1 "
           << detail::fmt("%.3f", st["best_val_recall@1"].get<double>()) << "\n";
    }
    auto table_from_csv = [&](const fs::path& p) {
        std::istringstream in(detail::read_file(p));
        std::string line;
        std::ostringstream t;
        bool header = true;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            const auto cells = detail::split_csv_line(line);
            t << '|';
            for (const auto& c : cells) t << ' ' << c << " |";
            t << '\n';
            if (header) {
                t << '|';
                for (std::size_t i = 0; i < cells.size(); ++i) t << "---|";
                t << '\n';
                header = false;
            }
        }
        return t.str();
    };
    if (manifests.count("eval")) md << "\n## Recall@k\n\n" << table_from_csv(ctx.work_dir / "eval" / "recall.csv");
    if (manifests.count("align")) {
        const auto rows = read_ca_csv(ctx.work_dir / "align" / "ca_scores.csv");
        md << "\n## Alignment scores\n\n| score | present | blank |\n|---|---|---|\n";
        for (std::size_t m = 0; m < 4; ++m) {
            const auto present = std::count_if(rows.begin(), rows.end(), [&](const CaRow& r) { return r.scores[m].has_value(); });
            md << "| " << kCaMethods[m] << " | " << present << " | " << rows.size() - static_cast<std::size_t>(present) << " |\n";
        }
    }
    if (manifests.count("validate")) {
        std::istringstream in(detail::read_file(ctx.work_dir / "validate" / "table.csv"));
        std::string line;
        std::getline(in, line);
        md << "\n## Association with outcomes\n\n"
           << "| outcome | model | CA method | unadjusted | p | adjusted | p | mixed | p | BH |\n"
           << "|---|---|---|---|---|---|---|---|---|---|\n";
        auto est = [](const std::string& e, const std::string& se) {
            if (e.empty()) return std::string("-");
            return detail::fmt("%.2f", std::stod(e)) + " (±" + detail::fmt("%.2f", std::stod(se)) + ")";
        };
        auto pv = [](const std::string& p) { return p.empty() ? std::string("-") : detail::fmt("%.3f", std::stod(p)); };
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            const auto c = detail::split_csv_line(line);
            md << "| " << c[0] << " | " << c[1] << " | " << c[2] << " | " << est(c[3], c[4]) << " | " << pv(c[5])
               << " | " << est(c[6], c[7]) << " | " << pv(c[8]) << " | " << est(c[9], c[10]) << " | " << pv(c[11])
               << " | " << (c[12] == "1" ? "reject" : "") << " |\n";
        }
    }
    const fs::path out = ctx.work_dir / "report" / "report.md";
    detail::write_file(out, md.str());
    ctx.info("report: " + out.string());
}

// ---------------------------------------------------------------------------
// Synthetic corpus

inline void stage_synth(const PipelineConfig& cfg, const fs::path& out_dir, std::ostream* log = nullptr) {
    const auto corpus = generate(cfg.synthetic);
    write_synthetic(corpus, out_dir);
    if (log) *log << "synth: " << corpus.conversations.size() << " conversations in " << out_dir.string() << '\n';
}

} // namespace convalign
