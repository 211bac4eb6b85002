// convalign: command-line driver for the alignment pipeline.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "convalign/config.hpp"
#include "convalign/pipeline.hpp"

namespace fs = std::filesystem;
using namespace convalign;

namespace {

struct Globals {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::size_t jobs = 1;
    std::string work_dir;
    std::string corpus_dir;
    bool quiet = false;
};

fs::path anchored(const fs::path& base, const std::string& p) {
    if (p.empty()) return {};
    const fs::path path(p);
    return path.is_absolute() ? path : (base / path).lexically_normal();
}

PipelineConfig resolved_config(const Globals& g) {
    PipelineConfig cfg;
    fs::path base = fs::current_path();
    if (!g.config_path.empty()) {
        cfg = load_config(g.config_path);
        base = fs::absolute(g.config_path).parent_path();
    }
    if (g.seed) {
        cfg.seed = *g.seed;
        cfg.resolve();
    }
    cfg.corpus_dir = g.corpus_dir.empty() ? anchored(base, cfg.corpus_dir).string() : fs::absolute(g.corpus_dir).string();
    cfg.work_dir = g.work_dir.empty() ? anchored(base, cfg.work_dir).string() : fs::absolute(g.work_dir).string();
    if (!cfg.scorer.planted_csv.empty()) cfg.scorer.planted_csv = anchored(base, cfg.scorer.planted_csv).string();
    for (auto& p : cfg.stats.extra_ca_csvs) p = anchored(base, p).string();
    cfg.validate();
    return cfg;
}

StageContext context(const Globals& g) {
    StageContext ctx;
    ctx.config = resolved_config(g);
    ctx.work_dir = ctx.config.work_dir;
    ctx.jobs = g.jobs;
    ctx.log = g.quiet ? nullptr : &std::cerr;
    return ctx;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Conversational alignment pipeline"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--config", g.config_path, "Pipeline config (JSON)");
    app.add_option("--seed", g.seed, "Override the config seed");
    app.add_option("--jobs", g.jobs, "Worker threads for inference")->check(CLI::PositiveNumber);
    app.add_option("--work", g.work_dir, "Override the work directory");
    app.add_option("--corpus", g.corpus_dir, "Override the corpus directory");
    app.add_flag("-q,--quiet", g.quiet, "No progress messages");

    std::string synth_out;
    auto* ingest = app.add_subcommand("ingest", "Validate transcripts and write the conversation store");
    auto* build = app.add_subcommand("build-dataset", "Build context-response pairs, splits and negatives");
    auto* train = app.add_subcommand("train-scorer", "Train the neural scorer");
    auto* eval = app.add_subcommand("eval-recall", "Recall@k of the configured scorer on the test split");
    auto* align = app.add_subcommand("align", "Conversational alignment scores per conversation");
    auto* validate = app.add_subcommand("validate", "Regress outcomes on alignment scores with BH correction");
    auto* report = app.add_subcommand("report", "Summarize all stage outputs as markdown");
    auto* run = app.add_subcommand("run", "Run every stage in order");
    auto* synth = app.add_subcommand("synth", "Generate a synthetic corpus");
    synth->add_option("--out", synth_out, "Output directory")->required();
    auto* show = app.add_subcommand("config", "Print the resolved config");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : exit_code(Errc::ConfigInvalid);
    }

    try {
        if (*show) {
            std::cout << dump_config(resolved_config(g));
            return 0;
        }
        if (*synth) {
            stage_synth(resolved_config(g), synth_out, g.quiet ? nullptr : &std::cerr);
            return 0;
        }
        const StageContext ctx = context(g);
        const bool neural = ctx.config.scorer.kind == ScorerKind::Neural;
        if (*ingest || *run) stage_ingest(ctx);
        if (*build || *run) stage_build_dataset(ctx);
        if (*train || (*run && neural)) stage_train_scorer(ctx);
        if (*eval || *run) stage_eval_recall(ctx);
        if (*align || *run) stage_align(ctx);
        if (*validate || *run) stage_validate(ctx);
        if (*report || *run) stage_report(ctx);
    } catch (const Error& e) {
        std::cerr << "error [" << to_string(e.code()) << "]: " << e.what() << '\n';
        return exit_code(e.code());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
