#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "voxgene/config.hpp"
#include "voxgene/error.hpp"
#include "voxgene/evaluate.hpp"
#include "voxgene/model.hpp"
#include "voxgene/parallel.hpp"
#include "voxgene/pipeline.hpp"
#include "voxgene/synth.hpp"
#include "voxgene/train.hpp"

namespace {

namespace fs = std::filesystem;
using namespace voxgene;

constexpr int kExitConfig = 2;
constexpr int kExitInput = 3;
constexpr int kExitNumeric = 4;

struct CommonOpts {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<int> threads;
    bool overwrite = false;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
    cmd->add_option("--config", o.config_path, "JSON config file");
    cmd->add_option("--seed", o.seed, "override the config seed");
    cmd->add_option("--threads", o.threads, "worker cap (0 = hardware)");
    cmd->add_flag("--overwrite", o.overwrite, "allow writing into non-empty destinations");
}

RunConfig resolve_config(const CommonOpts& o) {
    RunConfig cfg;
    if (!o.config_path.empty()) cfg = load_run_config(o.config_path);
    if (o.seed) cfg.seed = *o.seed;
    if (o.threads) cfg.threads = *o.threads;
    cfg.resolve_seeds();
    if (cfg.threads < 0) throw config_error("threads must be >= 0");
    set_max_workers(cfg.threads);
    return cfg;
}

void ensure_fresh_dir(const fs::path& dir, bool overwrite) {
    if (fs::exists(dir) && fs::is_directory(dir) && !fs::is_empty(dir) && !overwrite)
        throw input_error("output directory '" + dir.string() +
                          "' is not empty; pass --overwrite to reuse it");
    fs::create_directories(dir);
}

void ensure_fresh_file(const fs::path& file, bool overwrite) {
    if (fs::exists(file) && !overwrite)
        throw input_error("output file '" + file.string() +
                          "' exists; pass --overwrite to replace it");
    if (file.has_parent_path()) fs::create_directories(file.parent_path());
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void write_run_echo(const fs::path& path, const std::string& command, const RunConfig& cfg,
                    const json& extras) {
    json j;
    j["command"] = command;
    j["config"] = run_config_to_json(cfg);
    for (const auto& [k, v] : extras.items()) j[k] = v;
    write_json_file(path, j);
}

int cmd_synth(const CommonOpts& o, const std::string& out) {
    RunConfig cfg = resolve_config(o);
    ensure_fresh_dir(out, o.overwrite);
    const std::string digest = generate_cohort(cfg.synth, out);
    write_run_echo(fs::path(out) / "run.json", "synth", cfg, json{{"digest", digest}});
    std::cout << "command=synth out=" << out << " patients=" << cfg.synth.n_patients
              << " genes=" << cfg.synth.total_genes() << " digest=" << digest << "\n";
    return 0;
}

int cmd_preprocess(const CommonOpts& o, const std::string& raw, const std::string& out) {
    RunConfig cfg = resolve_config(o);
    ensure_fresh_dir(out, o.overwrite);
    const CohortBuild build = preprocess_directory(raw, cfg.data);
    for (const auto& w : build.warnings) std::cerr << "warning: " << w << "\n";
    for (const auto& [id, reason] : build.exclusions)
        std::cerr << "excluded: " << id << " (" << reason << ")\n";
    if (build.records.empty()) throw input_error("cohort is empty after exclusions");
    write_cohort(out, build, cfg.data);
    write_run_echo(fs::path(out) / "run.json", "preprocess", cfg,
                   json{{"digest", build.digest}, {"raw_dir", raw}});
    std::cout << "command=preprocess out=" << out << " patients=" << build.records.size()
              << " excluded=" << build.exclusions.size() << " genes=" << build.gene_ids.size()
              << " digest=" << build.digest << "\n";
    return 0;
}

int cmd_train(const CommonOpts& o, const std::string& cohort_dir, const std::string& out) {
    RunConfig cfg = resolve_config(o);
    fs::path out_path(out);
    if (!out_path.has_extension()) out_path.replace_extension(".json");
    fs::path log_path = out_path;
    log_path.replace_extension(".log.tsv");
    fs::path blob_path = out_path;
    blob_path.replace_extension(".bin");
    ensure_fresh_file(out_path, o.overwrite);
    ensure_fresh_file(blob_path, o.overwrite);
    ensure_fresh_file(log_path, o.overwrite);

    const CohortBuild build = load_cohort(cohort_dir);
    cfg.model.gene_count = build.gene_ids.size();
    const TrainDataset data = make_train_dataset(build, cfg.model.input_size);
    const TrainResult result = train(cfg.model, cfg.train, data);
    const json echo = run_config_to_json(cfg);
    save_checkpoint(out_path, result.checkpoint, &echo);
    write_text_file(log_path, training_log_text(result.log));
    const std::string digest = result.checkpoint.digest();
    std::cout << "command=train out=" << out_path.string()
              << " epochs=" << result.checkpoint.meta.epochs
              << " best_epoch=" << result.checkpoint.meta.best_epoch
              << " final_train_loss=" << fmt(result.checkpoint.meta.final_train_loss)
              << " final_val_loss=" << fmt(result.checkpoint.meta.final_val_loss)
              << " checkpoint_digest=" << digest << "\n";
    return 0;
}

int cmd_eval(const CommonOpts& o, const std::string& checkpoint, const std::string& cohort_dir,
             const std::string& out, const std::optional<double>& alpha, bool oracle) {
    RunConfig cfg = resolve_config(o);
    if (alpha) cfg.eval.alpha = *alpha;
    ensure_fresh_dir(out, o.overwrite);
    const Checkpoint ck = load_checkpoint(checkpoint);
    const CohortBuild build = load_cohort(cohort_dir);
    GeneSignificanceReport report = evaluate_cohort(ck, build, cfg.eval, oracle);
    write_report(out, report, run_config_to_json(cfg));
    std::cout << "command=eval out=" << out << " n=" << report.n_patients
              << " evaluable=" << report.evaluable_count
              << " significant=" << report.significant_count << " r_max=" << fmt(report.r_max)
              << " r_min=" << fmt(report.r_min) << " r_mean=" << fmt(report.r_mean)
              << " report_digest=" << report_digest(report) << "\n";
    return 0;
}

int cmd_compare(const std::string& a_path, const std::string& b_path) {
    const GeneSignificanceReport a = load_report(a_path);
    const GeneSignificanceReport b = load_report(b_path);
    const ReportComparison cmp = compare_reports(a, b);
    std::cout << "command=compare genes=" << cmp.gene_count
              << " significant_a=" << a.significant_count
              << " significant_b=" << b.significant_count
              << " delta_significant=" << cmp.significant_count_delta
              << " intersection=" << cmp.intersection << " only_a=" << cmp.only_a
              << " only_b=" << cmp.only_b << " max_abs_delta_r=" << fmt(cmp.max_abs_delta_r)
              << " mean_delta_r=" << fmt(cmp.mean_delta_r) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"voxgene: volumetric imaging to gene expression pipeline"};
    app.require_subcommand(1);

    CommonOpts synth_opts;
    std::string synth_out;
    auto* synth = app.add_subcommand("synth", "generate a synthetic cohort");
    add_common(synth, synth_opts);
    synth->add_option("--out", synth_out, "output directory")->required();

    CommonOpts pre_opts;
    std::string pre_raw, pre_out;
    auto* pre = app.add_subcommand("preprocess", "build a model-ready cohort from raw files");
    add_common(pre, pre_opts);
    pre->add_option("raw_dir", pre_raw, "directory with volumes/, masks/, expression.tsv")
        ->required();
    pre->add_option("--out", pre_out, "output cohort directory")->required();

    CommonOpts train_opts;
    std::string train_cohort, train_out;
    auto* tr = app.add_subcommand("train", "train the encoder on a cohort");
    add_common(tr, train_opts);
    tr->add_option("cohort_dir", train_cohort, "preprocessed cohort directory")->required();
    tr->add_option("--out", train_out, "checkpoint manifest path")->required();

    CommonOpts eval_opts;
    std::string eval_ck, eval_cohort, eval_out;
    std::optional<double> eval_alpha;
    bool eval_oracle = false;
    auto* ev = app.add_subcommand("eval", "test-split association report");
    add_common(ev, eval_opts);
    ev->add_option("checkpoint", eval_ck, "checkpoint manifest")->required();
    ev->add_option("cohort_dir", eval_cohort, "preprocessed cohort directory")->required();
    ev->add_option("--out", eval_out, "report directory")->required();
    ev->add_option("--alpha", eval_alpha, "significance level");
    ev->add_flag("--oracle", eval_oracle, "use targets as predictions (plumbing check)")
        ->group("");

    std::string cmp_a, cmp_b;
    auto* cp = app.add_subcommand("compare", "diff two reports");
    cp->add_option("report_a", cmp_a, "first report.json")->required();
    cp->add_option("report_b", cmp_b, "second report.json")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitConfig;
    }

    try {
        if (synth->parsed()) return cmd_synth(synth_opts, synth_out);
        if (pre->parsed()) return cmd_preprocess(pre_opts, pre_raw, pre_out);
        if (tr->parsed()) return cmd_train(train_opts, train_cohort, train_out);
        if (ev->parsed())
            return cmd_eval(eval_opts, eval_ck, eval_cohort, eval_out, eval_alpha, eval_oracle);
        if (cp->parsed()) return cmd_compare(cmp_a, cmp_b);
    } catch (const config_error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const input_error& e) {
        std::cerr << "input error: " << e.what() << "\n";
        return kExitInput;
    } catch (const numeric_error& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const dimension_error& e) {
        std::cerr << "input error: " << e.what() << "\n";
        return kExitInput;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
