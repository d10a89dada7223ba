// Acceptance gate: each criterion prints one [PASS]/[FAIL] line; the process
// exits nonzero if any criterion fails. argv[1] is the path to the CLI binary
// (used by the cross-process determinism criterion).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "oracles.hpp"
#include "voxgene/config.hpp"
#include "voxgene/evaluate.hpp"
#include "voxgene/model.hpp"
#include "voxgene/pipeline.hpp"
#include "voxgene/stats.hpp"
#include "voxgene/synth.hpp"
#include "voxgene/train.hpp"

namespace fs = std::filesystem;
using namespace voxgene;

namespace {

void expect(bool cond, const std::string& msg) {
    if (!cond) throw std::runtime_error(msg);
}

double seconds_since(const std::chrono::steady_clock::time_point& t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

fs::path fresh_dir(const std::string& tag) {
    const fs::path dir = fs::temp_directory_path() / ("voxgene_accept_" + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

// ---- criterion 1: full-model gradient integrity -----------------------------

std::string gradient_integrity() {
    const auto t0 = std::chrono::steady_clock::now();
    ModelConfig cfg;
    cfg.input_size = 8;
    cfg.cnn_channels = {4};
    cfg.token_dim = 8;
    cfg.encoder_layers = 2;
    cfg.heads = 2;
    cfg.mlp_hidden = 16;
    cfg.head_dropout = 0.5;
    cfg.gene_count = 3;
    cfg.seed = 11;
    EncoderModel model(cfg);

    Rng rng(3);
    // jitter every parameter so zero-initialized residual projections do not
    // reduce any gradient path to a vacuous zero-zero comparison
    for (std::size_t i = 0; i < model.params().size(); ++i)
        for (auto& v : model.params().tensor(i).values()) v += 0.1 * rng.normal();
    std::vector<Tensor> slices;
    for (int s = 0; s < 2; ++s) {
        Tensor slice({1, 8, 8});
        for (auto& v : slice.values()) v = rng.normal();
        slices.push_back(slice);
    }
    Tensor target({3});
    for (auto& v : target.values()) v = rng.normal();

    const auto loss_of = [&](Tape& tape) {
        Rng unused(0);
        const Tensor pred = model.forward_patient(tape, slices, /*train=*/false, unused);
        return mse_loss(tape, pred, target);
    };
    const auto value = [&] {
        Tape tape;
        return loss_of(tape).value();
    };
    const auto backward = [&] {
        Tape tape;
        tape.backward(loss_of(tape));
    };

    const auto res = oracles::check_gradients(model.params(), value, backward,
                                              /*h=*/1e-5, /*rtol=*/1e-3, /*atol=*/1e-5);
    expect(res.checked == model.params().total_elements(),
           "checked " + std::to_string(res.checked) + " of " +
               std::to_string(model.params().total_elements()) + " parameter elements");
    expect(res.failures == 0, std::to_string(res.failures) + " gradient mismatches, worst: " +
                                  res.worst);
    const double secs = seconds_since(t0);
    expect(secs < 60.0, "took " + std::to_string(secs) + "s, cap is 60s");
    return std::to_string(res.checked) + " parameter elements within rtol 1e-3 / atol 1e-5";
}

// ---- criterion 2: statistics oracle equivalence ------------------------------

std::string stats_oracles() {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(101);
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = 3 + static_cast<std::size_t>(rng.uniform01() * 37.0);
        std::vector<double> x(n), y(n);
        for (std::size_t i = 0; i < n; ++i) {
            x[i] = 5.0 * rng.normal();
            y[i] = rng.normal() + 0.3 * x[i];
        }
        const double delta = std::abs(pearson(x, y) - oracles::direct_pearson(x, y));
        worst = std::max(worst, delta);
        expect(delta <= 1e-12, "pearson deviates from the direct formula by " +
                                   std::to_string(delta));
    }
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t m = 1 + static_cast<std::size_t>(rng.uniform01() * 49.0);
        std::vector<double> ps(m);
        for (auto& p : ps) p = rng.uniform01() * (rng.uniform01() < 0.4 ? 0.08 : 1.0);
        if (m > 2 && rng.uniform01() < 0.4) ps[m - 1] = ps[0];
        const double alpha = 0.01 + 0.2 * rng.uniform01();
        expect(holm_sidak(ps, alpha) == oracles::adjusted_holm_sidak(ps, alpha),
               "step-down flags diverge from the adjusted-p oracle at m=" + std::to_string(m));
    }
    const double secs = seconds_since(t0);
    expect(secs < 30.0, "took " + std::to_string(secs) + "s, cap is 30s");
    std::ostringstream os;
    os << "1000 correlation + 1000 step-down instances, worst |dr|=" << worst;
    return os.str();
}

// ---- criterion 3: p-value correctness ----------------------------------------

std::string pvalue_reference() {
    const double p = pearson_pvalue(0.6, 12);
    expect(std::abs(p - 0.0392) <= 1e-3,
           "p(r=0.6, n=12) = " + std::to_string(p) + ", expected 0.0392 +- 1e-3");
    const double t = 0.6 * std::sqrt(10.0 / (1.0 - 0.36));
    const double q = oracles::simpson_t_pvalue(t, 10.0);
    expect(std::abs(p - q) <= 1e-7,
           "p diverges from the quadrature oracle by " + std::to_string(std::abs(p - q)));

    double prev = 1.1;
    for (int i = 1; i <= 100; ++i) {
        const double r = static_cast<double>(i) / 101.0;
        const double pi = pearson_pvalue(r, 12);
        expect(pi < prev, "p-value not strictly decreasing at |r|=" + std::to_string(r));
        prev = pi;
    }
    std::ostringstream os;
    os << "p(0.6,12)=" << p << ", monotone over a 100-point |r| grid";
    return os.str();
}

// ---- criterion 4: FWER calibration on seeded nulls ---------------------------

std::string fwer_calibration() {
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t runs = 100;
    std::size_t runs_with_rejection = 0;
    for (std::size_t run = 0; run < runs; ++run) {
        PlantSpec spec;
        spec.n_patients = 24;
        spec.planted_genes = 50;
        spec.null_genes = 150;
        spec.noise_std = 0.5;
        spec.seed = 1000 + run;
        const SynthCohort cohort = synth_truth(spec);
        const std::size_t n = spec.n_patients;
        const std::size_t g_count = spec.total_genes();

        // latent-signal predictions against patient-permuted targets
        Rng rng(40000 + run);
        std::vector<std::size_t> perm(n);
        for (std::size_t i = 0; i < n; ++i) perm[i] = i;
        rng.shuffle(perm);

        std::vector<std::vector<double>> preds(n, std::vector<double>(g_count));
        std::vector<std::vector<double>> targets(n, std::vector<double>(g_count));
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t g = 0; g < g_count; ++g) {
                double s = 0.0;
                if (g < spec.planted_genes)
                    for (std::size_t l = 0; l < spec.latent_dim; ++l)
                        s += cohort.truth.weights[g][l] * cohort.truth.latents[i][l];
                else
                    s = rng.normal();
                preds[i][g] = s;
                targets[i][g] = std::log1p(cohort.expression.at(g, perm[i]));
            }

        EvalConfig cfg;
        cfg.alpha = 0.05;
        cfg.seed = run;
        const auto report =
            evaluate_associations(preds, targets, cohort.truth.gene_ids, cfg);
        if (report.significant_count > 0) ++runs_with_rejection;
    }
    expect(runs_with_rejection <= 10, std::to_string(runs_with_rejection) +
                                          "/100 null runs had a rejection, cap is 10");
    const double secs = seconds_since(t0);
    expect(secs < 300.0, "took " + std::to_string(secs) + "s, cap is 5min");
    return std::to_string(runs_with_rejection) + "/100 null runs with any rejection (cap 10)";
}

// ---- criterion 5: planted recovery end-to-end --------------------------------

struct PipelineOutcome {
    std::size_t planted_sig = 0;
    std::size_t planted_total = 0;
    std::size_t null_sig = 0;
    double seconds = 0.0;
};

PipelineOutcome pipeline_run(std::uint64_t seed) {
    const auto t0 = std::chrono::steady_clock::now();
    RunConfig rc;
    rc.seed = seed;
    rc.resolve_seeds();

    const SynthCohort synth = synth_truth(rc.synth);
    std::vector<PatientSource> sources;
    sources.reserve(rc.synth.n_patients);
    for (std::size_t p = 0; p < rc.synth.n_patients; ++p)
        sources.push_back({synth.truth.patient_ids[p],
                           [&spec = rc.synth, &weights = synth.truth.weights, p] {
                               SynthPatient sp = sample_patient(spec, weights, p);
                               return std::pair{std::move(sp.volume), std::move(sp.mask)};
                           }});
    const CohortBuild build = build_cohort(sources, synth.expression, rc.data);
    expect(build.records.size() >= 100, "only " + std::to_string(build.records.size()) +
                                            " of 120 patients survived preprocessing");

    rc.model.gene_count = build.gene_ids.size();
    const TrainDataset data = make_train_dataset(build, rc.model.input_size);
    const TrainResult tr = train(rc.model, rc.train, data);
    const GeneSignificanceReport report = evaluate_cohort(tr.checkpoint, build, rc.eval);

    std::unordered_set<std::string> planted;
    for (std::size_t g = 0; g < synth.truth.gene_ids.size(); ++g)
        if (synth.truth.planted[g]) planted.insert(synth.truth.gene_ids[g]);

    PipelineOutcome out;
    out.planted_total = planted.size();
    for (const auto& a : report.genes) {
        if (!a.hs_significant) continue;
        if (planted.count(a.gene_id))
            ++out.planted_sig;
        else
            ++out.null_sig;
    }
    out.seconds = seconds_since(t0);
    return out;
}

std::string planted_recovery() {
    const PipelineOutcome first = pipeline_run(1);
    std::fprintf(stderr, "  seed 1: planted %zu/%zu, null %zu, %.0fs\n", first.planted_sig,
                 first.planted_total, first.null_sig, first.seconds);
    expect(first.seconds <= 600.0,
           "single run took " + std::to_string(first.seconds) + "s, cap is 10min");
    expect(first.planted_sig >= 40, "recovered only " + std::to_string(first.planted_sig) +
                                        "/50 planted genes (need 40)");

    std::size_t null_runs = first.null_sig > 0 ? 1 : 0;
    std::size_t min_recovered = first.planted_sig;
    for (std::uint64_t seed = 2; seed <= 20; ++seed) {
        const PipelineOutcome o = pipeline_run(seed);
        std::fprintf(stderr, "  seed %llu: planted %zu/%zu, null %zu, %.0fs\n",
                     static_cast<unsigned long long>(seed), o.planted_sig, o.planted_total,
                     o.null_sig, o.seconds);
        if (o.null_sig > 0) ++null_runs;
        min_recovered = std::min(min_recovered, o.planted_sig);
    }
    expect(null_runs <= 3, std::to_string(null_runs) +
                               "/20 runs contained a significant null gene, cap is 3");
    std::ostringstream os;
    os << "seed 1 recovered " << first.planted_sig << "/50 in " << static_cast<int>(first.seconds)
       << "s; " << null_runs << "/20 seeds with any null rejection; min recovery "
       << min_recovered << "/50";
    return os.str();
}

// ---- criterion 6: cross-process determinism through the CLI ------------------

std::string read_file_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    expect(in.good(), "cannot open " + p.string());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

void run_cli(const std::string& cmd, const fs::path& log) {
    const std::string full = cmd + " > " + log.string() + " 2>&1";
    const int status = std::system(full.c_str());
    expect(status == 0, "command failed (" + cmd + "), log: " + log.string());
}

std::string cli_determinism(const std::string& cli) {
    expect(!cli.empty() && fs::exists(cli), "CLI binary path not provided as argv[1]");
    const fs::path root = fresh_dir("determinism");

    const json config = {
        {"seed", 42},
        {"data", {{"target_size", 24}, {"min_tumor_voxels", 10}, {"train_fraction", 0.5},
                  {"val_fraction", 0.25}}},
        {"model", {{"input_size", 24}, {"cnn_channels", {4, 8}}, {"token_dim", 16},
                   {"encoder_layers", 2}, {"heads", 2}, {"mlp_hidden", 32}}},
        {"train", {{"epochs", 2}, {"lr", 3e-4}, {"batch", 4}}},
        {"eval", {{"alpha", 0.05}, {"permutations", 2000}}},
        {"synth", {{"latent_dim", 2}, {"planted_genes", 5}, {"null_genes", 15},
                   {"noise_std", 0.5}, {"n_patients", 12}, {"volume_size", 24},
                   {"radius_min", 3.0}, {"radius_max", 6.0}}},
    };
    const fs::path cfg_path = root / "config.json";
    write_json_file(cfg_path, config);

    const auto chain = [&](const std::string& tag, int threads) {
        const fs::path dir = root / tag;
        fs::create_directories(dir);
        const std::string common = " --config " + cfg_path.string() + " --threads " +
                                   std::to_string(threads);
        run_cli(cli + " synth" + common + " --out " + (dir / "raw").string(),
                dir / "synth.log");
        run_cli(cli + " preprocess " + (dir / "raw").string() + common + " --out " +
                    (dir / "cohort").string(),
                dir / "preprocess.log");
        run_cli(cli + " train " + (dir / "cohort").string() + common + " --out " +
                    (dir / "ck.json").string(),
                dir / "train.log");
        run_cli(cli + " eval " + (dir / "ck.json").string() + " " + (dir / "cohort").string() +
                    common + " --out " + (dir / "report").string(),
                dir / "eval.log");
    };
    chain("a", 1);
    chain("b", 1);
    chain("c", 8);

    const auto ck_digest = [&](const std::string& tag) {
        return load_checkpoint(root / tag / "ck.json").digest();
    };
    const std::string da = ck_digest("a"), db = ck_digest("b"), dc = ck_digest("c");
    expect(da == db, "checkpoint digests differ across identical executions");
    expect(da == dc, "checkpoint digests differ between --threads 1 and --threads 8");
    expect(read_file_bytes(root / "a" / "ck.bin") == read_file_bytes(root / "b" / "ck.bin"),
           "checkpoint blobs differ across identical executions");
    expect(read_file_bytes(root / "a" / "ck.bin") == read_file_bytes(root / "c" / "ck.bin"),
           "checkpoint blobs differ between thread counts");

    const auto rep_digest = [&](const std::string& tag) {
        return report_digest(load_report(root / tag / "report" / "report.json"));
    };
    const std::string ra = rep_digest("a"), rb = rep_digest("b"), r07 = rep_digest("c");
    expect(ra == rb, "report digests differ across identical executions");
    expect(ra == r07, "report digests differ between --threads 1 and --threads 8");
    return "checkpoint digest " + da.substr(0, 12) + "..., report digest " + ra.substr(0, 12) +
           "... stable across reruns and thread counts";
}

// ---- criterion 7: preprocessing contracts ------------------------------------

std::string preprocessing_contracts() {
    {  // linear ramp onto the millimeter grid
        Volume v;
        v.nx = 5;
        v.ny = v.nz = 1;
        v.sx = 2.0;
        v.patient_id = "ramp";
        v.voxels = {0.0, 2.0, 4.0, 6.0, 8.0};
        const Volume out = resample_to_1mm(v);
        expect(out.nx == 9, "ramp resample produced " + std::to_string(out.nx) + " samples");
        for (std::size_t i = 0; i < out.nx; ++i)
            expect(std::abs(out.voxels[i] - static_cast<double>(i)) <= 1e-9,
                   "ramp sample " + std::to_string(i) + " off by more than 1e-9");
    }
    {  // median-zero filtering vs the counting-selection oracle
        Rng rng(71);
        std::size_t checked = 0;
        for (const std::size_t patients : {std::size_t{6}, std::size_t{7}}) {
            ExpressionMatrix em;
            for (std::size_t p = 0; p < patients; ++p)
                em.patient_ids.push_back("P" + std::to_string(p));
            for (std::size_t g = 0; g < 500; ++g) {
                em.gene_ids.push_back("G" + std::to_string(g));
                for (std::size_t p = 0; p < patients; ++p)
                    em.values.push_back(rng.uniform01() < 0.5 ? 0.0 : 10.0 * rng.uniform01());
            }
            std::vector<std::string> keep;
            for (std::size_t g = 0; g < em.genes(); ++g)
                if (oracles::counting_median(em.gene_row(g)) > 0.0)
                    keep.push_back(em.gene_ids[g]);
            const ExpressionMatrix filtered = filter_median_zero(em);
            expect(filtered.gene_ids == keep,
                   "median-zero filter disagrees with the counting oracle");
            checked += em.genes();
        }
        expect(checked == 1000, "expected 1000 gene rows");
    }
    {  // z-score idempotence
        Rng rng(72);
        Volume v;
        v.nx = v.ny = v.nz = 20;
        v.patient_id = "zs";
        v.voxels.resize(v.count());
        for (auto& x : v.voxels) x = 100.0 + 25.0 * rng.normal();
        const Volume once = normalize_intensity(v);
        const Volume twice = normalize_intensity(once);
        for (std::size_t i = 0; i < once.count(); ++i)
            expect(std::abs(once.voxels[i] - twice.voxels[i]) <= 1e-9,
                   "z-score is not idempotent to 1e-9");
    }
    return "ramp exact, 1000 median rows vs counting oracle, z-score idempotent";
}

// ---- criterion 8: report fidelity --------------------------------------------

std::string report_fidelity() {
    Rng rng(81);
    const std::size_t n = 12, g_count = 10;
    std::vector<std::vector<double>> preds(n, std::vector<double>(g_count));
    std::vector<std::vector<double>> targets(n, std::vector<double>(g_count));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t g = 0; g < g_count; ++g) {
            preds[i][g] = rng.normal();
            targets[i][g] = rng.normal();
        }
    for (std::size_t i = 0; i < n; ++i) {
        targets[i][0] = preds[i][0] + 0.01 * rng.normal();   // strongly positive
        targets[i][1] = -preds[i][1] + 0.01 * rng.normal();  // strongly negative
        targets[i][5] = 3.0;                                 // zero target variance
        targets[i][7] = preds[i][7];                         // exact extreme
    }
    std::vector<std::string> ids;
    for (std::size_t g = 0; g < g_count; ++g) ids.push_back("G" + std::to_string(g));
    EvalConfig cfg;
    cfg.seed = 5;
    const GeneSignificanceReport report = evaluate_associations(preds, targets, ids, cfg);
    const fs::path dir = fresh_dir("report");
    write_report(dir, report, json::object());

    // reparse the emitted per-gene table
    std::ifstream in(dir / "genes.tsv");
    expect(in.good(), "genes.tsv missing");
    std::string line;
    expect(static_cast<bool>(std::getline(in, line)) && line.rfind("gene_id\t", 0) == 0,
           "genes.tsv header malformed");
    std::size_t rows = 0, evaluable = 0, significant = 0;
    std::vector<double> rs;
    std::vector<std::size_t> bins(kHistogramBins, 0);
    double r_sum = 0.0, r_max = -2.0, r_min = 2.0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string gene, r_s, n_s, p_s, sig_s, eval_s;
        expect(static_cast<bool>(std::getline(ls, gene, '\t')) &&
                   static_cast<bool>(std::getline(ls, r_s, '\t')) &&
                   static_cast<bool>(std::getline(ls, n_s, '\t')) &&
                   static_cast<bool>(std::getline(ls, p_s, '\t')) &&
                   static_cast<bool>(std::getline(ls, sig_s, '\t')) &&
                   static_cast<bool>(std::getline(ls, eval_s, '\t')),
               "genes.tsv row malformed");
        ++rows;
        if (sig_s == "1") ++significant;
        if (eval_s == "1") {
            ++evaluable;
            const double r = std::stod(r_s);
            r_sum += r;
            r_max = std::max(r_max, r);
            r_min = std::min(r_min, r);
            auto b = static_cast<std::ptrdiff_t>(std::floor((r + 1.0) / 0.05));
            b = std::clamp<std::ptrdiff_t>(b, 0, kHistogramBins - 1);
            ++bins[static_cast<std::size_t>(b)];
        }
    }
    expect(rows == g_count, "genes.tsv row count mismatch");

    const json j = read_json_file(dir / "report.json");
    expect(j.at("gene_count").get<std::size_t>() == rows, "gene_count mismatch");
    expect(j.at("evaluable_count").get<std::size_t>() == evaluable, "evaluable_count mismatch");
    expect(j.at("non_evaluable_count").get<std::size_t>() == rows - evaluable,
           "non_evaluable_count mismatch");
    expect(j.at("significant_count").get<std::size_t>() == significant,
           "significant_count mismatch");
    expect(loss_from_json(j.at("r_max")) == r_max, "r_max does not reconcile");
    expect(loss_from_json(j.at("r_min")) == r_min, "r_min does not reconcile");
    expect(loss_from_json(j.at("r_mean")) == r_sum / static_cast<double>(evaluable),
           "r_mean does not reconcile");

    std::ifstream hist(dir / "hist.tsv");
    expect(hist.good(), "hist.tsv missing");
    expect(static_cast<bool>(std::getline(hist, line)) && line == "bin_lo\tbin_hi\tcount",
           "hist.tsv header malformed");
    std::size_t row = 0, total = 0;
    while (std::getline(hist, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        double lo, hi;
        std::size_t count;
        ls >> lo >> hi >> count;
        expect(row < kHistogramBins, "too many histogram rows");
        expect(count == bins[row], "histogram bin " + std::to_string(row) +
                                       " does not match the per-gene table");
        total += count;
        ++row;
    }
    expect(row == kHistogramBins, "histogram row count mismatch");
    expect(total == evaluable, "histogram mass does not equal the evaluable count");

    std::ostringstream os;
    os << rows << " genes, " << evaluable << " evaluable, " << significant
       << " significant; counts, extrema, mean, and 40 bins all reconcile";
    return os.str();
}

}  // namespace

int main(int argc, char** argv) {
    const std::string cli = argc > 1 ? argv[1] : "";
    int failures = 0;

    const auto gate = [&](int num, const std::string& desc,
                          const std::function<std::string()>& fn) {
        const auto t0 = std::chrono::steady_clock::now();
        bool ok = true;
        std::string detail;
        try {
            detail = fn();
        } catch (const std::exception& e) {
            ok = false;
            detail = e.what();
        }
        std::printf("[%s] criterion %d: %s - %s (%.1fs)\n", ok ? "PASS" : "FAIL", num,
                    desc.c_str(), detail.c_str(), seconds_since(t0));
        std::fflush(stdout);
        if (!ok) ++failures;
    };

    gate(1, "full-model finite-difference gradient check", gradient_integrity);
    gate(2, "correlation and step-down correction vs brute-force oracles", stats_oracles);
    gate(3, "p-value reference point and monotonicity", pvalue_reference);
    gate(4, "family-wise error calibration on seeded nulls", fwer_calibration);
    gate(5, "planted-gene recovery through the full pipeline", planted_recovery);
    gate(6, "cross-process and cross-thread determinism via the CLI",
         [&] { return cli_determinism(cli); });
    gate(7, "resampling, median filtering, and z-score contracts", preprocessing_contracts);
    gate(8, "report aggregates reconcile with the per-gene table", report_fidelity);

    if (failures) {
        std::printf("%d criterion(s) failed\n", failures);
        return 1;
    }
    std::printf("all 8 criteria passed\n");
    return 0;
}
