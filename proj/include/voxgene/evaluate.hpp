#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "voxgene/error.hpp"
#include "voxgene/io.hpp"
#include "voxgene/model.hpp"
#include "voxgene/parallel.hpp"
#include "voxgene/pipeline.hpp"
#include "voxgene/rng.hpp"
#include "voxgene/stats.hpp"
#include "voxgene/tensor.hpp"

namespace voxgene {

struct EvalConfig {
    double alpha = 0.05;
    std::size_t permutation_fallback_n = 8;  // permutation p-values when n < this
    std::size_t permutations = 10000;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(alpha > 0.0 && alpha < 1.0)) throw config_error("alpha must be in (0,1)");
        if (permutations < 1) throw config_error("permutations must be >= 1");
    }

    json to_json() const {
        return json{{"alpha", alpha},
                    {"permutation_fallback_n", permutation_fallback_n},
                    {"permutations", permutations},
                    {"seed", seed}};
    }
};

struct GeneAssociation {
    std::string gene_id;
    bool evaluable = false;
    double r = std::numeric_limits<double>::quiet_NaN();
    std::size_t n = 0;
    double p = std::numeric_limits<double>::quiet_NaN();
    bool hs_significant = false;
    bool exact_extreme = false;  // |r| = 1, p = 0 by convention
    std::string note;            // reason when non-evaluable
};

struct GeneSignificanceReport {
    double alpha = 0.05;
    std::string split = "test";
    std::size_t n_patients = 0;
    std::vector<GeneAssociation> genes;
    std::size_t evaluable_count = 0;
    std::size_t significant_count = 0;
    double r_max = std::numeric_limits<double>::quiet_NaN();
    double r_min = std::numeric_limits<double>::quiet_NaN();
    double r_mean = std::numeric_limits<double>::quiet_NaN();
    std::string checkpoint_digest;
    std::string cohort_digest;
    std::size_t permutation_fallback_n = 8;
    std::size_t permutations = 10000;
    std::uint64_t seed = 0;
};

namespace detail {

inline bool has_variance(std::span<const double> v) {
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] != v[0]) return true;
    return false;
}

}  // namespace detail

// Per-gene Pearson + p-value across patients, Holm-Sidak over the evaluable
// genes. Rows are patients, one prediction/target vector per patient, in
// matched order. Per-gene work is independent (seeded per-gene permutation
// substreams), so any worker count gives identical results.
inline GeneSignificanceReport evaluate_associations(
    const std::vector<std::vector<double>>& predictions,
    const std::vector<std::vector<double>>& targets, const std::vector<std::string>& gene_ids,
    const EvalConfig& cfg) {
    cfg.validate();
    const std::size_t n = predictions.size();
    if (n < 3)
        throw input_error("test split has " + std::to_string(n) + " patients, need at least 3");
    if (targets.size() != n)
        throw input_error("prediction/target patient counts differ");
    const std::size_t g_count = gene_ids.size();
    for (const auto& row : predictions)
        if (row.size() != g_count) throw dimension_error("prediction row length mismatch");
    for (const auto& row : targets)
        if (row.size() != g_count) throw dimension_error("target row length mismatch");

    GeneSignificanceReport report;
    report.alpha = cfg.alpha;
    report.n_patients = n;
    report.permutation_fallback_n = cfg.permutation_fallback_n;
    report.permutations = cfg.permutations;
    report.seed = cfg.seed;
    report.genes.assign(g_count, {});

    const Rng perm_root = Rng(cfg.seed).substream("perm");
    parallel_for(0, g_count, [&](std::size_t lo, std::size_t hi) {
        std::vector<double> x(n), y(n);
        for (std::size_t g = lo; g < hi; ++g) {
            for (std::size_t i = 0; i < n; ++i) {
                x[i] = predictions[i][g];
                y[i] = targets[i][g];
            }
            GeneAssociation& a = report.genes[g];
            a.gene_id = gene_ids[g];
            a.n = n;
            if (!detail::has_variance(x)) {
                a.note = "zero prediction variance";
                continue;
            }
            if (!detail::has_variance(y)) {
                a.note = "zero target variance";
                continue;
            }
            a.evaluable = true;
            a.r = pearson(x, y);
            if (a.r == 1.0 || a.r == -1.0) {
                a.p = 0.0;
                a.exact_extreme = true;
            } else if (n < cfg.permutation_fallback_n) {
                a.p = permutation_pvalue(x, y, cfg.permutations,
                                         perm_root.substream(a.gene_id));
            } else {
                a.p = pearson_pvalue(a.r, n);
            }
        }
    });

    std::vector<double> ps;
    std::vector<std::size_t> idx;
    for (std::size_t g = 0; g < g_count; ++g)
        if (report.genes[g].evaluable) {
            ps.push_back(report.genes[g].p);
            idx.push_back(g);
        }
    report.evaluable_count = ps.size();
    if (!ps.empty()) {
        const auto flags = holm_sidak(ps, cfg.alpha);
        for (std::size_t k = 0; k < idx.size(); ++k)
            report.genes[idx[k]].hs_significant = flags[k];
        double rmin = report.genes[idx[0]].r, rmax = rmin, rsum = 0.0;
        for (std::size_t k = 0; k < idx.size(); ++k) {
            const double r = report.genes[idx[k]].r;
            rmin = std::min(rmin, r);
            rmax = std::max(rmax, r);
            rsum += r;
            if (report.genes[idx[k]].hs_significant) ++report.significant_count;
        }
        report.r_min = rmin;
        report.r_max = rmax;
        report.r_mean = rsum / static_cast<double>(idx.size());
    }
    return report;
}

// Evaluates a trained checkpoint on a cohort's test split. Targets go through
// the checkpoint's train-fitted log1p/standardize transform; predictions come
// from eval-mode forward passes. `oracle_predictions` substitutes the targets
// as predictions (plumbing check: every evaluable gene must then reach r=1).
inline GeneSignificanceReport evaluate_cohort(const Checkpoint& ck, const CohortBuild& cohort,
                                              const EvalConfig& cfg,
                                              bool oracle_predictions = false) {
    cfg.validate();
    if (cohort.gene_ids != ck.gene_ids)
        throw input_error("checkpoint gene set does not match cohort gene set");
    std::unordered_set<std::string> seen;
    for (std::size_t i = 0; i < cohort.records.size(); ++i) {
        if (!seen.insert(cohort.records[i].patient_id).second)
            throw input_error("patient '" + cohort.records[i].patient_id +
                              "' appears in more than one split (leakage)");
        const std::string& s = cohort.splits[i];
        if (s != "train" && s != "val" && s != "test")
            throw input_error("unknown split label '" + s + "'");
    }

    std::vector<std::size_t> test_idx;
    for (std::size_t i = 0; i < cohort.records.size(); ++i)
        if (cohort.splits[i] == "test") test_idx.push_back(i);
    if (test_idx.size() < 3)
        throw input_error("test split has " + std::to_string(test_idx.size()) +
                          " patients, need at least 3");

    std::vector<std::vector<double>> targets;
    targets.reserve(test_idx.size());
    for (std::size_t i : test_idx)
        targets.push_back(ck.transform.apply(cohort.records[i].targets));

    std::vector<std::vector<double>> predictions;
    predictions.reserve(test_idx.size());
    if (oracle_predictions) {
        predictions = targets;
    } else {
        const EncoderModel model = model_from_checkpoint(ck);
        Rng unused(0);
        for (std::size_t i : test_idx) {
            std::vector<Tensor> slices;
            for (const auto& s : cohort.records[i].slices)
                slices.emplace_back(Shape{1, ck.config.input_size, ck.config.input_size}, s);
            Tape tape;
            const Tensor pred = model.forward_patient(tape, slices, /*train=*/false, unused);
            predictions.push_back(pred.values());
        }
    }

    GeneSignificanceReport report =
        evaluate_associations(predictions, targets, cohort.gene_ids, cfg);
    report.checkpoint_digest = ck.digest();
    report.cohort_digest = cohort.digest;
    return report;
}

// ---- report files ----

inline constexpr std::size_t kHistogramBins = 40;  // width 0.05 over [-1, 1]

inline std::vector<std::size_t> report_histogram(const GeneSignificanceReport& report) {
    std::vector<std::size_t> bins(kHistogramBins, 0);
    for (const auto& a : report.genes) {
        if (!a.evaluable) continue;
        auto b = static_cast<std::ptrdiff_t>(std::floor((a.r + 1.0) / 0.05));
        b = std::clamp<std::ptrdiff_t>(b, 0, kHistogramBins - 1);
        ++bins[static_cast<std::size_t>(b)];
    }
    return bins;
}

inline std::string report_digest(const GeneSignificanceReport& report);

inline void write_report(const std::filesystem::path& dir, const GeneSignificanceReport& report,
                         const json& config_echo) {
    std::filesystem::create_directories(dir);
    {
        std::ostringstream os;
        os.precision(17);
        os << "gene_id\tr\tn\tp\ths_significant\tevaluable\tnote\n";
        for (const auto& a : report.genes)
            os << a.gene_id << "\t" << a.r << "\t" << a.n << "\t" << a.p << "\t"
               << (a.hs_significant ? 1 : 0) << "\t" << (a.evaluable ? 1 : 0) << "\t" << a.note
               << "\n";
        write_text_file(dir / "genes.tsv", os.str());
    }
    {
        const auto bins = report_histogram(report);
        std::ostringstream os;
        os << "bin_lo\tbin_hi\tcount\n" << std::fixed << std::setprecision(2);
        for (std::size_t b = 0; b < bins.size(); ++b)
            os << (-1.0 + 0.05 * static_cast<double>(b)) << "\t"
               << (-1.0 + 0.05 * static_cast<double>(b + 1)) << "\t" << bins[b] << "\n";
        write_text_file(dir / "hist.tsv", os.str());
    }
    json j;
    j["format"] = "voxgene-report-v1";
    j["alpha"] = report.alpha;
    j["split"] = report.split;
    j["n_patients"] = report.n_patients;
    j["gene_count"] = report.genes.size();
    j["evaluable_count"] = report.evaluable_count;
    j["non_evaluable_count"] = report.genes.size() - report.evaluable_count;
    j["significant_count"] = report.significant_count;
    j["r_max"] = loss_to_json(report.r_max);
    j["r_min"] = loss_to_json(report.r_min);
    j["r_mean"] = loss_to_json(report.r_mean);
    j["checkpoint_digest"] = report.checkpoint_digest;
    j["cohort_digest"] = report.cohort_digest;
    j["permutation_fallback_n"] = report.permutation_fallback_n;
    j["permutations"] = report.permutations;
    j["seed"] = report.seed;
    j["genes_file"] = "genes.tsv";
    j["histogram_file"] = "hist.tsv";
    j["config"] = config_echo;
    j["report_digest"] = report_digest(report);
    write_json_file(dir / "report.json", j);
}

inline std::string report_digest(const GeneSignificanceReport& report) {
    Digest d;
    d.update_double(report.alpha);
    d.update_u64(report.n_patients);
    d.update_u64(report.evaluable_count);
    d.update_u64(report.significant_count);
    for (const auto& a : report.genes) {
        d.update(a.gene_id);
        d.update_double(a.r);
        d.update_double(a.p);
        d.update_u64(a.hs_significant ? 1 : 0);
        d.update_u64(a.evaluable ? 1 : 0);
    }
    d.update(report.checkpoint_digest);
    d.update(report.cohort_digest);
    return d.hex();
}

inline GeneSignificanceReport load_report(const std::filesystem::path& report_json) {
    const json j = read_json_file(report_json);
    if (!j.contains("format") || j["format"] != "voxgene-report-v1")
        throw input_error("not a report file: " + report_json.string());
    GeneSignificanceReport r;
    r.alpha = j.at("alpha").get<double>();
    r.split = j.at("split").get<std::string>();
    r.n_patients = j.at("n_patients").get<std::size_t>();
    r.evaluable_count = j.at("evaluable_count").get<std::size_t>();
    r.significant_count = j.at("significant_count").get<std::size_t>();
    r.r_max = loss_from_json(j.at("r_max"));
    r.r_min = loss_from_json(j.at("r_min"));
    r.r_mean = loss_from_json(j.at("r_mean"));
    r.checkpoint_digest = j.at("checkpoint_digest").get<std::string>();
    r.cohort_digest = j.at("cohort_digest").get<std::string>();
    r.permutation_fallback_n = j.at("permutation_fallback_n").get<std::size_t>();
    r.permutations = j.at("permutations").get<std::size_t>();
    r.seed = j.at("seed").get<std::uint64_t>();

    const auto genes_path = report_json.parent_path() / j.at("genes_file").get<std::string>();
    std::ifstream in(genes_path);
    if (!in) throw input_error("cannot open per-gene table: " + genes_path.string());
    std::string line;
    if (!std::getline(in, line) || line.rfind("gene_id\t", 0) != 0)
        throw input_error("malformed per-gene table header: " + genes_path.string());
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        GeneAssociation a;
        std::string r_s, n_s, p_s, sig_s, eval_s;
        if (!std::getline(ls, a.gene_id, '\t') || !std::getline(ls, r_s, '\t') ||
            !std::getline(ls, n_s, '\t') || !std::getline(ls, p_s, '\t') ||
            !std::getline(ls, sig_s, '\t') || !std::getline(ls, eval_s, '\t'))
            throw input_error("malformed per-gene row in " + genes_path.string());
        std::getline(ls, a.note, '\t');
        a.r = std::stod(r_s);
        a.n = std::stoul(n_s);
        a.p = std::stod(p_s);
        a.hs_significant = sig_s == "1";
        a.evaluable = eval_s == "1";
        r.genes.push_back(std::move(a));
    }
    return r;
}

// ---- report comparison ----

struct ReportComparison {
    std::size_t gene_count = 0;
    double max_abs_delta_r = 0.0;   // over genes evaluable in both
    double mean_delta_r = 0.0;      // b minus a
    std::ptrdiff_t significant_count_delta = 0;
    std::size_t intersection = 0;
    std::size_t only_a = 0;
    std::size_t only_b = 0;
};

inline ReportComparison compare_reports(const GeneSignificanceReport& a,
                                        const GeneSignificanceReport& b) {
    std::set<std::string> ga, gb;
    for (const auto& x : a.genes) ga.insert(x.gene_id);
    for (const auto& x : b.genes) gb.insert(x.gene_id);
    if (ga != gb) {
        std::vector<std::string> diff;
        std::set_symmetric_difference(ga.begin(), ga.end(), gb.begin(), gb.end(),
                                      std::back_inserter(diff));
        throw input_error("gene sets differ: symmetric difference of size " +
                          std::to_string(diff.size()));
    }
    std::map<std::string, const GeneAssociation*> bmap;
    for (const auto& x : b.genes) bmap[x.gene_id] = &x;
    ReportComparison cmp;
    cmp.gene_count = a.genes.size();
    std::size_t both = 0;
    for (const auto& x : a.genes) {
        const GeneAssociation* y = bmap.at(x.gene_id);
        if (x.hs_significant && y->hs_significant) ++cmp.intersection;
        if (x.hs_significant && !y->hs_significant) ++cmp.only_a;
        if (!x.hs_significant && y->hs_significant) ++cmp.only_b;
        if (x.evaluable && y->evaluable) {
            const double d = y->r - x.r;
            cmp.max_abs_delta_r = std::max(cmp.max_abs_delta_r, std::abs(d));
            cmp.mean_delta_r += d;
            ++both;
        }
    }
    if (both) cmp.mean_delta_r /= static_cast<double>(both);
    cmp.significant_count_delta = static_cast<std::ptrdiff_t>(b.significant_count) -
                                  static_cast<std::ptrdiff_t>(a.significant_count);
    return cmp;
}

}  // namespace voxgene
