#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "voxgene/digest.hpp"
#include "voxgene/error.hpp"
#include "voxgene/io.hpp"
#include "voxgene/rng.hpp"
#include "voxgene/volume.hpp"

namespace voxgene {

struct PlantSpec {
    std::size_t latent_dim = 2;
    std::size_t planted_genes = 50;
    std::size_t null_genes = 450;
    double noise_std = 0.5;
    std::size_t n_patients = 120;
    std::size_t volume_size = 64;  // cubic volumes
    double spacing = 1.0;          // isotropic, mm per voxel
    // Lesion contrast spans a wide multiplicative range over a quiet noise
    // floor: after per-volume z-scoring only the contrast ratio survives, and
    // peak intensity has to stay readable at every lesion size.
    double radius_min = 6.0;
    double radius_max = 16.0;
    double intensity_min = 1.0;
    double intensity_max = 8.0;
    double background_noise = 0.05;
    // Added inside expm1 for planted and null genes alike, keeping expression
    // effectively positive so log1p stays linear in the latents and the
    // across-patient median clears the zero-median filter.
    double baseline = 4.0;
    std::string modality = "MRI";
    std::uint64_t seed = 0;

    std::size_t total_genes() const { return planted_genes + null_genes; }

    void validate() const {
        if (latent_dim < 1) throw config_error("latent_dim must be >= 1");
        if (total_genes() < 1) throw config_error("at least one gene required");
        if (!(noise_std >= 0.0)) throw config_error("noise_std must be >= 0");
        if (volume_size < 4) throw config_error("volume_size must be >= 4");
        if (!(spacing > 0.0)) throw config_error("spacing must be positive");
        if (!(radius_min > 0.0) || radius_max < radius_min)
            throw config_error("radius range must satisfy 0 < min <= max");
        if (intensity_max < intensity_min) throw config_error("intensity range inverted");
        if (!(background_noise >= 0.0)) throw config_error("background_noise must be >= 0");
        if (2.0 * radius_max >= static_cast<double>(volume_size - 1))
            throw config_error("radius_max " + std::to_string(radius_max) +
                               " cannot fit inside a " + std::to_string(volume_size) +
                               "^3 volume");
    }

    json to_json() const {
        return json{{"latent_dim", latent_dim},
                    {"planted_genes", planted_genes},
                    {"null_genes", null_genes},
                    {"noise_std", noise_std},
                    {"n_patients", n_patients},
                    {"volume_size", volume_size},
                    {"spacing", spacing},
                    {"radius_min", radius_min},
                    {"radius_max", radius_max},
                    {"intensity_min", intensity_min},
                    {"intensity_max", intensity_max},
                    {"background_noise", background_noise},
                    {"baseline", baseline},
                    {"modality", modality},
                    {"seed", seed}};
    }
};

struct GroundTruth {
    std::vector<std::string> patient_ids;
    std::vector<std::vector<double>> latents;  // per patient, length L
    std::vector<std::string> gene_ids;
    std::vector<bool> planted;                    // per gene
    std::vector<std::vector<double>> weights;     // one unit-norm row per planted gene
};

namespace detail {

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z * 0.70710678118654752440); }

inline std::string zero_padded(std::size_t v, int width) {
    std::string s = std::to_string(v);
    while (static_cast<int>(s.size()) < width) s.insert(s.begin(), '0');
    return s;
}

}  // namespace detail

inline std::string synth_patient_id(std::size_t i) {
    return "P" + detail::zero_padded(i + 1, 4);
}

inline std::string synth_gene_id(std::size_t g) { return "G" + detail::zero_padded(g + 1, 4); }

// Unit-norm association rows, one per planted gene.
inline std::vector<std::vector<double>> sample_weights(const PlantSpec& spec) {
    Rng rng = Rng(spec.seed).substream("synth").substream("weights");
    std::vector<std::vector<double>> w(spec.planted_genes,
                                       std::vector<double>(spec.latent_dim));
    for (auto& row : w) {
        double norm = 0.0;
        do {
            norm = 0.0;
            for (auto& v : row) {
                v = rng.normal();
                norm += v * v;
            }
        } while (norm < 1e-12);
        norm = std::sqrt(norm);
        for (auto& v : row) v /= norm;
    }
    return w;
}

struct SynthPatient {
    std::string patient_id;
    std::vector<double> z;           // latent vector
    std::vector<double> expression;  // per gene, planted genes first
    Volume volume;                   // empty when generated without imaging
    TumorMask mask;
};

// One patient from its own substream. Draw order is fixed: latents, lesion
// position (with bounded retries), per-gene noise, then background voxels, so
// truth and expression can be regenerated without rendering the volume.
inline SynthPatient sample_patient(const PlantSpec& spec,
                                   const std::vector<std::vector<double>>& weights,
                                   std::size_t patient_index, bool with_volume = true) {
    const std::string pid = synth_patient_id(patient_index);
    Rng rng = Rng(spec.seed).substream("synth").substream(pid);

    SynthPatient out;
    out.patient_id = pid;
    out.z.resize(spec.latent_dim);
    for (auto& v : out.z) v = rng.normal();

    const std::size_t n = spec.volume_size;
    const double mid = 0.5 * static_cast<double>(n - 1);
    const double radius =
        spec.radius_min + (spec.radius_max - spec.radius_min) * detail::normal_cdf(out.z[0]);
    const double intensity =
        spec.intensity_min +
        (spec.intensity_max - spec.intensity_min) *
            detail::normal_cdf(spec.latent_dim >= 2 ? out.z[1] : 0.0);

    // latents beyond the first two jitter the lesion center
    const double jitter_scale = static_cast<double>(n) / 16.0;
    double center[3] = {mid, mid, mid};
    if (spec.latent_dim > 2) {
        bool placed = false;
        for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
            placed = true;
            for (std::size_t a = 0; a < 3 && 2 + a < spec.latent_dim; ++a) {
                if (attempt > 0) out.z[2 + a] = rng.normal();
                center[a] = mid + jitter_scale * out.z[2 + a];
                if (center[a] - radius < 0.0 ||
                    center[a] + radius > static_cast<double>(n - 1))
                    placed = false;
            }
        }
        if (!placed)
            throw numeric_error("lesion does not fit inside the volume after 100 position draws "
                                "for patient '" + pid + "'");
    }

    out.expression.resize(spec.total_genes());
    for (std::size_t g = 0; g < spec.total_genes(); ++g) {
        double arg = spec.baseline + spec.noise_std * rng.normal();
        if (g < spec.planted_genes)
            for (std::size_t l = 0; l < spec.latent_dim; ++l) arg += weights[g][l] * out.z[l];
        out.expression[g] = std::max(std::expm1(arg), 0.0);
    }

    if (!with_volume) return out;

    out.volume.nx = out.volume.ny = out.volume.nz = n;
    out.volume.sx = out.volume.sy = out.volume.sz = spec.spacing;
    out.volume.modality = spec.modality;
    out.volume.patient_id = pid;
    out.volume.voxels.resize(n * n * n);
    for (auto& v : out.volume.voxels) v = spec.background_noise * rng.normal();

    out.mask.nx = out.mask.ny = out.mask.nz = n;
    out.mask.patient_id = pid;
    out.mask.labels.assign(n * n * n, 0);

    // additive lesion with smooth quadratic falloff; mask marks d <= radius
    const auto lo = [&](double c) {
        return static_cast<std::size_t>(std::max(0.0, std::floor(c - radius)));
    };
    const auto hi = [&](double c) {
        return std::min(n - 1, static_cast<std::size_t>(std::ceil(c + radius)));
    };
    for (std::size_t z = lo(center[2]); z <= hi(center[2]); ++z)
        for (std::size_t y = lo(center[1]); y <= hi(center[1]); ++y)
            for (std::size_t x = lo(center[0]); x <= hi(center[0]); ++x) {
                const double dx = static_cast<double>(x) - center[0];
                const double dy = static_cast<double>(y) - center[1];
                const double dz = static_cast<double>(z) - center[2];
                const double d2 = dx * dx + dy * dy + dz * dz;
                if (d2 > radius * radius) continue;
                out.volume.at(x, y, z) += intensity * (1.0 - d2 / (radius * radius));
                out.mask.labels[(z * n + y) * n + x] = 1;
            }
    return out;
}

struct SynthCohort {
    PlantSpec spec;
    GroundTruth truth;
    ExpressionMatrix expression;
    std::string digest;  // covers expression, truth, and (via determinism) volumes
};

// Expression matrix and ground truth only; volumes are regenerated on demand
// through sample_patient, which replays the identical substreams.
inline SynthCohort synth_truth(const PlantSpec& spec) {
    spec.validate();
    if (spec.n_patients < 3)
        throw config_error("n_patients must be >= 3, got " + std::to_string(spec.n_patients));
    SynthCohort cohort;
    cohort.spec = spec;
    cohort.truth.weights = sample_weights(spec);
    for (std::size_t g = 0; g < spec.total_genes(); ++g) {
        cohort.truth.gene_ids.push_back(synth_gene_id(g));
        cohort.truth.planted.push_back(g < spec.planted_genes);
    }
    cohort.expression.gene_ids = cohort.truth.gene_ids;
    cohort.expression.values.assign(spec.total_genes() * spec.n_patients, 0.0);
    // patient ids are filled up front so at(g, p) sees the final row stride
    for (std::size_t p = 0; p < spec.n_patients; ++p)
        cohort.expression.patient_ids.push_back(synth_patient_id(p));
    for (std::size_t p = 0; p < spec.n_patients; ++p) {
        SynthPatient sp = sample_patient(spec, cohort.truth.weights, p, /*with_volume=*/false);
        cohort.truth.patient_ids.push_back(sp.patient_id);
        cohort.truth.latents.push_back(sp.z);
        for (std::size_t g = 0; g < spec.total_genes(); ++g)
            cohort.expression.at(g, p) = sp.expression[g];
    }
    Digest d;
    d.update(spec.to_json().dump());
    d.update(expression_digest(cohort.expression));
    for (const auto& row : cohort.truth.weights) d.update_doubles(row);
    for (const auto& z : cohort.truth.latents) d.update_doubles(z);
    cohort.digest = d.hex();
    return cohort;
}

inline json truth_to_json(const GroundTruth& t) {
    json patients = json::array();
    for (std::size_t p = 0; p < t.patient_ids.size(); ++p)
        patients.push_back(json{{"id", t.patient_ids[p]}, {"z", t.latents[p]}});
    json genes = json::array();
    for (std::size_t g = 0; g < t.gene_ids.size(); ++g)
        genes.push_back(json{{"id", t.gene_ids[g]}, {"planted", static_cast<bool>(t.planted[g])}});
    return json{{"format", "voxgene-truth-v1"},
                {"patients", patients},
                {"genes", genes},
                {"weights", t.weights}};
}

inline GroundTruth truth_from_json(const json& j) {
    if (!j.contains("format") || j["format"] != "voxgene-truth-v1")
        throw input_error("not a ground-truth file");
    GroundTruth t;
    for (const auto& p : j.at("patients")) {
        t.patient_ids.push_back(p.at("id").get<std::string>());
        t.latents.push_back(p.at("z").get<std::vector<double>>());
    }
    for (const auto& g : j.at("genes")) {
        t.gene_ids.push_back(g.at("id").get<std::string>());
        t.planted.push_back(g.at("planted").get<bool>());
    }
    t.weights = j.at("weights").get<std::vector<std::vector<double>>>();
    return t;
}

// Writes the full cohort in the preprocessing input layout: volumes/, masks/,
// expression.tsv, truth.json, synth.json. Returns the cohort digest.
inline std::string generate_cohort(const PlantSpec& spec, const std::filesystem::path& out_dir) {
    const SynthCohort cohort = synth_truth(spec);
    std::filesystem::create_directories(out_dir / "volumes");
    std::filesystem::create_directories(out_dir / "masks");
    for (std::size_t p = 0; p < spec.n_patients; ++p) {
        SynthPatient sp = sample_patient(spec, cohort.truth.weights, p);
        save_volume(out_dir / "volumes" / ("vol_" + sp.patient_id + ".json"), sp.volume);
        save_mask(out_dir / "masks" / ("mask_" + sp.patient_id + ".json"), sp.mask);
    }
    save_expression(out_dir / "expression.tsv", cohort.expression);
    write_json_file(out_dir / "truth.json", truth_to_json(cohort.truth));
    json manifest;
    manifest["format"] = "voxgene-synth-v1";
    manifest["spec"] = spec.to_json();
    manifest["n_patients"] = spec.n_patients;
    manifest["gene_count"] = spec.total_genes();
    manifest["digest"] = cohort.digest;
    write_json_file(out_dir / "synth.json", manifest);
    return cohort.digest;
}

}  // namespace voxgene
