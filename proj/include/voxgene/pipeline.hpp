#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "voxgene/digest.hpp"
#include "voxgene/error.hpp"
#include "voxgene/io.hpp"
#include "voxgene/rng.hpp"
#include "voxgene/volume.hpp"

namespace voxgene {

struct PipelineConfig {
    std::size_t target_size = 64;           // slices are cropped/padded to H x H
    std::size_t min_tumor_voxels = 10;      // per axial slice
    std::size_t max_slices_per_patient = 2; // keep the largest tumor cross-sections
    double train_fraction = 0.6;
    double val_fraction = 0.2;              // test split takes the remainder
    std::uint64_t seed = 0;

    void validate() const {
        if (target_size < 1) throw config_error("target_size must be >= 1");
        if (max_slices_per_patient < 1)
            throw config_error("max_slices_per_patient must be >= 1");
        if (!(train_fraction > 0.0) || !(val_fraction > 0.0) ||
            !(train_fraction + val_fraction < 1.0))
            throw config_error("split fractions must be positive with train+val < 1");
    }

    json to_json() const {
        return json{{"target_size", target_size},
                    {"min_tumor_voxels", min_tumor_voxels},
                    {"max_slices_per_patient", max_slices_per_patient},
                    {"train_fraction", train_fraction},
                    {"val_fraction", val_fraction},
                    {"seed", seed}};
    }
};

// ---- resampling ----

namespace detail {

struct AxisGrid {
    std::size_t n_out;
    double spacing;
};

inline std::size_t resampled_extent(std::size_t n_in, double spacing) {
    // output samples sit at 0,1,2,... mm across the same physical extent
    return static_cast<std::size_t>(std::floor(static_cast<double>(n_in - 1) * spacing)) + 1;
}

// source coordinate of output sample i, in input voxel units, clamped
inline double source_coord(std::size_t i, double spacing, std::size_t n_in) {
    const double u = static_cast<double>(i) / spacing;
    const double hi = static_cast<double>(n_in - 1);
    return u < 0.0 ? 0.0 : (u > hi ? hi : u);
}

}  // namespace detail

// Trilinear interpolation onto a 1 mm isotropic grid covering the physical
// extent of the input. Already-isotropic input is returned voxelwise
// unchanged. A single-voxel axis carries no gradient, so it is extended as a
// constant (with a warning when its spacing is not 1).
inline Volume resample_to_1mm(const Volume& v, std::vector<std::string>* warnings = nullptr) {
    v.validate();
    if (v.sx == 1.0 && v.sy == 1.0 && v.sz == 1.0) return v;
    for (auto [n, s, axis] : {std::tuple{v.nx, v.sx, 'x'}, std::tuple{v.ny, v.sy, 'y'},
                              std::tuple{v.nz, v.sz, 'z'}}) {
        if (n == 1 && s != 1.0 && warnings)
            warnings->push_back("patient '" + v.patient_id + "': single-voxel " + axis +
                                " axis with spacing " + std::to_string(s) +
                                ", extended as constant");
    }
    Volume out;
    out.nx = detail::resampled_extent(v.nx, v.sx);
    out.ny = detail::resampled_extent(v.ny, v.sy);
    out.nz = detail::resampled_extent(v.nz, v.sz);
    out.sx = out.sy = out.sz = 1.0;
    out.modality = v.modality;
    out.patient_id = v.patient_id;
    out.voxels.resize(out.count());
    for (std::size_t k = 0; k < out.nz; ++k) {
        const double w = detail::source_coord(k, v.sz, v.nz);
        const std::size_t z0 = static_cast<std::size_t>(w);
        const std::size_t z1 = std::min(z0 + 1, v.nz - 1);
        const double fz = w - static_cast<double>(z0);
        for (std::size_t j = 0; j < out.ny; ++j) {
            const double u = detail::source_coord(j, v.sy, v.ny);
            const std::size_t y0 = static_cast<std::size_t>(u);
            const std::size_t y1 = std::min(y0 + 1, v.ny - 1);
            const double fy = u - static_cast<double>(y0);
            for (std::size_t i = 0; i < out.nx; ++i) {
                const double t = detail::source_coord(i, v.sx, v.nx);
                const std::size_t x0 = static_cast<std::size_t>(t);
                const std::size_t x1 = std::min(x0 + 1, v.nx - 1);
                const double fx = t - static_cast<double>(x0);
                const double c00 = v.at(x0, y0, z0) * (1.0 - fx) + v.at(x1, y0, z0) * fx;
                const double c10 = v.at(x0, y1, z0) * (1.0 - fx) + v.at(x1, y1, z0) * fx;
                const double c01 = v.at(x0, y0, z1) * (1.0 - fx) + v.at(x1, y0, z1) * fx;
                const double c11 = v.at(x0, y1, z1) * (1.0 - fx) + v.at(x1, y1, z1) * fx;
                const double c0 = c00 * (1.0 - fy) + c10 * fy;
                const double c1 = c01 * (1.0 - fy) + c11 * fy;
                out.at(i, j, k) = c0 * (1.0 - fz) + c1 * fz;
            }
        }
    }
    return out;
}

// Nearest-neighbor resampling keeps the mask binary.
inline TumorMask resample_mask_to_1mm(const TumorMask& m, double sx, double sy, double sz) {
    if (sx == 1.0 && sy == 1.0 && sz == 1.0) return m;
    TumorMask out;
    out.nx = detail::resampled_extent(m.nx, sx);
    out.ny = detail::resampled_extent(m.ny, sy);
    out.nz = detail::resampled_extent(m.nz, sz);
    out.patient_id = m.patient_id;
    out.labels.resize(out.count());
    for (std::size_t k = 0; k < out.nz; ++k) {
        const auto z = static_cast<std::size_t>(
            std::llround(detail::source_coord(k, sz, m.nz)));
        for (std::size_t j = 0; j < out.ny; ++j) {
            const auto y = static_cast<std::size_t>(
                std::llround(detail::source_coord(j, sy, m.ny)));
            for (std::size_t i = 0; i < out.nx; ++i) {
                const auto x = static_cast<std::size_t>(
                    std::llround(detail::source_coord(i, sx, m.nx)));
                out.labels[(k * out.ny + j) * out.nx + i] = m.at(x, y, z);
            }
        }
    }
    return out;
}

// ---- intensity normalization ----

// Z-score over all voxels with the population standard deviation.
inline Volume normalize_intensity(const Volume& v) {
    v.validate();
    const double n = static_cast<double>(v.count());
    double mean = 0.0;
    for (double x : v.voxels) mean += x;
    mean /= n;
    double var = 0.0;
    for (double x : v.voxels) {
        const double c = x - mean;
        var += c * c;
    }
    var /= n;
    if (!(var > 0.0))
        throw numeric_error("zero intensity variance (constant volume) for patient '" +
                            v.patient_id + "'");
    const double inv = 1.0 / std::sqrt(var);
    Volume out = v;
    for (double& x : out.voxels) x = (x - mean) * inv;
    return out;
}

// ---- slice selection ----

inline std::size_t tumor_voxels_in_slice(const TumorMask& m, std::size_t z) {
    std::size_t count = 0;
    for (std::size_t y = 0; y < m.ny; ++y)
        for (std::size_t x = 0; x < m.nx; ++x)
            if (m.at(x, y, z) != 0) ++count;
    return count;
}

// Ascending axial slice indices with at least min_tumor_voxels mask hits.
inline std::vector<std::size_t> select_tumor_slices(const Volume& v, const TumorMask& m,
                                                    std::size_t min_tumor_voxels) {
    m.validate_against(v);
    std::vector<std::size_t> out;
    for (std::size_t z = 0; z < m.nz; ++z)
        if (tumor_voxels_in_slice(m, z) >= min_tumor_voxels) out.push_back(z);
    return out;
}

// ---- gene filtering ----

// Median with the even-length convention: mean of the two middle order
// statistics, so [0,0,1,2] -> 0.5.
inline double median_of(std::vector<double> v) {
    if (v.empty()) throw input_error("median of an empty sample");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    if (n % 2 == 1) return v[n / 2];
    return 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Keeps exactly the genes whose across-patient median is > 0, in order.
inline ExpressionMatrix filter_median_zero(const ExpressionMatrix& em) {
    if (em.patients() < 1) throw input_error("expression matrix has no patients");
    ExpressionMatrix out;
    out.patient_ids = em.patient_ids;
    for (std::size_t g = 0; g < em.genes(); ++g) {
        if (median_of(em.gene_row(g)) > 0.0) {
            out.gene_ids.push_back(em.gene_ids[g]);
            const auto row = em.gene_row(g);
            out.values.insert(out.values.end(), row.begin(), row.end());
        }
    }
    return out;
}

// ---- slice extraction ----

// Axial slice z as a row-major [ny x nx] array (rows along y).
inline std::vector<double> extract_axial_slice(const Volume& v, std::size_t z) {
    if (z >= v.nz) throw input_error("slice index out of range");
    std::vector<double> out(v.ny * v.nx);
    for (std::size_t y = 0; y < v.ny; ++y)
        for (std::size_t x = 0; x < v.nx; ++x) out[y * v.nx + x] = v.at(x, y, z);
    return out;
}

// Center crop or zero-pad a [rows x cols] slice to [target x target].
inline std::vector<double> crop_pad_center(const std::vector<double>& slice, std::size_t rows,
                                           std::size_t cols, std::size_t target) {
    if (slice.size() != rows * cols) throw dimension_error("slice size does not match dims");
    std::vector<double> out(target * target, 0.0);
    // source window start (crop) or destination offset (pad), centered
    const auto span = [&](std::size_t n) {
        std::ptrdiff_t src0 = 0, dst0 = 0;
        if (n >= target) {
            src0 = static_cast<std::ptrdiff_t>((n - target) / 2);
        } else {
            dst0 = static_cast<std::ptrdiff_t>((target - n) / 2);
        }
        const std::size_t len = std::min(n, target);
        return std::tuple{src0, dst0, len};
    };
    const auto [sr, dr, nr] = span(rows);
    const auto [sc, dc, nc] = span(cols);
    for (std::size_t r = 0; r < nr; ++r)
        for (std::size_t c = 0; c < nc; ++c)
            out[(static_cast<std::size_t>(dr) + r) * target + static_cast<std::size_t>(dc) + c] =
                slice[(static_cast<std::size_t>(sr) + r) * cols + static_cast<std::size_t>(sc) + c];
    return out;
}

// ---- patient records and cohort assembly ----

struct PatientRecord {
    std::string patient_id;
    std::vector<std::size_t> slice_indices;
    std::vector<std::vector<double>> slices;  // each target_size * target_size
    std::vector<double> targets;              // filtered gene order
};

struct PatientOutcome {
    bool included = false;
    PatientRecord record;      // without targets; attached by build_cohort
    std::string exclusion_reason;
};

// Resample, normalize, pick tumor slices, crop/pad. Exclusions (constant
// volume, no qualifying slice) are reported, not thrown.
inline PatientOutcome preprocess_patient(const Volume& raw, const TumorMask& raw_mask,
                                         const PipelineConfig& cfg,
                                         std::vector<std::string>* warnings = nullptr) {
    raw_mask.validate_against(raw);
    PatientOutcome out;
    out.record.patient_id = raw.patient_id;
    const Volume resampled = resample_to_1mm(raw, warnings);
    const TumorMask mask = resample_mask_to_1mm(raw_mask, raw.sx, raw.sy, raw.sz);
    Volume norm;
    try {
        norm = normalize_intensity(resampled);
    } catch (const numeric_error&) {
        out.exclusion_reason = "zero intensity variance";
        return out;
    }
    std::vector<std::size_t> indices = select_tumor_slices(norm, mask, cfg.min_tumor_voxels);
    if (indices.empty()) {
        out.exclusion_reason = "no slice with >= " + std::to_string(cfg.min_tumor_voxels) +
                               " tumor voxels";
        return out;
    }
    if (indices.size() > cfg.max_slices_per_patient) {
        // keep the largest tumor cross-sections; ties resolved by lower index
        std::vector<std::pair<std::size_t, std::size_t>> by_area;  // (count, z)
        for (std::size_t z : indices) by_area.emplace_back(tumor_voxels_in_slice(mask, z), z);
        std::sort(by_area.begin(), by_area.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return a.second < b.second;
        });
        by_area.resize(cfg.max_slices_per_patient);
        indices.clear();
        for (const auto& [count, z] : by_area) indices.push_back(z);
        std::sort(indices.begin(), indices.end());
    }
    for (std::size_t z : indices)
        out.record.slices.push_back(
            crop_pad_center(extract_axial_slice(norm, z), norm.ny, norm.nx, cfg.target_size));
    out.record.slice_indices = std::move(indices);
    out.included = true;
    return out;
}

struct CohortBuild {
    std::vector<PatientRecord> records;            // sorted by patient id
    std::vector<std::string> splits;               // parallel to records: train/val/test
    std::vector<std::string> gene_ids;             // after median-zero filtering
    std::vector<std::pair<std::string, std::string>> exclusions;  // (id, reason)
    std::vector<std::string> warnings;
    std::string digest;
};

namespace detail {

inline std::string cohort_digest(const CohortBuild& b, std::size_t target_size) {
    Digest d;
    d.update_u64(target_size);
    for (const auto& g : b.gene_ids) d.update(g);
    for (std::size_t i = 0; i < b.records.size(); ++i) {
        const auto& r = b.records[i];
        d.update(r.patient_id);
        d.update(b.splits[i]);
        for (std::size_t z : r.slice_indices) d.update_u64(z);
        for (const auto& s : r.slices) d.update_doubles(s);
        d.update_doubles(r.targets);
    }
    return d.hex();
}

}  // namespace detail

// Seeded by-patient split: ids are shuffled once and partitioned by the
// configured fractions.
inline std::unordered_map<std::string, std::string> assign_splits(
    std::vector<std::string> ids, const PipelineConfig& cfg) {
    std::sort(ids.begin(), ids.end());
    Rng rng = Rng(cfg.seed).substream("split");
    rng.shuffle(ids);
    const std::size_t n = ids.size();
    const auto n_train = static_cast<std::size_t>(std::floor(cfg.train_fraction * n));
    const auto n_val = static_cast<std::size_t>(std::floor(cfg.val_fraction * n));
    std::unordered_map<std::string, std::string> out;
    for (std::size_t i = 0; i < n; ++i)
        out[ids[i]] = i < n_train ? "train" : (i < n_train + n_val ? "val" : "test");
    return out;
}

// Imaging is pulled through a loader so volumes live one at a time; the
// loader is invoked in sorted patient-id order.
struct PatientSource {
    std::string patient_id;
    std::function<std::pair<Volume, TumorMask>()> load;
};

// Pairs imaging with expression columns, preprocesses every matched patient,
// attaches median-filtered targets, and assigns seeded splits.
inline CohortBuild build_cohort(const std::vector<PatientSource>& sources,
                                const ExpressionMatrix& em, const PipelineConfig& cfg) {
    cfg.validate();
    em.validate();
    const ExpressionMatrix filtered = filter_median_zero(em);
    if (filtered.genes() == 0) throw input_error("no genes survive median-zero filtering");
    std::unordered_map<std::string, std::size_t> column;
    for (std::size_t p = 0; p < filtered.patients(); ++p) column[filtered.patient_ids[p]] = p;

    CohortBuild build;
    build.gene_ids = filtered.gene_ids;

    std::map<std::string, const PatientSource*> by_id;  // sorted iteration
    for (const auto& src : sources)
        if (!by_id.emplace(src.patient_id, &src).second)
            throw input_error("duplicate patient id '" + src.patient_id + "'");

    for (const auto& [id, src] : by_id) {
        const auto col = column.find(id);
        if (col == column.end()) {
            build.exclusions.emplace_back(id, "no expression column");
            continue;
        }
        const auto [volume, mask] = src->load();
        if (volume.patient_id != id || mask.patient_id != id)
            throw input_error("loaded imaging claims patient '" + volume.patient_id +
                              "', expected '" + id + "'");
        PatientOutcome outcome = preprocess_patient(volume, mask, cfg, &build.warnings);
        if (!outcome.included) {
            build.exclusions.emplace_back(id, outcome.exclusion_reason);
            continue;
        }
        outcome.record.targets = filtered.patient_column(col->second);
        build.records.push_back(std::move(outcome.record));
    }
    for (const auto& p : filtered.patient_ids)
        if (!by_id.count(p)) build.exclusions.emplace_back(p, "no imaging");
    std::sort(build.exclusions.begin(), build.exclusions.end());

    std::vector<std::string> ids;
    for (const auto& r : build.records) ids.push_back(r.patient_id);
    const auto split_of = assign_splits(ids, cfg);
    for (const auto& r : build.records) build.splits.push_back(split_of.at(r.patient_id));

    build.digest = detail::cohort_digest(build, cfg.target_size);
    return build;
}

// ---- cohort persistence ----

// cohort.json manifest plus one record sidecar + f64 slice blob per patient.
inline void write_cohort(const std::filesystem::path& dir, const CohortBuild& build,
                         const PipelineConfig& cfg) {
    std::filesystem::create_directories(dir / "records");
    json patients = json::array();
    for (std::size_t i = 0; i < build.records.size(); ++i) {
        const auto& r = build.records[i];
        const std::string stem = "rec_" + r.patient_id;
        const auto rec_path = dir / "records" / (stem + ".json");
        json rj;
        rj["format"] = "voxgene-record-v1";
        rj["patient_id"] = r.patient_id;
        rj["target_size"] = cfg.target_size;
        rj["slice_indices"] = r.slice_indices;
        rj["targets"] = r.targets;
        rj["blob"] = stem + ".bin";
        write_json_file(rec_path, rj);
        std::vector<double> blob;
        for (const auto& s : r.slices) blob.insert(blob.end(), s.begin(), s.end());
        write_blob(dir / "records" / (stem + ".bin"), blob);
        patients.push_back(json{{"id", r.patient_id},
                                {"split", build.splits[i]},
                                {"n_slices", r.slices.size()},
                                {"record", "records/" + stem + ".json"}});
    }
    json excluded = json::array();
    for (const auto& [id, reason] : build.exclusions)
        excluded.push_back(json{{"id", id}, {"reason", reason}});
    json j;
    j["format"] = "voxgene-cohort-v1";
    j["config"] = cfg.to_json();
    j["gene_count"] = build.gene_ids.size();
    j["gene_ids"] = build.gene_ids;
    j["patients"] = patients;
    j["excluded"] = excluded;
    j["warnings"] = build.warnings;
    j["notes"] = json::array({"CT intensities are z-scored without prior windowing"});
    j["digest"] = build.digest;
    write_json_file(dir / "cohort.json", j);
}

// Loads a cohort directory and verifies the manifest digest against the
// record contents.
inline CohortBuild load_cohort(const std::filesystem::path& dir, PipelineConfig* cfg_out = nullptr) {
    const json j = read_json_file(dir / "cohort.json");
    if (!j.contains("format") || j["format"] != "voxgene-cohort-v1")
        throw input_error("not a cohort manifest: " + (dir / "cohort.json").string());
    const auto& cj = j.at("config");
    PipelineConfig cfg;
    cfg.target_size = cj.at("target_size").get<std::size_t>();
    cfg.min_tumor_voxels = cj.at("min_tumor_voxels").get<std::size_t>();
    cfg.max_slices_per_patient = cj.at("max_slices_per_patient").get<std::size_t>();
    cfg.train_fraction = cj.at("train_fraction").get<double>();
    cfg.val_fraction = cj.at("val_fraction").get<double>();
    cfg.seed = cj.at("seed").get<std::uint64_t>();
    if (cfg_out) *cfg_out = cfg;

    CohortBuild build;
    build.gene_ids = j.at("gene_ids").get<std::vector<std::string>>();
    for (const auto& p : j.at("patients")) {
        const json rj = read_json_file(dir / p.at("record").get<std::string>());
        if (!rj.contains("format") || rj["format"] != "voxgene-record-v1")
            throw input_error("not a patient record: " + p.at("record").get<std::string>());
        PatientRecord r;
        r.patient_id = rj.at("patient_id").get<std::string>();
        r.slice_indices = rj.at("slice_indices").get<std::vector<std::size_t>>();
        r.targets = rj.at("targets").get<std::vector<double>>();
        const std::size_t h = rj.at("target_size").get<std::size_t>();
        const auto blob =
            read_blob<double>(dir / "records" / rj.at("blob").get<std::string>(),
                              r.slice_indices.size() * h * h);
        for (std::size_t s = 0; s < r.slice_indices.size(); ++s)
            r.slices.emplace_back(blob.begin() + static_cast<std::ptrdiff_t>(s * h * h),
                                  blob.begin() + static_cast<std::ptrdiff_t>((s + 1) * h * h));
        if (r.targets.size() != build.gene_ids.size())
            throw input_error("record '" + r.patient_id + "' target length mismatch");
        build.records.push_back(std::move(r));
        build.splits.push_back(p.at("split").get<std::string>());
    }
    for (const auto& e : j.at("excluded"))
        build.exclusions.emplace_back(e.at("id").get<std::string>(),
                                      e.at("reason").get<std::string>());
    build.warnings = j.at("warnings").get<std::vector<std::string>>();
    build.digest = j.at("digest").get<std::string>();
    if (detail::cohort_digest(build, cfg.target_size) != build.digest)
        throw input_error("cohort digest mismatch in " + dir.string());
    return build;
}

// Raw layout: volumes/vol_<id>.json(+.bin), masks/mask_<id>.json(+.bin),
// expression.tsv. Volumes without a paired mask are excluded, not fatal.
inline CohortBuild preprocess_directory(const std::filesystem::path& raw_dir,
                                        const PipelineConfig& cfg) {
    const auto vol_dir = raw_dir / "volumes";
    if (!std::filesystem::is_directory(vol_dir))
        throw input_error("missing volumes directory: " + vol_dir.string());
    const ExpressionMatrix em = load_expression(raw_dir / "expression.tsv");

    std::vector<std::filesystem::path> sidecars;
    for (const auto& e : std::filesystem::directory_iterator(vol_dir))
        if (e.is_regular_file() && e.path().extension() == ".json") sidecars.push_back(e.path());
    std::sort(sidecars.begin(), sidecars.end());

    std::vector<PatientSource> sources;
    std::vector<std::pair<std::string, std::string>> unpaired;
    for (const auto& vp : sidecars) {
        const json vj = read_json_file(vp);
        const std::string id = vj.at("patient_id").get<std::string>();
        const auto mask_path = raw_dir / "masks" / ("mask_" + id + ".json");
        if (!std::filesystem::exists(mask_path)) {
            unpaired.emplace_back(id, "no tumor mask");
            continue;
        }
        sources.push_back({id, [vp, mask_path] {
                               return std::pair{load_volume(vp), load_mask(mask_path)};
                           }});
    }

    CohortBuild build = build_cohort(sources, em, cfg);
    build.exclusions.insert(build.exclusions.end(), unpaired.begin(), unpaired.end());
    std::sort(build.exclusions.begin(), build.exclusions.end());
    return build;
}

}  // namespace voxgene
