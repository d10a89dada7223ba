#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "voxgene/digest.hpp"
#include "voxgene/error.hpp"
#include "voxgene/io.hpp"

namespace voxgene {

// Volumes compute in double; the on-disk blob is little-endian 32-bit float,
// so values are rounded once at write time.
struct Volume {
    std::size_t nx = 0, ny = 0, nz = 0;
    double sx = 1.0, sy = 1.0, sz = 1.0;  // mm per voxel
    std::string modality = "MRI";         // CT or MRI
    std::string patient_id;
    std::vector<double> voxels;  // x-fastest: index = (z*ny + y)*nx + x

    std::size_t count() const { return nx * ny * nz; }

    double at(std::size_t x, std::size_t y, std::size_t z) const {
        return voxels[(z * ny + y) * nx + x];
    }
    double& at(std::size_t x, std::size_t y, std::size_t z) {
        return voxels[(z * ny + y) * nx + x];
    }

    void validate() const {
        if (nx < 1 || ny < 1 || nz < 1) throw input_error("volume dims must all be >= 1");
        if (!(sx > 0.0) || !(sy > 0.0) || !(sz > 0.0) || !std::isfinite(sx) ||
            !std::isfinite(sy) || !std::isfinite(sz))
            throw input_error("volume spacing must be finite and positive");
        if (voxels.size() != count())
            throw input_error("volume voxel count " + std::to_string(voxels.size()) +
                              " does not match dims");
        if (modality != "CT" && modality != "MRI")
            throw input_error("modality must be CT or MRI, got '" + modality + "'");
    }
};

struct TumorMask {
    std::size_t nx = 0, ny = 0, nz = 0;
    std::string patient_id;
    std::vector<std::uint8_t> labels;  // same layout as the paired volume

    std::size_t count() const { return nx * ny * nz; }

    std::uint8_t at(std::size_t x, std::size_t y, std::size_t z) const {
        return labels[(z * ny + y) * nx + x];
    }

    void validate_against(const Volume& v) const {
        if (nx != v.nx || ny != v.ny || nz != v.nz)
            throw input_error("mask dims do not match volume for patient '" + v.patient_id + "'");
        if (labels.size() != count()) throw input_error("mask label count does not match dims");
    }
};

namespace detail {

inline std::filesystem::path blob_path(const std::filesystem::path& manifest_path) {
    std::filesystem::path p = manifest_path;
    p.replace_extension(".bin");
    return p;
}

}  // namespace detail

// Sidecar JSON at `path`, f32 voxel blob next to it with a .bin extension.
inline void save_volume(const std::filesystem::path& path, const Volume& v) {
    v.validate();
    const auto blob = detail::blob_path(path);
    json j;
    j["format"] = "voxgene-volume-v1";
    j["dims"] = {v.nx, v.ny, v.nz};
    j["spacing"] = {v.sx, v.sy, v.sz};
    j["modality"] = v.modality;
    j["patient_id"] = v.patient_id;
    j["blob"] = blob.filename().string();
    write_json_file(path, j);
    std::vector<float> f(v.voxels.size());
    for (std::size_t i = 0; i < f.size(); ++i) f[i] = static_cast<float>(v.voxels[i]);
    write_blob(blob, f);
}

inline Volume load_volume(const std::filesystem::path& path) {
    const json j = read_json_file(path);
    if (!j.contains("format") || j["format"] != "voxgene-volume-v1")
        throw input_error("not a volume sidecar: " + path.string());
    Volume v;
    const auto dims = j.at("dims").get<std::vector<std::size_t>>();
    const auto spacing = j.at("spacing").get<std::vector<double>>();
    if (dims.size() != 3 || spacing.size() != 3)
        throw input_error("volume sidecar needs 3 dims and 3 spacings: " + path.string());
    v.nx = dims[0];
    v.ny = dims[1];
    v.nz = dims[2];
    v.sx = spacing[0];
    v.sy = spacing[1];
    v.sz = spacing[2];
    v.modality = j.at("modality").get<std::string>();
    v.patient_id = j.at("patient_id").get<std::string>();
    const auto f = read_blob<float>(path.parent_path() / j.at("blob").get<std::string>(),
                                    v.count());
    v.voxels.assign(f.begin(), f.end());
    v.validate();
    return v;
}

inline void save_mask(const std::filesystem::path& path, const TumorMask& m) {
    const auto blob = detail::blob_path(path);
    json j;
    j["format"] = "voxgene-mask-v1";
    j["dims"] = {m.nx, m.ny, m.nz};
    j["patient_id"] = m.patient_id;
    j["blob"] = blob.filename().string();
    write_json_file(path, j);
    write_blob(blob, m.labels);
}

inline TumorMask load_mask(const std::filesystem::path& path) {
    const json j = read_json_file(path);
    if (!j.contains("format") || j["format"] != "voxgene-mask-v1")
        throw input_error("not a mask sidecar: " + path.string());
    TumorMask m;
    const auto dims = j.at("dims").get<std::vector<std::size_t>>();
    if (dims.size() != 3) throw input_error("mask sidecar needs 3 dims: " + path.string());
    m.nx = dims[0];
    m.ny = dims[1];
    m.nz = dims[2];
    m.patient_id = j.at("patient_id").get<std::string>();
    m.labels = read_blob<std::uint8_t>(path.parent_path() / j.at("blob").get<std::string>(),
                                       m.count());
    return m;
}

// Genes as rows, patients as columns; values are non-negative expression.
struct ExpressionMatrix {
    std::vector<std::string> gene_ids;
    std::vector<std::string> patient_ids;
    std::vector<double> values;  // row-major genes x patients

    std::size_t genes() const { return gene_ids.size(); }
    std::size_t patients() const { return patient_ids.size(); }

    double at(std::size_t g, std::size_t p) const { return values[g * patients() + p]; }
    double& at(std::size_t g, std::size_t p) { return values[g * patients() + p]; }

    std::vector<double> gene_row(std::size_t g) const {
        return {values.begin() + static_cast<std::ptrdiff_t>(g * patients()),
                values.begin() + static_cast<std::ptrdiff_t>((g + 1) * patients())};
    }

    std::vector<double> patient_column(std::size_t p) const {
        std::vector<double> col(genes());
        for (std::size_t g = 0; g < genes(); ++g) col[g] = at(g, p);
        return col;
    }

    void validate() const {
        if (values.size() != genes() * patients())
            throw input_error("expression value count does not match genes x patients");
        std::unordered_set<std::string> seen;
        for (const auto& g : gene_ids)
            if (!seen.insert(g).second) throw input_error("duplicate gene id '" + g + "'");
        seen.clear();
        for (const auto& p : patient_ids)
            if (!seen.insert(p).second) throw input_error("duplicate patient id '" + p + "'");
        for (double v : values)
            if (!(v >= 0.0)) throw input_error("expression values must be non-negative finite");
    }
};

// Tab-separated: header row `gene_id <patient...>`, one row per gene.
inline void save_expression(const std::filesystem::path& path, const ExpressionMatrix& em) {
    em.validate();
    std::ostringstream os;
    os.precision(17);
    os << "gene_id";
    for (const auto& p : em.patient_ids) os << "\t" << p;
    os << "\n";
    for (std::size_t g = 0; g < em.genes(); ++g) {
        os << em.gene_ids[g];
        for (std::size_t p = 0; p < em.patients(); ++p) os << "\t" << em.at(g, p);
        os << "\n";
    }
    write_text_file(path, os.str());
}

inline ExpressionMatrix load_expression(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw input_error("cannot open expression matrix: " + path.string());
    ExpressionMatrix em;
    std::string line;
    if (!std::getline(in, line)) throw input_error("empty expression matrix: " + path.string());
    {
        std::istringstream hs(line);
        std::string cell;
        if (!std::getline(hs, cell, '\t') || cell != "gene_id")
            throw input_error("expression header must start with 'gene_id': " + path.string());
        while (std::getline(hs, cell, '\t')) em.patient_ids.push_back(cell);
    }
    if (em.patient_ids.empty())
        throw input_error("expression matrix has no patient columns: " + path.string());
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string cell;
        if (!std::getline(ls, cell, '\t'))
            throw input_error("malformed expression row at line " + std::to_string(lineno));
        em.gene_ids.push_back(cell);
        std::size_t got = 0;
        while (std::getline(ls, cell, '\t')) {
            std::size_t pos = 0;
            double v;
            try {
                v = std::stod(cell, &pos);
            } catch (const std::exception&) {
                throw input_error("non-numeric expression value '" + cell + "' at line " +
                                  std::to_string(lineno));
            }
            if (pos != cell.size())
                throw input_error("non-numeric expression value '" + cell + "' at line " +
                                  std::to_string(lineno));
            em.values.push_back(v);
            ++got;
        }
        if (got != em.patient_ids.size())
            throw input_error("expression row at line " + std::to_string(lineno) + " has " +
                              std::to_string(got) + " values, expected " +
                              std::to_string(em.patient_ids.size()));
    }
    em.validate();
    return em;
}

inline std::string expression_digest(const ExpressionMatrix& em) {
    Digest d;
    for (const auto& g : em.gene_ids) d.update(g);
    for (const auto& p : em.patient_ids) d.update(p);
    d.update_doubles(em.values);
    return d.hex();
}

}  // namespace voxgene
