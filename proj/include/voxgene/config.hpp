#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "voxgene/error.hpp"
#include "voxgene/evaluate.hpp"
#include "voxgene/io.hpp"
#include "voxgene/model.hpp"
#include "voxgene/pipeline.hpp"
#include "voxgene/synth.hpp"
#include "voxgene/train.hpp"

namespace voxgene {

// One config drives every subcommand. A single top-level seed fans out to the
// named substreams (split, init, shuffle, dropout, synth, perm); per-section
// seeds are resolved from it and are not configuration keys.
struct RunConfig {
    std::uint64_t seed = 1;
    int threads = 0;  // 0 = hardware concurrency
    PipelineConfig data;
    ModelConfig model;  // gene_count resolved from the cohort at train time
    TrainConfig train;
    EvalConfig eval;
    PlantSpec synth;

    void resolve_seeds() {
        data.seed = seed;
        model.seed = seed;
        train.seed = seed;
        eval.seed = seed;
        synth.seed = seed;
    }
};

namespace detail {

inline void require_known_keys(const json& section, const std::string& name,
                               const std::set<std::string>& allowed) {
    if (!section.is_object())
        throw config_error("config section '" + name + "' must be an object");
    for (const auto& [key, _] : section.items())
        if (!allowed.count(key))
            throw config_error("unknown config key '" + key + "' in section '" + name + "'");
}

template <class T>
void read_key(const json& section, const std::string& key, T& out) {
    if (!section.contains(key)) return;
    try {
        out = section.at(key).get<T>();
    } catch (const json::exception& e) {
        throw config_error("bad value for config key '" + key + "': " + e.what());
    }
}

}  // namespace detail

inline RunConfig parse_run_config(const json& j) {
    detail::require_known_keys(j, "(top level)",
                               {"seed", "threads", "data", "model", "train", "eval", "synth"});
    RunConfig cfg;
    detail::read_key(j, "seed", cfg.seed);
    detail::read_key(j, "threads", cfg.threads);
    if (j.contains("data")) {
        const json& s = j.at("data");
        detail::require_known_keys(s, "data",
                                   {"target_size", "min_tumor_voxels", "max_slices_per_patient",
                                    "train_fraction", "val_fraction"});
        detail::read_key(s, "target_size", cfg.data.target_size);
        detail::read_key(s, "min_tumor_voxels", cfg.data.min_tumor_voxels);
        detail::read_key(s, "max_slices_per_patient", cfg.data.max_slices_per_patient);
        detail::read_key(s, "train_fraction", cfg.data.train_fraction);
        detail::read_key(s, "val_fraction", cfg.data.val_fraction);
    }
    if (j.contains("model")) {
        const json& s = j.at("model");
        detail::require_known_keys(s, "model",
                                   {"input_size", "cnn_channels", "token_dim", "encoder_layers",
                                    "heads", "mlp_hidden", "head_dropout"});
        detail::read_key(s, "input_size", cfg.model.input_size);
        detail::read_key(s, "cnn_channels", cfg.model.cnn_channels);
        detail::read_key(s, "token_dim", cfg.model.token_dim);
        detail::read_key(s, "encoder_layers", cfg.model.encoder_layers);
        detail::read_key(s, "heads", cfg.model.heads);
        detail::read_key(s, "mlp_hidden", cfg.model.mlp_hidden);
        detail::read_key(s, "head_dropout", cfg.model.head_dropout);
    }
    if (j.contains("train")) {
        const json& s = j.at("train");
        detail::require_known_keys(s, "train", {"epochs", "lr", "batch"});
        detail::read_key(s, "epochs", cfg.train.epochs);
        detail::read_key(s, "lr", cfg.train.lr);
        detail::read_key(s, "batch", cfg.train.batch);
    }
    if (j.contains("eval")) {
        const json& s = j.at("eval");
        detail::require_known_keys(s, "eval",
                                   {"alpha", "permutation_fallback_n", "permutations"});
        detail::read_key(s, "alpha", cfg.eval.alpha);
        detail::read_key(s, "permutation_fallback_n", cfg.eval.permutation_fallback_n);
        detail::read_key(s, "permutations", cfg.eval.permutations);
    }
    if (j.contains("synth")) {
        const json& s = j.at("synth");
        detail::require_known_keys(
            s, "synth",
            {"latent_dim", "planted_genes", "null_genes", "noise_std", "n_patients",
             "volume_size", "spacing", "radius_min", "radius_max", "intensity_min",
             "intensity_max", "background_noise", "baseline", "modality"});
        detail::read_key(s, "latent_dim", cfg.synth.latent_dim);
        detail::read_key(s, "planted_genes", cfg.synth.planted_genes);
        detail::read_key(s, "null_genes", cfg.synth.null_genes);
        detail::read_key(s, "noise_std", cfg.synth.noise_std);
        detail::read_key(s, "n_patients", cfg.synth.n_patients);
        detail::read_key(s, "volume_size", cfg.synth.volume_size);
        detail::read_key(s, "spacing", cfg.synth.spacing);
        detail::read_key(s, "radius_min", cfg.synth.radius_min);
        detail::read_key(s, "radius_max", cfg.synth.radius_max);
        detail::read_key(s, "intensity_min", cfg.synth.intensity_min);
        detail::read_key(s, "intensity_max", cfg.synth.intensity_max);
        detail::read_key(s, "background_noise", cfg.synth.background_noise);
        detail::read_key(s, "baseline", cfg.synth.baseline);
        detail::read_key(s, "modality", cfg.synth.modality);
    }
    cfg.resolve_seeds();
    return cfg;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    return parse_run_config(read_json_file(path));
}

// The echo emitted into manifests; it parses back through parse_run_config.
inline json run_config_to_json(const RunConfig& cfg) {
    json j;
    j["seed"] = cfg.seed;
    j["threads"] = cfg.threads;
    j["data"] = json{{"target_size", cfg.data.target_size},
                     {"min_tumor_voxels", cfg.data.min_tumor_voxels},
                     {"max_slices_per_patient", cfg.data.max_slices_per_patient},
                     {"train_fraction", cfg.data.train_fraction},
                     {"val_fraction", cfg.data.val_fraction}};
    j["model"] = json{{"input_size", cfg.model.input_size},
                      {"cnn_channels", cfg.model.cnn_channels},
                      {"token_dim", cfg.model.token_dim},
                      {"encoder_layers", cfg.model.encoder_layers},
                      {"heads", cfg.model.heads},
                      {"mlp_hidden", cfg.model.mlp_hidden},
                      {"head_dropout", cfg.model.head_dropout}};
    j["train"] = json{{"epochs", cfg.train.epochs}, {"lr", cfg.train.lr},
                      {"batch", cfg.train.batch}};
    j["eval"] = json{{"alpha", cfg.eval.alpha},
                     {"permutation_fallback_n", cfg.eval.permutation_fallback_n},
                     {"permutations", cfg.eval.permutations}};
    json s = cfg.synth.to_json();
    s.erase("seed");
    j["synth"] = s;
    return j;
}

}  // namespace voxgene
