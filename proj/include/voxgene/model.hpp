#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "voxgene/digest.hpp"
#include "voxgene/error.hpp"
#include "voxgene/io.hpp"
#include "voxgene/layers.hpp"
#include "voxgene/rng.hpp"
#include "voxgene/tensor.hpp"

namespace voxgene {

struct ModelConfig {
    std::size_t input_size = 64;  // square slices, H = W
    std::vector<std::size_t> cnn_channels = {8, 16, 32};
    std::size_t token_dim = 128;
    std::size_t encoder_layers = 8;
    std::size_t heads = 4;
    std::size_t mlp_hidden = 256;
    double head_dropout = 0.5;
    std::size_t gene_count = 0;
    std::uint64_t seed = 0;

    std::size_t stages() const { return cnn_channels.size(); }

    std::size_t grid() const {
        std::size_t g = input_size;
        for (std::size_t i = 0; i < stages(); ++i) g /= 2;
        return g;
    }

    std::size_t tokens() const { return grid() * grid(); }

    void validate() const {
        if (encoder_layers < 1) throw config_error("encoder_layers must be >= 1");
        if (heads == 0 || token_dim % heads != 0)
            throw config_error("token_dim " + std::to_string(token_dim) +
                               " must be divisible by heads " + std::to_string(heads));
        if (gene_count < 1) throw config_error("gene_count must be >= 1");
        if (cnn_channels.empty()) throw config_error("at least one CNN stage required");
        if (head_dropout < 0.0 || head_dropout >= 1.0)
            throw config_error("head_dropout must be in [0,1)");
        std::size_t s = input_size;
        for (std::size_t i = 0; i < stages(); ++i) {
            if (s % 2 != 0)
                throw config_error("input_size " + std::to_string(input_size) +
                                   " not divisible by 2^" + std::to_string(stages()));
            s /= 2;
        }
        if (s == 0) throw config_error("CNN stages collapse the slice to nothing");
    }

    json to_json() const {
        return json{{"input_size", input_size}, {"cnn_channels", cnn_channels},
                    {"token_dim", token_dim},   {"encoder_layers", encoder_layers},
                    {"heads", heads},           {"mlp_hidden", mlp_hidden},
                    {"head_dropout", head_dropout}, {"gene_count", gene_count},
                    {"seed", seed}};
    }

    static ModelConfig from_json(const json& j) {
        ModelConfig c;
        c.input_size = j.at("input_size").get<std::size_t>();
        c.cnn_channels = j.at("cnn_channels").get<std::vector<std::size_t>>();
        c.token_dim = j.at("token_dim").get<std::size_t>();
        c.encoder_layers = j.at("encoder_layers").get<std::size_t>();
        c.heads = j.at("heads").get<std::size_t>();
        c.mlp_hidden = j.at("mlp_hidden").get<std::size_t>();
        c.head_dropout = j.at("head_dropout").get<double>();
        c.gene_count = j.at("gene_count").get<std::size_t>();
        c.seed = j.at("seed").get<std::uint64_t>();
        return c;
    }
};

// Per-gene affine map fitted on the training split: targets are log1p
// transformed, then standardized gene-by-gene. Stored in the checkpoint so
// predictions can be mapped back to expression space.
struct GeneTargetTransform {
    std::vector<double> mean;
    std::vector<double> stddev;

    // raw_targets: one vector of per-gene raw expression per patient
    static GeneTargetTransform fit(std::span<const std::vector<double>> raw_targets) {
        if (raw_targets.empty()) throw input_error("cannot fit target transform on empty split");
        const std::size_t genes = raw_targets[0].size();
        GeneTargetTransform t;
        t.mean.assign(genes, 0.0);
        t.stddev.assign(genes, 0.0);
        const double n = static_cast<double>(raw_targets.size());
        for (const auto& row : raw_targets) {
            if (row.size() != genes) throw dimension_error("inconsistent target lengths");
            for (std::size_t g = 0; g < genes; ++g) t.mean[g] += std::log1p(row[g]);
        }
        for (std::size_t g = 0; g < genes; ++g) t.mean[g] /= n;
        for (const auto& row : raw_targets)
            for (std::size_t g = 0; g < genes; ++g) {
                const double c = std::log1p(row[g]) - t.mean[g];
                t.stddev[g] += c * c;
            }
        for (std::size_t g = 0; g < genes; ++g) {
            t.stddev[g] = std::sqrt(t.stddev[g] / n);
            if (!(t.stddev[g] > 0.0))
                throw numeric_error("gene " + std::to_string(g) +
                                    " has zero variance on the training split; filter it out");
        }
        return t;
    }

    std::vector<double> apply(const std::vector<double>& raw) const {
        if (raw.size() != mean.size())
            throw dimension_error("target length " + std::to_string(raw.size()) +
                                  " does not match transform size " + std::to_string(mean.size()));
        std::vector<double> out(raw.size());
        for (std::size_t g = 0; g < raw.size(); ++g)
            out[g] = (std::log1p(raw[g]) - mean[g]) / stddev[g];
        return out;
    }
};

// The encoder: CNN stages (k3 s2 p1 + ReLU), per-position token projection,
// learned positional embeddings, pre-norm transformer stack, final layernorm,
// then a dropout + width-1 conv head averaged over tokens.
class EncoderModel {
public:
    explicit EncoderModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        Rng init = Rng(cfg_.seed).substream("init");
        std::size_t in_ch = 1;
        for (std::size_t s = 0; s < cfg_.stages(); ++s) {
            const std::size_t out_ch = cfg_.cnn_channels[s];
            const double stddev = std::sqrt(2.0 / static_cast<double>(in_ch * 9));
            params_.add("enc.stage" + std::to_string(s) + ".w",
                        trunc_normal_param({out_ch, in_ch, 3, 3}, stddev, init));
            params_.add("enc.stage" + std::to_string(s) + ".b", zeros_param({out_ch}));
            in_ch = out_ch;
        }
        params_.add("enc.proj.w", trunc_normal_param({in_ch, cfg_.token_dim}, 0.02, init));
        params_.add("enc.proj.b", zeros_param({cfg_.token_dim}));
        params_.add("enc.pos", trunc_normal_param({cfg_.tokens(), cfg_.token_dim}, 0.02, init));
        for (std::size_t l = 0; l < cfg_.encoder_layers; ++l) {
            const std::string prefix = "enc.l" + std::to_string(l);
            add_transformer_layer_params(params_, prefix, cfg_.token_dim, cfg_.mlp_hidden, init);
            // residual branches start at zero so every block begins as the
            // identity; the head then trains against clean CNN tokens from the
            // first step and the blocks fade in through their own gradients
            for (const char* w : {".attn.o.w", ".mlp.w2"}) {
                auto& vals = params_.at(prefix + w).values();
                std::fill(vals.begin(), vals.end(), 0.0);
            }
        }
        params_.add("enc.final.g", ones_param({cfg_.token_dim}));
        params_.add("enc.final.b", zeros_param({cfg_.token_dim}));
        params_.add("head.w", trunc_normal_param({cfg_.gene_count, cfg_.token_dim}, 0.02, init));
        params_.add("head.b", zeros_param({cfg_.gene_count}));
    }

    const ModelConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    // slice[1 x H x W] -> tokens[T x D]
    Tensor encode_slice(Tape& tape, const Tensor& slice,
                        std::vector<Tensor>* attn = nullptr) const {
        if (slice.ndim() != 3 || slice.dim(0) != 1 || slice.dim(1) != cfg_.input_size ||
            slice.dim(2) != cfg_.input_size)
            throw dimension_error("slice shape " + shape_str(slice.shape()) + ", expected [1x" +
                                  std::to_string(cfg_.input_size) + "x" +
                                  std::to_string(cfg_.input_size) + "]");
        Tensor x = slice;
        for (std::size_t s = 0; s < cfg_.stages(); ++s) {
            const std::string p = "enc.stage" + std::to_string(s);
            x = tape.relu(conv2d(tape, x, params_.at(p + ".w"), params_.at(p + ".b"), 2, 1));
        }
        Tensor tok = linear(tape, tape.tokens_from_chw(x), params_.at("enc.proj.w"),
                            params_.at("enc.proj.b"));
        tok = tape.add(tok, params_.at("enc.pos"));
        for (std::size_t l = 0; l < cfg_.encoder_layers; ++l)
            tok = transformer_layer(tape, tok, params_, "enc.l" + std::to_string(l), cfg_.heads,
                                    attn);
        return layernorm(tape, tok, params_.at("enc.final.g"), params_.at("enc.final.b"));
    }

    // Per-slice token grids averaged elementwise; exactly invariant to slice
    // order and to duplication of the whole list.
    Tensor embed_patient(Tape& tape, std::span<const Tensor> slices) const {
        if (slices.empty()) throw input_error("embed_patient requires at least one slice");
        std::vector<Tensor> grids;
        grids.reserve(slices.size());
        for (const auto& s : slices) grids.push_back(encode_slice(tape, s));
        if (grids.size() == 1) return grids[0];
        return tape.mean_stack(grids);
    }

    // tokens[T x D] -> dropout -> width-1 conv D->G per token -> mean over tokens
    Tensor predict_genes(Tape& tape, const Tensor& emb, bool train, Rng& dropout_stream) const {
        if (emb.ndim() != 2 || emb.dim(1) != cfg_.token_dim)
            throw dimension_error("embedding width " + shape_str(emb.shape()) +
                                  " does not match head input " + std::to_string(cfg_.token_dim));
        const Tensor dropped =
            dropout(tape, emb, DropoutConfig{cfg_.head_dropout, train}, dropout_stream);
        const Tensor per_token = conv1d_k1(tape, dropped, params_.at("head.w"), params_.at("head.b"));
        return tape.mean_rows(per_token);
    }

    Tensor forward_patient(Tape& tape, std::span<const Tensor> slices, bool train,
                           Rng& dropout_stream) const {
        return predict_genes(tape, embed_patient(tape, slices), train, dropout_stream);
    }

private:
    ModelConfig cfg_;
    ParamStore params_;
};

inline Tensor mse_loss(Tape& tape, const Tensor& pred, const Tensor& target) {
    if (pred.shape() != target.shape())
        throw dimension_error("mse_loss shape mismatch: " + shape_str(pred.shape()) + " vs " +
                              shape_str(target.shape()));
    const Tensor d = tape.sub(pred, target);
    return tape.mean(tape.mul(d, d));
}

// ---- checkpointing ----

// Loss fields may legitimately be NaN (a checkpoint written before any epoch
// ran); JSON has no NaN literal, so those round-trip as null.
inline json loss_to_json(double v) {
    if (std::isnan(v)) return nullptr;
    return v;
}

inline double loss_from_json(const json& j) {
    if (j.is_null()) return std::numeric_limits<double>::quiet_NaN();
    return j.get<double>();
}

struct TrainingMeta {
    std::size_t epochs = 0;
    std::size_t best_epoch = 0;
    double final_train_loss = std::numeric_limits<double>::quiet_NaN();
    double final_val_loss = std::numeric_limits<double>::quiet_NaN();
    double best_val_loss = std::numeric_limits<double>::quiet_NaN();
    std::uint64_t seed = 0;
    std::string data_digest;
};

struct CheckpointParam {
    std::string name;
    Shape shape;
    std::vector<double> values;
};

struct Checkpoint {
    ModelConfig config;
    std::vector<CheckpointParam> params;  // creation order
    GeneTargetTransform transform;
    std::vector<std::string> gene_ids;
    TrainingMeta meta;

    std::string digest() const {
        Digest d;
        for (const auto& p : params) {
            d.update(p.name);
            for (std::size_t dim : p.shape) d.update_u64(dim);
            d.update_doubles(p.values);
        }
        d.update(config.to_json().dump());
        for (const auto& g : gene_ids) d.update(g);
        d.update_doubles(transform.mean);
        d.update_doubles(transform.stddev);
        d.update_u64(meta.epochs);
        d.update_u64(meta.best_epoch);
        d.update_double(meta.final_train_loss);
        d.update_double(meta.final_val_loss);
        d.update_double(meta.best_val_loss);
        d.update_u64(meta.seed);
        d.update(meta.data_digest);
        return d.hex();
    }
};

inline Checkpoint checkpoint_from_model(const EncoderModel& model, GeneTargetTransform transform,
                                        std::vector<std::string> gene_ids, TrainingMeta meta) {
    Checkpoint ck;
    ck.config = model.config();
    for (std::size_t i = 0; i < model.params().size(); ++i) {
        const Tensor& t = model.params().tensor(i);
        ck.params.push_back({model.params().name(i), t.shape(), t.values()});
    }
    ck.transform = std::move(transform);
    ck.gene_ids = std::move(gene_ids);
    ck.meta = std::move(meta);
    return ck;
}

// Manifest at `path` (JSON) and the little-endian f64 parameter blob beside
// it with a .bin extension. `run_config` is an optional provenance echo; it
// is not part of the checkpoint digest.
inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck,
                            const json* run_config = nullptr) {
    std::vector<double> blob;
    json index = json::array();
    std::size_t offset = 0;
    for (const auto& p : ck.params) {
        index.push_back(json{{"name", p.name},
                             {"shape", p.shape},
                             {"offset", offset},
                             {"count", p.values.size()}});
        blob.insert(blob.end(), p.values.begin(), p.values.end());
        offset += p.values.size();
    }
    json j;
    j["format"] = "voxgene-checkpoint-v1";
    j["config"] = ck.config.to_json();
    j["params"] = index;
    j["gene_ids"] = ck.gene_ids;
    j["target_transform"] = json{{"mean", ck.transform.mean}, {"stddev", ck.transform.stddev}};
    j["training_meta"] = json{{"epochs", ck.meta.epochs},
                              {"best_epoch", ck.meta.best_epoch},
                              {"final_train_loss", loss_to_json(ck.meta.final_train_loss)},
                              {"final_val_loss", loss_to_json(ck.meta.final_val_loss)},
                              {"best_val_loss", loss_to_json(ck.meta.best_val_loss)},
                              {"seed", ck.meta.seed},
                              {"data_digest", ck.meta.data_digest}};
    std::filesystem::path blob_file = path;
    blob_file.replace_extension(".bin");
    j["blob"] = blob_file.filename().string();
    j["digest"] = ck.digest();
    if (run_config) j["run_config"] = *run_config;
    write_json_file(path, j);
    write_blob(blob_file, blob);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    const json j = read_json_file(path);
    if (!j.contains("format") || j["format"] != "voxgene-checkpoint-v1")
        throw input_error("not a checkpoint manifest: " + path.string());
    Checkpoint ck;
    ck.config = ModelConfig::from_json(j.at("config"));
    ck.gene_ids = j.at("gene_ids").get<std::vector<std::string>>();
    ck.transform.mean = j.at("target_transform").at("mean").get<std::vector<double>>();
    ck.transform.stddev = j.at("target_transform").at("stddev").get<std::vector<double>>();
    const auto& m = j.at("training_meta");
    ck.meta.epochs = m.at("epochs").get<std::size_t>();
    ck.meta.best_epoch = m.at("best_epoch").get<std::size_t>();
    ck.meta.final_train_loss = loss_from_json(m.at("final_train_loss"));
    ck.meta.final_val_loss = loss_from_json(m.at("final_val_loss"));
    ck.meta.best_val_loss = loss_from_json(m.at("best_val_loss"));
    ck.meta.seed = m.at("seed").get<std::uint64_t>();
    ck.meta.data_digest = m.at("data_digest").get<std::string>();
    std::size_t total = 0;
    for (const auto& e : j.at("params")) total += e.at("count").get<std::size_t>();
    const auto blob = read_blob<double>(
        path.parent_path() / j.at("blob").get<std::string>(), total);
    for (const auto& e : j.at("params")) {
        const auto off = e.at("offset").get<std::size_t>();
        const auto count = e.at("count").get<std::size_t>();
        if (off + count > blob.size())
            throw input_error("checkpoint parameter index exceeds blob size");
        ck.params.push_back(
            {e.at("name").get<std::string>(), e.at("shape").get<Shape>(),
             std::vector<double>(blob.begin() + static_cast<std::ptrdiff_t>(off),
                                 blob.begin() + static_cast<std::ptrdiff_t>(off + count))});
    }
    const std::string expect = j.at("digest").get<std::string>();
    if (ck.digest() != expect)
        throw input_error("checkpoint digest mismatch in " + path.string());
    return ck;
}

// Rebuilds a model and overwrites its parameters with the checkpoint blob.
inline EncoderModel model_from_checkpoint(const Checkpoint& ck) {
    EncoderModel model(ck.config);
    if (model.params().size() != ck.params.size())
        throw input_error("checkpoint parameter count does not match architecture");
    for (std::size_t i = 0; i < ck.params.size(); ++i) {
        const auto& p = ck.params[i];
        if (model.params().name(i) != p.name)
            throw input_error("checkpoint parameter order mismatch at '" + p.name + "'");
        if (model.params().tensor(i).shape() != p.shape)
            throw input_error("checkpoint parameter shape mismatch at '" + p.name + "'");
        model.params().tensor(i).values() = p.values;
    }
    return model;
}

}  // namespace voxgene
