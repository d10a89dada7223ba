#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "voxgene/adam.hpp"
#include "voxgene/error.hpp"
#include "voxgene/io.hpp"
#include "voxgene/model.hpp"
#include "voxgene/pipeline.hpp"
#include "voxgene/rng.hpp"
#include "voxgene/tensor.hpp"

namespace voxgene {

struct PatientSample {
    std::string id;
    std::vector<Tensor> slices;        // each [1 x H x H]
    std::vector<double> raw_targets;   // per-gene raw expression
};

struct TrainDataset {
    std::vector<PatientSample> patients;
    std::vector<std::size_t> train_idx;
    std::vector<std::size_t> val_idx;
    std::vector<std::string> gene_ids;
    std::string data_digest;
};

struct TrainConfig {
    std::size_t epochs = 30;
    double lr = 3e-4;
    std::size_t batch = 8;
    std::uint64_t seed = 0;

    void validate() const {
        if (batch == 0) throw config_error("batch size must be >= 1");
        if (!(lr >= 0.0)) throw config_error("learning rate must be >= 0");
    }
};

// View of a preprocessed cohort as model inputs: slices become [1 x H x H]
// tensors, targets stay raw (the transform is fitted inside train()).
inline TrainDataset make_train_dataset(const CohortBuild& cohort, std::size_t input_size) {
    TrainDataset data;
    data.gene_ids = cohort.gene_ids;
    data.data_digest = cohort.digest;
    for (std::size_t i = 0; i < cohort.records.size(); ++i) {
        const auto& rec = cohort.records[i];
        PatientSample sample;
        sample.id = rec.patient_id;
        for (const auto& s : rec.slices) {
            if (s.size() != input_size * input_size)
                throw input_error("record '" + rec.patient_id + "' slice size " +
                                  std::to_string(s.size()) + " does not match model input " +
                                  std::to_string(input_size) + "^2");
            sample.slices.emplace_back(Shape{1, input_size, input_size}, s);
        }
        sample.raw_targets = rec.targets;
        if (cohort.splits[i] == "train")
            data.train_idx.push_back(data.patients.size());
        else if (cohort.splits[i] == "val")
            data.val_idx.push_back(data.patients.size());
        data.patients.push_back(std::move(sample));
    }
    return data;
}

struct EpochStats {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double wall_time = 0.0;  // seconds; excluded from every digest
};

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<EpochStats> log;
};

inline std::string training_log_text(std::span<const EpochStats> log) {
    std::ostringstream os;
    os << "epoch\ttrain_loss\tval_loss\twall_time\n";
    os.precision(17);
    for (const auto& e : log)
        os << e.epoch << "\t" << e.train_loss << "\t" << e.val_loss << "\t" << e.wall_time << "\n";
    return os.str();
}

namespace detail {

inline double mean_split_loss(const EncoderModel& model, const TrainDataset& data,
                              std::span<const std::size_t> idx,
                              std::span<const Tensor> targets) {
    Rng unused(0);
    double acc = 0.0;
    for (std::size_t i : idx) {
        Tape tape;
        const Tensor pred =
            model.forward_patient(tape, data.patients[i].slices, /*train=*/false, unused);
        acc += mse_loss(tape, pred, targets[i]).value();
    }
    return acc / static_cast<double>(idx.size());
}

inline std::vector<std::vector<double>> snapshot_params(const ParamStore& ps) {
    std::vector<std::vector<double>> out;
    out.reserve(ps.size());
    for (std::size_t i = 0; i < ps.size(); ++i) out.push_back(ps.tensor(i).values());
    return out;
}

}  // namespace detail

// Minibatch Adam on MSE over the training split with per-epoch validation;
// the returned checkpoint holds the parameters from the epoch with the lowest
// validation loss (the initial parameters if no epoch ran).
inline TrainResult train(const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                         const TrainDataset& data) {
    train_cfg.validate();
    if (data.train_idx.empty()) throw input_error("training split is empty");
    if (data.val_idx.empty()) throw input_error("validation split is empty");
    for (std::size_t i : data.train_idx)
        if (i >= data.patients.size()) throw input_error("train index out of range");
    for (std::size_t i : data.val_idx)
        if (i >= data.patients.size()) throw input_error("validation index out of range");
    if (data.gene_ids.size() != model_cfg.gene_count)
        throw config_error("model gene_count " + std::to_string(model_cfg.gene_count) +
                           " does not match dataset gene count " +
                           std::to_string(data.gene_ids.size()));

    // Target transform is fitted on the training split only.
    std::vector<std::vector<double>> train_rows;
    train_rows.reserve(data.train_idx.size());
    for (std::size_t i : data.train_idx) train_rows.push_back(data.patients[i].raw_targets);
    const GeneTargetTransform transform = GeneTargetTransform::fit(train_rows);

    std::vector<Tensor> targets(data.patients.size());
    for (std::size_t i = 0; i < data.patients.size(); ++i) {
        if (data.patients[i].raw_targets.size() != model_cfg.gene_count)
            throw input_error("patient '" + data.patients[i].id + "' has " +
                              std::to_string(data.patients[i].raw_targets.size()) +
                              " gene values, expected " + std::to_string(model_cfg.gene_count));
        targets[i] = Tensor({model_cfg.gene_count}, transform.apply(data.patients[i].raw_targets));
    }

    EncoderModel model(model_cfg);
    Adam opt(AdamConfig{train_cfg.lr});
    Rng root(train_cfg.seed);
    Rng shuffle_root = root.substream("shuffle");
    Rng dropout_root = root.substream("dropout");

    auto best_params = detail::snapshot_params(model.params());
    double best_val = std::numeric_limits<double>::infinity();
    std::size_t best_epoch = 0;

    TrainResult result;
    double final_train = std::numeric_limits<double>::quiet_NaN();
    double final_val = std::numeric_limits<double>::quiet_NaN();

    std::vector<std::size_t> order(data.train_idx.begin(), data.train_idx.end());
    for (std::size_t epoch = 1; epoch <= train_cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        Rng epoch_shuffle = shuffle_root.substream(epoch);
        epoch_shuffle.shuffle(order);
        Rng epoch_dropout = dropout_root.substream(epoch);

        double loss_sum = 0.0;
        std::size_t batch_id = 0;
        for (std::size_t start = 0; start < order.size(); start += train_cfg.batch, ++batch_id) {
            const std::size_t stop = std::min(start + train_cfg.batch, order.size());
            Rng batch_dropout = epoch_dropout.substream(batch_id);
            Tape tape;
            Tensor batch_loss;
            for (std::size_t b = start; b < stop; ++b) {
                const std::size_t i = order[b];
                const Tensor pred =
                    model.forward_patient(tape, data.patients[i].slices, /*train=*/true,
                                          batch_dropout);
                const Tensor l = mse_loss(tape, pred, targets[i]);
                batch_loss = (b == start) ? l : tape.add(batch_loss, l);
            }
            const double n = static_cast<double>(stop - start);
            const Tensor loss = tape.scale(batch_loss, 1.0 / n);
            if (!std::isfinite(loss.value()))
                throw numeric_error("non-finite training loss at epoch " + std::to_string(epoch) +
                                    " batch " + std::to_string(batch_id));
            loss_sum += batch_loss.value();
            model.params().zero_grads();
            tape.backward(loss);
            opt.step(model.params());
        }
        final_train = loss_sum / static_cast<double>(order.size());

        final_val = detail::mean_split_loss(model, data, data.val_idx, targets);
        if (final_val < best_val) {
            best_val = final_val;
            best_epoch = epoch;
            best_params = detail::snapshot_params(model.params());
        }

        const auto t1 = std::chrono::steady_clock::now();
        result.log.push_back({epoch, final_train, final_val,
                              std::chrono::duration<double>(t1 - t0).count()});
    }

    TrainingMeta meta;
    meta.epochs = train_cfg.epochs;
    meta.best_epoch = best_epoch;
    meta.final_train_loss = final_train;
    meta.final_val_loss = final_val;
    meta.best_val_loss = train_cfg.epochs ? best_val : std::numeric_limits<double>::quiet_NaN();
    meta.seed = train_cfg.seed;
    meta.data_digest = data.data_digest;

    Checkpoint ck;
    ck.config = model_cfg;
    for (std::size_t i = 0; i < model.params().size(); ++i)
        ck.params.push_back({model.params().name(i), model.params().tensor(i).shape(),
                             std::move(best_params[i])});
    ck.transform = transform;
    ck.gene_ids = data.gene_ids;
    ck.meta = meta;
    result.checkpoint = std::move(ck);
    return result;
}

}  // namespace voxgene
